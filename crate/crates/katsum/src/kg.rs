//! Corpus-level knowledge graph and translation-based embedding training.
//!
//! Entities and relations are embedded so that `v_head + v_relation`
//! approximates `v_tail`; a triple's score is the norm of the residual,
//! lower meaning more plausible. Training minimizes a margin hinge between
//! each positive triple and a corrupted negative, with entity vectors
//! renormalized to unit length after every optimizer step.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::triplet::Triplet;

/// Which vector norm scores the residual `v_h + v_r - v_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm '{other}' (expected l1 or l2)"
            ))),
        }
    }
}

/// Id-indexed triple store. Entity and relation ids follow first occurrence
/// in the input triplet list; duplicate (head, relation, tail) triples are
/// stored once.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    pub triples: Vec<(usize, usize, usize)>,
    triple_set: HashSet<(usize, usize, usize)>,
}

impl KnowledgeGraph {
    pub fn entity_id(&self, phrase: &str) -> Option<usize> {
        self.entity_index.get(phrase).copied()
    }

    pub fn relation_id(&self, phrase: &str) -> Option<usize> {
        self.relation_index.get(phrase).copied()
    }

    pub fn contains_triple(&self, triple: (usize, usize, usize)) -> bool {
        self.triple_set.contains(&triple)
    }

    /// Builds a graph directly from id-level triples. Intended for tests and
    /// tools that need graphs not reachable through extraction.
    pub fn from_parts(
        entities: Vec<String>,
        relations: Vec<String>,
        triples: Vec<(usize, usize, usize)>,
    ) -> Self {
        let entity_index = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        let relation_index = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        let triple_set = triples.iter().copied().collect();
        KnowledgeGraph {
            entities,
            relations,
            entity_index,
            relation_index,
            triples,
            triple_set,
        }
    }
}

/// Interns entities (head then tail, per triplet) and relations in first
/// occurrence order and collects the deduplicated triple list.
pub fn build_graph(triplets: &[Triplet]) -> KnowledgeGraph {
    let mut graph = KnowledgeGraph {
        entities: Vec::new(),
        relations: Vec::new(),
        entity_index: HashMap::new(),
        relation_index: HashMap::new(),
        triples: Vec::new(),
        triple_set: HashSet::new(),
    };
    for t in triplets {
        let h = intern(&mut graph.entities, &mut graph.entity_index, &t.head);
        let r = intern(&mut graph.relations, &mut graph.relation_index, &t.relation);
        let tl = intern(&mut graph.entities, &mut graph.entity_index, &t.tail);
        if graph.triple_set.insert((h, r, tl)) {
            graph.triples.push((h, r, tl));
        }
    }
    graph
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&id) = index.get(name) {
        return id;
    }
    let id = names.len();
    names.push(name.to_string());
    index.insert(name.to_string(), id);
    id
}

/// Training hyperparameters for the embedding model.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeConfig {
    pub dim: usize,
    pub margin: f64,
    pub norm: Norm,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        KgeConfig {
            dim: 50,
            margin: 1.0,
            norm: Norm::L2,
            lr: 0.01,
            epochs: 100,
            batch: 32,
            seed: 13,
        }
    }
}

/// Trained entity and relation vectors plus the name tables they index.
#[derive(Debug, Clone, PartialEq)]
pub struct KgEmbeddings {
    pub dim: usize,
    pub norm: Norm,
    pub margin: f64,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    pub entity_vecs: Array2<f64>,
    pub relation_vecs: Array2<f64>,
}

impl KgEmbeddings {
    /// Assembles an embedding table from explicit parts, building the
    /// phrase indices. Row counts must match the name lists.
    pub fn from_parts(
        norm: Norm,
        margin: f64,
        entities: Vec<String>,
        relations: Vec<String>,
        entity_vecs: Array2<f64>,
        relation_vecs: Array2<f64>,
    ) -> Self {
        assert_eq!(entities.len(), entity_vecs.nrows());
        assert_eq!(relations.len(), relation_vecs.nrows());
        assert_eq!(entity_vecs.ncols(), relation_vecs.ncols());
        let entity_index = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        let relation_index = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        KgEmbeddings {
            dim: entity_vecs.ncols(),
            norm,
            margin,
            entities,
            relations,
            entity_index,
            relation_index,
            entity_vecs,
            relation_vecs,
        }
    }

    pub fn entity_id(&self, phrase: &str) -> Option<usize> {
        self.entity_index.get(phrase).copied()
    }

    pub fn relation_id(&self, phrase: &str) -> Option<usize> {
        self.relation_index.get(phrase).copied()
    }

    /// Residual norm of `v_h + v_r - v_t`; lower is more plausible.
    pub fn score(&self, h: usize, r: usize, t: usize) -> f64 {
        let diff = residual(
            self.entity_vecs.row(h),
            self.relation_vecs.row(r),
            self.entity_vecs.row(t),
        );
        norm_of(&diff, self.norm)
    }

    /// Concatenation `[v_h; v_r; v_t]`, the classifier's input features.
    pub fn concat_embedding(&self, h: usize, r: usize, t: usize) -> Vec<f64> {
        let mut e = Vec::with_capacity(3 * self.dim);
        e.extend(self.entity_vecs.row(h).iter());
        e.extend(self.relation_vecs.row(r).iter());
        e.extend(self.entity_vecs.row(t).iter());
        e
    }

    /// Concatenated embedding for a phrase-level triplet; errors when any
    /// phrase is not in the graph.
    pub fn embedding_for(&self, triplet: &Triplet) -> Result<Vec<f64>> {
        let h = self.entity_id(&triplet.head).ok_or(Error::UnknownPhrase {
            kind: "entity",
            name: triplet.head.clone(),
        })?;
        let r = self
            .relation_id(&triplet.relation)
            .ok_or(Error::UnknownPhrase {
                kind: "relation",
                name: triplet.relation.clone(),
            })?;
        let t = self.entity_id(&triplet.tail).ok_or(Error::UnknownPhrase {
            kind: "entity",
            name: triplet.tail.clone(),
        })?;
        Ok(self.concat_embedding(h, r, t))
    }

    /// Column-wise mean of the entity table, the fallback vector for
    /// entities unseen at inference time.
    pub fn mean_entity_vec(&self) -> Array1<f64> {
        mean_rows(&self.entity_vecs)
    }

    /// Column-wise mean of the relation table.
    pub fn mean_relation_vec(&self) -> Array1<f64> {
        mean_rows(&self.relation_vecs)
    }

    /// Writes the embedding table: a `dim |E| |R| norm margin` header, then
    /// one `phrase\tv1 .. vdim` line per entity and per relation. Values use
    /// the shortest decimal form that round-trips exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            self.dim,
            self.entities.len(),
            self.relations.len(),
            self.norm.as_str(),
            self.margin
        ));
        let mut write_rows = |names: &[String], vecs: &Array2<f64>| {
            for (name, row) in names.iter().zip(vecs.rows()) {
                out.push_str(name);
                out.push('\t');
                let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&vals.join(" "));
                out.push('\n');
            }
        };
        write_rows(&self.entities, &self.entity_vecs);
        write_rows(&self.relations, &self.relation_vecs);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`KgEmbeddings::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let tsv_err = |line: usize, reason: String| Error::Tsv {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| tsv_err(1, "empty embedding file".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 5 {
            return Err(tsv_err(1, "header must be 'dim |E| |R| norm margin'".into()));
        }
        let dim: usize = parts[0]
            .parse()
            .map_err(|_| tsv_err(1, "bad dim".into()))?;
        let n_ent: usize = parts[1]
            .parse()
            .map_err(|_| tsv_err(1, "bad entity count".into()))?;
        let n_rel: usize = parts[2]
            .parse()
            .map_err(|_| tsv_err(1, "bad relation count".into()))?;
        let norm: Norm = parts[3].parse()?;
        let margin: f64 = parts[4]
            .parse()
            .map_err(|_| tsv_err(1, "bad margin".into()))?;

        let mut read_rows = |count: usize| -> Result<(Vec<String>, Array2<f64>)> {
            let mut names = Vec::with_capacity(count);
            let mut vecs = Array2::zeros((count, dim));
            for i in 0..count {
                let (idx, line) = lines
                    .next()
                    .ok_or_else(|| tsv_err(0, format!("expected {count} rows, found {i}")))?;
                let line_no = idx + 1;
                let (name, values) = line
                    .split_once('\t')
                    .ok_or_else(|| tsv_err(line_no, "missing tab separator".into()))?;
                let parsed: Vec<f64> = values
                    .split(' ')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| tsv_err(line_no, "unparsable vector component".into()))?;
                if parsed.len() != dim {
                    return Err(tsv_err(
                        line_no,
                        format!("expected {dim} components, found {}", parsed.len()),
                    ));
                }
                names.push(name.to_string());
                for (j, v) in parsed.into_iter().enumerate() {
                    vecs[(i, j)] = v;
                }
            }
            Ok((names, vecs))
        };
        let (entities, entity_vecs) = read_rows(n_ent)?;
        let (relations, relation_vecs) = read_rows(n_rel)?;
        Ok(KgEmbeddings::from_parts(
            norm,
            margin,
            entities,
            relations,
            entity_vecs,
            relation_vecs,
        ))
    }
}

fn residual(h: ArrayView1<f64>, r: ArrayView1<f64>, t: ArrayView1<f64>) -> Array1<f64> {
    &h.to_owned() + &r - &t
}

fn norm_of(v: &Array1<f64>, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    let n = m.nrows().max(1) as f64;
    let mut mean = Array1::zeros(m.ncols());
    for row in m.rows() {
        mean = mean + row;
    }
    mean / n
}

/// Per-entry bound of the uniform initialization for dimension `d`.
pub(crate) fn init_bound(dim: usize) -> f64 {
    6.0 / (dim as f64).sqrt()
}

/// Uniform draws in `[-bound, bound)` before any normalization.
pub(crate) fn init_raw(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let b = init_bound(dim);
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-b..b))
}

fn renormalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Seeded uniform initialization: entries drawn in `±6/sqrt(dim)`, then every
/// entity and relation vector scaled to unit Euclidean norm.
pub fn init_embeddings(graph: &KnowledgeGraph, cfg: &KgeConfig) -> KgEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entity_vecs = init_raw(graph.entities.len(), cfg.dim, &mut rng);
    let mut relation_vecs = init_raw(graph.relations.len(), cfg.dim, &mut rng);
    renormalize_rows(&mut entity_vecs);
    renormalize_rows(&mut relation_vecs);
    KgEmbeddings::from_parts(
        cfg.norm,
        cfg.margin,
        graph.entities.clone(),
        graph.relations.clone(),
        entity_vecs,
        relation_vecs,
    )
}

/// Corrupts exactly one of head or tail (fair coin) with a uniformly drawn
/// entity, resampling until the corrupted triple is absent from the graph.
/// Errors when no corruption of either slot can leave the graph.
pub fn negative_sample(
    graph: &KnowledgeGraph,
    triple: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize)> {
    let (h, r, t) = triple;
    let n = graph.entities.len();
    let attempts = 20 * n.max(1);
    for _ in 0..attempts {
        let corrupt_head = rng.random_bool(0.5);
        let e = rng.random_range(0..n);
        let candidate = if corrupt_head { (e, r, t) } else { (h, r, e) };
        if !graph.contains_triple(candidate) {
            return Ok(candidate);
        }
    }
    // Rejection sampling stalled: check exhaustively before giving up.
    for e in 0..n {
        if !graph.contains_triple((e, r, t)) {
            return Ok((e, r, t));
        }
        if !graph.contains_triple((h, r, e)) {
            return Ok((h, r, e));
        }
    }
    Err(Error::NoCorruption {
        h: graph.entities[h].clone(),
        r: graph.relations[r].clone(),
        t: graph.entities[t].clone(),
    })
}

/// Gradient of the score with respect to the residual vector.
fn score_grad(diff: &Array1<f64>, norm: Norm) -> Array1<f64> {
    match norm {
        Norm::L1 => diff.mapv(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let n = norm_of(diff, Norm::L2);
            if n > 0.0 {
                diff / n
            } else {
                Array1::zeros(diff.len())
            }
        }
    }
}

/// Mean hinge loss and the gradient tables for one batch of
/// (positive, negative) triple pairs. Exposed for finite-difference checks.
pub fn margin_loss_and_grads(
    emb: &KgEmbeddings,
    pairs: &[((usize, usize, usize), (usize, usize, usize))],
    margin: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut loss = 0.0;
    let mut ent_grad = Array2::zeros(emb.entity_vecs.dim());
    let mut rel_grad = Array2::zeros(emb.relation_vecs.dim());
    let scale = 1.0 / pairs.len().max(1) as f64;
    for &((ph, pr, pt), (nh, nr, nt)) in pairs {
        let pos_diff = residual(
            emb.entity_vecs.row(ph),
            emb.relation_vecs.row(pr),
            emb.entity_vecs.row(pt),
        );
        let neg_diff = residual(
            emb.entity_vecs.row(nh),
            emb.relation_vecs.row(nr),
            emb.entity_vecs.row(nt),
        );
        let hinge = margin + norm_of(&pos_diff, emb.norm) - norm_of(&neg_diff, emb.norm);
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge * scale;
        let gp = score_grad(&pos_diff, emb.norm) * scale;
        let gn = score_grad(&neg_diff, emb.norm) * scale;
        add_row(&mut ent_grad, ph, &gp, 1.0);
        add_row(&mut rel_grad, pr, &gp, 1.0);
        add_row(&mut ent_grad, pt, &gp, -1.0);
        add_row(&mut ent_grad, nh, &gn, -1.0);
        add_row(&mut rel_grad, nr, &gn, -1.0);
        add_row(&mut ent_grad, nt, &gn, 1.0);
    }
    (loss, ent_grad, rel_grad)
}

fn add_row(table: &mut Array2<f64>, row: usize, grad: &Array1<f64>, sign: f64) {
    let mut target = table.row_mut(row);
    target += &(grad * sign);
}

/// Mean hinge loss of a pairing under the current embeddings, for
/// finite-difference comparison against [`margin_loss_and_grads`].
pub fn margin_loss(
    emb: &KgEmbeddings,
    pairs: &[((usize, usize, usize), (usize, usize, usize))],
    margin: f64,
) -> f64 {
    let scale = 1.0 / pairs.len().max(1) as f64;
    pairs
        .iter()
        .map(|&((ph, pr, pt), (nh, nr, nt))| {
            let hinge = margin + emb.score(ph, pr, pt) - emb.score(nh, nr, nt);
            hinge.max(0.0) * scale
        })
        .sum()
}

/// Trains embeddings with mini-batch SGD, calling `observer` after every
/// optimizer step (post-renormalization). Returns the embeddings and the
/// mean hinge loss per epoch.
pub fn train_kge_observed(
    graph: &KnowledgeGraph,
    cfg: &KgeConfig,
    mut observer: impl FnMut(&KgEmbeddings),
) -> Result<(KgEmbeddings, Vec<f64>)> {
    if graph.triples.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train embeddings on a graph with no triples".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut emb = init_embeddings(graph, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..graph.triples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut pairs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let pos = graph.triples[idx];
                let neg = negative_sample(graph, pos, &mut rng)?;
                pairs.push((pos, neg));
            }
            let (loss, ent_grad, rel_grad) = margin_loss_and_grads(&emb, &pairs, cfg.margin);
            epoch_loss += loss * pairs.len() as f64;
            epoch_terms += pairs.len();
            emb.entity_vecs = &emb.entity_vecs - &(ent_grad * cfg.lr);
            emb.relation_vecs = &emb.relation_vecs - &(rel_grad * cfg.lr);
            renormalize_rows(&mut emb.entity_vecs);
            observer(&emb);
        }
        losses.push(epoch_loss / epoch_terms.max(1) as f64);
    }
    Ok((emb, losses))
}

/// [`train_kge_observed`] without an observer.
pub fn train_kge(graph: &KnowledgeGraph, cfg: &KgeConfig) -> Result<(KgEmbeddings, Vec<f64>)> {
    train_kge_observed(graph, cfg, |_| {})
}

/// Fraction of triples whose true tail ranks first among all candidate
/// tails, with other known-true tails excluded from the candidate set.
pub fn hits_at_1(emb: &KgEmbeddings, graph: &KnowledgeGraph) -> f64 {
    if graph.triples.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for &(h, r, t) in &graph.triples {
        let mut best = t;
        let mut best_score = emb.score(h, r, t);
        for e in 0..graph.entities.len() {
            if e == t || e == h || graph.contains_triple((h, r, e)) {
                continue;
            }
            let s = emb.score(h, r, e);
            if s < best_score {
                best_score = s;
                best = e;
            }
        }
        if best == t {
            hits += 1;
        }
    }
    hits as f64 / graph.triples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::Triplet;

    fn tri(h: &str, r: &str, t: &str) -> Triplet {
        Triplet::new(h, r, t, "d0", 0).unwrap()
    }

    fn line_graph() -> KnowledgeGraph {
        build_graph(&[tri("alice", "founded", "acme"), tri("acme", "acquired", "globex")])
    }

    #[test]
    fn build_graph_shares_entities_and_orders_by_first_occurrence() {
        let g = line_graph();
        assert_eq!(g.entities, vec!["alice", "acme", "globex"]);
        assert_eq!(g.relations, vec!["founded", "acquired"]);
        assert_eq!(g.triples, vec![(0, 0, 1), (1, 1, 2)]);
    }

    #[test]
    fn build_graph_dedupes_triples() {
        let g = build_graph(&[tri("ax", "r", "bo"), tri("ax", "r", "bo")]);
        assert_eq!(g.triples.len(), 1);
    }

    #[test]
    fn init_raw_entries_respect_bound() {
        // dim = 4 puts every raw draw in [-3, 3].
        assert_eq!(init_bound(4), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = init_raw(40, 4, &mut rng);
        for &v in raw.iter() {
            assert!((-3.0..=3.0).contains(&v), "entry {v} out of bound");
        }
    }

    #[test]
    fn init_embeddings_unit_norms_and_determinism() {
        let g = line_graph();
        let cfg = KgeConfig { dim: 8, ..KgeConfig::default() };
        let a = init_embeddings(&g, &cfg);
        let b = init_embeddings(&g, &cfg);
        assert_eq!(a.entity_vecs, b.entity_vecs);
        assert_eq!(a.relation_vecs, b.relation_vecs);
        for row in a.entity_vecs.rows().into_iter().chain(a.relation_vecs.rows()) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    fn fixed_embeddings(vectors: &[(&str, Vec<f64>)], relations: &[(&str, Vec<f64>)]) -> KgEmbeddings {
        let dim = vectors[0].1.len();
        let entities: Vec<String> = vectors.iter().map(|(n, _)| n.to_string()).collect();
        let rel_names: Vec<String> = relations.iter().map(|(n, _)| n.to_string()).collect();
        let mut entity_vecs = Array2::zeros((entities.len(), dim));
        for (i, (_, v)) in vectors.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                entity_vecs[(i, j)] = *x;
            }
        }
        let mut relation_vecs = Array2::zeros((rel_names.len(), dim));
        for (i, (_, v)) in relations.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                relation_vecs[(i, j)] = *x;
            }
        }
        KgEmbeddings::from_parts(Norm::L2, 1.0, entities, rel_names, entity_vecs, relation_vecs)
    }

    #[test]
    fn score_is_zero_when_translation_is_exact() {
        let emb = fixed_embeddings(
            &[("h", vec![0.25, -0.5]), ("t", vec![0.75, 0.5])],
            &[("r", vec![0.5, 1.0])],
        );
        assert!(emb.score(0, 0, 1).abs() < 1e-12);
    }

    #[test]
    fn score_matches_hand_values_for_both_norms() {
        let mut emb = fixed_embeddings(
            &[("h", vec![1.0, 0.0]), ("t", vec![0.0, 0.0])],
            &[("r", vec![0.0, 1.0])],
        );
        assert!((emb.score(0, 0, 1) - 2.0_f64.sqrt()).abs() < 1e-12);
        emb.norm = Norm::L1;
        assert!((emb.score(0, 0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn concat_embedding_stacks_head_relation_tail() {
        let emb = fixed_embeddings(
            &[("h", vec![1.0, 2.0]), ("t", vec![5.0, 6.0])],
            &[("r", vec![3.0, 4.0])],
        );
        assert_eq!(emb.concat_embedding(0, 0, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn negative_sample_changes_exactly_one_slot_and_avoids_graph() {
        let g = build_graph(&[
            tri("ax", "r", "bo"),
            tri("bo", "r", "cy"),
            tri("cy", "s", "du"),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pos = g.triples[rng.random_range(0..g.triples.len())];
            let neg = negative_sample(&g, pos, &mut rng).unwrap();
            assert!(!g.contains_triple(neg));
            assert_eq!(neg.1, pos.1);
            let head_changed = neg.0 != pos.0;
            let tail_changed = neg.2 != pos.2;
            assert!(head_changed ^ tail_changed, "exactly one slot must change");
        }
    }

    #[test]
    fn negative_sample_is_reproducible() {
        let g = line_graph();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for &pos in &g.triples {
            assert_eq!(
                negative_sample(&g, pos, &mut a).unwrap(),
                negative_sample(&g, pos, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn negative_sample_errors_when_every_corruption_is_present() {
        // Hand-built complete graph including self-loops: no candidate can
        // leave the triple set.
        let g = KnowledgeGraph::from_parts(
            vec!["a".into(), "b".into()],
            vec!["r".into()],
            vec![(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1)],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            negative_sample(&g, (0, 0, 1), &mut rng),
            Err(Error::NoCorruption { .. })
        ));
    }

    #[test]
    fn margin_grad_matches_finite_differences() {
        let g = build_graph(&[
            tri("ax", "r", "bo"),
            tri("bo", "r", "cy"),
            tri("cy", "s", "ax"),
            tri("du", "s", "bo"),
        ]);
        let cfg = KgeConfig { dim: 6, seed: 11, ..KgeConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for norm in [Norm::L2, Norm::L1] {
            let mut emb = init_embeddings(&g, &cfg);
            emb.norm = norm;
            // Nudge away from unit norms so the loss surface is generic.
            emb.entity_vecs.mapv_inplace(|x| x * 1.1 + 0.01);
            let mut pairs = Vec::new();
            for &pos in &g.triples {
                pairs.push((pos, negative_sample(&g, pos, &mut rng).unwrap()));
            }
            let (_, ent_grad, rel_grad) = margin_loss_and_grads(&emb, &pairs, cfg.margin);
            let h = 1e-6;
            let mut checked = 0;
            for (table, grads) in [(0, &ent_grad), (1, &rel_grad)] {
                let (rows, cols) = grads.dim();
                for i in 0..rows {
                    for j in (0..cols).step_by(2) {
                        let mut plus = emb.clone();
                        let mut minus = emb.clone();
                        if table == 0 {
                            plus.entity_vecs[(i, j)] += h;
                            minus.entity_vecs[(i, j)] -= h;
                        } else {
                            plus.relation_vecs[(i, j)] += h;
                            minus.relation_vecs[(i, j)] -= h;
                        }
                        let numeric =
                            (margin_loss(&plus, &pairs, cfg.margin) - margin_loss(&minus, &pairs, cfg.margin))
                                / (2.0 * h);
                        let analytic = grads[(i, j)];
                        let denom = analytic.abs().max(numeric.abs());
                        if denom > 1e-6 {
                            let rel = (analytic - numeric).abs() / denom;
                            assert!(rel < 1e-4, "{norm:?} grad mismatch: {analytic} vs {numeric}");
                            checked += 1;
                        }
                    }
                }
            }
            assert!(checked > 10, "too few informative coordinates checked");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let g = line_graph();
        let cfg = KgeConfig { epochs: 0, dim: 8, ..KgeConfig::default() };
        let (emb, losses) = train_kge(&g, &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(emb.entity_vecs, init_embeddings(&g, &cfg).entity_vecs);
    }

    #[test]
    fn training_is_deterministic() {
        let g = line_graph();
        let cfg = KgeConfig { epochs: 5, dim: 8, ..KgeConfig::default() };
        let (a, la) = train_kge(&g, &cfg).unwrap();
        let (b, lb) = train_kge(&g, &cfg).unwrap();
        assert_eq!(a.entity_vecs, b.entity_vecs);
        assert_eq!(la, lb);
    }

    #[test]
    fn entity_norms_stay_unit_after_every_step() {
        let g = build_graph(&[
            tri("ax", "r", "bo"),
            tri("bo", "r", "cy"),
            tri("cy", "s", "du"),
            tri("du", "s", "ax"),
        ]);
        let cfg = KgeConfig { epochs: 3, dim: 8, batch: 2, ..KgeConfig::default() };
        let mut steps = 0;
        train_kge_observed(&g, &cfg, |emb| {
            steps += 1;
            for row in emb.entity_vecs.rows() {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9, "entity norm {n} after step {steps}");
            }
        })
        .unwrap();
        assert!(steps >= 6);
    }

    #[test]
    fn embedding_file_round_trips_exactly() {
        let g = line_graph();
        let cfg = KgeConfig { epochs: 3, dim: 5, ..KgeConfig::default() };
        let (emb, _) = train_kge(&g, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.tsv");
        emb.save(&path).unwrap();
        let loaded = KgEmbeddings::load(&path).unwrap();
        assert_eq!(emb, loaded);
    }

    #[test]
    fn multiword_phrases_round_trip_through_file() {
        let emb = fixed_embeddings(
            &[("big city", vec![0.5, -1.25]), ("acme corp", vec![0.125, 3.5])],
            &[("sat on", vec![1e-30, -2.5e17])],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.tsv");
        emb.save(&path).unwrap();
        let loaded = KgEmbeddings::load(&path).unwrap();
        assert_eq!(emb, loaded);
    }

    #[test]
    fn embedding_for_unknown_phrase_errors() {
        let g = line_graph();
        let emb = init_embeddings(&g, &KgeConfig::default());
        let unknown = tri("zeus", "founded", "olympus");
        assert!(matches!(
            emb.embedding_for(&unknown),
            Err(Error::UnknownPhrase { .. })
        ));
        assert!(emb.embedding_for(&tri("alice", "founded", "acme")).is_ok());
    }
}
