//! Triplet labeling, the summary-worthiness classifier, and selection.
//!
//! Source triplets are labeled positive when their concatenated embedding is
//! cosine-similar to any summary triplet's embedding. A sigmoid classifier
//! trained on those labels then scores unseen triplets, and the selection
//! rule keeps the highest-scoring ones up to a cap.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::KgEmbeddings;
use crate::triplet::Triplet;

/// Cosine similarity. Errors when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "cosine inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// Concatenated embedding for a triplet, substituting the mean entity or
/// relation vector for phrases the graph never saw.
pub fn embed_or_fallback(emb: &KgEmbeddings, triplet: &Triplet) -> Vec<f64> {
    let mean_ent = emb.mean_entity_vec();
    let mean_rel = emb.mean_relation_vec();
    let mut e = Vec::with_capacity(3 * emb.dim);
    match emb.entity_id(&triplet.head) {
        Some(h) => e.extend(emb.entity_vecs.row(h).iter()),
        None => e.extend(mean_ent.iter()),
    }
    match emb.relation_id(&triplet.relation) {
        Some(r) => e.extend(emb.relation_vecs.row(r).iter()),
        None => e.extend(mean_rel.iter()),
    }
    match emb.entity_id(&triplet.tail) {
        Some(t) => e.extend(emb.entity_vecs.row(t).iter()),
        None => e.extend(mean_ent.iter()),
    }
    e
}

/// A source triplet with its distant-supervision label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTriplet {
    pub triplet: Triplet,
    pub label: bool,
    /// Highest cosine similarity against the summary triplet set, or -1.0
    /// when that set is empty.
    pub best_similarity: f64,
}

/// Labels each source triplet positive when its embedding's best cosine
/// similarity against the summary triplets reaches `threshold`. An empty
/// summary set labels everything negative with similarity -1.0. Never errors:
/// degenerate zero-vector comparisons contribute no similarity.
pub fn label_triplets(
    source_triplets: &[Triplet],
    summary_triplets: &[Triplet],
    emb: &KgEmbeddings,
    threshold: f64,
) -> Vec<LabeledTriplet> {
    let summary_embs: Vec<Vec<f64>> = summary_triplets
        .iter()
        .map(|t| embed_or_fallback(emb, t))
        .collect();
    source_triplets
        .iter()
        .map(|t| {
            let e = embed_or_fallback(emb, t);
            let mut best = -1.0f64;
            let mut any = false;
            for se in &summary_embs {
                if let Ok(sim) = cosine(&e, se) {
                    best = if any { best.max(sim) } else { sim };
                    any = true;
                }
            }
            if !any {
                best = -1.0;
            }
            LabeledTriplet {
                triplet: t.clone(),
                label: any && best >= threshold,
                best_similarity: best,
            }
        })
        .collect()
}

/// Writes labeled triplets as TSV with seven columns: the five triplet
/// columns, then label (0/1) and best similarity.
pub fn save_labeled(path: &Path, labeled: &[LabeledTriplet]) -> Result<()> {
    let mut out = String::new();
    for l in labeled {
        let t = &l.triplet;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            t.head,
            t.relation,
            t.tail,
            t.doc_id,
            t.sent_idx,
            l.label as u8,
            l.best_similarity
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`save_labeled`].
pub fn load_labeled(path: &Path) -> Result<Vec<LabeledTriplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labeled = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(Error::Tsv {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 7 tab-separated columns, found {}", cols.len()),
            });
        }
        let bad = |what: &str| Error::Tsv {
            path: path.to_path_buf(),
            line: line_no,
            reason: what.to_string(),
        };
        let sent_idx: usize = cols[4].parse().map_err(|_| bad("bad sentence index"))?;
        let label = match cols[5] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let best_similarity: f64 = cols[6].parse().map_err(|_| bad("bad similarity"))?;
        let triplet = Triplet::new(cols[0], cols[1], cols[2], cols[3], sent_idx)
            .map_err(|e| bad(&e.to_string()))?;
        labeled.push(LabeledTriplet {
            triplet,
            label,
            best_similarity,
        });
    }
    Ok(labeled)
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weights of the summary-worthiness classifier: `sigmoid(w . e + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ClassifierParams {
    pub fn zeros(dim: usize) -> Self {
        ClassifierParams {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    /// Probability that the triplet with features `e` belongs in a summary.
    pub fn classify(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.w.len() {
            return Err(Error::DimMismatch(format!(
                "classifier expects {} features, got {}",
                self.w.len(),
                e.len()
            )));
        }
        let z: f64 = self.w.iter().zip(e).map(|(w, x)| w * x).sum::<f64>() + self.b;
        Ok(sigmoid(z))
    }

    /// Text checkpoint: the dimension, then one weight per line, then the
    /// bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{}\n", self.w.len());
        for w in &self.w {
            out.push_str(&format!("{w}\n"));
        }
        out.push_str(&format!("{}\n", self.b));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, reason: &str| Error::Tsv {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.is_empty() {
            return Err(bad(1, "empty classifier file"));
        }
        let dim: usize = lines[0].parse().map_err(|_| bad(1, "bad dimension"))?;
        if lines.len() != dim + 2 {
            return Err(bad(
                lines.len(),
                &format!("expected {} lines for dim {dim}", dim + 2),
            ));
        }
        let mut w = Vec::with_capacity(dim);
        for (i, line) in lines[1..=dim].iter().enumerate() {
            w.push(line.parse().map_err(|_| bad(i + 2, "bad weight"))?);
        }
        let b = lines[dim + 1]
            .parse()
            .map_err(|_| bad(dim + 2, "bad bias"))?;
        Ok(ClassifierParams { w, b })
    }
}

/// Classifier training hyperparameters. The defaults run five epochs of
/// ten thousand optimizer steps each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.01,
            epochs: 5,
            steps_per_epoch: 10_000,
            batch: 32,
            seed: 13,
        }
    }
}

/// Mean binary cross-entropy of the classifier on `batch`, computed from
/// logits for numerical stability.
pub fn bce_loss(params: &ClassifierParams, batch: &[(&[f64], bool)]) -> f64 {
    let scale = 1.0 / batch.len().max(1) as f64;
    batch
        .iter()
        .map(|(e, y)| {
            let z: f64 = params.w.iter().zip(*e).map(|(w, x)| w * x).sum::<f64>() + params.b;
            let y = *y as u8 as f64;
            (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) * scale
        })
        .sum()
}

/// Mean BCE and its gradient with respect to the weights and bias.
pub fn bce_loss_and_grad(
    params: &ClassifierParams,
    batch: &[(&[f64], bool)],
) -> (f64, Vec<f64>, f64) {
    let mut grad_w = vec![0.0; params.w.len()];
    let mut grad_b = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    let loss = bce_loss(params, batch);
    for (e, y) in batch {
        let z: f64 = params.w.iter().zip(*e).map(|(w, x)| w * x).sum::<f64>() + params.b;
        let delta = (sigmoid(z) - *y as u8 as f64) * scale;
        for (g, x) in grad_w.iter_mut().zip(*e) {
            *g += delta * x;
        }
        grad_b += delta;
    }
    (loss, grad_w, grad_b)
}

/// Trains the classifier with mini-batch SGD from zero-initialized weights.
/// Returns the parameters and the mean loss per epoch. The training data
/// must contain both classes.
pub fn train_classifier(
    data: &[(Vec<f64>, bool)],
    cfg: &ClassifierConfig,
) -> Result<(ClassifierParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier training data is empty".into(),
        ));
    }
    let has_pos = data.iter().any(|(_, y)| *y);
    let has_neg = data.iter().any(|(_, y)| !*y);
    if !has_pos || !has_neg {
        return Err(Error::SingleClass);
    }
    if cfg.batch == 0 || cfg.steps_per_epoch == 0 {
        return Err(Error::InvalidArgument(
            "classifier batch and steps_per_epoch must be positive".into(),
        ));
    }
    let dim = data[0].0.len();
    if data.iter().any(|(e, _)| e.len() != dim) {
        return Err(Error::DimMismatch(
            "classifier training features have inconsistent lengths".into(),
        ));
    }
    let mut params = ClassifierParams::zeros(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch: Vec<(&[f64], bool)> = (0..cfg.batch)
                .map(|_| {
                    let (e, y) = &data[rng.random_range(0..data.len())];
                    (e.as_slice(), *y)
                })
                .collect();
            let (loss, grad_w, grad_b) = bce_loss_and_grad(&params, &batch);
            epoch_loss += loss;
            for (w, g) in params.w.iter_mut().zip(&grad_w) {
                *w -= cfg.lr * g;
            }
            params.b -= cfg.lr * grad_b;
        }
        losses.push(epoch_loss / cfg.steps_per_epoch as f64);
    }
    Ok((params, losses))
}

/// A candidate triplet with its features and classifier score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub triplet: Triplet,
    pub embedding: Vec<f64>,
    pub score: f64,
}

/// Scores every triplet with the classifier, using fallback embeddings for
/// unseen phrases.
pub fn score_triplets(
    triplets: &[Triplet],
    emb: &KgEmbeddings,
    params: &ClassifierParams,
) -> Result<Vec<ScoredTriplet>> {
    triplets
        .iter()
        .map(|t| {
            let e = embed_or_fallback(emb, t);
            let score = params.classify(&e)?;
            Ok(ScoredTriplet {
                triplet: t.clone(),
                embedding: e,
                score,
            })
        })
        .collect()
}

/// Keeps candidates scoring at least `tau`, ordered by descending score with
/// extraction order breaking ties, truncated to at most `cap` entries.
pub fn select_triplets(candidates: &[ScoredTriplet], tau: f64, cap: usize) -> Vec<ScoredTriplet> {
    let mut kept: Vec<&ScoredTriplet> = candidates.iter().filter(|c| c.score >= tau).collect();
    // Stable sort preserves extraction order among equal scores.
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    kept.into_iter().take(cap).cloned().collect()
}

/// The classifier-bypassing variant: every extracted triplet in extraction
/// order, capped at `cap`, with a placeholder score of 1.0.
pub fn all_triplets_capped(
    triplets: &[Triplet],
    emb: &KgEmbeddings,
    cap: usize,
) -> Vec<ScoredTriplet> {
    triplets
        .iter()
        .take(cap)
        .map(|t| ScoredTriplet {
            triplet: t.clone(),
            embedding: embed_or_fallback(emb, t),
            score: 1.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_graph, train_kge, KgeConfig};
    use proptest::prelude::*;

    fn tri(h: &str, r: &str, t: &str) -> Triplet {
        Triplet::new(h, r, t, "d0", 0).unwrap()
    }

    #[test]
    fn cosine_identical_orthogonal_and_oblique() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_vector_errors() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn classify_matches_hand_values() {
        let p = ClassifierParams {
            w: vec![2.0, -1.0],
            b: -1.0,
        };
        let y = p.classify(&[1.0, 0.0]).unwrap();
        assert!((y - 0.73106).abs() < 1e-5);
        assert!((y - sigmoid(1.0)).abs() < 1e-12);

        let zero = ClassifierParams::zeros(2);
        assert_eq!(zero.classify(&[3.0, -4.0]).unwrap(), 0.5);

        let confident = ClassifierParams {
            w: vec![0.0, 0.0],
            b: 20.0,
        };
        assert!((confident.classify(&[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-8);
    }

    fn toy_embeddings() -> KgEmbeddings {
        let triplets = vec![
            tri("alice", "founded", "acme"),
            tri("bob", "visited", "paris"),
            tri("acme", "acquired", "globex"),
        ];
        let graph = build_graph(&triplets);
        let cfg = KgeConfig {
            dim: 8,
            epochs: 20,
            ..KgeConfig::default()
        };
        train_kge(&graph, &cfg).unwrap().0
    }

    #[test]
    fn label_identical_triplet_is_positive() {
        let emb = toy_embeddings();
        let source = vec![tri("alice", "founded", "acme"), tri("bob", "visited", "paris")];
        let summary = vec![tri("alice", "founded", "acme")];
        let labeled = label_triplets(&source, &summary, &emb, 0.8);
        assert!(labeled[0].label);
        assert!((labeled[0].best_similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_empty_summary_set_is_all_negative() {
        let emb = toy_embeddings();
        let source = vec![tri("alice", "founded", "acme")];
        let labeled = label_triplets(&source, &[], &emb, 0.8);
        assert!(!labeled[0].label);
        assert_eq!(labeled[0].best_similarity, -1.0);
    }

    #[test]
    fn label_below_threshold_is_negative() {
        // Hand-built embeddings give cosine 1/sqrt(2) ~ 0.707 < 0.8.
        use ndarray::arr2;
        let emb = KgEmbeddings::from_parts(
            crate::kg::Norm::L2,
            1.0,
            vec!["p".into(), "q".into()],
            vec!["r".into(), "s".into()],
            arr2(&[[1.0], [0.0]]),
            arr2(&[[0.0], [1.0]]),
        );
        // Source (p, r, q) embeds to [1,0,0]; summary (p, s, q) to [1,1,0].
        let labeled = label_triplets(&[tri("p", "r", "q")], &[tri("p", "s", "q")], &emb, 0.8);
        assert!((labeled[0].best_similarity - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert!(!labeled[0].label);
        // Threshold 1.0 keeps only exact matches.
        let labeled = label_triplets(&[tri("p", "r", "q")], &[tri("p", "r", "q")], &emb, 1.0);
        assert!(labeled[0].label);
    }

    #[test]
    fn fallback_uses_mean_vectors_for_unseen_phrases() {
        let emb = toy_embeddings();
        let e = embed_or_fallback(&emb, &tri("zeus", "married", "hera"));
        let mean_ent = emb.mean_entity_vec();
        let mean_rel = emb.mean_relation_vec();
        assert_eq!(&e[..emb.dim], mean_ent.as_slice().unwrap());
        assert_eq!(&e[emb.dim..2 * emb.dim], mean_rel.as_slice().unwrap());
        assert_eq!(&e[2 * emb.dim..], mean_ent.as_slice().unwrap());
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 6;
        let data: Vec<(Vec<f64>, bool)> = (0..12)
            .map(|i| {
                let e: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (e, i % 2 == 0)
            })
            .collect();
        let params = ClassifierParams {
            w: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            b: 0.3,
        };
        let batch: Vec<(&[f64], bool)> = data.iter().map(|(e, y)| (e.as_slice(), *y)).collect();
        let (_, grad_w, grad_b) = bce_loss_and_grad(&params, &batch);
        let h = 1e-6;
        for j in 0..dim {
            let mut plus = params.clone();
            plus.w[j] += h;
            let mut minus = params.clone();
            minus.w[j] -= h;
            let numeric = (bce_loss(&plus, &batch) - bce_loss(&minus, &batch)) / (2.0 * h);
            let denom = grad_w[j].abs().max(numeric.abs()).max(1e-8);
            assert!((grad_w[j] - numeric).abs() / denom < 1e-4);
        }
        let mut plus = params.clone();
        plus.b += h;
        let mut minus = params.clone();
        minus.b -= h;
        let numeric = (bce_loss(&plus, &batch) - bce_loss(&minus, &batch)) / (2.0 * h);
        assert!((grad_b - numeric).abs() / grad_b.abs().max(numeric.abs()).max(1e-8) < 1e-4);
    }

    #[test]
    fn classifier_separates_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<(Vec<f64>, bool)> = (0..20)
            .map(|i| {
                let label = i < 10;
                let center = if label { 1.0 } else { -1.0 };
                let e: Vec<f64> = (0..4)
                    .map(|_| center + rng.random_range(-0.3..0.3))
                    .collect();
                (e, label)
            })
            .collect();
        let cfg = ClassifierConfig {
            epochs: 200,
            steps_per_epoch: 10,
            lr: 0.5,
            batch: 8,
            seed: 3,
        };
        let (params, losses) = train_classifier(&data, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|(e, y)| (params.classify(e).unwrap() >= 0.5) == *y)
            .count();
        assert_eq!(correct, data.len());
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn classifier_default_schedule_is_five_by_ten_thousand() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.steps_per_epoch, 10_000);
    }

    #[test]
    fn classifier_rejects_single_class_data() {
        let data = vec![(vec![1.0], true), (vec![2.0], true)];
        assert!(matches!(
            train_classifier(&data, &ClassifierConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn classifier_training_is_deterministic() {
        let data = vec![
            (vec![1.0, 0.5], true),
            (vec![-1.0, -0.5], false),
            (vec![0.8, 0.2], true),
            (vec![-0.7, -0.9], false),
        ];
        let cfg = ClassifierConfig {
            epochs: 3,
            steps_per_epoch: 50,
            ..ClassifierConfig::default()
        };
        let (a, la) = train_classifier(&data, &cfg).unwrap();
        let (b, lb) = train_classifier(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    fn scored(score: f64, idx: usize) -> ScoredTriplet {
        ScoredTriplet {
            triplet: Triplet::new(format!("h{idx}"), "r", format!("t{idx}"), "d", idx).unwrap(),
            embedding: vec![score],
            score,
        }
    }

    #[test]
    fn select_sorts_filters_and_caps() {
        let candidates = vec![scored(0.6, 0), scored(0.9, 1), scored(0.55, 2), scored(0.3, 3)];
        let picked = select_triplets(&candidates, 0.5, 2);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].score, 0.9);
        assert_eq!(picked[1].score, 0.6);
    }

    #[test]
    fn select_all_below_tau_is_empty() {
        let candidates = vec![scored(0.2, 0), scored(0.1, 1)];
        assert!(select_triplets(&candidates, 0.5, 4).is_empty());
        assert!(select_triplets(&candidates, 0.05, 0).is_empty());
    }

    #[test]
    fn select_breaks_ties_by_extraction_order() {
        let candidates = vec![scored(0.7, 0), scored(0.7, 1), scored(0.7, 2)];
        let picked = select_triplets(&candidates, 0.5, 2);
        assert_eq!(picked[0].triplet.sent_idx, 0);
        assert_eq!(picked[1].triplet.sent_idx, 1);
    }

    proptest! {
        #[test]
        fn select_monotone_in_tau_and_cap(
            scores in proptest::collection::vec(0.0f64..1.0, 0..12),
            tau_lo in 0.0f64..0.5,
            tau_hi in 0.5f64..1.0,
            cap in 0usize..8,
        ) {
            let candidates: Vec<ScoredTriplet> =
                scores.iter().enumerate().map(|(i, s)| scored(*s, i)).collect();
            let strict = select_triplets(&candidates, tau_hi, cap);
            let loose = select_triplets(&candidates, tau_lo, cap);
            // Raising tau never adds new members.
            for s in &strict {
                let in_loose_pool = select_triplets(&candidates, tau_lo, candidates.len());
                prop_assert!(in_loose_pool.iter().any(|l| l.triplet == s.triplet));
            }
            prop_assert!(strict.len() <= loose.len());
            // Raising the cap only extends the selection.
            let bigger = select_triplets(&candidates, tau_lo, cap + 3);
            prop_assert_eq!(&bigger[..loose.len()], &loose[..]);
        }
    }

    #[test]
    fn all_triplets_capped_keeps_extraction_order() {
        let emb = toy_embeddings();
        let triplets = vec![
            tri("alice", "founded", "acme"),
            tri("bob", "visited", "paris"),
            tri("acme", "acquired", "globex"),
        ];
        let picked = all_triplets_capped(&triplets, &emb, 2);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].triplet, triplets[0]);
        assert_eq!(picked[1].triplet, triplets[1]);
        assert_eq!(picked[0].score, 1.0);
    }

    #[test]
    fn labeled_tsv_round_trips() {
        let emb = toy_embeddings();
        let source = vec![tri("alice", "founded", "acme"), tri("bob", "visited", "paris")];
        let summary = vec![tri("alice", "founded", "acme")];
        let labeled = label_triplets(&source, &summary, &emb, 0.8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labeled.tsv");
        save_labeled(&path, &labeled).unwrap();
        let loaded = load_labeled(&path).unwrap();
        assert_eq!(labeled, loaded);
    }

    #[test]
    fn classifier_file_round_trips() {
        let params = ClassifierParams {
            w: vec![0.125, -3.5, 1e-17],
            b: -0.75,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.txt");
        params.save(&path).unwrap();
        assert_eq!(ClassifierParams::load(&path).unwrap(), params);
    }
}
