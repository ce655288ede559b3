//! Stage orchestration over a shared artifacts directory.
//!
//! Stages communicate only through files, each records a manifest with
//! SHA-256 digests of its inputs, and a lock file keeps concurrent runs
//! out of the same directory. Every stage is deterministic: rerunning it
//! with unchanged inputs rewrites byte-identical artifacts.
//!
//! Layout under `artifacts.dir`:
//!
//! ```text
//! lock                          held while a stage runs
//! manifests/<stage>.json        inputs (digested), outputs, seed
//! triplets_<split>_source.tsv   extracted facts per split
//! triplets_train_summary.tsv    facts extracted from training summaries
//! kg_embeddings.txt             entity/relation vectors
//! kge_loss.csv                  embedding training curve
//! labeled_triplets.tsv          relevance labels for training facts
//! classifier.txt                selection head weights
//! classifier_loss.csv           selection head training curve
//! vocab.txt                     token table
//! train_<variant>/              checkpoints and trace of one variant
//! model_<variant>.ckpt          best checkpoint of the variant
//! generated_<variant>.jsonl     decoded summaries for the test split
//! eval_<variant>.json           corpus scores
//! eval_pairs_<variant>.csv      per-document scores
//! report.md, report.json        cross-variant comparison
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::corpus::{build_vocab, decode, encode, load_dataset, tokenize, Document, Split};
use crate::error::{Error, Result};
use crate::kg::{build_graph, train_kge, KgEmbeddings};
use crate::model::{Example, Summarizer};
use crate::rouge::{evaluate_corpus, Report};
use crate::select::{
    all_triplets_capped, label_triplets, score_triplets, select_triplets, train_classifier,
    ClassifierParams, ScoredTriplet,
};
use crate::training::{load_checkpoint, save_checkpoint, train_summarizer, Checkpoint, EvalPair};
use crate::triplet::{extract_from_text, extract_triplets, load_triplets, save_triplets, Triplet};

pub const STAGE_EXTRACT: &str = "extract-triplets";
pub const STAGE_TRAIN_KGE: &str = "train-kge";
pub const STAGE_LABEL: &str = "label-triplets";
pub const STAGE_TRAIN_CLASSIFIER: &str = "train-classifier";
pub const STAGE_TRAIN: &str = "train";
pub const STAGE_GENERATE: &str = "generate";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_REPORT: &str = "report";

const SUBSET_STREAM: u64 = 0x243F_6A88_85A3_08D3;

/// Which parts of the pipeline feed the summarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Classifier-selected facts fused into the decoder memory.
    Full,
    /// Every extracted fact fused, capped, in extraction order.
    NoClassification,
    /// No fused facts: the plain sequence-to-sequence baseline.
    NoKg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoClassification, Variant::NoKg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoClassification => "no_classification",
            Variant::NoKg => "no_kg",
        }
    }

    fn needs_kge(self) -> bool {
        !matches!(self, Variant::NoKg)
    }

    fn needs_classifier(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_classification" => Ok(Variant::NoClassification),
            "no_kg" => Ok(Variant::NoKg),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected full, no_classification, or no_kg)"
            ))),
        }
    }
}

/// Artifact paths under one directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn lock(&self) -> PathBuf {
        self.dir.join("lock")
    }
    pub fn manifest(&self, name: &str) -> PathBuf {
        self.dir.join("manifests").join(format!("{name}.json"))
    }
    pub fn source_triplets(&self, split: Split) -> PathBuf {
        self.dir
            .join(format!("triplets_{}_source.tsv", split.as_str()))
    }
    pub fn summary_triplets(&self) -> PathBuf {
        self.dir.join("triplets_train_summary.tsv")
    }
    pub fn kge(&self) -> PathBuf {
        self.dir.join("kg_embeddings.txt")
    }
    pub fn kge_loss(&self) -> PathBuf {
        self.dir.join("kge_loss.csv")
    }
    pub fn labeled(&self) -> PathBuf {
        self.dir.join("labeled_triplets.tsv")
    }
    pub fn classifier(&self) -> PathBuf {
        self.dir.join("classifier.txt")
    }
    pub fn classifier_loss(&self) -> PathBuf {
        self.dir.join("classifier_loss.csv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    pub fn train_dir(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("train_{variant}"))
    }
    pub fn model(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("model_{variant}.ckpt"))
    }
    pub fn generated(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("generated_{variant}.jsonl"))
    }
    pub fn eval(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("eval_{variant}.json"))
    }
    pub fn eval_pairs(&self, variant: Variant) -> PathBuf {
        self.dir.join(format!("eval_pairs_{variant}.csv"))
    }
    pub fn report_md(&self) -> PathBuf {
        self.dir.join("report.md")
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

/// Holds `artifacts/lock` for the lifetime of a stage; the file is removed
/// on drop, including on error paths.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "pid {}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked { lock: path })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Written next to every stage's outputs; `inputs` maps each consumed file
/// to its SHA-256 digest.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variant: Option<String>,
    pub seed: u64,
    pub subset_fraction: f64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(stage: &str, variant: Option<Variant>, seed: u64, fraction: f64) -> Self {
        Manifest {
            stage: stage.to_string(),
            variant: variant.map(|v| v.as_str().to_string()),
            seed,
            subset_fraction: fraction,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(&self, artifacts: &Artifacts) -> Result<()> {
        let name = match &self.variant {
            Some(v) => format!("{}_{}", self.stage, v),
            None => self.stage.clone(),
        };
        let path = artifacts.manifest(&name);
        let parent = path.parent().expect("manifest path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let mut text =
            serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// SHA-256 of a file, hex-encoded.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

fn require(path: &Path, producing_stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            artifact: path.display().to_string(),
            stage: producing_stage.to_string(),
        })
    }
}

/// Deterministic uniform subsample: keeps `ceil(fraction * n)` documents
/// (at least one) in their original order.
pub fn subset_docs(docs: Vec<Document>, fraction: f64, seed: u64) -> Result<Vec<Document>> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {fraction} must lie in (0, 1]"
        )));
    }
    if fraction == 1.0 || docs.is_empty() {
        return Ok(docs);
    }
    let keep = ((docs.len() as f64 * fraction).ceil() as usize).clamp(1, docs.len());
    let mut indices: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SUBSET_STREAM);
    indices.shuffle(&mut rng);
    let mut chosen = indices[..keep].to_vec();
    chosen.sort_unstable();
    let mut iter = chosen.into_iter().peekable();
    Ok(docs
        .into_iter()
        .enumerate()
        .filter(|(i, _)| {
            if iter.peek() == Some(i) {
                iter.next();
                true
            } else {
                false
            }
        })
        .map(|(_, d)| d)
        .collect())
}

fn load_split(cfg: &PipelineConfig, split: Split, fraction: f64) -> Result<Vec<Document>> {
    let docs = load_dataset(cfg.data_path(split)?, split)?;
    subset_docs(docs, fraction, cfg.seed)
}

fn group_by_doc(triplets: Vec<Triplet>) -> (Vec<String>, HashMap<String, Vec<Triplet>>) {
    let mut order = Vec::new();
    let mut map: HashMap<String, Vec<Triplet>> = HashMap::new();
    for t in triplets {
        let entry = map.entry(t.doc_id.clone());
        if let std::collections::hash_map::Entry::Vacant(_) = entry {
            order.push(t.doc_id.clone());
        }
        map.entry(t.doc_id.clone()).or_default().push(t);
    }
    (order, map)
}

/// Selected fact embeddings for one document under a variant.
fn variant_embeddings(
    triplets: &[Triplet],
    variant: Variant,
    emb: Option<&KgEmbeddings>,
    classifier: Option<&ClassifierParams>,
    tau: f64,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let selected: Vec<ScoredTriplet> = match variant {
        Variant::NoKg => Vec::new(),
        Variant::NoClassification => {
            let emb = emb.expect("embeddings required for this variant");
            all_triplets_capped(triplets, emb, cap)
        }
        Variant::Full => {
            let emb = emb.expect("embeddings required for this variant");
            let classifier = classifier.expect("classifier required for this variant");
            let scored = score_triplets(triplets, emb, classifier)?;
            select_triplets(&scored, tau, cap)
        }
    };
    Ok(selected.into_iter().map(|s| s.embedding).collect())
}

/// Extracts facts from every configured split (sources everywhere,
/// summaries for the training split) and writes them as TSV.
pub fn stage_extract(cfg: &PipelineConfig, fraction: f64) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    extract_inner(cfg, fraction)
}

fn extract_inner(cfg: &PipelineConfig, fraction: f64) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let lexicon = cfg.load_lexicon()?;
    let mut manifest = Manifest::new(STAGE_EXTRACT, None, cfg.seed, fraction);
    for path in [
        &cfg.lexicon_verbs,
        &cfg.lexicon_stopwords,
        &cfg.lexicon_prepositions,
    ]
    .into_iter()
    .flatten()
    {
        manifest.input(path)?;
    }

    for split in [Split::Train, Split::Valid, Split::Test] {
        manifest.input(cfg.data_path(split)?)?;
        let docs = load_split(cfg, split, fraction)?;
        let mut source_triplets = Vec::new();
        let mut summary_triplets = Vec::new();
        for doc in &docs {
            source_triplets.extend(extract_triplets(doc, &lexicon));
            if split == Split::Train {
                summary_triplets.extend(extract_from_text(&doc.summary, &doc.id, &lexicon));
            }
        }
        let out = artifacts.source_triplets(split);
        save_triplets(&out, &source_triplets)?;
        manifest.output(&out);
        if split == Split::Train {
            let out = artifacts.summary_triplets();
            save_triplets(&out, &summary_triplets)?;
            manifest.output(&out);
        }
    }
    manifest.write(&artifacts)
}

/// Trains translation embeddings on the graph built from the union of
/// training source and summary facts.
pub fn stage_train_kge(cfg: &PipelineConfig) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    train_kge_inner(cfg)
}

fn train_kge_inner(cfg: &PipelineConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let source_path = artifacts.source_triplets(Split::Train);
    let summary_path = artifacts.summary_triplets();
    require(&source_path, STAGE_EXTRACT)?;
    require(&summary_path, STAGE_EXTRACT)?;

    let mut manifest = Manifest::new(STAGE_TRAIN_KGE, None, cfg.seed, 1.0);
    manifest.input(&source_path)?;
    manifest.input(&summary_path)?;

    let (mut triplets, _) = load_triplets(&source_path)?;
    let (summary_triplets, _) = load_triplets(&summary_path)?;
    triplets.extend(summary_triplets);
    if triplets.is_empty() {
        return Err(Error::InvalidArgument(
            "no facts were extracted; cannot train embeddings".into(),
        ));
    }
    let graph = build_graph(&triplets);
    let (emb, losses) = train_kge(&graph, &cfg.kge)?;

    let out = artifacts.kge();
    emb.save(&out)?;
    manifest.output(&out);

    let loss_path = artifacts.kge_loss();
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;
    manifest.output(&loss_path);
    manifest.write(&artifacts)
}

/// Labels each training source fact by its best cosine similarity to the
/// same document's summary facts.
pub fn stage_label(cfg: &PipelineConfig) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    label_inner(cfg)
}

fn label_inner(cfg: &PipelineConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let source_path = artifacts.source_triplets(Split::Train);
    let summary_path = artifacts.summary_triplets();
    let kge_path = artifacts.kge();
    require(&source_path, STAGE_EXTRACT)?;
    require(&summary_path, STAGE_EXTRACT)?;
    require(&kge_path, STAGE_TRAIN_KGE)?;

    let mut manifest = Manifest::new(STAGE_LABEL, None, cfg.seed, 1.0);
    manifest.input(&source_path)?;
    manifest.input(&summary_path)?;
    manifest.input(&kge_path)?;

    let (source_triplets, _) = load_triplets(&source_path)?;
    let (summary_triplets, _) = load_triplets(&summary_path)?;
    let emb = KgEmbeddings::load(&kge_path)?;

    let (doc_order, mut by_doc) = group_by_doc(source_triplets);
    let (_, mut summary_by_doc) = group_by_doc(summary_triplets);
    let mut labeled = Vec::new();
    for doc_id in doc_order {
        let docs_triplets = by_doc.remove(&doc_id).unwrap_or_default();
        let summary = summary_by_doc.remove(&doc_id).unwrap_or_default();
        labeled.extend(label_triplets(
            &docs_triplets,
            &summary,
            &emb,
            cfg.label_threshold,
        ));
    }

    let out = artifacts.labeled();
    crate::select::save_labeled(&out, &labeled)?;
    manifest.output(&out);
    manifest.write(&artifacts)
}

/// Fits the sigmoid selection head on the labeled facts.
pub fn stage_train_classifier(cfg: &PipelineConfig) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    train_classifier_inner(cfg)
}

fn train_classifier_inner(cfg: &PipelineConfig) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let labeled_path = artifacts.labeled();
    let kge_path = artifacts.kge();
    require(&labeled_path, STAGE_LABEL)?;
    require(&kge_path, STAGE_TRAIN_KGE)?;

    let mut manifest = Manifest::new(STAGE_TRAIN_CLASSIFIER, None, cfg.seed, 1.0);
    manifest.input(&labeled_path)?;
    manifest.input(&kge_path)?;

    let labeled = crate::select::load_labeled(&labeled_path)?;
    let emb = KgEmbeddings::load(&kge_path)?;
    let data: Vec<(Vec<f64>, bool)> = labeled
        .iter()
        .map(|l| (crate::select::embed_or_fallback(&emb, &l.triplet), l.label))
        .collect();
    let (params, losses) = train_classifier(&data, &cfg.classifier)?;

    let out = artifacts.classifier();
    params.save(&out)?;
    manifest.output(&out);

    let loss_path = artifacts.classifier_loss();
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;
    manifest.output(&loss_path);
    manifest.write(&artifacts)
}

/// Loads whatever fact-selection inputs a variant needs.
struct SelectionInputs {
    emb: Option<KgEmbeddings>,
    classifier: Option<ClassifierParams>,
    triplets_by_doc: HashMap<String, Vec<Triplet>>,
}

impl SelectionInputs {
    fn load(
        artifacts: &Artifacts,
        variant: Variant,
        splits: &[Split],
        manifest: &mut Manifest,
    ) -> Result<Self> {
        let mut inputs = SelectionInputs {
            emb: None,
            classifier: None,
            triplets_by_doc: HashMap::new(),
        };
        if variant.needs_kge() {
            let kge_path = artifacts.kge();
            require(&kge_path, STAGE_TRAIN_KGE)?;
            manifest.input(&kge_path)?;
            inputs.emb = Some(KgEmbeddings::load(&kge_path)?);
            for &split in splits {
                let path = artifacts.source_triplets(split);
                require(&path, STAGE_EXTRACT)?;
                manifest.input(&path)?;
                let (triplets, _) = load_triplets(&path)?;
                let (_, by_doc) = group_by_doc(triplets);
                inputs.triplets_by_doc.extend(by_doc);
            }
        }
        if variant.needs_classifier() {
            let classifier_path = artifacts.classifier();
            require(&classifier_path, STAGE_TRAIN_CLASSIFIER)?;
            manifest.input(&classifier_path)?;
            inputs.classifier = Some(ClassifierParams::load(&classifier_path)?);
        }
        Ok(inputs)
    }

    fn embeddings_for(
        &self,
        doc_id: &str,
        variant: Variant,
        tau: f64,
        cap: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let empty = Vec::new();
        let triplets = self.triplets_by_doc.get(doc_id).unwrap_or(&empty);
        variant_embeddings(
            triplets,
            variant,
            self.emb.as_ref(),
            self.classifier.as_ref(),
            tau,
            cap,
        )
    }
}

/// Trains one variant of the summarizer and keeps its best checkpoint.
pub fn stage_train(cfg: &PipelineConfig, variant: Variant, fraction: f64) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    train_inner(cfg, variant, fraction)
}

fn train_inner(cfg: &PipelineConfig, variant: Variant, fraction: f64) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let mut manifest = Manifest::new(STAGE_TRAIN, Some(variant), cfg.seed, fraction);
    manifest.input(cfg.data_path(Split::Train)?)?;
    manifest.input(cfg.data_path(Split::Valid)?)?;

    let train_docs = load_split(cfg, Split::Train, fraction)?;
    let valid_docs = load_split(cfg, Split::Valid, fraction)?;
    let selection = SelectionInputs::load(
        &artifacts,
        variant,
        &[Split::Train, Split::Valid],
        &mut manifest,
    )?;

    let vocab = build_vocab(&train_docs, cfg.min_freq)?;
    let vocab_path = artifacts.vocab();
    vocab.save(&vocab_path)?;
    manifest.output(&vocab_path);

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.kg_dim = 3 * cfg.kge.dim;

    let examples = train_docs
        .iter()
        .map(|doc| {
            Ok(Example {
                source: encode(&tokenize(&doc.source), &vocab, model_cfg.max_len),
                kg: selection.embeddings_for(&doc.id, variant, cfg.tau, cfg.cap)?,
                target: encode(&tokenize(&doc.summary), &vocab, model_cfg.max_len),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_pairs = valid_docs
        .iter()
        .map(|doc| {
            Ok(EvalPair {
                source: encode(&tokenize(&doc.source), &vocab, model_cfg.max_len),
                kg: selection.embeddings_for(&doc.id, variant, cfg.tau, cfg.cap)?,
                reference: tokenize(&doc.summary),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let model = Summarizer::new(model_cfg, cfg.seed)?;
    let start = Checkpoint::fresh(model, vocab, cfg.train.seed);
    let work_dir = artifacts.train_dir(variant);
    fs::create_dir_all(&work_dir).map_err(|e| Error::io(&work_dir, e))?;
    let outcome = train_summarizer(&start, &examples, &eval_pairs, &cfg.train, &work_dir)?;

    let model_path = artifacts.model(variant);
    match &outcome.best {
        Some((best_path, _)) => {
            fs::copy(best_path, &model_path).map_err(|e| Error::io(&model_path, e))?;
        }
        None => save_checkpoint(&model_path, &outcome.state)?,
    }
    manifest.output(&model_path);
    manifest.output(&work_dir.join("trace.csv"));
    manifest.write(&artifacts)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedRecord {
    id: String,
    candidate: String,
    reference: String,
}

/// Decodes summaries for the test split with one trained variant.
pub fn stage_generate(cfg: &PipelineConfig, variant: Variant, fraction: f64) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    generate_inner(cfg, variant, fraction)
}

fn generate_inner(cfg: &PipelineConfig, variant: Variant, fraction: f64) -> Result<()> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let model_path = artifacts.model(variant);
    require(&model_path, STAGE_TRAIN)?;

    let mut manifest = Manifest::new(STAGE_GENERATE, Some(variant), cfg.seed, fraction);
    manifest.input(&model_path)?;
    manifest.input(cfg.data_path(Split::Test)?)?;

    let checkpoint = load_checkpoint(&model_path)?;
    let docs = load_split(cfg, Split::Test, fraction)?;
    let selection = SelectionInputs::load(&artifacts, variant, &[Split::Test], &mut manifest)?;
    let mode = cfg.generate.decode_mode()?;

    let mut lines = String::new();
    for doc in &docs {
        let source = encode(&tokenize(&doc.source), &checkpoint.vocab, checkpoint.model.cfg.max_len);
        let kg = selection.embeddings_for(&doc.id, variant, cfg.tau, cfg.cap)?;
        let out = checkpoint
            .model
            .generate(&source, &kg, mode, cfg.generate.max_out)?;
        let record = GeneratedRecord {
            id: doc.id.clone(),
            candidate: decode(&out, &checkpoint.vocab).join(" "),
            reference: doc.summary.clone(),
        };
        lines.push_str(&serde_json::to_string(&record).expect("record serialization"));
        lines.push('\n');
    }
    let out_path = artifacts.generated(variant);
    fs::write(&out_path, lines).map_err(|e| Error::io(&out_path, e))?;
    manifest.output(&out_path);
    manifest.write(&artifacts)
}

/// Scores one variant's generated summaries against the references.
pub fn stage_evaluate(cfg: &PipelineConfig, variant: Variant) -> Result<Report> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    evaluate_inner(cfg, variant)
}

fn evaluate_inner(cfg: &PipelineConfig, variant: Variant) -> Result<Report> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let generated_path = artifacts.generated(variant);
    require(&generated_path, STAGE_GENERATE)?;

    let mut manifest = Manifest::new(STAGE_EVALUATE, Some(variant), cfg.seed, 1.0);
    manifest.input(&generated_path)?;

    let text = fs::read_to_string(&generated_path).map_err(|e| Error::io(&generated_path, e))?;
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GeneratedRecord =
            serde_json::from_str(line).map_err(|e| Error::Dataset {
                path: generated_path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        ids.push(record.id);
        pairs.push((tokenize(&record.reference), tokenize(&record.candidate)));
    }
    let (report, per_pair) = evaluate_corpus(&pairs)?;

    let eval_path = artifacts.eval(variant);
    let mut json = serde_json::to_string_pretty(&report).expect("report serialization");
    json.push('\n');
    fs::write(&eval_path, json).map_err(|e| Error::io(&eval_path, e))?;
    manifest.output(&eval_path);

    let pairs_path = artifacts.eval_pairs(variant);
    let mut csv = String::from("doc_id,rouge1,rouge2,rougeL\n");
    for (id, scores) in ids.iter().zip(&per_pair) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            id, scores.rouge1.f1, scores.rouge2.f1, scores.rouge_l.f1
        ));
    }
    fs::write(&pairs_path, csv).map_err(|e| Error::io(&pairs_path, e))?;
    manifest.output(&pairs_path);
    manifest.write(&artifacts)?;
    Ok(report)
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Collects every variant's scores into `report.md` and `report.json`
/// (same numbers, one decimal place). Returns the markdown.
pub fn stage_report(cfg: &PipelineConfig) -> Result<String> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    report_inner(cfg)
}

fn report_inner(cfg: &PipelineConfig) -> Result<String> {
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    let mut manifest = Manifest::new(STAGE_REPORT, None, cfg.seed, 1.0);
    let mut rows: Vec<(Variant, Report)> = Vec::new();
    for variant in Variant::ALL {
        let path = artifacts.eval(variant);
        if !path.exists() {
            continue;
        }
        manifest.input(&path)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: Report = serde_json::from_str(&text).map_err(|e| Error::Dataset {
            path: path.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
        rows.push((variant, report));
    }
    if rows.is_empty() {
        return Err(Error::MissingPrerequisite {
            artifact: artifacts.eval(Variant::Full).display().to_string(),
            stage: STAGE_EVALUATE.to_string(),
        });
    }

    let mut md = String::from("# Summarization results\n\n");
    md.push_str("| variant | rouge1 | rouge2 | rougeL | pairs |\n");
    md.push_str("|---|---|---|---|---|\n");
    let mut json_rows = BTreeMap::new();
    for (variant, report) in &rows {
        md.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} | {} |\n",
            variant,
            round1(report.rouge1),
            round1(report.rouge2),
            round1(report.rouge_l),
            report.n_pairs
        ));
        json_rows.insert(
            variant.as_str().to_string(),
            serde_json::json!({
                "rouge1": round1(report.rouge1),
                "rouge2": round1(report.rouge2),
                "rougeL": round1(report.rouge_l),
                "n_pairs": report.n_pairs,
            }),
        );
    }

    let md_path = artifacts.report_md();
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    manifest.output(&md_path);

    let json_path = artifacts.report_json();
    let mut json = serde_json::to_string_pretty(&serde_json::json!({ "variants": json_rows }))
        .expect("report serialization");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    manifest.output(&json_path);
    manifest.write(&artifacts)?;
    Ok(md)
}

/// Trains, decodes, and scores every variant, then writes the comparison
/// report. Assumes the fact-extraction stages have already run.
pub fn stage_ablate(cfg: &PipelineConfig, fraction: f64) -> Result<String> {
    let _lock = LockGuard::acquire(&cfg.artifacts_dir)?;
    for variant in Variant::ALL {
        train_inner(cfg, variant, fraction)?;
        generate_inner(cfg, variant, fraction)?;
        evaluate_inner(cfg, variant)?;
    }
    report_inner(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::synthetic_corpus;
    use tempfile::TempDir;

    fn doc(id: &str) -> Document {
        Document {
            id: id.into(),
            source: format!("{id} source text ."),
            summary: format!("{id} summary ."),
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for variant in Variant::ALL {
            assert_eq!(variant.as_str().parse::<Variant>().unwrap(), variant);
        }
        assert!("fancy".parse::<Variant>().is_err());
    }

    #[test]
    fn subset_keeps_order_and_is_deterministic() {
        let docs: Vec<Document> = (0..10).map(|i| doc(&format!("d{i}"))).collect();
        let a = subset_docs(docs.clone(), 0.5, 7).unwrap();
        let b = subset_docs(docs.clone(), 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let positions: Vec<usize> = a
            .iter()
            .map(|d| docs.iter().position(|o| o.id == d.id).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset_docs(docs.clone(), 1.0, 7).unwrap(), docs);
        assert_eq!(subset_docs(docs.clone(), 0.01, 7).unwrap().len(), 1);
        assert!(subset_docs(docs.clone(), 0.0, 7).is_err());
        assert!(subset_docs(docs, 1.5, 7).is_err());
    }

    #[test]
    fn lock_guard_blocks_and_releases() {
        let dir = TempDir::new().unwrap();
        let guard = LockGuard::acquire(dir.path()).unwrap();
        match LockGuard::acquire(dir.path()) {
            Err(Error::Locked { lock }) => assert_eq!(lock, dir.path().join("lock")),
            other => panic!("expected lock error, got {other:?}"),
        }
        drop(guard);
        LockGuard::acquire(dir.path()).unwrap();
    }

    fn desk_config(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.train_data = Some(dir.join("train.jsonl"));
        cfg.valid_data = Some(dir.join("valid.jsonl"));
        cfg.test_data = Some(dir.join("test.jsonl"));
        cfg.artifacts_dir = dir.join("artifacts");
        cfg.set_seed(11);
        cfg.min_freq = 1;
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.d_ff = 32;
        cfg.model.max_len = 64;
        cfg.model.dropout = 0.0;
        cfg.kge.dim = 4;
        cfg.kge.epochs = 5;
        cfg.kge.batch = 8;
        cfg.classifier.epochs = 1;
        cfg.classifier.steps_per_epoch = 300;
        cfg.classifier.batch = 8;
        cfg.cap = 4;
        cfg.train.warmup_encoder = 3;
        cfg.train.warmup_decoder = 2;
        cfg.train.lr_decoder = 2e-3;
        cfg.train.accumulate_every = 1;
        cfg.train.checkpoint_every = 3;
        cfg.train.total_steps = 6;
        cfg.train.batch_size = 2;
        cfg.train.eval_max_out = 10;
        cfg.generate.max_out = 10;
        cfg
    }

    fn write_toy_data(dir: &Path) {
        let mut docs = synthetic_corpus(12, 3);
        let test = docs.split_off(10);
        let valid = docs.split_off(8);
        crate::corpus::save_dataset(&dir.join("train.jsonl"), &docs).unwrap();
        crate::corpus::save_dataset(&dir.join("valid.jsonl"), &valid).unwrap();
        crate::corpus::save_dataset(&dir.join("test.jsonl"), &test).unwrap();
    }

    #[test]
    fn missing_prerequisites_name_the_stage_to_run() {
        let dir = TempDir::new().unwrap();
        write_toy_data(dir.path());
        let cfg = desk_config(dir.path());
        match stage_train_kge(&cfg) {
            Err(Error::MissingPrerequisite { stage, .. }) => {
                assert_eq!(stage, STAGE_EXTRACT)
            }
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
        match stage_train(&cfg, Variant::Full, 1.0) {
            Err(Error::MissingPrerequisite { stage, .. }) => {
                assert_eq!(stage, STAGE_TRAIN_KGE)
            }
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
        match stage_generate(&cfg, Variant::NoKg, 1.0) {
            Err(Error::MissingPrerequisite { stage, .. }) => assert_eq!(stage, STAGE_TRAIN),
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
        match stage_report(&cfg) {
            Err(Error::MissingPrerequisite { stage, .. }) => assert_eq!(stage, STAGE_EVALUATE),
            other => panic!("expected missing prerequisite, got {other:?}"),
        }
        // The failed stages released the lock.
        assert!(!dir.path().join("artifacts/lock").exists());
    }

    #[test]
    fn full_stage_chain_produces_all_artifacts() {
        let dir = TempDir::new().unwrap();
        write_toy_data(dir.path());
        let cfg = desk_config(dir.path());
        let artifacts = Artifacts::new(&cfg.artifacts_dir);

        stage_extract(&cfg, 1.0).unwrap();
        stage_train_kge(&cfg).unwrap();
        stage_label(&cfg).unwrap();
        stage_train_classifier(&cfg).unwrap();
        stage_train(&cfg, Variant::Full, 1.0).unwrap();
        stage_generate(&cfg, Variant::Full, 1.0).unwrap();
        let report = stage_evaluate(&cfg, Variant::Full).unwrap();
        assert_eq!(report.n_pairs, 2);

        for path in [
            artifacts.source_triplets(Split::Train),
            artifacts.summary_triplets(),
            artifacts.source_triplets(Split::Valid),
            artifacts.source_triplets(Split::Test),
            artifacts.kge(),
            artifacts.labeled(),
            artifacts.classifier(),
            artifacts.vocab(),
            artifacts.model(Variant::Full),
            artifacts.generated(Variant::Full),
            artifacts.eval(Variant::Full),
            artifacts.eval_pairs(Variant::Full),
            artifacts.manifest(STAGE_EXTRACT),
            artifacts.manifest("train_full"),
        ] {
            assert!(path.exists(), "{} missing", path.display());
        }

        // Manifests digest their inputs as 64-char hex.
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(artifacts.manifest(STAGE_TRAIN_KGE)).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.stage, STAGE_TRAIN_KGE);
        assert!(!manifest.inputs.is_empty());
        for digest in manifest.inputs.values() {
            assert_eq!(digest.len(), 64);
            assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
        }

        // Generated records parse back and cover the test docs.
        let text = fs::read_to_string(artifacts.generated(Variant::Full)).unwrap();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let record: GeneratedRecord = serde_json::from_str(line).unwrap();
            assert!(record.id.starts_with("syn_"));
        }

        let report_text = stage_report(&cfg).unwrap();
        assert!(report_text.contains("| full |"));
        assert!(artifacts.report_md().exists());
        assert!(artifacts.report_json().exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = TempDir::new().unwrap();
        write_toy_data(dir.path());
        let cfg = desk_config(dir.path());
        let artifacts = Artifacts::new(&cfg.artifacts_dir);

        stage_extract(&cfg, 1.0).unwrap();
        stage_train_kge(&cfg).unwrap();
        stage_label(&cfg).unwrap();
        stage_train_classifier(&cfg).unwrap();
        stage_train(&cfg, Variant::NoKg, 1.0).unwrap();
        stage_generate(&cfg, Variant::NoKg, 1.0).unwrap();
        stage_evaluate(&cfg, Variant::NoKg).unwrap();

        let files = [
            artifacts.source_triplets(Split::Train),
            artifacts.summary_triplets(),
            artifacts.kge(),
            artifacts.labeled(),
            artifacts.classifier(),
            artifacts.vocab(),
            artifacts.model(Variant::NoKg),
            artifacts.generated(Variant::NoKg),
            artifacts.eval(Variant::NoKg),
            artifacts.manifest(STAGE_EXTRACT),
            artifacts.manifest("train_no_kg"),
        ];
        let before: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();

        stage_extract(&cfg, 1.0).unwrap();
        stage_train_kge(&cfg).unwrap();
        stage_label(&cfg).unwrap();
        stage_train_classifier(&cfg).unwrap();
        stage_train(&cfg, Variant::NoKg, 1.0).unwrap();
        stage_generate(&cfg, Variant::NoKg, 1.0).unwrap();
        stage_evaluate(&cfg, Variant::NoKg).unwrap();

        for (path, old) in files.iter().zip(&before) {
            let new = fs::read(path).unwrap();
            assert_eq!(&new, old, "{} changed between reruns", path.display());
        }
    }

    #[test]
    fn subset_fraction_shrinks_the_run() {
        let dir = TempDir::new().unwrap();
        write_toy_data(dir.path());
        let cfg = desk_config(dir.path());
        stage_extract(&cfg, 0.5).unwrap();
        let (triplets, _) = load_triplets(
            &Artifacts::new(&cfg.artifacts_dir).source_triplets(Split::Train),
        )
        .unwrap();
        let doc_ids: std::collections::HashSet<_> =
            triplets.iter().map(|t| t.doc_id.clone()).collect();
        assert!(doc_ids.len() <= 4, "expected at most 4 docs, got {doc_ids:?}");
    }

    #[test]
    fn report_rounds_md_and_json_identically() {
        let dir = TempDir::new().unwrap();
        write_toy_data(dir.path());
        let cfg = desk_config(dir.path());
        let artifacts = Artifacts::new(&cfg.artifacts_dir);
        fs::create_dir_all(&cfg.artifacts_dir).unwrap();
        let report = Report {
            rouge1: 61.2499,
            rouge2: 40.95,
            rouge_l: 59.999,
            n_pairs: 8,
        };
        let mut json = serde_json::to_string_pretty(&report).unwrap();
        json.push('\n');
        fs::write(artifacts.eval(Variant::Full), json).unwrap();
        let md = stage_report(&cfg).unwrap();
        assert!(md.contains("| full | 61.2 | 41.0 | 60.0 | 8 |"), "{md}");
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(artifacts.report_json()).unwrap()).unwrap();
        assert_eq!(json["variants"]["full"]["rouge1"], 61.2);
        assert_eq!(json["variants"]["full"]["rouge2"], 41.0);
        assert_eq!(json["variants"]["full"]["rougeL"], 60.0);
    }
}
