//! Flat `key = value` configuration for the pipeline.
//!
//! One file drives every stage. Keys are dotted section names
//! (`train.total_steps = 400`), `#` starts a comment, unknown or duplicate
//! keys are rejected with their line number, and relative paths resolve
//! against the directory holding the config file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::kg::KgeConfig;
use crate::model::{DecodeMode, ModelConfig};
use crate::select::ClassifierConfig;
use crate::training::TrainConfig;
use crate::triplet::Lexicon;

/// Generation-stage settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    /// `greedy` or `beam`.
    pub mode: String,
    pub beam_width: usize,
    pub max_out: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: "greedy".into(),
            beam_width: 4,
            max_out: 32,
        }
    }
}

impl GenerateConfig {
    pub fn decode_mode(&self) -> Result<DecodeMode> {
        match self.mode.as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam {
                width: self.beam_width,
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown decode mode '{other}' (expected 'greedy' or 'beam')"
            ))),
        }
    }
}

/// Settings for every pipeline stage. `model.vocab_size` and
/// `model.kg_dim` are derived from the corpus and the embedding width at
/// build time, so the config file never sets them.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub lexicon_verbs: Option<PathBuf>,
    pub lexicon_stopwords: Option<PathBuf>,
    pub lexicon_prepositions: Option<PathBuf>,
    pub artifacts_dir: PathBuf,
    pub seed: u64,
    pub min_freq: usize,
    pub model: ModelConfig,
    pub kge: KgeConfig,
    pub classifier: ClassifierConfig,
    /// Cosine similarity above which an extracted triplet counts as
    /// summary-relevant when labeling.
    pub label_threshold: f64,
    /// Classifier probability a triplet needs to be selected.
    pub tau: f64,
    /// Most triplets fused into the decoder memory.
    pub cap: usize,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 13;
        let mut kge = KgeConfig::default();
        kge.seed = seed;
        let mut classifier = ClassifierConfig::default();
        classifier.seed = seed;
        let mut train = TrainConfig::default();
        train.seed = seed;
        PipelineConfig {
            train_data: None,
            valid_data: None,
            test_data: None,
            lexicon_verbs: None,
            lexicon_stopwords: None,
            lexicon_prepositions: None,
            artifacts_dir: PathBuf::from("artifacts"),
            seed,
            min_freq: 1,
            model: ModelConfig::desk(4),
            kge,
            classifier,
            label_threshold: 0.8,
            tau: 0.5,
            cap: 16,
            train,
            generate: GenerateConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, ty: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("value '{value}' for '{key}' is not a valid {ty}"))
}

fn resolve(value: &str, base: Option<&Path>) -> PathBuf {
    let path = Path::new(value);
    match base {
        Some(base) if path.is_relative() => base.join(path),
        _ => path.to_path_buf(),
    }
}

impl PipelineConfig {
    /// Applies one assignment. Relative paths resolve against `base` when
    /// given. Errors carry only the reason; callers attach file and line.
    pub fn set(
        &mut self,
        key: &str,
        value: &str,
        base: Option<&Path>,
    ) -> std::result::Result<(), String> {
        if value.is_empty() {
            return Err(format!("key '{key}' has an empty value"));
        }
        match key {
            "data.train" => self.train_data = Some(resolve(value, base)),
            "data.valid" => self.valid_data = Some(resolve(value, base)),
            "data.test" => self.test_data = Some(resolve(value, base)),
            "lexicon.verbs" => self.lexicon_verbs = Some(resolve(value, base)),
            "lexicon.stopwords" => self.lexicon_stopwords = Some(resolve(value, base)),
            "lexicon.prepositions" => self.lexicon_prepositions = Some(resolve(value, base)),
            "artifacts.dir" => self.artifacts_dir = resolve(value, base),
            "seed" => {
                let seed = parse(key, value, "integer")?;
                self.set_seed(seed);
            }
            "corpus.min_freq" => self.min_freq = parse(key, value, "integer")?,

            "model.d_model" => self.model.d_model = parse(key, value, "integer")?,
            "model.n_heads" => self.model.n_heads = parse(key, value, "integer")?,
            "model.enc_layers" => self.model.enc_layers = parse(key, value, "integer")?,
            "model.dec_layers" => self.model.dec_layers = parse(key, value, "integer")?,
            "model.d_ff" => self.model.d_ff = parse(key, value, "integer")?,
            "model.max_len" => self.model.max_len = parse(key, value, "integer")?,
            "model.dropout" => self.model.dropout = parse(key, value, "number")?,

            "kge.dim" => self.kge.dim = parse(key, value, "integer")?,
            "kge.margin" => self.kge.margin = parse(key, value, "number")?,
            "kge.norm" => {
                self.kge.norm = value
                    .parse()
                    .map_err(|_| format!("value '{value}' for '{key}' is not 'l1' or 'l2'"))?
            }
            "kge.lr" => self.kge.lr = parse(key, value, "number")?,
            "kge.epochs" => self.kge.epochs = parse(key, value, "integer")?,
            "kge.batch" => self.kge.batch = parse(key, value, "integer")?,

            "classifier.lr" => self.classifier.lr = parse(key, value, "number")?,
            "classifier.epochs" => self.classifier.epochs = parse(key, value, "integer")?,
            "classifier.steps_per_epoch" => {
                self.classifier.steps_per_epoch = parse(key, value, "integer")?
            }
            "classifier.batch" => self.classifier.batch = parse(key, value, "integer")?,

            "select.label_threshold" => self.label_threshold = parse(key, value, "number")?,
            "select.tau" => self.tau = parse(key, value, "number")?,
            "select.cap" => self.cap = parse(key, value, "integer")?,

            "train.lr_encoder" => self.train.lr_encoder = parse(key, value, "number")?,
            "train.warmup_encoder" => self.train.warmup_encoder = parse(key, value, "integer")?,
            "train.lr_decoder" => self.train.lr_decoder = parse(key, value, "number")?,
            "train.warmup_decoder" => self.train.warmup_decoder = parse(key, value, "integer")?,
            "train.beta1" => self.train.beta1 = parse(key, value, "number")?,
            "train.beta2" => self.train.beta2 = parse(key, value, "number")?,
            "train.eps" => self.train.eps = parse(key, value, "number")?,
            "train.accumulate_every" => {
                self.train.accumulate_every = parse(key, value, "integer")?
            }
            "train.checkpoint_every" => {
                self.train.checkpoint_every = parse(key, value, "integer")?
            }
            "train.total_steps" => self.train.total_steps = parse(key, value, "integer")?,
            "train.batch_size" => self.train.batch_size = parse(key, value, "integer")?,
            "train.label_smoothing" => {
                self.train.label_smoothing = parse(key, value, "number")?
            }
            "train.eval_max_out" => self.train.eval_max_out = parse(key, value, "integer")?,

            "generate.mode" => {
                if value != "greedy" && value != "beam" {
                    return Err(format!(
                        "value '{value}' for '{key}' is not 'greedy' or 'beam'"
                    ));
                }
                self.generate.mode = value.to_string();
            }
            "generate.beam_width" => self.generate.beam_width = parse(key, value, "integer")?,
            "generate.max_out" => self.generate.max_out = parse(key, value, "integer")?,

            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Sets the master seed and propagates it to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.kge.seed = seed;
        self.classifier.seed = seed;
        self.train.seed = seed;
    }

    /// Cross-field checks not tied to any single assignment.
    pub fn validate(&self) -> Result<()> {
        let lexicon_parts = [
            &self.lexicon_verbs,
            &self.lexicon_stopwords,
            &self.lexicon_prepositions,
        ];
        let set = lexicon_parts.iter().filter(|p| p.is_some()).count();
        if set != 0 && set != lexicon_parts.len() {
            return Err(Error::InvalidArgument(
                "lexicon.verbs, lexicon.stopwords, and lexicon.prepositions must be set together"
                    .into(),
            ));
        }
        for (name, v) in [
            ("select.label_threshold", self.label_threshold),
            ("select.tau", self.tau),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1]"
                )));
            }
        }
        if self.cap == 0 {
            return Err(Error::InvalidArgument("select.cap must be positive".into()));
        }
        if self.min_freq == 0 {
            return Err(Error::InvalidArgument(
                "corpus.min_freq must be at least 1".into(),
            ));
        }
        if self.generate.beam_width == 0 || self.generate.max_out == 0 {
            return Err(Error::InvalidArgument(
                "generate.beam_width and generate.max_out must be positive".into(),
            ));
        }
        self.generate.decode_mode()?;
        Ok(())
    }

    /// Dataset path for a split, or an error naming the missing key.
    pub fn data_path(&self, split: Split) -> Result<&Path> {
        let (slot, key) = match split {
            Split::Train => (&self.train_data, "data.train"),
            Split::Valid => (&self.valid_data, "data.valid"),
            Split::Test => (&self.test_data, "data.test"),
        };
        slot.as_deref().ok_or_else(|| {
            Error::InvalidArgument(format!("config does not set {key}"))
        })
    }

    /// The configured word lists, or the bundled ones when unset.
    pub fn load_lexicon(&self) -> Result<Lexicon> {
        match (
            &self.lexicon_verbs,
            &self.lexicon_stopwords,
            &self.lexicon_prepositions,
        ) {
            (Some(v), Some(s), Some(p)) => Lexicon::from_files(v, s, p),
            _ => Ok(Lexicon::builtin().clone()),
        }
    }
}

/// Reads a config file. Defaults apply to every key the file omits.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf);
    let mut cfg = PipelineConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Config {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected 'key = value'".into()))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(err("missing key before '='".into()));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(format!("duplicate key '{key}'")));
        }
        cfg.set(key, value, base.as_deref()).map_err(err)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
