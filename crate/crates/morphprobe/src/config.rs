//! Declarative experiment configuration (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! Every seed is explicit; `--seed NAME=VALUE` overrides one of them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use morphprobe_core::control::DEFAULT_FLOOR;
use morphprobe_core::embedding::{LayerId, DEFAULT_BATCH_SIZE};
use morphprobe_core::eval::TokenPredicate;
use morphprobe_core::labels::FeatureLabel;
use morphprobe_core::probe::{AdamConfig, ProbeKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Set id of the pooled multilingual probe.
pub const MULTI: &str = "multi";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Artifact root; results go to `{output}/{digest}/`.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub layers: Vec<i64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Training sentences kept per language; unlimited when absent.
    #[serde(default)]
    pub train_limit: Option<usize>,
    pub seeds: Seeds,
    pub embeddings: EmbeddingSource,
    pub probe: ProbeKind,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub labels: LabelSection,
    #[serde(default)]
    pub multilingual: MultilingualSection,
    pub languages: Vec<LanguageSpec>,
    #[serde(default)]
    pub transfer: Vec<TransferSpec>,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub control: u64,
    pub shuffle: u64,
    pub init: u64,
    /// Sentence shuffle when pooling multilingual training data.
    pub pool: u64,
    /// Train/dev/test split of single-file corpora.
    pub split: u64,
    /// Synthetic embedding generator.
    pub embeddings: u64,
}

impl Seeds {
    pub const NAMES: [&'static str; 6] = ["control", "shuffle", "init", "pool", "split", "embeddings"];

    pub fn set(&mut self, name: &str, value: u64) -> Result<()> {
        let slot = match name {
            "control" => &mut self.control,
            "shuffle" => &mut self.shuffle,
            "init" => &mut self.init,
            "pool" => &mut self.pool,
            "split" => &mut self.split,
            "embeddings" => &mut self.embeddings,
            other => {
                return Err(Error::Config(format!(
                    "unknown seed {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// Seeded linearly-recoverable vectors, generated during ingest.
    Synthetic { dim: usize, noise: f64 },
    /// Extractor output: `{dir}/{language}.{split}.L{layer:02}.mpec`.
    Cache { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 50,
            batch_size: DEFAULT_BATCH_SIZE,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub floor: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection { floor: DEFAULT_FLOOR }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub min_count: u64,
    pub whitelist: Option<Vec<String>>,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            min_count: 1,
            whitelist: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultilingualSection {
    pub enabled: bool,
    pub exclude: Vec<String>,
    /// Labels kept for the pooled probe; all pooled training labels otherwise.
    pub whitelist: Option<Vec<String>>,
}

impl Default for MultilingualSection {
    fn default() -> Self {
        MultilingualSection {
            enabled: false,
            exclude: vec!["ko".to_string()],
            whitelist: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusFiles {
    Presplit { train: PathBuf, dev: PathBuf, test: PathBuf },
    /// One file split by ratio with the `split` seed.
    Single { corpus: PathBuf, split: (f64, f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLanguage")]
pub struct LanguageSpec {
    pub code: String,
    #[serde(flatten)]
    pub files: CorpusFiles,
}

/// Strict wire form of a language entry: a flattened untagged enum would
/// silently accept unknown keys.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLanguage {
    code: String,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
    corpus: Option<PathBuf>,
    split: Option<(f64, f64, f64)>,
}

impl TryFrom<RawLanguage> for LanguageSpec {
    type Error = String;

    fn try_from(r: RawLanguage) -> std::result::Result<Self, String> {
        let files = match (r.train, r.dev, r.test, r.corpus, r.split) {
            (Some(train), Some(dev), Some(test), None, None) => CorpusFiles::Presplit { train, dev, test },
            (None, None, None, Some(corpus), Some(split)) => CorpusFiles::Single { corpus, split },
            _ => {
                return Err(format!(
                    "language {}: give either train, dev and test, or corpus and split",
                    r.code
                ))
            }
        };
        Ok(LanguageSpec { code: r.code, files })
    }
}

/// A held-out language: only its test data is ever read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub code: String,
    pub test: PathBuf,
}

/// Construction-filtered evaluation of one label on one probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub name: String,
    /// Probe set id: a language code or `multi`.
    pub set: String,
    /// Test language; defaults to `set` for monolingual probes.
    #[serde(default)]
    pub language: Option<String>,
    pub label: String,
    pub predicate: TokenPredicate,
}

impl FilterSpec {
    pub fn language(&self) -> &str {
        self.language.as_deref().unwrap_or(&self.set)
    }
}

/// A config file after validation, with paths resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub layers: Vec<LayerId>,
    pub digest: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            epochs: t.epochs,
            batch_size: t.batch_size,
            shuffle_seed: self.seeds.shuffle,
            init_seed: self.seeds.init,
            patience: t.patience,
        }
    }

    /// Languages pooled into the multilingual probe.
    pub fn pooled_languages(&self) -> Vec<&str> {
        self.languages
            .iter()
            .map(|l| l.code.as_str())
            .filter(|c| !self.multilingual.exclude.iter().any(|e| e == c))
            .collect()
    }

    /// Probe set ids: each training language, then `multi` when enabled.
    pub fn probe_sets(&self) -> Vec<String> {
        let mut sets: Vec<String> = self.languages.iter().map(|l| l.code.clone()).collect();
        if self.multilingual.enabled {
            sets.push(MULTI.to_string());
        }
        sets
    }

    /// Languages whose test sets a probe set is evaluated on.
    pub fn set_languages(&self, set: &str) -> Vec<String> {
        if set == MULTI {
            self.pooled_languages().into_iter().map(String::from).collect()
        } else {
            vec![set.to_string()]
        }
    }

    fn input_files(&self) -> Vec<&Path> {
        let mut files = Vec::new();
        for l in &self.languages {
            match &l.files {
                CorpusFiles::Presplit { train, dev, test } => files.extend([train.as_path(), dev, test]),
                CorpusFiles::Single { corpus, .. } => files.push(corpus),
            }
        }
        files.extend(self.transfer.iter().map(|t| t.test.as_path()));
        files
    }

    fn validate(&self, base: &Path) -> Result<Vec<LayerId>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return bad("layers must not be empty".into());
        }
        let layers = self
            .layers
            .iter()
            .map(|&l| LayerId::new(l).map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if layers.iter().collect::<BTreeSet<_>>().len() != layers.len() {
            return bad("layers must be distinct".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.train_limit == Some(0) {
            return bad("train_limit must be positive".into());
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.train.learning_rate > 0.0) || !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return bad("learning_rate must be positive and betas must lie in [0, 1)".into());
        }
        if let ProbeKind::Mlp1 { hidden: 0 } = self.probe {
            return bad("mlp1 hidden width must be positive".into());
        }
        if !(self.control.floor > 0.0 && self.control.floor < 0.5) {
            return bad(format!("control floor {} must lie in (0, 0.5)", self.control.floor));
        }
        if self.labels.min_count == 0 {
            return bad("labels.min_count must be at least 1".into());
        }
        for list in [&self.labels.whitelist, &self.multilingual.whitelist].into_iter().flatten() {
            for l in list {
                FeatureLabel::parse(l).map_err(|e| Error::Config(format!("whitelist: {e}")))?;
            }
        }
        if self.languages.is_empty() {
            return bad("at least one training language is required".into());
        }
        let mut codes = BTreeSet::new();
        for l in &self.languages {
            if l.code.is_empty() || l.code == MULTI || l.code.contains(['/', '.', '\\']) {
                return bad(format!("invalid language code {:?}", l.code));
            }
            if !codes.insert(l.code.as_str()) {
                return bad(format!("language {} listed twice", l.code));
            }
            if let CorpusFiles::Single { split: (a, b, c), .. } = l.files {
                if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
                    return bad(format!("{}: split ratios must be non-negative and sum to 1", l.code));
                }
            }
        }
        let mut targets = BTreeSet::new();
        for t in &self.transfer {
            if codes.contains(t.code.as_str()) {
                return bad(format!(
                    "transfer target {} is also a training language; held-out languages are test-only",
                    t.code
                ));
            }
            if t.code == MULTI || t.code.contains(['/', '.', '\\']) || !targets.insert(t.code.as_str()) {
                return bad(format!("invalid or repeated transfer target {:?}", t.code));
            }
        }
        if self.multilingual.enabled && self.pooled_languages().len() < 2 {
            return bad("multilingual probing needs at least two pooled languages".into());
        }
        let sets = self.probe_sets();
        for f in &self.filters {
            if !sets.contains(&f.set) {
                return bad(format!("filter {}: unknown probe set {}", f.name, f.set));
            }
            if !self.set_languages(&f.set).iter().any(|l| l == f.language()) {
                return bad(format!("filter {}: {} is not evaluated by probe set {}", f.name, f.language(), f.set));
            }
            FeatureLabel::parse(&f.label).map_err(|e| Error::Config(format!("filter {}: {e}", f.name)))?;
        }
        let names: BTreeSet<&str> = self.filters.iter().map(|f| f.name.as_str()).collect();
        if names.len() != self.filters.len() {
            return bad("filter names must be distinct".into());
        }
        match &self.embeddings {
            EmbeddingSource::Synthetic { dim, noise } => {
                if *dim == 0 || !noise.is_finite() || *noise < 0.0 {
                    return bad("synthetic embeddings need dim >= 1 and a finite noise >= 0".into());
                }
            }
            EmbeddingSource::Cache { dir } => {
                if !base.join(dir).is_dir() {
                    return bad(format!("cache directory {} does not exist", dir.display()));
                }
            }
        }
        for f in self.input_files() {
            if !base.join(f).is_file() {
                return bad(format!("corpus file {} does not exist", f.display()));
            }
        }
        Ok(layers)
    }

    /// Hash of the config (excluding the output location) and of every input
    /// corpus' contents.
    fn digest(&self, base: &Path) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("config serializes"));
        for f in self.input_files() {
            let path = base.join(f);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize())[..16].to_string())
    }
}

impl Experiment {
    /// Parses, applies seed overrides, validates and digests a config file.
    pub fn load(path: &Path, seed_overrides: &[(String, u64)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(ExperimentConfig::from_toml(&text)?, base_dir, seed_overrides)
    }

    pub fn from_config(mut config: ExperimentConfig, base_dir: PathBuf, seed_overrides: &[(String, u64)]) -> Result<Self> {
        for (name, value) in seed_overrides {
            config.seeds.set(name, *value)?;
        }
        let layers = config.validate(&base_dir)?;
        let digest = config.digest(&base_dir)?;
        Ok(Experiment {
            config,
            base_dir,
            layers,
            digest,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// `{output}/{digest}`.
    pub fn root(&self) -> PathBuf {
        self.resolve(&self.config.output).join(&self.digest)
    }
}

/// Parses `NAME=VALUE` seed overrides.
pub fn parse_seed_override(s: &str) -> std::result::Result<(String, u64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value = value.parse().map_err(|e| format!("seed {name}: {e}"))?;
    Ok((name.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
layers = [0, 6]
train_limit = 800

[seeds]
control = 7
shuffle = 1
init = 2
pool = 3
split = 4
embeddings = 5

[embeddings]
source = "synthetic"
dim = 64
noise = 0.1

[probe]
kind = "linear"

[[languages]]
code = "aa"
train = "a.conllu"
dev = "a.conllu"
test = "a.conllu"

[[languages]]
code = "ko"
corpus = "a.conllu"
split = [0.8, 0.1, 0.1]
"#;

    fn dir_with_corpus() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.conllu"), "1\tx\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\n").unwrap();
        dir
    }

    fn load(extra: &str, dir: &tempfile::TempDir) -> Result<Experiment> {
        let cfg = ExperimentConfig::from_toml(&format!("{BASE}{extra}"))?;
        Experiment::from_config(cfg, dir.path().to_path_buf(), &[])
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let dir = dir_with_corpus();
        let e = load("", &dir).unwrap();
        let c = &e.config;
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.control.floor, 0.001);
        assert_eq!(c.multilingual.exclude, vec!["ko"]);
        assert_eq!(c.train_config().shuffle_seed, 1);
        assert_eq!(e.layers.len(), 2);
        assert_eq!(c.probe_sets(), vec!["aa", "ko"]);
    }

    #[test]
    fn transfer_target_cannot_be_a_training_language() {
        let dir = dir_with_corpus();
        let err = load("\n[[transfer]]\ncode = \"aa\"\ntest = \"a.conllu\"\n", &dir).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("test-only"));
        load("\n[[transfer]]\ncode = \"sl\"\ntest = \"a.conllu\"\n", &dir).unwrap();
    }

    #[test]
    fn missing_files_and_bad_layers_are_config_errors() {
        let dir = dir_with_corpus();
        let err = load("\n[[transfer]]\ncode = \"sl\"\ntest = \"missing.conllu\"\n", &dir).unwrap_err();
        assert!(err.to_string().contains("missing.conllu"));
        let cfg = ExperimentConfig::from_toml(&BASE.replace("[0, 6]", "[0, 3]")).unwrap();
        let err = Experiment::from_config(cfg, dir.path().to_path_buf(), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_toml(&format!("{BASE}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn multilingual_excludes_korean_and_needs_two_languages() {
        let dir = dir_with_corpus();
        let err = load("\n[multilingual]\nenabled = true\n", &dir).unwrap_err();
        assert!(err.to_string().contains("two pooled languages"));
        let with_third = BASE.replace(
            "[[languages]]\ncode = \"ko\"",
            "[[languages]]\ncode = \"bb\"\ntrain = \"a.conllu\"\ndev = \"a.conllu\"\ntest = \"a.conllu\"\n\n[[languages]]\ncode = \"ko\"",
        );
        let cfg = ExperimentConfig::from_toml(&format!("{with_third}\n[multilingual]\nenabled = true\n")).unwrap();
        let e = Experiment::from_config(cfg, dir.path().to_path_buf(), &[]).unwrap();
        assert_eq!(e.config.pooled_languages(), vec!["aa", "bb"]);
        assert_eq!(e.config.probe_sets().last().unwrap(), MULTI);
    }

    #[test]
    fn seed_overrides_change_the_digest() {
        let dir = dir_with_corpus();
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let a = Experiment::from_config(cfg.clone(), dir.path().to_path_buf(), &[]).unwrap();
        let b = Experiment::from_config(cfg.clone(), dir.path().to_path_buf(), &[("control".into(), 8)]).unwrap();
        assert_eq!(b.config.seeds.control, 8);
        assert_ne!(a.digest, b.digest);
        let mut moved = cfg.clone();
        moved.output = PathBuf::from("elsewhere");
        let c = Experiment::from_config(moved, dir.path().to_path_buf(), &[]).unwrap();
        assert_eq!(a.digest, c.digest, "output location is not part of the digest");
        let err = Experiment::from_config(cfg, dir.path().to_path_buf(), &[("bogus".into(), 1)]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(parse_seed_override("init=42"), Ok(("init".into(), 42)));
        assert!(parse_seed_override("init").is_err());
    }

    #[test]
    fn filters_refer_to_known_sets() {
        let dir = dir_with_corpus();
        let ok = "\n[[filters]]\nname = \"f\"\nset = \"aa\"\nlabel = \"Definite=Def\"\npredicate = { kind = \"mwt_components\", value = [\"ADP\", \"DET?\", \"NOUN\"] }\n";
        let e = load(ok, &dir).unwrap();
        assert_eq!(
            e.config.filters[0].predicate,
            TokenPredicate::MwtComponents(vec!["ADP".into(), "DET?".into(), "NOUN".into()])
        );
        assert!(load(&ok.replace("\"aa\"", "\"zz\""), &dir).is_err());
    }
}
