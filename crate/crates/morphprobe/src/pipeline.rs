//! The experiment pipeline: ingest, control, train, eval, transfer, report.
//!
//! Every stage reads persisted upstream artifacts only, skips work whose
//! outputs already exist (unless forced) and writes atomically. Cells
//! (probe set x layer x task) run on a worker pool of configurable size.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use morphprobe_core::conllu::{build_vocabulary, parse_conllu, split_corpus, truncate_train, Corpus, Split, Vocabulary};
use morphprobe_core::control::{compute_marginals, generate_control, ControlAssignment};
use morphprobe_core::embedding::{pool_corpora, synth_embeddings, Dataset, EmbeddingCache, LayerId};
use morphprobe_core::eval::{
    filtered_eval, iv_oov_reports, selectivity, transfer_eval, EvalMeta, EvalReport, FilteredResult, IvOovReports,
    TaskKind, TransferCell,
};
use morphprobe_core::labels::{build_label_space, FeatureLabel, LabelSpace, TargetVector};
use morphprobe_core::probe::{predict, train, Predictions, TrainRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_cache, read_cache_with_manifest, read_checkpoint, read_control, read_corpus, read_json, write_atomic,
    write_cache, write_checkpoint, write_control, write_corpus, write_json,
};
use crate::config::{CorpusFiles, EmbeddingSource, Experiment, MULTI};
use crate::error::{Error, Result};
use crate::format::cache::{CacheManifest, ManifestFlag};
use crate::format::control::ControlManifest;
use crate::report;

pub const TASKS: [TaskKind; 2] = [TaskKind::Diagnostic, TaskKind::Control];

/// Extractor identity recorded in manifests of generated caches.
pub const SYNTHETIC_EXTRACTOR: &str = "morphprobe-synthetic";

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub force: bool,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// Restricts train/eval/transfer/report to these layers.
    pub layers: Option<Vec<LayerId>>,
}

/// Written last by `ingest`; its presence marks the stage complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub corpora: BTreeMap<String, CorpusStats>,
    pub label_spaces: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
}

/// Diagnostic and control scores of one probe on one test language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityRow {
    pub set: String,
    pub language: String,
    pub layer: i64,
    pub probe_kind: String,
    pub diagnostic_f1: f64,
    pub control_f1: f64,
    pub selectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub set: String,
    pub layer: i64,
    pub target: String,
    pub cells: Vec<TransferCell>,
}

/// One token of the predictions dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sentence_id: String,
    pub sentence: usize,
    pub token: usize,
    pub form: String,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn layer_dir(layer: LayerId) -> String {
    format!("L{:02}", layer.get())
}

pub struct Pipeline {
    pub exp: Experiment,
    pub root: PathBuf,
    opts: Options,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(exp: Experiment, opts: Options) -> Result<Self> {
        if let Some(filter) = &opts.layers {
            if let Some(l) = filter.iter().find(|l| !exp.layers.contains(l)) {
                return Err(Error::Config(format!("layer {} is not among the configured layers", l.get())));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Pipeline {
            root: exp.root(),
            exp,
            opts,
            pool,
        })
    }

    pub fn layers(&self) -> Vec<LayerId> {
        match &self.opts.layers {
            Some(f) => self.exp.layers.iter().copied().filter(|l| f.contains(l)).collect(),
            None => self.exp.layers.clone(),
        }
    }

    // paths

    pub fn corpus_path(&self, id: &str) -> PathBuf {
        self.root.join("ingest/corpora").join(format!("{id}.jsonl"))
    }
    pub fn labels_path(&self, set: &str) -> PathBuf {
        self.root.join("ingest/labels").join(format!("{set}.json"))
    }
    pub fn vocab_path(&self, set: &str) -> PathBuf {
        self.root.join("ingest/vocab").join(format!("{set}.json"))
    }
    pub fn ingest_summary_path(&self) -> PathBuf {
        self.root.join("ingest/summary.json")
    }
    pub fn cache_path(&self, id: &str, layer: LayerId) -> PathBuf {
        self.root.join("embeddings").join(format!("{id}.{}.mpec", layer_dir(layer)))
    }
    pub fn control_path(&self, set: &str) -> PathBuf {
        self.root.join("control").join(format!("{set}.mpct"))
    }
    fn cell_dir(&self, stage: &str, set: &str, layer: LayerId) -> PathBuf {
        self.root.join(stage).join(set).join(layer_dir(layer))
    }
    pub fn checkpoint_path(&self, set: &str, layer: LayerId, task: TaskKind) -> PathBuf {
        self.cell_dir("train", set, layer).join(format!("{}.mpck", task.as_str()))
    }
    pub fn record_path(&self, set: &str, layer: LayerId, task: TaskKind) -> PathBuf {
        self.cell_dir("train", set, layer).join(format!("{}.record.json", task.as_str()))
    }
    pub fn eval_report_path(&self, set: &str, layer: LayerId, task: TaskKind, lang: &str) -> PathBuf {
        self.cell_dir("eval", set, layer).join(format!("{}.{lang}.json", task.as_str()))
    }
    pub fn iv_oov_path(&self, set: &str, layer: LayerId, lang: &str) -> PathBuf {
        self.cell_dir("eval", set, layer).join(format!("iv_oov.{lang}.json"))
    }
    pub fn predictions_path(&self, set: &str, layer: LayerId, lang: &str) -> PathBuf {
        self.cell_dir("eval", set, layer).join(format!("predictions.{lang}.jsonl"))
    }
    pub fn filter_path(&self, set: &str, layer: LayerId, name: &str) -> PathBuf {
        self.cell_dir("eval", set, layer).join(format!("filter.{name}.json"))
    }
    /// Written last by `eval` for a cell.
    pub fn selectivity_path(&self, set: &str, layer: LayerId) -> PathBuf {
        self.cell_dir("eval", set, layer).join("selectivity.json")
    }
    pub fn transfer_path(&self, set: &str, layer: LayerId, target: &str) -> PathBuf {
        self.cell_dir("transfer", set, layer).join(format!("{target}.json"))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Corpus ids of a probe set's training and dev data.
    fn set_corpus(&self, set: &str, split: Split) -> String {
        format!("{set}.{split}")
    }

    fn skip(&self, done: &Path, what: &str) -> bool {
        let skip = !self.opts.force && done.exists();
        if skip {
            debug!("{what}: up to date");
        }
        skip
    }

    /// Runs `job` for every item on the worker pool; the first error in item
    /// order wins.
    fn run_cells<T: Sync>(&self, items: &[T], job: impl Fn(&T) -> Result<()> + Sync) -> Result<()> {
        let results: Vec<Result<()>> = self.pool.install(|| items.par_iter().map(&job).collect());
        results.into_iter().collect()
    }

    // ingest

    pub fn ingest(&self) -> Result<()> {
        if self.skip(&self.ingest_summary_path(), "ingest") {
            return Ok(());
        }
        let cfg = &self.exp.config;
        write_json(&self.root.join("config.json"), cfg)?;
        let mut corpora: Vec<(String, String, Corpus)> = Vec::new(); // (id, source path, corpus)
        for lang in &cfg.languages {
            let (train, dev, test, sources) = match &lang.files {
                CorpusFiles::Presplit { train, dev, test } => (
                    self.parse(train, &lang.code, Split::Train)?,
                    self.parse(dev, &lang.code, Split::Dev)?,
                    self.parse(test, &lang.code, Split::Test)?,
                    [train, dev, test].map(|p| p.display().to_string()),
                ),
                CorpusFiles::Single { corpus, split } => {
                    let whole = self.parse(corpus, &lang.code, Split::Train)?;
                    let (a, b, c) =
                        split_corpus(&whole, *split, cfg.seeds.split).map_err(|e| Error::data(&lang.code, e))?;
                    let src = corpus.display().to_string();
                    (a, b, c, [src.clone(), src.clone(), src])
                }
            };
            let train = match cfg.train_limit.and_then(NonZeroUsize::new) {
                Some(n) => truncate_train(&train, n),
                None => train,
            };
            for (corpus, src) in [train, dev, test].into_iter().zip(sources) {
                let id = format!("{}.{}", lang.code, corpus.split);
                corpora.push((id, src, corpus));
            }
        }
        for t in &cfg.transfer {
            let corpus = self.parse(&t.test, &t.code, Split::Test)?;
            corpora.push((format!("{}.test", t.code), t.test.display().to_string(), corpus));
        }
        for (id, _, corpus) in &corpora {
            if corpus.sentences.is_empty() {
                return Err(Error::data(id.as_str(), "corpus has no sentences"));
            }
        }

        let (caches, extractors) = self.ingest_embeddings(&corpora)?;
        let mut summary = IngestSummary {
            corpora: BTreeMap::new(),
            label_spaces: BTreeMap::new(),
        };
        let by_id: BTreeMap<&str, usize> = corpora.iter().enumerate().map(|(i, c)| (c.0.as_str(), i)).collect();
        for (((id, src, corpus), layer_caches), prov) in corpora.iter().zip(&caches).zip(&extractors) {
            self.persist_corpus(id, src, prov, corpus, layer_caches, &mut summary)?;
        }

        for lang in &cfg.languages {
            let train = &corpora[by_id[format!("{}.train", lang.code).as_str()]].2;
            self.persist_set(&lang.code, train, cfg.labels.whitelist.as_deref(), &mut summary)?;
        }
        if cfg.multilingual.enabled {
            let mut pooled = Vec::new();
            for split in [Split::Train, Split::Dev] {
                let parts: Vec<(&Corpus, Vec<&EmbeddingCache>)> = cfg
                    .pooled_languages()
                    .iter()
                    .map(|l| {
                        let i = by_id[format!("{l}.{split}").as_str()];
                        (&corpora[i].2, caches[i].iter().collect())
                    })
                    .collect();
                let refs: Vec<(&Corpus, &[&EmbeddingCache])> = parts.iter().map(|(c, v)| (*c, v.as_slice())).collect();
                let (corpus, pooled_caches) =
                    pool_corpora(MULTI, &refs, cfg.seeds.pool).map_err(|e| Error::data("multilingual pool", e))?;
                let id = self.set_corpus(MULTI, split);
                // sentence order is shuffled by pooling, so flags are not carried over
                let mut prov = Provenance::default();
                for l in cfg.pooled_languages() {
                    let source = &extractors[by_id[format!("{l}.{split}").as_str()]];
                    prov.absorb(Provenance {
                        extractor: source.extractor.clone(),
                        flags: Vec::new(),
                    });
                }
                self.persist_corpus(&id, "pooled", &prov, &corpus, &pooled_caches, &mut summary)?;
                pooled.push(corpus);
            }
            let whitelist = cfg.multilingual.whitelist.as_ref().or(cfg.labels.whitelist.as_ref());
            self.persist_set(MULTI, &pooled[0], whitelist.map(Vec::as_slice), &mut summary)?;
        }
        write_json(&self.ingest_summary_path(), &summary)?;
        info!("ingest: {} corpora, {} probe sets", summary.corpora.len(), summary.label_spaces.len());
        Ok(())
    }

    fn parse(&self, path: &Path, lang: &str, split: Split) -> Result<Corpus> {
        let full = self.exp.resolve(path);
        let text = std::fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
        parse_conllu(&text, lang, split).map_err(|e| Error::data(path.display().to_string(), e))
    }

    /// One cache per configured layer for every corpus, in corpus order,
    /// plus the extractor that produced each corpus's caches.
    fn ingest_embeddings(&self, corpora: &[(String, String, Corpus)]) -> Result<(Vec<Vec<EmbeddingCache>>, Vec<Provenance>)> {
        let cfg = &self.exp.config;
        let layers = &self.exp.layers;
        match &cfg.embeddings {
            EmbeddingSource::Synthetic { dim, noise } => {
                // one label space over all training data so every language
                // shares the same mixing matrices
                let train: Vec<&Corpus> = corpora.iter().map(|c| &c.2).filter(|c| c.split == Split::Train).collect();
                let global = build_label_space(&train, 1, None).map_err(|e| Error::data("synthetic label space", e))?;
                if *dim < global.len() {
                    return Err(Error::Config(format!(
                        "synthetic dim {dim} is smaller than the {} training labels",
                        global.len()
                    )));
                }
                let caches = self.pool.install(|| {
                    corpora
                        .par_iter()
                        .map(|(id, _, corpus)| {
                            synth_embeddings(corpus, &global, *dim, cfg.seeds.embeddings, *noise, layers)
                                .map_err(|e| Error::data(id.as_str(), e))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                let synthetic = Provenance {
                    extractor: SYNTHETIC_EXTRACTOR.to_string(),
                    flags: Vec::new(),
                };
                Ok((caches, vec![synthetic; corpora.len()]))
            }
            EmbeddingSource::Cache { dir } => {
                let dir = self.exp.resolve(dir);
                let mut caches = Vec::with_capacity(corpora.len());
                let mut extractors = Vec::with_capacity(corpora.len());
                for (id, _, corpus) in corpora {
                    let mut per_layer = Vec::with_capacity(layers.len());
                    let mut prov = Provenance::default();
                    for &layer in layers {
                        let (cache, source) = self.external_cache(&dir, id, corpus, layer)?;
                        per_layer.push(cache);
                        prov.absorb(source);
                    }
                    caches.push(per_layer);
                    extractors.push(prov);
                }
                Ok((caches, extractors))
            }
        }
    }

    /// Loads `{dir}/{id}.L{ll}.mpec`. A single-file language may instead
    /// provide `{dir}/{lang}.L{ll}.mpec` for the unsplit corpus; its
    /// sentences are then matched to the split (and truncated) corpus.
    fn external_cache(&self, dir: &Path, id: &str, corpus: &Corpus, layer: LayerId) -> Result<(EmbeddingCache, Provenance)> {
        let exact = dir.join(format!("{id}.{}.mpec", layer_dir(layer)));
        let lang = &corpus.language_code;
        let whole_path = dir.join(format!("{lang}.{}.mpec", layer_dir(layer)));
        let spec = self.exp.config.languages.iter().find(|l| &l.code == lang);
        let (cache, manifest, order) = match (spec.map(|l| &l.files), exact.exists()) {
            (Some(CorpusFiles::Single { corpus: file, .. }), false) => {
                let (cache, manifest) = read_cache_with_manifest(&whole_path, "the embedding extractor")?;
                let whole = self.parse(file, lang, Split::Train)?;
                cache.check_alignment(&whole).map_err(|e| Error::data(whole_path.display().to_string(), e))?;
                let order = subsequence_indices(&whole, corpus)
                    .ok_or_else(|| Error::data(id, "split corpus is not a subsequence of the source corpus"))?;
                (cache, manifest, Some(order))
            }
            _ => {
                let (cache, manifest) = read_cache_with_manifest(&exact, "the embedding extractor")?;
                // a truncated training split uses a prefix of its cache
                let order = (cache.n_sentences() > corpus.sentences.len()).then(|| (0..corpus.sentences.len()).collect());
                (cache, manifest, order)
            }
        };
        if &manifest.language_code != lang {
            return Err(Error::data(
                id,
                format!("cache manifest is for language {}", manifest.language_code),
            ));
        }
        let (cache, flags) = match order {
            Some(o) => {
                // flags follow their sentence; those outside the selection are dropped
                let flags = manifest
                    .flags
                    .into_iter()
                    .filter_map(|f| {
                        let sentence = o.iter().position(|&s| s == f.sentence)?;
                        Some(ManifestFlag { sentence, ..f })
                    })
                    .collect();
                (cache.reorder(&o), flags)
            }
            None => (cache, manifest.flags),
        };
        cache.check_alignment(corpus).map_err(|e| Error::data(id, e))?;
        let prov = Provenance {
            extractor: manifest.extractor,
            flags,
        };
        Ok((cache, prov))
    }

    fn persist_corpus(
        &self,
        id: &str,
        source: &str,
        prov: &Provenance,
        corpus: &Corpus,
        caches: &[EmbeddingCache],
        summary: &mut IngestSummary,
    ) -> Result<()> {
        write_corpus(&self.corpus_path(id), corpus)?;
        for cache in caches {
            let mut manifest = CacheManifest::describe(cache, source, &corpus.language_code, &prov.extractor);
            manifest.flags.clone_from(&prov.flags);
            write_cache(&self.cache_path(id, cache.layer()), cache, &manifest)?;
        }
        summary.corpora.insert(
            id.to_string(),
            CorpusStats {
                sentences: corpus.sentences.len(),
                tokens: corpus.token_count(),
            },
        );
        Ok(())
    }

    fn persist_set(
        &self,
        set: &str,
        train: &Corpus,
        whitelist: Option<&[String]>,
        summary: &mut IngestSummary,
    ) -> Result<()> {
        let min_count = self.exp.config.labels.min_count;
        let space = build_label_space(&[train], min_count, whitelist).map_err(|e| Error::data(set, e))?;
        let vocab = build_vocabulary(&[train]).map_err(|e| Error::data(set, e))?;
        write_json(&self.labels_path(set), &space)?;
        write_json(&self.vocab_path(set), &vocab)?;
        summary.label_spaces.insert(set.to_string(), space.len());
        Ok(())
    }

    fn require_ingest(&self) -> Result<IngestSummary> {
        read_json(&self.ingest_summary_path(), "ingest")
    }

    fn label_space(&self, set: &str) -> Result<LabelSpace> {
        read_json(&self.labels_path(set), "ingest")
    }

    fn corpus(&self, id: &str) -> Result<Corpus> {
        read_corpus(&self.corpus_path(id))
    }

    fn cache(&self, id: &str, layer: LayerId) -> Result<EmbeddingCache> {
        read_cache(&self.cache_path(id, layer), "ingest")
    }

    /// Test corpus ids a probe set is evaluated on (one per language).
    fn test_ids(&self, set: &str) -> Vec<(String, String)> {
        self.exp
            .config
            .set_languages(set)
            .into_iter()
            .map(|l| (format!("{l}.test"), l))
            .collect()
    }

    // control

    pub fn control(&self) -> Result<()> {
        self.require_ingest()?;
        let sets = self.exp.config.probe_sets();
        self.run_cells(&sets, |set| self.control_set(set))
    }

    fn control_set(&self, set: &str) -> Result<()> {
        let path = self.control_path(set);
        if self.skip(&path, &format!("control {set}")) {
            return Ok(());
        }
        let cfg = &self.exp.config;
        let space = self.label_space(set)?;
        let train = self.corpus(&self.set_corpus(set, Split::Train))?;
        let dev = self.corpus(&self.set_corpus(set, Split::Dev))?;
        let tests: Vec<Corpus> = self
            .test_ids(set)
            .iter()
            .map(|(id, _)| self.corpus(id))
            .collect::<Result<_>>()?;
        let marginals = compute_marginals(&train, &space, cfg.control.floor).map_err(|e| Error::data(set, e))?;
        let mut all: Vec<&Corpus> = vec![&train, &dev];
        all.extend(tests.iter());
        let vocab: Vocabulary = build_vocabulary(&all).map_err(|e| Error::data(set, e))?;
        let ctl = generate_control(&vocab, &marginals, cfg.seeds.control).map_err(|e| Error::data(set, e))?;
        let manifest = ControlManifest {
            seed: cfg.seeds.control,
            floor: cfg.control.floor,
            marginals,
            labels: space.labels().iter().map(FeatureLabel::render).collect(),
            types: ctl.vectors.len(),
        };
        write_control(&path, &ctl, &manifest)?;
        info!("control {set}: {} word types", ctl.vectors.len());
        Ok(())
    }

    fn targets(
        &self,
        task: TaskKind,
        space: &LabelSpace,
        ctl: Option<&ControlAssignment>,
        corpus: &Corpus,
        cell: &str,
    ) -> Result<Vec<TargetVector>> {
        match (task, ctl) {
            (TaskKind::Diagnostic, _) => Ok(space.encode_corpus(corpus)),
            (TaskKind::Control, Some(ctl)) => ctl.corpus_targets(corpus).map_err(|e| Error::data(cell, e)),
            (TaskKind::Control, None) => unreachable!("control targets requested without an assignment"),
        }
    }

    fn load_control(&self, set: &str, task: TaskKind) -> Result<Option<ControlAssignment>> {
        match task {
            TaskKind::Diagnostic => Ok(None),
            TaskKind::Control => read_control(&self.control_path(set)).map(Some),
        }
    }

    // train

    fn cells(&self) -> Vec<(String, LayerId)> {
        let layers = self.layers();
        self.exp
            .config
            .probe_sets()
            .into_iter()
            .flat_map(|s| layers.iter().map(move |&l| (s.clone(), l)))
            .collect()
    }

    pub fn train(&self) -> Result<()> {
        self.require_ingest()?;
        let cells: Vec<(String, LayerId, TaskKind)> = self
            .cells()
            .into_iter()
            .flat_map(|(s, l)| TASKS.map(|t| (s.clone(), l, t)))
            .collect();
        self.run_cells(&cells, |(set, layer, task)| self.train_cell(set, *layer, *task))
    }

    fn train_cell(&self, set: &str, layer: LayerId, task: TaskKind) -> Result<()> {
        let cell = format!("{set}/{}/{}", layer_dir(layer), task.as_str());
        let ckpt = self.checkpoint_path(set, layer, task);
        let record_path = self.record_path(set, layer, task);
        if !self.opts.force && ckpt.exists() && record_path.exists() {
            debug!("train {cell}: up to date");
            return Ok(());
        }
        let space = self.label_space(set)?;
        let ctl = self.load_control(set, task)?;
        let mut data = Vec::new();
        for split in [Split::Train, Split::Dev] {
            let id = self.set_corpus(set, split);
            let corpus = self.corpus(&id)?;
            let cache = self.cache(&id, layer)?;
            cache.check_alignment(&corpus).map_err(|e| Error::data(&cell, e))?;
            let targets = self.targets(task, &space, ctl.as_ref(), &corpus, &cell)?;
            data.push(Dataset::new(&cache, &targets, space.len()).map_err(|e| Error::data(&cell, e))?);
        }
        let started = Instant::now();
        let (model, mut record) = train(&data[0], &data[1], self.exp.config.probe, &self.exp.config.train_config())
            .map_err(|e| Error::probe(&cell, e))?;
        record.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        write_checkpoint(&ckpt, &model, &space)?;
        write_json(&record_path, &record)?;
        info!(
            "train {cell}: best epoch {} of {}, dev loss {:.5}",
            record.selected_epoch + 1,
            record.dev_loss.len(),
            record.best_dev_loss
        );
        Ok(())
    }

    // eval

    pub fn eval(&self) -> Result<()> {
        self.require_ingest()?;
        let cells = self.cells();
        self.run_cells(&cells, |(set, layer)| self.eval_cell(set, *layer))
    }

    fn meta(&self, set: &str, layer: LayerId, corpus: &str, task: TaskKind) -> EvalMeta {
        EvalMeta {
            probe: set.to_string(),
            probe_kind: self.exp.config.probe.tag(),
            layer: i64::from(layer.get()),
            corpus: corpus.to_string(),
            task,
        }
    }

    fn eval_cell(&self, set: &str, layer: LayerId) -> Result<()> {
        let done = self.selectivity_path(set, layer);
        let cell = format!("{set}/{}", layer_dir(layer));
        if self.skip(&done, &format!("eval {cell}")) {
            return Ok(());
        }
        let cfg = &self.exp.config;
        let space = self.label_space(set)?;
        let vocab: Vocabulary = read_json(&self.vocab_path(set), "ingest")?;
        let ctl = self.load_control(set, TaskKind::Control)?;
        let models = TASKS
            .iter()
            .map(|&t| read_checkpoint(&self.checkpoint_path(set, layer, t), &space))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (id, lang) in self.test_ids(set) {
            let corpus = self.corpus(&id)?;
            let cache = self.cache(&id, layer)?;
            let corpus_name = format!("{lang}/test");
            let mut reports = Vec::new();
            let mut diagnostic: Option<(Predictions, Vec<TargetVector>)> = None;
            for (&task, model) in TASKS.iter().zip(&models) {
                let preds = predict(model, &cache, &space, cfg.threshold).map_err(|e| Error::probe(&cell, e))?;
                let targets = self.targets(task, &space, ctl.as_ref(), &corpus, &cell)?;
                let meta = self.meta(set, layer, &corpus_name, task);
                let report = EvalReport::evaluate(meta, &preds.predicted, &targets, &space)
                    .map_err(|e| Error::data(&cell, e))?;
                write_json(&self.eval_report_path(set, layer, task, &lang), &report)?;
                reports.push(report);
                if task == TaskKind::Diagnostic {
                    diagnostic = Some((preds, targets));
                }
            }
            let (preds, gold) = diagnostic.expect("diagnostic task evaluated");
            let meta = self.meta(set, layer, &corpus_name, TaskKind::Diagnostic);
            let iv_oov: IvOovReports = iv_oov_reports(&preds.predicted, &gold, &corpus, &vocab, &space, meta)
                .map_err(|e| Error::data(&cell, e))?;
            write_json(&self.iv_oov_path(set, layer, &lang), &iv_oov)?;
            write_atomic(
                &self.predictions_path(set, layer, &lang),
                &predictions_jsonl(&corpus, &space, &preds, &gold),
            )?;
            for f in cfg.filters.iter().filter(|f| f.set == set && f.language() == lang) {
                let label = FeatureLabel::parse(&f.label).map_err(|e| Error::Config(e.to_string()))?;
                let result: FilteredResult =
                    filtered_eval(&preds.predicted, &gold, &corpus, |t| f.predicate.matches(t), &label, &space)
                        .map_err(|e| Error::data(format!("filter {}", f.name), e))?;
                write_json(&self.filter_path(set, layer, &f.name), &result)?;
            }
            let sel = selectivity(&reports[0], &reports[1]).map_err(|e| Error::data(&cell, e))?;
            rows.push(SelectivityRow {
                set: set.to_string(),
                language: lang.clone(),
                layer: i64::from(layer.get()),
                probe_kind: cfg.probe.tag(),
                diagnostic_f1: reports[0].micro.f1,
                control_f1: reports[1].micro.f1,
                selectivity: sel,
            });
        }
        write_atomic(&done.with_extension("csv"), &report::csv_bytes(&rows)?)?;
        write_json(&done, &rows)?;
        info!(
            "eval {cell}: {}",
            rows.iter()
                .map(|r| format!("{} F1 {:.3} selectivity {:.3}", r.language, r.diagnostic_f1, r.selectivity))
                .collect::<Vec<_>>()
                .join("; ")
        );
        Ok(())
    }

    // transfer

    pub fn transfer(&self) -> Result<()> {
        self.require_ingest()?;
        let cells: Vec<(String, LayerId, String)> = self
            .cells()
            .into_iter()
            .flat_map(|(s, l)| {
                self.exp
                    .config
                    .transfer
                    .iter()
                    .map(move |t| (s.clone(), l, t.code.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        self.run_cells(&cells, |(set, layer, target)| self.transfer_cell(set, *layer, target))
    }

    fn transfer_cell(&self, set: &str, layer: LayerId, target: &str) -> Result<()> {
        let path = self.transfer_path(set, layer, target);
        let cell = format!("{set}/{} -> {target}", layer_dir(layer));
        if self.skip(&path, &format!("transfer {cell}")) {
            return Ok(());
        }
        let space = self.label_space(set)?;
        let model = read_checkpoint(&self.checkpoint_path(set, layer, TaskKind::Diagnostic), &space)?;
        let id = format!("{target}.test");
        let corpus = self.corpus(&id)?;
        let cache = self.cache(&id, layer)?;
        let cells = transfer_eval(set, &model, &cache, &corpus, &space, self.exp.config.threshold)
            .map_err(|e| Error::data(&cell, e))?;
        let result = TransferResult {
            set: set.to_string(),
            layer: i64::from(layer.get()),
            target: target.to_string(),
            cells,
        };
        write_json(&path, &result)?;
        let micro = result.cells.last().and_then(|c| c.f1);
        info!("transfer {cell}: micro F1 {}", micro.map_or("n/a".into(), |f| format!("{f:.3}")));
        Ok(())
    }

    // report

    pub fn report(&self) -> Result<()> {
        self.require_ingest()?;
        let dir = self.report_dir();
        let files = report::build(self)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (rel, bytes) in &files {
            write_atomic(&dir.join(rel), bytes)?;
        }
        info!("report: {} files in {}", files.len(), dir.display());
        Ok(())
    }

    pub fn run(&self) -> Result<()> {
        self.ingest()?;
        self.control()?;
        self.train()?;
        self.eval()?;
        self.transfer()?;
        self.report()
    }

    pub(crate) fn read_record(&self, set: &str, layer: LayerId, task: TaskKind) -> Result<TrainRecord> {
        read_json(&self.record_path(set, layer, task), "train")
    }
}

/// Indices into `whole` of the sentences of `part`, matched greedily in
/// order.
/// Where a corpus's caches came from.
#[derive(Debug, Clone, Default)]
struct Provenance {
    /// Distinct extractor names joined with `+`.
    extractor: String,
    flags: Vec<ManifestFlag>,
}

impl Provenance {
    fn absorb(&mut self, other: Provenance) {
        if self.extractor.is_empty() {
            self.extractor = other.extractor;
        } else if !self.extractor.split('+').any(|e| e == other.extractor) {
            self.extractor = format!("{}+{}", self.extractor, other.extractor);
        }
        for f in other.flags {
            if !self.flags.contains(&f) {
                self.flags.push(f);
            }
        }
    }
}

fn subsequence_indices(whole: &Corpus, part: &Corpus) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(part.sentences.len());
    let mut it = whole.sentences.iter().enumerate();
    for s in &part.sentences {
        let (i, _) = it.by_ref().find(|(_, w)| *w == s)?;
        out.push(i);
    }
    Some(out)
}

pub fn predictions_jsonl(corpus: &Corpus, space: &LabelSpace, preds: &Predictions, gold: &[TargetVector]) -> Vec<u8> {
    let render = |t: &TargetVector| space.decode_bits(t).iter().map(FeatureLabel::render).collect::<Vec<_>>();
    let mut out = Vec::new();
    let mut flat = 0;
    for (si, sentence) in corpus.sentences.iter().enumerate() {
        for (ti, token) in sentence.tokens.iter().enumerate() {
            let row = PredictionRow {
                sentence_id: sentence.source_id.clone(),
                sentence: si,
                token: ti,
                form: token.surface_form.clone(),
                gold: render(&gold[flat]),
                predicted: render(&preds.predicted[flat]),
                scores: preds.token_scores(flat).to_vec(),
            };
            serde_json::to_writer(&mut out, &row).expect("row serializes");
            out.push(b'\n');
            flat += 1;
        }
    }
    out
}
