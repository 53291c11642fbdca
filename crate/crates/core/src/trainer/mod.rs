//! Seeded training and evaluation.
//!
//! By default each task gets its own model; `shared_trunk` trains one set
//! of attention flows with a head per task instead. Target and intensity
//! only ever see dark records.

mod gradcheck;
mod rundir;
mod synthetic;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use rundir::RunDir;
pub use synthetic::{synthetic_corpus, SyntheticSpec};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{embedding_path, read_embedding_file, DataError, EmbeddingTriple, MemeRecord};
use crate::evalstats::{classification_metrics, pearson_ordinal, MetricsReport, StatsError};
use crate::optim::{AdamW, AdamWConfig};
use crate::tcrnet::{
    forward, init_params, loss_and_grads, Example, Labels, Mode, ModelConfig, ModelError, StreamSet, Task,
    TcrNetParams,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no embedding file for meme `{0}`")]
    MissingEmbedding(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NaNGuard { epoch: usize, step: usize },
    #[error("no records are eligible for task {0}")]
    EmptyEligibleSet(Task),
    #[error("checkpoint has heads for {available:?}, not {requested}")]
    TaskMismatch { requested: Task, available: Vec<Task> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub heads: usize,
    pub seed: u64,
    pub task: Task,
    pub streams: StreamSet,
    /// One trunk with a head per task instead of one model per task.
    pub shared_trunk: bool,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 2e-5,
            dropout: 0.3,
            heads: 8,
            seed: 0,
            task: Task::DarkHumor,
            streams: StreamSet::ALL,
            shared_trunk: false,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be nonnegative", self.weight_decay));
        }
        if self.streams.len() < 2 {
            return Err(ModelError::TooFewStreams(self.streams).into());
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        if self.shared_trunk {
            Task::ALL.to_vec()
        } else {
            vec![self.task]
        }
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            heads: self.heads,
            dropout: self.dropout,
            streams: self.streams,
            tasks: self.tasks(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn labels(&self, record: &MemeRecord) -> Labels {
        let mut labels = Labels::default();
        for task in self.tasks() {
            labels.set(task, task.label(record));
        }
        labels
    }

    fn eligible(&self, record: &MemeRecord) -> bool {
        self.tasks().iter().any(|t| t.label(record).is_some())
    }
}

/// Where embedding triples come from: a directory of `{id}.dhem` files read
/// on demand, or preloaded triples.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    Dir(PathBuf),
    Memory(HashMap<String, Arc<EmbeddingTriple>>),
}

impl EmbeddingSource {
    pub fn dir(path: impl Into<PathBuf>) -> Self {
        EmbeddingSource::Dir(path.into())
    }

    pub fn in_memory(items: impl IntoIterator<Item = (String, EmbeddingTriple)>) -> Self {
        EmbeddingSource::Memory(items.into_iter().map(|(id, t)| (id, Arc::new(t))).collect())
    }

    pub fn contains(&self, id: &str) -> bool {
        match self {
            EmbeddingSource::Dir(dir) => embedding_path(dir, id).is_file(),
            EmbeddingSource::Memory(map) => map.contains_key(id),
        }
    }

    pub fn load(&self, id: &str) -> Result<Arc<EmbeddingTriple>, TrainError> {
        match self {
            EmbeddingSource::Dir(dir) => {
                let path = embedding_path(dir, id);
                if !path.is_file() {
                    return Err(TrainError::MissingEmbedding(id.to_string()));
                }
                let (stored, triple) = read_embedding_file(&path)?;
                if stored != id {
                    return Err(DataError::Corrupt(format!("{} holds id `{stored}`", path.display())).into());
                }
                Ok(Arc::new(triple))
            }
            EmbeddingSource::Memory(map) => {
                map.get(id).cloned().ok_or_else(|| TrainError::MissingEmbedding(id.to_string()))
            }
        }
    }

    /// First missing id among `records`, as an error.
    pub fn check(&self, records: &[&MemeRecord]) -> Result<(), TrainError> {
        match records.iter().find(|r| !self.contains(&r.id)) {
            Some(r) => Err(TrainError::MissingEmbedding(r.id.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Percent, eval-mode forward over the training set after the epoch.
    pub train_accuracy: f64,
    /// Kept out of the history file so reruns produce identical bytes.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: TcrNetParams,
    pub best_params: TcrNetParams,
    /// 1-based epoch of the lowest mean training loss.
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// splitmix64 over a running state; keeps epoch and step streams apart.
fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn all_finite(params: &TcrNetParams) -> bool {
    let mut ok = true;
    params.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
    ok
}

fn load_all(source: &EmbeddingSource, records: &[&MemeRecord]) -> Result<Vec<Arc<EmbeddingTriple>>, TrainError> {
    records.par_iter().map(|r| source.load(&r.id)).collect()
}

fn predictions(
    params: &TcrNetParams,
    triples: &[Arc<EmbeddingTriple>],
    task: Task,
) -> Result<Vec<usize>, TrainError> {
    triples
        .par_iter()
        .map(|t| Ok(forward(t, params, Mode::Eval)?.predict(task)?))
        .collect()
}

/// Trains on every eligible record in `records` (the caller picks the
/// split). `on_epoch` sees each epoch's stats as soon as they exist.
pub fn train(
    records: &[MemeRecord],
    source: &EmbeddingSource,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let eligible: Vec<&MemeRecord> = records.iter().filter(|r| config.eligible(r)).collect();
    if eligible.is_empty() {
        return Err(TrainError::EmptyEligibleSet(config.task));
    }
    source.check(&eligible)?;
    let first = source.load(&eligible[0].id)?;
    let mut params = init_params(&config.model_config(first.dim()), config.seed)?;
    drop(first);

    let labels: Vec<Labels> = eligible.iter().map(|r| config.labels(r)).collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, TcrNetParams)> = None;
    let mut order: Vec<usize> = (0..eligible.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch_records: Vec<&MemeRecord> = idx.iter().map(|&i| eligible[i]).collect();
            let triples = load_all(source, &batch_records)?;
            let batch: Vec<Example<'_>> = idx
                .iter()
                .zip(&triples)
                .map(|(&i, t)| Example { triple: t, labels: labels[i] })
                .collect();
            let mode = Mode::Train { seed: mix(config.seed, &[epoch as u64, step as u64]) };
            let (loss, grads) = loss_and_grads(&batch, &params, mode)?;
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(TrainError::NaNGuard { epoch: epoch + 1, step });
            }
            opt.step(&mut params, &grads);
            loss_sum += loss * idx.len() as f64;
        }
        let mean_loss = loss_sum / eligible.len() as f64;

        let task = config.task;
        let scored: Vec<(&MemeRecord, usize)> = eligible
            .iter()
            .filter_map(|r| task.label(r).map(|l| (*r, l)))
            .collect();
        let triples = load_all(source, &scored.iter().map(|(r, _)| *r).collect::<Vec<_>>())?;
        let preds = predictions(&params, &triples, task)?;
        let correct = preds.iter().zip(&scored).filter(|(p, (_, g))| *p == g).count();
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss,
            train_accuracy: 100.0 * correct as f64 / scored.len().max(1) as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.epochs.push(stats);
        if best.as_ref().is_none_or(|(l, _, _)| mean_loss < *l) {
            best = Some((mean_loss, epoch + 1, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history,
    })
}

/// Eval-mode metrics for `task` over the eligible records. Intensity also
/// gets Pearson on the 1..=3 levels; it is left empty when either side is
/// constant.
pub fn evaluate(
    params: &TcrNetParams,
    records: &[MemeRecord],
    source: &EmbeddingSource,
    task: Task,
) -> Result<MetricsReport, TrainError> {
    if params.head(task).is_err() {
        return Err(TrainError::TaskMismatch {
            requested: task,
            available: params.tasks(),
        });
    }
    let scored: Vec<(&MemeRecord, usize)> = records.iter().filter_map(|r| task.label(r).map(|l| (r, l))).collect();
    if scored.is_empty() {
        return Err(TrainError::EmptyEligibleSet(task));
    }
    let eligible: Vec<&MemeRecord> = scored.iter().map(|(r, _)| *r).collect();
    source.check(&eligible)?;
    let triples = load_all(source, &eligible)?;
    let pred = predictions(params, &triples, task)?;
    let gold: Vec<usize> = scored.iter().map(|(_, l)| *l).collect();
    let mut report = classification_metrics(&gold, &pred, task.num_classes())?;
    report.task = Some(task);
    if task == Task::Intensity {
        let level = |v: &[usize]| v.iter().map(|&c| c as u8 + 1).collect::<Vec<u8>>();
        report.pearson = match pearson_ordinal(&level(&gold), &level(&pred)) {
            Ok(p) => Some(p),
            Err(StatsError::DegenerateVariance | StatsError::TooFew(_)) => None,
            Err(e) => return Err(e.into()),
        };
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntensityLevel, Split, TargetCategory};
    use ndarray::Array1;
    use proptest::prelude::*;

    fn small(task: Task, seed: u64) -> (Vec<MemeRecord>, EmbeddingSource) {
        let corpus = synthetic_corpus(&SyntheticSpec {
            samples: 12,
            tokens: 4,
            dim: 8,
            task,
            seed,
            ..SyntheticSpec::default()
        });
        let records = corpus.iter().map(|(r, _)| r.clone()).collect();
        (records, EmbeddingSource::in_memory(corpus.into_iter().map(|(r, t)| (r.id, t))))
    }

    fn small_config(task: Task) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            heads: 2,
            task,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.heads), (5, 16, 8));
        assert_eq!((c.learning_rate, c.dropout), (2e-5, 0.3));
        assert_eq!(c.streams, StreamSet::ALL);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig {
            task: Task::Intensity,
            streams: "ti".parse().unwrap(),
            seed: 42,
            ..TrainConfig::default()
        };
        let text = c.to_toml();
        assert!(text.contains("task = \"intensity\""), "{text}");
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("streams = \"t\"").is_err());
    }

    #[test]
    fn history_has_one_entry_per_epoch_and_runs_are_bitwise_equal() {
        let (records, source) = small(Task::DarkHumor, 1);
        let cfg = small_config(Task::DarkHumor);
        let mut seen = 0;
        let a = train(&records, &source, &cfg, |_| seen += 1).unwrap();
        let b = train(&records, &source, &cfg, |_| {}).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(a.history.epochs.len(), 2);
        assert_eq!(a.final_params, b.final_params);
        assert!((1..=2).contains(&a.best_epoch));
        let c = train(&records, &source, &TrainConfig { seed: 4, ..cfg }, |_| {}).unwrap();
        assert_ne!(a.final_params, c.final_params);
    }

    #[test]
    fn target_without_dark_records_is_rejected() {
        let records: Vec<MemeRecord> = (0..4).map(|i| MemeRecord::non_dark(format!("m{i}"), Split::Train)).collect();
        let source = EmbeddingSource::in_memory(
            records.iter().map(|r| (r.id.clone(), EmbeddingTriple::zeros(2, 8))),
        );
        let err = train(&records, &source, &small_config(Task::Target), |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::EmptyEligibleSet(Task::Target)));
    }

    #[test]
    fn missing_embedding_is_reported_by_id() {
        let (mut records, source) = small(Task::DarkHumor, 2);
        records.push(MemeRecord::non_dark("ghost", Split::Train));
        let err = train(&records, &source, &small_config(Task::DarkHumor), |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::MissingEmbedding(id) if id == "ghost"));
        let dir = tempfile::tempdir().unwrap();
        let err = EmbeddingSource::dir(dir.path()).load("x").unwrap_err();
        assert!(matches!(err, TrainError::MissingEmbedding(_)));
    }

    #[test]
    fn nan_guard_trips_on_non_finite_loss() {
        let (records, source) = small(Task::DarkHumor, 3);
        let cfg = TrainConfig { learning_rate: f64::MAX, ..small_config(Task::DarkHumor) };
        let err = train(&records, &source, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NaNGuard { epoch: 1, .. }), "{err:?}");
    }

    /// A checkpoint whose classifier reads a gold-label direction planted in
    /// the embeddings.
    fn oracle_stub(records: &[MemeRecord], constant: Option<usize>) -> (TcrNetParams, EmbeddingSource) {
        let cfg = ModelConfig {
            dim: 4,
            heads: 1,
            dropout: 0.0,
            streams: StreamSet::ALL,
            tasks: vec![Task::DarkHumor],
        };
        let mut params = init_params(&cfg, 0).unwrap();
        for fp in &mut params.flows {
            fp.attn.w_q.fill(0.0);
            fp.attn.w_k.fill(0.0);
            fp.attn.w_v = ndarray::Array2::eye(4);
            fp.attn.w_o = ndarray::Array2::eye(4);
        }
        let head = &mut params.classifiers[0];
        head.weight.fill(0.0);
        match constant {
            Some(c) => head.bias = Array1::from_shape_fn(2, |i| if i == c { 1.0 } else { 0.0 }),
            None => {
                head.weight[[0, 0]] = -1.0;
                head.weight[[0, 1]] = 1.0;
            }
        }
        let source = EmbeddingSource::in_memory(records.iter().map(|r| {
            let mut t = EmbeddingTriple::zeros(3, 4);
            t.image.fill(if r.dark_humor { 1.0 } else { -1.0 });
            (r.id.clone(), t)
        }));
        (params, source)
    }

    fn balanced_dh() -> Vec<MemeRecord> {
        (0..6)
            .map(|i| match i % 2 {
                0 => MemeRecord::non_dark(format!("m{i}"), Split::Test),
                _ => MemeRecord::dark(format!("m{i}"), Split::Test, TargetCategory::Other, IntensityLevel::MILD),
            })
            .collect()
    }

    #[test]
    fn oracle_checkpoint_scores_perfectly() {
        let records = balanced_dh();
        let (params, source) = oracle_stub(&records, None);
        let m = evaluate(&params, &records, &source, Task::DarkHumor).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (100.0, 100.0));
        assert_eq!(m.task, Some(Task::DarkHumor));
        assert_eq!(m.confusion, vec![vec![3, 0], vec![0, 3]]);
    }

    #[test]
    fn constant_checkpoint_on_balanced_set() {
        let records = balanced_dh();
        let (params, source) = oracle_stub(&records, Some(1));
        let m = evaluate(&params, &records, &source, Task::DarkHumor).unwrap();
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(format!("{:.2}", m.macro_f1), "33.33");
        assert_eq!(format!("{:.2}", m.per_class_f1[1]), "66.67");
        assert_eq!(m.per_class_f1[0], 0.0);
    }

    #[test]
    fn evaluating_an_absent_head_is_a_task_mismatch() {
        let records = balanced_dh();
        let (params, source) = oracle_stub(&records, None);
        let err = evaluate(&params, &records, &source, Task::Target).unwrap_err();
        assert!(matches!(err, TrainError::TaskMismatch { requested: Task::Target, .. }));
    }

    #[test]
    fn intensity_reports_pearson() {
        let (records, source) = small(Task::Intensity, 5);
        let out = train(&records, &source, &small_config(Task::Intensity), |_| {}).unwrap();
        let m = evaluate(&out.final_params, &records, &source, Task::Intensity).unwrap();
        assert_eq!(m.confusion.len(), 3);
        // Pearson is present unless one side collapsed to a single level.
        let distinct = m.confusion.iter().map(|row| row.iter().sum::<u64>()).filter(|&s| s > 0).count();
        assert!(distinct > 1);
        let pred_levels = (0..3).filter(|&c| m.confusion.iter().any(|row| row[c] > 0)).count();
        assert_eq!(m.pearson.is_some(), pred_levels > 1);
    }

    #[test]
    fn shared_trunk_trains_all_heads() {
        let (records, source) = small(Task::DarkHumor, 6);
        let cfg = TrainConfig { shared_trunk: true, ..small_config(Task::DarkHumor) };
        let out = train(&records, &source, &cfg, |_| {}).unwrap();
        assert_eq!(out.final_params.tasks(), Task::ALL.to_vec());
        for task in Task::ALL {
            evaluate(&out.final_params, &records, &source, task).unwrap();
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn initial_loss_is_near_ln_c(seed in 0u64..1000, task_idx in 0usize..3) {
            let task = Task::ALL[task_idx];
            let (records, source) = small(task, seed);
            let cfg = TrainConfig { seed, ..small_config(task) }.model_config(8);
            let params = init_params(&cfg, seed).unwrap();
            let triples: Vec<_> = records.iter().map(|r| source.load(&r.id).unwrap()).collect();
            let batch: Vec<Example<'_>> = records
                .iter()
                .zip(&triples)
                .map(|(r, t)| Example { triple: t, labels: Labels::single(task, task.label(r).unwrap()) })
                .collect();
            let (loss, _) = loss_and_grads(&batch, &params, Mode::Eval).unwrap();
            let ln_c = (task.num_classes() as f64).ln();
            prop_assert!((loss - ln_c).abs() < 0.2, "loss {} vs ln C {}", loss, ln_c);
        }
    }
}
