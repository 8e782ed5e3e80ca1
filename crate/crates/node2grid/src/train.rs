//! Mini-batch training for transductive and inductive node classification,
//! plus evaluation, ablation, and hyperparameter sweeps.
//!
//! A run maps the needed splits to grids once up front, then iterates
//! shuffled mini-batches: forward, loss, backward, optimizer step. The
//! validation metric is computed every epoch; the parameters from the best
//! validation epoch are kept and early stopping fires after `patience`
//! non-improving epochs. Everything is seeded, so dataset + config + seed
//! fully determine the report (wall-clock fields aside).
//!
//! Transductive tasks map every split against the full graph. Inductive
//! tasks give the training loop only the training graph; validation and
//! test nodes are mapped from their own graphs' adjacency.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

use crate::data::{DatasetBundle, EpochRecord, MetricsReport, SplitRole};
use crate::graph::Label;
use crate::mapper::{self, GridSample, MapError, MapperConfig};
use crate::nn::{
    self, backward, forward, init_params, ModelParams, NetConfig, NetError, Real, TaskHead,
};
use crate::optim::{
    add_regularizer_grads, total_loss, LossConfig, LossTask, OptimError, OptimKind,
    OptimizerState, Targets,
};
use crate::stream::stream_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty sample set for {0}")]
    EmptySamples(&'static str),
}

/// Strategy on/off switches for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_second_order: bool,
    pub use_central_fusion: bool,
    pub use_attention: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_second_order: true, use_central_fusion: true, use_attention: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub optimizer: OptimKind,
    pub lr: f64,
    /// Decoupled weight decay inside the optimizer (network weights only).
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub mapper: MapperConfig,
    pub net: NetConfig,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 15,
            max_epochs: 400,
            patience: 30,
            optimizer: OptimKind::Rmsprop,
            lr: 0.008,
            weight_decay: 0.0005,
            loss: LossConfig::new(0.0, 0.0008, LossTask::CrossEntropy),
            mapper: MapperConfig::new(16, 0.4),
            net: NetConfig::default(),
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Reference hyperparameters per benchmark dataset.
    pub fn for_dataset(name: &str) -> Option<TrainConfig> {
        let base = TrainConfig::default();
        match name.to_ascii_lowercase().as_str() {
            "cora" => Some(base),
            "citeseer" => Some(TrainConfig {
                batch_size: 30,
                mapper: MapperConfig::new(12, 0.4),
                loss: LossConfig::new(0.0, 0.025, LossTask::CrossEntropy),
                ..base
            }),
            "pubmed" => Some(TrainConfig {
                batch_size: 8,
                mapper: MapperConfig::new(12, 0.4),
                loss: LossConfig::new(0.0, 0.07, LossTask::CrossEntropy),
                ..base
            }),
            "ppi" => Some(TrainConfig {
                batch_size: 2000,
                optimizer: OptimKind::Nadam,
                lr: 0.001,
                weight_decay: 0.0,
                mapper: MapperConfig::new(16, 0.55),
                loss: LossConfig::new(5e-7, 1e-6, LossTask::BinaryCrossEntropy),
                net: NetConfig {
                    d_hidden: 256,
                    dropout_sites: nn::DropoutSites::ConvAndFc1,
                    task_head: TaskHead::SigmoidMultiLabel,
                    ..NetConfig::default()
                },
                ..base
            }),
            _ => None,
        }
    }

    /// Mapper settings with the ablation flags applied: no second order
    /// restricts slots to one-hop neighbors, no central fusion zeroes the
    /// bias coefficient.
    pub fn effective_mapper(&self) -> MapperConfig {
        let mut m = self.mapper;
        m.include_second_order = self.flags.use_second_order;
        if !self.flags.use_central_fusion {
            m.theta_bias = 0.0;
        }
        m
    }

    /// Net settings with the ablation flags applied: no attention drops the
    /// filter bank entirely (h = 0).
    pub fn effective_net(&self) -> NetConfig {
        let mut n = self.net;
        if !self.flags.use_attention {
            n.heads = 0;
        }
        n
    }

    fn validate(&self, bundle: &DatasetBundle) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience > self.max_epochs && self.max_epochs > 0 {
            return Err(TrainError::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        let multi = bundle.is_multilabel();
        let head_multi = self.net.task_head == TaskHead::SigmoidMultiLabel;
        let loss_multi = self.loss.task == LossTask::BinaryCrossEntropy;
        if multi != head_multi || multi != loss_multi {
            return Err(TrainError::InvalidConfig(format!(
                "dataset labels ({}) do not match task head / loss",
                if multi { "multi" } else { "single" }
            )));
        }
        Ok(())
    }
}

/// Mapped samples packed for batched passes: one grid tensor plus targets.
#[derive(Debug, Clone)]
pub struct SampleSet<F> {
    pub grids: Array3<F>,
    pub class_ids: Vec<u32>,
    pub multi_hot: Option<Array2<u8>>,
}

impl<F: Real> SampleSet<F> {
    pub fn from_samples(samples: &[GridSample], num_classes: u32) -> Self {
        let (k, f) = samples.first().map(|s| s.grid.dim()).unwrap_or((0, 0));
        let mut grids = Array3::zeros((samples.len(), k, f));
        let mut class_ids = Vec::new();
        let mut multi = None;
        for (i, s) in samples.iter().enumerate() {
            grids.slice_mut(s![i, .., ..]).assign(&s.grid.mapv(|x| nn::r::<F>(x as f64)));
            match &s.label {
                Label::Single(c) => class_ids.push(*c),
                Label::Multi(flags) => {
                    let m = multi.get_or_insert_with(|| {
                        Array2::zeros((samples.len(), num_classes as usize))
                    });
                    for (c, &flag) in flags.iter().enumerate() {
                        m[[i, c]] = flag;
                    }
                }
            }
        }
        SampleSet { grids, class_ids, multi_hot: multi }
    }

    pub fn len(&self) -> usize {
        self.grids.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn targets_for(&self, idx: &[usize]) -> (Vec<u32>, Option<Array2<u8>>) {
        match &self.multi_hot {
            Some(m) => {
                let mut rows = Array2::zeros((idx.len(), m.ncols()));
                for (row, &i) in idx.iter().enumerate() {
                    rows.row_mut(row).assign(&m.row(i));
                }
                (Vec::new(), Some(rows))
            }
            None => (idx.iter().map(|&i| self.class_ids[i]).collect(), None),
        }
    }

    fn gather(&self, idx: &[usize]) -> Array3<F> {
        let (_, k, f) = self.grids.dim();
        let mut out = Array3::zeros((idx.len(), k, f));
        for (row, &i) in idx.iter().enumerate() {
            out.slice_mut(s![row, .., ..]).assign(&self.grids.slice(s![i, .., ..]));
        }
        out
    }
}

/// Argmax with ties broken toward the lowest class index.
fn argmax_row<F: Real>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Metric over a sample set: accuracy for the softmax head, micro-F1 at
/// threshold 0.5 for the sigmoid head. Chunked, parallel, and exact.
pub fn evaluate<F: Real>(params: &ModelParams<F>, set: &SampleSet<F>) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySamples("evaluation"));
    }
    let n = set.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    match params.net.task_head {
        TaskHead::SoftmaxSingleLabel => {
            let correct: Result<Vec<usize>, TrainError> = starts
                .par_iter()
                .map(|&start| {
                    let end = (start + EVAL_CHUNK).min(n);
                    let (logits, _) =
                        forward(params, set.grids.slice(s![start..end, .., ..]), None)?;
                    let mut hits = 0;
                    for (row, &truth) in logits.rows().into_iter().zip(&set.class_ids[start..end])
                    {
                        if argmax_row(row) == truth as usize {
                            hits += 1;
                        }
                    }
                    Ok(hits)
                })
                .collect();
            Ok(correct?.into_iter().sum::<usize>() as f64 / n as f64)
        }
        TaskHead::SigmoidMultiLabel => {
            let flags = set
                .multi_hot
                .as_ref()
                .ok_or(TrainError::InvalidConfig("sigmoid head needs multi-hot targets".into()))?;
            let counts: Result<Vec<(u64, u64, u64)>, TrainError> = starts
                .par_iter()
                .map(|&start| {
                    let end = (start + EVAL_CHUNK).min(n);
                    let (logits, _) =
                        forward(params, set.grids.slice(s![start..end, .., ..]), None)?;
                    Ok(micro_counts(&logits, &flags.slice(s![start..end, ..])))
                })
                .collect();
            let (tp, fp, fne) = counts?
                .into_iter()
                .fold((0u64, 0u64, 0u64), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
            Ok(micro_f1(tp, fp, fne))
        }
    }
}

/// Pooled true/false positive and false negative counts; prediction is
/// sigmoid(z) >= 0.5, i.e. z >= 0.
pub fn micro_counts<F: Real>(
    logits: &Array2<F>,
    truth: &ndarray::ArrayView2<'_, u8>,
) -> (u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fne = 0;
    for (&z, &y) in logits.iter().zip(truth.iter()) {
        let pred = z >= F::zero();
        match (pred, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fne)
}

/// Micro-averaged F1 from pooled counts; 0 when no positives exist anywhere.
pub fn micro_f1(tp: u64, fp: u64, fne: u64) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

struct MappedSplits {
    train: SampleSet<f32>,
    val: SampleSet<f32>,
    test: SampleSet<f32>,
}

fn map_splits(
    bundle: &DatasetBundle,
    mapper_cfg: &MapperConfig,
) -> Result<MappedSplits, TrainError> {
    let mut sets = Vec::new();
    for role in [SplitRole::Train, SplitRole::Val, SplitRole::Test] {
        let (graph, ids) = bundle.samples_for(role);
        let samples = mapper::map_all(graph, ids, mapper_cfg)?;
        sets.push(SampleSet::from_samples(&samples, bundle.num_classes));
    }
    let test = sets.pop().expect("three sets");
    let val = sets.pop().expect("three sets");
    let train = sets.pop().expect("three sets");
    Ok(MappedSplits { train, val, test })
}

/// Train on a bundle. Returns the best-validation-epoch parameters and the
/// run report.
pub fn train(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, MetricsReport), TrainError> {
    let total_start = Instant::now();
    cfg.validate(bundle)?;
    let mapper_cfg = cfg.effective_mapper();
    let net_cfg = cfg.effective_net();

    let map_start = Instant::now();
    let mapped = map_splits(bundle, &mapper_cfg)?;
    let map_ms = map_start.elapsed().as_millis() as u64;

    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 10, 0, 0));
    let mut params: ModelParams<f32> = init_params(
        &net_cfg,
        mapper_cfg.k,
        bundle.feature_dim,
        bundle.num_classes as usize,
        &mut init_rng,
    )?;

    let train_start = Instant::now();
    let mut report = MetricsReport { map_ms, ..MetricsReport::default() };

    if cfg.max_epochs > 0 {
        if mapped.train.is_empty() {
            return Err(TrainError::EmptySamples("training"));
        }
        let n_train = mapped.train.len();
        let mut state = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &params);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 11, 0, 0));
        let dropout_base = stream_seed(cfg.seed, 12, 0, 0);

        let mut best_params = params.clone();
        let mut best_metric = f64::NEG_INFINITY;
        let mut best_epoch = 0usize;
        let mut since_best = 0usize;
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut global_step: u64 = 0;

        for epoch in 0..cfg.max_epochs {
            let epoch_start = Instant::now();
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }

            let mut epoch_loss = 0.0f64;
            for batch_idx in order.chunks(cfg.batch_size) {
                let grids = mapped.train.gather(batch_idx);
                let (ids, multi) = mapped.train.targets_for(batch_idx);
                let seeds: Vec<u64> = (0..batch_idx.len() as u64)
                    .map(|slot| stream_seed(dropout_base, 13, global_step, slot))
                    .collect();
                let (logits, cache) = forward(&params, grids.view(), Some(&seeds))?;
                let targets = match &multi {
                    Some(m) => Targets::MultiHot(m.view()),
                    None => Targets::Classes(&ids),
                };
                let (loss, dlogits) = total_loss(&logits, &targets, &params, &cfg.loss)?;
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, loss });
                }
                epoch_loss += loss * batch_idx.len() as f64 / n_train as f64;

                let mut grads = backward(&params, grids.view(), &cache, &dlogits)?;
                add_regularizer_grads(&params, &mut grads, &cfg.loss);
                state.apply(&mut params, &grads)?;
                global_step += 1;
            }

            let val_metric = evaluate(&params, &mapped.val)?;
            report.epochs.push(EpochRecord {
                epoch,
                train_loss: epoch_loss,
                val_metric,
                wall_ms: epoch_start.elapsed().as_millis() as u64,
            });

            if val_metric > best_metric {
                best_metric = val_metric;
                best_params = params.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        params = best_params;
        report.best_epoch = best_epoch;
    }

    report.train_ms = train_start.elapsed().as_millis() as u64;
    report.final_metric = evaluate(&params, &mapped.test)?;
    report.total_ms = total_start.elapsed().as_millis() as u64;
    report.peak_mem_bytes = crate::data::peak_rss_bytes().unwrap_or(0);
    Ok((params, report))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Repeat a run with seed offsets; the aggregate carries the final metric
/// mean and run-to-run standard deviation.
pub fn train_repeated(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<(Vec<MetricsReport>, f64, f64), TrainError> {
    let mut reports = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let run_cfg = TrainConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
        let (_, report) = train(bundle, &run_cfg)?;
        reports.push(report);
    }
    let metrics: Vec<f64> = reports.iter().map(|r| r.final_metric).collect();
    let (mean, std) = mean_std(&metrics);
    Ok((reports, mean, std))
}

/// One ablation row: which strategies were on, and what they scored.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub mean: f64,
    pub std: f64,
}

/// The 2^3 on/off grid over second-order neighbors, central fusion, and
/// attention, every cell trained with the same seed set. Rows are ordered
/// by how many strategies are on, all-off first, all-on last.
pub fn ablate(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    repeats: usize,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(8);
    for flags in ablation_grid() {
        let cfg = TrainConfig { flags, ..*base };
        let (_, mean, std) = train_repeated(bundle, &cfg, repeats)?;
        rows.push(AblationRow { flags, mean, std });
    }
    Ok(rows)
}

/// Fixed row order for the ablation table.
pub fn ablation_grid() -> [AblationFlags; 8] {
    let f = |s, c, a| AblationFlags {
        use_second_order: s,
        use_central_fusion: c,
        use_attention: a,
    };
    [
        f(false, false, false),
        f(true, false, false),
        f(false, true, false),
        f(false, false, true),
        f(true, true, false),
        f(true, false, true),
        f(false, true, true),
        f(true, true, true),
    ]
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("second_order,central_fusion,attention,mean_metric,std\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.flags.use_second_order as u8,
            r.flags.use_central_fusion as u8,
            r.flags.use_attention as u8,
            r.mean,
            r.std
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    ThetaBias,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
}

/// Train once (or `repeats` times) per axis value, shared seeds across
/// values.
pub fn sweep(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
) -> Result<Vec<SweepPoint>, TrainError> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = *base;
        match axis {
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(TrainError::InvalidConfig(format!(
                        "k sweep values must be positive integers, got {value}"
                    )));
                }
                cfg.mapper.k = value as usize;
            }
            SweepAxis::ThetaBias => cfg.mapper.theta_bias = value as f32,
        }
        let (_, mean, std) = train_repeated(bundle, &cfg, repeats)?;
        points.push(SweepPoint { value, mean, std });
    }
    Ok(points)
}

pub fn sweep_csv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let axis = match axis {
        SweepAxis::K => "k",
        SweepAxis::ThetaBias => "theta_bias",
    };
    let mut out = format!("{axis},mean_metric,std\n");
    for p in points {
        writeln!(out, "{},{},{}", p.value, p.mean, p.std).unwrap();
    }
    out
}
