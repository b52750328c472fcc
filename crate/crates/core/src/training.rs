//! Two-phase training.
//!
//! 1. Parallel: every stage is trained on its own pair of pyramid levels.
//!    In an `N`-stage cascade, stage `s` (1-based) maps level `N − s + 1` to
//!    level `N − s`.
//! 2. Fine-tuning: for `s = 2..=N`, stage `s` is frozen, the level-`N` input
//!    is pushed through stages `1..=s`, the loss is taken against level
//!    `N − s` and stages `1..s` are updated. All stages use their running
//!    batch-norm statistics in this phase.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Cascade, CascadeError, StageProvenance};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::data::{DataError, PyramidDataset};
use crate::losses::{CompositeLoss, LossBreakdown, LossError};
use crate::metrics::{psnr, ssim, MetricsError, SSIM_WINDOW};
use crate::model::{DpNet, DpNetConfig, DpNetTrace, ModelError};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training schedule: {0}")]
    InvalidSchedule(String),
    #[error("stage {stage} is out of range for a {stages}-stage cascade")]
    BadStage { stage: usize, stages: usize },
    #[error("stage {0} has not been trained; run parallel training first")]
    Untrained(usize),
    #[error("no stage configurations given")]
    NoStages,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub beta1: f64,
    pub beta2: f64,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs_parallel: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fine-tuning starts at `initial_lr · finetune_lr_scale`.
    pub finetune_lr_scale: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            initial_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 20,
            epochs_parallel: 50,
            epochs_finetune: 5,
            batch_size: 16,
            seed: 0,
            finetune_lr_scale: 0.01,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::InvalidSchedule(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} must lie in (0, 1)"));
            }
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("initial_lr = {} must be positive", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor = {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.finetune_lr_scale.is_finite() && self.finetune_lr_scale >= 0.0) {
            return bad(format!("finetune_lr_scale = {} must be nonnegative", self.finetune_lr_scale));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Step decay by `decay_factor` every `decay_every` epochs.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn finetune_lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_at_epoch(epoch) * self.finetune_lr_scale
    }
}

/// Freezes or unfreezes every parameter of `net`.
pub fn set_frozen(net: &mut DpNet, frozen: bool) {
    net.set_frozen(frozen);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Parallel,
    Finetune,
}

/// One epoch of one stage. In the fine-tuning phase `stage` is the frozen
/// stage whose output is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: Phase,
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.entries.extend(other.entries);
    }

    pub fn stage_entries(&self, phase: Phase, stage: usize) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(move |e| e.phase == phase && e.stage == stage)
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timings(&self) -> TrainingLog {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|e| e.elapsed_secs = 0.0);
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TrainingError> {
        let path = path.as_ref();
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_jsonl().as_bytes()))
            .map_err(|source| TrainingError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Optional extras for training runs.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Scored after every epoch.
    pub validation: Option<&'a PyramidDataset>,
    /// Receives `*_last.ckpt` every epoch and `*_best.ckpt` whenever
    /// validation PSNR improves.
    pub checkpoint_dir: Option<PathBuf>,
    /// Train parallel-phase stages on the rayon pool.
    pub concurrent: bool,
}

fn stage_levels(stage: usize, stages: usize) -> Result<(usize, usize), TrainingError> {
    if stage == 0 || stage > stages {
        return Err(TrainingError::BadStage { stage, stages });
    }
    Ok((stages - stage + 1, stages - stage))
}

fn check_depth(data: &PyramidDataset, stages: usize) -> Result<(), TrainingError> {
    if data.levels() < stages {
        return Err(DataError::MissingLevel {
            requested: stages,
            available: data.levels(),
        }
        .into());
    }
    Ok(())
}

/// Mean PSNR and (when the images are large enough) SSIM of `run` over the
/// validation pairs.
fn validate_with(
    data: &PyramidDataset,
    input: usize,
    target: usize,
    batch: usize,
    run: impl Fn(&Tensor) -> Result<Tensor, TrainingError>,
) -> Result<(f64, Option<f64>), TrainingError> {
    let n = data.len();
    let (mut p, mut s) = (0.0, 0.0);
    let mut ssim_ok = true;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(input, target, chunk)?;
        let out = run(&x)?;
        for i in 0..chunk.len() {
            let (a, b) = (out.image(i), y.image(i));
            p += psnr(&a, &b)?;
            if a.height() >= SSIM_WINDOW && a.width() >= SSIM_WINDOW {
                s += ssim(&a, &b)?;
            } else {
                ssim_ok = false;
            }
        }
    }
    Ok((p / n as f64, ssim_ok.then_some(s / n as f64)))
}

fn checkpoint_dir<'o>(opts: &'o TrainOptions<'_>) -> Result<Option<&'o Path>, TrainingError> {
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|source| TrainingError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    Ok(opts.checkpoint_dir.as_deref())
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Trains stage `stage` of an `stages`-stage cascade from scratch. The result
/// depends only on the data, `config`, `schedule`, `stage` and `stages`.
pub fn train_stage(
    data: &PyramidDataset,
    stage: usize,
    stages: usize,
    config: DpNetConfig,
    schedule: &TrainingSchedule,
    loss: &CompositeLoss,
    opts: &TrainOptions<'_>,
) -> Result<(DpNet, TrainingLog), TrainingError> {
    schedule.validate()?;
    let (input, target) = stage_levels(stage, stages)?;
    check_depth(data, stages)?;
    if let Some(v) = opts.validation {
        check_depth(v, stages)?;
    }
    let ckpt_dir = checkpoint_dir(opts)?;
    let init_seed = derive_seed(schedule.seed, 2 * stage as u64);
    let mut net = DpNet::new(config, init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, 2 * stage as u64 + 1));
    let mut opt = Adam::new(schedule.adam());
    let mut log = TrainingLog::default();
    let mut best = f64::NEG_INFINITY;
    let start = Instant::now();
    for epoch in 0..schedule.epochs_parallel {
        let lr = schedule.lr_at_epoch(epoch);
        let mut sum = LossBreakdown::default();
        for idx in batches(data.len(), schedule.batch_size, &mut rng) {
            let (x, y) = data.batch(input, target, &idx)?;
            net.zero_grad();
            let trace = net.forward_traced(&x, Mode::Train)?;
            let (bd, g) = loss.evaluate_with_grad(trace.output(), &y)?;
            net.backward(&trace, &g, false);
            opt.step(&mut net, lr);
            let k = idx.len() as f64;
            sum.pixel += bd.pixel * k;
            sum.perceptual += bd.perceptual * k;
            sum.edge += bd.edge * k;
            sum.total += bd.total * k;
        }
        let n = data.len() as f64;
        let mean = LossBreakdown {
            pixel: sum.pixel / n,
            perceptual: sum.perceptual / n,
            edge: sum.edge / n,
            total: sum.total / n,
        };
        let (val_psnr, val_ssim) = match opts.validation {
            Some(v) => {
                let (p, s) = validate_with(v, input, target, schedule.batch_size, |x| Ok(net.forward_batch(x)?))?;
                (Some(p), s)
            }
            None => (None, None),
        };
        log::info!(
            "parallel stage {stage} epoch {epoch}: lr {lr:.2e} loss {:.6} val psnr {:?}",
            mean.total,
            val_psnr
        );
        log.push(LogEntry {
            phase: Phase::Parallel,
            stage,
            epoch,
            lr,
            loss: mean,
            val_psnr,
            val_ssim,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = ckpt_dir {
            let mut c = Cascade::new(vec![net.clone()])?;
            c.metadata_mut().stages[0] = StageProvenance {
                parallel_epochs: epoch + 1,
                finetune_epochs: 0,
                seed: Some(schedule.seed),
            };
            save_checkpoint(&c, dir.join(format!("stage{stage}_last.ckpt")))?;
            let score = val_psnr.unwrap_or(f64::INFINITY);
            if score > best || val_psnr.is_none() {
                best = score;
                save_checkpoint(&c, dir.join(format!("stage{stage}_best.ckpt")))?;
            }
        }
    }
    Ok((net, log))
}

/// Trains one network per entry of `configs`, independently.
pub fn train_parallel(
    data: &PyramidDataset,
    configs: &[DpNetConfig],
    schedule: &TrainingSchedule,
    loss: &CompositeLoss,
    opts: &TrainOptions<'_>,
) -> Result<(Vec<DpNet>, TrainingLog), TrainingError> {
    if configs.is_empty() {
        return Err(TrainingError::NoStages);
    }
    if data.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let stages = configs.len();
    check_depth(data, stages)?;
    let run = |(i, cfg): (usize, &DpNetConfig)| train_stage(data, i + 1, stages, *cfg, schedule, loss, opts);
    let results: Vec<Result<(DpNet, TrainingLog), TrainingError>> = if opts.concurrent {
        configs.par_iter().enumerate().map(run).collect()
    } else {
        configs.iter().enumerate().map(run).collect()
    };
    let mut nets = Vec::with_capacity(stages);
    let mut log = TrainingLog::default();
    for r in results {
        let (net, l) = r?;
        nets.push(net);
        log.extend(l);
    }
    Ok((nets, log))
}

/// Packs trained stages into a cascade with provenance metadata.
pub fn cascade_from_parallel(nets: Vec<DpNet>, schedule: &TrainingSchedule) -> Result<Cascade, TrainingError> {
    let mut c = Cascade::new(nets)?;
    for p in &mut c.metadata_mut().stages {
        p.parallel_epochs = schedule.epochs_parallel;
        p.seed = Some(schedule.seed);
    }
    Ok(c)
}

fn cascade_forward(
    stages: &mut [DpNet],
    x: &Tensor,
) -> Result<Vec<DpNetTrace>, TrainingError> {
    let mut traces: Vec<DpNetTrace> = Vec::with_capacity(stages.len());
    for net in stages.iter_mut() {
        let t = {
            let input = traces.last().map_or(x, |t| t.output());
            net.forward_traced(input, Mode::Eval)?
        };
        traces.push(t);
    }
    Ok(traces)
}

/// Penetrating fine-tuning of a parallel-trained cascade.
pub fn finetune_cascade(
    mut cascade: Cascade,
    data: &PyramidDataset,
    schedule: &TrainingSchedule,
    loss: &CompositeLoss,
    opts: &TrainOptions<'_>,
) -> Result<(Cascade, TrainingLog), TrainingError> {
    schedule.validate()?;
    let n = cascade.len();
    check_depth(data, n)?;
    if let Some(v) = opts.validation {
        check_depth(v, n)?;
    }
    if let Some(i) = cascade.metadata().stages.iter().position(|p| !p.is_trained()) {
        return Err(TrainingError::Untrained(i + 1));
    }
    let ckpt_dir = checkpoint_dir(opts)?;
    let mut log = TrainingLog::default();
    let start = Instant::now();
    for s in 2..=n {
        let target = n - s;
        for (i, net) in cascade.stages_mut().iter_mut().enumerate() {
            net.set_frozen(i + 1 >= s);
        }
        let mut opts_per_stage: Vec<Adam> = (0..s - 1).map(|_| Adam::new(schedule.adam())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schedule.seed, 1_000 + s as u64));
        let mut best = f64::NEG_INFINITY;
        for epoch in 0..schedule.epochs_finetune {
            let lr = schedule.finetune_lr_at_epoch(epoch);
            let mut sum = LossBreakdown::default();
            for idx in batches(data.len(), schedule.batch_size, &mut rng) {
                let (x, y) = data.batch(n, target, &idx)?;
                let stages = &mut cascade.stages_mut()[..s];
                stages.iter_mut().for_each(DpNet::zero_grad);
                let traces = cascade_forward(stages, &x)?;
                let (bd, mut g) = loss.evaluate_with_grad(traces[s - 1].output(), &y)?;
                for i in (0..s).rev() {
                    match stages[i].backward(&traces[i], &g, i > 0) {
                        Some(next) => g = next,
                        None => break,
                    }
                }
                for (net, opt) in stages.iter_mut().zip(&mut opts_per_stage) {
                    opt.step(net, lr);
                }
                let k = idx.len() as f64;
                sum.pixel += bd.pixel * k;
                sum.perceptual += bd.perceptual * k;
                sum.edge += bd.edge * k;
                sum.total += bd.total * k;
            }
            let m = data.len() as f64;
            let mean = LossBreakdown {
                pixel: sum.pixel / m,
                perceptual: sum.perceptual / m,
                edge: sum.edge / m,
                total: sum.total / m,
            };
            let (val_psnr, val_ssim) = match opts.validation {
                Some(v) => {
                    let c = &cascade;
                    let (p, q) = validate_with(v, n, target, schedule.batch_size, |x| {
                        Ok(c.super_resolve_batch(x, Some(s))?)
                    })?;
                    (Some(p), q)
                }
                None => (None, None),
            };
            log::info!("finetune step {s} epoch {epoch}: lr {lr:.2e} loss {:.6} val psnr {:?}", mean.total, val_psnr);
            log.push(LogEntry {
                phase: Phase::Finetune,
                stage: s,
                epoch,
                lr,
                loss: mean,
                val_psnr,
                val_ssim,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
            for p in &mut cascade.metadata_mut().stages[..s - 1] {
                p.finetune_epochs += 1;
            }
            if let Some(dir) = ckpt_dir {
                save_checkpoint(&cascade, dir.join("finetune_last.ckpt"))?;
                let score = val_psnr.unwrap_or(f64::INFINITY);
                if score > best || val_psnr.is_none() {
                    best = score;
                    save_checkpoint(&cascade, dir.join("finetune_best.ckpt"))?;
                }
            }
        }
    }
    cascade.stages_mut().iter_mut().for_each(|net| net.set_frozen(false));
    Ok((cascade, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps_by_decade() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at_epoch(0), 1e-3);
        assert_eq!(s.lr_at_epoch(19), 1e-3);
        assert!((s.lr_at_epoch(20) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at_epoch(40) - 1e-5).abs() < 1e-19);
        assert!((s.finetune_lr_at_epoch(0) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainingSchedule::default().validate().is_ok());
        for bad in [
            TrainingSchedule { beta1: 1.0, ..Default::default() },
            TrainingSchedule { beta2: 0.0, ..Default::default() },
            TrainingSchedule { initial_lr: 0.0, ..Default::default() },
            TrainingSchedule { batch_size: 0, ..Default::default() },
            TrainingSchedule { decay_every: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainingError::InvalidSchedule(_))));
        }
    }

    #[test]
    fn stage_level_mapping() {
        assert_eq!(stage_levels(1, 2).unwrap(), (2, 1));
        assert_eq!(stage_levels(2, 2).unwrap(), (1, 0));
        assert_eq!(stage_levels(1, 1).unwrap(), (1, 0));
        assert!(stage_levels(3, 2).is_err());
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let mut log = TrainingLog::default();
        log.push(LogEntry {
            phase: Phase::Finetune,
            stage: 2,
            epoch: 0,
            lr: 1e-5,
            loss: LossBreakdown::default(),
            val_psnr: Some(21.5),
            val_ssim: None,
            elapsed_secs: 3.25,
        });
        let back = TrainingLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.without_timings().entries[0].elapsed_secs, 0.0);
    }
}
