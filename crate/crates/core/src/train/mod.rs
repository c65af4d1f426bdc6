//! Optimizers, the training loop, metric logging and checkpoints.
//!
//! Training runs on `f64` stacks. Every step draws the next batch from a
//! per-epoch shuffle derived from `(seed, epoch)`; single-block estimators
//! draw their blocks from `(objective seed, epoch, position in epoch)`, so a
//! run is a pure function of its config and data.

mod checkpoint;
mod optimizer;

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, DataCursor, MAGIC};
pub use optimizer::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

use crate::contours::{evaluate_data, Partition};
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::flows::{ArchSpec, CouplingKind, FlowStack, LayerSpec, NetSpec};
use crate::objectives::{loss_and_grad, splitmix, BlockChoice, Estimator, ObjectiveConfig, ObjectiveKind};
use crate::tensor::Tensor;

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Trainable {
    #[default]
    All,
    /// Layers on the latent side of the slice; the slice and ambient layers
    /// stay frozen. Same as `All` on square stacks.
    LatentFlow,
}

/// Learning-rate multiplier over the step budget.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from 1 at the first step down to `floor` at the last.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn is_constant(&self) -> bool {
        *self == LrSchedule::Constant
    }

    /// Multiplier for the update taken after `step` completed steps.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let frac = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    256
}
fn d_epochs() -> u64 {
    1
}
fn d_eval_interval() -> u64 {
    500
}
fn d_eval_points() -> usize {
    2000
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default, skip_serializing_if = "LrSchedule::is_constant")]
    pub schedule: LrSchedule,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: u64,
    /// Total step budget; overrides `epochs` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Steps between held-out evaluations.
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    /// Held-out rows used per evaluation (leading rows).
    #[serde(default = "d_eval_points")]
    pub eval_points: usize,
    #[serde(default)]
    pub seed: u64,
    pub arch: ArchSpec,
    #[serde(default)]
    pub trainable: Trainable,
    /// Data-dependent act-norm initialisation on a fresh stack.
    #[serde(default = "d_true")]
    pub init_actnorm: bool,
    /// Rescale gradients whose Euclidean norm exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig, arch: ArchSpec) -> Self {
        Self {
            objective,
            lr: d_lr(),
            schedule: LrSchedule::Constant,
            batch_size: d_batch(),
            epochs: d_epochs(),
            steps: None,
            optimizer: OptimizerConfig::default(),
            eval_interval: d_eval_interval(),
            eval_points: d_eval_points(),
            seed: 0,
            arch,
            trainable: Trainable::All,
            init_actnorm: true,
            clip_norm: None,
        }
    }

    /// Desk-scale 2D setup: 6 rational-quadratic spline couplings with
    /// 2 x 32 residual conditioners, AdaBelief at 1e-3, batches of 256.
    pub fn desk_2d(objective: ObjectiveConfig) -> Self {
        Self::new(objective, ArchSpec::coupling(2, 6, CouplingKind::RqSpline, NetSpec { hidden: 32, blocks: 2 }))
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = Some(steps);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if let LrSchedule::Cosine { floor } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::invalid("cosine floor must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.eval_interval == 0 || self.eval_points == 0 {
            return Err(Error::invalid("eval interval and eval points must be at least 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        self.optimizer.validate()?;
        self.arch.validate()?;
        self.objective.validate(self.arch.data_dim > self.arch.latent_dim)?;
        self.objective.partition_for(self.arch.latent_dim)?;
        Ok(())
    }

    /// Hex SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn total_steps(&self, batches_per_epoch: u64) -> u64 {
        self.steps.unwrap_or(self.epochs * batches_per_epoch)
    }
}

/// One held-out evaluation. `Ihat_P` is absent for injective stacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub nll: f64,
    #[serde(rename = "I_P")]
    pub i_p: f64,
    #[serde(rename = "Ihat_P")]
    pub ihat_p: Option<f64>,
    pub wall_time: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["step", "nll", "I_P", "Ihat_P", "wall_time"];

/// Metrics as CSV, floats at 17 significant digits; an absent `Ihat_P` is
/// an empty field.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let ihat = r.ihat_p.map(fmt_f64).unwrap_or_default();
        w.write_record([r.step.to_string(), fmt_f64(r.nll), fmt_f64(r.i_p), ihat, fmt_f64(r.wall_time)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_metrics(bytes: &[u8]) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!("metrics header must be {}", METRICS_HEADER.join(","))));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &metrics_csv(rows)?)
}

/// Held-out mean negative log-likelihood, mean exact `I_P` and (square
/// stacks) mean `Ihat_P`. On injective stacks the likelihood is the
/// on-manifold density at the projection `f(g(x))`.
pub fn held_out_metrics(stack: &FlowStack<f64>, x: &Tensor<f64>, p: &Partition) -> Result<(f64, f64, Option<f64>)> {
    let pts = evaluate_data(stack, x)?;
    let n = pts.len() as f64;
    let (mut nll, mut ip, mut ihat) = (0.0, 0.0, 0.0);
    for pt in &pts {
        nll -= pt.logpx;
        ip += pt.partition_pmi(p)?;
        if !stack.is_injective() {
            ihat += pt.partition_pmi_hat(p)?;
        }
    }
    Ok((nll / n, ip / n, (!stack.is_injective()).then_some(ihat / n)))
}

/// Mean squared reconstruction error `||f(g(x)) - x||^2` per row.
pub fn reconstruction_mse(stack: &FlowStack<f64>, x: &Tensor<f64>) -> Result<f64> {
    let z = stack.inverse(x)?.0;
    let xr = stack.forward(&z)?.0;
    Ok(xr.sub(x).map(|v| v * v).sum_cols().mean())
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ epoch)));
    order
}

/// Step-by-step training state over a borrowed training set.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    hash: String,
    stack: FlowStack<f64>,
    opt: OptimizerState<f64>,
    step: u64,
    cursor: DataCursor,
    order: Vec<usize>,
    train: &'d Tensor<f64>,
    history: Vec<MetricRow>,
    clock: Instant,
    wall_offset: f64,
}

impl<'d> Trainer<'d> {
    /// Fresh parameters from `cfg.arch` and `cfg.seed`.
    pub fn new(cfg: &TrainConfig, train: &'d Tensor<f64>) -> Result<Self> {
        cfg.validate()?;
        let mut stack = FlowStack::new(cfg.arch.clone(), cfg.seed)?;
        if cfg.init_actnorm && stack.layers().iter().any(|l| matches!(l.spec, LayerSpec::ActNorm { .. })) {
            stack.init_actnorm(&train.slice_rows(0, train.rows().min(4096)))?;
        }
        Self::with_stack(cfg, stack, train)
    }

    /// Starts from given parameters with a fresh optimizer and data stream.
    pub fn with_stack(cfg: &TrainConfig, stack: FlowStack<f64>, train: &'d Tensor<f64>) -> Result<Self> {
        cfg.validate()?;
        let cursor = DataCursor { seed: cfg.seed, epoch: 0, batch: 0 };
        let opt = OptimizerState::new(cfg.optimizer.kind, stack.param_count());
        Self::assemble(cfg, stack, opt, 0, cursor, Vec::new(), 0.0, train)
    }

    /// Continues a run exactly where `ckpt` left it.
    pub fn resume(cfg: &TrainConfig, ckpt: &Checkpoint, train: &'d Tensor<f64>) -> Result<Self> {
        cfg.validate()?;
        if ckpt.optimizer_kind != cfg.optimizer.kind {
            return Err(Error::invalid(format!("checkpoint optimizer {:?} differs from config {:?}", ckpt.optimizer_kind, cfg.optimizer.kind)));
        }
        if ckpt.config_hash != cfg.hash() {
            log::warn!("resuming a checkpoint written under a different config");
        }
        let stack = ckpt.stack()?;
        let wall = ckpt.history.last().map_or(0.0, |r| r.wall_time);
        Self::assemble(cfg, stack, ckpt.optimizer.clone(), ckpt.step, ckpt.cursor, ckpt.history.clone(), wall, train)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: &TrainConfig,
        stack: FlowStack<f64>,
        opt: OptimizerState<f64>,
        step: u64,
        cursor: DataCursor,
        history: Vec<MetricRow>,
        wall_offset: f64,
        train: &'d Tensor<f64>,
    ) -> Result<Self> {
        if train.rows() == 0 || train.cols() != stack.data_dim() {
            return Err(Error::shape(format!("training data is {:?}, stack expects {} columns", train.shape(), stack.data_dim())));
        }
        let expect = if cfg.optimizer.kind == OptimizerKind::Sgd { 0 } else { stack.param_count() };
        if opt.m.len() != expect || opt.s.len() != expect {
            return Err(Error::shape("optimizer state does not match the parameter count"));
        }
        let order = epoch_order(cursor.seed, cursor.epoch, train.rows());
        Ok(Self { cfg: cfg.clone(), hash: cfg.hash(), stack, opt, step, cursor, order, train, history, clock: Instant::now(), wall_offset })
    }

    pub fn stack(&self) -> &FlowStack<f64> {
        &self.stack
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricRow] {
        &self.history
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.batch_size.min(self.train.rows())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.train.rows() / self.batch_size()) as u64
    }

    fn trainable(&self) -> Option<Range<usize>> {
        match self.cfg.trainable {
            Trainable::All => None,
            Trainable::LatentFlow => Some(0..self.stack.injective_param_range().start),
        }
    }

    /// Consumes one batch. Returns the batch loss, or `None` when the step was
    /// skipped for a non-finite loss or gradient.
    pub fn step(&mut self) -> Result<Option<f64>> {
        let bs = self.batch_size();
        let start = self.cursor.batch as usize * bs;
        let x = self.train.select_rows(&self.order[start..start + bs]);
        let choice = BlockChoice::Configured { epoch: self.cursor.epoch, offset: start as u64 };
        let lr = self.cfg.lr * self.cfg.schedule.factor(self.step, self.cfg.total_steps(self.batches_per_epoch()));
        let result = loss_and_grad(&self.cfg.objective, &self.stack, &x, choice, self.trainable());
        self.step += 1;
        self.cursor.batch += 1;
        if self.cursor.batch == self.batches_per_epoch() {
            self.cursor.epoch += 1;
            self.cursor.batch = 0;
            self.order = epoch_order(self.cursor.seed, self.cursor.epoch, self.train.rows());
        }
        let (eval, mut grad) = match result {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                self.opt.skipped += 1;
                log::warn!("skipping step {}: {e}", self.step);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        if let Some(c) = self.cfg.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                grad.iter_mut().for_each(|g| *g *= c / norm);
            }
        }
        let mut params = self.stack.params_flat();
        if !optimizer_step(&mut self.opt, &mut params, &grad, &self.cfg.optimizer, lr)? {
            return Ok(None);
        }
        self.stack.set_params_flat(&params)?;
        Ok(Some(eval.mean))
    }

    /// Evaluates on the leading `eval_points` rows of `held_out` and appends
    /// the row to the history. Numerical failures give a `NaN` row.
    pub fn evaluate(&mut self, held_out: &Tensor<f64>) -> Result<MetricRow> {
        let x = held_out.slice_rows(0, held_out.rows().min(self.cfg.eval_points));
        let p = self.cfg.objective.partition_for(self.stack.latent_dim())?;
        let (nll, i_p, ihat_p) = match held_out_metrics(&self.stack, &x, &p) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => (f64::NAN, f64::NAN, (!self.stack.is_injective()).then_some(f64::NAN)),
            Err(e) => return Err(e),
        };
        let row = MetricRow { step: self.step, nll, i_p, ihat_p, wall_time: self.wall_offset + self.clock.elapsed().as_secs_f64() };
        self.history.push(row.clone());
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.stack.arch().clone(),
            params: self.stack.params_flat(),
            optimizer_kind: self.cfg.optimizer.kind,
            optimizer: self.opt.clone(),
            step: self.step,
            cursor: self.cursor,
            config_hash: self.hash.clone(),
            history: self.history.clone(),
        }
    }

    /// Trains to the configured step budget, evaluating every
    /// `eval_interval` steps and at the end. Three consecutive non-finite
    /// evaluations abort with the last checkpoint whose evaluation was finite.
    pub fn run(&mut self, held_out: &Tensor<f64>) -> Result<Checkpoint> {
        if held_out.cols() != self.stack.data_dim() || held_out.rows() == 0 {
            return Err(Error::shape("held-out data does not match the stack"));
        }
        let total = self.cfg.total_steps(self.batches_per_epoch());
        let mut last_good: Option<Checkpoint> = None;
        let mut bad = 0;
        let mut check = |tr: &mut Self| -> Result<()> {
            let row = tr.evaluate(held_out)?;
            log::info!("step {}: nll {:.5} I_P {:.5}", row.step, row.nll, row.i_p);
            if row.nll.is_finite() {
                bad = 0;
                last_good = Some(tr.checkpoint());
                return Ok(());
            }
            bad += 1;
            if bad >= 3 {
                let good = last_good.take().unwrap_or_else(|| tr.checkpoint());
                return Err(Error::Diverged { step: tr.step, last_good: Box::new(good) });
            }
            Ok(())
        };
        if self.history.last().is_none_or(|r| r.step != self.step) {
            check(self)?;
        }
        while self.step < total {
            self.step()?;
            if self.step % self.cfg.eval_interval == 0 || self.step == total {
                check(self)?;
            }
        }
        Ok(self.checkpoint())
    }
}

/// Trains a fresh stack per `cfg`.
pub fn fit(cfg: &TrainConfig, train: &Tensor<f64>, held_out: &Tensor<f64>) -> Result<Checkpoint> {
    Trainer::new(cfg, train)?.run(held_out)
}

/// Continues training from a checkpoint up to the config's step budget.
pub fn resume(cfg: &TrainConfig, ckpt: &Checkpoint, train: &Tensor<f64>, held_out: &Tensor<f64>) -> Result<Checkpoint> {
    Trainer::resume(cfg, ckpt, train)?.run(held_out)
}

/// Two-stage injective training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectiveConfig {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl InjectiveConfig {
    /// Stage 1: `IPF_STAGE1` (gamma 10, one block per sample) on all layers at
    /// lr 1e-4. Stage 2: `IPF_STAGE2` on the latent flow at lr 1e-3.
    pub fn new(arch: ArchSpec, seed: u64) -> Self {
        let obj = |kind| ObjectiveConfig::new(kind).with_estimator(Estimator::UnbiasedSingleBlock, seed);
        let mut stage1 = TrainConfig::new(obj(ObjectiveKind::IpfStage1), arch.clone()).with_seed(seed).with_lr(1e-4);
        stage1.trainable = Trainable::All;
        let mut stage2 = TrainConfig::new(obj(ObjectiveKind::IpfStage2), arch).with_seed(seed.wrapping_add(1));
        stage2.trainable = Trainable::LatentFlow;
        Self { stage1, stage2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectiveFit {
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
}

/// Stage 1 fits the manifold and density jointly; stage 2 starts from the
/// stage-1 parameters and trains only the latent flow.
pub fn fit_injective(cfg: &InjectiveConfig, train: &Tensor<f64>, held_out: &Tensor<f64>) -> Result<InjectiveFit> {
    let stage1 = fit(&cfg.stage1, train, held_out)?;
    let mut s2 = cfg.stage2.clone();
    s2.init_actnorm = false;
    let stage2 = Trainer::with_stack(&s2, stage1.stack()?, train)?.run(held_out)?;
    Ok(InjectiveFit { stage1, stage2 })
}
