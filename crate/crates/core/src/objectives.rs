//! Training objectives and their single-block estimators.
//!
//! Every objective is recorded per sample (`B x 1`) on a graph whose leaves
//! are the stack parameters, so the same recording yields values, gradients
//! and probe counts. Jacobian blocks are gathered with batched one-hot jvps
//! (columns of `J`) or vjps (rows of `G`); one sweep serves every sample.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contours::Partition;
use crate::diff::{Graph, ProbeCount, Var};
use crate::error::{Error, Result};
use crate::flows::{BoundStack, FlowStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectiveKind {
    /// Negative log-likelihood; the Gram form for injective stacks.
    Ml,
    /// `-log p(x) + alpha I_P(x)` through `J` blocks at `z = g(x)`.
    PfLagrangian,
    /// `-log p(x) - alpha Ihat_P(x)` through `G` blocks.
    Pf,
    /// `-log p_z(z) + 1/2 sum_k log|J_k^T J_k|` at latent inputs.
    Ipf,
    /// Single-block injective bound at `z = g(x)` plus `gamma` times the
    /// squared reconstruction error.
    IpfStage1,
    /// Stage 1 without reconstruction.
    IpfStage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Estimator {
    /// Every block, every sample.
    Exact,
    /// One uniformly drawn block per sample, scaled by `|P|`.
    UnbiasedSingleBlock,
}

fn default_alpha() -> f64 {
    10.0
}

fn default_gamma() -> f64 {
    10.0
}

fn default_estimator() -> Estimator {
    Estimator::Exact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Latent partition; singletons when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub seed: u64,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self { kind, alpha: default_alpha(), gamma: default_gamma(), partition: None, estimator: Estimator::Exact, seed: 0 }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_partition(mut self, p: Partition) -> Self {
        self.partition = Some(p);
        self
    }

    pub fn with_estimator(mut self, e: Estimator, seed: u64) -> Self {
        self.estimator = e;
        self.seed = seed;
        self
    }

    pub fn partition_for(&self, latent_dim: usize) -> Result<Partition> {
        let p = self.partition.clone().unwrap_or_else(|| Partition::singletons(latent_dim));
        p.validate(latent_dim)?;
        Ok(p)
    }

    pub fn validate(&self, stack_injective: bool) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("alpha and gamma must be finite and nonnegative"));
        }
        let square_only = matches!(self.kind, ObjectiveKind::PfLagrangian | ObjectiveKind::Pf);
        if square_only && stack_injective {
            return Err(Error::Unsupported(format!("{:?} needs a square stack", self.kind)));
        }
        Ok(())
    }
}

/// How blocks are chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockChoice<'a> {
    /// Follow the configured estimator; draws come from `(seed, epoch,
    /// offset + row)`.
    Configured { epoch: u64, offset: u64 },
    /// Use the given block position for every sample (single-block form),
    /// for exhaustive checks of the estimator.
    Fixed(usize),
    /// Use the given block position per sample.
    PerSample(&'a [usize]),
}

impl Default for BlockChoice<'_> {
    fn default() -> Self {
        BlockChoice::Configured { epoch: 0, offset: 0 }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Block position drawn for one sample.
pub fn sample_block(seed: u64, epoch: u64, index: u64, blocks: usize) -> usize {
    let s = splitmix(splitmix(splitmix(seed) ^ epoch) ^ index);
    ChaCha8Rng::seed_from_u64(s).random_range(0..blocks)
}

/// `log|M|` per sample for `M_ab = <v_a, v_b>`, each `v` being `B x D`,
/// via a recorded Cholesky factorisation.
pub fn batched_gram_logdet<'g, T: Scalar>(vecs: &[Var<'g, T>]) -> Var<'g, T> {
    let m = vecs.len();
    if m == 1 {
        return vecs[0].square().sum_cols().ln();
    }
    let gram = |a: usize, b: usize| (vecs[a] * vecs[b]).sum_cols();
    // l[i][k]: Cholesky factor entries, filled column by column.
    let mut l: Vec<Vec<Var<'g, T>>> = vec![Vec::with_capacity(m); m];
    let mut total: Option<Var<'g, T>> = None;
    for j in 0..m {
        let mut s = gram(j, j);
        for k in 0..j {
            s = s - l[j][k].square();
        }
        let ls = s.ln();
        total = Some(total.map_or(ls, |t| t + ls));
        let ljj = s.sqrt();
        for i in (j + 1)..m {
            let mut v = gram(i, j);
            for k in 0..j {
                v = v - l[i][k] * l[j][k];
            }
            l[i].push(v / ljj);
        }
        l[j].push(ljj);
    }
    total.expect("at least one vector")
}

/// The value, per-sample terms and probe counts of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T: Scalar> {
    pub mean: T,
    pub per_sample: Tensor<T>,
    /// Sweeps spent on Jacobian blocks (one per probe per sample).
    pub probes: ProbeCount,
}

struct Blocks {
    /// Block positions used for each sample, or `None` for all blocks.
    chosen: Option<Vec<usize>>,
    weight: f64,
}

fn choose(cfg: &ObjectiveConfig, p: &Partition, rows: usize, choice: BlockChoice) -> Result<Blocks> {
    let single = match choice {
        BlockChoice::Configured { epoch, offset } => match cfg.estimator {
            Estimator::Exact => None,
            Estimator::UnbiasedSingleBlock => Some((0..rows).map(|r| sample_block(cfg.seed, epoch, offset + r as u64, p.len())).collect::<Vec<_>>()),
        },
        BlockChoice::Fixed(k) => Some(vec![k; rows]),
        BlockChoice::PerSample(ks) => {
            if ks.len() != rows {
                return Err(Error::shape(format!("{} block choices for {rows} samples", ks.len())));
            }
            Some(ks.to_vec())
        }
    };
    match single {
        None => Ok(Blocks { chosen: None, weight: 1.0 }),
        Some(ks) => {
            if !p.equal_sized() {
                return Err(Error::Partition("the single-block estimator needs equal-size blocks".into()));
            }
            if let Some(&k) = ks.iter().find(|&&k| k >= p.len()) {
                return Err(Error::Partition(format!("block position {k} outside {} blocks", p.len())));
            }
            Ok(Blocks { chosen: Some(ks), weight: p.len() as f64 })
        }
    }
}

/// One-hot `B x d` selectors: the `a`-th index of each sample's block.
fn selectors<T: Scalar>(p: &Partition, ks: &[usize], d: usize) -> Vec<Tensor<T>> {
    let size = p.blocks()[0].len();
    (0..size).map(|a| Tensor::from_fn(ks.len(), d, |r, c| if p.blocks()[ks[r]][a] == c { T::one() } else { T::zero() })).collect()
}

/// `sum_k log|J_k^T J_k|` (or `|P| log|J_k^T J_k|` for the chosen k) with
/// columns from jvps of `x = f(z)`.
fn jacobian_term<'g, T: Scalar>(z: Var<'g, T>, x: Var<'g, T>, p: &Partition, blocks: &Blocks) -> Result<Var<'g, T>> {
    let g = z.graph();
    let d = z.cols();
    let cols = |sel: Vec<Tensor<T>>| -> Result<Vec<Var<'g, T>>> { sel.into_iter().map(|e| Ok(g.jvp(&[x], &[z], &[g.constant(e)])?[0])).collect() };
    match &blocks.chosen {
        None => {
            let mut total: Option<Var<'g, T>> = None;
            for b in p.blocks() {
                let sel = b.iter().map(|&k| Tensor::from_fn(z.rows(), d, |_, c| if c == k { T::one() } else { T::zero() })).collect();
                let t = batched_gram_logdet(&cols(sel)?);
                total = Some(total.map_or(t, |acc| acc + t));
            }
            Ok(total.expect("partitions are nonempty"))
        }
        Some(ks) => Ok(batched_gram_logdet(&cols(selectors(p, ks, d))?).scale(T::lit(blocks.weight))),
    }
}

/// As [`jacobian_term`] for `G` rows from vjps of `z = g(x)`.
fn inverse_term<'g, T: Scalar>(x: Var<'g, T>, z: Var<'g, T>, p: &Partition, blocks: &Blocks) -> Result<Var<'g, T>> {
    let g = z.graph();
    let d = z.cols();
    let rows = |sel: Vec<Tensor<T>>| -> Result<Vec<Var<'g, T>>> { sel.into_iter().map(|e| Ok(g.vjp(z, g.constant(e), &[x])?[0])).collect() };
    match &blocks.chosen {
        None => {
            let mut total: Option<Var<'g, T>> = None;
            for b in p.blocks() {
                let sel = b.iter().map(|&k| Tensor::from_fn(z.rows(), d, |_, c| if c == k { T::one() } else { T::zero() })).collect();
                let t = batched_gram_logdet(&rows(sel)?);
                total = Some(total.map_or(t, |acc| acc + t));
            }
            Ok(total.expect("partitions are nonempty"))
        }
        Some(ks) => Ok(batched_gram_logdet(&rows(selectors(p, ks, d))?).scale(T::lit(blocks.weight))),
    }
}

/// Records per-sample objective terms (`B x 1`). `input` is a data batch for
/// every kind except [`ObjectiveKind::Ipf`], which takes latent points.
/// `input` must be a node recorded after the stack was bound.
pub fn record<'g, T: Scalar>(cfg: &ObjectiveConfig, b: &BoundStack<'_, 'g, T>, input: Var<'g, T>, choice: BlockChoice) -> Result<Var<'g, T>> {
    let stack = b.stack();
    cfg.validate(stack.is_injective())?;
    let p = cfg.partition_for(stack.latent_dim())?;
    let alpha = T::lit(cfg.alpha);
    let half = T::lit(0.5);
    let exact = Blocks { chosen: None, weight: 1.0 };
    match cfg.kind {
        ObjectiveKind::Ml if !stack.is_injective() => {
            let (z, ld_g) = b.inverse(input)?;
            Ok(-(b.prior_logp(z) + ld_g))
        }
        ObjectiveKind::Ml => {
            let (z, _) = b.inverse(input)?;
            let (x, _) = b.forward(z)?;
            let whole = Partition::whole(stack.latent_dim());
            Ok(jacobian_term(z, x, &whole, &exact)?.scale(half) - b.prior_logp(z))
        }
        ObjectiveKind::PfLagrangian => {
            let blocks = choose(cfg, &p, input.rows(), choice)?;
            let (z, ld_g) = b.inverse(input)?;
            let (x, _) = b.forward(z)?;
            let sum = jacobian_term(z, x, &p, &blocks)?;
            // log|J^T J| = -2 log|det G|
            Ok(ld_g.scale(alpha - T::one()) - b.prior_logp(z) + sum.scale(alpha * half))
        }
        ObjectiveKind::Pf => {
            let blocks = choose(cfg, &p, input.rows(), choice)?;
            let (z, ld_g) = b.inverse(input)?;
            let sum = inverse_term(input, z, &p, &blocks)?;
            Ok(-b.prior_logp(z) - ld_g.scale(alpha + T::one()) + sum.scale(alpha * half))
        }
        ObjectiveKind::Ipf => {
            let blocks = choose(cfg, &p, input.rows(), choice)?;
            let (x, _) = b.forward(input)?;
            Ok(jacobian_term(input, x, &p, &blocks)?.scale(half) - b.prior_logp(input))
        }
        ObjectiveKind::IpfStage1 | ObjectiveKind::IpfStage2 => {
            let blocks = choose(cfg, &p, input.rows(), choice)?;
            let (z, _) = b.inverse(input)?;
            let (x, _) = b.forward(z)?;
            let bound = jacobian_term(z, x, &p, &blocks)?.scale(half) - b.prior_logp(z);
            if cfg.kind == ObjectiveKind::IpfStage2 || cfg.gamma == 0.0 {
                Ok(bound)
            } else {
                Ok(bound + (x - input).square().sum_cols().scale(T::lit(cfg.gamma)))
            }
        }
    }
}

fn check_samples<T: Scalar>(per: &Tensor<T>) -> Result<()> {
    match (0..per.rows()).find(|&r| !per[(r, 0)].is_finite()) {
        Some(sample) => Err(Error::NonFiniteSample { sample }),
        None => Ok(()),
    }
}

/// Evaluates an objective on a batch.
pub fn evaluate<T: Scalar>(cfg: &ObjectiveConfig, stack: &FlowStack<T>, batch: &Tensor<T>, choice: BlockChoice) -> Result<Evaluation<T>> {
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let per = record(cfg, &b, g.constant(batch.clone()), choice)?;
    let per_sample = per.tensor();
    check_samples(&per_sample)?;
    Ok(Evaluation { mean: per_sample.mean(), per_sample, probes: g.probes() })
}

/// Mean objective and its gradient over the parameters in `trainable`
/// (flat indices; all parameters when `None`). Entries outside `trainable`
/// are zero.
pub fn loss_and_grad<T: Scalar>(
    cfg: &ObjectiveConfig,
    stack: &FlowStack<T>,
    batch: &Tensor<T>,
    choice: BlockChoice,
    trainable: Option<Range<usize>>,
) -> Result<(Evaluation<T>, Vec<T>)> {
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let per = record(cfg, &b, g.constant(batch.clone()), choice)?;
    let per_sample = per.tensor();
    check_samples(&per_sample)?;
    let probes = g.probes();
    let loss = per.mean();
    let params = b.param_vars();
    let shapes: Vec<usize> = params.iter().map(|v| v.value().len()).collect();
    let mut starts = Vec::with_capacity(params.len());
    let mut off = 0;
    for s in &shapes {
        starts.push(off);
        off += s;
    }
    let range = trainable.unwrap_or(0..off);
    let wanted: Vec<usize> = (0..params.len()).filter(|&i| starts[i] < range.end && starts[i] + shapes[i] > range.start).collect();
    let wrt: Vec<Var<T>> = wanted.iter().map(|&i| params[i]).collect();
    let grads = g.vjp(loss, g.constant(Tensor::ones(1, 1)), &wrt)?;
    let mut flat = vec![T::zero(); off];
    for (&i, gv) in wanted.iter().zip(&grads) {
        for (k, &v) in gv.value().data().iter().enumerate() {
            let idx = starts[i] + k;
            if range.contains(&idx) {
                if !v.is_finite() {
                    return Err(Error::NonFiniteGradient { index: idx });
                }
                flat[idx] = v;
            }
        }
    }
    Ok((Evaluation { mean: loss.item(), per_sample, probes }, flat))
}

fn cfg_with(kind: ObjectiveKind, p: &Partition) -> ObjectiveConfig {
    ObjectiveConfig::new(kind).with_partition(p.clone())
}

/// Mean of `-log p(x) + alpha I_P(x)`.
pub fn pf_lagrangian<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, alpha: f64, p: &Partition) -> Result<T> {
    Ok(evaluate(&cfg_with(ObjectiveKind::PfLagrangian, p).with_alpha(alpha), stack, x, BlockChoice::default())?.mean)
}

/// Mean of `-log p_z(g(x)) - (alpha+1)/2 log|G G^T| + alpha/2 sum_k log|G_k G_k^T|`.
pub fn pf_objective<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, alpha: f64, p: &Partition) -> Result<T> {
    Ok(evaluate(&cfg_with(ObjectiveKind::Pf, p).with_alpha(alpha), stack, x, BlockChoice::default())?.mean)
}

/// [`pf_objective`] with one uniformly drawn block per sample.
pub fn pf_objective_unbiased<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, alpha: f64, p: &Partition, seed: u64) -> Result<T> {
    let cfg = cfg_with(ObjectiveKind::Pf, p).with_alpha(alpha).with_estimator(Estimator::UnbiasedSingleBlock, seed);
    Ok(evaluate(&cfg, stack, x, BlockChoice::default())?.mean)
}

/// Mean of `-log p_z(z) + 1/2 sum_k log|J_k^T J_k|` at latent points.
pub fn ipf_objective<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, p: &Partition) -> Result<T> {
    Ok(evaluate(&cfg_with(ObjectiveKind::Ipf, p), stack, z, BlockChoice::default())?.mean)
}

pub fn ipf_stage1<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, gamma: f64, p: &Partition, seed: u64) -> Result<T> {
    let cfg = cfg_with(ObjectiveKind::IpfStage1, p).with_gamma(gamma).with_estimator(Estimator::UnbiasedSingleBlock, seed);
    Ok(evaluate(&cfg, stack, x, BlockChoice::default())?.mean)
}

pub fn ipf_stage2<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, p: &Partition, seed: u64) -> Result<T> {
    let cfg = cfg_with(ObjectiveKind::IpfStage2, p).with_estimator(Estimator::UnbiasedSingleBlock, seed);
    Ok(evaluate(&cfg, stack, x, BlockChoice::default())?.mean)
}
