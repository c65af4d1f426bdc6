use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conditioner::NetSpec;
use super::layers::{FlowLayer, LayerSpec};
use super::prior::Prior;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Transformer used by the coupling layers of a generated architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    Affine,
    RqSpline,
    MixtureCdf,
}

/// Serializable description of a stack: layers ordered from the latent side
/// to the data side, plus the latent prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub prior: Prior,
}

impl ArchSpec {
    /// `blocks` repetitions of act-norm, invertible linear (for `dim > 1`) and
    /// a coupling layer with alternating parity.
    pub fn coupling(dim: usize, blocks: usize, kind: CouplingKind, net: NetSpec) -> Self {
        Self { latent_dim: dim, data_dim: dim, layers: coupling_layers(dim, blocks, kind, net), prior: Prior::StandardNormal }
    }

    /// A latent flow on `latent_dim` coordinates, a slice into `data_dim`, then
    /// an ambient flow on the data side.
    pub fn injective(latent_dim: usize, data_dim: usize, latent_blocks: usize, ambient_blocks: usize, kind: CouplingKind, net: NetSpec) -> Self {
        let mut layers = coupling_layers(latent_dim, latent_blocks, kind, net);
        layers.push(LayerSpec::Slice { latent_dim, data_dim });
        layers.extend(coupling_layers(data_dim, ambient_blocks, kind, net));
        Self { latent_dim, data_dim, layers, prior: Prior::StandardNormal }
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.latent_dim;
        let mut slices = 0;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| e.in_layer(i))?;
            if l.in_dim() != dim {
                return Err(Error::Layer { layer: i, msg: format!("expects {} inputs but receives {dim}", l.in_dim()) });
            }
            if matches!(l, LayerSpec::Slice { .. }) {
                slices += 1;
            }
            dim = l.out_dim();
        }
        if dim != self.data_dim {
            return Err(Error::invalid(format!("stack produces {dim} outputs, data dim is {}", self.data_dim)));
        }
        if slices > 1 {
            return Err(Error::invalid("at most one slice layer is supported"));
        }
        if (slices == 1) != (self.data_dim > self.latent_dim) {
            return Err(Error::invalid("data dim exceeds latent dim exactly when a slice layer is present"));
        }
        self.prior.validate(self.latent_dim)
    }
}

fn coupling_layers(dim: usize, blocks: usize, kind: CouplingKind, net: NetSpec) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for parity in 0..blocks {
        layers.push(LayerSpec::ActNorm { dim });
        if dim > 1 {
            layers.push(LayerSpec::InvertibleLinear { dim, perm: vec![], sign: vec![] });
        }
        layers.push(match kind {
            CouplingKind::Affine => LayerSpec::AffineCoupling { dim, parity, net },
            CouplingKind::RqSpline => LayerSpec::RqSplineCoupling { dim, parity, bins: 8, bound: 4.0, net },
            CouplingKind::MixtureCdf => LayerSpec::MixtureCdfCoupling { dim, parity, components: 4, logit_output: true, net },
        });
    }
    layers
}

/// A composed flow `f = f_L o ... o f_1` from latent to data space, with its
/// parameters. The inverse direction is `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack<T: Scalar> {
    arch: ArchSpec,
    layers: Vec<FlowLayer<T>>,
}

impl<T: Scalar> FlowStack<T> {
    /// Builds a stack with fresh parameters. Invertible-linear layers without
    /// a stored permutation are drawn at random, which fills in the returned
    /// stack's [`ArchSpec`].
    pub fn new(mut arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch.layers.iter_mut().map(|spec| {
            let params = spec.init(&mut rng);
            FlowLayer { spec: spec.clone(), params }
        });
        let layers = layers.collect();
        Ok(Self { arch, layers })
    }

    /// Builds a stack and adds `N(0, scale^2)` noise to every parameter, so
    /// that couplings are not at their identity initialisation.
    pub fn randomized(arch: ArchSpec, seed: u64, scale: f64) -> Result<Self> {
        let mut s = Self::new(arch, seed)?;
        s.perturb(seed.wrapping_add(0x9e37_79b9_7f4a_7c15), scale);
        Ok(s)
    }

    /// Rebuilds a stack from an architecture (with permutations filled in)
    /// and a flat parameter vector.
    pub fn from_params(arch: ArchSpec, params: &[T]) -> Result<Self> {
        if arch.layers.iter().any(|l| matches!(l, LayerSpec::InvertibleLinear { perm, .. } if perm.is_empty())) {
            return Err(Error::invalid("invertible-linear layers need stored permutations to restore parameters"));
        }
        let mut s = Self::new(arch, 0)?;
        s.set_params_flat(params)?;
        Ok(s)
    }

    /// The linear flow `x = A z` with a standard normal prior.
    pub fn linear(a: &Tensor<f64>) -> Result<Self> {
        let d = a.rows();
        if a.cols() != d || d == 0 {
            return Err(Error::shape("a linear flow needs a nonempty square matrix"));
        }
        if !a.all_finite() || linalg::slogdet(a).0 == 0.0 {
            return Err(Error::Degenerate("singular matrix".into()));
        }
        let (perm, sign, params) = super::layers::linear_factors(a);
        let spec = LayerSpec::InvertibleLinear { dim: d, perm, sign };
        let arch = ArchSpec { latent_dim: d, data_dim: d, layers: vec![spec.clone()], prior: Prior::StandardNormal };
        Ok(Self { arch, layers: vec![FlowLayer { spec, params }] })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[FlowLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer<T>] {
        &mut self.layers
    }

    pub fn prior(&self) -> &Prior {
        &self.arch.prior
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn is_injective(&self) -> bool {
        self.data_dim() > self.latent_dim()
    }

    pub fn slice_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.spec, LayerSpec::Slice { .. }))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    /// Offsets of layer `i`'s parameters in the flat vector.
    pub fn layer_param_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.layers[..i].iter().flat_map(|l| &l.params).map(Tensor::len).sum();
        let len: usize = self.layers[i].params.iter().map(Tensor::len).sum();
        start..start + len
    }

    /// Flat range covering the slice layer and everything on its data side;
    /// empty for square stacks.
    pub fn injective_param_range(&self) -> Range<usize> {
        match self.slice_index() {
            Some(i) => self.layer_param_range(i).start..self.param_count(),
            None => self.param_count()..self.param_count(),
        }
    }

    pub fn params_flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| &l.params).flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!("{} parameters given, stack has {}", flat.len(), self.param_count())));
        }
        let mut k = 0;
        for t in self.layers.iter_mut().flat_map(|l| l.params.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, scale.abs()).expect("finite scale");
        for t in self.layers.iter_mut().flat_map(|l| l.params.iter_mut()) {
            for v in t.data_mut() {
                *v = *v + T::lit(noise.sample(&mut rng));
            }
        }
    }

    /// Records every parameter tensor as a leaf of `g`.
    pub fn bind<'s, 'g>(&'s self, g: &'g Graph<T>) -> Result<BoundStack<'s, 'g, T>> {
        let mut params = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Layer { layer: i, msg: "non-finite parameter".into() });
            }
            params.push(l.params.iter().map(|p| g.leaf(p.clone())).collect());
        }
        Ok(BoundStack { stack: self, params })
    }

    /// `x = f(z)` and `log|det J|` per row. For injective stacks the slice
    /// contributes nothing, so this is the sum over square layers only.
    pub fn forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::new();
        let b = self.bind(&g)?;
        let (x, ld) = b.forward(g.constant(z.clone()))?;
        Ok((x.tensor(), ld.tensor()))
    }

    /// `z = g(x)` and `log|det G|` per row (for injective stacks the slice is
    /// replaced by its left inverse).
    pub fn inverse(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::new();
        let b = self.bind(&g)?;
        let (z, ld) = b.inverse(g.constant(x.clone()))?;
        Ok((z.tensor(), ld.tensor()))
    }

    /// `log p_z(g(x)) + log|G|` per row. Square stacks only.
    pub fn log_prob(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.is_injective() {
            return Err(Error::Unsupported("log_prob on an injective stack; use log_prob_injective".into()));
        }
        let g = Graph::new();
        let b = self.bind(&g)?;
        let (z, ld) = b.inverse(g.constant(x.clone()))?;
        Ok((b.prior_logp(z) + ld).tensor())
    }

    /// `log p_z(z) - 1/2 log|J^T J|` per row, with `J` at `z` assembled from
    /// `latent_dim` jvps.
    pub fn log_prob_injective(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.is_injective() {
            return Err(Error::Unsupported("log_prob_injective needs an injective stack".into()));
        }
        let g = Graph::new();
        let b = self.bind(&g)?;
        let zv = g.leaf(z.clone());
        let cols = b.jacobian_cols(zv, &(0..self.latent_dim()).collect::<Vec<_>>())?;
        let logp = b.prior_logp(zv).tensor();
        let per = per_sample_matrices(&cols);
        let mut out = Tensor::zeros(z.rows(), 1);
        for (r, j) in per.iter().enumerate() {
            let ld = linalg::gram_logdet(j);
            if !ld.is_finite() {
                return Err(Error::Degenerate(format!("J^T J is singular at sample {r}")));
            }
            out[(r, 0)] = logp[(r, 0)] - ld * T::lit(0.5);
        }
        Ok(out)
    }

    /// `n` draws from the prior pushed through `f`; deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        Ok(self.sample_with_latent(n, seed)?.1)
    }

    /// Same draws as [`FlowStack::sample`], returned as `(z, x)`.
    pub fn sample_with_latent(&self, n: usize, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        if n == 0 {
            return Err(Error::invalid("sample needs n >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.arch.prior.sample(n, self.latent_dim(), &mut rng);
        let x = self.forward(&z)?.0;
        Ok((z, x))
    }

    /// Data-dependent act-norm initialisation: walking from the data side,
    /// each act-norm layer is set so that its latent-side output has zero mean
    /// and unit variance per coordinate on `x`.
    pub fn init_actnorm(&mut self, x: &Tensor<T>) -> Result<()> {
        if x.rows() < 2 {
            return Err(Error::invalid("act-norm initialisation needs at least two rows"));
        }
        let mut h = x.clone();
        for i in (0..self.layers.len()).rev() {
            if matches!(self.layers[i].spec, LayerSpec::ActNorm { .. }) {
                let n = T::from_usize_lossy(h.rows());
                let mean = h.sum_rows().scale(T::one() / n);
                let var = Tensor::from_fn(1, h.cols(), |_, j| (0..h.rows()).map(|r| (h[(r, j)] - mean[(0, j)]).powi(2)).sum::<T>() / n);
                self.layers[i].params[0] = mean;
                self.layers[i].params[1] = var.map(|v| v.max(T::lit(1e-12)).sqrt().ln());
            }
            let g = Graph::new();
            let p: Vec<_> = self.layers[i].params.iter().map(|t| g.constant(t.clone())).collect();
            let (z, _) = self.layers[i].record_inverse(&p, g.constant(h)).map_err(|e| e.in_layer(i))?;
            h = z.tensor();
        }
        Ok(())
    }
}

/// Splits per-column batched values (`B x D` each) into one `D x k` matrix per
/// sample.
pub(crate) fn per_sample_matrices<'g, T: Scalar>(cols: &[Var<'g, T>]) -> Vec<Tensor<T>> {
    let vals: Vec<_> = cols.iter().map(|c| c.value()).collect();
    let (rows, d) = (vals[0].rows(), vals[0].cols());
    (0..rows).map(|r| Tensor::from_fn(d, vals.len(), |i, j| vals[j][(r, i)])).collect()
}

/// A stack whose parameters are leaves of a graph.
pub struct BoundStack<'s, 'g, T: Scalar> {
    stack: &'s FlowStack<T>,
    params: Vec<Vec<Var<'g, T>>>,
}

impl<'s, 'g, T: Scalar> BoundStack<'s, 'g, T> {
    pub fn stack(&self) -> &'s FlowStack<T> {
        self.stack
    }

    /// Parameter leaves in flat order.
    pub fn param_vars(&self) -> Vec<Var<'g, T>> {
        self.params.iter().flatten().copied().collect()
    }

    pub fn layer_params(&self, i: usize) -> &[Var<'g, T>] {
        &self.params[i]
    }

    fn check(i: usize, v: Var<'g, T>, ld: Var<'g, T>) -> Result<()> {
        if v.value().all_finite() && ld.value().all_finite() {
            Ok(())
        } else {
            Err(Error::Layer { layer: i, msg: "non-finite output".into() })
        }
    }

    /// Records `f` over layers `range`.
    pub fn forward_range(&self, z: Var<'g, T>, range: Range<usize>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let mut h = z;
        let mut total = z.graph().zeros(z.rows(), 1);
        for i in range {
            let (next, ld) = self.stack.layers[i].record_forward(&self.params[i], h).map_err(|e| e.in_layer(i))?;
            Self::check(i, next, ld)?;
            h = next;
            total = total + ld;
        }
        Ok((h, total))
    }

    /// Records `g` over layers `range`, applied from the data side.
    pub fn inverse_range(&self, x: Var<'g, T>, range: Range<usize>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let mut h = x;
        let mut total = x.graph().zeros(x.rows(), 1);
        for i in range.rev() {
            let (next, ld) = self.stack.layers[i].record_inverse(&self.params[i], h).map_err(|e| e.in_layer(i))?;
            Self::check(i, next, ld)?;
            h = next;
            total = total + ld;
        }
        Ok((h, total))
    }

    pub fn forward(&self, z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if z.cols() != self.stack.latent_dim() {
            return Err(Error::shape(format!("latent input has {} columns, stack expects {}", z.cols(), self.stack.latent_dim())));
        }
        self.forward_range(z, 0..self.stack.layers.len())
    }

    pub fn inverse(&self, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if x.cols() != self.stack.data_dim() {
            return Err(Error::shape(format!("data input has {} columns, stack expects {}", x.cols(), self.stack.data_dim())));
        }
        self.inverse_range(x, 0..self.stack.layers.len())
    }

    /// `log p_z(z)` per row.
    pub fn prior_logp(&self, z: Var<'g, T>) -> Var<'g, T> {
        self.stack.arch.prior.record_dims(z).sum_cols()
    }

    /// `log p_k(z_k)` per row.
    pub fn prior_block_logp(&self, z: Var<'g, T>, block: &[usize]) -> Var<'g, T> {
        self.stack.arch.prior.record_block(z, block)
    }

    /// Columns `k` of `J = df/dz` at every row of `z`, one jvp each: returns
    /// `|block|` values of shape `B x data_dim`. `z` must be a node recorded
    /// before this call; `f` is recorded afresh from it.
    pub fn jacobian_cols(&self, z: Var<'g, T>, block: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let (x, _) = self.forward(z)?;
        self.jacobian_cols_of(z, x, block)
    }

    /// As [`jacobian_cols`](Self::jacobian_cols) for an already recorded `x = f(z)`.
    pub fn jacobian_cols_of(&self, z: Var<'g, T>, x: Var<'g, T>, block: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let g = z.graph();
        let d = z.cols();
        block
            .iter()
            .map(|&k| {
                if k >= d {
                    return Err(Error::Partition(format!("index {k} outside latent dim {d}")));
                }
                let e = g.constant(Tensor::from_fn(z.rows(), d, |_, j| if j == k { T::one() } else { T::zero() }));
                Ok(g.jvp(&[x], &[z], &[e])?[0])
            })
            .collect()
    }

    /// Rows `k` of `G = dg/dx` for an already recorded `z = g(x)`, one vjp
    /// each: returns `|block|` values of shape `B x data_dim`.
    pub fn inverse_rows_of(&self, x: Var<'g, T>, z: Var<'g, T>, block: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let g = z.graph();
        let d = z.cols();
        block
            .iter()
            .map(|&k| {
                if k >= d {
                    return Err(Error::Partition(format!("index {k} outside latent dim {d}")));
                }
                let e = g.constant(Tensor::from_fn(z.rows(), d, |_, j| if j == k { T::one() } else { T::zero() }));
                Ok(g.vjp(z, e, &[x])?[0])
            })
            .collect()
    }
}
