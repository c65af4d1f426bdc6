#![allow(dead_code)]

use nalgebra::DMatrix;
use pflow::flows::{ArchSpec, LayerSpec, NetSpec, Prior};
use pflow::{FlowStack, Tensor};

pub const NET: NetSpec = NetSpec { hidden: 8, blocks: 1 };

/// One layer of each square kind, in an order that keeps every layer's
/// input in its domain.
pub fn mixed_layers(dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::ActNorm { dim },
        LayerSpec::InvertibleLinear { dim, perm: vec![], sign: vec![] },
        LayerSpec::AffineCoupling { dim, parity: 0, net: NET },
        LayerSpec::RqSplineCoupling { dim, parity: 1, bins: 8, bound: 3.0, net: NET },
        LayerSpec::MixtureCdfCoupling { dim, parity: 0, components: 3, logit_output: true, net: NET },
        LayerSpec::ShiftScale { dim },
    ]
}

pub fn mixed_stack(dim: usize, seed: u64) -> FlowStack {
    let arch = ArchSpec { latent_dim: dim, data_dim: dim, layers: mixed_layers(dim), prior: Prior::StandardNormal };
    FlowStack::randomized(arch, seed, 0.3).unwrap()
}

pub fn single_layer(spec: LayerSpec, seed: u64, scale: f64) -> FlowStack {
    let d = spec.in_dim();
    let arch = ArchSpec { latent_dim: d, data_dim: spec.out_dim(), layers: vec![spec], prior: Prior::StandardNormal };
    FlowStack::randomized(arch, seed, scale).unwrap()
}

pub fn na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Central-difference Jacobian of a row map at a `1 x n` point.
pub fn fd_jacobian(f: impl Fn(&Tensor) -> Tensor, z: &Tensor, h: f64) -> Tensor {
    let n = z.cols();
    let m = f(z).cols();
    let mut j = Tensor::zeros(m, n);
    for c in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[(0, c)] += h;
        zm[(0, c)] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for r in 0..m {
            j[(r, c)] = (fp[(0, r)] - fm[(0, r)]) / (2.0 * h);
        }
    }
    j
}

/// Small deterministic normal draws for test inputs.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

/// Richardson-extrapolated central differences (fourth order in `h`), for
/// oracles that must reach ~1e-8 on strongly curved maps.
pub fn fd_jacobian_rich(f: impl Fn(&Tensor) -> Tensor, z: &Tensor, h: f64) -> Tensor {
    let a = fd_jacobian(&f, z, h);
    let b = fd_jacobian(&f, z, h / 2.0);
    b.scale(4.0 / 3.0).sub(&a.scale(1.0 / 3.0))
}

/// Central-difference gradient of `f` over a stack's flat parameters.
pub fn fd_param_grad(stack: &FlowStack, f: impl Fn(&FlowStack) -> f64, h: f64) -> Vec<f64> {
    let base = stack.params_flat();
    let mut s = stack.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            s.set_params_flat(&p).unwrap();
            let fp = f(&s);
            p[i] = base[i] - h;
            s.set_params_flat(&p).unwrap();
            let fm = f(&s);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Worst violation of `|a - b| <= rel |b| + abs` over components, in units of
/// the allowance (pass iff <= 1).
pub fn grad_mismatch(a: &[f64], b: &[f64], rel: f64, abs: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (rel * y.abs() + abs)).fold(0.0, f64::max)
}

/// A stack `x = A (z, 0)` from a square `A` whose first `latent` columns span
/// the manifold.
pub fn injective_linear(a: &Tensor, latent: usize) -> FlowStack {
    let lin = FlowStack::linear(a).unwrap();
    let d = a.rows();
    let layers = vec![LayerSpec::Slice { latent_dim: latent, data_dim: d }, lin.layers()[0].spec.clone()];
    let arch = ArchSpec { latent_dim: latent, data_dim: d, layers, prior: Prior::StandardNormal };
    FlowStack::from_params(arch, &lin.params_flat()).unwrap()
}
