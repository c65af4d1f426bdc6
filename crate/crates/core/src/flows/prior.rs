use rand::Rng;
use rand_distr::{Distribution, StandardNormal as StdNormalDist};
use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One latent coordinate's density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Marginal {
    Normal { mean: f64, std: f64 },
    Mixture { weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64> },
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        match self {
            Marginal::Normal { std, .. } if *std > 0.0 => Ok(()),
            Marginal::Normal { .. } => Err(Error::invalid("normal marginal needs std > 0")),
            Marginal::Mixture { weights, means, stds } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
                    return Err(Error::invalid("mixture marginal needs equally many weights, means and stds"));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("mixture weights must be nonnegative and sum to 1"));
                }
                if stds.iter().any(|&s| s <= 0.0) {
                    return Err(Error::invalid("mixture stds must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn log_pdf(&self, z: f64) -> f64 {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        match self {
            Marginal::Normal { mean, std } => -0.5 * ((z - mean) / std).powi(2) - std.ln() - half_log_2pi,
            Marginal::Mixture { weights, means, stds } => {
                let terms: Vec<f64> = (0..weights.len())
                    .map(|i| weights[i].ln() - 0.5 * ((z - means[i]) / stds[i]).powi(2) - stds[i].ln() - half_log_2pi)
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = StdNormalDist.sample(rng);
        match self {
            Marginal::Normal { mean, std } => mean + std * e,
            Marginal::Mixture { weights, means, stds } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                means[pick] + stds[pick] * e
            }
        }
    }

    /// Per-row log density of a `B x 1` column, recorded in the graph.
    fn record<'g, T: Scalar>(&self, z: Var<'g, T>) -> Var<'g, T> {
        let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        match self {
            Marginal::Normal { mean, std } => {
                let u = (z - T::lit(*mean)) * T::lit(1.0 / std);
                u.square().scale(T::lit(-0.5)).offset(-T::lit(std.ln()) - half_log_2pi)
            }
            Marginal::Mixture { weights, means, stds } => {
                let g = z.graph();
                let terms: Vec<Var<'g, T>> = (0..weights.len())
                    .map(|i| {
                        let u = (z - T::lit(means[i])) * T::lit(1.0 / stds[i]);
                        u.square().scale(T::lit(-0.5)).offset(T::lit(weights[i].ln() - stds[i].ln()) - half_log_2pi)
                    })
                    .collect();
                // a constant shift keeps the exponentials in range without changing derivatives
                let shift = Tensor::from_fn(z.rows(), 1, |r, _| terms.iter().map(|t| t.value()[(r, 0)]).fold(T::neg_infinity(), T::max));
                let shift = g.constant(shift);
                let mut acc: Option<Var<'g, T>> = None;
                for t in &terms {
                    let e = (*t - shift).exp();
                    acc = Some(match acc {
                        Some(a) => a + e,
                        None => e,
                    });
                }
                acc.expect("mixture has components").ln() + shift
            }
        }
    }
}

/// Factorized latent density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    #[default]
    StandardNormal,
    Factorized { marginals: Vec<Marginal> },
}

impl Prior {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Prior::StandardNormal => Ok(()),
            Prior::Factorized { marginals } => {
                if marginals.len() != dim {
                    return Err(Error::invalid(format!("prior has {} marginals for latent dim {dim}", marginals.len())));
                }
                marginals.iter().try_for_each(Marginal::validate)
            }
        }
    }

    /// Log density of each coordinate separately, recorded: `B x d`.
    pub fn record_dims<'g, T: Scalar>(&self, z: Var<'g, T>) -> Var<'g, T> {
        match self {
            Prior::StandardNormal => {
                let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
                z.square().scale(T::lit(-0.5)).offset(-half_log_2pi)
            }
            Prior::Factorized { marginals } => {
                let cols: Vec<Var<'g, T>> = marginals.iter().enumerate().map(|(j, m)| m.record(z.col(j))).collect();
                Var::concat_cols(&cols)
            }
        }
    }

    /// `log p_k(z_k)` for the coordinates in `block`, recorded: `B x 1`.
    pub fn record_block<'g, T: Scalar>(&self, z: Var<'g, T>, block: &[usize]) -> Var<'g, T> {
        self.record_dims(z).select_cols(block).sum_cols()
    }

    pub fn log_pdf_dim(&self, j: usize, z: f64) -> f64 {
        match self {
            Prior::StandardNormal => Marginal::Normal { mean: 0.0, std: 1.0 }.log_pdf(z),
            Prior::Factorized { marginals } => marginals[j].log_pdf(z),
        }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, n: usize, dim: usize, rng: &mut R) -> Tensor<T> {
        let unit = Marginal::Normal { mean: 0.0, std: 1.0 };
        Tensor::from_fn(n, dim, |_, j| {
            let m = match self {
                Prior::StandardNormal => &unit,
                Prior::Factorized { marginals } => &marginals[j],
            };
            T::lit(m.sample(rng))
        })
    }
}
