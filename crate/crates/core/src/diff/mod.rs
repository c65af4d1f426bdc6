//! A small define-by-run differentiation engine.
//!
//! Computations are recorded into a [`Graph`] as they execute. Forward
//! (jvp) and reverse (vjp) derivatives are themselves expressed as new graph
//! nodes, so a loss built from jvp/vjp results can be differentiated again.
//! This is what the orthogonality regularizers need: they differentiate
//! `log|G_k G_k^T|`, which already contains a vector-Jacobian product, with
//! respect to the flow parameters.

mod graph;
mod program;
mod rules;

pub use graph::{Graph, ProbeCount, Var};
pub(crate) use graph::sigmoid as sigmoid_value;
pub use program::{grad, jacobian, jvp, program, vjp, DiffProgram};
