//! Invertible and injective layers, priors, and their composition.

mod conditioner;
mod coupling;
mod layers;
mod prior;
mod stack;

pub use conditioner::NetSpec;
pub use layers::{FlowLayer, LayerSpec};
pub use prior::{Marginal, Prior};
pub use stack::{ArchSpec, BoundStack, CouplingKind, FlowStack};
