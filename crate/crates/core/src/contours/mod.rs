//! Contour log-likelihoods, mutual information between contours, principal
//! components and manifolds, and the manifold-corrected density.

pub mod cookbook;
pub mod gram;
pub mod partition;
pub mod point;
pub mod trace;

pub use cookbook::{cookbook_check, CookbookRow};
pub use partition::{Partition, Tree};
pub use point::{
    contour_loglik, contour_loglik_hat, evaluate_data, evaluate_latent, jacobian_block_cols, jacobian_block_rows, manifold_corrected_logpdf, partition_pmi, pmi,
    pmi_hat, principal_frame, principal_frame_of, similarity_matrix, tree_decompose, ContourPoint, ContourReport, ManifoldDensity, PrincipalFrame,
    TreeDecomposition,
};
pub use trace::{trace_principal_manifold, TracePath, TracePoint};
