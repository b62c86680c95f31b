//! Empirical neural tangent kernels of finite-width coordinate networks with
//! periodic activations, together with the layerwise quantities that control
//! their smallest eigenvalue.
//!
//! The kernel of an `L`-layer network `f(x) = W_Lᵀ φ(W_{L-1}ᵀ ⋯ φ(W_1ᵀ x))`
//! on `N` samples is `K = J Jᵀ`, assembled here layer by layer as
//! `Σ_k (F_k F_kᵀ) ∘ (G_{k+1} G_{k+1}ᵀ)` and checked against the explicit
//! Jacobian.

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod memorization;
pub mod network;
pub mod ntk;
pub mod probes;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SlopeFit, Spectrum};
pub use memorization::{
    certify_rank, fit_targets, realize_as_network, MemorizationTask, RankCertificate,
};
pub use network::{
    forward, init_network, sample_dataset, ActivationKind, ActivationSpec, ArchitectureSpec,
    Dataset, InitMode, NetworkState, SamplerKind,
};
pub use ntk::{empirical_ntk, jacobian, jacobian_gram, ntk_diagnostics, NtkResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
