use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{sym_eigen, DenseMatrix};
use crate::network::{forward_batch, Dataset, ForwardTrace, NetworkState};
use crate::ntk::{feature_matrix, ntk_diagnostics, NtkResult};
use crate::probes::{gershgorin_bounds, probe_centred_features};

/// Inequalities that must hold for every network and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceChecks {
    /// `λ_min(K) ≥ Σ λ_min(term_k) ≥ Σ Schur bound_k`.
    pub weyl_schur: bool,
    /// Gershgorin bracket contains `λ_min` for the kernel and every feature Gram.
    pub gershgorin: bool,
    /// Centred-feature inequality per hidden layer; `None` where `‖μ‖ ≈ 0`.
    pub centred: Vec<Option<bool>>,
    /// Every activation derivative within the activation's bound.
    pub derivative_bound: bool,
}

impl InstanceChecks {
    pub fn all_hold(&self) -> bool {
        self.weyl_schur
            && self.gershgorin
            && self.derivative_bound
            && !self.centred.contains(&Some(false))
    }
}

pub fn derivatives_bounded(state: &NetworkState, traces: &[ForwardTrace]) -> bool {
    let bound = state.activation().derivative_bound();
    traces
        .iter()
        .all(|t| (1..state.depth()).all(|k| t.sigma(k).iter().all(|v| v.abs() <= bound)))
}

fn gershgorin_contains(m: &DenseMatrix) -> Result<bool> {
    let (lo, hi) = gershgorin_bounds(m)?;
    let spectrum = sym_eigen(m)?;
    let slack = 1e-12 * m.max_abs() * m.rows() as f64;
    Ok(lo <= spectrum.min() + slack && spectrum.max() <= hi + slack)
}

/// Runs every check on one instance whose kernel is already assembled.
pub fn check_with_kernel(
    state: &NetworkState,
    dataset: &Dataset,
    kernel: &NtkResult,
    mean_samples: usize,
) -> Result<InstanceChecks> {
    let diag = ntk_diagnostics(kernel)?;
    let traces = forward_batch(state, &dataset.samples)?;
    let mut gershgorin = gershgorin_contains(&kernel.kernel)?;
    let mut centred = Vec::new();
    for k in 1..state.depth() {
        gershgorin &= gershgorin_contains(&feature_matrix(&traces, k)?.gram_rows())?;
        let probe = probe_centred_features(state, dataset, k, mean_samples)?;
        gershgorin &= gershgorin_contains(&probe.centred_gram)?;
        centred.push(probe.inequality_holds());
    }
    Ok(InstanceChecks {
        weyl_schur: diag.chain_holds(),
        gershgorin,
        centred,
        derivative_bound: derivatives_bounded(state, &traces),
    })
}

pub fn check_instance(
    state: &NetworkState,
    dataset: &Dataset,
    mean_samples: usize,
) -> Result<InstanceChecks> {
    let kernel = crate::ntk::empirical_ntk(state, dataset)?;
    check_with_kernel(state, dataset, &kernel, mean_samples)
}
