//! Fitting arbitrary targets through the linearization of the network at a
//! full-rank base point, and realizing the fit as a width-doubled network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, norm2, sym_eigen, DenseMatrix, RANK_RELATIVE_THRESHOLD};
use crate::network::{outputs, ArchitectureSpec, Dataset, NetworkState};
use crate::ntk::{jacobian, jacobian_gram};

/// Steps tried by `fit_targets`: `10^-1, 10^-2, …, 10^-8`.
pub const STEP_SCAN: [f64; 8] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCertificate {
    /// Singular values of the `N × p` Jacobian, descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// `N`, the rank needed for the system `J θ̃ = Y` to be solvable for every `Y`.
    pub required_rank: usize,
    pub threshold: f64,
    pub in_rank_set: bool,
}

/// Rank of `J(θ)` from the eigenvalues of `J Jᵀ`.
pub fn certify_rank(state: &NetworkState, dataset: &Dataset) -> Result<RankCertificate> {
    let p = state.parameter_count();
    let n = dataset.len();
    if p < n {
        return Err(Error::Precondition(format!(
            "{p} parameters cannot give rank {n}; the jacobian has at most rank {p}"
        )));
    }
    let gram = jacobian_gram(state, dataset)?;
    let spectrum = sym_eigen(&gram)?;
    let singular_values: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .rev()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    let top = singular_values[0];
    let rank = if top > 0.0 {
        singular_values
            .iter()
            .filter(|&&s| s > RANK_RELATIVE_THRESHOLD * top)
            .count()
    } else {
        0
    };
    Ok(RankCertificate {
        singular_values,
        rank,
        required_rank: n,
        threshold: RANK_RELATIVE_THRESHOLD,
        in_rank_set: rank == n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationTask {
    pub dataset: Dataset,
    pub targets: Vec<f64>,
    pub epsilon: f64,
    pub base: NetworkState,
    /// Set by `fit_targets`; empty before.
    pub direction: Vec<f64>,
    /// Set by `fit_targets`; `None` before.
    pub step: Option<f64>,
}

impl MemorizationTask {
    pub fn new(
        dataset: Dataset,
        targets: Vec<f64>,
        epsilon: f64,
        base: NetworkState,
    ) -> Result<Self> {
        if targets.len() != dataset.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} samples",
                targets.len(),
                dataset.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if base.widths()[0] != dataset.input_dim() {
            return Err(Error::Dimension(format!(
                "network takes {} inputs, samples have {}",
                base.widths()[0],
                dataset.input_dim()
            )));
        }
        Ok(Self {
            dataset,
            targets,
            epsilon,
            base,
            direction: Vec::new(),
            step: None,
        })
    }

    /// `g_h(x) = [f(θ₀ + hθ̃, x) - f(θ₀, x)] / h` at each row of `x`.
    pub fn difference_quotient(&self, h: f64, x: &DenseMatrix) -> Result<Vec<f64>> {
        if self.direction.len() != self.base.parameter_count() {
            return Err(Error::Precondition("no direction fitted yet".into()));
        }
        let moved = outputs(&self.base.perturbed(&self.direction, h)?, x)?;
        let here = outputs(&self.base, x)?;
        Ok(moved.iter().zip(&here).map(|(a, b)| (a - b) / h).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub residual: f64,
    pub chosen_h: f64,
    /// `(h, ‖g_h - Y‖₂)` for every scanned step.
    pub curve: Vec<(f64, f64)>,
    pub success: bool,
    pub certificate: RankCertificate,
}

/// Solves `J(θ₀) θ̃ = Y` for the minimum-norm `θ̃`, scans the step `h` and
/// keeps the one with the smallest residual. Refuses rank-deficient bases.
pub fn fit_targets(task: &mut MemorizationTask) -> Result<FitOutcome> {
    let certificate = certify_rank(&task.base, &task.dataset)?;
    if !certificate.in_rank_set {
        return Err(Error::RankDeficient(Box::new(certificate)));
    }
    let j = jacobian(&task.base, &task.dataset)?;
    task.direction = least_squares(&j, &task.targets)?;

    let mut curve = Vec::with_capacity(STEP_SCAN.len());
    for &h in &STEP_SCAN {
        let g = task.difference_quotient(h, &task.dataset.samples)?;
        let diff: Vec<f64> = g.iter().zip(&task.targets).map(|(a, b)| a - b).collect();
        curve.push((h, norm2(&diff)));
    }
    let (chosen_h, residual) =
        curve
            .iter()
            .copied()
            .fold((STEP_SCAN[0], f64::INFINITY), |best, c| {
                if c.1 < best.1 {
                    c
                } else {
                    best
                }
            });
    task.step = Some(chosen_h);
    Ok(FitOutcome {
        residual,
        chosen_h,
        curve,
        success: residual < task.epsilon,
        certificate,
    })
}

/// The network `[f(θ₀ + hθ̃, ·) - f(θ₀, ·)] / h` with widths
/// `[n_0, 2n_1, …, 2n_{L-1}, 1]`: the first layer stacks both copies side by
/// side, hidden layers are block diagonal and the output layer carries `±1/h`.
pub fn realize_as_network(task: &MemorizationTask, h: f64) -> Result<NetworkState> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {h}"
        )));
    }
    let moved = task.base.perturbed(&task.direction, h)?;
    let base = &task.base;
    let depth = base.depth();
    let widths = base.widths();

    let mut doubled_widths = vec![widths[0]];
    doubled_widths.extend(widths[1..depth].iter().map(|w| 2 * w));
    doubled_widths.push(1);

    let mut weights = Vec::with_capacity(depth);
    if depth == 1 {
        let (a, b) = (moved.weight(1), base.weight(1));
        weights.push(DenseMatrix::from_fn(widths[0], 1, |i, _| {
            (a[(i, 0)] - b[(i, 0)]) / h
        }));
    } else {
        let (a, b) = (moved.weight(1), base.weight(1));
        let n1 = widths[1];
        weights.push(DenseMatrix::from_fn(widths[0], 2 * n1, |i, j| {
            if j < n1 {
                a[(i, j)]
            } else {
                b[(i, j - n1)]
            }
        }));
        for k in 2..depth {
            let (a, b) = (moved.weight(k), base.weight(k));
            let (r, c) = (widths[k - 1], widths[k]);
            weights.push(DenseMatrix::from_fn(2 * r, 2 * c, |i, j| {
                match (i < r, j < c) {
                    (true, true) => a[(i, j)],
                    (false, false) => b[(i - r, j - c)],
                    _ => 0.0,
                }
            }));
        }
        let (a, b) = (moved.weight(depth), base.weight(depth));
        let r = widths[depth - 1];
        weights.push(DenseMatrix::from_fn(2 * r, 1, |i, _| {
            if i < r {
                a[(i, 0)] / h
            } else {
                -b[(i - r, 0)] / h
            }
        }));
    }
    let arch = ArchitectureSpec::new(
        doubled_widths,
        *base.activation(),
        base.arch.init_scales.clone(),
    )?;
    NetworkState::from_weights(arch, weights)
}
