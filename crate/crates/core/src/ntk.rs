//! Empirical neural tangent kernel `K = J Jᵀ`.
//!
//! The kernel is assembled layer by layer as
//! `K = Σ_{k=0}^{L-1} (F_k F_kᵀ) ∘ (G_{k+1} G_{k+1}ᵀ)`, where `F_k` stacks the
//! layer-`k` features of every sample and row `i` of `G_k` is the output
//! sensitivity `Σ_k W_{k+1} Σ_{k+1} ⋯ W_L` evaluated at `x_i`. The explicit
//! Jacobian route in [`jacobian_gram`] is kept separate and serves as the
//! oracle for the decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, DenseMatrix, Spectrum};
use crate::network::{forward_batch, outputs, Dataset, ForwardTrace, NetworkState};

/// Largest parameter count the explicit Jacobian routes accept.
pub const MAX_ORACLE_PARAMETERS: usize = 10_000_000;

/// Eigenvalues in `(-NUMERICAL_ZERO * λ_max, 0)` are round-off of a PSD kernel.
pub const NUMERICAL_ZERO: f64 = 1e-8;

/// Sensitivity matrices `G_1 .. G_L`, each `N × n_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GMatrixSet {
    matrices: Vec<DenseMatrix>,
}

impl GMatrixSet {
    /// `G_k` for `k` in `1..=L`.
    pub fn g(&self, k: usize) -> &DenseMatrix {
        &self.matrices[k - 1]
    }

    pub fn depth(&self) -> usize {
        self.matrices.len()
    }

    pub fn sample_count(&self) -> usize {
        self.matrices[0].rows()
    }
}

/// Builds every `G_k` by propagating the output sensitivity backwards one
/// matrix-vector product at a time. `G_L` is the all-ones column, which makes
/// the decomposition reproduce `J Jᵀ` exactly.
pub fn build_g_matrices(state: &NetworkState, traces: &[ForwardTrace]) -> Result<GMatrixSet> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let depth = state.depth();
    let widths = state.widths();
    for t in traces {
        check_trace(state, t)?;
    }
    let n = traces.len();
    let mut matrices: Vec<DenseMatrix> = (1..=depth)
        .map(|k| DenseMatrix::zeros(n, widths[k]))
        .collect();

    for (i, trace) in traces.iter().enumerate() {
        let mut delta = vec![1.0];
        matrices[depth - 1].row_mut(i).copy_from_slice(&delta);
        for k in (1..depth).rev() {
            let mut next = state.weight(k + 1).matvec(&delta)?;
            for (d, s) in next.iter_mut().zip(trace.sigma(k)) {
                *d *= s;
            }
            matrices[k - 1].row_mut(i).copy_from_slice(&next);
            delta = next;
        }
    }
    Ok(GMatrixSet { matrices })
}

fn check_trace(state: &NetworkState, trace: &ForwardTrace) -> Result<()> {
    let widths = state.widths();
    if trace.depth() != state.depth() {
        return Err(Error::Dimension(format!(
            "trace of depth {} for a network of depth {}",
            trace.depth(),
            state.depth()
        )));
    }
    for (k, &w) in widths.iter().enumerate() {
        if trace.feature(k).len() != w {
            return Err(Error::Dimension(format!(
                "trace feature {k} has length {}, expected {w}",
                trace.feature(k).len()
            )));
        }
    }
    Ok(())
}

/// `F_k`: one row per sample.
pub fn feature_matrix(traces: &[ForwardTrace], k: usize) -> Result<DenseMatrix> {
    let width = traces.first().map_or(0, |t| t.feature(k).len());
    let mut data = Vec::with_capacity(traces.len() * width);
    for t in traces {
        if t.feature(k).len() != width {
            return Err(Error::Dimension("traces disagree on feature width".into()));
        }
        data.extend_from_slice(t.feature(k));
    }
    DenseMatrix::from_vec(traces.len(), width, data)
}

/// Kernel together with its per-layer Hadamard summands.
#[derive(Debug, Clone)]
pub struct NtkResult {
    pub kernel: DenseMatrix,
    /// `layer_terms[k] = feature_grams[k] ∘ sensitivity_grams[k]`.
    pub layer_terms: Vec<DenseMatrix>,
    /// `F_k F_kᵀ` for `k` in `0..L`.
    pub feature_grams: Vec<DenseMatrix>,
    /// `G_{k+1} G_{k+1}ᵀ` for `k` in `0..L`.
    pub sensitivity_grams: Vec<DenseMatrix>,
    pub spectrum: Spectrum,
}

impl NtkResult {
    pub fn from_grams(
        feature_grams: Vec<DenseMatrix>,
        sensitivity_grams: Vec<DenseMatrix>,
    ) -> Result<Self> {
        if feature_grams.is_empty() || feature_grams.len() != sensitivity_grams.len() {
            return Err(Error::Dimension(format!(
                "{} feature grams vs {} sensitivity grams",
                feature_grams.len(),
                sensitivity_grams.len()
            )));
        }
        let layer_terms = feature_grams
            .iter()
            .zip(&sensitivity_grams)
            .map(|(f, g)| f.hadamard(g))
            .collect::<Result<Vec<_>>>()?;
        let mut kernel = layer_terms[0].clone();
        for term in &layer_terms[1..] {
            kernel.add_assign(term)?;
        }
        let spectrum = sym_eigen(&kernel)?;
        Ok(Self {
            kernel,
            layer_terms,
            feature_grams,
            sensitivity_grams,
            spectrum,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.kernel.rows()
    }

    pub fn lambda_min(&self) -> f64 {
        self.spectrum.min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.spectrum.max()
    }

    pub fn lambda_min_clamped(&self) -> f64 {
        self.lambda_min().max(0.0)
    }

    /// True when the smallest eigenvalue is nonnegative up to round-off.
    pub fn is_psd(&self) -> bool {
        self.lambda_min() >= -NUMERICAL_ZERO * self.lambda_max().max(0.0)
    }
}

pub fn assemble_ntk(traces: &[ForwardTrace], g: &GMatrixSet) -> Result<NtkResult> {
    if traces.len() != g.sample_count() {
        return Err(Error::Dimension(format!(
            "{} traces vs {} sensitivity rows",
            traces.len(),
            g.sample_count()
        )));
    }
    let depth = g.depth();
    let mut feature_grams = Vec::with_capacity(depth);
    let mut sensitivity_grams = Vec::with_capacity(depth);
    for k in 0..depth {
        let f = feature_matrix(traces, k)?;
        let gk = g.g(k + 1);
        if f.rows() != gk.rows() {
            return Err(Error::Dimension(
                "feature and sensitivity row counts differ".into(),
            ));
        }
        feature_grams.push(f.gram_rows());
        sensitivity_grams.push(gk.gram_rows());
    }
    NtkResult::from_grams(feature_grams, sensitivity_grams)
}

/// Forward passes, sensitivities and assembly in one call.
pub fn empirical_ntk(state: &NetworkState, dataset: &Dataset) -> Result<NtkResult> {
    let traces = forward_batch(state, &dataset.samples)?;
    let g = build_g_matrices(state, &traces)?;
    assemble_ntk(&traces, &g)
}

fn check_oracle_size(state: &NetworkState) -> Result<()> {
    let count = state.parameter_count();
    if count > MAX_ORACLE_PARAMETERS {
        return Err(Error::TooManyParameters {
            count,
            limit: MAX_ORACLE_PARAMETERS,
        });
    }
    Ok(())
}

/// The `N × p` Jacobian of the outputs with respect to `θ`, one reverse-mode
/// sweep per sample. Column order follows [`NetworkState::parameters`].
pub fn jacobian(state: &NetworkState, dataset: &Dataset) -> Result<DenseMatrix> {
    check_oracle_size(state)?;
    let widths = state.widths();
    if dataset.input_dim() != widths[0] {
        return Err(Error::Dimension(format!(
            "dataset has dimension {}, network expects {}",
            dataset.input_dim(),
            widths[0]
        )));
    }
    let depth = state.depth();
    let act = state.activation();
    let p = state.parameter_count();
    let offsets: Vec<usize> = widths
        .windows(2)
        .scan(0, |acc, w| {
            let start = *acc;
            *acc += w[0] * w[1];
            Some(start)
        })
        .collect();

    let mut jac = DenseMatrix::zeros(dataset.len(), p);
    for i in 0..dataset.len() {
        // Own forward sweep, keeping activations and slopes per layer.
        let mut acts: Vec<Vec<f64>> = vec![dataset.sample(i).to_vec()];
        let mut slopes: Vec<Vec<f64>> = vec![Vec::new()];
        for k in 1..depth {
            let w = state.weight(k);
            let prev = &acts[k - 1];
            let mut value = vec![0.0; widths[k]];
            let mut slope = vec![0.0; widths[k]];
            for b in 0..widths[k] {
                let pre: f64 = (0..widths[k - 1]).map(|a| w[(a, b)] * prev[a]).sum();
                let (v, d) = act.eval(pre);
                value[b] = v;
                slope[b] = d;
            }
            acts.push(value);
            slopes.push(slope);
        }

        let row = jac.row_mut(i);
        // d f_L / d (W_k)_{ab} = f_{k-1,a} · delta_{k,b}
        let mut delta = vec![1.0];
        for k in (1..=depth).rev() {
            let n_in = widths[k - 1];
            let n_out = widths[k];
            let block = &mut row[offsets[k - 1]..offsets[k - 1] + n_in * n_out];
            for a in 0..n_in {
                for b in 0..n_out {
                    block[a * n_out + b] = acts[k - 1][a] * delta[b];
                }
            }
            if k > 1 {
                let w = state.weight(k);
                delta = (0..n_in)
                    .map(|a| {
                        slopes[k - 1][a] * (0..n_out).map(|b| w[(a, b)] * delta[b]).sum::<f64>()
                    })
                    .collect();
            }
        }
    }
    Ok(jac)
}

/// `J Jᵀ` from the explicit Jacobian.
pub fn jacobian_gram(state: &NetworkState, dataset: &Dataset) -> Result<DenseMatrix> {
    Ok(jacobian(state, dataset)?.gram_rows())
}

/// Jacobian by central differences of the network output, step `h` on every
/// parameter.
pub fn finite_difference_jacobian(
    state: &NetworkState,
    dataset: &Dataset,
    h: f64,
) -> Result<DenseMatrix> {
    check_oracle_size(state)?;
    let theta = state.parameters();
    let p = theta.len();
    let mut jac = DenseMatrix::zeros(dataset.len(), p);
    let mut probe = theta.clone();
    for j in 0..p {
        probe[j] = theta[j] + h;
        let plus = outputs(&state.with_parameters(&probe)?, &dataset.samples)?;
        probe[j] = theta[j] - h;
        let minus = outputs(&state.with_parameters(&probe)?, &dataset.samples)?;
        probe[j] = theta[j];
        for i in 0..dataset.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Weyl and Schur lower bounds on the smallest kernel eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkDiagnostics {
    pub lambda_min: f64,
    pub lambda_min_clamped: f64,
    /// `λ_min(term_k)` for each layer term.
    pub term_lambda_min: Vec<f64>,
    /// `λ_min(F_k F_kᵀ) · min_i ‖(G_{k+1})_{i:}‖²`.
    pub schur_bounds: Vec<f64>,
    pub weyl_sum: f64,
    pub schur_sum: f64,
    pub slack: f64,
    /// `λ_min(K) ≥ Σ_k λ_min(term_k)` within slack.
    pub weyl_holds: bool,
    /// `λ_min(term_k) ≥ SchurBound_k` for every `k`, within slack.
    pub schur_holds: bool,
}

impl NtkDiagnostics {
    pub fn chain_holds(&self) -> bool {
        self.weyl_holds && self.schur_holds && self.weyl_sum >= self.schur_sum - self.slack
    }
}

/// Evaluates the inequality chain `λ_min(K) ≥ Σ λ_min(term_k) ≥ Σ SchurBound_k`.
/// The slack is `1e-8 · max(1, λ_max(K))`.
pub fn ntk_diagnostics(result: &NtkResult) -> Result<NtkDiagnostics> {
    let lambda_min = result.lambda_min();
    let slack = 1e-8 * result.lambda_max().abs().max(1.0);
    let mut term_lambda_min = Vec::with_capacity(result.layer_terms.len());
    let mut schur_bounds = Vec::with_capacity(result.layer_terms.len());
    for ((term, fgram), ggram) in result
        .layer_terms
        .iter()
        .zip(&result.feature_grams)
        .zip(&result.sensitivity_grams)
    {
        term_lambda_min.push(sym_eigen(term)?.min());
        let min_row_norm_sq = ggram.diagonal().into_iter().fold(f64::INFINITY, f64::min);
        schur_bounds.push(sym_eigen(fgram)?.min() * min_row_norm_sq);
    }
    let weyl_sum: f64 = term_lambda_min.iter().sum();
    let schur_sum: f64 = schur_bounds.iter().sum();
    let weyl_holds = lambda_min >= weyl_sum - slack;
    let schur_holds = term_lambda_min
        .iter()
        .zip(&schur_bounds)
        .all(|(t, s)| *t >= *s - slack);
    Ok(NtkDiagnostics {
        lambda_min,
        lambda_min_clamped: lambda_min.max(0.0),
        term_lambda_min,
        schur_bounds,
        weyl_sum,
        schur_sum,
        slack,
        weyl_holds,
        schur_holds,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::network::{
        init_network, sample_dataset, ActivationSpec, ArchitectureSpec, SamplerKind,
    };

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn zero_weight_cosine_kernel_is_rank_one() {
        let arch =
            ArchitectureSpec::new(vec![3, 5, 4, 1], ActivationSpec::cosine(2.0), vec![0.0; 3])
                .unwrap();
        let net = init_network(&arch, 0).unwrap();
        let ds = sample_dataset(3, 3, SamplerKind::GaussianIid, 1).unwrap();
        let traces = forward_batch(&net, &ds.samples).unwrap();
        let g = build_g_matrices(&net, &traces).unwrap();
        assert_eq!(g.g(1).max_abs(), 0.0);
        assert_eq!(g.g(2).max_abs(), 0.0);
        assert_eq!(g.g(3).as_slice(), &[1.0, 1.0, 1.0]);
        let ntk = assemble_ntk(&traces, &g).unwrap();
        assert!(ntk.kernel.as_slice().iter().all(|&v| v == 4.0));
        assert!(ntk.lambda_min().abs() < 1e-12);
        assert_eq!(ntk.lambda_min_clamped(), ntk.lambda_min().max(0.0));
    }

    #[test]
    fn linear_network_kernel_is_data_gram() {
        let arch =
            ArchitectureSpec::new(vec![4, 1], ActivationSpec::identity(), vec![1.0]).unwrap();
        let net = init_network(&arch, 2).unwrap();
        let ds = sample_dataset(4, 3, SamplerKind::GaussianIid, 3).unwrap();
        let xxt = ds.samples.gram_rows();
        assert_eq!(empirical_ntk(&net, &ds).unwrap().kernel, xxt);
        assert_eq!(jacobian_gram(&net, &ds).unwrap(), xxt);
    }

    #[test]
    fn hand_computed_sensitivity() {
        let arch =
            ArchitectureSpec::new(vec![1, 1, 1], ActivationSpec::cosine(2.0), vec![1.0, 1.0])
                .unwrap();
        let net = NetworkState::from_weights(
            arch,
            vec![
                DenseMatrix::from_vec(1, 1, vec![0.5]).unwrap(),
                DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap(),
            ],
        )
        .unwrap();
        let traces = vec![crate::network::forward(&net, &[PI]).unwrap()];
        let g = build_g_matrices(&net, &traces).unwrap();
        // -s sin(s g_1) W_2 = -2 sin(π) 3
        assert!(g.g(1)[(0, 0)].abs() < 1e-14);
        assert!((g.g(1)[(0, 0)] - (-2.0 * PI.sin() * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn decomposition_matches_jacobian_gram() {
        let arch = ArchitectureSpec::he(vec![2, 3, 3, 1], ActivationSpec::cosine(3.0)).unwrap();
        let net = init_network(&arch, 17).unwrap();
        let ds = sample_dataset(2, 4, SamplerKind::GaussianIid, 17).unwrap();
        let ntk = empirical_ntk(&net, &ds).unwrap();
        let oracle = jacobian_gram(&net, &ds).unwrap();
        assert!(rel_err(&ntk.kernel, &oracle) <= 1e-10);
    }

    #[test]
    fn g_rows_are_backpropagated_sensitivities() {
        let arch = ArchitectureSpec::he(vec![3, 4, 5, 2, 1], ActivationSpec::sine(2.0)).unwrap();
        let net = init_network(&arch, 5).unwrap();
        let ds = sample_dataset(3, 3, SamplerKind::GaussianIid, 6).unwrap();
        let traces = forward_batch(&net, &ds.samples).unwrap();
        let g = build_g_matrices(&net, &traces).unwrap();
        let jac = jacobian(&net, &ds).unwrap();
        // The W_k block of row i is f_{k-1}(x_i) ⊗ (G_k)_{i:}; its first
        // n_k entries divided by f_{k-1,0} recover the G row.
        let widths = net.widths();
        let mut offset = 0;
        for k in 1..=net.depth() {
            for i in 0..ds.len() {
                let f0 = traces[i].feature(k - 1)[0];
                for b in 0..widths[k] {
                    let expected = jac[(i, offset + b)];
                    let got = f0 * g.g(k)[(i, b)];
                    assert!((expected - got).abs() <= 1e-10 * (1.0 + expected.abs()));
                }
            }
            offset += widths[k - 1] * widths[k];
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let arch = ArchitectureSpec::he(vec![2, 3, 1], ActivationSpec::relu()).unwrap();
        let other = ArchitectureSpec::he(vec![2, 4, 1], ActivationSpec::relu()).unwrap();
        let net = init_network(&arch, 1).unwrap();
        let net2 = init_network(&other, 1).unwrap();
        let ds = sample_dataset(2, 2, SamplerKind::GaussianIid, 1).unwrap();
        let traces = forward_batch(&net2, &ds.samples).unwrap();
        assert!(build_g_matrices(&net, &traces).is_err());
        let g = build_g_matrices(&net2, &traces).unwrap();
        assert!(assemble_ntk(&traces[..1], &g).is_err());
        let wrong_dim = sample_dataset(3, 2, SamplerKind::GaussianIid, 1).unwrap();
        assert!(jacobian(&net, &wrong_dim).is_err());
    }

    #[test]
    fn diagonal_kernel_diagnostics() {
        let f = vec![
            DenseMatrix::from_diagonal(&[2.0, 5.0]),
            DenseMatrix::from_diagonal(&[1.0, 3.0]),
        ];
        let g = vec![
            DenseMatrix::from_diagonal(&[1.0, 1.0]),
            DenseMatrix::from_diagonal(&[4.0, 2.0]),
        ];
        let result = NtkResult::from_grams(f, g).unwrap();
        // kernel = diag(2 + 4, 5 + 6)
        let d = ntk_diagnostics(&result).unwrap();
        assert!((d.lambda_min - 6.0).abs() < 1e-14);
        assert_eq!(d.term_lambda_min.len(), 2);
        assert!((d.term_lambda_min[0] - 2.0).abs() < 1e-14);
        assert!((d.term_lambda_min[1] - 4.0).abs() < 1e-14);
        assert!((d.schur_bounds[0] - 2.0).abs() < 1e-14);
        assert!((d.schur_bounds[1] - 2.0).abs() < 1e-14);
        assert!(d.chain_holds());
    }

    #[test]
    fn zero_weight_diagnostics() {
        let arch =
            ArchitectureSpec::new(vec![3, 4, 1], ActivationSpec::cosine(1.0), vec![0.0, 0.0])
                .unwrap();
        let net = init_network(&arch, 0).unwrap();
        let ds = sample_dataset(3, 3, SamplerKind::GaussianIid, 2).unwrap();
        let d = ntk_diagnostics(&empirical_ntk(&net, &ds).unwrap()).unwrap();
        assert!(d.schur_bounds.iter().all(|b| b.abs() < 1e-12));
        assert!(d.lambda_min.abs() < 1e-12);
        assert!(d.chain_holds());
    }

    #[test]
    fn oracle_size_guard() {
        let arch =
            ArchitectureSpec::new(vec![4000, 2600, 1], ActivationSpec::relu(), vec![0.0, 0.0])
                .unwrap();
        let net = NetworkState::from_weights(
            arch,
            vec![DenseMatrix::zeros(4000, 2600), DenseMatrix::zeros(2600, 1)],
        )
        .unwrap();
        let ds = sample_dataset(4000, 1, SamplerKind::GaussianIid, 0).unwrap();
        assert!(matches!(
            jacobian(&net, &ds),
            Err(Error::TooManyParameters { .. })
        ));
    }
}
