//! Monte Carlo measurements of the layerwise quantities that control the
//! kernel spectrum: feature norms, activation-derivative norms, backward
//! chain products, feature-matrix singular values, centred features and
//! input-Jacobian (Lipschitz) norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    loglog_slope, min_singular_value, operator_norm, operator_norm_of, sym_eigen, DenseMatrix,
    LinearOperator, SlopeFit,
};
use crate::network::{
    forward, forward_batch, init_network, sample_dataset, sample_inputs, ActivationSpec,
    ArchitectureSpec, Dataset, ForwardTrace, InitMode, NetworkState, SamplerKind,
};
use crate::ntk::feature_matrix;
use crate::rng::{GaussianSource, Stream};
use crate::theory::{lemma_scaling_predictions, ScalingKind};

/// Power-iteration settings for operator norms taken by the probes.
pub const OPERATOR_NORM_MAX_ITERS: usize = 5_000;
pub const OPERATOR_NORM_REL_TOL: f64 = 1e-10;

/// Default number of fresh samples behind the Monte Carlo feature mean.
pub const DEFAULT_MEAN_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantityKind {
    FeatureNorm,
    SigmaFrobenius,
    ChainProduct,
    GRowNorm,
    OperatorNormChain,
    FeatureSigmaMin,
}

impl QuantityKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantityKind::FeatureNorm => "feature_norm",
            QuantityKind::SigmaFrobenius => "sigma_frobenius",
            QuantityKind::ChainProduct => "chain_product",
            QuantityKind::GRowNorm => "g_row_norm",
            QuantityKind::OperatorNormChain => "operator_norm_chain",
            QuantityKind::FeatureSigmaMin => "feature_sigma_min",
        }
    }
}

/// Network family and sampling shared by all trials of a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetup {
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
    pub init: InitMode,
    pub sampler: SamplerKind,
    pub trials: usize,
    pub seed: u64,
}

impl ProbeSetup {
    fn arch_with(&self, sweep: &WidthSweep, value: usize) -> Result<ArchitectureSpec> {
        let mut widths = self.widths.clone();
        widths[sweep.layer] = value;
        ArchitectureSpec::with_init(widths, self.activation, &self.init)
    }

    /// Seed of trial `t`; every sweep point reuses the same trial seeds.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

/// Values taken by one width while the others stay fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthSweep {
    pub layer: usize,
    pub values: Vec<usize>,
}

impl WidthSweep {
    pub fn new(layer: usize, values: Vec<usize>) -> Self {
        Self { layer, values }
    }

    pub fn name(&self) -> String {
        format!("n{}", self.layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub quantity: QuantityKind,
    pub layer: usize,
    pub sweep_variable: String,
    pub sweep_values: Vec<f64>,
    /// Mean over trials, one per sweep point.
    pub measured: Vec<f64>,
    pub trial_std: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Raw per-trial values, `trial_values[point][trial]`.
    pub trial_values: Vec<Vec<f64>>,
    /// `None` when fewer than two sweep points have a positive mean.
    pub fitted_slope: Option<SlopeFit>,
}

impl ProbeResult {
    pub fn standard_error(&self, point: usize) -> f64 {
        self.trial_std[point] / (self.trial_values[point].len() as f64).sqrt()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shared driver: for each sweep point and trial, draws weights and data from
/// the trial seed and records `measure(state, dataset)`.
fn sweep_probe(
    setup: &ProbeSetup,
    sweep: &WidthSweep,
    n_samples: usize,
    quantity: QuantityKind,
    prediction: ScalingKind,
    mut measure: impl FnMut(&NetworkState, &Dataset) -> Result<f64>,
) -> Result<ProbeResult> {
    if setup.trials == 0 {
        return Err(Error::InvalidInput("probes need at least one trial".into()));
    }
    if sweep.values.is_empty() || sweep.layer >= setup.widths.len() {
        return Err(Error::InvalidInput(format!(
            "bad sweep over layer {}",
            sweep.layer
        )));
    }
    let s = setup.activation.frequency;
    let mut measured = Vec::new();
    let mut trial_std = Vec::new();
    let mut predicted = Vec::new();
    let mut trial_values = Vec::new();
    for &value in &sweep.values {
        let arch = setup.arch_with(sweep, value)?;
        let mut values = Vec::with_capacity(setup.trials);
        for t in 0..setup.trials {
            let seed = setup.trial_seed(t);
            let state = init_network(&arch, seed)?;
            let data = sample_dataset(arch.input_dim(), n_samples, setup.sampler, seed)?;
            values.push(measure(&state, &data)?);
        }
        let (m, sd) = mean_std(&values);
        measured.push(m);
        trial_std.push(sd);
        predicted.push(lemma_scaling_predictions(&arch, s, prediction)?);
        trial_values.push(values);
    }
    let sweep_values: Vec<f64> = sweep.values.iter().map(|&v| v as f64).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = sweep_values
        .iter()
        .zip(&measured)
        .filter(|(_, y)| **y > 0.0)
        .map(|(x, y)| (*x, *y))
        .unzip();
    let fitted_slope = loglog_slope(&xs, &ys).ok();
    Ok(ProbeResult {
        quantity,
        layer: prediction.layer(),
        sweep_variable: sweep.name(),
        sweep_values,
        measured,
        trial_std,
        predicted,
        trial_values,
        fitted_slope,
    })
}

fn check_hidden(setup: &ProbeSetup, k: usize) -> Result<()> {
    let depth = setup.widths.len() - 1;
    if k == 0 || k >= depth {
        return Err(Error::InvalidInput(format!(
            "layer {k} is not a hidden layer of a depth-{depth} network"
        )));
    }
    Ok(())
}

/// Mean `‖f_k(x)‖²` over trials, one fresh input per trial.
pub fn probe_feature_norm(
    setup: &ProbeSetup,
    sweep: &WidthSweep,
    layer: usize,
) -> Result<ProbeResult> {
    check_hidden(setup, layer)?;
    sweep_probe(
        setup,
        sweep,
        1,
        QuantityKind::FeatureNorm,
        ScalingKind::FeatureNorm { layer },
        |state, data| {
            let trace = forward(state, data.sample(0))?;
            Ok(trace.feature(layer).iter().map(|v| v * v).sum())
        },
    )
}

/// Mean `‖Σ_k(x)‖_F²`.
pub fn probe_sigma_frobenius(
    setup: &ProbeSetup,
    sweep: &WidthSweep,
    layer: usize,
) -> Result<ProbeResult> {
    check_hidden(setup, layer)?;
    sweep_probe(
        setup,
        sweep,
        1,
        QuantityKind::SigmaFrobenius,
        ScalingKind::SigmaFrobenius { layer },
        |state, data| {
            let trace = forward(state, data.sample(0))?;
            Ok(trace.sigma(layer).iter().map(|v| v * v).sum())
        },
    )
}

/// `Σ_k ∏_{l=k+1}^{last} W_l Σ_l` at one input, as an `n_k × n_last` matrix.
pub fn chain_matrix(
    state: &NetworkState,
    trace: &ForwardTrace,
    k: usize,
    last: usize,
) -> Result<DenseMatrix> {
    let depth = state.depth();
    if k == 0 || last < k || last >= depth {
        return Err(Error::InvalidInput(format!(
            "chain range {k}..={last} must lie in the hidden layers 1..{depth}"
        )));
    }
    let mut m = DenseMatrix::from_diagonal(trace.sigma(k));
    for l in k + 1..=last {
        m = m.matmul(state.weight(l))?;
        let sigma = trace.sigma(l);
        for i in 0..m.rows() {
            for (v, s) in m.row_mut(i).iter_mut().zip(sigma) {
                *v *= s;
            }
        }
    }
    Ok(m)
}

/// Mean `‖Σ_k ∏_{l=k+1}^{last} W_l Σ_l‖_F²`. With `with_output_weights` the
/// chain must end at `L-1` and is closed by `W_L`, giving `‖(G_k)_{i:}‖²`.
pub fn probe_chain_product(
    setup: &ProbeSetup,
    sweep: &WidthSweep,
    layer: usize,
    last: usize,
    with_output_weights: bool,
) -> Result<ProbeResult> {
    let depth = setup.widths.len() - 1;
    if layer == 0 || last < layer || last >= depth {
        return Err(Error::InvalidInput(format!(
            "chain range {layer}..={last} must lie in the hidden layers 1..{depth}"
        )));
    }
    if with_output_weights && last != depth - 1 {
        return Err(Error::InvalidInput(
            "closing the chain with W_L needs last = L-1".into(),
        ));
    }
    let (quantity, prediction) = if with_output_weights {
        (QuantityKind::GRowNorm, ScalingKind::GRowNorm { layer })
    } else {
        (
            QuantityKind::ChainProduct,
            ScalingKind::ChainProduct { layer, last },
        )
    };
    sweep_probe(setup, sweep, 1, quantity, prediction, |state, data| {
        let trace = forward(state, data.sample(0))?;
        let chain = chain_matrix(state, &trace, layer, last)?;
        if with_output_weights {
            let v = chain.matvec(&state.weight(depth).column(0))?;
            Ok(v.iter().map(|x| x * x).sum())
        } else {
            Ok(chain.frobenius_norm().powi(2))
        }
    })
}

/// Mean `‖Σ_k ∏_{l=k+1}^{L-1} W_l Σ_l‖_op²`. Fails if any derivative exceeds
/// the activation's bound (`s` for cos/sin, 1 for relu).
pub fn probe_operator_norm_chain(
    setup: &ProbeSetup,
    sweep: &WidthSweep,
    layer: usize,
) -> Result<ProbeResult> {
    check_hidden(setup, layer)?;
    let depth = setup.widths.len() - 1;
    let bound = setup.activation.derivative_bound();
    sweep_probe(
        setup,
        sweep,
        1,
        QuantityKind::OperatorNormChain,
        ScalingKind::OperatorNormChain { layer },
        |state, data| {
            let trace = forward(state, data.sample(0))?;
            for l in 1..depth {
                let top = trace.sigma(l).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if top > bound {
                    return Err(Error::InvalidInput(format!(
                        "derivative magnitude {top} exceeds the activation bound {bound}"
                    )));
                }
            }
            let chain = chain_matrix(state, &trace, layer, depth - 1)?;
            let est = operator_norm(&chain, OPERATOR_NORM_MAX_ITERS, OPERATOR_NORM_REL_TOL)?;
            Ok(est.value * est.value)
        },
    )
}

/// Mean `σ_min(F_k)²` over `n_samples` inputs; every swept width must be at
/// least `n_samples`.
pub fn probe_feature_sigma_min(
    setup: &ProbeSetup,
    n_samples: usize,
    sweep: &WidthSweep,
    layer: usize,
) -> Result<ProbeResult> {
    check_hidden(setup, layer)?;
    let widths_at_layer: Vec<usize> = if sweep.layer == layer {
        sweep.values.clone()
    } else {
        vec![setup.widths[layer]]
    };
    if let Some(w) = widths_at_layer.iter().find(|&&w| w < n_samples) {
        return Err(Error::Precondition(format!(
            "width {w} at layer {layer} is below the sample count {n_samples}"
        )));
    }
    sweep_probe(
        setup,
        sweep,
        n_samples,
        QuantityKind::FeatureSigmaMin,
        ScalingKind::FeatureSigmaMin { layer },
        |state, data| {
            let traces = forward_batch(state, &data.samples)?;
            let sigma = min_singular_value(&feature_matrix(&traces, layer)?)?;
            Ok(sigma * sigma)
        },
    )
}

/// Feature mean, the diagonal `Λ` and the centred Gram at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentredFeatureProbe {
    /// Monte Carlo estimate of `E_x f_k(x)`.
    pub mu: Vec<f64>,
    /// `Λ_ii = ⟨f_k(x_i), μ⟩ - ‖μ‖²`.
    pub lambda_diag: Vec<f64>,
    /// `F̃_k F̃_kᵀ` with `F̃_k = F_k - 1 μᵀ`.
    pub centred_gram: DenseMatrix,
    pub feature_gram: DenseMatrix,
    /// Smallest eigenvalue of `F Fᵀ - (F̃ F̃ᵀ - Λ 1 1ᵀ Λ / ‖μ‖²)`; `None` when
    /// `‖μ‖` is too small for the inequality to be defined.
    pub difference_min_eigenvalue: Option<f64>,
    pub tolerance: f64,
}

impl CentredFeatureProbe {
    pub fn inequality_holds(&self) -> Option<bool> {
        self.difference_min_eigenvalue.map(|m| m >= -self.tolerance)
    }
}

/// Estimates `μ` from `mean_samples` fresh draws of the dataset's sampler and
/// checks `F_k F_kᵀ ⪰ F̃_k F̃_kᵀ - Λ 1 1ᵀ Λ / ‖μ‖²` up to `1e-6 · tr(F_k F_kᵀ)`.
pub fn probe_centred_features(
    state: &NetworkState,
    dataset: &Dataset,
    layer: usize,
    mean_samples: usize,
) -> Result<CentredFeatureProbe> {
    if mean_samples < 1000 {
        return Err(Error::Precondition(format!(
            "feature mean needs at least 1000 samples, got {mean_samples}"
        )));
    }
    if layer == 0 || layer >= state.depth() {
        return Err(Error::InvalidInput(format!("layer {layer} is not hidden")));
    }
    let width = state.widths()[layer];
    let fresh = sample_inputs(
        dataset.input_dim(),
        mean_samples,
        dataset.sampler,
        dataset.seed,
        Stream::Auxiliary,
    )?;
    let mut mu = vec![0.0; width];
    for i in 0..fresh.rows() {
        let trace = forward(state, fresh.row(i))?;
        for (m, f) in mu.iter_mut().zip(trace.feature(layer)) {
            *m += f;
        }
    }
    mu.iter_mut().for_each(|m| *m /= mean_samples as f64);
    let traces = forward_batch(state, &dataset.samples)?;
    centred_features_with_mean(&feature_matrix(&traces, layer)?, mu)
}

/// The centred-feature inequality for a given feature matrix and mean.
pub fn centred_features_with_mean(
    features: &DenseMatrix,
    mu: Vec<f64>,
) -> Result<CentredFeatureProbe> {
    if features.cols() != mu.len() {
        return Err(Error::Dimension(format!(
            "mean of length {} for {} features",
            mu.len(),
            features.cols()
        )));
    }
    let n = features.rows();
    let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
    let f_mu = features.matvec(&mu)?;
    let lambda_diag: Vec<f64> = f_mu.iter().map(|v| v - mu_sq).collect();
    let centred = DenseMatrix::from_fn(n, features.cols(), |i, j| features[(i, j)] - mu[j]);
    let centred_gram = centred.gram_rows();
    let feature_gram = features.gram_rows();
    let tolerance = 1e-6 * feature_gram.trace().abs();

    let difference_min_eigenvalue = if mu_sq.sqrt() < 1e-12 {
        None
    } else {
        let diff = DenseMatrix::from_fn(n, n, |i, j| {
            feature_gram[(i, j)] - centred_gram[(i, j)] + lambda_diag[i] * lambda_diag[j] / mu_sq
        });
        Some(sym_eigen(&diff)?.min())
    };
    Ok(CentredFeatureProbe {
        mu,
        lambda_diag,
        centred_gram,
        feature_gram,
        difference_min_eigenvalue,
        tolerance,
    })
}

/// Input Jacobian of `f_k`, `Σ_k W_kᵀ Σ_{k-1} ⋯ Σ_1 W_1ᵀ` (no `Σ` at the
/// linear output layer), applied without forming the product.
pub struct InputJacobian<'a> {
    state: &'a NetworkState,
    slopes: Vec<&'a [f64]>,
    layer: usize,
}

impl<'a> InputJacobian<'a> {
    pub fn new(state: &'a NetworkState, trace: &'a ForwardTrace, layer: usize) -> Result<Self> {
        if layer == 0 || layer > state.depth() {
            return Err(Error::InvalidInput(format!(
                "no layer {layer} in a depth-{} network",
                state.depth()
            )));
        }
        let slopes = (1..=layer)
            .filter(|&l| l < state.depth())
            .map(|l| trace.sigma(l))
            .collect();
        Ok(Self {
            state,
            slopes,
            layer,
        })
    }

    fn slope(&self, l: usize) -> Option<&[f64]> {
        self.slopes.get(l - 1).copied()
    }

    /// The explicit `n_k × n_0` matrix.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        let n0 = self.state.widths()[0];
        let mut m = self.state.weight(1).transpose();
        if let Some(s) = self.slope(1) {
            scale_rows(&mut m, s);
        }
        for l in 2..=self.layer {
            m = self.state.weight(l).transpose().matmul(&m)?;
            if let Some(s) = self.slope(l) {
                scale_rows(&mut m, s);
            }
        }
        debug_assert_eq!(m.cols(), n0);
        Ok(m)
    }
}

fn scale_rows(m: &mut DenseMatrix, s: &[f64]) {
    for (i, &si) in s.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|v| *v *= si);
    }
}

impl LinearOperator for InputJacobian<'_> {
    fn nrows(&self) -> usize {
        self.state.widths()[self.layer]
    }

    fn ncols(&self) -> usize {
        self.state.widths()[0]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut v = x.to_vec();
        for l in 1..=self.layer {
            let w = self.state.weight(l);
            let mut next = vec![0.0; w.cols()];
            LinearOperator::apply_transpose(w, &v, &mut next);
            if let Some(s) = self.slope(l) {
                next.iter_mut().zip(s).for_each(|(a, b)| *a *= b);
            }
            v = next;
        }
        out.copy_from_slice(&v);
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        let mut v = y.to_vec();
        for l in (1..=self.layer).rev() {
            if let Some(s) = self.slope(l) {
                v.iter_mut().zip(s).for_each(|(a, b)| *a *= b);
            }
            let w = self.state.weight(l);
            let mut next = vec![0.0; w.rows()];
            LinearOperator::apply(w, &v, &mut next);
            v = next;
        }
        out.copy_from_slice(&v);
    }
}

/// `max_i ‖J(f_k)(x_i)‖_op` over the dataset.
pub fn empirical_lipschitz(state: &NetworkState, dataset: &Dataset, layer: usize) -> Result<f64> {
    if layer == 0 || layer > state.depth() {
        return Err(Error::InvalidInput(format!(
            "no layer {layer} in a depth-{} network",
            state.depth()
        )));
    }
    let mut best = 0.0_f64;
    for i in 0..dataset.len() {
        let trace = forward(state, dataset.sample(i))?;
        let jac = InputJacobian::new(state, &trace, layer)?;
        let est = operator_norm_of(&jac, OPERATOR_NORM_MAX_ITERS, OPERATOR_NORM_REL_TOL)?;
        best = best.max(est.value);
    }
    Ok(best)
}

/// Monte Carlo estimates of `E cos²(s z)` and `E sin²(s z)` for `z ~ N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub frequency: f64,
    pub input_std: f64,
    pub draws: usize,
    pub mean_cos_sq: f64,
    pub se_cos_sq: f64,
    pub mean_sin_sq: f64,
    pub se_sin_sq: f64,
}

pub fn monte_carlo_moments(s: f64, sigma: f64, draws: usize, seed: u64) -> Result<MomentEstimate> {
    if draws < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    let mut gauss = GaussianSource::new(seed, Stream::Auxiliary);
    let (mut cos_sum, mut cos_sq_sum, mut sin_sum, mut sin_sq_sum) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let t = s * gauss.normal(sigma);
        let c = t.cos().powi(2);
        let si = t.sin().powi(2);
        cos_sum += c;
        cos_sq_sum += c * c;
        sin_sum += si;
        sin_sq_sum += si * si;
    }
    let n = draws as f64;
    let se = |sum: f64, sq: f64| {
        let mean = sum / n;
        let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    };
    let (mean_cos_sq, se_cos_sq) = se(cos_sum, cos_sq_sum);
    let (mean_sin_sq, se_sin_sq) = se(sin_sum, sin_sq_sum);
    Ok(MomentEstimate {
        frequency: s,
        input_std: sigma,
        draws,
        mean_cos_sq,
        se_cos_sq,
        mean_sin_sq,
        se_sin_sq,
    })
}

/// Gershgorin enclosure `(min_i a_ii - N r, max_i a_ii + N r)` with
/// `r = max_{i≠j} |a_ij|`.
pub fn gershgorin_bounds(gram: &DenseMatrix) -> Result<(f64, f64)> {
    if !gram.is_square() || gram.rows() == 0 {
        return Err(Error::Dimension(
            "gershgorin bounds need a nonempty square matrix".into(),
        ));
    }
    let n = gram.rows();
    let mut off = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off = off.max(gram[(i, j)].abs());
            }
        }
    }
    let diag = gram.diagonal();
    let lo = diag.iter().copied().fold(f64::INFINITY, f64::min) - n as f64 * off;
    let hi = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max) + n as f64 * off;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::gaussian_activation_moments;

    fn setup(widths: Vec<usize>, act: ActivationSpec, init: InitMode, trials: usize) -> ProbeSetup {
        ProbeSetup {
            widths,
            activation: act,
            init,
            sampler: SamplerKind::GaussianIid,
            trials,
            seed: 100,
        }
    }

    #[test]
    fn zero_weights() {
        let s = setup(
            vec![4, 8, 6, 1],
            ActivationSpec::cosine(3.0),
            InitMode::Explicit(vec![0.0; 3]),
            2,
        );
        let sweep = WidthSweep::new(1, vec![8, 16]);
        let f = probe_feature_norm(&s, &sweep, 1).unwrap();
        assert_eq!(f.measured, vec![8.0, 16.0]);
        let sig = probe_sigma_frobenius(&s, &sweep, 1).unwrap();
        assert_eq!(sig.measured, vec![0.0, 0.0]);
        assert!(sig.fitted_slope.is_none());
        let chain = probe_chain_product(&s, &sweep, 1, 2, false).unwrap();
        assert_eq!(chain.measured, vec![0.0, 0.0]);
        let op = probe_operator_norm_chain(&s, &sweep, 1).unwrap();
        assert_eq!(op.measured, vec![0.0, 0.0]);
    }

    #[test]
    fn chain_without_product_is_sigma_norm() {
        let s = setup(
            vec![5, 7, 9, 1],
            ActivationSpec::cosine(2.0),
            InitMode::He,
            3,
        );
        let sweep = WidthSweep::new(2, vec![9, 18]);
        let a = probe_chain_product(&s, &sweep, 2, 2, false).unwrap();
        let b = probe_sigma_frobenius(&s, &sweep, 2).unwrap();
        for (x, y) in a.measured.iter().zip(&b.measured) {
            assert!((x - y).abs() <= 1e-12 * y.abs());
        }
    }

    #[test]
    fn g_row_norm_matches_sensitivity_matrix() {
        let arch = ArchitectureSpec::he(vec![3, 6, 5, 4, 1], ActivationSpec::cosine(2.0)).unwrap();
        let state = init_network(&arch, 3).unwrap();
        let data = sample_dataset(3, 1, SamplerKind::GaussianIid, 3).unwrap();
        let traces = forward_batch(&state, &data.samples).unwrap();
        let g = crate::ntk::build_g_matrices(&state, &traces).unwrap();
        for k in 1..3 {
            let chain = chain_matrix(&state, &traces[0], k, 3).unwrap();
            let row = chain.matvec(&state.weight(4).column(0)).unwrap();
            for (a, b) in row.iter().zip(g.g(k).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        let s = setup(
            vec![4, 8, 6, 1],
            ActivationSpec::cosine(1.0),
            InitMode::He,
            1,
        );
        let sweep = WidthSweep::new(1, vec![8]);
        assert!(probe_chain_product(&s, &sweep, 2, 1, false).is_err());
        assert!(probe_chain_product(&s, &sweep, 1, 3, false).is_err());
        assert!(probe_chain_product(&s, &sweep, 1, 1, true).is_err());
        assert!(probe_feature_norm(&s, &sweep, 3).is_err());
        assert!(matches!(
            probe_feature_sigma_min(&s, 16, &sweep, 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn single_sample_sigma_min_is_feature_norm() {
        let s = setup(vec![6, 32, 1], ActivationSpec::cosine(2.0), InitMode::He, 4);
        let sweep = WidthSweep::new(1, vec![32, 64]);
        let sv = probe_feature_sigma_min(&s, 1, &sweep, 1).unwrap();
        let fnorm = probe_feature_norm(&s, &sweep, 1).unwrap();
        for (a, b) in sv.measured.iter().zip(&fnorm.measured) {
            assert!((a - b).abs() <= 1e-10 * b);
        }
    }

    #[test]
    fn identity_feature_matrix_has_unit_sigma_min() {
        let sv = min_singular_value(&DenseMatrix::identity(5)).unwrap();
        assert!((sv * sv - 1.0).abs() < 1e-14);
    }

    #[test]
    fn relu_sigma_counts_active_units() {
        let s = setup(vec![16, 256, 1], ActivationSpec::relu(), InitMode::He, 200);
        let sweep = WidthSweep::new(1, vec![256]);
        let r = probe_sigma_frobenius(&s, &sweep, 1).unwrap();
        assert!(
            (r.measured[0] / 128.0 - 1.0).abs() < 0.05,
            "{}",
            r.measured[0]
        );
    }

    #[test]
    fn periodic_feature_norm_matches_moments() {
        // With s β ‖x‖ large, E‖f_1‖² / n_1 ≈ E cos² → 1/2 (plus the
        // exponentially small correction, evaluated per trial).
        let s = setup(
            vec![16, 128, 1],
            ActivationSpec::cosine(6.0),
            InitMode::Explicit(vec![1.0, 1.0]),
            200,
        );
        let sweep = WidthSweep::new(1, vec![128]);
        let r = probe_feature_norm(&s, &sweep, 1).unwrap();
        let ratio = r.measured[0] / 128.0;
        let se = r.standard_error(0) / 128.0;
        let predicted = gaussian_activation_moments(6.0, 4.0).mean_cos_sq;
        assert!(
            (ratio - predicted).abs() < 3.0 * se + 1e-12,
            "{ratio} vs {predicted} (se {se})"
        );
    }

    #[test]
    fn centred_constant_features() {
        let f = DenseMatrix::from_fn(3, 4, |_, _| 0.7);
        let p = centred_features_with_mean(&f, vec![0.7; 4]).unwrap();
        assert!(p.centred_gram.max_abs() < 1e-15);
        assert!(p.lambda_diag.iter().all(|l| l.abs() < 1e-15));
        assert_eq!(p.inequality_holds(), Some(true));
    }

    #[test]
    fn centred_degenerate_mean_is_reported() {
        let f = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let p = centred_features_with_mean(&f, vec![0.0; 3]).unwrap();
        assert_eq!(p.inequality_holds(), None);
    }

    #[test]
    fn centred_single_sample() {
        let arch = ArchitectureSpec::he(vec![3, 10, 1], ActivationSpec::cosine(1.5)).unwrap();
        let state = init_network(&arch, 1).unwrap();
        let data = sample_dataset(3, 1, SamplerKind::GaussianIid, 1).unwrap();
        let p = probe_centred_features(&state, &data, 1, 1000).unwrap();
        assert_eq!(p.centred_gram.rows(), 1);
        assert_eq!(p.inequality_holds(), Some(true));
        assert!(probe_centred_features(&state, &data, 1, 999).is_err());
    }

    #[test]
    fn lipschitz_of_linear_network_is_weight_norm() {
        let arch =
            ArchitectureSpec::new(vec![5, 1], ActivationSpec::identity(), vec![1.0]).unwrap();
        let state = init_network(&arch, 4).unwrap();
        let data = sample_dataset(5, 7, SamplerKind::GaussianIid, 4).unwrap();
        let lip = empirical_lipschitz(&state, &data, 1).unwrap();
        let w = state.weight(1).frobenius_norm();
        assert!((lip - w).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_zero_weights() {
        let arch =
            ArchitectureSpec::new(vec![3, 4, 1], ActivationSpec::cosine(2.0), vec![0.0, 0.0])
                .unwrap();
        let state = init_network(&arch, 4).unwrap();
        let data = sample_dataset(3, 5, SamplerKind::GaussianIid, 4).unwrap();
        assert_eq!(empirical_lipschitz(&state, &data, 1).unwrap(), 0.0);
    }

    #[test]
    fn input_jacobian_operator_matches_dense() {
        let arch = ArchitectureSpec::he(vec![4, 6, 5, 1], ActivationSpec::sine(2.0)).unwrap();
        let state = init_network(&arch, 8).unwrap();
        let data = sample_dataset(4, 1, SamplerKind::GaussianIid, 8).unwrap();
        let trace = forward(&state, data.sample(0)).unwrap();
        for layer in 1..=3 {
            let op = InputJacobian::new(&state, &trace, layer).unwrap();
            let dense = op.to_dense().unwrap();
            let x = [0.3, -1.0, 2.0, 0.5];
            let mut out = vec![0.0; op.nrows()];
            op.apply(&x, &mut out);
            let expected = dense.matvec(&x).unwrap();
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            let y: Vec<f64> = (0..op.nrows()).map(|i| i as f64 - 1.0).collect();
            let mut back = vec![0.0; 4];
            op.apply_transpose(&y, &mut back);
            let expected = dense.matvec_transpose(&y).unwrap();
            for (a, b) in back.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gershgorin_examples() {
        let (lo, hi) = gershgorin_bounds(&DenseMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!((lo, hi), (1.0, 3.0));
        let ones = DenseMatrix::from_fn(2, 2, |_, _| 1.0);
        let (lo, _) = gershgorin_bounds(&ones).unwrap();
        assert_eq!(lo, -1.0);
        assert!(gershgorin_bounds(&DenseMatrix::zeros(2, 3)).is_err());
    }
}
