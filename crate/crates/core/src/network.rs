//! Bias-free coordinate networks `f_k = φ(W_kᵀ f_{k-1})` with a linear
//! output layer, their Gaussian initialization and input samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, DenseMatrix};
use crate::rng::{GaussianSource, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Cosine,
    Sine,
    Relu,
    Identity,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Cosine => "cosine",
            ActivationKind::Sine => "sine",
            ActivationKind::Relu => "relu",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn is_periodic(self) -> bool {
        matches!(self, ActivationKind::Cosine | ActivationKind::Sine)
    }
}

/// Activation `φ` and its frequency `s` (unused by relu and identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    #[serde(default = "default_frequency")]
    pub frequency: f64,
}

fn default_frequency() -> f64 {
    1.0
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind, frequency: f64) -> Result<Self> {
        let spec = Self { kind, frequency };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cosine(s: f64) -> Self {
        Self {
            kind: ActivationKind::Cosine,
            frequency: s,
        }
    }

    pub fn sine(s: f64) -> Self {
        Self {
            kind: ActivationKind::Sine,
            frequency: s,
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            frequency: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: ActivationKind::Identity,
            frequency: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_periodic() && !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(Error::Architecture(format!(
                "{} activation needs a positive finite frequency, got {}",
                self.kind.name(),
                self.frequency
            )));
        }
        Ok(())
    }

    /// `(φ(t), φ'(t))`. The relu derivative at 0 is taken to be 0.
    #[inline]
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let s = self.frequency;
        match self.kind {
            ActivationKind::Cosine => {
                let (sin, cos) = (s * t).sin_cos();
                (cos, -s * sin)
            }
            ActivationKind::Sine => {
                let (sin, cos) = (s * t).sin_cos();
                (sin, s * cos)
            }
            ActivationKind::Relu => {
                if t > 0.0 {
                    (t, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            ActivationKind::Identity => (t, 1.0),
        }
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    /// Sup of `|φ'|`: `s` for the periodic activations, 1 otherwise.
    pub fn derivative_bound(&self) -> f64 {
        if self.kind.is_periodic() {
            self.frequency
        } else {
            1.0
        }
    }
}

/// How per-layer standard deviations are chosen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `β_k = sqrt(2 / n_{k-1})`.
    #[default]
    He,
    Explicit(Vec<f64>),
}

impl InitMode {
    pub fn scales(&self, widths: &[usize]) -> Result<Vec<f64>> {
        match self {
            InitMode::He => Ok(he_scales(widths)),
            InitMode::Explicit(betas) => {
                if betas.len() + 1 != widths.len() {
                    return Err(Error::Architecture(format!(
                        "{} init scales for {} layers",
                        betas.len(),
                        widths.len().saturating_sub(1)
                    )));
                }
                Ok(betas.clone())
            }
        }
    }
}

pub fn he_scales(widths: &[usize]) -> Vec<f64> {
    widths
        .windows(2)
        .map(|w| (2.0 / w[0] as f64).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// `[n_0, n_1, ..., n_L]` with `n_L = 1`.
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
    /// `[β_1, ..., β_L]`, standard deviations of the weight entries.
    pub init_scales: Vec<f64>,
}

impl ArchitectureSpec {
    pub fn new(
        widths: Vec<usize>,
        activation: ActivationSpec,
        init_scales: Vec<f64>,
    ) -> Result<Self> {
        let arch = Self {
            widths,
            activation,
            init_scales,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_init(
        widths: Vec<usize>,
        activation: ActivationSpec,
        init: &InitMode,
    ) -> Result<Self> {
        let scales = init.scales(&widths)?;
        Self::new(widths, activation, scales)
    }

    pub fn he(widths: Vec<usize>, activation: ActivationSpec) -> Result<Self> {
        Self::with_init(widths, activation, &InitMode::He)
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        if self.widths.len() < 2 {
            return Err(Error::Architecture(
                "need at least an input and an output width".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Architecture(format!(
                "zero width in {:?}",
                self.widths
            )));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(Error::Architecture(format!(
                "output width must be 1, got {:?}",
                self.widths
            )));
        }
        if self.init_scales.len() != self.depth() {
            return Err(Error::Architecture(format!(
                "{} init scales for depth {}",
                self.init_scales.len(),
                self.depth()
            )));
        }
        if self
            .init_scales
            .iter()
            .any(|b| !(*b >= 0.0 && b.is_finite()))
        {
            return Err(Error::Architecture(format!(
                "init scales must be finite and nonnegative: {:?}",
                self.init_scales
            )));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// `p = Σ n_{k-1} n_k`.
    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Hidden layers whose scale exceeds 1, which the bounds assume away.
    pub fn warnings(&self) -> Vec<String> {
        let hidden = self.depth() - 1;
        self.init_scales
            .iter()
            .take(hidden)
            .enumerate()
            .filter(|(_, b)| **b > 1.0)
            .map(|(i, b)| format!("init scale beta_{} = {b} exceeds 1", i + 1))
            .collect()
    }
}

/// Weights `W_k ∈ R^{n_{k-1} × n_k}` for `k = 1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub arch: ArchitectureSpec,
    weights: Vec<DenseMatrix>,
    parameter_count: usize,
}

impl NetworkState {
    pub fn from_weights(arch: ArchitectureSpec, weights: Vec<DenseMatrix>) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.depth() {
            return Err(Error::Dimension(format!(
                "{} weight matrices for depth {}",
                weights.len(),
                arch.depth()
            )));
        }
        for (k, w) in weights.iter().enumerate() {
            if w.rows() != arch.widths[k] || w.cols() != arch.widths[k + 1] {
                return Err(Error::Dimension(format!(
                    "W_{} is {}x{}, expected {}x{}",
                    k + 1,
                    w.rows(),
                    w.cols(),
                    arch.widths[k],
                    arch.widths[k + 1]
                )));
            }
        }
        let parameter_count = arch.parameter_count();
        Ok(Self {
            arch,
            weights,
            parameter_count,
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.arch.activation
    }

    pub fn widths(&self) -> &[usize] {
        &self.arch.widths
    }

    /// `W_k` for `k` in `1..=L`.
    pub fn weight(&self, k: usize) -> &DenseMatrix {
        &self.weights[k - 1]
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    /// `θ = [vec(W_1), ..., vec(W_L)]`, each block row-major.
    pub fn parameters(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.parameter_count);
        for w in &self.weights {
            theta.extend_from_slice(w.as_slice());
        }
        theta
    }

    pub fn with_parameters(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.parameter_count {
            return Err(Error::Dimension(format!(
                "{} parameters for a network with {}",
                theta.len(),
                self.parameter_count
            )));
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(self.depth());
        for w in &self.weights {
            let len = w.rows() * w.cols();
            weights.push(DenseMatrix::from_vec(
                w.rows(),
                w.cols(),
                theta[offset..offset + len].to_vec(),
            )?);
            offset += len;
        }
        Self::from_weights(self.arch.clone(), weights)
    }

    /// `θ + h·direction`.
    pub fn perturbed(&self, direction: &[f64], h: f64) -> Result<Self> {
        if direction.len() != self.parameter_count {
            return Err(Error::Dimension(format!(
                "direction has {} entries, network has {} parameters",
                direction.len(),
                self.parameter_count
            )));
        }
        let theta: Vec<f64> = self
            .parameters()
            .iter()
            .zip(direction)
            .map(|(t, d)| t + h * d)
            .collect();
        self.with_parameters(&theta)
    }
}

/// Draws every `(W_k)_{ij}` i.i.d. from `N(0, β_k²)`.
pub fn init_network(arch: &ArchitectureSpec, seed: u64) -> Result<NetworkState> {
    arch.validate()?;
    let mut gauss = GaussianSource::new(seed, Stream::Weights);
    let weights = arch
        .widths
        .windows(2)
        .zip(&arch.init_scales)
        .map(|(w, &beta)| {
            let mut data = vec![0.0; w[0] * w[1]];
            gauss.fill_normal(beta, &mut data);
            DenseMatrix::from_vec(w[0], w[1], data)
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkState::from_weights(arch.clone(), weights)
}

/// Everything a forward pass produces for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    features: Vec<Vec<f64>>,
    preactivations: Vec<Vec<f64>>,
    derivatives: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.features.len() - 1
    }

    /// `f_k(x)` for `k` in `0..=L`; `f_0 = x`.
    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k]
    }

    /// `g_k(x)` for hidden `k` in `1..L`.
    pub fn preactivation(&self, k: usize) -> &[f64] {
        &self.preactivations[k - 1]
    }

    /// Diagonal of `Σ_k(x)` for hidden `k` in `1..L`.
    pub fn sigma(&self, k: usize) -> &[f64] {
        &self.derivatives[k - 1]
    }

    pub fn output(&self) -> f64 {
        self.features[self.depth()][0]
    }
}

pub fn forward(state: &NetworkState, x: &[f64]) -> Result<ForwardTrace> {
    let widths = state.widths();
    if x.len() != widths[0] {
        return Err(Error::Dimension(format!(
            "input has length {}, network expects {}",
            x.len(),
            widths[0]
        )));
    }
    let depth = state.depth();
    let act = state.activation();
    let mut features = Vec::with_capacity(depth + 1);
    let mut preactivations = Vec::with_capacity(depth - 1);
    let mut derivatives = Vec::with_capacity(depth - 1);
    features.push(x.to_vec());

    for k in 1..depth {
        let g = state.weight(k).matvec_transpose(&features[k - 1])?;
        let (f, d): (Vec<f64>, Vec<f64>) = g.iter().map(|&t| act.eval(t)).unzip();
        debug_assert!(
            d.iter().all(|v| v.abs() <= act.derivative_bound()),
            "activation derivative exceeds its bound"
        );
        features.push(f);
        preactivations.push(g);
        derivatives.push(d);
    }
    features.push(state.weight(depth).matvec_transpose(&features[depth - 1])?);
    Ok(ForwardTrace {
        features,
        preactivations,
        derivatives,
    })
}

/// Forward passes for every row of `x`.
pub fn forward_batch(state: &NetworkState, x: &DenseMatrix) -> Result<Vec<ForwardTrace>> {
    (0..x.rows()).map(|i| forward(state, x.row(i))).collect()
}

/// Network outputs `f_L(x_i)` for every row of `x`.
pub fn outputs(state: &NetworkState, x: &DenseMatrix) -> Result<Vec<f64>> {
    (0..x.rows())
        .map(|i| forward(state, x.row(i)).map(|t| t.output()))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Entries i.i.d. `N(0, 1)`.
    #[default]
    GaussianIid,
    /// Uniform on the sphere of radius `sqrt(n_0)`.
    SphereUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `N × n_0`, one sample per row.
    pub samples: DenseMatrix,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let perm: Vec<usize> = (0..n).collect();
        Dataset {
            samples: self.samples.permute_rows(&perm),
            sampler: self.sampler,
            seed: self.seed,
        }
    }
}

pub fn sample_dataset(
    n0: usize,
    n_samples: usize,
    kind: SamplerKind,
    seed: u64,
) -> Result<Dataset> {
    let samples = sample_inputs(n0, n_samples, kind, seed, Stream::Data)?;
    Ok(Dataset {
        samples,
        sampler: kind,
        seed,
    })
}

/// `n_samples × n0` inputs drawn from an explicit stream.
pub fn sample_inputs(
    n0: usize,
    n_samples: usize,
    kind: SamplerKind,
    seed: u64,
    stream: Stream,
) -> Result<DenseMatrix> {
    if n0 == 0 || n_samples == 0 {
        return Err(Error::InvalidInput(
            "dataset needs n0 >= 1 and at least one sample".into(),
        ));
    }
    let mut gauss = GaussianSource::new(seed, stream);
    let mut data = vec![0.0; n0 * n_samples];
    for row in data.chunks_mut(n0) {
        gauss.fill_normal(1.0, row);
        if kind == SamplerKind::SphereUniform {
            let mut norm = norm2(row);
            while norm == 0.0 {
                gauss.fill_normal(1.0, row);
                norm = norm2(row);
            }
            let scale = (n0 as f64).sqrt() / norm;
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    DenseMatrix::from_vec(n_samples, n0, data)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn zero_net(widths: Vec<usize>, act: ActivationSpec) -> NetworkState {
        let l = widths.len() - 1;
        init_network(
            &ArchitectureSpec::new(widths, act, vec![0.0; l]).unwrap(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn architecture_validation() {
        let act = ActivationSpec::cosine(1.0);
        assert!(ArchitectureSpec::new(vec![3], act, vec![]).is_err());
        assert!(ArchitectureSpec::new(vec![3, 2], act, vec![1.0]).is_err());
        assert!(ArchitectureSpec::new(vec![3, 0, 1], act, vec![1.0, 1.0]).is_err());
        assert!(ArchitectureSpec::new(vec![3, 2, 1], act, vec![1.0]).is_err());
        assert!(
            ArchitectureSpec::new(vec![3, 2, 1], ActivationSpec::cosine(0.0), vec![1.0, 1.0])
                .is_err()
        );
        let arch = ArchitectureSpec::new(vec![3, 2, 1], act, vec![1.5, 2.0]).unwrap();
        assert_eq!(arch.parameter_count(), 8);
        // Only hidden layers are checked against the beta <= 1 assumption.
        assert_eq!(arch.warnings().len(), 1);
    }

    #[test]
    fn he_scales_follow_fan_in() {
        let arch = ArchitectureSpec::he(vec![8, 32, 2, 1], ActivationSpec::relu()).unwrap();
        let expected = [0.5, 0.25, 1.0];
        for (b, e) in arch.init_scales.iter().zip(expected) {
            assert!((b - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_scales_give_zero_weights() {
        let net = zero_net(vec![3, 4, 1], ActivationSpec::cosine(2.0));
        assert!(net.parameters().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_weights_cosine_forward() {
        let net = zero_net(vec![2, 3, 4, 1], ActivationSpec::cosine(2.0));
        let t = forward(&net, &[0.3, -1.2]).unwrap();
        for k in 1..3 {
            assert!(t.feature(k).iter().all(|&v| v == 1.0));
            assert!(t.sigma(k).iter().all(|&v| v == 0.0));
        }
        assert_eq!(t.output(), 0.0);
    }

    #[test]
    fn single_layer_is_linear() {
        let arch =
            ArchitectureSpec::new(vec![3, 1], ActivationSpec::cosine(1.0), vec![1.0]).unwrap();
        let net = init_network(&arch, 11).unwrap();
        let x = [0.5, -2.0, 1.0];
        let t = forward(&net, &x).unwrap();
        let w = net.weight(1).column(0);
        assert_eq!(
            t.output(),
            w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
        );
    }

    #[test]
    fn hand_computed_width_one_net() {
        let arch =
            ArchitectureSpec::new(vec![1, 1, 1], ActivationSpec::cosine(2.0), vec![1.0, 1.0])
                .unwrap();
        let weights = vec![
            DenseMatrix::from_vec(1, 1, vec![0.5]).unwrap(),
            DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap(),
        ];
        let net = NetworkState::from_weights(arch, weights).unwrap();
        let t = forward(&net, &[PI]).unwrap();
        assert!((t.preactivation(1)[0] - PI / 2.0).abs() < 1e-15);
        assert!((t.feature(1)[0] + 1.0).abs() < 1e-15);
        assert!((t.output() + 3.0).abs() < 1e-14);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = zero_net(vec![2, 3, 1], ActivationSpec::relu());
        assert!(matches!(forward(&net, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn weight_shape_checks() {
        let arch =
            ArchitectureSpec::new(vec![2, 3, 1], ActivationSpec::relu(), vec![1.0, 1.0]).unwrap();
        let bad = vec![DenseMatrix::zeros(3, 2), DenseMatrix::zeros(3, 1)];
        assert!(NetworkState::from_weights(arch, bad).is_err());
    }

    #[test]
    fn parameter_round_trip() {
        let arch = ArchitectureSpec::he(vec![3, 5, 2, 1], ActivationSpec::sine(3.0)).unwrap();
        let net = init_network(&arch, 5).unwrap();
        let theta = net.parameters();
        assert_eq!(theta.len(), net.parameter_count());
        assert_eq!(net.with_parameters(&theta).unwrap(), net);
        let zero = vec![0.0; theta.len()];
        assert_eq!(net.perturbed(&zero, 0.1).unwrap(), net);
    }

    #[test]
    fn init_is_seeded() {
        let arch = ArchitectureSpec::he(vec![4, 6, 1], ActivationSpec::cosine(1.0)).unwrap();
        assert_eq!(
            init_network(&arch, 9).unwrap(),
            init_network(&arch, 9).unwrap()
        );
        assert_ne!(
            init_network(&arch, 9).unwrap(),
            init_network(&arch, 10).unwrap()
        );
    }

    #[test]
    fn init_variance_matches_scale() {
        let beta = 0.7;
        let arch = ArchitectureSpec::new(
            vec![1000, 1000, 1],
            ActivationSpec::cosine(1.0),
            vec![beta, 1.0],
        )
        .unwrap();
        let net = init_network(&arch, 21).unwrap();
        let w = net.weight(1).as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (beta * beta) - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn sphere_rows_have_radius_sqrt_n0() {
        let ds = sample_dataset(17, 50, SamplerKind::SphereUniform, 4).unwrap();
        for i in 0..ds.len() {
            assert!((norm2(ds.sample(i)) - 17f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_norm_moments() {
        let n0 = 64;
        let ds = sample_dataset(n0, 10_000, SamplerKind::GaussianIid, 8).unwrap();
        let norms: Vec<f64> = (0..ds.len()).map(|i| norm2(ds.sample(i))).collect();
        let mean_sq = norms.iter().map(|r| r * r).sum::<f64>() / norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((mean_sq / n0 as f64 - 1.0).abs() < 0.03);
        assert!((mean / (n0 as f64 - 0.5).sqrt() - 1.0).abs() < 0.03);
    }

    #[test]
    fn dataset_rejects_empty() {
        assert!(sample_dataset(0, 3, SamplerKind::GaussianIid, 1).is_err());
        assert!(sample_dataset(3, 0, SamplerKind::GaussianIid, 1).is_err());
    }
}
