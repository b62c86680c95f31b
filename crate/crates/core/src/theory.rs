//! Constant-free evaluation of the predicted scalings for the kernel's
//! smallest eigenvalue and for the layerwise quantities behind it.
//!
//! Every Ω/O/Θ constant is set to 1, so the values are only meaningful
//! through ratios and log-log slopes. Layer `l` has width `n_l` and weight
//! scale `β_l` (`init_scales[l - 1]`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ArchitectureSpec;

/// `E[cos²(s z)]` and `E[sin²(s z)]` for `z ~ N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPrediction {
    pub mean_cos_sq: f64,
    pub mean_sin_sq: f64,
    pub input_std: f64,
    pub frequency: f64,
}

/// Closed forms from `E[cos(t z)] = exp(-t²σ²/2)`:
/// `E[cos²(sz)] = (1 + e^{-2s²σ²})/2`, `E[sin²(sz)] = (1 - e^{-2s²σ²})/2`.
pub fn gaussian_activation_moments(s: f64, sigma: f64) -> MomentPrediction {
    let decay = (-2.0 * s * s * sigma * sigma).exp();
    let mean_cos_sq = 0.5 + 0.5 * decay;
    // mean_cos_sq lies in [1/2, 1], so this subtraction is exact and the two
    // moments sum to exactly 1.
    let mean_sin_sq = 1.0 - mean_cos_sq;
    MomentPrediction {
        mean_cos_sq,
        mean_sin_sq,
        input_std: sigma,
        frequency: s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEvaluation {
    pub lower_bound_value: f64,
    pub upper_bound_value: f64,
    /// `a_k` for `k = 1..L-1`.
    pub a_flags: Vec<u8>,
    pub lambda_min_xxt: f64,
    /// Per-layer summands of the lower bound before the `a_k` mask.
    pub lower_terms: Vec<f64>,
    /// Contribution of the `λ_min(XXᵀ)` term.
    pub data_term: f64,
}

struct Layers<'a> {
    widths: &'a [usize],
    betas: &'a [f64],
}

impl<'a> Layers<'a> {
    fn new(arch: &'a ArchitectureSpec) -> Self {
        Self {
            widths: &arch.widths,
            betas: &arch.init_scales,
        }
    }

    fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    fn n(&self, l: usize) -> f64 {
        self.widths[l] as f64
    }

    fn beta(&self, l: usize) -> f64 {
        self.betas[l - 1]
    }

    /// `β_l n_l`
    fn bn(&self, l: usize) -> f64 {
        self.beta(l) * self.n(l)
    }

    /// `∏_{l=from}^{to} sqrt(β_l n_l)`, empty when `from > to`.
    fn sqrt_bn_product(&self, from: usize, to: usize) -> f64 {
        (from..=to).map(|l| self.bn(l).sqrt()).product()
    }

    /// `∏_{l=from}^{to} β_l n_l`
    fn bn_product(&self, from: usize, to: usize) -> f64 {
        (from..=to).map(|l| self.bn(l)).product()
    }

    fn min_width(&self, from: usize, to: usize) -> f64 {
        self.widths[from..=to].iter().copied().min().unwrap_or(1) as f64
    }

    fn log_product(&self, from: usize, to: usize) -> f64 {
        (from..=to).map(|l| self.n(l).ln()).product()
    }
}

/// `1 - exp(-β² s²)`
fn saturation(beta: f64, s: f64) -> f64 {
    -(-(beta * beta * s * s)).exp_m1()
}

/// Finite-size reading of the wide-layer condition: `n_k ≥ N` and
/// `∏_{l=1}^{k-1} ln n_l < min_{l ≤ k} n_l`.
pub fn wide_layer_flags(arch: &ArchitectureSpec, n_samples: usize) -> Vec<u8> {
    let layers = Layers::new(arch);
    (1..layers.depth())
        .map(|k| {
            let wide = arch.widths[k] >= n_samples;
            let logs = layers.log_product(1, k - 1) < layers.min_width(0, k);
            u8::from(wide && logs)
        })
        .collect()
}

/// Summand `k` of the lower bound, without the `a_k` mask.
fn lower_term(layers: &Layers<'_>, s: f64, k: usize) -> f64 {
    let big_l = layers.depth();
    s * s
        * saturation(layers.beta(k + 1), s)
        * layers.beta(k).powf(1.5)
        * layers.n(k).powf(1.5)
        * layers.bn_product(1, k - 1)
        * layers.bn(k + 1)
        * layers.sqrt_bn_product(k + 2, big_l - 1)
        * layers.bn(big_l)
}

pub fn theorem31_lower_terms(arch: &ArchitectureSpec, s: f64) -> Vec<f64> {
    let layers = Layers::new(arch);
    (1..layers.depth())
        .map(|k| lower_term(&layers, s, k))
        .collect()
}

/// Summands of the upper bound for `k = 1..L-1`.
pub fn theorem31_upper_terms(arch: &ArchitectureSpec, s: f64) -> Vec<f64> {
    let layers = Layers::new(arch);
    let sqrt_n0 = layers.n(0).sqrt();
    (1..layers.depth())
        .map(|k| s * sqrt_n0 * lower_term(&layers, s, k))
        .collect()
}

/// Lower-bound expression `Σ_k a_k T_k + λ_min(XXᵀ) B` with unit constants,
/// where `T_k = s²(1 - e^{-β_{k+1}² s²}) β_k^{3/2} n_k^{3/2} ∏_{l<k} β_l n_l
/// · β_{k+1} n_{k+1} ∏_{l=k+2}^{L-1} sqrt(β_l n_l) · β_L n_L` and
/// `B = s²(1 - e^{-β_1² s²}) β_1 n_1 ∏_{l=2}^{L-1} sqrt(β_l n_l) β_L n_L`.
pub fn theorem31_lower(
    arch: &ArchitectureSpec,
    s: f64,
    lambda_min_xxt: f64,
    n_samples: usize,
) -> Result<BoundEvaluation> {
    arch.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let layers = Layers::new(arch);
    let big_l = layers.depth();
    let a_flags = wide_layer_flags(arch, n_samples);
    let lower_terms = theorem31_lower_terms(arch, s);
    let data_term = lambda_min_xxt
        * s
        * s
        * saturation(layers.beta(1), s)
        * layers.bn(1)
        * layers.sqrt_bn_product(2, big_l - 1)
        * layers.bn(big_l);
    let masked: f64 = lower_terms
        .iter()
        .zip(&a_flags)
        .map(|(t, &a)| f64::from(a) * t)
        .sum();
    Ok(BoundEvaluation {
        lower_bound_value: masked + data_term,
        upper_bound_value: theorem31_upper(arch, s, n_samples)?,
        a_flags,
        lambda_min_xxt,
        lower_terms,
        data_term,
    })
}

/// Upper-bound expression: the `T_k` above times `s sqrt(n_0)`, summed over
/// `k = 1..L-1`. The saturation factor uses `e^{-β_{k+1}² s²}`.
pub fn theorem31_upper(arch: &ArchitectureSpec, s: f64, n_samples: usize) -> Result<f64> {
    arch.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    Ok(theorem31_upper_terms(arch, s).iter().sum())
}

/// Selector for [`lemma_scaling_predictions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingKind {
    /// `‖f_k(x)‖²`: `s sqrt(n_0) ∏_{l<k} sqrt(β_l n_l) β_k n_k`.
    FeatureNorm { layer: usize },
    /// `‖E_x f_k‖²`: `n_0 ∏_{l≤k} β_l² n_l`.
    FeatureMean { layer: usize },
    /// `‖f_k(x) - E_x f_k‖²`: `sqrt(n_0) β_k n_k ∏_{l<k} sqrt(β_l n_l)`.
    CentredFeature { layer: usize },
    /// `‖Σ_k‖_F²`: `(1 - e^{-β_k² s²}) sqrt(n_0) β_k n_k ∏_{l<k} sqrt(β_l n_l)`.
    SigmaFrobenius { layer: usize },
    /// `‖Σ_k ∏_{l=k+1}^{p} W_l Σ_l‖_F²`:
    /// `s² (1 - e^{-β_k² s²}) sqrt(n_0) β_k n_k [β_p n_p] ∏_{l<p, l≠k} sqrt(β_l n_l)`,
    /// where the bracketed factor appears only when `p > k`.
    ChainProduct { layer: usize, last: usize },
    /// `‖(G_k)_{i:}‖²`:
    /// `s² (1 - e^{-β_k² s²}) sqrt(n_0) β_k n_k β_L n_L ∏_{l<L, l≠k} sqrt(β_l n_l)`.
    GRowNorm { layer: usize },
    /// `‖Σ_k ∏_{l>k} W_l Σ_l‖_op²`: `s n_k / min_{k≤l<L} n_l ∏_{l=k+1}^{L-1} n_l β_l²`.
    OperatorNormChain { layer: usize },
    /// `σ_min(F_k)²`: `sqrt(n_0) β_k n_k ∏_{l<k} sqrt(β_l n_l)`.
    FeatureSigmaMin { layer: usize },
    /// `‖f_k‖_Lip²`: `s^k β_k n_k / min_{l≤k} n_l ∏_{l<k} sqrt(β_l n_l) ∏_{l<k} ln n_l`.
    Lipschitz { layer: usize },
}

impl ScalingKind {
    pub fn layer(&self) -> usize {
        match *self {
            ScalingKind::FeatureNorm { layer }
            | ScalingKind::FeatureMean { layer }
            | ScalingKind::CentredFeature { layer }
            | ScalingKind::SigmaFrobenius { layer }
            | ScalingKind::ChainProduct { layer, .. }
            | ScalingKind::GRowNorm { layer }
            | ScalingKind::OperatorNormChain { layer }
            | ScalingKind::FeatureSigmaMin { layer }
            | ScalingKind::Lipschitz { layer } => layer,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScalingKind::FeatureNorm { .. } => "feature_norm",
            ScalingKind::FeatureMean { .. } => "feature_mean",
            ScalingKind::CentredFeature { .. } => "centred_feature",
            ScalingKind::SigmaFrobenius { .. } => "sigma_frobenius",
            ScalingKind::ChainProduct { .. } => "chain_product",
            ScalingKind::GRowNorm { .. } => "g_row_norm",
            ScalingKind::OperatorNormChain { .. } => "operator_norm_chain",
            ScalingKind::FeatureSigmaMin { .. } => "feature_sigma_min",
            ScalingKind::Lipschitz { .. } => "lipschitz",
        }
    }
}

impl fmt::Display for ScalingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingKind::ChainProduct { layer, last } => write!(f, "chain_product:{layer}:{last}"),
            other => write!(f, "{}:{}", other.name(), other.layer()),
        }
    }
}

impl FromStr for ScalingKind {
    type Err = Error;

    /// Parses `name:layer`, or `chain_product:layer:last`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let index = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("selector {s:?} is missing a layer index"))
                })?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad layer index in {s:?}")))
        };
        let layer = index(1)?;
        let kind = match parts[0] {
            "feature_norm" => ScalingKind::FeatureNorm { layer },
            "feature_mean" => ScalingKind::FeatureMean { layer },
            "centred_feature" => ScalingKind::CentredFeature { layer },
            "sigma_frobenius" => ScalingKind::SigmaFrobenius { layer },
            "chain_product" => ScalingKind::ChainProduct {
                layer,
                last: index(2)?,
            },
            "g_row_norm" => ScalingKind::GRowNorm { layer },
            "operator_norm_chain" => ScalingKind::OperatorNormChain { layer },
            "feature_sigma_min" => ScalingKind::FeatureSigmaMin { layer },
            "lipschitz" => ScalingKind::Lipschitz { layer },
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown scaling selector {other:?}"
                )))
            }
        };
        Ok(kind)
    }
}

/// Constant-free value of the predicted scaling selected by `kind`.
pub fn lemma_scaling_predictions(
    arch: &ArchitectureSpec,
    s: f64,
    kind: ScalingKind,
) -> Result<f64> {
    arch.validate()?;
    let layers = Layers::new(arch);
    let big_l = layers.depth();
    let k = kind.layer();
    let hidden = |k: usize| -> Result<()> {
        if k == 0 || k >= big_l {
            return Err(Error::InvalidInput(format!(
                "{} needs a hidden layer in 1..{big_l}, got {k}",
                kind.name()
            )));
        }
        Ok(())
    };
    let sqrt_n0 = layers.n(0).sqrt();
    let value = match kind {
        ScalingKind::FeatureNorm { .. } => {
            hidden(k)?;
            s * sqrt_n0 * layers.sqrt_bn_product(1, k - 1) * layers.bn(k)
        }
        ScalingKind::FeatureMean { .. } => {
            hidden(k)?;
            layers.n(0)
                * (1..=k)
                    .map(|l| layers.beta(l).powi(2) * layers.n(l))
                    .product::<f64>()
        }
        ScalingKind::CentredFeature { .. } | ScalingKind::FeatureSigmaMin { .. } => {
            hidden(k)?;
            sqrt_n0 * layers.bn(k) * layers.sqrt_bn_product(1, k - 1)
        }
        ScalingKind::SigmaFrobenius { .. } => {
            hidden(k)?;
            saturation(layers.beta(k), s)
                * sqrt_n0
                * layers.bn(k)
                * layers.sqrt_bn_product(1, k - 1)
        }
        ScalingKind::ChainProduct { last, .. } => {
            hidden(k)?;
            hidden(last)?;
            if last < k {
                return Err(Error::InvalidInput(format!(
                    "chain end {last} precedes start {k}"
                )));
            }
            let tail = if last > k { layers.bn(last) } else { 1.0 };
            let others: f64 = (1..last)
                .filter(|&l| l != k)
                .map(|l| layers.bn(l).sqrt())
                .product();
            s * s * saturation(layers.beta(k), s) * sqrt_n0 * layers.bn(k) * tail * others
        }
        ScalingKind::GRowNorm { .. } => {
            hidden(k)?;
            let others: f64 = (1..big_l)
                .filter(|&l| l != k)
                .map(|l| layers.bn(l).sqrt())
                .product();
            s * s
                * saturation(layers.beta(k), s)
                * sqrt_n0
                * layers.bn(k)
                * layers.bn(big_l)
                * others
        }
        ScalingKind::OperatorNormChain { .. } => {
            hidden(k)?;
            let chain: f64 = (k + 1..big_l)
                .map(|l| layers.n(l) * layers.beta(l).powi(2))
                .product();
            s * layers.n(k) / layers.min_width(k, big_l - 1) * chain
        }
        ScalingKind::Lipschitz { .. } => {
            if k == 0 || k > big_l {
                return Err(Error::InvalidInput(format!(
                    "lipschitz needs a layer in 1..={big_l}, got {k}"
                )));
            }
            s.powi(k as i32) * layers.bn(k) / layers.min_width(0, k)
                * layers.sqrt_bn_product(1, k - 1)
                * layers.log_product(1, k - 1)
        }
    };
    Ok(value)
}
