use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::network::{ActivationKind, ActivationSpec, ArchitectureSpec, InitMode, SamplerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NtkScaling,
    Lipschitz,
    LemmaProbe,
    Memorize,
    BoundsTable,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::NtkScaling => "ntk_scaling",
            ExperimentKind::Lipschitz => "lipschitz",
            ExperimentKind::LemmaProbe => "lemma_probe",
            ExperimentKind::Memorize => "memorize",
            ExperimentKind::BoundsTable => "bounds_table",
        }
    }
}

/// How the swept width and the sample count move together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SweepRule {
    /// `n_layer = factor · N` for each `N` in `samples`.
    Proportional {
        layer: usize,
        factor: usize,
        samples: Vec<usize>,
    },
    /// `n_layer` takes each of `values` with a fixed sample count.
    Width {
        layer: usize,
        values: Vec<usize>,
        samples: usize,
    },
}

impl SweepRule {
    pub fn layer(&self) -> usize {
        match self {
            SweepRule::Proportional { layer, .. } | SweepRule::Width { layer, .. } => *layer,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepRule::Proportional { samples, .. } => samples.len(),
            SweepRule::Width { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(n_layer, N)` for every point.
    pub fn points(&self) -> Vec<(usize, usize)> {
        match self {
            SweepRule::Proportional {
                factor, samples, ..
            } => samples.iter().map(|&n| (factor * n, n)).collect(),
            SweepRule::Width {
                values, samples, ..
            } => values.iter().map(|&v| (v, *samples)).collect(),
        }
    }
}

/// One probe of the lemma suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "snake_case")]
pub enum ProbeSpec {
    FeatureNorm {
        layer: usize,
    },
    SigmaFrobenius {
        layer: usize,
    },
    ChainProduct {
        layer: usize,
        last: usize,
    },
    GRowNorm {
        layer: usize,
    },
    OperatorNormChain {
        layer: usize,
    },
    FeatureSigmaMin {
        layer: usize,
    },
    CentredFeatures {
        layer: usize,
    },
    Lipschitz {
        layer: usize,
    },
    Gershgorin {
        layer: usize,
    },
    Moments {
        frequencies: Vec<f64>,
        input_stds: Vec<f64>,
        draws: usize,
    },
}

impl ProbeSpec {
    pub fn name(&self) -> String {
        match self {
            ProbeSpec::FeatureNorm { layer } => format!("feature_norm_{layer}"),
            ProbeSpec::SigmaFrobenius { layer } => format!("sigma_frobenius_{layer}"),
            ProbeSpec::ChainProduct { layer, last } => format!("chain_product_{layer}_{last}"),
            ProbeSpec::GRowNorm { layer } => format!("g_row_norm_{layer}"),
            ProbeSpec::OperatorNormChain { layer } => format!("operator_norm_chain_{layer}"),
            ProbeSpec::FeatureSigmaMin { layer } => format!("feature_sigma_min_{layer}"),
            ProbeSpec::CentredFeatures { layer } => format!("centred_features_{layer}"),
            ProbeSpec::Lipschitz { layer } => format!("lipschitz_{layer}"),
            ProbeSpec::Gershgorin { layer } => format!("gershgorin_{layer}"),
            ProbeSpec::Moments { .. } => "moments".to_string(),
        }
    }

    /// One of every probe for a network with `depth` layers.
    pub fn default_suite(depth: usize) -> Vec<ProbeSpec> {
        let last_hidden = depth.saturating_sub(1).max(1);
        vec![
            ProbeSpec::FeatureNorm { layer: 1 },
            ProbeSpec::SigmaFrobenius { layer: 1 },
            ProbeSpec::ChainProduct {
                layer: 1,
                last: last_hidden,
            },
            ProbeSpec::GRowNorm { layer: 1 },
            ProbeSpec::OperatorNormChain { layer: 1 },
            ProbeSpec::FeatureSigmaMin { layer: 1 },
            ProbeSpec::CentredFeatures { layer: 1 },
            ProbeSpec::Lipschitz { layer: last_hidden },
            ProbeSpec::Gershgorin { layer: 1 },
            ProbeSpec::Moments {
                frequencies: vec![0.5, 1.0, 2.0, 5.0],
                input_stds: vec![0.25, 1.0, 4.0],
                draws: 100_000,
            },
        ]
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_activations() -> Vec<ActivationKind> {
    vec![ActivationKind::Cosine, ActivationKind::Relu]
}

fn default_trials() -> usize {
    1
}

fn default_lipschitz_samples() -> usize {
    1000
}

fn default_mean_samples() -> usize {
    crate::probes::DEFAULT_MEAN_SAMPLES
}

fn default_epsilon() -> f64 {
    1e-2
}

/// A full experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_activations")]
    pub activations: Vec<ActivationKind>,
    /// Frequency of the periodic activations; ignored by relu.
    pub s: f64,
    /// Input dimension, a number or a list of numbers.
    #[serde(deserialize_with = "one_or_many")]
    pub n0: Vec<usize>,
    /// `n_1, …, n_L`; the swept entry is overwritten per point.
    pub widths: Vec<usize>,
    pub sweep: SweepRule,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inputs per network for the Lipschitz sweep.
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    /// Layer whose map `x ↦ f_k(x)` the Lipschitz sweep measures; defaults to `L-1`.
    #[serde(default)]
    pub lipschitz_layer: Option<usize>,
    /// Probe list for `lemma_probe`; empty means the default suite.
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    /// Fresh samples behind the feature mean of the centred-feature check.
    #[serde(default = "default_mean_samples")]
    pub mean_samples: usize,
    /// Memorization succeeds when the residual is below `epsilon · ‖Y‖₂`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Attach per-instance inequality checks to kernel records.
    #[serde(default)]
    pub check_inequalities: bool,
    /// Fill the `wall_ms` column; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.activations.is_empty() {
            return bad("activation list is empty".into());
        }
        if self.n0.is_empty() || self.n0.contains(&0) {
            return bad("n0 must list positive input dimensions".into());
        }
        if self.widths.is_empty() || *self.widths.last().unwrap() != 1 {
            return bad("widths must end with the scalar output width 1".into());
        }
        if self.sweep.is_empty() {
            return bad("sweep has no points".into());
        }
        let layer = self.sweep.layer();
        if layer == 0 || layer >= self.widths.len() {
            return bad(format!("sweep layer {layer} is not a hidden layer"));
        }
        if self.sweep.points().iter().any(|&(w, n)| w == 0 || n == 0) {
            return bad("sweep points need positive widths and sample counts".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return bad(format!("frequency s must be positive, got {}", self.s));
        }
        if let InitMode::Explicit(betas) = &self.init {
            if betas.len() != self.widths.len() {
                return bad(format!(
                    "{} init scales for {} layers",
                    betas.len(),
                    self.widths.len()
                ));
            }
        }
        if self.lipschitz_samples == 0 {
            return bad("lipschitz_samples must be positive".into());
        }
        if let Some(k) = self.lipschitz_layer {
            if k == 0 || k > self.widths.len() {
                return bad(format!("lipschitz layer {k} out of range"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn activation(&self, kind: ActivationKind) -> ActivationSpec {
        match kind {
            ActivationKind::Cosine => ActivationSpec::cosine(self.s),
            ActivationKind::Sine => ActivationSpec::sine(self.s),
            ActivationKind::Relu => ActivationSpec::relu(),
            ActivationKind::Identity => ActivationSpec::identity(),
        }
    }

    /// Full width list `[n_0, n_1, …, n_L]` with the swept layer set to `value`.
    pub fn widths_at(&self, n0: usize, value: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.widths.len() + 1);
        widths.push(n0);
        widths.extend(&self.widths);
        widths[self.sweep.layer()] = value;
        widths
    }

    pub fn architecture(
        &self,
        kind: ActivationKind,
        n0: usize,
        value: usize,
    ) -> Result<ArchitectureSpec> {
        ArchitectureSpec::with_init(self.widths_at(n0, value), self.activation(kind), &self.init)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    pub fn probe_suite(&self) -> Vec<ProbeSpec> {
        if self.probes.is_empty() {
            ProbeSpec::default_suite(self.depth())
        } else {
            self.probes.clone()
        }
    }
}

/// Named configurations shipped with the crate.
pub mod presets {
    use super::*;

    fn ntk_scaling(
        n0: usize,
        n2: usize,
        factor: usize,
        samples: Vec<usize>,
        trials: usize,
    ) -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::NtkScaling,
            activations: default_activations(),
            s: 5.0,
            n0: vec![n0],
            widths: vec![factor * samples[0], n2, 1],
            sweep: SweepRule::Proportional {
                layer: 1,
                factor,
                samples,
            },
            init: InitMode::He,
            sampler: SamplerKind::GaussianIid,
            trials,
            seed: 0,
            lipschitz_samples: default_lipschitz_samples(),
            lipschitz_layer: None,
            probes: Vec::new(),
            mean_samples: default_mean_samples(),
            epsilon: default_epsilon(),
            check_inequalities: false,
            record_wall_time: false,
        }
    }

    /// `n_0 = n_2 = 64`, `n_1 = 8N`, `N ∈ {8, …, 64}`, five trials.
    pub fn fig1_desk() -> SweepConfig {
        ntk_scaling(64, 64, 8, vec![8, 16, 24, 32, 48, 64], 5)
    }

    /// As [`fig1_desk`] with `n_1 = 15N`.
    pub fn fig2_desk() -> SweepConfig {
        ntk_scaling(64, 64, 15, vec![8, 16, 24, 32, 48, 64], 5)
    }

    /// `n_0 = n_2 = 400`, `n_1 = 8N`.
    pub fn fig1_full() -> SweepConfig {
        ntk_scaling(400, 400, 8, vec![25, 50, 100, 150, 200, 300, 400], 5)
    }

    /// `n_0 = n_2 = 400`, `n_1 = 15N`.
    pub fn fig2_full() -> SweepConfig {
        ntk_scaling(400, 400, 15, vec![25, 50, 100, 150, 200, 300, 400], 5)
    }

    fn lipschitz(n0: Vec<usize>, values: Vec<usize>, trials: usize) -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::Lipschitz,
            s: 30.0,
            n0,
            widths: vec![64, 64, values[0], 1],
            sweep: SweepRule::Width {
                layer: 3,
                values,
                samples: default_lipschitz_samples(),
            },
            trials,
            ..ntk_scaling(64, 64, 1, vec![1], trials)
        }
    }

    /// `n_1 = n_2 = 64`, `n_3 ∈ {64, …, 1024}`, `n_0 ∈ {64, 200}`, `s = 30`.
    pub fn fig3_desk() -> SweepConfig {
        lipschitz(vec![64, 200], vec![64, 128, 256, 512, 1024], 3)
    }

    /// `n_3` up to 2048 with `n_0 ∈ {200, 400}`.
    pub fn fig3_full() -> SweepConfig {
        lipschitz(vec![200, 400], vec![64, 128, 256, 512, 1024, 2048], 3)
    }

    /// Smallest singular value of `F_1` with `N = 16`, `n_1 ∈ {32, …, 512}`.
    pub fn feature_sigma_min() -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::LemmaProbe,
            activations: vec![ActivationKind::Cosine],
            s: 5.0,
            n0: vec![64],
            widths: vec![32, 64, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![32, 64, 128, 256, 512],
                samples: 16,
            },
            trials: 10,
            probes: vec![ProbeSpec::FeatureSigmaMin { layer: 1 }],
            ..fig1_desk()
        }
    }

    /// Widths `[4, 64, 32, 1]`, `N = 16`, cosine `s = 2`, forty seeds.
    pub fn memorize16() -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::Memorize,
            activations: vec![ActivationKind::Cosine],
            s: 2.0,
            n0: vec![4],
            widths: vec![64, 32, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![64],
                samples: 16,
            },
            trials: 40,
            ..fig1_desk()
        }
    }

    /// The lemma suite on a small three-layer network.
    pub fn lemma_suite() -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::LemmaProbe,
            activations: vec![ActivationKind::Cosine, ActivationKind::Relu],
            s: 5.0,
            n0: vec![16],
            widths: vec![64, 64, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![64, 128, 256, 512],
                samples: 16,
            },
            trials: 5,
            ..fig1_desk()
        }
    }

    /// Monte Carlo Gaussian moments on a 4 x 3 grid of frequencies and input
    /// deviations, one million draws each.
    pub fn moment_identities() -> SweepConfig {
        SweepConfig {
            probes: vec![ProbeSpec::Moments {
                frequencies: vec![0.5, 1.0, 2.0, 5.0],
                input_stds: vec![0.25, 1.0, 4.0],
                draws: 1_000_000,
            }],
            ..lemma_suite()
        }
    }

    /// Twenty small four-layer networks per activation with six samples.
    pub fn oracle_small() -> SweepConfig {
        SweepConfig {
            activations: vec![
                ActivationKind::Cosine,
                ActivationKind::Sine,
                ActivationKind::Relu,
            ],
            s: 3.0,
            n0: vec![3],
            widths: vec![8, 6, 5, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![8],
                samples: 6,
            },
            trials: 20,
            ..fig1_desk()
        }
    }

    /// The fig-1 desk sweep as a theory comparison table.
    pub fn bounds_desk() -> SweepConfig {
        SweepConfig {
            experiment: ExperimentKind::BoundsTable,
            ..fig1_desk()
        }
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "fig1_desk",
            "fig2_desk",
            "fig1_full",
            "fig2_full",
            "fig3_desk",
            "fig3_full",
            "feature_sigma_min",
            "memorize16",
            "lemma_suite",
            "moment_identities",
            "bounds_desk",
            "oracle_small",
        ]
    }

    pub fn by_name(name: &str) -> Option<SweepConfig> {
        Some(match name {
            "fig1_desk" => fig1_desk(),
            "fig2_desk" => fig2_desk(),
            "fig1_full" => fig1_full(),
            "fig2_full" => fig2_full(),
            "fig3_desk" => fig3_desk(),
            "fig3_full" => fig3_full(),
            "feature_sigma_min" => feature_sigma_min(),
            "memorize16" => memorize16(),
            "lemma_suite" => lemma_suite(),
            "moment_identities" => moment_identities(),
            "bounds_desk" => bounds_desk(),
            "oracle_small" => oracle_small(),
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in presets::names() {
            let cfg = presets::by_name(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(
                SweepConfig::from_json(&cfg.to_json()).unwrap(),
                cfg,
                "{name}"
            );
        }
    }

    #[test]
    fn minimal_json() {
        let cfg = SweepConfig::from_json(
            r#"{"experiment": "ntk_scaling", "s": 5, "n0": 8, "widths": [16, 8, 1],
                "sweep": {"rule": "proportional", "layer": 1, "factor": 2, "samples": [4, 8]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.n0, vec![8]);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.init, InitMode::He);
        assert_eq!(cfg.sweep.points(), vec![(8, 4), (16, 8)]);
        assert_eq!(cfg.widths_at(8, 16), vec![8, 16, 8, 1]);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = r#""experiment": "ntk_scaling", "s": 5, "n0": 8, "widths": [16, 8, 1]"#;
        for extra in [
            r#""sweep": {"rule": "width", "layer": 1, "values": [], "samples": 4}"#,
            r#""sweep": {"rule": "width", "layer": 3, "values": [4], "samples": 4}"#,
            r#""sweep": {"rule": "width", "layer": 1, "values": [4], "samples": 4}, "trials": 0"#,
            r#""sweep": {"rule": "width", "layer": 1, "values": [4], "samples": 4}, "bogus": 1"#,
        ] {
            let text = format!("{{{base}, {extra}}}");
            assert!(
                matches!(SweepConfig::from_json(&text), Err(Error::Config(_))),
                "{extra}"
            );
        }
        assert!(SweepConfig::from_json("not json").is_err());
    }
}
