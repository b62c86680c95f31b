use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checks::{check_with_kernel, derivatives_bounded, InstanceChecks};
use super::config::{ExperimentKind, ProbeSpec, SweepConfig, SweepRule};
use super::table::{cell, opt_cell, CsvTable};
use crate::error::{Error, Result};
use crate::linalg::{loglog_slope, norm2, sym_eigen, SlopeFit};
use crate::memorization::{certify_rank, fit_targets, realize_as_network, MemorizationTask};
use crate::network::{
    forward_batch, init_network, outputs, sample_dataset, sample_inputs, ActivationKind, Dataset,
    NetworkState,
};
use crate::ntk::{empirical_ntk, feature_matrix, finite_difference_jacobian, jacobian_gram};
use crate::probes::{
    empirical_lipschitz, gershgorin_bounds, monte_carlo_moments, probe_centred_features,
    probe_chain_product, probe_feature_norm, probe_feature_sigma_min, probe_operator_norm_chain,
    probe_sigma_frobenius, ProbeResult, ProbeSetup, WidthSweep,
};
use crate::rng::{GaussianSource, Stream};
use crate::theory::{
    gaussian_activation_moments, lemma_scaling_predictions, theorem31_lower, ScalingKind,
};

/// Runs `f` over `items`, on a pool of `workers` threads when `workers > 1`.
/// Results keep the order of `items`.
pub fn run_grid<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn expect_kind(cfg: &SweepConfig, kind: ExperimentKind) -> Result<()> {
    cfg.validate()?;
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "config describes a {} experiment, not {}",
            cfg.experiment.name(),
            kind.name()
        )));
    }
    Ok(())
}

fn geometric_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

fn elapsed_ms(start: Option<Instant>) -> Option<f64> {
    start.map(|t| t.elapsed().as_secs_f64() * 1e3)
}

/// Trial-aggregated curve and its log-log fit for one activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub activation: ActivationKind,
    pub n0: usize,
    /// `(sweep value, geometric mean over usable trials)`.
    pub points: Vec<(f64, f64)>,
    pub fit: Option<SlopeFit>,
}

impl CurveFit {
    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

fn curve_fit(activation: ActivationKind, n0: usize, grouped: Vec<(f64, Vec<f64>)>) -> CurveFit {
    let points: Vec<(f64, f64)> = grouped
        .into_iter()
        .filter_map(|(x, ys)| geometric_mean(&ys).map(|g| (x, g)))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    CurveFit {
        activation,
        n0,
        points,
        fit: loglog_slope(&xs, &ys).ok(),
    }
}

// ---------------------------------------------------------------------------
// Kernel scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkRecord {
    pub activation: ActivationKind,
    pub s: f64,
    pub widths: Vec<usize>,
    pub n_samples: usize,
    pub sweep_value: usize,
    pub trial: usize,
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_min_clamped: f64,
    /// `λ_min ≤ 0`: left out of the log fit.
    pub excluded: bool,
    pub wall_ms: Option<f64>,
    pub checks: Option<InstanceChecks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkScalingReport {
    pub records: Vec<NtkRecord>,
    pub fits: Vec<CurveFit>,
    /// Share of adjacent sweep pairs over which the trial-averaged clamped
    /// `λ_min` does not decrease, per entry of `fits`.
    pub monotone_fraction: Vec<f64>,
}

impl NtkScalingReport {
    pub fn fit_for(&self, activation: ActivationKind) -> Option<&CurveFit> {
        self.fits.iter().find(|f| f.activation == activation)
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "ntk_scaling",
            &[
                "experiment",
                "activation",
                "s",
                "n0",
                "n1",
                "n2",
                "N",
                "trial",
                "seed",
                "lambda_min",
                "lambda_min_clamped",
                "excluded",
                "wall_ms",
            ],
        );
        for r in &self.records {
            t.push(vec![
                "ntk_scaling".into(),
                r.activation.name().into(),
                cell(r.s),
                cell(r.widths[0]),
                cell(r.widths[1]),
                cell(r.widths[2]),
                cell(r.n_samples),
                cell(r.trial),
                cell(r.seed),
                cell(r.lambda_min),
                cell(r.lambda_min_clamped),
                cell(r.excluded),
                opt_cell(r.wall_ms),
            ]);
        }
        t
    }

    pub fn fit_table(&self) -> CsvTable {
        fit_table("ntk_scaling_fit", &self.fits)
    }
}

fn fit_table(name: &str, fits: &[CurveFit]) -> CsvTable {
    let mut t = CsvTable::new(
        name,
        &[
            "activation",
            "n0",
            "points",
            "slope",
            "intercept",
            "r_squared",
        ],
    );
    for f in fits {
        t.push(vec![
            f.activation.name().into(),
            cell(f.n0),
            cell(f.points.len()),
            opt_cell(f.fit.map(|x| x.slope)),
            opt_cell(f.fit.map(|x| x.intercept)),
            opt_cell(f.fit.map(|x| x.r_squared)),
        ]);
    }
    t
}

#[derive(Debug, Clone, Copy)]
struct Task {
    activation: ActivationKind,
    n0: usize,
    value: usize,
    n_samples: usize,
    trial: usize,
}

/// Tasks ordered by sweep point, then trial, then input dimension and
/// activation in config order.
fn task_grid(cfg: &SweepConfig) -> Vec<Task> {
    let mut tasks = Vec::new();
    for (value, n_samples) in cfg.sweep.points() {
        for trial in 0..cfg.trials {
            for &n0 in &cfg.n0 {
                for &activation in &cfg.activations {
                    tasks.push(Task {
                        activation,
                        n0,
                        value,
                        n_samples,
                        trial,
                    });
                }
            }
        }
    }
    tasks
}

fn group_by_curve<R>(
    cfg: &SweepConfig,
    records: &[R],
    key: impl Fn(&R) -> (ActivationKind, usize, usize),
    value: impl Fn(&R) -> Option<f64>,
) -> Vec<CurveFit> {
    let mut fits = Vec::new();
    for &activation in &cfg.activations {
        for &n0 in &cfg.n0 {
            let grouped: Vec<(f64, Vec<f64>)> = cfg
                .sweep
                .points()
                .iter()
                .map(|&(x, _)| {
                    let ys = records
                        .iter()
                        .filter(|r| key(r) == (activation, n0, x))
                        .filter_map(&value)
                        .collect();
                    (x as f64, ys)
                })
                .collect();
            fits.push(curve_fit(activation, n0, grouped));
        }
    }
    fits
}

/// Smallest kernel eigenvalue across the sweep, per activation.
pub fn run_ntk_scaling(cfg: &SweepConfig, workers: usize) -> Result<NtkScalingReport> {
    expect_kind(cfg, ExperimentKind::NtkScaling)?;
    if cfg.depth() != 3 {
        return Err(Error::Config(
            "kernel scaling uses three-layer networks: widths [n1, n2, 1]".into(),
        ));
    }
    let tasks = task_grid(cfg);
    let records = run_grid(&tasks, workers, |t| {
        let start = cfg.record_wall_time.then(Instant::now);
        let seed = cfg.trial_seed(t.trial);
        let arch = cfg.architecture(t.activation, t.n0, t.value)?;
        let state = init_network(&arch, seed)?;
        let data = sample_dataset(t.n0, t.n_samples, cfg.sampler, seed)?;
        let kernel = empirical_ntk(&state, &data)?;
        let lambda_min = kernel.lambda_min();
        let checks = if cfg.check_inequalities {
            Some(check_with_kernel(&state, &data, &kernel, cfg.mean_samples)?)
        } else {
            None
        };
        Ok(NtkRecord {
            activation: t.activation,
            s: cfg.s,
            widths: arch.widths.clone(),
            n_samples: t.n_samples,
            sweep_value: t.value,
            trial: t.trial,
            seed,
            lambda_min,
            lambda_min_clamped: kernel.lambda_min_clamped(),
            excluded: !(lambda_min > 0.0),
            wall_ms: elapsed_ms(start),
            checks,
        })
    })?;
    let fits = group_by_curve(
        cfg,
        &records,
        |r| (r.activation, r.widths[0], r.sweep_value),
        |r| (!r.excluded).then_some(r.lambda_min),
    );
    let monotone_fraction = fits
        .iter()
        .map(|f| {
            let means: Vec<f64> = cfg
                .sweep
                .points()
                .iter()
                .map(|&(x, _)| {
                    let vals: Vec<f64> = records
                        .iter()
                        .filter(|r| {
                            r.activation == f.activation
                                && r.widths[0] == f.n0
                                && r.sweep_value == x
                        })
                        .map(|r| r.lambda_min_clamped)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect();
            let pairs = means.len().saturating_sub(1);
            if pairs == 0 {
                return 1.0;
            }
            means.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / pairs as f64
        })
        .collect();
    Ok(NtkScalingReport {
        records,
        fits,
        monotone_fraction,
    })
}

// ---------------------------------------------------------------------------
// Lipschitz constants

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRecord {
    pub activation: ActivationKind,
    pub s: f64,
    pub widths: Vec<usize>,
    pub layer: usize,
    pub sweep_value: usize,
    pub n_samples: usize,
    pub trial: usize,
    pub seed: u64,
    pub elip: f64,
    pub predicted: Option<f64>,
    pub wall_ms: Option<f64>,
    /// Derivative bound over all samples; the other checks on the first
    /// [`LIPSCHITZ_CHECK_SAMPLES`] of them.
    pub checks: Option<InstanceChecks>,
}

/// Samples entering the kernel checks of a Lipschitz instance.
pub const LIPSCHITZ_CHECK_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub records: Vec<LipschitzRecord>,
    pub fits: Vec<CurveFit>,
}

impl LipschitzReport {
    pub fn fit_for(&self, activation: ActivationKind, n0: usize) -> Option<&CurveFit> {
        self.fits
            .iter()
            .find(|f| f.activation == activation && f.n0 == n0)
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "lipschitz",
            &[
                "experiment",
                "activation",
                "s",
                "widths",
                "layer",
                "sweep_value",
                "samples",
                "trial",
                "seed",
                "elip",
                "predicted",
                "wall_ms",
            ],
        );
        for r in &self.records {
            t.push(vec![
                "lipschitz".into(),
                r.activation.name().into(),
                cell(r.s),
                r.widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("-"),
                cell(r.layer),
                cell(r.sweep_value),
                cell(r.n_samples),
                cell(r.trial),
                cell(r.seed),
                cell(r.elip),
                opt_cell(r.predicted),
                opt_cell(r.wall_ms),
            ]);
        }
        t
    }

    pub fn fit_table(&self) -> CsvTable {
        fit_table("lipschitz_fit", &self.fits)
    }
}

/// Empirical Lipschitz constant of `x ↦ f_k(x)` over `lipschitz_samples`
/// inputs, per activation and input dimension.
pub fn run_lipschitz_sweep(cfg: &SweepConfig, workers: usize) -> Result<LipschitzReport> {
    expect_kind(cfg, ExperimentKind::Lipschitz)?;
    let layer = cfg.lipschitz_layer.unwrap_or(cfg.depth() - 1).max(1);
    let tasks = task_grid(cfg);
    let records = run_grid(&tasks, workers, |t| {
        let start = cfg.record_wall_time.then(Instant::now);
        let seed = cfg.trial_seed(t.trial);
        let arch = cfg.architecture(t.activation, t.n0, t.value)?;
        let state = init_network(&arch, seed)?;
        let data = sample_dataset(t.n0, cfg.lipschitz_samples, cfg.sampler, seed)?;
        let elip = empirical_lipschitz(&state, &data, layer)?;
        let checks = if cfg.check_inequalities {
            let head: Vec<usize> = (0..data.len().min(LIPSCHITZ_CHECK_SAMPLES)).collect();
            let subset = Dataset {
                samples: data.samples.permute_rows(&head),
                ..data.clone()
            };
            let mut c = super::checks::check_instance(&state, &subset, cfg.mean_samples)?;
            c.derivative_bound &=
                derivatives_bounded(&state, &forward_batch(&state, &data.samples)?);
            Some(c)
        } else {
            None
        };
        let predicted =
            lemma_scaling_predictions(&arch, cfg.s, ScalingKind::Lipschitz { layer }).ok();
        Ok(LipschitzRecord {
            activation: t.activation,
            s: cfg.s,
            widths: arch.widths.clone(),
            layer,
            sweep_value: t.value,
            n_samples: cfg.lipschitz_samples,
            trial: t.trial,
            seed,
            elip,
            predicted,
            wall_ms: elapsed_ms(start),
            checks,
        })
    })?;
    let fits = group_by_curve(
        cfg,
        &records,
        |r| (r.activation, r.widths[0], r.sweep_value),
        |r| Some(r.elip),
    );
    Ok(LipschitzReport { records, fits })
}

// ---------------------------------------------------------------------------
// Measured eigenvalue against the theoretical bounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub activation: ActivationKind,
    pub s: f64,
    pub widths: Vec<usize>,
    pub n_samples: usize,
    pub sweep_value: usize,
    pub trial: usize,
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_min_xxt: f64,
    pub lower: f64,
    pub upper: f64,
    pub a_flags: Vec<u8>,
    /// `λ_min / lower`; `None` when either is not positive.
    pub measured_over_lower: Option<f64>,
    /// `upper / λ_min`; `None` when either is not positive.
    pub upper_over_measured: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub activation: ActivationKind,
    pub n0: usize,
    /// Slope of log(measured) against log(lower expression) over sweep points.
    pub slope_vs_lower: Option<f64>,
    /// `max / min` of the trial-averaged `measured / lower` ratio.
    pub lower_ratio_band: Option<f64>,
    pub upper_ratio_band: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub records: Vec<BoundsRecord>,
    pub summaries: Vec<BoundsSummary>,
}

impl BoundsReport {
    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "bounds_table",
            &[
                "experiment",
                "activation",
                "s",
                "widths",
                "N",
                "trial",
                "seed",
                "lambda_min",
                "lambda_min_xxt",
                "lower",
                "upper",
                "measured_over_lower",
                "upper_over_measured",
                "a_flags",
            ],
        );
        for r in &self.records {
            t.push(vec![
                "bounds_table".into(),
                r.activation.name().into(),
                cell(r.s),
                r.widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("-"),
                cell(r.n_samples),
                cell(r.trial),
                cell(r.seed),
                cell(r.lambda_min),
                cell(r.lambda_min_xxt),
                cell(r.lower),
                cell(r.upper),
                opt_cell(r.measured_over_lower),
                opt_cell(r.upper_over_measured),
                r.a_flags
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(""),
            ]);
        }
        t
    }

    pub fn summary_table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "bounds_summary",
            &[
                "activation",
                "n0",
                "slope_vs_lower",
                "lower_ratio_band",
                "upper_ratio_band",
            ],
        );
        for s in &self.summaries {
            t.push(vec![
                s.activation.name().into(),
                cell(s.n0),
                opt_cell(s.slope_vs_lower),
                opt_cell(s.lower_ratio_band),
                opt_cell(s.upper_ratio_band),
            ]);
        }
        t
    }
}

fn positive_ratio(num: f64, den: f64) -> Option<f64> {
    (num > 0.0 && den > 0.0).then(|| num / den)
}

fn band(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi / lo)
}

/// Kernel eigenvalue against both bound expressions at every sweep point.
pub fn run_bounds_table(cfg: &SweepConfig, workers: usize) -> Result<BoundsReport> {
    expect_kind(cfg, ExperimentKind::BoundsTable)?;
    let tasks = task_grid(cfg);
    let records = run_grid(&tasks, workers, |t| {
        let seed = cfg.trial_seed(t.trial);
        let arch = cfg.architecture(t.activation, t.n0, t.value)?;
        let state = init_network(&arch, seed)?;
        let data = sample_dataset(t.n0, t.n_samples, cfg.sampler, seed)?;
        let lambda_min = empirical_ntk(&state, &data)?.lambda_min();
        let lambda_min_xxt = sym_eigen(&data.samples.gram_rows())?.min().max(0.0);
        let bounds = theorem31_lower(&arch, cfg.s, lambda_min_xxt, t.n_samples)?;
        Ok(BoundsRecord {
            activation: t.activation,
            s: cfg.s,
            widths: arch.widths.clone(),
            n_samples: t.n_samples,
            sweep_value: t.value,
            trial: t.trial,
            seed,
            lambda_min,
            lambda_min_xxt,
            lower: bounds.lower_bound_value,
            upper: bounds.upper_bound_value,
            a_flags: bounds.a_flags,
            measured_over_lower: positive_ratio(lambda_min, bounds.lower_bound_value),
            upper_over_measured: positive_ratio(bounds.upper_bound_value, lambda_min),
        })
    })?;
    let mut summaries = Vec::new();
    for &activation in &cfg.activations {
        for &n0 in &cfg.n0 {
            let mut measured = Vec::new();
            let mut lower = Vec::new();
            let mut lower_ratio = Vec::new();
            let mut upper_ratio = Vec::new();
            for (x, _) in cfg.sweep.points() {
                let at: Vec<&BoundsRecord> = records
                    .iter()
                    .filter(|r| {
                        r.activation == activation && r.widths[0] == n0 && r.sweep_value == x
                    })
                    .collect();
                let m = geometric_mean(&at.iter().map(|r| r.lambda_min).collect::<Vec<_>>());
                let l = geometric_mean(&at.iter().map(|r| r.lower).collect::<Vec<_>>());
                if let (Some(m), Some(l)) = (m, l) {
                    measured.push(m);
                    lower.push(l);
                    lower_ratio.push(m / l);
                }
                let u = geometric_mean(&at.iter().map(|r| r.upper).collect::<Vec<_>>());
                if let (Some(m), Some(u)) = (m, u) {
                    upper_ratio.push(u / m);
                }
            }
            summaries.push(BoundsSummary {
                activation,
                n0,
                slope_vs_lower: loglog_slope(&lower, &measured).ok().map(|f| f.slope),
                lower_ratio_band: band(&lower_ratio),
                upper_ratio_band: band(&upper_ratio),
            });
        }
    }
    Ok(BoundsReport { records, summaries })
}

// ---------------------------------------------------------------------------
// Memorization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationRecord {
    pub activation: ActivationKind,
    pub widths: Vec<usize>,
    pub n_samples: usize,
    pub trial: usize,
    pub seed: u64,
    pub rank: usize,
    pub in_rank_set: bool,
    pub target_norm: f64,
    pub residual: Option<f64>,
    pub chosen_h: Option<f64>,
    pub success: Option<bool>,
    /// Max `|doubled net - g_h|` on the training inputs.
    pub realization_error: Option<f64>,
    /// The same on fresh inputs.
    pub off_training_error: Option<f64>,
    /// `(h, residual)` over the step scan.
    pub curve: Vec<(f64, f64)>,
    pub checks: Option<InstanceChecks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub records: Vec<MemorizationRecord>,
}

impl MemorizationReport {
    pub fn certified(&self) -> usize {
        self.records.iter().filter(|r| r.in_rank_set).count()
    }

    pub fn fitted(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.success == Some(true))
            .count()
    }

    pub fn worst_realization_error(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.realization_error)
            .reduce(f64::max)
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "memorize",
            &[
                "experiment",
                "activation",
                "widths",
                "N",
                "trial",
                "seed",
                "rank",
                "in_rank_set",
                "target_norm",
                "residual",
                "chosen_h",
                "success",
                "realization_error",
                "off_training_error",
            ],
        );
        for r in &self.records {
            t.push(vec![
                "memorize".into(),
                r.activation.name().into(),
                r.widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("-"),
                cell(r.n_samples),
                cell(r.trial),
                cell(r.seed),
                cell(r.rank),
                cell(r.in_rank_set),
                cell(r.target_norm),
                opt_cell(r.residual),
                opt_cell(r.chosen_h),
                opt_cell(r.success),
                opt_cell(r.realization_error),
                opt_cell(r.off_training_error),
            ]);
        }
        t
    }

    pub fn curve_table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "memorize_curve",
            &["activation", "trial", "seed", "h", "residual"],
        );
        for r in &self.records {
            for &(h, res) in &r.curve {
                t.push(vec![
                    r.activation.name().into(),
                    cell(r.trial),
                    cell(r.seed),
                    cell(h),
                    cell(res),
                ]);
            }
        }
        t
    }
}

/// Number of fresh inputs on which the realized network is compared.
pub const OFF_TRAINING_INPUTS: usize = 100;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Certify, fit Gaussian targets and realize the fit, once per trial seed.
pub fn run_memorization(cfg: &SweepConfig, workers: usize) -> Result<MemorizationReport> {
    expect_kind(cfg, ExperimentKind::Memorize)?;
    let tasks = task_grid(cfg);
    let records = run_grid(&tasks, workers, |t| {
        let seed = cfg.trial_seed(t.trial);
        let arch = cfg.architecture(t.activation, t.n0, t.value)?;
        let state = init_network(&arch, seed)?;
        let data = sample_dataset(t.n0, t.n_samples, cfg.sampler, seed)?;
        let mut gauss = GaussianSource::new(seed, Stream::Targets);
        let targets: Vec<f64> = (0..t.n_samples).map(|_| gauss.standard_normal()).collect();
        let target_norm = norm2(&targets);
        let checks = if cfg.check_inequalities {
            Some(super::checks::check_instance(
                &state,
                &data,
                cfg.mean_samples,
            )?)
        } else {
            None
        };
        let certificate = certify_rank(&state, &data)?;
        let mut record = MemorizationRecord {
            activation: t.activation,
            widths: arch.widths.clone(),
            n_samples: t.n_samples,
            trial: t.trial,
            seed,
            rank: certificate.rank,
            in_rank_set: certificate.in_rank_set,
            target_norm,
            residual: None,
            chosen_h: None,
            success: None,
            realization_error: None,
            off_training_error: None,
            curve: Vec::new(),
            checks,
        };
        if !certificate.in_rank_set {
            return Ok(record);
        }
        let mut task =
            MemorizationTask::new(data.clone(), targets, cfg.epsilon * target_norm, state)?;
        let outcome = fit_targets(&mut task)?;
        let h = outcome.chosen_h;
        let doubled = realize_as_network(&task, h)?;
        let fresh = sample_inputs(
            t.n0,
            OFF_TRAINING_INPUTS,
            cfg.sampler,
            seed,
            Stream::Auxiliary,
        )?;
        record.realization_error = Some(max_abs_diff(
            &outputs(&doubled, &data.samples)?,
            &task.difference_quotient(h, &data.samples)?,
        ));
        record.off_training_error = Some(max_abs_diff(
            &outputs(&doubled, &fresh)?,
            &task.difference_quotient(h, &fresh)?,
        ));
        record.residual = Some(outcome.residual);
        record.chosen_h = Some(h);
        record.success = Some(outcome.success);
        record.curve = outcome.curve;
        Ok(record)
    })?;
    Ok(MemorizationReport { records })
}

// ---------------------------------------------------------------------------
// Lemma probes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaProbeReport {
    /// Sweep-style probes with their trial means and fitted slopes.
    pub results: Vec<(ActivationKind, ProbeSpec, ProbeResult)>,
    #[serde(skip)]
    pub tables: Vec<CsvTable>,
}

impl LemmaProbeReport {
    pub fn result(&self, activation: ActivationKind, spec: &ProbeSpec) -> Option<&ProbeResult> {
        self.results
            .iter()
            .find(|(a, s, _)| *a == activation && s == spec)
            .map(|(_, _, r)| r)
    }
}

fn probe_table(
    name: &str,
    activation: ActivationKind,
    setup: &ProbeSetup,
    r: &ProbeResult,
) -> CsvTable {
    let mut t = CsvTable::new(
        name,
        &[
            "probe",
            "activation",
            "layer",
            "sweep_variable",
            "sweep_value",
            "trial",
            "seed",
            "measured",
            "predicted",
        ],
    );
    for (i, x) in r.sweep_values.iter().enumerate() {
        for (trial, v) in r.trial_values[i].iter().enumerate() {
            t.push(vec![
                r.quantity.name().into(),
                activation.name().into(),
                cell(r.layer),
                r.sweep_variable.clone(),
                cell(x),
                cell(trial),
                cell(setup.trial_seed(trial)),
                cell(v),
                cell(r.predicted[i]),
            ]);
        }
    }
    t
}

fn table_name(spec: &ProbeSpec, activation: ActivationKind) -> String {
    format!("probe_{}_{}", spec.name(), activation.name())
}

/// Runs each configured probe for each activation over the width sweep; one
/// CSV per probe and activation, plus one for the Gaussian moments.
pub fn run_lemma_probes(cfg: &SweepConfig) -> Result<LemmaProbeReport> {
    expect_kind(cfg, ExperimentKind::LemmaProbe)?;
    let (layer, values, n_samples) = match &cfg.sweep {
        SweepRule::Width {
            layer,
            values,
            samples,
        } => (*layer, values.clone(), *samples),
        SweepRule::Proportional { .. } => {
            return Err(Error::Config("lemma probes need a width sweep".into()));
        }
    };
    let n0 = cfg.n0[0];
    let sweep = WidthSweep::new(layer, values.clone());
    let mut results = Vec::new();
    let mut tables = Vec::new();

    for spec in cfg.probe_suite() {
        if let ProbeSpec::Moments {
            frequencies,
            input_stds,
            draws,
        } = &spec
        {
            tables.push(moments_table(frequencies, input_stds, *draws, cfg.seed)?);
            continue;
        }
        for &activation in &cfg.activations {
            let setup = ProbeSetup {
                widths: cfg.widths_at(n0, values[0]),
                activation: cfg.activation(activation),
                init: cfg.init.clone(),
                sampler: cfg.sampler,
                trials: cfg.trials,
                seed: cfg.seed,
            };
            let name = table_name(&spec, activation);
            let instances = InstanceSweep {
                cfg,
                activation,
                n0,
                sweep: &sweep,
                n_samples,
            };
            let result = match spec {
                ProbeSpec::FeatureNorm { layer } => {
                    Some(probe_feature_norm(&setup, &sweep, layer)?)
                }
                ProbeSpec::SigmaFrobenius { layer } => {
                    Some(probe_sigma_frobenius(&setup, &sweep, layer)?)
                }
                ProbeSpec::ChainProduct { layer, last } => {
                    Some(probe_chain_product(&setup, &sweep, layer, last, false)?)
                }
                ProbeSpec::GRowNorm { layer } => Some(probe_chain_product(
                    &setup,
                    &sweep,
                    layer,
                    cfg.depth() - 1,
                    true,
                )?),
                ProbeSpec::OperatorNormChain { layer } => {
                    Some(probe_operator_norm_chain(&setup, &sweep, layer)?)
                }
                ProbeSpec::FeatureSigmaMin { layer } => {
                    Some(probe_feature_sigma_min(&setup, n_samples, &sweep, layer)?)
                }
                ProbeSpec::CentredFeatures { layer: k } => {
                    tables.push(instances.table(
                        &name,
                        "centred_features",
                        &[
                            "layer",
                            "mu_norm_sq",
                            "min_eigenvalue",
                            "tolerance",
                            "holds",
                        ],
                        |state, data| {
                            let p = probe_centred_features(state, data, k, cfg.mean_samples)?;
                            let mu_sq: f64 = p.mu.iter().map(|m| m * m).sum();
                            Ok(vec![
                                cell(k),
                                cell(mu_sq),
                                opt_cell(p.difference_min_eigenvalue),
                                cell(p.tolerance),
                                opt_cell(p.inequality_holds()),
                            ])
                        },
                    )?);
                    None
                }
                ProbeSpec::Lipschitz { layer: k } => {
                    tables.push(instances.table(
                        &name,
                        "lipschitz",
                        &["layer", "elip"],
                        |state, data| Ok(vec![cell(k), cell(empirical_lipschitz(state, data, k)?)]),
                    )?);
                    None
                }
                ProbeSpec::Gershgorin { layer: k } => {
                    let columns = [
                        "layer",
                        "lower",
                        "lambda_min",
                        "lambda_max",
                        "upper",
                        "holds",
                    ];
                    tables.push(instances.table(
                        &name,
                        "gershgorin",
                        &columns,
                        |state, data| {
                            let traces = forward_batch(state, &data.samples)?;
                            let gram = feature_matrix(&traces, k)?.gram_rows();
                            let (lo, hi) = gershgorin_bounds(&gram)?;
                            let spectrum = sym_eigen(&gram)?;
                            let holds = lo <= spectrum.min() && spectrum.max() <= hi;
                            Ok(vec![
                                cell(k),
                                cell(lo),
                                cell(spectrum.min()),
                                cell(spectrum.max()),
                                cell(hi),
                                cell(holds),
                            ])
                        },
                    )?);
                    None
                }
                ProbeSpec::Moments { .. } => unreachable!(),
            };
            if let Some(r) = result {
                tables.push(probe_table(&name, activation, &setup, &r));
                results.push((activation, spec.clone(), r));
            }
        }
    }
    Ok(LemmaProbeReport { results, tables })
}

/// Per-network probes that produce one row per sweep point and trial.
struct InstanceSweep<'a> {
    cfg: &'a SweepConfig,
    activation: ActivationKind,
    n0: usize,
    sweep: &'a WidthSweep,
    n_samples: usize,
}

impl InstanceSweep<'_> {
    fn table(
        &self,
        name: &str,
        probe: &str,
        columns: &[&str],
        measure: impl Fn(&NetworkState, &crate::network::Dataset) -> Result<Vec<String>>,
    ) -> Result<CsvTable> {
        let mut header = vec![
            "probe",
            "activation",
            "sweep_variable",
            "sweep_value",
            "N",
            "trial",
            "seed",
        ];
        header.extend_from_slice(columns);
        let mut t = CsvTable::new(name, &header);
        for &value in &self.sweep.values {
            let arch = self.cfg.architecture(self.activation, self.n0, value)?;
            for trial in 0..self.cfg.trials {
                let seed = self.cfg.trial_seed(trial);
                let state = init_network(&arch, seed)?;
                let data = sample_dataset(self.n0, self.n_samples, self.cfg.sampler, seed)?;
                let mut row = vec![
                    probe.to_string(),
                    self.activation.name().into(),
                    self.sweep.name(),
                    cell(value),
                    cell(self.n_samples),
                    cell(trial),
                    cell(seed),
                ];
                row.extend(measure(&state, &data)?);
                t.push(row);
            }
        }
        Ok(t)
    }
}

fn moments_table(
    frequencies: &[f64],
    input_stds: &[f64],
    draws: usize,
    seed: u64,
) -> Result<CsvTable> {
    let mut t = CsvTable::new(
        "probe_moments",
        &[
            "s",
            "sigma",
            "draws",
            "mc_cos_sq",
            "se_cos_sq",
            "closed_cos_sq",
            "mc_sin_sq",
            "se_sin_sq",
            "closed_sin_sq",
        ],
    );
    for &s in frequencies {
        for &sigma in input_stds {
            let mc = monte_carlo_moments(s, sigma, draws, seed)?;
            let exact = gaussian_activation_moments(s, sigma);
            t.push(vec![
                cell(s),
                cell(sigma),
                cell(draws),
                cell(mc.mean_cos_sq),
                cell(mc.se_cos_sq),
                cell(exact.mean_cos_sq),
                cell(mc.mean_sin_sq),
                cell(mc.se_sin_sq),
                cell(exact.mean_sin_sq),
            ]);
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Oracle equivalence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub activation: ActivationKind,
    pub widths: Vec<usize>,
    pub n_samples: usize,
    pub trial: usize,
    pub seed: u64,
    /// Relative Frobenius error of the layerwise kernel against `J Jᵀ`.
    pub assembly_error: f64,
    /// Relative Frobenius error of `J Jᵀ` against central differences.
    pub finite_difference_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub records: Vec<OracleRecord>,
    pub max_assembly_error: f64,
    pub max_finite_difference_error: f64,
}

impl OracleReport {
    pub fn instances(&self) -> usize {
        self.records.len()
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "ntk_check",
            &[
                "activation",
                "widths",
                "N",
                "trial",
                "seed",
                "assembly_error",
                "finite_difference_error",
            ],
        );
        for r in &self.records {
            t.push(vec![
                r.activation.name().into(),
                r.widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("-"),
                cell(r.n_samples),
                cell(r.trial),
                cell(r.seed),
                cell(r.assembly_error),
                cell(r.finite_difference_error),
            ]);
        }
        t
    }
}

/// Step of the central differences in [`run_oracle_check`].
pub const FINITE_DIFFERENCE_STEP: f64 = 1e-6;

fn relative_frobenius(
    a: &crate::linalg::DenseMatrix,
    b: &crate::linalg::DenseMatrix,
) -> Result<f64> {
    let denom = b.frobenius_norm();
    let num = a.sub(b)?.frobenius_norm();
    Ok(if denom > 0.0 { num / denom } else { num })
}

/// Compares the kernel paths on every network of the sweep.
pub fn run_oracle_check(cfg: &SweepConfig, workers: usize) -> Result<OracleReport> {
    cfg.validate()?;
    let tasks = task_grid(cfg);
    let records = run_grid(&tasks, workers, |t| {
        let seed = cfg.trial_seed(t.trial);
        let arch = cfg.architecture(t.activation, t.n0, t.value)?;
        let state = init_network(&arch, seed)?;
        let data = sample_dataset(t.n0, t.n_samples, cfg.sampler, seed)?;
        let exact = jacobian_gram(&state, &data)?;
        let assembled = empirical_ntk(&state, &data)?.kernel;
        let fd = finite_difference_jacobian(&state, &data, FINITE_DIFFERENCE_STEP)?.gram_rows();
        Ok(OracleRecord {
            activation: t.activation,
            widths: arch.widths.clone(),
            n_samples: t.n_samples,
            trial: t.trial,
            seed,
            assembly_error: relative_frobenius(&assembled, &exact)?,
            finite_difference_error: relative_frobenius(&exact, &fd)?,
        })
    })?;
    Ok(OracleReport {
        max_assembly_error: records.iter().map(|r| r.assembly_error).fold(0.0, f64::max),
        max_finite_difference_error: records
            .iter()
            .map(|r| r.finite_difference_error)
            .fold(0.0, f64::max),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::presets;

    fn tiny_ntk() -> SweepConfig {
        SweepConfig {
            n0: vec![6],
            widths: vec![8, 6, 1],
            sweep: SweepRule::Proportional {
                layer: 1,
                factor: 2,
                samples: vec![2, 4, 6],
            },
            trials: 2,
            ..presets::fig1_desk()
        }
    }

    #[test]
    fn grid_preserves_order() {
        let items: Vec<usize> = (0..50).collect();
        let serial = run_grid(&items, 1, |&i| Ok(i * i)).unwrap();
        let parallel = run_grid(&items, 4, |&i| Ok(i * i)).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn ntk_scaling_records() {
        let cfg = tiny_ntk();
        let report = run_ntk_scaling(&cfg, 1).unwrap();
        assert_eq!(report.records.len(), 3 * 2 * 2);
        let r = &report.records[0];
        assert_eq!(
            (r.widths.clone(), r.n_samples, r.trial, r.seed),
            (vec![6, 4, 6, 1], 2, 0, 0)
        );
        assert!(r.wall_ms.is_none());
        let csv = report.table().to_csv_string();
        assert!(csv.starts_with(
            "experiment,activation,s,n0,n1,n2,N,trial,seed,lambda_min,lambda_min_clamped,excluded,wall_ms\n"
        ));
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(report.fits.len(), 2);
        assert_eq!(run_ntk_scaling(&cfg, 3).unwrap().table(), report.table());
    }

    #[test]
    fn wrong_kind_is_a_config_error() {
        assert!(matches!(
            run_lipschitz_sweep(&tiny_ntk(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bounds_table_fields() {
        let cfg = SweepConfig {
            experiment: ExperimentKind::BoundsTable,
            ..tiny_ntk()
        };
        let report = run_bounds_table(&cfg, 1).unwrap();
        for r in &report.records {
            if r.lower == 0.0 {
                assert!(r.measured_over_lower.is_none());
            }
        }
        assert_eq!(report.table().rows.len(), report.records.len());
    }

    #[test]
    fn memorization_small() {
        let cfg = SweepConfig {
            n0: vec![3],
            widths: vec![12, 8, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![12],
                samples: 4,
            },
            trials: 3,
            ..presets::memorize16()
        };
        let report = run_memorization(&cfg, 1).unwrap();
        assert_eq!(report.records.len(), 3);
        assert_eq!(report.certified(), 3);
        assert!(report.records.iter().all(|r| r.curve.len() == 8));
    }

    #[test]
    fn oracle_small() {
        let report = run_oracle_check(&tiny_ntk(), 1).unwrap();
        assert_eq!(report.instances(), 12);
        assert!(report.max_assembly_error < 1e-10);
        assert!(report.max_finite_difference_error < 1e-4);
    }

    #[test]
    fn lemma_suite_covers_every_probe() {
        let cfg = SweepConfig {
            n0: vec![4],
            widths: vec![16, 8, 1],
            sweep: SweepRule::Width {
                layer: 1,
                values: vec![16, 32],
                samples: 4,
            },
            trials: 2,
            mean_samples: 1000,
            probes: ProbeSpec::default_suite(3)
                .into_iter()
                .map(|p| match p {
                    ProbeSpec::Moments {
                        frequencies,
                        input_stds,
                        ..
                    } => ProbeSpec::Moments {
                        frequencies,
                        input_stds,
                        draws: 1000,
                    },
                    other => other,
                })
                .collect(),
            ..presets::lemma_suite()
        };
        let report = run_lemma_probes(&cfg).unwrap();
        // Nine network probes per activation plus the moments table.
        assert_eq!(report.tables.len(), 9 * 2 + 1);
        let names: std::collections::HashSet<_> =
            report.tables.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), report.tables.len());
    }
}
