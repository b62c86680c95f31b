//! Seeded sweeps behind the figures, with CSV output and slope summaries.

mod checks;
mod config;
mod runners;
mod table;

pub use checks::{check_instance, check_with_kernel, derivatives_bounded, InstanceChecks};
pub use config::{presets, ExperimentKind, ProbeSpec, SweepConfig, SweepRule};
pub use runners::{
    run_bounds_table, run_grid, run_lemma_probes, run_lipschitz_sweep, run_memorization,
    run_ntk_scaling, run_oracle_check, BoundsRecord, BoundsReport, BoundsSummary, CurveFit,
    LemmaProbeReport, LipschitzRecord, LipschitzReport, MemorizationRecord, MemorizationReport,
    NtkRecord, NtkScalingReport, OracleRecord, OracleReport, FINITE_DIFFERENCE_STEP,
    LIPSCHITZ_CHECK_SAMPLES, OFF_TRAINING_INPUTS,
};
pub use table::{cell, opt_cell, CsvTable};
