use ntk_spectrum::experiments::SweepConfig;
use serde::Serialize;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to repeat a run: pass the file back with `--config`.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub manifest_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub library_version: &'static str,
    pub subcommand: &'a str,
    pub workers: usize,
    /// `seed + t` for every trial `t`.
    pub trial_seeds: Vec<u64>,
    pub config: &'a SweepConfig,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl<'a> Manifest<'a> {
    pub fn new(
        subcommand: &'a str,
        config: &'a SweepConfig,
        workers: usize,
        outputs: Vec<String>,
        summary: serde_json::Value,
    ) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            library_version: ntk_spectrum::VERSION,
            subcommand,
            workers,
            trial_seeds: (0..config.trials).map(|t| config.trial_seed(t)).collect(),
            config,
            outputs,
            summary,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}
