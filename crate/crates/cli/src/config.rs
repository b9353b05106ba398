//! Run configuration: a single TOML file drives the whole pipeline.
//!
//! The schema rejects unknown keys everywhere so typos fail fast, data
//! comes from exactly one source (a CSV file or the built-in simulator),
//! and every random stream derives from the one top-level seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prodfn::gmm::GmmOptions;
use prodfn::inference::BootstrapPlan;
use prodfn::panel::ColumnMap;
use prodfn::share::ShareOptions;
use prodfn::simulate::{DgpSpec, LaborRule, Technology};
use prodfn::{Error, Result};

/// Top-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all stage randomness is derived from it.
    pub seed: u64,
    /// Rayon thread cap; 0 leaves the library default.
    pub threads: usize,
    /// Output directory for artifacts.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub stages: Stages,
    pub share: ShareOptions,
    pub gmm: GmmOptions,
    pub bootstrap: BootstrapPlan,
    pub labor_test: LaborTestConfig,
    pub event_study: EventStudyConfig,
}

/// Where the firm panel comes from: a CSV file or the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV panel path (exclusive with `simulator`).
    pub file: Option<PathBuf>,
    /// Column mapping for CSV ingestion; defaults to canonical names.
    pub columns: Option<ColumnMap>,
    /// Truncate sector codes to this many leading characters.
    pub sector_level: Option<usize>,
    /// Derive materials from COGS/SG&A/depreciation before estimation.
    pub construct_materials: bool,
    /// Simulator settings (exclusive with `file`).
    pub simulator: Option<SimulatorConfig>,
}

/// Simulator overrides applied on top of the Cobb-Douglas baseline
/// (300 firms x 8 years, alpha = (0.3, 0.3, 0.4), AR(1) omega).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub n_firms: Option<usize>,
    pub n_years: Option<usize>,
    pub burn_in: Option<usize>,
    pub n_sectors: Option<usize>,
    pub start_year: Option<i32>,
    pub technology: Option<Technology>,
    /// Markov conditional-mean coefficients `(d0, d1, d2, d3)`.
    pub delta: Option<[f64; 4]>,
    pub sd_eta: Option<f64>,
    pub sd_eps: Option<f64>,
    /// Firm-year log-wage heterogeneity (observed before inputs are set).
    pub sd_wage_noise: Option<f64>,
    /// Switch labor to the exact flexible first-order condition.
    pub flexible_labor: bool,
    pub labor_wedge: Option<f64>,
}

impl SimulatorConfig {
    /// Materialize a full DGP specification, seeding it from the run seed.
    pub fn resolve(&self, seed: u64) -> DgpSpec {
        let mut spec =
            DgpSpec::baseline(self.n_firms.unwrap_or(300), self.n_years.unwrap_or(8), seed);
        if let Some(b) = self.burn_in {
            spec.burn_in = b;
        }
        if let Some(s) = self.n_sectors {
            spec.n_sectors = s;
        }
        if let Some(y) = self.start_year {
            spec.start_year = y;
        }
        if let Some(t) = &self.technology {
            spec.technology = t.clone();
        }
        if let Some(d) = self.delta {
            spec.markov.delta = d;
        }
        if let Some(s) = self.sd_eta {
            spec.markov.sd_eta = s;
        }
        if let Some(s) = self.sd_eps {
            spec.sd_eps = s;
        }
        if let Some(s) = self.sd_wage_noise {
            spec.sd_wage_noise = s;
        }
        if self.flexible_labor {
            spec.labor = LaborRule::FlexibleFoc;
        }
        if let Some(w) = self.labor_wedge {
            spec.labor_wedge = w;
        }
        spec
    }
}

/// Stage toggles. Dependencies are enforced at validation time:
/// functionals need the estimate, analytics need functionals, the event
/// study needs analytics, and the report needs at least the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub estimate: bool,
    pub functionals: bool,
    pub analytics: bool,
    pub test_labor: bool,
    pub event_study: bool,
    pub report: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            estimate: true,
            functionals: true,
            analytics: true,
            test_labor: false,
            event_study: false,
            report: true,
        }
    }
}

/// Flexible-labor test settings (the resampling plan lives in
/// `[bootstrap]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LaborTestConfig {
    /// Restrict the test statistic to one sector.
    pub sector: Option<String>,
}

/// Outcome variable for the event study, drawn from the dispersion table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeVar {
    /// Log variance of the log marginal product of capital.
    #[default]
    LogVarMpK,
    LogVarMpL,
    LogVarMpM,
    /// Log variance of TFP growth.
    LogVolNu,
}

impl OutcomeVar {
    pub fn label(self) -> &'static str {
        match self {
            OutcomeVar::LogVarMpK => "log_var_mp_k",
            OutcomeVar::LogVarMpL => "log_var_mp_l",
            OutcomeVar::LogVarMpM => "log_var_mp_m",
            OutcomeVar::LogVolNu => "log_vol_nu",
        }
    }
}

/// Event-study settings: industry cells are treated from
/// `treatment_year` onward if their sector is listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventStudyConfig {
    pub outcome: OutcomeVar,
    pub treated_sectors: Vec<String>,
    pub treatment_year: i32,
    /// Wild-cluster-bootstrap repetitions.
    pub n_boot: usize,
    /// Adjust for base-period log TFP-growth variance and log HHI.
    pub adjust: bool,
}

impl Default for EventStudyConfig {
    fn default() -> Self {
        EventStudyConfig {
            outcome: OutcomeVar::default(),
            treated_sectors: Vec::new(),
            treatment_year: 2008,
            n_boot: 999,
            adjust: false,
        }
    }
}

impl RunConfig {
    /// Parse a TOML configuration file.
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        if config.out_dir.as_os_str().is_empty() {
            config.out_dir = PathBuf::from("out");
        }
        Ok(config)
    }

    /// A ready-to-run default: simulator baseline, estimation through
    /// analytics plus the report.
    pub fn simulator_default(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            out_dir: PathBuf::from("out"),
            data: DataConfig {
                simulator: Some(SimulatorConfig::default()),
                ..DataConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Check the full configuration before any compute happens.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.file, &self.data.simulator) {
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "config sets both data.file and data.simulator; pick one",
                ))
            }
            (None, None) => {
                return Err(Error::validation(
                    "config needs a data source: data.file or data.simulator",
                ))
            }
            _ => {}
        }
        if self.data.file.is_none() && self.data.columns.is_some() {
            return Err(Error::validation(
                "data.columns only applies to file ingestion",
            ));
        }
        let s = &self.stages;
        for (stage, prereq, name) in [
            (s.functionals, s.estimate, "functionals requires estimate"),
            (s.analytics, s.functionals, "analytics requires functionals"),
            (s.event_study, s.analytics, "event_study requires analytics"),
            (s.report, s.estimate, "report requires estimate"),
        ] {
            if stage && !prereq {
                return Err(Error::validation(format!("stages: {name}")));
            }
        }
        self.bootstrap.validate()?;
        if s.event_study {
            if self.event_study.treated_sectors.is_empty() {
                return Err(Error::validation(
                    "event_study.treated_sectors must name at least one sector",
                ));
            }
            let distinct: BTreeSet<&String> = self.event_study.treated_sectors.iter().collect();
            if distinct.len() != self.event_study.treated_sectors.len() {
                return Err(Error::validation(
                    "event_study.treated_sectors contains duplicates",
                ));
            }
            if self.event_study.n_boot < 2 {
                return Err(Error::validation("event_study.n_boot must be at least 2"));
            }
        }
        if let Some(level) = self.data.sector_level {
            if level == 0 {
                return Err(Error::validation("data.sector_level must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_simulator_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 7
[data.simulator]
n_firms = 50
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.stages.estimate && cfg.stages.report);
        assert!(!cfg.stages.event_study);
        let spec = cfg.data.simulator.unwrap().resolve(cfg.seed);
        assert_eq!(spec.n_firms, 50);
        assert_eq!(spec.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("sneed = 1\n[data.simulator]\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        let err = RunConfig::from_toml("[data.simulator]\nn_firm = 2\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn data_source_must_be_exclusive_and_present() {
        let both =
            RunConfig::from_toml("[data]\nfile = \"p.csv\"\n[data.simulator]\nn_firms = 5\n")
                .unwrap();
        assert!(matches!(both.validate(), Err(Error::Validation(_))));
        let neither = RunConfig::from_toml("seed = 1\n").unwrap();
        assert!(matches!(neither.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn stage_dependencies_are_enforced() {
        let mut cfg = RunConfig::simulator_default(1);
        cfg.stages.functionals = false;
        // analytics without functionals
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        cfg.stages.analytics = false;
        cfg.stages.report = false;
        cfg.validate().unwrap();
        cfg.stages.event_study = true;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn event_study_needs_treated_sectors() {
        let mut cfg = RunConfig::simulator_default(1);
        cfg.stages.event_study = true;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        cfg.event_study.treated_sectors = vec!["101".into()];
        cfg.validate().unwrap();
        cfg.event_study.treated_sectors = vec!["101".into(), "101".into()];
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn technology_override_round_trips_through_toml() {
        let cfg = RunConfig::from_toml(
            r#"
[data.simulator]
flexible_labor = true
labor_wedge = 0.3
sd_wage_noise = 0.25
[data.simulator.technology]
kind = "cobb-douglas"
alpha_k = 0.25
alpha_l = 0.35
alpha_m = 0.4
"#,
        )
        .unwrap();
        let spec = cfg.data.simulator.unwrap().resolve(3);
        assert!(matches!(spec.labor, LaborRule::FlexibleFoc));
        assert_eq!(spec.labor_wedge, 0.3);
        assert_eq!(spec.sd_wage_noise, 0.25);
        match spec.technology {
            Technology::CobbDouglas { alpha_k, .. } => assert_eq!(alpha_k, 0.25),
            _ => panic!("expected Cobb-Douglas"),
        }
    }
}
