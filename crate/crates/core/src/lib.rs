//! Gross-output production-function estimation and misallocation
//! analytics, with a structural panel simulator for validation.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`panel`] — panel ingestion, cleaning, and sample construction;
//! 2. [`simulate`] — structural data generator with known ground truth;
//! 3. [`share`] — stage one, the nonlinear share regression recovering
//!    the materials elasticity surface and the ex-post shocks;
//! 4. [`gmm`] — stage two, moment-based recovery of the cost adjustment
//!    and the productivity Markov process;
//! 5. [`functionals`] — per-firm elasticities and shock pass-through
//!    derivatives of marginal products;
//! 6. [`analytics`] — dispersion decompositions, fixed-effect
//!    regressions, concentration, and extreme-value tail fits;
//! 7. [`inference`] — firm-level bootstrap machinery and the flexible
//!    input wedge test;
//! 8. [`event_study`] — staggered-adoption event studies with wild
//!    cluster bootstrap bands.
//!
//! Shared numeric types ([`GammaVector`], [`AlphaVector`],
//! [`DeltaVector`]) live in [`translog`] and [`gmm`] and are re-exported
//! at the crate root.

pub mod analytics;
pub mod error;
pub mod event_study;
pub mod functionals;
pub mod gmm;
pub mod inference;
pub mod panel;
pub mod share;
pub mod simulate;
pub mod translog;

pub use analytics::{
    build_dispersion_table, dispersion_series, fe_regress, fit_gev, hhi, s2_channels,
    s2_channels_cov, s2_total, ChannelBetas, ChannelShares, DispersionCell, DispersionPoint,
    DispersionTable, FeRegressionResult, GevFit, S2Value,
};
pub use error::{Error, Result};
pub use event_study::{
    att_group_time, wild_cluster_bootstrap, AttResult, DidPanel, DidRow, EventStudyResult, YearAtt,
};
pub use functionals::{
    aggregate_channel, channel_effect, compute_functionals, elasticity_partials, g_prime, Channel,
    ChannelInputs, ChannelPoint, ElasticityPartials, FirmFunctionals, FunctionalRecord, InputKind,
};
pub use gmm::{
    build_script_y, fit_gmm, fit_production_model, DeltaVector, GmmFit, GmmOptions, ProductionModel,
};
pub use inference::{
    bootstrap_pipeline, flexible_labor_t, quantile_type7, resample_firms, two_stage_test_bootstrap,
    BootstrapPlan, BootstrapResult, TestResult,
};
pub use panel::{
    estimation_sample, ingest_csv, interpolate_gaps, productivity_sample, ColumnMap, DropReport,
    EstimationSample, FirmPanel, FirmYear,
};
pub use share::{elasticity_at, fit_share_regression, ShareFit, ShareOptions};
pub use simulate::{simulate, DgpSpec, Technology, TruthTable};
pub use translog::{AlphaVector, GammaVector};
