//! Stage sequencing and artifact emission.
//!
//! A run executes the enabled stages in dependency order — ingest or
//! simulate, estimate, functionals, analytics, flexible-labor test, event
//! study, report — writing each artifact into the output directory and
//! recording its SHA-256 in `manifest.json`. Reruns with the same
//! configuration and seed produce byte-identical artifacts; the bootstrap
//! plan's seed is always derived from the top-level run seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use prodfn::analytics::{
    build_dispersion_table, fit_gev, s2_channels, s2_channels_cov, s2_total, ChannelBetas,
    ChannelShares, DispersionTable, GevFit, S2Value,
};
use prodfn::event_study::{
    att_group_time, wild_cluster_bootstrap, DidPanel, DidRow, EventStudyResult,
};
use prodfn::fe_regress;
use prodfn::functionals::{compute_functionals, FirmFunctionals, InputKind};
use prodfn::gmm::{fit_production_model, ProductionModel};
use prodfn::inference::{two_stage_test_bootstrap, TestResult};
use prodfn::panel::{
    construct_us_materials, estimation_sample, ingest_csv, write_csv, DropReport, FirmPanel,
    MaterialsConstruction,
};
use prodfn::share::ShareFit;
use prodfn::simulate::simulate;
use prodfn::{Error, Result};

use crate::config::{EventStudyConfig, OutcomeVar, RunConfig};
use crate::report;

/// Artifact index: file name to SHA-256 content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

/// Stage-one solver summary stored beside the production model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSummary {
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&ShareFit> for ShareSummary {
    fn from(fit: &ShareFit) -> Self {
        ShareSummary {
            objective: fit.objective,
            grad_norm: fit.grad_norm,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub share: ShareSummary,
    pub model: ProductionModel,
}

/// Contents of `ingest.json` (file-based runs only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub drop_report: DropReport,
    pub materials_constructed: Option<MaterialsConstruction>,
    pub sector_level: Option<usize>,
}

/// One row of `betas.csv`: per-sector projection slopes of a log marginal
/// product on TFP growth (`beta_dev`) and on its three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub input: String,
    pub sector: String,
    pub beta_dev: f64,
    pub se_dev: Option<f64>,
    pub r2_dev: f64,
    pub n_dev: usize,
    pub beta_omega: f64,
    pub beta_eta: f64,
    pub beta_d_eps: f64,
    pub n_channels: usize,
}

/// Per-input dispersion-share decomposition stored in `s2.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputS2 {
    pub s2_total: S2Value,
    pub channels: Option<ChannelShares>,
    pub channels_cov: Option<ChannelShares>,
    pub n_sectors: usize,
    pub n_sectors_skipped: usize,
}

/// Contents of `s2.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2Artifact {
    pub inputs: BTreeMap<String, InputS2>,
}

/// Contents of `gev.json`: per-country extreme-value fits of recovered
/// log TFP, with skip reasons for countries that cannot be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevArtifact {
    pub fits: BTreeMap<String, GevFit>,
    pub skipped: BTreeMap<String, String>,
}

/// Contents of `labor_test.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaborTestArtifact {
    pub sector: Option<String>,
    pub result: TestResult,
}

/// Contents of `event_study.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyArtifact {
    pub outcome: String,
    pub treatment_year: i32,
    pub treated_sectors: Vec<String>,
    pub adjust: bool,
    /// Dispersion cells without a usable (positive) outcome value.
    pub n_cells_skipped: usize,
    pub result: EventStudyResult,
}

/// Serialize pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::computation(format!("serialize: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

struct Emitter<'a> {
    dir: &'a Path,
    artifacts: BTreeMap<String, String>,
}

impl<'a> Emitter<'a> {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Execute a validated configuration end to end.
pub fn run(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::computation(format!("thread pool: {e}")))?;
        pool.install(|| run_stages(config))
    } else {
        run_stages(config)
    }
}

fn run_stages(config: &RunConfig) -> Result<Manifest> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| {
        Error::validation(format!(
            "cannot create output directory {}: {e}",
            config.out_dir.display()
        ))
    })?;
    let mut emitter = Emitter {
        dir: &config.out_dir,
        artifacts: BTreeMap::new(),
    };

    // Data stage: simulate or ingest; either way panel.csv echoes the
    // exact records every later stage consumes.
    let panel = load_panel(config, &mut emitter)?;

    if config.stages.estimate {
        let sample = estimation_sample(&panel)?;
        let (share, fit) = fit_production_model(&sample, &config.share, &config.gmm)?;
        emitter.emit(
            "model.json",
            &to_json(&ModelArtifact {
                share: ShareSummary::from(&share),
                model: fit.model.clone(),
            })?,
        )?;

        if config.stages.functionals {
            let functionals = compute_functionals(&panel, &sample, &fit)?;
            let mut buf = Vec::new();
            functionals.write_csv(&mut buf)?;
            emitter.emit("functionals.csv", &buf)?;

            if config.stages.analytics {
                let table = analytics_stage(config, &functionals, &mut emitter)?;
                if config.stages.event_study {
                    event_study_stage(&config.event_study, config.seed, &table, &mut emitter)?;
                }
            }
        }
    }

    if config.stages.test_labor {
        let mut plan = config.bootstrap.clone();
        plan.seed = config.seed;
        let result = two_stage_test_bootstrap(
            &panel,
            &plan,
            &config.share,
            &config.gmm,
            config.labor_test.sector.as_deref(),
        )?;
        emitter.emit(
            "labor_test.json",
            &to_json(&LaborTestArtifact {
                sector: config.labor_test.sector.clone(),
                result,
            })?,
        )?;
    }

    if config.stages.report {
        let text = report::render(&config.out_dir, &emitter.artifacts)?;
        emitter.emit("report.md", text.as_bytes())?;
    }

    let manifest = Manifest {
        seed: config.seed,
        artifacts: emitter.artifacts.clone(),
    };
    std::fs::write(config.out_dir.join("manifest.json"), to_json(&manifest)?)?;
    Ok(manifest)
}

fn load_panel(config: &RunConfig, emitter: &mut Emitter) -> Result<FirmPanel> {
    if let Some(sim) = &config.data.simulator {
        let spec = sim.resolve(config.seed);
        let (panel, truth) = simulate(&spec)?;
        let mut buf = Vec::new();
        write_csv(&panel, &mut buf)?;
        emitter.emit("panel.csv", &buf)?;
        let mut buf = Vec::new();
        truth.write_csv(&mut buf)?;
        emitter.emit("truth.csv", &buf)?;
        return Ok(panel);
    }
    let path = config.data.file.as_ref().expect("validated");
    let file = std::fs::File::open(path)
        .map_err(|e| Error::validation(format!("cannot open {}: {e}", path.display())))?;
    let columns = config.data.columns.clone().unwrap_or_default();
    let (mut panel, drop_report) = ingest_csv(std::io::BufReader::new(file), &columns)?;
    let materials_constructed = config
        .data
        .construct_materials
        .then(|| construct_us_materials(&mut panel));
    if let Some(level) = config.data.sector_level {
        panel.truncate_sectors(level);
    }
    emitter.emit(
        "ingest.json",
        &to_json(&IngestArtifact {
            drop_report,
            materials_constructed,
            sector_level: config.data.sector_level,
        })?,
    )?;
    let mut buf = Vec::new();
    write_csv(&panel, &mut buf)?;
    emitter.emit("panel.csv", &buf)?;
    Ok(panel)
}

/// Per-sector projection slopes for one input: the TFP-growth slope used
/// by the total dispersion share, and the three channel slopes.
fn sector_betas(
    functionals: &FirmFunctionals,
    input: InputKind,
) -> (
    BTreeMap<String, f64>,
    BTreeMap<String, ChannelBetas>,
    Vec<BetaRow>,
    usize,
) {
    let log_mp = |r: &prodfn::functionals::FunctionalRecord| match input {
        InputKind::Capital => r.log_mp_k,
        InputKind::Labor => r.log_mp_l,
        InputKind::Materials => r.log_mp_m,
    };
    let sectors: std::collections::BTreeSet<&str> = functionals
        .records
        .iter()
        .map(|r| r.sector.as_str())
        .collect();
    let mut dev_map = BTreeMap::new();
    let mut channel_map = BTreeMap::new();
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for sector in sectors {
        // Slope of mp on TFP growth with country-year cells absorbed.
        let mut y = Vec::new();
        let mut dnu = Vec::new();
        let mut fe = Vec::new();
        let mut cluster = Vec::new();
        for r in functionals.records.iter().filter(|r| r.sector == sector) {
            let (Some(mp), Some(d)) = (log_mp(r), r.dnu) else {
                continue;
            };
            y.push(mp);
            dnu.push(d);
            fe.push(format!("{}:{}", r.country, r.year));
            cluster.push(r.firm_id.clone());
        }
        let dev = fe_regress(&y, &["dnu"], &[dnu], &fe, &cluster, "country-year");

        // Joint slopes on the three growth channels.
        let mut yc = Vec::new();
        let mut xs = [Vec::new(), Vec::new(), Vec::new()];
        let mut fec = Vec::new();
        let mut clc = Vec::new();
        for r in functionals.records.iter().filter(|r| r.sector == sector) {
            let (Some(mp), Some(w), Some(e), Some(de)) = (log_mp(r), r.omega_lag, r.eta, r.d_eps)
            else {
                continue;
            };
            yc.push(mp);
            xs[0].push(w);
            xs[1].push(e);
            xs[2].push(de);
            fec.push(format!("{}:{}", r.country, r.year));
            clc.push(r.firm_id.clone());
        }
        let channels = fe_regress(
            &yc,
            &["omega_lag", "eta", "d_eps"],
            &xs,
            &fec,
            &clc,
            "country-year",
        );
        match (dev, channels) {
            (Ok(d), Ok(c)) => {
                dev_map.insert(sector.to_string(), d.coef[0]);
                channel_map.insert(
                    sector.to_string(),
                    ChannelBetas {
                        omega: c.coef[0],
                        eta: c.coef[1],
                        d_eps: c.coef[2],
                    },
                );
                rows.push(BetaRow {
                    input: input.label().to_string(),
                    sector: sector.to_string(),
                    beta_dev: d.coef[0],
                    se_dev: Some(d.se[0]),
                    r2_dev: d.r2,
                    n_dev: d.n_used,
                    beta_omega: c.coef[0],
                    beta_eta: c.coef[1],
                    beta_d_eps: c.coef[2],
                    n_channels: c.n_used,
                });
            }
            _ => skipped += 1,
        }
    }
    (dev_map, channel_map, rows, skipped)
}

fn analytics_stage(
    config: &RunConfig,
    functionals: &FirmFunctionals,
    emitter: &mut Emitter,
) -> Result<DispersionTable> {
    let table = build_dispersion_table(functionals)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    emitter.emit("dispersion.csv", &buf)?;

    let mut all_rows = Vec::new();
    let mut inputs = BTreeMap::new();
    for input in InputKind::ALL {
        let (dev_map, channel_map, rows, skipped) = sector_betas(functionals, input);
        all_rows.extend(rows);
        if dev_map.is_empty() {
            return Err(Error::computation(format!(
                "no sector supports the {} dispersion projection",
                input.label()
            )));
        }
        let s2 = s2_total(&table, &dev_map, input)?;
        let (channels, channels_cov) = if channel_map.is_empty() {
            (None, None)
        } else {
            (
                Some(s2_channels(&table, &channel_map, input)?),
                Some(s2_channels_cov(&table, &channel_map, input)?),
            )
        };
        inputs.insert(
            input.label().to_string(),
            InputS2 {
                s2_total: s2,
                channels,
                channels_cov,
                n_sectors: dev_map.len(),
                n_sectors_skipped: skipped,
            },
        );
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in &all_rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    emitter.emit("betas.csv", &buf)?;
    emitter.emit("s2.json", &to_json(&S2Artifact { inputs })?)?;

    // Extreme-value fit of recovered log TFP per country.
    let mut countries: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &functionals.records {
        countries.entry(r.country.as_str()).or_default().push(r.nu);
    }
    let mut fits = BTreeMap::new();
    let mut gev_skipped = BTreeMap::new();
    for (country, nu) in countries {
        match fit_gev(&nu) {
            Ok(fit) => {
                fits.insert(country.to_string(), fit);
            }
            Err(e) => {
                gev_skipped.insert(country.to_string(), e.to_string());
            }
        }
    }
    emitter.emit(
        "gev.json",
        &to_json(&GevArtifact {
            fits,
            skipped: gev_skipped,
        })?,
    )?;
    let _ = config;
    Ok(table)
}

/// Build the industry-cell event-study panel from the dispersion table
/// and run the estimator with wild-cluster-bootstrap inference.
fn event_study_stage(
    es: &EventStudyConfig,
    seed: u64,
    table: &DispersionTable,
    emitter: &mut Emitter,
) -> Result<()> {
    let outcome_of = |cell: &prodfn::analytics::DispersionCell| -> Option<f64> {
        let v = match es.outcome {
            OutcomeVar::LogVarMpK => cell.var_mp(InputKind::Capital),
            OutcomeVar::LogVarMpL => cell.var_mp(InputKind::Labor),
            OutcomeVar::LogVarMpM => cell.var_mp(InputKind::Materials),
            OutcomeVar::LogVolNu => cell.vol_nu,
        }?;
        (v > 0.0).then(|| v.ln())
    };
    let covariate_names: Vec<String> = if es.adjust {
        vec!["log_vol_nu".into(), "log_hhi".into()]
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    let mut treated = std::collections::BTreeSet::new();
    for cell in &table.cells {
        let Some(outcome) = outcome_of(cell) else {
            skipped += 1;
            continue;
        };
        let covariates = if es.adjust {
            let (Some(vol), hhi) = (cell.vol_nu, cell.hhi) else {
                skipped += 1;
                continue;
            };
            if vol <= 0.0 || hhi <= 0.0 {
                skipped += 1;
                continue;
            }
            vec![vol.ln(), hhi.ln()]
        } else {
            Vec::new()
        };
        let unit = format!("{}:{}", cell.country, cell.sector);
        if es.treated_sectors.iter().any(|s| *s == cell.sector) {
            treated.insert(unit.clone());
        }
        rows.push(DidRow {
            unit,
            time: cell.year,
            outcome,
            covariates,
        });
    }
    let panel = DidPanel::new(rows, treated, es.treatment_year, covariate_names)?;
    // Point estimates are checked first so configuration problems surface
    // as such before the bootstrap spends any time.
    att_group_time(&panel, es.adjust)?;
    let result = wild_cluster_bootstrap(&panel, es.adjust, es.n_boot, seed)?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    emitter.emit("event_study.csv", &buf)?;
    emitter.emit(
        "event_study.json",
        &to_json(&EventStudyArtifact {
            outcome: es.outcome.label().to_string(),
            treatment_year: es.treatment_year,
            treated_sectors: es.treated_sectors.clone(),
            adjust: es.adjust,
            n_cells_skipped: skipped,
            result,
        })?,
    )?;
    Ok(())
}

/// Re-render the report for an existing output directory and refresh its
/// manifest entry.
pub fn report_only(out_dir: &Path) -> Result<Manifest> {
    let manifest_path = out_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::validation(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("malformed manifest: {e}")))?;
    let report = report::render(out_dir, &manifest.artifacts)?;
    std::fs::write(out_dir.join("report.md"), report.as_bytes())?;
    manifest
        .artifacts
        .insert("report.md".to_string(), sha256_hex(report.as_bytes()));
    std::fs::write(manifest_path, to_json(&manifest)?)?;
    Ok(manifest)
}
