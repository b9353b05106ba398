//! Markdown report rendering from on-disk artifacts.
//!
//! The report is deterministic: fixed-decimal rounding, sorted map
//! iteration, and no timestamps, so a fixed seed yields a byte-identical
//! file. Sections appear only when their backing artifact is present in
//! the manifest; an artifact that is listed but missing on disk is a
//! named error.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::path::Path;

use prodfn::inference::quantile_type7;
use prodfn::{Error, Result};

use crate::pipeline::{
    EventStudyArtifact, GevArtifact, LaborTestArtifact, ModelArtifact, S2Artifact,
};

/// Fixed-decimal format that never prints negative zero.
fn fmt(v: f64, prec: usize) -> String {
    let s = format!("{v:.prec$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| fmt(x, prec)).unwrap_or_else(|| "—".to_string())
}

fn fmt_pct(v: f64, uninformative: bool) -> String {
    let s = format!("{}%", fmt(100.0 * v, 1));
    if uninformative {
        format!("{s} †")
    } else {
        s
    }
}

fn read_artifact(dir: &Path, name: &str) -> Result<Vec<u8>> {
    std::fs::read(dir.join(name)).map_err(|_| {
        Error::validation(format!(
            "artifact {name} is listed in the manifest but missing from {}",
            dir.display()
        ))
    })
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let bytes = read_artifact(dir, name)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::validation(format!("artifact {name} is malformed: {e}")))
}

/// Column statistics for the elasticity table.
struct Summary {
    mean: f64,
    p25: f64,
    p50: f64,
    p75: f64,
    n: usize,
}

fn summarize(mut values: Vec<f64>) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(Summary {
        mean: values.iter().sum::<f64>() / n as f64,
        p25: quantile_type7(&values, 0.25),
        p50: quantile_type7(&values, 0.50),
        p75: quantile_type7(&values, 0.75),
        n,
    })
}

/// Parse the named float columns out of `functionals.csv`.
fn read_columns(dir: &Path, name: &str, wanted: &[&str]) -> Result<Vec<Vec<f64>>> {
    let bytes = read_artifact(dir, name)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader.headers().map_err(prodfn::Error::from)?.clone();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h == *w)
                .ok_or_else(|| Error::validation(format!("{name} lacks column {w}")))
        })
        .collect::<Result<_>>()?;
    let mut columns = vec![Vec::new(); wanted.len()];
    for record in reader.records() {
        let record = record.map_err(prodfn::Error::from)?;
        for (slot, &i) in columns.iter_mut().zip(&idx) {
            let field = record.get(i).unwrap_or("");
            if field.is_empty() {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::validation(format!("{name}: bad number '{field}'")))?;
            slot.push(v);
        }
    }
    Ok(columns)
}

/// Render the Markdown report for an output directory whose artifact set
/// is described by `artifacts`.
pub fn render(dir: &Path, artifacts: &BTreeMap<String, String>) -> Result<String> {
    if !artifacts.contains_key("model.json") {
        return Err(Error::validation(
            "report requires model.json in the manifest (run the estimate stage)",
        ));
    }
    let model: ModelArtifact = read_json(dir, "model.json")?;
    let mut out = String::new();
    let push = |out: &mut String, line: &str| {
        out.push_str(line);
        out.push('\n');
    };

    push(&mut out, "# Production function and misallocation report");
    push(&mut out, "");

    // --- Production model ------------------------------------------------
    let m = &model.model;
    push(&mut out, "## Production model");
    push(&mut out, "");
    push(&mut out, "| Quantity | Value |");
    push(&mut out, "|---|---|");
    push(
        &mut out,
        &format!("| Records (firm-years) | {} |", m.n_records),
    );
    push(&mut out, &format!("| Firms | {} |", m.n_firms));
    push(&mut out, &format!("| Lagged pairs | {} |", m.n_lag_pairs));
    push(
        &mut out,
        &format!("| Ex-post shock scale E[e^eps] | {} |", fmt(m.e_hat, 4)),
    );
    push(&mut out, &format!("| sd(eps) | {} |", fmt(m.sd_eps, 4)));
    push(&mut out, &format!("| sd(eta) | {} |", fmt(m.sd_eta, 4)));
    push(
        &mut out,
        &format!(
            "| Persistence polynomial | degree {} ({}, {}, {}, {}) |",
            m.effective_delta_degree,
            fmt(m.delta.d0, 4),
            fmt(m.delta.d1, 4),
            fmt(m.delta.d2, 4),
            fmt(m.delta.d3, 4)
        ),
    );
    push(
        &mut out,
        &format!(
            "| Stage 1 converged | {} (objective {}, {} iterations) |",
            model.share.converged,
            fmt(model.share.objective, 6),
            model.share.iterations
        ),
    );
    push(
        &mut out,
        &format!(
            "| Stage 2 converged | {} (moment norm {:.2e}, {} iterations) |",
            m.converged, m.moment_norm, m.outer_iterations
        ),
    );
    push(&mut out, "");
    push(
        &mut out,
        "Materials-elasticity coefficients (1, k, l, m, k², l², m², kl, km, lm):",
    );
    push(&mut out, "");
    let g = &m.gamma;
    push(
        &mut out,
        &format!(
            "> {}, {}, {}, {}, {}, {}, {}, {}, {}, {}",
            fmt(g.c0, 4),
            fmt(g.k, 4),
            fmt(g.l, 4),
            fmt(g.m, 4),
            fmt(g.kk, 4),
            fmt(g.ll, 4),
            fmt(g.mm, 4),
            fmt(g.kl, 4),
            fmt(g.km, 4),
            fmt(g.lm, 4)
        ),
    );
    push(&mut out, "");
    let a = &m.alpha;
    push(
        &mut out,
        "Integration-constant coefficients (k, l, k², l², kl):",
    );
    push(&mut out, "");
    push(
        &mut out,
        &format!(
            "> {}, {}, {}, {}, {}",
            fmt(a.k, 4),
            fmt(a.l, 4),
            fmt(a.kk, 4),
            fmt(a.ll, 4),
            fmt(a.kl, 4)
        ),
    );
    push(&mut out, "");

    // --- Average elasticities ---------------------------------------------
    if artifacts.contains_key("functionals.csv") {
        let cols = read_columns(dir, "functionals.csv", &["elas_k", "elas_l", "elas_m"])?;
        push(&mut out, "## Average output elasticities");
        push(&mut out, "");
        push(&mut out, "| Input | Mean | P25 | Median | P75 | N |");
        push(&mut out, "|---|---|---|---|---|---|");
        let mut means = Vec::new();
        for (label, col) in ["Capital", "Labor", "Materials"].iter().zip(cols) {
            let s = summarize(col)
                .ok_or_else(|| Error::validation("functionals.csv has no records"))?;
            push(
                &mut out,
                &format!(
                    "| {label} | {} | {} | {} | {} | {} |",
                    fmt(s.mean, 3),
                    fmt(s.p25, 3),
                    fmt(s.p50, 3),
                    fmt(s.p75, 3),
                    s.n
                ),
            );
            means.push(s.mean);
        }
        push(&mut out, "");
        push(
            &mut out,
            &format!(
                "Capital-to-labor elasticity ratio: {}",
                fmt(means[0] / means[1], 3)
            ),
        );
        push(&mut out, "");
    }

    // --- Extreme-value fits -------------------------------------------------
    if artifacts.contains_key("gev.json") {
        let gev: GevArtifact = read_json(dir, "gev.json")?;
        push(&mut out, "## Extreme-value fits of log TFP");
        push(&mut out, "");
        push(
            &mut out,
            "| Country | Shape | Scale | Location | Implied mean | N | Converged |",
        );
        push(&mut out, "|---|---|---|---|---|---|---|");
        for (country, fit) in &gev.fits {
            push(
                &mut out,
                &format!(
                    "| {country} | {} | {} | {} | {} | {} | {} |",
                    fmt(fit.xi, 3),
                    fmt(fit.sigma, 3),
                    fmt(fit.mu, 3),
                    fmt_opt(fit.implied_mean, 3),
                    fit.n,
                    fit.converged
                ),
            );
        }
        for (country, reason) in &gev.skipped {
            push(
                &mut out,
                &format!("| {country} | skipped: {reason} | | | | | |"),
            );
        }
        push(&mut out, "");
    }

    // --- Dispersion shares ----------------------------------------------------
    if artifacts.contains_key("s2.json") {
        let s2: S2Artifact = read_json(dir, "s2.json")?;
        push(
            &mut out,
            "## Marginal-product dispersion explained by TFP volatility",
        );
        push(&mut out, "");
        push(
            &mut out,
            "| Input | S² total | S² ω₋₁ | S² η | S² Δε | S̃² ω₋₁ | S̃² η | S̃² Δε |",
        );
        push(&mut out, "|---|---|---|---|---|---|---|---|");
        for (input, v) in &s2.inputs {
            let ch = |shares: &Option<prodfn::analytics::ChannelShares>,
                      pick: fn(&prodfn::analytics::ChannelShares) -> prodfn::analytics::S2Value|
             -> String {
                shares
                    .as_ref()
                    .map(|s| {
                        let x = pick(s);
                        fmt_pct(x.value, x.uninformative)
                    })
                    .unwrap_or_else(|| "—".to_string())
            };
            push(
                &mut out,
                &format!(
                    "| {input} | {} | {} | {} | {} | {} | {} | {} |",
                    fmt_pct(v.s2_total.value, v.s2_total.uninformative),
                    ch(&v.channels, |s| s.omega),
                    ch(&v.channels, |s| s.eta),
                    ch(&v.channels, |s| s.d_eps),
                    ch(&v.channels_cov, |s| s.omega),
                    ch(&v.channels_cov, |s| s.eta),
                    ch(&v.channels_cov, |s| s.d_eps)
                ),
            );
        }
        push(&mut out, "");
        push(
            &mut out,
            "† negative projection share: flagged uninformative and reported as computed.",
        );
        push(&mut out, "");
    }

    // --- Flexible-labor test -----------------------------------------------
    if artifacts.contains_key("labor_test.json") {
        let lt: LaborTestArtifact = read_json(dir, "labor_test.json")?;
        push(&mut out, "## Flexible-labor test");
        push(&mut out, "");
        if let Some(sector) = &lt.sector {
            push(&mut out, &format!("Sector restriction: {sector}"));
            push(&mut out, "");
        }
        let r = &lt.result;
        push(&mut out, "| Statistic | Value |");
        push(&mut out, "|---|---|");
        push(&mut out, &format!("| T | {} |", fmt(r.t_stat, 4)));
        for (label, ci) in [("90% CI", r.ci90), ("95% CI", r.ci95), ("99% CI", r.ci99)] {
            push(
                &mut out,
                &format!("| {label} | [{}; {}] |", fmt(ci.0, 4), fmt(ci.1, 4)),
            );
        }
        let reject = if r.reject_at.is_empty() {
            "none".to_string()
        } else {
            r.reject_at
                .iter()
                .map(|l| format!("{l}%"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        push(&mut out, &format!("| Rejected at | {reject} |"));
        push(&mut out, &format!("| Firm-years | {} |", r.n));
        push(
            &mut out,
            &format!(
                "| Replicates | {} stage-1 ({} failed) × {} stage-2 |",
                r.n_stage1_planned, r.n_stage1_failed, r.n_stage2_per_replicate
            ),
        );
        push(&mut out, "");
        let verdict = if r.reject_at.contains(&95) {
            "The flexible-labor first-order condition is rejected at the 95% level."
        } else {
            "The flexible-labor first-order condition cannot be rejected at the 95% level."
        };
        push(&mut out, verdict);
        push(&mut out, "");
    }

    // --- Event study ----------------------------------------------------------
    if artifacts.contains_key("event_study.json") {
        let es: EventStudyArtifact = read_json(dir, "event_study.json")?;
        push(&mut out, "## Event study");
        push(&mut out, "");
        push(
            &mut out,
            &format!(
                "Outcome {} for sectors {} treated from {}; {} wild-cluster draws over {} units.",
                es.outcome,
                es.treated_sectors.join(", "),
                es.treatment_year,
                es.result.n_boot,
                es.result.n_clusters
            ),
        );
        push(&mut out, "");
        let att = &es.result.att;
        push(&mut out, "| Aggregate | Estimate | SE | 95% CI |");
        push(&mut out, "|---|---|---|---|");
        push(
            &mut out,
            &format!(
                "| Post-treatment ATT | {} | {} | [{}; {}] |",
                fmt(att.overall_att, 3),
                fmt(es.result.overall_se, 3),
                fmt(es.result.overall_ci95.0, 3),
                fmt(es.result.overall_ci95.1, 3)
            ),
        );
        if let (Some(pre), Some(se), Some(ci)) = (att.pre_att, es.result.pre_se, es.result.pre_ci95)
        {
            push(
                &mut out,
                &format!(
                    "| Pre-treatment placebo | {} | {} | [{}; {}] |",
                    fmt(pre, 3),
                    fmt(se, 3),
                    fmt(ci.0, 3),
                    fmt(ci.1, 3)
                ),
            );
        }
        push(&mut out, "");
        push(&mut out, "| Event time | Year | ATT | SE | 95% CI |");
        push(&mut out, "|---|---|---|---|---|");
        for y in att.pre_years.iter().chain(att.years.iter()) {
            let ci = match (y.ci_lo, y.ci_hi) {
                (Some(lo), Some(hi)) => format!("[{}; {}]", fmt(lo, 3), fmt(hi, 3)),
                _ => "—".to_string(),
            };
            push(
                &mut out,
                &format!(
                    "| {} | {} | {} | {} | {} |",
                    y.year - att.treatment_year,
                    y.year,
                    fmt(y.att, 3),
                    fmt_opt(y.se, 3),
                    ci
                ),
            );
        }
        push(&mut out, "");
    }

    let mut footer = String::new();
    let _ = write!(
        footer,
        "Artifacts: {}.",
        artifacts
            .keys()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    );
    push(&mut out, &footer);
    Ok(out)
}
