//! Event studies around a single adoption date with never-treated
//! controls: group-time average treatment effects, event aggregation,
//! pre-trend placebos, and wild cluster bootstrap bands.
//!
//! Estimator scope: this module implements the *unconditional* and the
//! *regression-adjusted* ATT, not a doubly-robust propensity-weighted
//! estimator. With a single treatment cohort, never-treated controls, and
//! parallel trends the unconditional estimand coincides; covariate
//! adjustment uses a linear outcome regression on base-period covariate
//! values fitted among never-treated units.
//!
//! Conventions:
//! * post-period ATT(t) anchors on the last pre-treatment year
//!   (`treatment_year − 1`) and compares outcome changes of treated vs
//!   never-treated units;
//! * pre-period placebos use the varying base `t − 1` (short differences),
//!   and are reported separately plus as a pre-treatment average;
//! * missing cells are handled per (unit, base, t) pair by complete-case
//!   differencing; years where either group is empty are dropped and
//!   counted.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::quantile_type7;

/// One (unit, time) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidRow {
    pub unit: String,
    pub time: i32,
    pub outcome: f64,
    /// Aligned with [`DidPanel::covariate_names`].
    pub covariates: Vec<f64>,
}

/// Unit-time panel for a single-adoption-date event study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidPanel {
    rows: Vec<DidRow>,
    treated_units: BTreeSet<String>,
    treatment_year: i32,
    covariate_names: Vec<String>,
}

impl DidPanel {
    /// Build a panel. Treatment is an absorbing state by construction:
    /// membership in `treated_units` is a unit-level flag and the common
    /// `treatment_year` marks when those units switch on.
    pub fn new(
        mut rows: Vec<DidRow>,
        treated_units: BTreeSet<String>,
        treatment_year: i32,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("event-study panel has no rows"));
        }
        for r in &rows {
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::validation(format!(
                    "unit {} at {} has {} covariates, expected {}",
                    r.unit,
                    r.time,
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
            if !r.outcome.is_finite() || r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite value for unit {} at {}",
                    r.unit, r.time
                )));
            }
        }
        rows.sort_by(|a, b| a.unit.cmp(&b.unit).then(a.time.cmp(&b.time)));
        for w in rows.windows(2) {
            if w[0].unit == w[1].unit && w[0].time == w[1].time {
                return Err(Error::validation(format!(
                    "duplicate (unit, time) = ({}, {})",
                    w[0].unit, w[0].time
                )));
            }
        }
        Ok(DidPanel {
            rows,
            treated_units,
            treatment_year,
            covariate_names,
        })
    }

    pub fn rows(&self) -> &[DidRow] {
        &self.rows
    }

    pub fn treatment_year(&self) -> i32 {
        self.treatment_year
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn is_treated(&self, unit: &str) -> bool {
        self.treated_units.contains(unit)
    }

    fn units(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.unit.as_str()).collect()
    }
}

/// One evaluated year of the event study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearAtt {
    pub year: i32,
    /// Year of the comparison (base) period.
    pub base_year: i32,
    pub att: f64,
    pub n_treated: usize,
    pub n_control: usize,
    /// Filled by the wild bootstrap.
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Group-time ATT estimates with event aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttResult {
    pub treatment_year: i32,
    /// Anchor year for post-period estimates.
    pub base_year: i32,
    /// Simple average of the post-period ATTs.
    pub overall_att: f64,
    /// Average of the pre-period placebo ATTs (absent without pre years).
    pub pre_att: Option<f64>,
    /// Post-period years, ascending.
    pub years: Vec<YearAtt>,
    /// Pre-period placebo years (varying base `t − 1`), ascending.
    pub pre_years: Vec<YearAtt>,
    pub n_treated_units: usize,
    pub n_control_units: usize,
    /// Years present in the data that could not be evaluated (missing
    /// group or missing base observations).
    pub n_years_dropped: usize,
    /// Whether covariate regression adjustment was applied.
    pub adjusted: bool,
}

/// Changes from base to t for every unit observed in both periods,
/// together with treatment status and base-period covariates.
struct YearDeltas {
    treated: Vec<(f64, Vec<f64>)>,
    control: Vec<(f64, Vec<f64>)>,
    /// Unit ids in the same order, for residual bookkeeping.
    treated_units: Vec<String>,
    control_units: Vec<String>,
}

fn collect_deltas(
    panel: &DidPanel,
    by_key: &BTreeMap<(&str, i32), usize>,
    year: i32,
    base: i32,
) -> YearDeltas {
    let mut out = YearDeltas {
        treated: Vec::new(),
        control: Vec::new(),
        treated_units: Vec::new(),
        control_units: Vec::new(),
    };
    for unit in panel.units() {
        let (Some(&i_t), Some(&i_b)) = (by_key.get(&(unit, year)), by_key.get(&(unit, base)))
        else {
            continue;
        };
        let delta = panel.rows[i_t].outcome - panel.rows[i_b].outcome;
        let cov = panel.rows[i_b].covariates.clone();
        if panel.is_treated(unit) {
            out.treated.push((delta, cov));
            out.treated_units.push(unit.to_string());
        } else {
            out.control.push((delta, cov));
            out.control_units.push(unit.to_string());
        }
    }
    out
}

/// Estimate one year's ATT from deltas; with `adjust`, fit the control
/// outcome-change regression on base covariates and compare adjusted
/// means.
fn year_att(deltas: &YearDeltas, adjust: bool, year: i32) -> Result<f64> {
    if !adjust || deltas.treated.first().map_or(true, |d| d.1.is_empty()) {
        let mt: f64 = deltas.treated.iter().map(|d| d.0).sum::<f64>() / deltas.treated.len() as f64;
        let mc: f64 = deltas.control.iter().map(|d| d.0).sum::<f64>() / deltas.control.len() as f64;
        return Ok(mt - mc);
    }
    let p = deltas.treated[0].1.len() + 1;
    if deltas.control.len() < p + 1 {
        return Err(Error::validation(format!(
            "year {year}: {} control units cannot support a {p}-parameter adjustment",
            deltas.control.len()
        )));
    }
    let mut x = DMatrix::<f64>::zeros(deltas.control.len(), p);
    let mut y = DVector::<f64>::zeros(deltas.control.len());
    for (i, (d, cov)) in deltas.control.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, c) in cov.iter().enumerate() {
            x[(i, j + 1)] = *c;
        }
        y[i] = *d;
    }
    let xtx = x.transpose() * &x;
    let beta = xtx
        .cholesky()
        .ok_or_else(|| {
            Error::computation(format!(
                "year {year}: collinear covariates in the control regression"
            ))
        })?
        .solve(&(x.transpose() * &y));
    let predict = |cov: &[f64]| {
        beta[0]
            + cov
                .iter()
                .enumerate()
                .map(|(j, c)| beta[j + 1] * c)
                .sum::<f64>()
    };
    let att = deltas
        .treated
        .iter()
        .map(|(d, cov)| d - predict(cov))
        .sum::<f64>()
        / deltas.treated.len() as f64;
    Ok(att)
}

/// Group-time ATT with never-treated controls.
///
/// Post years anchor on `treatment_year − 1`; pre years are short-difference
/// placebos on base `t − 1`. `adjust` switches on covariate regression
/// adjustment (a panel without covariates estimates unconditionally either
/// way).
pub fn att_group_time(panel: &DidPanel, adjust: bool) -> Result<AttResult> {
    let units = panel.units();
    let treated: Vec<&str> = units
        .iter()
        .copied()
        .filter(|u| panel.is_treated(u))
        .collect();
    let control: Vec<&str> = units
        .iter()
        .copied()
        .filter(|u| !panel.is_treated(u))
        .collect();
    if control.is_empty() {
        return Err(Error::validation(
            "event study needs never-treated control units",
        ));
    }
    if treated.is_empty() {
        return Err(Error::validation("event study needs treated units"));
    }
    let base_year = panel.treatment_year - 1;
    let by_key: BTreeMap<(&str, i32), usize> = panel
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.unit.as_str(), r.time), i))
        .collect();
    let years: BTreeSet<i32> = panel.rows.iter().map(|r| r.time).collect();

    let mut post = Vec::new();
    let mut pre = Vec::new();
    let mut dropped = 0usize;
    for &year in &years {
        let (base, is_post) = if year >= panel.treatment_year {
            (base_year, true)
        } else {
            (year - 1, false)
        };
        if !is_post && !years.contains(&base) {
            continue; // the earliest year has no short-difference base
        }
        let deltas = collect_deltas(panel, &by_key, year, base);
        if deltas.treated.is_empty() || deltas.control.is_empty() {
            dropped += 1;
            continue;
        }
        let att = year_att(&deltas, adjust, year)?;
        let row = YearAtt {
            year,
            base_year: base,
            att,
            n_treated: deltas.treated.len(),
            n_control: deltas.control.len(),
            se: None,
            ci_lo: None,
            ci_hi: None,
        };
        if year >= panel.treatment_year {
            post.push(row);
        } else {
            pre.push(row);
        }
    }
    if post.is_empty() {
        return Err(Error::validation(
            "no post-treatment year could be evaluated",
        ));
    }
    let overall_att = post.iter().map(|y| y.att).sum::<f64>() / post.len() as f64;
    let pre_att = if pre.is_empty() {
        None
    } else {
        Some(pre.iter().map(|y| y.att).sum::<f64>() / pre.len() as f64)
    };
    Ok(AttResult {
        treatment_year: panel.treatment_year,
        base_year,
        overall_att,
        pre_att,
        years: post,
        pre_years: pre,
        n_treated_units: treated.len(),
        n_control_units: control.len(),
        n_years_dropped: dropped,
        adjusted: adjust && !panel.covariate_names.is_empty(),
    })
}

/// Event-study estimates with wild-cluster-bootstrap uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyResult {
    /// Per-year rows carry bootstrap SEs and 95% bands.
    pub att: AttResult,
    pub overall_se: f64,
    /// Percentile interval of the bootstrapped overall ATT.
    pub overall_ci95: (f64, f64),
    pub pre_se: Option<f64>,
    pub pre_ci95: Option<(f64, f64)>,
    pub n_boot: usize,
    pub n_clusters: usize,
}

impl EventStudyResult {
    /// Plot-ready CSV: one row per evaluated year (pre then post) with
    /// event time relative to treatment.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["event_time", "year", "att", "se", "ci_lo", "ci_hi"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for y in self.att.pre_years.iter().chain(self.att.years.iter()) {
            w.write_record([
                (y.year - self.att.treatment_year).to_string(),
                y.year.to_string(),
                y.att.to_string(),
                opt(y.se),
                opt(y.ci_lo),
                opt(y.ci_hi),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Two-group difference-in-means standard error from per-unit values.
fn two_group_se(treated: &[f64], control: &[f64]) -> Option<f64> {
    if treated.len() < 2 || control.len() < 2 {
        return None;
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    Some((var(treated) / treated.len() as f64 + var(control) / control.len() as f64).sqrt())
}

/// Wild cluster bootstrap for the event study.
///
/// Clusters are units; each repetition flips all of a unit's residuals by
/// a common Rademacher sign (so within-unit serial dependence survives),
/// re-estimates every year's ATT, and the aggregates. Per-year intervals
/// are percentile-t (using the two-group analytic SE inside each
/// repetition); the overall and pre-treatment aggregates report the
/// bootstrap standard deviation and percentile intervals.
pub fn wild_cluster_bootstrap(
    panel: &DidPanel,
    adjust: bool,
    n_boot: usize,
    seed: u64,
) -> Result<EventStudyResult> {
    if n_boot < 2 {
        return Err(Error::validation("wild bootstrap needs at least 2 draws"));
    }
    let mut att = att_group_time(panel, adjust)?;
    let n_clusters = panel.units().len();
    if n_clusters < 5 {
        return Err(Error::validation(format!(
            "wild cluster bootstrap needs at least 5 clusters, got {n_clusters}"
        )));
    }

    // Per-year fitted/residual decomposition, keyed by unit.
    let by_key: BTreeMap<(&str, i32), usize> = panel
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.unit.as_str(), r.time), i))
        .collect();
    struct YearPieces {
        post: bool,
        year_index: usize,
        att_hat: f64,
        // (unit, fitted, residual) per group.
        treated: Vec<(String, f64, f64)>,
        control: Vec<(String, f64, f64)>,
    }
    let mut pieces = Vec::new();
    for (post, rows) in [(false, &att.pre_years), (true, &att.years)] {
        for (year_index, y) in rows.iter().enumerate() {
            let deltas = collect_deltas(panel, &by_key, y.year, y.base_year);
            // Group-mean decomposition; under adjustment the covariate
            // prediction is recomputed per repetition, so residuals here
            // still center each group on its unadjusted mean.
            let mt: f64 =
                deltas.treated.iter().map(|d| d.0).sum::<f64>() / deltas.treated.len() as f64;
            let mc: f64 =
                deltas.control.iter().map(|d| d.0).sum::<f64>() / deltas.control.len() as f64;
            pieces.push((
                YearPieces {
                    post,
                    year_index,
                    att_hat: y.att,
                    treated: deltas
                        .treated
                        .iter()
                        .zip(&deltas.treated_units)
                        .map(|((d, _), u)| (u.clone(), mt, d - mt))
                        .collect(),
                    control: deltas
                        .control
                        .iter()
                        .zip(&deltas.control_units)
                        .map(|((d, _), u)| (u.clone(), mc, d - mc))
                        .collect(),
                },
                deltas,
            ));
        }
    }

    let unit_list: Vec<String> = panel.units().iter().map(|s| s.to_string()).collect();
    let unit_ord: BTreeMap<&str, usize> = unit_list
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();

    // One repetition: per-year (att*, se*) plus the aggregates.
    let reps: Vec<(Vec<(bool, usize, f64, Option<f64>)>, f64, Option<f64>)> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let signs: Vec<f64> = (0..unit_list.len())
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut rows = Vec::with_capacity(pieces.len());
            let mut post_sum = 0.0;
            let mut post_n = 0usize;
            let mut pre_sum = 0.0;
            let mut pre_n = 0usize;
            for (piece, deltas) in &pieces {
                let perturb =
                    |(u, fit, res): &(String, f64, f64)| fit + signs[unit_ord[u.as_str()]] * res;
                let t_star: Vec<f64> = piece.treated.iter().map(perturb).collect();
                let c_star: Vec<f64> = piece.control.iter().map(perturb).collect();
                let att_star = if att.adjusted {
                    let d_star = YearDeltas {
                        treated: t_star
                            .iter()
                            .zip(&deltas.treated)
                            .map(|(v, (_, cov))| (*v, cov.clone()))
                            .collect(),
                        control: c_star
                            .iter()
                            .zip(&deltas.control)
                            .map(|(v, (_, cov))| (*v, cov.clone()))
                            .collect(),
                        treated_units: Vec::new(),
                        control_units: Vec::new(),
                    };
                    match year_att(&d_star, true, 0) {
                        Ok(v) => v,
                        Err(_) => piece.att_hat,
                    }
                } else {
                    let mt: f64 = t_star.iter().sum::<f64>() / t_star.len() as f64;
                    let mc: f64 = c_star.iter().sum::<f64>() / c_star.len() as f64;
                    mt - mc
                };
                let se_star = two_group_se(&t_star, &c_star);
                rows.push((piece.post, piece.year_index, att_star, se_star));
                if piece.post {
                    post_sum += att_star;
                    post_n += 1;
                } else {
                    pre_sum += att_star;
                    pre_n += 1;
                }
            }
            let overall = post_sum / post_n.max(1) as f64;
            let pre = if pre_n > 0 {
                Some(pre_sum / pre_n as f64)
            } else {
                None
            };
            (rows, overall, pre)
        })
        .collect();

    // Per-year percentile-t bands.
    for (piece, deltas) in &pieces {
        let t_vals: Vec<f64> = deltas.treated.iter().map(|d| d.0).collect();
        let c_vals: Vec<f64> = deltas.control.iter().map(|d| d.0).collect();
        let se_hat = two_group_se(&t_vals, &c_vals);
        let draws: Vec<f64> = reps
            .iter()
            .flat_map(|(rows, _, _)| {
                rows.iter()
                    .filter(|r| r.0 == piece.post && r.1 == piece.year_index)
                    .map(|r| r.2)
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = if piece.post {
            &mut att.years[piece.year_index]
        } else {
            &mut att.pre_years[piece.year_index]
        };
        target.se = Some(sd);
        match se_hat {
            Some(se0) if se0 > 0.0 => {
                let mut t_stats: Vec<f64> = reps
                    .iter()
                    .flat_map(|(rows, _, _)| {
                        rows.iter()
                            .filter(|r| r.0 == piece.post && r.1 == piece.year_index)
                            .filter_map(|r| {
                                let se = r.3?;
                                if se > 0.0 {
                                    Some((r.2 - piece.att_hat) / se)
                                } else {
                                    None
                                }
                            })
                    })
                    .collect();
                if t_stats.len() >= 2 {
                    t_stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let q_lo = quantile_type7(&t_stats, 0.025);
                    let q_hi = quantile_type7(&t_stats, 0.975);
                    target.ci_lo = Some(piece.att_hat - q_hi * se0);
                    target.ci_hi = Some(piece.att_hat - q_lo * se0);
                } else {
                    target.ci_lo = Some(piece.att_hat);
                    target.ci_hi = Some(piece.att_hat);
                }
            }
            _ => {
                // Degenerate residuals: the band collapses to the point.
                target.ci_lo = Some(piece.att_hat);
                target.ci_hi = Some(piece.att_hat);
            }
        }
    }

    // Aggregates: bootstrap SD + percentile bands.
    let mut overall_draws: Vec<f64> = reps.iter().map(|r| r.1).collect();
    let n = overall_draws.len() as f64;
    let mean = overall_draws.iter().sum::<f64>() / n;
    let overall_se = (overall_draws
        .iter()
        .map(|d| (d - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt();
    overall_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let overall_ci95 = (
        quantile_type7(&overall_draws, 0.025),
        quantile_type7(&overall_draws, 0.975),
    );
    let (pre_se, pre_ci95) = if att.pre_years.is_empty() {
        (None, None)
    } else {
        let mut pre_draws: Vec<f64> = reps.iter().filter_map(|r| r.2).collect();
        let n = pre_draws.len() as f64;
        let mean = pre_draws.iter().sum::<f64>() / n;
        let sd = (pre_draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        pre_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (
            Some(sd),
            Some((
                quantile_type7(&pre_draws, 0.025),
                quantile_type7(&pre_draws, 0.975),
            )),
        )
    };

    Ok(EventStudyResult {
        att,
        overall_se,
        overall_ci95,
        pre_se,
        pre_ci95,
        n_boot,
        n_clusters,
    })
}
