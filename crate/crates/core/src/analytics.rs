//! Dispersion analytics: fixed-effects regressions with clustered
//! standard errors, per-cell dispersion tables, the share-of-dispersion
//! statistics `S²`/`S̃²`, extreme-value tail fits, concentration, and
//! weighted dispersion time series.
//!
//! The central objects are (sector, year) cells. Within each cell we
//! record the variance of log marginal products, the volatility of TFP
//! growth `Vol(ν) = Var(Δν)`, the variances of its channels
//! `(ω₋₁, η, Δε)` and their pairwise covariances, concentration (HHI),
//! and the cell's revenue weight. `S²` then measures how much of the
//! across-cell movement in `Var(mp)` is explained by the projection
//! `β²·Vol(ν)` implied by a slope `β` of `mp` on `Δν`; the channel
//! variants project on one channel's variance (plus, for `S̃²`, its two
//! covariance terms). Negative values are possible and are flagged
//! uninformative rather than clamped.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as IoWrite;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{Error, Result};
use crate::functionals::{FirmFunctionals, InputKind};

// ---------------------------------------------------------------------
// Fixed-effects regression with clustered standard errors
// ---------------------------------------------------------------------

/// Result of a within-transform fixed-effects regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeRegressionResult {
    /// Human-readable description of the absorbed effect (e.g.
    /// "sector-year").
    pub fe_spec: String,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// Cluster-robust standard errors (cluster = firm), small-sample
    /// corrected by `G/(G−1) × (N−1)/(N−K)`.
    pub se: Vec<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    /// Records used after dropping singleton cells.
    pub n_used: usize,
    /// Parameters counted against degrees of freedom: regressors plus
    /// absorbed cells.
    pub n_params: usize,
    pub n_cells: usize,
    pub n_clusters: usize,
    pub n_singletons_dropped: usize,
}

/// Within-transform (cell-demeaned) least squares with cluster-robust
/// standard errors.
///
/// `x` holds one column per named regressor. Cells with a single record
/// carry no within variation and are dropped (counted); degrees of
/// freedom charge one parameter per remaining cell. Collinear or
/// within-constant regressors are an error naming the columns.
pub fn fe_regress(
    y: &[f64],
    x_names: &[&str],
    x: &[Vec<f64>],
    fe: &[String],
    cluster: &[String],
    fe_spec: &str,
) -> Result<FeRegressionResult> {
    let n = y.len();
    if n == 0 {
        return Err(Error::validation("regression needs at least one record"));
    }
    if x.is_empty() || x.len() != x_names.len() {
        return Err(Error::validation(
            "x must have one named column per regressor",
        ));
    }
    if fe.len() != n || cluster.len() != n || x.iter().any(|c| c.len() != n) {
        return Err(Error::validation("regression inputs have unequal lengths"));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::validation("regression inputs must be finite"));
    }

    // Group by cell; drop singletons.
    let mut cells: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in fe.iter().enumerate() {
        cells.entry(id.as_str()).or_default().push(i);
    }
    let n_singletons_dropped = cells.values().filter(|v| v.len() < 2).count();
    cells.retain(|_, v| v.len() >= 2);
    if cells.is_empty() {
        return Err(Error::validation(
            "every fixed-effect cell is a singleton: nothing identifies the slopes",
        ));
    }
    let kept: Vec<usize> = cells.values().flat_map(|v| v.iter().copied()).collect();
    let n_used = kept.len();
    let n_cells = cells.len();
    let p = x.len();
    let n_params = p + n_cells;
    if n_used <= n_params {
        return Err(Error::validation(format!(
            "{n_used} records cannot identify {n_params} parameters ({p} slopes + {n_cells} cells)"
        )));
    }

    // Within transform: demean y and x by cell.
    let mut yt = DVector::zeros(n_used);
    let mut xt = DMatrix::zeros(n_used, p);
    let mut row = 0usize;
    for idx in cells.values() {
        let m = idx.len() as f64;
        let ym: f64 = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
        let xm: Vec<f64> = x
            .iter()
            .map(|c| idx.iter().map(|&i| c[i]).sum::<f64>() / m)
            .collect();
        for &i in idx {
            yt[row] = y[i] - ym;
            for (j, c) in x.iter().enumerate() {
                xt[(row, j)] = c[i] - xm[j];
            }
            row += 1;
        }
    }

    // Collinearity / no-within-variation check by pivoted Gram–Schmidt on
    // the demeaned columns.
    {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut bad = Vec::new();
        for j in 0..p {
            let mut v = xt.column(j).into_owned();
            let orig = v.norm();
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
            if v.norm() <= 1e-10 * orig.max(1e-12) {
                bad.push(x_names[j].to_string());
            } else {
                basis.push(v.unscale(v.norm()));
            }
        }
        if !bad.is_empty() {
            return Err(Error::computation(format!(
                "no within-cell variation or collinear regressors: {}",
                bad.join(", ")
            )));
        }
    }

    let xtx = xt.transpose() * &xt;
    let xty = xt.transpose() * &yt;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::computation("normal equations not positive definite"))?;
    let beta = chol.solve(&xty);
    let resid = &yt - &xt * &beta;

    // Cluster sandwich.
    let mut by_cluster: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, &i) in kept.iter().enumerate() {
        by_cluster.entry(cluster[i].as_str()).or_default().push(r);
    }
    let g = by_cluster.len();
    if g < 2 {
        return Err(Error::validation(
            "cluster-robust errors need at least 2 clusters",
        ));
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for rows in by_cluster.values() {
        let mut s = DVector::<f64>::zeros(p);
        for &r in rows {
            for j in 0..p {
                s[j] += xt[(r, j)] * resid[r];
            }
        }
        meat += &s * s.transpose();
    }
    let correction =
        (g as f64 / (g as f64 - 1.0)) * ((n_used as f64 - 1.0) / (n_used as f64 - n_params as f64));
    let bread = chol.inverse();
    let vcov = &bread * meat * &bread * correction;
    let se: Vec<f64> = (0..p).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect();

    // R² in the dummy-inclusive sense: cell means are explained.
    let y_bar: f64 = kept.iter().map(|&i| y[i]).sum::<f64>() / n_used as f64;
    let sst: f64 = kept.iter().map(|&i| (y[i] - y_bar).powi(2)).sum();
    if sst <= 0.0 {
        return Err(Error::validation("outcome has zero variance"));
    }
    let ssr: f64 = resid.iter().map(|r| r * r).sum();
    let r2 = 1.0 - ssr / sst;
    let adj_r2 = 1.0 - (1.0 - r2) * (n_used as f64 - 1.0) / (n_used as f64 - n_params as f64);

    Ok(FeRegressionResult {
        fe_spec: fe_spec.to_string(),
        names: x_names.iter().map(|s| s.to_string()).collect(),
        coef: beta.iter().copied().collect(),
        se,
        r2,
        adj_r2,
        n_used,
        n_params,
        n_cells,
        n_clusters: g,
        n_singletons_dropped,
    })
}

// ---------------------------------------------------------------------
// Dispersion table
// ---------------------------------------------------------------------

/// Per-(country, sector, year) second moments of the functional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionCell {
    pub country: String,
    pub sector: String,
    pub year: i32,
    pub n_records: usize,
    pub n_firms: usize,
    pub var_mp_k: Option<f64>,
    pub var_mp_l: Option<f64>,
    pub var_mp_m: Option<f64>,
    /// `Vol(ν) = Var(Δν)`.
    pub vol_nu: Option<f64>,
    pub var_omega_lag: Option<f64>,
    pub var_eta: Option<f64>,
    pub var_deps: Option<f64>,
    pub cov_omega_eta: Option<f64>,
    pub cov_omega_deps: Option<f64>,
    pub cov_eta_deps: Option<f64>,
    pub hhi: f64,
    /// Cell revenue.
    pub revenue: f64,
    /// Revenue share within the cell's (country, year); shares sum to 1.
    pub weight: f64,
}

impl DispersionCell {
    /// Variance of the log marginal product of one input.
    pub fn var_mp(&self, input: InputKind) -> Option<f64> {
        match input {
            InputKind::Capital => self.var_mp_k,
            InputKind::Labor => self.var_mp_l,
            InputKind::Materials => self.var_mp_m,
        }
    }
}

/// All dispersion cells plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionTable {
    /// Sorted by (country, sector, year).
    pub cells: Vec<DispersionCell>,
    /// Cells excluded for having fewer than two distinct firms.
    pub n_cells_dropped: usize,
}

fn sample_var(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn sample_cov(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Some(pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (n - 1.0))
}

/// Herfindahl–Hirschman index `Σ share²` of revenues within a cell.
///
/// Errors on an empty cell, negative revenues, or all-zero revenues.
pub fn hhi(revenues: &[f64]) -> Result<f64> {
    if revenues.is_empty() {
        return Err(Error::validation("HHI of an empty cell"));
    }
    if revenues.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::validation(
            "revenues must be finite and non-negative",
        ));
    }
    let total: f64 = revenues.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("HHI undefined for all-zero revenues"));
    }
    Ok(revenues.iter().map(|r| (r / total).powi(2)).sum())
}

/// Build the dispersion table from a functional table.
///
/// Cells are (country, sector, year); cells with fewer than two distinct
/// firms are excluded and counted. Variances use the n−1 convention over
/// the records where the series is present; covariances over jointly
/// present pairs. Cell weights are revenue shares within (country, year).
pub fn build_dispersion_table(functionals: &FirmFunctionals) -> Result<DispersionTable> {
    if functionals.records.is_empty() {
        return Err(Error::validation("empty functional table"));
    }
    let mut groups: BTreeMap<(&str, &str, i32), Vec<usize>> = BTreeMap::new();
    for (i, r) in functionals.records.iter().enumerate() {
        groups
            .entry((r.country.as_str(), r.sector.as_str(), r.year))
            .or_default()
            .push(i);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let computed: Vec<Result<Option<DispersionCell>>> = groups
        .par_iter()
        .map(|((country, sector, year), idx)| {
            let recs: Vec<_> = idx.iter().map(|&i| &functionals.records[i]).collect();
            let firms: BTreeSet<&str> = recs.iter().map(|r| r.firm_id.as_str()).collect();
            if firms.len() < 2 {
                return Ok(None);
            }
            let take = |f: &dyn Fn(&crate::functionals::FunctionalRecord) -> Option<f64>| {
                recs.iter().filter_map(|r| f(r)).collect::<Vec<f64>>()
            };
            let pair =
                |f: &dyn Fn(&crate::functionals::FunctionalRecord) -> Option<f64>,
                 g: &dyn Fn(&crate::functionals::FunctionalRecord) -> Option<f64>| {
                    recs.iter()
                        .filter_map(|r| Some((f(r)?, g(r)?)))
                        .collect::<Vec<(f64, f64)>>()
                };
            let revenue: f64 = recs.iter().map(|r| r.revenue).sum();
            let hhi_value = hhi(&recs.iter().map(|r| r.revenue).collect::<Vec<_>>())?;
            let om = |r: &crate::functionals::FunctionalRecord| r.omega_lag;
            let et = |r: &crate::functionals::FunctionalRecord| r.eta;
            let de = |r: &crate::functionals::FunctionalRecord| r.d_eps;
            Ok(Some(DispersionCell {
                country: country.to_string(),
                sector: sector.to_string(),
                year: *year,
                n_records: recs.len(),
                n_firms: firms.len(),
                var_mp_k: sample_var(&take(&|r| r.log_mp_k)),
                var_mp_l: sample_var(&take(&|r| r.log_mp_l)),
                var_mp_m: sample_var(&take(&|r| r.log_mp_m)),
                vol_nu: sample_var(&take(&|r| r.dnu)),
                var_omega_lag: sample_var(&take(&om)),
                var_eta: sample_var(&take(&et)),
                var_deps: sample_var(&take(&de)),
                cov_omega_eta: sample_cov(&pair(&om, &et)),
                cov_omega_deps: sample_cov(&pair(&om, &de)),
                cov_eta_deps: sample_cov(&pair(&et, &de)),
                hhi: hhi_value,
                revenue,
                weight: 0.0,
            }))
        })
        .collect();

    let mut cells = Vec::new();
    let mut dropped = 0usize;
    for c in computed {
        match c? {
            Some(cell) => cells.push(cell),
            None => dropped += 1,
        }
    }
    if cells.is_empty() {
        return Err(Error::validation(
            "no (sector, year) cell has two distinct firms",
        ));
    }
    // Revenue weights within (country, year).
    let mut totals: BTreeMap<(&str, i32), f64> = BTreeMap::new();
    for c in &cells {
        *totals.entry((c.country.as_str(), c.year)).or_insert(0.0) += c.revenue;
    }
    let totals: BTreeMap<(String, i32), f64> = totals
        .into_iter()
        .map(|((c, y), v)| ((c.to_string(), y), v))
        .collect();
    for c in &mut cells {
        c.weight = c.revenue / totals[&(c.country.clone(), c.year)];
    }
    Ok(DispersionTable {
        cells,
        n_cells_dropped: dropped,
    })
}

impl DispersionTable {
    /// Emit the table as CSV; missing statistics are empty fields.
    pub fn write_csv<W: IoWrite>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "country",
            "sector",
            "year",
            "n_records",
            "n_firms",
            "var_mp_k",
            "var_mp_l",
            "var_mp_m",
            "vol_nu",
            "var_omega_lag",
            "var_eta",
            "var_deps",
            "cov_omega_eta",
            "cov_omega_deps",
            "cov_eta_deps",
            "hhi",
            "revenue",
            "weight",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.country.clone(),
                c.sector.clone(),
                c.year.to_string(),
                c.n_records.to_string(),
                c.n_firms.to_string(),
                opt(c.var_mp_k),
                opt(c.var_mp_l),
                opt(c.var_mp_m),
                opt(c.vol_nu),
                opt(c.var_omega_lag),
                opt(c.var_eta),
                opt(c.var_deps),
                opt(c.cov_omega_eta),
                opt(c.cov_omega_deps),
                opt(c.cov_eta_deps),
                c.hhi.to_string(),
                c.revenue.to_string(),
                c.weight.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Share-of-dispersion statistics
// ---------------------------------------------------------------------

/// A share-of-dispersion value; negative values are mathematically valid
/// but carry no explanatory interpretation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2Value {
    pub value: f64,
    pub uninformative: bool,
}

impl S2Value {
    fn from_ratio(num: f64, den: f64) -> Result<Self> {
        if den <= 0.0 {
            return Err(Error::computation(
                "marginal-product variances are all zero: share undefined",
            ));
        }
        let value = 1.0 - num / den;
        Ok(S2Value {
            value,
            uninformative: value < 0.0,
        })
    }
}

/// Per-sector slopes of log marginal products on the three TFP-growth
/// channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBetas {
    pub omega: f64,
    pub eta: f64,
    pub d_eps: f64,
}

/// Per-channel share-of-dispersion values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelShares {
    pub omega: S2Value,
    pub eta: S2Value,
    pub d_eps: S2Value,
}

/// Share of the across-cell dispersion of `Var(mp)` explained by the
/// TFP-volatility projection `β²·Vol(ν)`:
/// `S² = 1 − ΣΣ(Var − β_s²·Vol)² / ΣΣ Var²`.
///
/// Sums run over cells with both statistics present whose sector has a
/// slope. The squared-slope projection is formed here; callers supply the
/// regression slope itself.
pub fn s2_total(
    table: &DispersionTable,
    beta_dev_by_sector: &BTreeMap<String, f64>,
    input: InputKind,
) -> Result<S2Value> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used = 0usize;
    for c in &table.cells {
        let (Some(var_mp), Some(vol)) = (c.var_mp(input), c.vol_nu) else {
            continue;
        };
        let Some(beta) = beta_dev_by_sector.get(&c.sector) else {
            continue;
        };
        num += (var_mp - beta * beta * vol).powi(2);
        den += var_mp * var_mp;
        used += 1;
    }
    if used == 0 {
        return Err(Error::validation(
            "no cell has both Var(mp) and Vol(ν) with a sector slope",
        ));
    }
    S2Value::from_ratio(num, den)
}

fn s2_by_channel(
    table: &DispersionTable,
    betas: &BTreeMap<String, ChannelBetas>,
    input: InputKind,
    with_cov: bool,
) -> Result<ChannelShares> {
    // projection(cell, betas) per channel; None when a needed moment is missing.
    let one = |proj: &dyn Fn(&DispersionCell, &ChannelBetas) -> Option<f64>| -> Result<S2Value> {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut used = 0usize;
        for c in &table.cells {
            let Some(var_mp) = c.var_mp(input) else {
                continue;
            };
            let Some(b) = betas.get(&c.sector) else {
                continue;
            };
            let Some(p) = proj(c, b) else { continue };
            num += (var_mp - p).powi(2);
            den += var_mp * var_mp;
            used += 1;
        }
        if used == 0 {
            return Err(Error::validation(
                "no cell has the moments required by the channel projection",
            ));
        }
        S2Value::from_ratio(num, den)
    };
    if !with_cov {
        return Ok(ChannelShares {
            omega: one(&|c, b| Some(b.omega * b.omega * c.var_omega_lag?))?,
            eta: one(&|c, b| Some(b.eta * b.eta * c.var_eta?))?,
            d_eps: one(&|c, b| Some(b.d_eps * b.d_eps * c.var_deps?))?,
        });
    }
    Ok(ChannelShares {
        omega: one(&|c, b| {
            Some(
                b.omega * b.omega * c.var_omega_lag?
                    + b.omega * b.eta * c.cov_omega_eta?
                    + b.omega * b.d_eps * c.cov_omega_deps?,
            )
        })?,
        eta: one(&|c, b| {
            Some(
                b.eta * b.eta * c.var_eta?
                    + b.omega * b.eta * c.cov_omega_eta?
                    + b.eta * b.d_eps * c.cov_eta_deps?,
            )
        })?,
        d_eps: one(&|c, b| {
            Some(
                b.d_eps * b.d_eps * c.var_deps?
                    + b.omega * b.d_eps * c.cov_omega_deps?
                    + b.eta * b.d_eps * c.cov_eta_deps?,
            )
        })?,
    })
}

/// Per-channel shares using only each channel's own variance term.
pub fn s2_channels(
    table: &DispersionTable,
    betas: &BTreeMap<String, ChannelBetas>,
    input: InputKind,
) -> Result<ChannelShares> {
    s2_by_channel(table, betas, input, false)
}

/// Per-channel shares whose projections add the channel's two covariance
/// terms (each with a single cross-slope coefficient).
pub fn s2_channels_cov(
    table: &DispersionTable,
    betas: &BTreeMap<String, ChannelBetas>,
    input: InputKind,
) -> Result<ChannelShares> {
    s2_by_channel(table, betas, input, true)
}

// ---------------------------------------------------------------------
// Generalized extreme value fit
// ---------------------------------------------------------------------

/// Maximum-likelihood GEV fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    /// Shape ξ (Frechet-type when positive).
    pub xi: f64,
    /// Scale σ > 0.
    pub sigma: f64,
    /// Location μ.
    pub mu: f64,
    pub log_likelihood: f64,
    /// Standard errors from the inverse numerical Hessian; absent when
    /// the Hessian is not positive definite at the optimum.
    pub se_xi: Option<f64>,
    pub se_sigma: Option<f64>,
    pub se_mu: Option<f64>,
    /// `μ + σ(Γ(1−ξ)−1)/ξ`, defined for 0 < ξ < 1.
    pub implied_mean: Option<f64>,
    pub n: usize,
    pub converged: bool,
}

/// Implied mean of a GEV distribution, defined for shapes in (0, 1).
pub fn gev_implied_mean(xi: f64, sigma: f64, mu: f64) -> Option<f64> {
    if xi > 0.0 && xi < 1.0 {
        Some(mu + sigma * (gamma_fn(1.0 - xi) - 1.0) / xi)
    } else {
        None
    }
}

/// Negative log-likelihood in the parametrization (ξ, ln σ, μ).
/// Returns +∞ outside the support.
fn gev_nll(samples: &[f64], p: &[f64; 3]) -> f64 {
    let (xi, sigma, mu) = (p[0], p[1].exp(), p[2]);
    let n = samples.len() as f64;
    if !sigma.is_finite() || sigma <= 0.0 {
        return f64::INFINITY;
    }
    let mut acc = n * sigma.ln();
    if xi.abs() < 1e-6 {
        for &x in samples {
            let t = (x - mu) / sigma;
            acc += t + (-t).exp();
        }
    } else {
        for &x in samples {
            let z = 1.0 + xi * (x - mu) / sigma;
            if z <= 0.0 {
                return f64::INFINITY;
            }
            acc += (1.0 + 1.0 / xi) * z.ln() + z.powf(-1.0 / xi);
        }
    }
    if acc.is_finite() {
        acc
    } else {
        f64::INFINITY
    }
}

fn numeric_gradient(f: &dyn Fn(&[f64; 3]) -> f64, p: &[f64; 3]) -> Option<[f64; 3]> {
    let mut g = [0.0; 3];
    for i in 0..3 {
        let h = 1e-7 * (1.0 + p[i].abs());
        let mut up = *p;
        up[i] += h;
        let mut dn = *p;
        dn[i] -= h;
        let (fu, fd) = (f(&up), f(&dn));
        if !(fu.is_finite() && fd.is_finite()) {
            return None;
        }
        g[i] = (fu - fd) / (2.0 * h);
    }
    Some(g)
}

/// BFGS with backtracking line search and numeric gradients; the
/// objective may return +∞ (infeasible), which the line search treats as
/// a rejection.
fn minimize_bfgs(f: &dyn Fn(&[f64; 3]) -> f64, start: [f64; 3]) -> ([f64; 3], f64, bool) {
    let mut p = start;
    let mut fp = f(&p);
    let mut h_inv = nalgebra::Matrix3::<f64>::identity();
    let Some(mut grad) = numeric_gradient(f, &p) else {
        return (p, fp, false);
    };
    let mut converged = false;
    for _ in 0..300 {
        let g = nalgebra::Vector3::from_row_slice(&grad);
        if g.amax() < 1e-8 * (1.0 + fp.abs()) {
            converged = true;
            break;
        }
        let dir = -(&h_inv * g);
        let mut t = 1.0;
        let slope = g.dot(&dir);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = [p[0] + t * dir[0], p[1] + t * dir[1], p[2] + t * dir[2]];
            let fc = f(&cand);
            if fc.is_finite() && fc <= fp + 1e-4 * t * slope {
                let Some(grad_new) = numeric_gradient(f, &cand) else {
                    break;
                };
                let s = nalgebra::Vector3::new(t * dir[0], t * dir[1], t * dir[2]);
                let yv = nalgebra::Vector3::from_row_slice(&grad_new) - g;
                let sy = s.dot(&yv);
                if sy > 1e-12 {
                    let rho = 1.0 / sy;
                    let i = nalgebra::Matrix3::identity();
                    let a = i - rho * s * yv.transpose();
                    h_inv = a * h_inv * a.transpose() + rho * s * s.transpose();
                }
                if (fp - fc).abs() <= 1e-14 * (1.0 + fp.abs()) {
                    converged = true;
                }
                p = cand;
                fp = fc;
                grad = grad_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Gradient may be unreliable next to the support boundary;
            // restart the curvature model once, then give up.
            if h_inv == nalgebra::Matrix3::identity() {
                break;
            }
            h_inv = nalgebra::Matrix3::identity();
        }
        if converged {
            break;
        }
    }
    (p, fp, converged)
}

/// Probability-weighted-moment starting values (ξ, σ, μ).
fn gev_pwm_start(samples: &[f64]) -> (f64, f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let b0: f64 = sorted.iter().sum::<f64>() / n;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let i = i as f64;
        b1 += i / (n - 1.0) * x;
        b2 += i * (i - 1.0) / ((n - 1.0) * (n - 2.0)) * x;
    }
    b1 /= n;
    b2 /= n;
    let c = (2.0 * b1 - b0) / (3.0 * b2 - b0) - std::f64::consts::LN_2 / 3f64.ln();
    let k = 7.8590 * c + 2.9554 * c * c; // opposite-sign shape convention
    if k.abs() < 1e-8 {
        let sigma = (2.0 * b1 - b0) / std::f64::consts::LN_2;
        let mu = b0 - 0.577_215_664_901_532_9 * sigma;
        return (0.0, sigma.max(1e-8), mu);
    }
    let sigma = (2.0 * b1 - b0) * k / (gamma_fn(1.0 + k) * (1.0 - 2f64.powf(-k)));
    let mu = b0 + sigma * (gamma_fn(1.0 + k) - 1.0) / k;
    ((-k).clamp(-0.5, 0.5), sigma.abs().max(1e-8), mu)
}

/// Fit a GEV distribution by maximum likelihood.
///
/// Starts from probability-weighted moments, optimizes (ξ, ln σ, μ) by
/// BFGS with the support condition enforced through the likelihood, and
/// reports standard errors from the numerical Hessian in the natural
/// (ξ, σ, μ) parametrization. Shapes below 1e-6 in magnitude use the
/// Gumbel limit.
pub fn fit_gev(samples: &[f64]) -> Result<GevFit> {
    if samples.len() < 50 {
        return Err(Error::validation(format!(
            "GEV fit needs at least 50 observations, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("samples must be finite"));
    }
    if sample_var(samples).unwrap_or(0.0) <= 0.0 {
        return Err(Error::validation(
            "degenerate sample: zero variance, GEV fit undefined",
        ));
    }
    let (xi0, sigma0, mu0) = gev_pwm_start(samples);
    let f = |p: &[f64; 3]| gev_nll(samples, p);
    let mut start = [xi0, sigma0.ln(), mu0];
    // Make sure the starting point is feasible; widening the scale and
    // shrinking the shape always reaches feasibility.
    let mut guard = 0;
    while !f(&start).is_finite() && guard < 60 {
        start[1] += 0.25;
        start[0] *= 0.7;
        guard += 1;
    }
    if !f(&start).is_finite() {
        return Err(Error::computation("could not find a feasible GEV start"));
    }
    let (p, nll, converged) = minimize_bfgs(&f, start);
    let (xi, sigma, mu) = (p[0], p[1].exp(), p[2]);

    // Hessian in the natural parametrization.
    let nat = |q: &[f64; 3]| gev_nll(samples, &[q[0], q[1].ln(), q[2]]);
    let q = [xi, sigma, mu];
    let mut hess = nalgebra::Matrix3::<f64>::zeros();
    let hstep = |v: f64| 1e-5 * (1.0 + v.abs());
    let mut hess_ok = true;
    'outer: for i in 0..3 {
        for j in i..3 {
            let (hi, hj) = (hstep(q[i]), hstep(q[j]));
            let at = |si: f64, sj: f64| {
                let mut r = q;
                r[i] += si * hi;
                r[j] += sj * hj;
                nat(&r)
            };
            let d2 = if i == j {
                (at(1.0, 0.0) - 2.0 * nll + at(-1.0, 0.0)) / (hi * hi)
            } else {
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * hi * hj)
            };
            if !d2.is_finite() {
                hess_ok = false;
                break 'outer;
            }
            hess[(i, j)] = d2;
            hess[(j, i)] = d2;
        }
    }
    let ses = if hess_ok {
        hess.try_inverse().and_then(|inv| {
            let d = [inv[(0, 0)], inv[(1, 1)], inv[(2, 2)]];
            if d.iter().all(|v| *v > 0.0) {
                Some([d[0].sqrt(), d[1].sqrt(), d[2].sqrt()])
            } else {
                None
            }
        })
    } else {
        None
    };

    Ok(GevFit {
        xi,
        sigma,
        mu,
        log_likelihood: -nll,
        se_xi: ses.map(|s| s[0]),
        se_sigma: ses.map(|s| s[1]),
        se_mu: ses.map(|s| s[2]),
        implied_mean: gev_implied_mean(xi, sigma, mu),
        n: samples.len(),
        converged,
    })
}

// ---------------------------------------------------------------------
// Dispersion time series
// ---------------------------------------------------------------------

/// One (country, year) point of the weighted dispersion series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionPoint {
    pub country: String,
    pub year: i32,
    pub sd_mp_k: Option<f64>,
    pub sd_mp_l: Option<f64>,
    pub sd_mp_m: Option<f64>,
    /// Std dev of the TFP level `ν`.
    pub sd_nu: Option<f64>,
    /// Std dev of TFP growth `Δν`.
    pub sd_dnu: Option<f64>,
}

/// Revenue-weighted averages of per-industry standard deviations, one
/// point per (country, year).
///
/// Within each (country, year), every industry contributes its standard
/// deviation weighted by its revenue share among the industries where the
/// statistic is defined. When `base_year` is given, each country's series
/// is normalized so the base-year value is 1; a country missing that year
/// (or the base value) is an error.
pub fn dispersion_series(
    functionals: &FirmFunctionals,
    base_year: Option<i32>,
) -> Result<Vec<DispersionPoint>> {
    if functionals.records.is_empty() {
        return Err(Error::validation("empty functional table"));
    }
    let mut groups: BTreeMap<(&str, i32), BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, r) in functionals.records.iter().enumerate() {
        groups
            .entry((r.country.as_str(), r.year))
            .or_default()
            .entry(r.sector.as_str())
            .or_default()
            .push(i);
    }
    let mut points = Vec::new();
    for ((country, year), sectors) in groups {
        let weighted = |f: &dyn Fn(&crate::functionals::FunctionalRecord) -> Option<f64>| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for idx in sectors.values() {
                let vals: Vec<f64> = idx
                    .iter()
                    .filter_map(|&i| f(&functionals.records[i]))
                    .collect();
                let Some(var) = sample_var(&vals) else {
                    continue;
                };
                let revenue: f64 = idx.iter().map(|&i| functionals.records[i].revenue).sum();
                acc += revenue * var.sqrt();
                wsum += revenue;
            }
            if wsum > 0.0 {
                Some(acc / wsum)
            } else {
                None
            }
        };
        points.push(DispersionPoint {
            country: country.to_string(),
            year,
            sd_mp_k: weighted(&|r| r.log_mp_k),
            sd_mp_l: weighted(&|r| r.log_mp_l),
            sd_mp_m: weighted(&|r| r.log_mp_m),
            sd_nu: weighted(&|r| Some(r.nu)),
            sd_dnu: weighted(&|r| r.dnu),
        });
    }
    if let Some(base) = base_year {
        let countries: BTreeSet<String> = points.iter().map(|p| p.country.clone()).collect();
        for country in countries {
            let base_point = points
                .iter()
                .find(|p| p.country == country && p.year == base)
                .cloned()
                .ok_or_else(|| {
                    Error::validation(format!("base year {base} missing for country {country}"))
                })?;
            let norm = |v: Option<f64>, b: Option<f64>| -> Result<Option<f64>> {
                match (v, b) {
                    (Some(v), Some(b)) if b > 0.0 => Ok(Some(v / b)),
                    (Some(_), _) => Err(Error::validation(format!(
                        "base year {base} value missing or zero for country {country}"
                    ))),
                    (None, _) => Ok(None),
                }
            };
            for p in points.iter_mut().filter(|p| p.country == country) {
                p.sd_mp_k = norm(p.sd_mp_k, base_point.sd_mp_k)?;
                p.sd_mp_l = norm(p.sd_mp_l, base_point.sd_mp_l)?;
                p.sd_mp_m = norm(p.sd_mp_m, base_point.sd_mp_m)?;
                p.sd_nu = norm(p.sd_nu, base_point.sd_nu)?;
                p.sd_dnu = norm(p.sd_dnu, base_point.sd_dnu)?;
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::FunctionalRecord;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    // ---------------- fe_regress ----------------

    #[test]
    fn exact_line_in_one_cell() {
        let x = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let y: Vec<f64> = x[0].iter().map(|v| 2.0 * v).collect();
        let fe = strings(&["a", "a", "a", "a"]);
        let cl = strings(&["f1", "f2", "f1", "f2"]);
        let r = fe_regress(&y, &["x"], &x, &fe, &cl, "cell").unwrap();
        assert_relative_eq!(r.coef[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(r.r2, 1.0, epsilon = 1e-12);
        assert_eq!(r.n_used, 4);
    }

    #[test]
    fn within_constant_regressor_is_collinearity_error() {
        // x2 varies across cells but not within → no within variation.
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = vec![
            vec![0.1, 0.9, 0.4, 0.7, 0.2, 0.5],
            vec![5.0, 5.0, 5.0, 8.0, 8.0, 8.0],
        ];
        let fe = strings(&["a", "a", "a", "b", "b", "b"]);
        let cl = strings(&["f1", "f2", "f3", "f4", "f5", "f6"]);
        let err = fe_regress(&y, &["x1", "x2"], &x, &fe, &cl, "cell").unwrap_err();
        assert!(err.to_string().contains("x2"), "{err}");
    }

    #[test]
    fn singletons_dropped_and_all_singletons_error() {
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let x = vec![vec![0.3, 1.0, 2.0, 3.0, 4.0]];
        let fe = strings(&["s", "a", "a", "a", "a"]);
        let cl = strings(&["f1", "f2", "f3", "f4", "f5"]);
        let r = fe_regress(&y, &["x"], &x, &fe, &cl, "cell").unwrap();
        assert_eq!(r.n_singletons_dropped, 1);
        assert_eq!(r.n_used, 4);

        let fe_all = strings(&["a", "b", "c", "d", "e"]);
        assert!(matches!(
            fe_regress(&y, &["x"], &x, &fe_all, &cl, "cell"),
            Err(Error::Validation(_))
        ));
    }

    /// Oracle: explicit-dummy least squares with the same cluster sandwich.
    #[test]
    fn matches_explicit_dummy_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 90;
        let cells = ["c0", "c1", "c2"];
        let firms = ["f0", "f1", "f2", "f3", "f4", "f5"];
        let mut y = Vec::new();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut fe = Vec::new();
        let mut cl = Vec::new();
        for i in 0..n {
            let c = i % cells.len();
            let f = i % firms.len();
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            let noise: f64 = rng.gen_range(-0.5..0.5);
            x1.push(a);
            x2.push(b);
            fe.push(cells[c].to_string());
            cl.push(firms[f].to_string());
            y.push(1.5 * a - 0.7 * b + 0.3 * (c as f64) + noise);
        }
        let r = fe_regress(
            &y,
            &["x1", "x2"],
            &[x1.clone(), x2.clone()],
            &fe,
            &cl,
            "cell",
        )
        .unwrap();

        // Dummy design: [x1 x2 D0 D1 D2] (no intercept).
        let p = 2 + cells.len();
        let mut xm = DMatrix::zeros(n, p);
        for i in 0..n {
            xm[(i, 0)] = x1[i];
            xm[(i, 1)] = x2[i];
            let c = cells.iter().position(|s| *s == fe[i]).unwrap();
            xm[(i, 2 + c)] = 1.0;
        }
        let yv = DVector::from_vec(y.clone());
        let xtx = xm.transpose() * &xm;
        let beta = xtx
            .clone()
            .cholesky()
            .unwrap()
            .solve(&(xm.transpose() * &yv));
        assert_relative_eq!(r.coef[0], beta[0], epsilon = 1e-8);
        assert_relative_eq!(r.coef[1], beta[1], epsilon = 1e-8);

        let resid = &yv - &xm * &beta;
        // Residual cell means vanish: the dummies absorb them.
        for c in &cells {
            let idx: Vec<usize> = (0..n).filter(|&i| fe[i] == *c).collect();
            let mean: f64 = idx.iter().map(|&i| resid[i]).sum::<f64>() / idx.len() as f64;
            assert!(mean.abs() < 1e-10);
        }
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for f in &firms {
            let mut s = DVector::<f64>::zeros(p);
            for i in (0..n).filter(|&i| cl[i] == *f) {
                for j in 0..p {
                    s[j] += xm[(i, j)] * resid[i];
                }
            }
            meat += &s * s.transpose();
        }
        let g = firms.len() as f64;
        let corr = g / (g - 1.0) * ((n as f64 - 1.0) / (n as f64 - p as f64));
        let bread = xtx.try_inverse().unwrap();
        let vc = &bread * meat * &bread * corr;
        assert_relative_eq!(r.se[0], vc[(0, 0)].sqrt(), epsilon = 1e-8);
        assert_relative_eq!(r.se[1], vc[(1, 1)].sqrt(), epsilon = 1e-8);

        // Same R² as the dummy regression.
        let ybar = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        let ssr: f64 = resid.iter().map(|r| r * r).sum();
        assert_relative_eq!(r.r2, 1.0 - ssr / sst, epsilon = 1e-10);
        assert!(r.r2 >= 0.0 && r.r2 <= 1.0);
    }

    // ---------------- dispersion table ----------------

    fn func_rec(
        firm: &str,
        sector: &str,
        year: i32,
        revenue: f64,
        log_mp_k: Option<f64>,
        dnu: Option<f64>,
        channels: Option<(f64, f64, f64)>,
    ) -> FunctionalRecord {
        FunctionalRecord {
            firm_id: firm.to_string(),
            country: "AA".to_string(),
            sector: sector.to_string(),
            year,
            revenue,
            wage_bill: None,
            elas_k: 0.3,
            elas_l: 0.3,
            elas_m: 0.4,
            mp_k: 1.0,
            mp_l: 1.0,
            mp_m: 1.0,
            log_mp_k,
            log_mp_l: log_mp_k.map(|v| v * 0.5),
            log_mp_m: log_mp_k.map(|v| v * 0.25),
            nu: log_mp_k.unwrap_or(0.0) + 0.1,
            omega: 0.0,
            eps: 0.0,
            eta: channels.map(|c| c.1),
            omega_lag: channels.map(|c| c.0),
            dnu,
            d_eps: channels.map(|c| c.2),
        }
    }

    fn synthetic_table() -> FirmFunctionals {
        let mut records = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sector in ["s1", "s2"] {
            for year in [2001, 2002] {
                for f in 0..6 {
                    let w: f64 = rng.gen_range(-1.0..1.0);
                    let e: f64 = rng.gen_range(-0.5..0.5);
                    let d: f64 = rng.gen_range(-0.2..0.2);
                    records.push(func_rec(
                        &format!("{sector}_f{f}"),
                        sector,
                        year,
                        1.0 + f as f64,
                        Some(rng.gen_range(-1.0..1.0)),
                        Some(w + e + d),
                        Some((w, e, d)),
                    ));
                }
            }
        }
        // A single-firm cell that must be dropped.
        records.push(func_rec("lone", "s3", 2001, 5.0, Some(0.1), None, None));
        FirmFunctionals {
            records,
            n_missing_log_mp: 0,
        }
    }

    #[test]
    fn cell_moments_match_direct_formulas() {
        let f = synthetic_table();
        let table = build_dispersion_table(&f).unwrap();
        assert_eq!(table.n_cells_dropped, 1);
        assert_eq!(table.cells.len(), 4);

        // Oracle on one cell: n−1 moments computed directly.
        let cell = &table.cells[0];
        let recs: Vec<_> = f
            .records
            .iter()
            .filter(|r| r.sector == cell.sector && r.year == cell.year)
            .collect();
        let vals: Vec<f64> = recs.iter().filter_map(|r| r.log_mp_k).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
        assert_relative_eq!(cell.var_mp_k.unwrap(), var, epsilon = 1e-12);

        let pairs: Vec<(f64, f64)> = recs
            .iter()
            .filter_map(|r| Some((r.omega_lag?, r.eta?)))
            .collect();
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        let cov =
            pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (pairs.len() as f64 - 1.0);
        assert_relative_eq!(cell.cov_omega_eta.unwrap(), cov, epsilon = 1e-12);

        // Weights sum to one within each (country, year).
        for year in [2001, 2002] {
            let wsum: f64 = table
                .cells
                .iter()
                .filter(|c| c.year == year)
                .map(|c| c.weight)
                .sum();
            assert_relative_eq!(wsum, 1.0, epsilon = 1e-12);
        }
        for c in &table.cells {
            assert!(c.hhi > 0.0 && c.hhi <= 1.0);
            assert!(c.var_mp_k.unwrap() >= 0.0);
        }
    }

    // ---------------- S² ----------------

    fn one_cell_table(cells: Vec<DispersionCell>) -> DispersionTable {
        DispersionTable {
            cells,
            n_cells_dropped: 0,
        }
    }

    fn bare_cell(sector: &str, year: i32, var_mp: f64, vol: f64) -> DispersionCell {
        DispersionCell {
            country: "AA".into(),
            sector: sector.into(),
            year,
            n_records: 10,
            n_firms: 10,
            var_mp_k: Some(var_mp),
            var_mp_l: Some(var_mp),
            var_mp_m: Some(var_mp),
            vol_nu: Some(vol),
            var_omega_lag: None,
            var_eta: None,
            var_deps: None,
            cov_omega_eta: None,
            cov_omega_deps: None,
            cov_eta_deps: None,
            hhi: 0.5,
            revenue: 1.0,
            weight: 1.0,
        }
    }

    #[test]
    fn perfect_projection_gives_one_and_zero_slope_gives_zero() {
        let beta = 0.8;
        let cells = vec![
            bare_cell("s1", 2001, beta * beta * 0.4, 0.4),
            bare_cell("s1", 2002, beta * beta * 0.9, 0.9),
        ];
        let mut betas = BTreeMap::new();
        betas.insert("s1".to_string(), beta);
        let s = s2_total(&one_cell_table(cells.clone()), &betas, InputKind::Capital).unwrap();
        assert_relative_eq!(s.value, 1.0, epsilon = 1e-12);
        assert!(!s.uninformative);

        betas.insert("s1".to_string(), 0.0);
        let s0 = s2_total(&one_cell_table(cells), &betas, InputKind::Capital).unwrap();
        assert_relative_eq!(s0.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn s2_matches_formula_oracle_and_is_monotone_in_perfect_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cells = Vec::new();
        let mut betas = BTreeMap::new();
        betas.insert("s1".to_string(), 0.7);
        betas.insert("s2".to_string(), 1.2);
        for sector in ["s1", "s2"] {
            for year in 2001..2006 {
                let vol: f64 = rng.gen_range(0.1..0.5);
                let noise: f64 = rng.gen_range(-0.05..0.05);
                let b = betas[sector];
                cells.push(bare_cell(sector, year, b * b * vol + noise, vol));
            }
        }
        let table = one_cell_table(cells.clone());
        let s = s2_total(&table, &betas, InputKind::Labor).unwrap();
        let num: f64 = cells
            .iter()
            .map(|c| {
                let b = betas[&c.sector];
                (c.var_mp_l.unwrap() - b * b * c.vol_nu.unwrap()).powi(2)
            })
            .sum();
        let den: f64 = cells.iter().map(|c| c.var_mp_l.unwrap().powi(2)).sum();
        assert_relative_eq!(s.value, 1.0 - num / den, epsilon = 1e-12);

        // Adding a perfectly projected cell cannot decrease the share.
        let b = betas["s1"];
        let mut more = cells.clone();
        more.push(bare_cell("s1", 2099, b * b * 0.3, 0.3));
        let s_more = s2_total(&one_cell_table(more), &betas, InputKind::Labor).unwrap();
        assert!(s_more.value >= s.value - 1e-12);
    }

    #[test]
    fn negative_share_is_flagged_uninformative() {
        let cells = vec![bare_cell("s1", 2001, 0.1, 1.0)];
        let mut betas = BTreeMap::new();
        betas.insert("s1".to_string(), 5.0); // projection wildly overshoots
        let s = s2_total(&one_cell_table(cells), &betas, InputKind::Capital).unwrap();
        assert!(s.value < 0.0);
        assert!(s.uninformative);
    }

    #[test]
    fn channel_shares_match_oracle_and_reduce_without_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cells = Vec::new();
        for year in 2001..2007 {
            let mut c = bare_cell("s1", year, rng.gen_range(0.2..0.6), 0.0);
            c.var_omega_lag = Some(rng.gen_range(0.05..0.3));
            c.var_eta = Some(rng.gen_range(0.05..0.3));
            c.var_deps = Some(rng.gen_range(0.05..0.3));
            c.cov_omega_eta = Some(rng.gen_range(-0.02..0.02));
            c.cov_omega_deps = Some(rng.gen_range(-0.02..0.02));
            c.cov_eta_deps = Some(rng.gen_range(-0.02..0.02));
            cells.push(c);
        }
        let mut betas = BTreeMap::new();
        let b = ChannelBetas {
            omega: 0.9,
            eta: 0.6,
            d_eps: 1.1,
        };
        betas.insert("s1".to_string(), b);
        let table = one_cell_table(cells.clone());
        let plain = s2_channels(&table, &betas, InputKind::Capital).unwrap();
        let with_cov = s2_channels_cov(&table, &betas, InputKind::Capital).unwrap();

        let den: f64 = cells.iter().map(|c| c.var_mp_k.unwrap().powi(2)).sum();
        let num_eta_plain: f64 = cells
            .iter()
            .map(|c| (c.var_mp_k.unwrap() - b.eta * b.eta * c.var_eta.unwrap()).powi(2))
            .sum();
        assert_relative_eq!(plain.eta.value, 1.0 - num_eta_plain / den, epsilon = 1e-12);
        let num_eta_cov: f64 = cells
            .iter()
            .map(|c| {
                let proj = b.eta * b.eta * c.var_eta.unwrap()
                    + b.omega * b.eta * c.cov_omega_eta.unwrap()
                    + b.eta * b.d_eps * c.cov_eta_deps.unwrap();
                (c.var_mp_k.unwrap() - proj).powi(2)
            })
            .sum();
        assert_relative_eq!(with_cov.eta.value, 1.0 - num_eta_cov / den, epsilon = 1e-12);

        // Zero covariances: the augmented shares collapse to the plain ones.
        let mut zeroed = cells;
        for c in &mut zeroed {
            c.cov_omega_eta = Some(0.0);
            c.cov_omega_deps = Some(0.0);
            c.cov_eta_deps = Some(0.0);
        }
        let eq = s2_channels_cov(&one_cell_table(zeroed), &betas, InputKind::Capital).unwrap();
        assert_relative_eq!(eq.omega.value, plain.omega.value, epsilon = 1e-12);
        assert_relative_eq!(eq.eta.value, plain.eta.value, epsilon = 1e-12);
        assert_relative_eq!(eq.d_eps.value, plain.d_eps.value, epsilon = 1e-12);
    }

    #[test]
    fn empty_cell_selection_is_error() {
        let cells = vec![bare_cell("s1", 2001, 0.2, 0.1)];
        let betas: BTreeMap<String, f64> = BTreeMap::new();
        assert!(matches!(
            s2_total(&one_cell_table(cells), &betas, InputKind::Capital),
            Err(Error::Validation(_))
        ));
    }

    // ---------------- GEV ----------------

    fn gev_draws(xi: f64, sigma: f64, mu: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(1e-12..1.0);
                if xi.abs() < 1e-12 {
                    mu - sigma * (-u.ln()).ln()
                } else {
                    mu + sigma * ((-u.ln()).powf(-xi) - 1.0) / xi
                }
            })
            .collect()
    }

    #[test]
    fn implied_mean_formula_matches_published_example() {
        // (ξ, σ, μ) = (0.098, 1.521, 2.987) → mean ≈ 4.03.
        let mean = gev_implied_mean(0.098, 1.521, 2.987).unwrap();
        assert!((mean - 4.03).abs() < 0.02, "implied mean {mean}");
        assert_eq!(gev_implied_mean(-0.1, 1.0, 0.0), None);
        assert_eq!(gev_implied_mean(1.1, 1.0, 0.0), None);
    }

    #[test]
    fn recovers_frechet_shape_from_large_sample() {
        let (xi, sigma, mu) = (0.2, 1.0, 0.0);
        let draws = gev_draws(xi, sigma, mu, 100_000, 31);
        let fit = fit_gev(&draws).unwrap();
        assert!(fit.converged);
        assert!((fit.xi - xi).abs() < 0.02, "xi {}", fit.xi);
        assert!((fit.sigma - sigma).abs() < 0.02, "sigma {}", fit.sigma);
        assert!((fit.mu - mu).abs() < 0.02, "mu {}", fit.mu);
        assert!(fit.se_xi.unwrap() < 0.01);
        assert!(fit.implied_mean.is_some());
        // The fitted likelihood cannot fall below the truth's by more than
        // numerical slack.
        let truth_ll = -gev_nll(&draws, &[xi, sigma.ln(), mu]);
        assert!(fit.log_likelihood >= truth_ll - 1e-3 * draws.len() as f64);
    }

    #[test]
    fn gumbel_data_lands_in_gumbel_neighborhood() {
        let draws = gev_draws(0.0, 2.0, 1.0, 60_000, 17);
        let fit = fit_gev(&draws).unwrap();
        assert!(fit.xi.abs() < 0.02, "xi {}", fit.xi);
        assert!((fit.sigma - 2.0).abs() < 0.05, "sigma {}", fit.sigma);
        assert!((fit.mu - 1.0).abs() < 0.05, "mu {}", fit.mu);
    }

    #[test]
    fn degenerate_and_short_samples_error() {
        assert!(matches!(
            fit_gev(&vec![3.0; 200]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(fit_gev(&[1.0, 2.0]), Err(Error::Validation(_))));
    }

    // ---------------- HHI ----------------

    #[test]
    fn hhi_known_values_and_oracle() {
        assert_relative_eq!(hhi(&[7.3]).unwrap(), 1.0);
        assert_relative_eq!(hhi(&[2.0; 8]).unwrap(), 1.0 / 8.0, epsilon = 1e-14);
        assert!(matches!(hhi(&[0.0, 0.0]), Err(Error::Validation(_))));
        assert!(matches!(hhi(&[]), Err(Error::Validation(_))));
        assert!(matches!(hhi(&[1.0, -2.0]), Err(Error::Validation(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rev: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..10.0)).collect();
        let total: f64 = rev.iter().sum();
        let oracle: f64 = rev.iter().map(|r| (r / total) * (r / total)).sum();
        assert_relative_eq!(hhi(&rev).unwrap(), oracle, epsilon = 1e-14);
    }

    // ---------------- dispersion series ----------------

    #[test]
    fn single_industry_series_equals_plain_std_dev() {
        let f = FirmFunctionals {
            records: vec![
                func_rec("f1", "s1", 2001, 2.0, Some(0.2), None, None),
                func_rec("f2", "s1", 2001, 3.0, Some(0.8), None, None),
                func_rec("f3", "s1", 2001, 4.0, Some(0.5), None, None),
            ],
            n_missing_log_mp: 0,
        };
        let pts = dispersion_series(&f, None).unwrap();
        assert_eq!(pts.len(), 1);
        let sd = sample_var(&[0.2, 0.8, 0.5]).unwrap().sqrt();
        assert_relative_eq!(pts[0].sd_mp_k.unwrap(), sd, epsilon = 1e-12);
    }

    #[test]
    fn two_industry_weighted_average_matches_hand_computation() {
        let f = FirmFunctionals {
            records: vec![
                func_rec("a1", "s1", 2001, 1.0, Some(0.0), None, None),
                func_rec("a2", "s1", 2001, 1.0, Some(1.0), None, None),
                func_rec("b1", "s2", 2001, 3.0, Some(0.0), None, None),
                func_rec("b2", "s2", 2001, 3.0, Some(2.0), None, None),
            ],
            n_missing_log_mp: 0,
        };
        let pts = dispersion_series(&f, None).unwrap();
        let sd1 = sample_var(&[0.0, 1.0]).unwrap().sqrt();
        let sd2 = sample_var(&[0.0, 2.0]).unwrap().sqrt();
        let want = (2.0 * sd1 + 6.0 * sd2) / 8.0;
        assert_relative_eq!(pts[0].sd_mp_k.unwrap(), want, epsilon = 1e-12);

        // Equal industry stats are weight-invariant.
        let g = FirmFunctionals {
            records: vec![
                func_rec("a1", "s1", 2001, 1.0, Some(0.0), None, None),
                func_rec("a2", "s1", 2001, 1.0, Some(1.0), None, None),
                func_rec("b1", "s2", 2001, 9.0, Some(0.0), None, None),
                func_rec("b2", "s2", 2001, 9.0, Some(1.0), None, None),
            ],
            n_missing_log_mp: 0,
        };
        let pts_g = dispersion_series(&g, None).unwrap();
        assert_relative_eq!(pts_g[0].sd_mp_k.unwrap(), sd1, epsilon = 1e-12);
    }

    #[test]
    fn base_year_normalization() {
        let mut records = Vec::new();
        for (year, spread) in [(2001, 1.0), (2002, 2.0)] {
            records.push(func_rec("f1", "s1", year, 1.0, Some(0.0), None, None));
            records.push(func_rec("f2", "s1", year, 1.0, Some(spread), None, None));
        }
        let f = FirmFunctionals {
            records,
            n_missing_log_mp: 0,
        };
        let pts = dispersion_series(&f, Some(2001)).unwrap();
        assert_relative_eq!(pts[0].sd_mp_k.unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(pts[1].sd_mp_k.unwrap(), 2.0, epsilon = 1e-12);
        assert!(matches!(
            dispersion_series(&f, Some(1999)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dispersion_table_csv_round_trips_row_count() {
        let f = synthetic_table();
        let table = build_dispersion_table(&f).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rdr.records().count(), table.cells.len());
    }
}
