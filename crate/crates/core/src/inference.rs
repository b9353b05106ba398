//! Firm-level bootstrap machinery and the flexible-labor test.
//!
//! All standard errors in this crate come from a cluster (firm-level)
//! nonparametric bootstrap: firms are drawn with replacement and each
//! drawn firm contributes its entire time series under a fresh synthetic
//! identifier. Per-replicate randomness derives from the master seed via
//! counter-based streams, so serial and parallel execution produce
//! identical results.
//!
//! The flexible-labor test statistic is
//! `T = (1/N) Σ (P·Y·elas_L − wage_bill)`: under flexible labor the
//! static first-order condition makes expected labor revenue-product
//! equal the wage bill, so `T ≈ 0`. Its distribution uses a two-stage
//! scheme: an outer estimation bootstrap, and for each outer replicate an
//! inner redraw of firm identifiers averaging the firm-year terms; all
//! inner draws are pooled (uncentered) into one distribution whose
//! quantiles give the confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{compute_functionals, FirmFunctionals};
use crate::gmm::{fit_gmm, GmmOptions};
use crate::panel::{estimation_sample, FirmPanel};
use crate::share::{fit_share_regression, ShareOptions};

/// Bootstrap configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapPlan {
    /// Outer (estimation) replicates.
    pub n_replicates: usize,
    pub seed: u64,
    /// Inner redraws per outer replicate in the two-stage test.
    pub stage2_replicates: usize,
    /// Inner redraws when restricted to a single-sector aggregate.
    pub stage2_sector_replicates: usize,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan {
            n_replicates: 150,
            seed: 0,
            stage2_replicates: 15_000,
            stage2_sector_replicates: 5_000,
        }
    }
}

impl BootstrapPlan {
    /// A heavier profile for large panels.
    pub fn large_panel(seed: u64) -> Self {
        BootstrapPlan {
            n_replicates: 600,
            seed,
            ..BootstrapPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replicates < 2 {
            return Err(Error::validation(format!(
                "bootstrap needs at least 2 replicates, got {}",
                self.n_replicates
            )));
        }
        if self.stage2_replicates == 0 || self.stage2_sector_replicates == 0 {
            return Err(Error::validation(
                "stage-two replicate counts must be positive",
            ));
        }
        Ok(())
    }
}

/// Draw firms with replacement from a panel; each drawn firm keeps its
/// full time series under a fresh synthetic identifier, so the resampled
/// panel has valid unique `(firm, year)` keys even when a firm is drawn
/// more than once.
pub fn resample_firms(panel: &FirmPanel, rng: &mut impl Rng) -> Result<FirmPanel> {
    let ranges = panel.firm_ranges();
    if ranges.is_empty() {
        return Err(Error::validation("cannot resample an empty panel"));
    }
    let mut records = Vec::with_capacity(panel.len());
    for draw in 0..ranges.len() {
        let pick = rng.gen_range(0..ranges.len());
        for r in &panel.records()[ranges[pick].clone()] {
            let mut c = r.clone();
            c.firm_id = format!("b{draw:06}_{}", r.firm_id);
            records.push(c);
        }
    }
    FirmPanel::new(records)
}

/// Empirical bootstrap distribution of a statistic vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    /// One row per successful replicate, aligned with `names`.
    pub replicates: Vec<Vec<f64>>,
    /// Empirical standard deviation per statistic.
    pub se: Vec<f64>,
    pub n_planned: usize,
    pub n_failed: usize,
}

impl BootstrapResult {
    /// Dump the replicate draws as CSV (one row per replicate).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for row in &self.replicates {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replicate seed stream for the outer resampling draw.
fn stage1_stream(replicate: usize) -> u64 {
    replicate as u64 + 1
}

/// Replicate seed stream for the inner redraws (disjoint from stage 1).
fn stage2_stream(replicate: usize) -> u64 {
    (1u64 << 63) | replicate as u64
}

/// Run `pipeline` over firm-level bootstrap replicates.
///
/// The pipeline receives the resampled panel and a per-replicate seed it
/// may use for any internal randomness; it must be deterministic given
/// those. Failed replicates are dropped and counted; more than 20%
/// failures is an error. Replicates run in parallel and the result is
/// independent of thread count.
pub fn bootstrap_pipeline<F>(
    panel: &FirmPanel,
    plan: &BootstrapPlan,
    names: &[&str],
    pipeline: F,
) -> Result<BootstrapResult>
where
    F: Fn(&FirmPanel, u64) -> Result<Vec<f64>> + Sync,
{
    plan.validate()?;
    if names.is_empty() {
        return Err(Error::validation("no statistics requested"));
    }
    let outcomes: Vec<Option<Vec<f64>>> = (0..plan.n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(stage1_stream(r));
            let resampled = resample_firms(panel, &mut rng).ok()?;
            pipeline(&resampled, plan.seed ^ stage1_stream(r)).ok()
        })
        .collect();

    let mut replicates = Vec::with_capacity(plan.n_replicates);
    let mut n_failed = 0usize;
    for o in outcomes {
        match o {
            Some(stats) => {
                if stats.len() != names.len() {
                    return Err(Error::computation(format!(
                        "pipeline returned {} statistics, expected {}",
                        stats.len(),
                        names.len()
                    )));
                }
                replicates.push(stats);
            }
            None => n_failed += 1,
        }
    }
    if n_failed * 5 > plan.n_replicates {
        return Err(Error::computation(format!(
            "{n_failed} of {} bootstrap replicates failed (over 20%)",
            plan.n_replicates
        )));
    }
    if replicates.len() < 2 {
        return Err(Error::computation(
            "fewer than 2 successful replicates: no dispersion to report",
        ));
    }
    let k = names.len();
    let n = replicates.len() as f64;
    let se: Vec<f64> = (0..k)
        .map(|j| {
            let mean: f64 = replicates.iter().map(|r| r[j]).sum::<f64>() / n;
            (replicates
                .iter()
                .map(|r| (r[j] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        })
        .collect();
    Ok(BootstrapResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        replicates,
        se,
        n_planned: plan.n_replicates,
        n_failed,
    })
}

/// `T = (1/N) Σ (revenue·elas_L − wage_bill)` over firm-years with a wage
/// bill, together with the record count `N`.
pub fn flexible_labor_t(functionals: &FirmFunctionals) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in &functionals.records {
        let Some(w) = r.wage_bill else { continue };
        sum += r.revenue * r.elas_l - w;
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation(
            "flexible-labor test needs records with a wage bill",
        ));
    }
    Ok((sum / n as f64, n))
}

/// Type-7 (linear interpolation) quantile of pre-sorted values.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Outcome of the flexible-labor test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Point statistic on the original panel.
    pub t_stat: f64,
    pub ci90: (f64, f64),
    pub ci95: (f64, f64),
    pub ci99: (f64, f64),
    /// Firm-year records entering the point statistic.
    pub n: usize,
    /// Confidence levels (percent) whose interval excludes zero.
    pub reject_at: Vec<u8>,
    pub n_stage1_planned: usize,
    pub n_stage1_failed: usize,
    pub n_stage2_per_replicate: usize,
    /// Pooled draw count = successful stage-1 × stage-2.
    pub n_pooled: usize,
    /// Quantile convention used for the CI endpoints.
    pub quantile_method: String,
}

fn fit_firm_terms(
    panel: &FirmPanel,
    share_opts: &ShareOptions,
    gmm_opts: &GmmOptions,
    seed: u64,
) -> Result<(f64, usize, Vec<(f64, f64)>)> {
    let sample = estimation_sample(panel)?;
    let mut so = share_opts.clone();
    so.seed = seed;
    let share = fit_share_regression(&sample, &so)?;
    let fit = fit_gmm(&sample, &share, gmm_opts)?;
    let functionals = compute_functionals(panel, &sample, &fit)?;
    let (t, n) = flexible_labor_t(&functionals)?;
    // Per-firm (sum, count) of the firm-year terms, for inner redraws.
    let mut terms: Vec<(f64, f64)> = Vec::new();
    let mut current: Option<(String, f64, f64)> = None;
    for r in &functionals.records {
        let Some(w) = r.wage_bill else { continue };
        let v = r.revenue * r.elas_l - w;
        match &mut current {
            Some((id, s, c)) if *id == r.firm_id => {
                *s += v;
                *c += 1.0;
            }
            _ => {
                if let Some((_, s, c)) = current.take() {
                    terms.push((s, c));
                }
                current = Some((r.firm_id.clone(), v, 1.0));
            }
        }
    }
    if let Some((_, s, c)) = current {
        terms.push((s, c));
    }
    Ok((t, n, terms))
}

/// Two-stage bootstrap of the flexible-labor test.
///
/// Stage one re-estimates the full two-stage model on firm-resampled
/// panels. Stage two, within each stage-one replicate, redraws firm
/// identifiers `stage2_replicates` times (the sector profile when
/// `sector_subset` is given) and averages the firm-year terms per redraw.
/// All inner draws are pooled uncentered; CI endpoints are type-7
/// quantiles of that pooled distribution.
pub fn two_stage_test_bootstrap(
    panel: &FirmPanel,
    plan: &BootstrapPlan,
    share_opts: &ShareOptions,
    gmm_opts: &GmmOptions,
    sector_subset: Option<&str>,
) -> Result<TestResult> {
    plan.validate()?;
    let restricted_storage;
    let (panel, stage2) = match sector_subset {
        None => (panel, plan.stage2_replicates),
        Some(sector) => {
            let records: Vec<_> = panel
                .records()
                .iter()
                .filter(|r| r.sector == sector)
                .cloned()
                .collect();
            if records.is_empty() {
                return Err(Error::validation(format!(
                    "sector subset '{sector}' matches no records"
                )));
            }
            restricted_storage = FirmPanel::new(records)?;
            (&restricted_storage, plan.stage2_sector_replicates)
        }
    };

    let (t_stat, n, _) = fit_firm_terms(panel, share_opts, gmm_opts, plan.seed)?;

    let outcomes: Vec<Option<Vec<f64>>> = (0..plan.n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(stage1_stream(r));
            let resampled = resample_firms(panel, &mut rng).ok()?;
            let (_, _, terms) = fit_firm_terms(
                &resampled,
                share_opts,
                gmm_opts,
                plan.seed ^ stage1_stream(r),
            )
            .ok()?;
            if terms.is_empty() {
                return None;
            }
            let mut inner = ChaCha8Rng::seed_from_u64(plan.seed);
            inner.set_stream(stage2_stream(r));
            let mut draws = Vec::with_capacity(stage2);
            for _ in 0..stage2 {
                let mut s = 0.0;
                let mut c = 0.0;
                for _ in 0..terms.len() {
                    let (ts, tc) = terms[inner.gen_range(0..terms.len())];
                    s += ts;
                    c += tc;
                }
                draws.push(s / c);
            }
            Some(draws)
        })
        .collect();

    let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
    if n_failed * 5 > plan.n_replicates {
        return Err(Error::computation(format!(
            "{n_failed} of {} stage-one replicates failed (over 20%)",
            plan.n_replicates
        )));
    }
    let mut pooled: Vec<f64> = outcomes.into_iter().flatten().flatten().collect();
    if pooled.is_empty() {
        return Err(Error::computation("no pooled bootstrap draws"));
    }
    let n_pooled = pooled.len();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci = |level: f64| {
        let tail = (1.0 - level) / 2.0;
        (
            quantile_type7(&pooled, tail),
            quantile_type7(&pooled, 1.0 - tail),
        )
    };
    let ci90 = ci(0.90);
    let ci95 = ci(0.95);
    let ci99 = ci(0.99);
    let mut reject_at = Vec::new();
    for (level, (lo, hi)) in [(90u8, ci90), (95, ci95), (99, ci99)] {
        if 0.0 < lo || 0.0 > hi {
            reject_at.push(level);
        }
    }
    Ok(TestResult {
        t_stat,
        ci90,
        ci95,
        ci99,
        n,
        reject_at,
        n_stage1_planned: plan.n_replicates,
        n_stage1_failed: n_failed,
        n_stage2_per_replicate: stage2,
        n_pooled,
        quantile_method: "type-7".to_string(),
    })
}
