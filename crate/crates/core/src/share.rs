//! Stage one: nonlinear least-squares share regression.
//!
//! The log materials revenue share satisfies
//!
//! ```text
//! s = ln( E[e^ε] · elas_M(k,l,m) ) − ε ,
//! ```
//!
//! so regressing `s` on the log of the elasticity polynomial recovers the
//! *scaled* coefficients `γ' = γ·E[e^ε]` along with the ex-post shock
//! residuals. The fit minimizes `Σ (s − ln(γ'·b))²` subject to the
//! elasticity staying strictly positive at every sample point.
//!
//! The solver is a damped Gauss–Newton iteration: candidate steps are
//! halved when they violate positivity or fail to reduce the objective,
//! and the normal equations carry a Levenberg-style ridge that grows on
//! rejection. Five perturbed starts guard against bad local minima.
//! After the fit, `E[e^ε]` is estimated by the sample mean of `e^ε̂` and
//! the coefficients are rescaled to elasticity units.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::EstimationSample;
use crate::translog::{basis, GammaVector, GAMMA_LEN};

/// Solver options for [`fit_share_regression`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShareOptions {
    /// Relative objective-change tolerance.
    pub tol_obj: f64,
    /// Gradient infinity-norm tolerance.
    pub tol_grad: f64,
    /// Maximum accepted iterations per start.
    pub max_iters: usize,
    /// Number of starts (first is the deterministic default start).
    pub n_starts: usize,
    /// Seed for start perturbations.
    pub seed: u64,
    /// When positive, fit a warm start on this many firms first.
    pub warm_start_firms: usize,
    /// Optional explicit starting point in *scaled* (γ') units; overrides
    /// the default start.
    pub initial: Option<GammaVector>,
}

impl Default for ShareOptions {
    fn default() -> Self {
        ShareOptions {
            tol_obj: 1e-10,
            tol_grad: 1e-8,
            max_iters: 500,
            n_starts: 5,
            seed: 0,
            warm_start_firms: 0,
            initial: None,
        }
    }
}

/// Result of the share regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareFit {
    /// Elasticity-scale coefficients `γ̂ = γ̂' / Ê`.
    pub gamma: GammaVector,
    /// Raw fitted coefficients `γ̂'` (scaled by `E[e^ε]`).
    pub gamma_raw: GammaVector,
    /// `Ê = (1/n) Σ e^{ε̂}`, the estimate of `E[e^ε]`.
    pub e_hat: f64,
    /// Residual shocks `ε̂ = ln(γ̂'·b) − s`, aligned with the sample.
    pub eps_hat: Vec<f64>,
    /// Final sum of squared residuals.
    pub objective: f64,
    /// Final gradient infinity norm.
    pub grad_norm: f64,
    /// Accepted iterations of the winning start.
    pub iterations: usize,
    /// Whether a convergence criterion was met (non-convergence is flagged,
    /// not fatal).
    pub converged: bool,
    /// Objective after each accepted step (non-increasing).
    pub objective_path: Vec<f64>,
    /// Number of records fitted.
    pub n_records: usize,
}

/// Materials elasticity implied by fitted coefficients at a point.
pub fn elasticity_at(gamma: &GammaVector, k: f64, l: f64, m: f64) -> f64 {
    gamma.materials_elasticity(k, l, m)
}

struct SolveOutcome {
    gamma: [f64; GAMMA_LEN],
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    path: Vec<f64>,
}

/// Dense design: rows of basis functions and the share vector.
struct Design {
    rows: Vec<[f64; GAMMA_LEN]>,
    s: Vec<f64>,
}

impl Design {
    fn from_sample(sample: &EstimationSample, rows_of: Option<&[usize]>) -> Design {
        let idx: Vec<usize> = match rows_of {
            Some(v) => v.to_vec(),
            None => (0..sample.len()).collect(),
        };
        Design {
            rows: idx
                .iter()
                .map(|&i| basis(sample.k[i], sample.l[i], sample.m[i]))
                .collect(),
            s: idx.iter().map(|&i| sample.s[i]).collect(),
        }
    }

    fn predictions(&self, gamma: &[f64; GAMMA_LEN]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for b in &self.rows {
            let mut p = 0.0;
            for j in 0..GAMMA_LEN {
                p += gamma[j] * b[j];
            }
            if !(p > 0.0) || !p.is_finite() {
                return None;
            }
            out.push(p);
        }
        Some(out)
    }

    fn objective(&self, preds: &[f64]) -> f64 {
        self.s
            .iter()
            .zip(preds)
            .map(|(s, p)| {
                let r = s - p.ln();
                r * r
            })
            .sum()
    }
}

fn solve_from(
    design: &Design,
    start: [f64; GAMMA_LEN],
    opts: &ShareOptions,
) -> Option<SolveOutcome> {
    let n = design.rows.len();
    let mut gamma = start;
    let mut preds = design.predictions(&gamma)?;
    let mut obj = design.objective(&preds);
    let mut path = vec![obj];
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut grad_norm = f64::INFINITY;

    while iterations < opts.max_iters {
        // Accumulate JᵀJ and JᵀR for residuals r = s − ln(γ·b), J = −b/p.
        let mut jtj = DMatrix::<f64>::zeros(GAMMA_LEN, GAMMA_LEN);
        let mut jtr = DVector::<f64>::zeros(GAMMA_LEN);
        for i in 0..n {
            let p = preds[i];
            let r = design.s[i] - p.ln();
            let b = &design.rows[i];
            let w = 1.0 / p;
            for a in 0..GAMMA_LEN {
                let ba = b[a] * w;
                jtr[a] -= r * ba;
                for c in a..GAMMA_LEN {
                    jtj[(a, c)] += ba * (b[c] * w);
                }
            }
        }
        for a in 0..GAMMA_LEN {
            for c in 0..a {
                jtj[(a, c)] = jtj[(c, a)];
            }
        }
        grad_norm = 2.0 * jtr.amax();
        if grad_norm < opts.tol_grad {
            converged = true;
            break;
        }

        // Damped Gauss-Newton direction with step halving.
        let mut accepted = false;
        'damping: for _ in 0..60 {
            let mut damped = jtj.clone();
            for a in 0..GAMMA_LEN {
                damped[(a, a)] += mu * jtj[(a, a)].max(1e-12);
            }
            let Some(chol) = Cholesky::new(damped) else {
                mu *= 4.0;
                if mu > 1e14 {
                    break 'damping;
                }
                continue;
            };
            let dir = chol.solve(&(-&jtr));
            let mut scale = 1.0;
            for _ in 0..10 {
                let mut cand = gamma;
                for a in 0..GAMMA_LEN {
                    cand[a] += scale * dir[a];
                }
                if let Some(p_cand) = design.predictions(&cand) {
                    let obj_cand = design.objective(&p_cand);
                    if obj_cand.is_finite() && obj_cand < obj {
                        let rel = (obj - obj_cand) / obj.max(1e-300);
                        gamma = cand;
                        preds = p_cand;
                        obj = obj_cand;
                        path.push(obj);
                        iterations += 1;
                        mu = (mu / 3.0).max(1e-12);
                        accepted = true;
                        if rel < opts.tol_obj {
                            converged = true;
                        }
                        break 'damping;
                    }
                }
                scale *= 0.5;
            }
            mu *= 4.0;
            if mu > 1e14 {
                break;
            }
        }
        if !accepted || converged {
            break;
        }
    }

    Some(SolveOutcome {
        gamma,
        objective: obj,
        grad_norm,
        iterations,
        converged,
        path,
    })
}

fn default_start(design: &Design) -> [f64; GAMMA_LEN] {
    let mean_s = design.s.iter().sum::<f64>() / design.s.len() as f64;
    let mut start = [0.0; GAMMA_LEN];
    start[0] = mean_s.exp();
    // Diagonal quadratic terms start positive; doubled until the implied
    // elasticity is positive everywhere (squares make this immediate, but
    // keep the guard for pathological data).
    let mut quad = 0.1;
    for _ in 0..60 {
        start[4] = quad;
        start[5] = quad;
        start[6] = quad;
        if design.predictions(&start).is_some() {
            break;
        }
        quad *= 2.0;
    }
    start
}

fn perturbed_start(
    base: &[f64; GAMMA_LEN],
    design: &Design,
    rng: &mut ChaCha8Rng,
) -> Option<[f64; GAMMA_LEN]> {
    let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut start = *base;
    start[0] *= (0.3 * normal.sample(rng)).exp();
    for a in [4, 5, 6] {
        start[a] *= (0.5 * normal.sample(rng)).exp();
    }
    let mut linear = [0.0; GAMMA_LEN];
    for a in [1, 2, 3, 7, 8, 9] {
        linear[a] = 0.02 * normal.sample(rng);
    }
    // Shrink the sign-indefinite perturbation until positivity holds.
    for _ in 0..20 {
        let mut cand = start;
        for a in 0..GAMMA_LEN {
            cand[a] += linear[a];
        }
        if design.predictions(&cand).is_some() {
            return Some(cand);
        }
        for v in &mut linear {
            *v *= 0.5;
        }
    }
    design.predictions(&start).map(|_| start)
}

/// Fit the share regression on an estimation sample.
///
/// Preconditions: at least 20 records with finite logs. Non-convergence
/// within the iteration budget is flagged in the result, not an error;
/// a non-positive elasticity at the final iterate is a computation error.
pub fn fit_share_regression(sample: &EstimationSample, opts: &ShareOptions) -> Result<ShareFit> {
    if sample.len() < 20 {
        return Err(Error::validation(format!(
            "share regression needs at least 20 records, got {}",
            sample.len()
        )));
    }
    for i in 0..sample.len() {
        if !(sample.s[i].is_finite()
            && sample.k[i].is_finite()
            && sample.l[i].is_finite()
            && sample.m[i].is_finite())
        {
            return Err(Error::validation(format!(
                "non-finite log value at sample record {i}"
            )));
        }
    }

    let design = Design::from_sample(sample, None);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut base_start = match opts.initial {
        Some(g) => g.to_array(),
        None => default_start(&design),
    };

    // Optional warm start from a deterministic firm subsample.
    if opts.warm_start_firms > 0 && opts.initial.is_none() {
        let n_firms = sample.n_firms.min(opts.warm_start_firms);
        let keep: Vec<usize> = (0..sample.len())
            .filter(|&i| (sample.firm[i] as usize) < n_firms)
            .collect();
        if keep.len() >= 20 {
            let sub = Design::from_sample(sample, Some(&keep));
            if let Some(out) = solve_from(&sub, default_start(&sub), opts) {
                if design.predictions(&out.gamma).is_some() {
                    base_start = out.gamma;
                }
            }
        }
    }

    let mut best: Option<SolveOutcome> = None;
    for start_idx in 0..opts.n_starts.max(1) {
        let start = if start_idx == 0 {
            Some(base_start)
        } else {
            perturbed_start(&base_start, &design, &mut rng)
        };
        let Some(start) = start else { continue };
        let Some(out) = solve_from(&design, start, opts) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some(b) => {
                (out.converged && !b.converged)
                    || (out.converged == b.converged && out.objective < b.objective)
            }
        };
        if better {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| {
        Error::computation("share regression: no start produced a positive elasticity surface")
    })?;

    let preds = design.predictions(&best.gamma).ok_or_else(|| {
        let bad = design
            .rows
            .iter()
            .filter(|b| {
                b.iter()
                    .zip(best.gamma.iter())
                    .map(|(x, g)| x * g)
                    .sum::<f64>()
                    <= 0.0
            })
            .count();
        Error::computation(format!(
            "share regression: non-positive elasticity at {bad} records at the final iterate"
        ))
    })?;

    let eps_hat: Vec<f64> = preds
        .iter()
        .zip(&design.s)
        .map(|(p, s)| p.ln() - s)
        .collect();
    let e_hat = eps_hat.iter().map(|e| e.exp()).sum::<f64>() / eps_hat.len() as f64;
    let gamma_raw = GammaVector::from_array(best.gamma);

    Ok(ShareFit {
        gamma: gamma_raw.scaled(1.0 / e_hat),
        gamma_raw,
        e_hat,
        eps_hat,
        objective: best.objective,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        converged: best.converged,
        objective_path: best.path,
        n_records: design.rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::estimation_sample;
    use crate::simulate::{simulate, DgpSpec, Technology};
    use crate::translog::AlphaVector;
    use approx::assert_relative_eq;

    fn fit_baseline(
        n_firms: usize,
        n_years: usize,
        sd_eps: f64,
        seed: u64,
    ) -> (ShareFit, EstimationSample) {
        let mut spec = DgpSpec::baseline(n_firms, n_years, seed);
        spec.sd_eps = sd_eps;
        let (panel, _) = simulate(&spec).unwrap();
        let sample = estimation_sample(&panel).unwrap();
        let fit = fit_share_regression(&sample, &ShareOptions::default()).unwrap();
        (fit, sample)
    }

    #[test]
    fn degenerate_cobb_douglas_fits_exactly() {
        let mut spec = DgpSpec::baseline(60, 6, 3);
        spec.sd_eps = 0.0;
        spec.markov.sd_eta = 0.05; // keep ω moving so inputs vary
        let (panel, _) = simulate(&spec).unwrap();
        let sample = estimation_sample(&panel).unwrap();
        let fit = fit_share_regression(&sample, &ShareOptions::default()).unwrap();
        assert!(fit.converged);
        let max_resid = fit.eps_hat.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        assert!(max_resid < 1e-6, "max residual {max_resid}");
        assert_relative_eq!(fit.e_hat, 1.0, epsilon = 1e-6);
        for i in 0..sample.len().min(50) {
            let e = elasticity_at(&fit.gamma, sample.k[i], sample.l[i], sample.m[i]);
            assert_relative_eq!(e, 0.4, epsilon = 1e-5);
        }
    }

    #[test]
    fn noisy_cobb_douglas_recovers_elasticity_and_shock_scale() {
        let (fit, sample) = fit_baseline(300, 8, 0.1, 5);
        assert!(fit.converged);
        let mean_elas = (0..sample.len())
            .map(|i| elasticity_at(&fit.gamma, sample.k[i], sample.l[i], sample.m[i]))
            .sum::<f64>()
            / sample.len() as f64;
        assert!(
            (mean_elas - 0.4).abs() < 0.02,
            "mean elasticity {mean_elas}"
        );
        assert!(
            (fit.e_hat - (0.005f64).exp()).abs() < 0.005,
            "e_hat {}",
            fit.e_hat
        );
    }

    #[test]
    fn residual_identity_holds_at_every_record() {
        let (fit, sample) = fit_baseline(80, 6, 0.1, 7);
        for i in 0..sample.len() {
            let lhs = sample.s[i] + fit.eps_hat[i];
            let rhs =
                (fit.e_hat * elasticity_at(&fit.gamma, sample.k[i], sample.l[i], sample.m[i])).ln();
            assert!((lhs - rhs).abs() < 1e-10, "record {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gamma_raw_is_gamma_scaled_by_e_hat() {
        let (fit, _) = fit_baseline(80, 6, 0.1, 9);
        let lhs = fit.gamma_raw.to_array();
        let rhs = fit.gamma.scaled(fit.e_hat).to_array();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_path_is_non_increasing() {
        let (fit, _) = fit_baseline(80, 6, 0.1, 11);
        for w in fit.objective_path.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn refit_from_optimum_is_stationary() {
        let (fit, sample) = fit_baseline(80, 6, 0.1, 13);
        let opts = ShareOptions {
            initial: Some(fit.gamma_raw),
            n_starts: 1,
            ..ShareOptions::default()
        };
        let refit = fit_share_regression(&sample, &opts).unwrap();
        // A refit from the optimum cannot improve the objective and must
        // stay where it started.
        assert!(
            refit.objective <= fit.objective * (1.0 + 1e-9) + 1e-12,
            "objective worsened: {} vs {}",
            refit.objective,
            fit.objective
        );
        assert!(
            refit.iterations <= 3,
            "took {} iterations",
            refit.iterations
        );
        for (a, b) in refit
            .gamma_raw
            .to_array()
            .iter()
            .zip(fit.gamma_raw.to_array())
        {
            assert!((a - b).abs() < 1e-5, "drifted from optimum: {a} vs {b}");
        }
    }

    #[test]
    fn translog_surface_recovered_with_low_error() {
        let gamma = crate::translog::GammaVector {
            c0: 0.55,
            k: 0.015,
            l: -0.01,
            m: -0.03,
            kk: 0.002,
            ll: 0.003,
            mm: 0.002,
            kl: -0.002,
            km: 0.001,
            lm: -0.001,
        };
        let c_alpha = AlphaVector {
            k: -0.25,
            l: -0.3,
            kk: 0.005,
            ll: -0.004,
            kl: 0.002,
        };
        let mut spec = DgpSpec::baseline(400, 8, 15);
        spec.technology = Technology::Translog { gamma, c_alpha };
        let (panel, truth) = simulate(&spec).unwrap();
        let sample = estimation_sample(&panel).unwrap();
        let fit = fit_share_regression(&sample, &ShareOptions::default()).unwrap();
        let mut sse = 0.0;
        for (i, t) in truth.records.iter().enumerate() {
            let e = elasticity_at(&fit.gamma, sample.k[i], sample.l[i], sample.m[i]);
            sse += (e - t.elas_m).powi(2);
        }
        let rmse = (sse / truth.records.len() as f64).sqrt();
        assert!(rmse < 0.02, "elasticity RMSE {rmse}");
    }

    #[test]
    fn tiny_sample_is_rejected() {
        let mut spec = DgpSpec::baseline(2, 3, 1);
        spec.n_sectors = 1;
        let (panel, _) = simulate(&spec).unwrap();
        let sample = estimation_sample(&panel).unwrap();
        assert!(matches!(
            fit_share_regression(&sample, &ShareOptions::default()),
            Err(Error::Validation(_))
        ));
    }
}
