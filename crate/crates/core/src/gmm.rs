//! Stage two: moment-based estimation of the input cost adjustment and
//! the productivity Markov process.
//!
//! After stage one delivers `γ̂`, `Ê`, and the residuals `ε̂`, form
//!
//! ```text
//! 𝓨 = y − ε̂ − ∫ elas_M dm ,
//! ```
//!
//! which equals `ω − C(k,l)` with `C(k,l) = α_k k + α_l l + α_kk k² +
//! α_ll l² + α_kl kl` (no constant; the level is absorbed by the Markov
//! intercept). Productivity follows a cubic Markov process
//! `ω = δ₀ + δ₁ ω₋₁ + δ₂ ω₋₁² + δ₃ ω₋₁³ + η`.
//!
//! The estimator nests two steps:
//! * **inner:** given `α`, recover `ω = 𝓨 + C(k,l)` and fit the Markov
//!   polynomial by least squares, giving `δ` and the innovations `η̂`;
//! * **outer:** the five orthogonality conditions `E[η · z] = 0` for
//!   `z ∈ {k, l, k², l², kl}`, with the inner step re-run at every
//!   evaluation, form a smooth 5-equation root problem in `α`; a damped
//!   Newton iteration with a finite-difference Jacobian drives them to
//!   machine precision.
//!
//! When the recovered `ω` series is numerically degenerate (for example a
//! noiseless process that settles at its fixed point), the cubic design
//! loses rank; the inner step then reduces the polynomial degree until the
//! design has full rank and records the degree actually used.
//!
//! Nine orthogonality conditions are reported as a diagnostic: the five
//! used in the solve plus `E[η · ω̂₋₁^p] = 0` for `p = 0..3`, which the
//! Markov least-squares step enforces in sample.

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::EstimationSample;
use crate::share::{fit_share_regression, ShareFit, ShareOptions};
use crate::translog::{c_basis, log_technology, AlphaVector, GammaVector, ALPHA_LEN};

/// Coefficients of the cubic Markov conditional mean
/// `E[ω | ω₋₁] = d0 + d1·ω₋₁ + d2·ω₋₁² + d3·ω₋₁³`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaVector {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl DeltaVector {
    pub fn from_array(a: [f64; 4]) -> Self {
        DeltaVector {
            d0: a[0],
            d1: a[1],
            d2: a[2],
            d3: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.d0, self.d1, self.d2, self.d3]
    }

    /// Conditional mean `m(ω₋₁)`.
    pub fn conditional_mean(&self, omega_lag: f64) -> f64 {
        ((self.d3 * omega_lag + self.d2) * omega_lag + self.d1) * omega_lag + self.d0
    }

    /// Derivative `m′(ω₋₁) = d1 + 2 d2 ω₋₁ + 3 d3 ω₋₁²`.
    pub fn derivative(&self, omega_lag: f64) -> f64 {
        (3.0 * self.d3 * omega_lag + 2.0 * self.d2) * omega_lag + self.d1
    }
}

/// Options for [`fit_gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    /// Fixed-point tolerance on the max absolute change in `α`.
    pub tol_alpha: f64,
    /// Maximum outer iterations.
    pub max_outer: usize,
    /// Markov polynomial degree before any rank-driven reduction.
    pub max_delta_degree: usize,
    /// Relative singular-value cutoff for the rank check of the Markov
    /// design matrix.
    pub rank_tol: f64,
    /// Optional starting value for `α` (zeros otherwise).
    pub initial_alpha: Option<AlphaVector>,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            tol_alpha: 1e-8,
            max_outer: 200,
            max_delta_degree: 3,
            rank_tol: 1e-8,
            initial_alpha: None,
        }
    }
}

/// Estimated production model: technology, input cost adjustment, and the
/// productivity process, with fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionModel {
    /// Elasticity-scale technology coefficients from stage one.
    pub gamma: GammaVector,
    /// Raw stage-one coefficients (scaled by `E[e^ε]`).
    pub gamma_raw: GammaVector,
    /// Estimate of `E[e^ε]`.
    pub e_hat: f64,
    /// Cost-adjustment coefficients.
    pub alpha: AlphaVector,
    /// Markov conditional-mean coefficients (entries beyond the effective
    /// degree are zero).
    pub delta: DeltaVector,
    /// Degree of the Markov polynomial actually fitted.
    pub effective_delta_degree: usize,
    /// Root mean square of the stage-one residuals.
    pub sd_eps: f64,
    /// Root mean square of the Markov innovations.
    pub sd_eta: f64,
    pub outer_iterations: usize,
    /// Whether the `α` fixed point met its tolerance.
    pub converged: bool,
    /// Max absolute value of the five solved orthogonality conditions at
    /// the reported estimate.
    pub moment_norm: f64,
    /// Max absolute value over all nine reported orthogonality conditions.
    pub check_moment_norm: f64,
    pub n_records: usize,
    pub n_lag_pairs: usize,
    pub n_firms: usize,
}

/// Full stage-two output: the model plus per-record series aligned with
/// the estimation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub model: ProductionModel,
    /// Stage-one residuals `ε̂`.
    pub eps: Vec<f64>,
    /// `𝓨 = y − ε̂ − ∫ elas_M dm`.
    pub script_y: Vec<f64>,
    /// Recovered log productivity `ω̂ = 𝓨 + C(k,l)`.
    pub omega: Vec<f64>,
    /// Markov innovations `η̂` for records with a lagged observation.
    pub eta: Vec<Option<f64>>,
}

impl GmmFit {
    /// Rebuild log output as `(∫ − C) + ω̂ + ε̂`; equals the observed `y`
    /// identically by construction.
    pub fn reconstructed_log_output(&self, sample: &EstimationSample) -> Vec<f64> {
        (0..sample.len())
            .map(|i| {
                log_technology(
                    &self.model.gamma,
                    &self.model.alpha,
                    sample.k[i],
                    sample.l[i],
                    sample.m[i],
                ) + self.omega[i]
                    + self.eps[i]
            })
            .collect()
    }
}

/// Compute `𝓨 = y − ε̂ − ∫ elas_M dm` per record.
pub fn build_script_y(sample: &EstimationSample, share: &ShareFit) -> Vec<f64> {
    (0..sample.len())
        .map(|i| {
            sample.y[i]
                - share.eps_hat[i]
                - share
                    .gamma
                    .integrated_elasticity(sample.k[i], sample.l[i], sample.m[i])
        })
        .collect()
}

/// Least-squares fit of the Markov polynomial with rank-driven degree
/// reduction. Returns coefficients (padded with zeros), the degree used,
/// and the residuals.
fn markov_ols(
    omega: &[f64],
    omega_lag: &[f64],
    max_degree: usize,
    rank_tol: f64,
) -> (DeltaVector, usize, Vec<f64>) {
    let n = omega.len();
    for degree in (0..=max_degree.min(3)).rev() {
        let cols = degree + 1;
        let mut design = DMatrix::<f64>::zeros(n, cols);
        for r in 0..n {
            let mut p = 1.0;
            for c in 0..cols {
                design[(r, c)] = p;
                p *= omega_lag[r];
            }
        }
        let svd = design.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > rank_tol * max_sv)
            .count();
        if rank < cols {
            continue;
        }
        let rhs = DVector::from_column_slice(omega);
        let coefs = svd.solve(&rhs, rank_tol * max_sv).expect("svd solve");
        let mut arr = [0.0; 4];
        for c in 0..cols {
            arr[c] = coefs[c];
        }
        let delta = DeltaVector::from_array(arr);
        let eta: Vec<f64> = (0..n)
            .map(|r| omega[r] - delta.conditional_mean(omega_lag[r]))
            .collect();
        return (delta, degree, eta);
    }
    // Degree zero always has rank one for n ≥ 1; unreachable fallback.
    let mean = omega.iter().sum::<f64>() / n.max(1) as f64;
    (
        DeltaVector::from_array([mean, 0.0, 0.0, 0.0]),
        0,
        omega.iter().map(|w| w - mean).collect(),
    )
}

struct PairData {
    /// Sample index of the current-period record.
    cur: Vec<usize>,
    /// Sample index of the lagged record.
    lag: Vec<usize>,
    /// Instrument vectors `z = (k, l, k², l², kl)` at the current record.
    z: Vec<[f64; ALPHA_LEN]>,
}

fn collect_pairs(sample: &EstimationSample) -> PairData {
    let mut cur = Vec::new();
    let mut lag = Vec::new();
    let mut z = Vec::new();
    for i in 0..sample.len() {
        if let Some(j) = sample.lag[i] {
            cur.push(i);
            lag.push(j);
            z.push(c_basis(sample.k[i], sample.l[i]));
        }
    }
    PairData { cur, lag, z }
}

struct InnerState {
    omega: Vec<f64>,
    delta: DeltaVector,
    degree: usize,
    eta: Vec<f64>,
}

fn refresh_inner(
    sample: &EstimationSample,
    script_y: &[f64],
    cb: &[[f64; ALPHA_LEN]],
    pairs: &PairData,
    alpha: &SVector<f64, ALPHA_LEN>,
    opts: &GmmOptions,
) -> InnerState {
    let omega: Vec<f64> = (0..sample.len())
        .map(|i| {
            let mut c = 0.0;
            for a in 0..ALPHA_LEN {
                c += alpha[a] * cb[i][a];
            }
            script_y[i] + c
        })
        .collect();
    let w_cur: Vec<f64> = pairs.cur.iter().map(|&i| omega[i]).collect();
    let w_lag: Vec<f64> = pairs.lag.iter().map(|&j| omega[j]).collect();
    let (delta, degree, eta) = markov_ols(&w_cur, &w_lag, opts.max_delta_degree, opts.rank_tol);
    InnerState {
        omega,
        delta,
        degree,
        eta,
    }
}

fn solved_moments(state: &InnerState, pairs: &PairData) -> SVector<f64, ALPHA_LEN> {
    let n = pairs.cur.len() as f64;
    let mut g = SVector::<f64, ALPHA_LEN>::zeros();
    for (r, z) in pairs.z.iter().enumerate() {
        for a in 0..ALPHA_LEN {
            g[a] += z[a] * state.eta[r];
        }
    }
    g / n
}

/// Fit the stage-two model given a stage-one fit.
pub fn fit_gmm(sample: &EstimationSample, share: &ShareFit, opts: &GmmOptions) -> Result<GmmFit> {
    let pairs = collect_pairs(sample);
    let n_pairs = pairs.cur.len();
    if n_pairs < 20 {
        return Err(Error::validation(format!(
            "stage two needs at least 20 lagged pairs, got {n_pairs}"
        )));
    }
    if opts.max_delta_degree > 3 {
        return Err(Error::validation(
            "Markov polynomial degree is at most cubic",
        ));
    }

    let script_y = build_script_y(sample, share);
    let cb: Vec<[f64; ALPHA_LEN]> = (0..sample.len())
        .map(|i| c_basis(sample.k[i], sample.l[i]))
        .collect();

    // Self-consistent moment function: re-run the inner step at `α` and
    // average `z·η̂` over pairs.
    let eval_at = |alpha: &SVector<f64, ALPHA_LEN>| -> (InnerState, SVector<f64, ALPHA_LEN>) {
        let state = refresh_inner(sample, &script_y, &cb, &pairs, alpha, opts);
        let g = solved_moments(&state, &pairs);
        (state, g)
    };

    let mut alpha = match opts.initial_alpha {
        Some(a) => SVector::<f64, ALPHA_LEN>::from_column_slice(&a.to_array()),
        None => SVector::zeros(),
    };
    let (mut state, mut g) = eval_at(&alpha);
    let mut fsum = g.norm_squared();
    let mut converged = g.amax() <= 1e-12;
    let mut outer = 0usize;
    let mut mu = 1e-8;

    while !converged && outer < opts.max_outer {
        outer += 1;
        // Forward-difference Jacobian of the moment function.
        let mut jac = SMatrix::<f64, ALPHA_LEN, ALPHA_LEN>::zeros();
        for a in 0..ALPHA_LEN {
            let h = 1e-6 * alpha[a].abs().max(1.0);
            let mut shifted = alpha;
            shifted[a] += h;
            let (_, gp) = eval_at(&shifted);
            jac.set_column(a, &((gp - g) / h));
        }
        let jtj = jac.transpose() * jac;
        let jtg = jac.transpose() * g;

        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = jtj;
            for a in 0..ALPHA_LEN {
                damped[(a, a)] += mu * jtj[(a, a)].max(1e-30);
            }
            let Some(chol) = Cholesky::new(damped) else {
                mu *= 4.0;
                if mu > 1e14 {
                    break;
                }
                continue;
            };
            let dir = chol.solve(&(-jtg));
            let cand = alpha + dir;
            let (cand_state, cand_g) = eval_at(&cand);
            let cand_f = cand_g.norm_squared();
            if cand_f.is_finite() && cand_f < fsum {
                let step = dir.amax();
                alpha = cand;
                state = cand_state;
                g = cand_g;
                fsum = cand_f;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if step < opts.tol_alpha || g.amax() <= 1e-12 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e14 {
                break;
            }
        }
        if !accepted {
            // Damping exhausted: accept the point if the conditions are
            // already essentially zero, otherwise flag non-convergence.
            converged = g.amax() <= 1e-10;
            break;
        }
    }
    let moment_norm = g.amax();

    // Nine reported conditions: the five solved ones plus powers of the
    // lagged recovered productivity.
    let mut check_norm = moment_norm;
    for p in 0..=3usize {
        let mut g = 0.0;
        for r in 0..n_pairs {
            g += state.omega[pairs.lag[r]].powi(p as i32) * state.eta[r];
        }
        check_norm = check_norm.max((g / n_pairs as f64).abs());
    }

    let sd_eps =
        (share.eps_hat.iter().map(|e| e * e).sum::<f64>() / share.eps_hat.len() as f64).sqrt();
    let sd_eta = (state.eta.iter().map(|e| e * e).sum::<f64>() / n_pairs as f64).sqrt();

    let mut eta_by_record: Vec<Option<f64>> = vec![None; sample.len()];
    for (r, &i) in pairs.cur.iter().enumerate() {
        eta_by_record[i] = Some(state.eta[r]);
    }

    let model = ProductionModel {
        gamma: share.gamma,
        gamma_raw: share.gamma_raw,
        e_hat: share.e_hat,
        alpha: AlphaVector::from_array([alpha[0], alpha[1], alpha[2], alpha[3], alpha[4]]),
        delta: state.delta,
        effective_delta_degree: state.degree,
        sd_eps,
        sd_eta,
        outer_iterations: outer,
        converged,
        moment_norm,
        check_moment_norm: check_norm,
        n_records: sample.len(),
        n_lag_pairs: n_pairs,
        n_firms: sample.n_firms,
    };

    Ok(GmmFit {
        model,
        eps: share.eps_hat.clone(),
        script_y,
        omega: state.omega,
        eta: eta_by_record,
    })
}

/// Convenience wrapper running both stages.
pub fn fit_production_model(
    sample: &EstimationSample,
    share_opts: &ShareOptions,
    gmm_opts: &GmmOptions,
) -> Result<(ShareFit, GmmFit)> {
    let share = fit_share_regression(sample, share_opts)?;
    let fit = fit_gmm(sample, &share, gmm_opts)?;
    Ok((share, fit))
}
