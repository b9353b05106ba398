//! Structural panel simulator.
//!
//! Generates firm-year panels from a gross-output technology with a
//! Hicks-neutral productivity split `ν = ω + ε`:
//!
//! * `ω` follows a (up to cubic) Markov process
//!   `ω_t = δ0 + δ1·ω_{t−1} + δ2·ω² + δ3·ω³ + η_t`, innovations known to
//!   the firm before period-`t` materials are chosen;
//! * `ε` is an ex-post shock (measurement error plus unanticipated
//!   productivity), unknown when any input is chosen;
//! * materials are flexible: they solve the static expected-profit
//!   first-order condition each period after `η` is observed;
//! * capital and (by default) labor are predetermined, set by log-linear
//!   policies in `ω_{t−1}` plus idiosyncratic noise;
//! * the flexible-labor variant instead solves the exact expected-value
//!   FOC for labor at the end of `t−1`, accounting for the optimal
//!   materials response to `η` (closed form, Cobb–Douglas only). A labor
//!   wedge `τ_L` scales the effective wage in that FOC;
//! * wages may carry firm-year heterogeneity (`sd_wage_noise`), drawn
//!   before inputs are chosen. Under the flexible-labor rule this is the
//!   only source of labor variation that is independent of `(k, ω_{t−1})`;
//!   without it the labor FOC makes `l` an exact linear function of those
//!   state variables and the technology is not separately identified from
//!   the productivity process.
//!
//! All randomness derives from a single master seed; each firm owns a
//! dedicated counter-derived stream, so output is independent of thread
//! count and iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FirmPanel, FirmYear};
use crate::translog::{
    capital_elasticity, labor_elasticity, log_technology, AlphaVector, GammaVector,
};

/// Production technology of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Technology {
    /// `f = a_k·k + a_l·l + a_m·m` (no constant; scale is normalized into
    /// the productivity process).
    CobbDouglas {
        alpha_k: f64,
        alpha_l: f64,
        alpha_m: f64,
    },
    /// Materials elasticity given by `gamma`, integration remainder by
    /// `c_alpha`: `f = ∫ elas_M dm − C(k,l)`.
    Translog {
        gamma: GammaVector,
        c_alpha: AlphaVector,
    },
}

impl Technology {
    /// Express the technology as `(gamma, alpha)` polynomial coefficients.
    pub fn params(&self) -> (GammaVector, AlphaVector) {
        match *self {
            Technology::CobbDouglas {
                alpha_k,
                alpha_l,
                alpha_m,
            } => (
                GammaVector {
                    c0: alpha_m,
                    ..GammaVector::zeros()
                },
                AlphaVector {
                    k: -alpha_k,
                    l: -alpha_l,
                    ..AlphaVector::zeros()
                },
            ),
            Technology::Translog { gamma, c_alpha } => (gamma, c_alpha),
        }
    }

    /// Log output net of productivity, `f(k,l,m)`.
    pub fn log_output(&self, k: f64, l: f64, m: f64) -> f64 {
        let (gamma, alpha) = self.params();
        log_technology(&gamma, &alpha, k, l, m)
    }

    /// Materials elasticity at a point.
    pub fn materials_elasticity(&self, k: f64, l: f64, m: f64) -> f64 {
        let (gamma, _) = self.params();
        gamma.materials_elasticity(k, l, m)
    }
}

/// Markov process for persistent productivity `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    /// `(δ0, δ1, δ2, δ3)` of the conditional mean polynomial.
    pub delta: [f64; 4],
    /// Standard deviation of the innovation `η`.
    pub sd_eta: f64,
}

impl MarkovSpec {
    /// Conditional mean `m(ω) = δ0 + δ1·ω + δ2·ω² + δ3·ω³`.
    pub fn conditional_mean(&self, w: f64) -> f64 {
        self.delta[0] + w * (self.delta[1] + w * (self.delta[2] + w * self.delta[3]))
    }

    /// Whether the process is a pure AR(1).
    pub fn is_ar1(&self) -> bool {
        self.delta[2] == 0.0 && self.delta[3] == 0.0
    }
}

/// Log-linear rule `base + on_omega_lag·ω_{t−1} + on_time·t` for a log
/// relative price; `t` counts sampled years from zero (burn-in years are
/// negative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearRule {
    pub base: f64,
    pub on_omega_lag: f64,
    pub on_time: f64,
}

impl Default for LinearRule {
    fn default() -> Self {
        LinearRule {
            base: 0.0,
            on_omega_lag: 0.0,
            on_time: 0.0,
        }
    }
}

impl LinearRule {
    /// Evaluate the rule.
    pub fn eval(&self, omega_lag: f64, t: f64) -> f64 {
        self.base + self.on_omega_lag * omega_lag + self.on_time * t
    }
}

/// Predetermined log-input policy: `x = base + on_omega_lag·ω_{t−1} + noise`,
/// noise drawn i.i.d. normal with standard deviation `sd_noise` (known to
/// the firm when the input is set, independent of future shocks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPolicy {
    pub base: f64,
    pub on_omega_lag: f64,
    pub sd_noise: f64,
}

impl Default for InputPolicy {
    fn default() -> Self {
        InputPolicy {
            base: 1.0,
            on_omega_lag: 0.5,
            sd_noise: 0.3,
        }
    }
}

/// How labor is allocated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LaborRule {
    /// Predetermined log-linear policy (the default timing assumption).
    Policy(InputPolicy),
    /// Labor solves the exact expected-value FOC at the end of `t−1`
    /// (Cobb–Douglas technology only).
    FlexibleFoc,
}

/// Full specification of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_firms: usize,
    /// Sampled years per firm (after burn-in).
    pub n_years: usize,
    /// Periods discarded before sampling starts.
    pub burn_in: usize,
    /// Firms are assigned round-robin to this many sector codes.
    pub n_sectors: usize,
    /// Calendar year of the first sampled period.
    pub start_year: i32,
    pub seed: u64,
    pub technology: Technology,
    pub markov: MarkovSpec,
    /// Standard deviation of the ex-post shock `ε`.
    pub sd_eps: f64,
    /// Log relative materials price `ln(ρ/P)`.
    pub log_materials_price: LinearRule,
    /// Log relative wage `ln(w/P)`.
    pub log_wage: LinearRule,
    /// Standard deviation of firm-year log-wage heterogeneity, added on
    /// top of `log_wage` and observed by the firm before inputs are set
    /// (the wage bill and any labor FOC use the same realized wage).
    pub sd_wage_noise: f64,
    pub capital_policy: InputPolicy,
    pub labor: LaborRule,
    /// Wedge on the labor FOC price (flexible-labor variant only).
    pub labor_wedge: f64,
    /// Accepted for interface symmetry; inert, since no variant gives
    /// capital a first-order condition.
    pub capital_wedge: f64,
}

impl DgpSpec {
    /// A small Cobb–Douglas baseline useful as a starting point in tests
    /// and configs: `α = (0.3, 0.3, 0.4)`, AR(1) `ω` with `δ = (0.02, 0.9)`,
    /// `σ_η = σ_ε = 0.1`.
    pub fn baseline(n_firms: usize, n_years: usize, seed: u64) -> Self {
        DgpSpec {
            n_firms,
            n_years,
            burn_in: 20,
            n_sectors: 5,
            start_year: 2001,
            seed,
            technology: Technology::CobbDouglas {
                alpha_k: 0.3,
                alpha_l: 0.3,
                alpha_m: 0.4,
            },
            markov: MarkovSpec {
                delta: [0.02, 0.9, 0.0, 0.0],
                sd_eta: 0.1,
            },
            sd_eps: 0.1,
            log_materials_price: LinearRule::default(),
            log_wage: LinearRule::default(),
            sd_wage_noise: 0.0,
            capital_policy: InputPolicy {
                base: 2.0,
                on_omega_lag: 0.5,
                sd_noise: 0.3,
            },
            labor: LaborRule::Policy(InputPolicy {
                base: 1.0,
                on_omega_lag: 0.5,
                sd_noise: 0.3,
            }),
            labor_wedge: 0.0,
            capital_wedge: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_firms == 0 || self.n_years == 0 {
            return Err(Error::validation("n_firms and n_years must be positive"));
        }
        if self.n_sectors == 0 {
            return Err(Error::validation("n_sectors must be positive"));
        }
        if !(self.sd_eps.is_finite() && self.sd_eps >= 0.0) {
            return Err(Error::validation("sd_eps must be finite and non-negative"));
        }
        if !(self.markov.sd_eta.is_finite() && self.markov.sd_eta >= 0.0) {
            return Err(Error::validation("sd_eta must be finite and non-negative"));
        }
        if !(self.sd_wage_noise.is_finite() && self.sd_wage_noise >= 0.0) {
            return Err(Error::validation(
                "sd_wage_noise must be finite and non-negative",
            ));
        }
        if self.markov.is_ar1() && self.markov.delta[1].abs() >= 1.0 {
            return Err(Error::validation(format!(
                "AR(1) persistence δ1 = {} must lie in (−1, 1)",
                self.markov.delta[1]
            )));
        }
        if self.labor_wedge <= -1.0 || self.capital_wedge <= -1.0 {
            return Err(Error::validation("wedges must exceed −1"));
        }
        match self.technology {
            Technology::CobbDouglas {
                alpha_k,
                alpha_l,
                alpha_m,
            } => {
                if !(alpha_m > 0.0 && alpha_m < 1.0) {
                    return Err(Error::validation(format!(
                        "materials exponent α_M = {alpha_m} must lie in (0, 1)"
                    )));
                }
                if alpha_k < 0.0 || alpha_l < 0.0 {
                    return Err(Error::validation("factor exponents must be non-negative"));
                }
                if matches!(self.labor, LaborRule::FlexibleFoc) && alpha_l >= 1.0 - alpha_m - 1e-9 {
                    return Err(Error::validation(format!(
                        "flexible labor needs α_L < 1 − α_M (got α_L = {alpha_l}, α_M = {alpha_m})"
                    )));
                }
            }
            Technology::Translog { .. } => {
                if matches!(self.labor, LaborRule::FlexibleFoc) {
                    return Err(Error::validation(
                        "the flexible-labor variant requires Cobb-Douglas technology",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form shock constants of a specification (log-normal shocks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// `E[e^ε] = exp(σ_ε²/2)`.
    pub mean_exp_eps: f64,
    /// `E[e^η] = exp(σ_η²/2)`.
    pub mean_exp_eta: f64,
    /// `E[e^{η/(1−α_M)}]`, the constant in the flexible-labor FOC; `None`
    /// for translog technology (where the variant is unavailable).
    pub mean_exp_eta_flex: Option<f64>,
}

/// Compute the shock constants implied by a specification.
pub fn closed_form_constants(spec: &DgpSpec) -> Constants {
    let mean_exp = |sd: f64| (0.5 * sd * sd).exp();
    let flex = match spec.technology {
        Technology::CobbDouglas { alpha_m, .. } => {
            let s = spec.markov.sd_eta / (1.0 - alpha_m);
            Some(mean_exp(s))
        }
        Technology::Translog { .. } => None,
    };
    Constants {
        mean_exp_eps: mean_exp(spec.sd_eps),
        mean_exp_eta: mean_exp(spec.markov.sd_eta),
        mean_exp_eta_flex: flex,
    }
}

/// Per-record ground truth emitted alongside the simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub firm_id: String,
    pub year: i32,
    pub omega: f64,
    pub omega_lag: f64,
    pub eta: f64,
    pub eps: f64,
    pub elas_k: f64,
    pub elas_l: f64,
    pub elas_m: f64,
    /// Marginal products in levels, `elas_X · Y / X`.
    pub mp_k: f64,
    pub mp_l: f64,
    pub mp_m: f64,
    /// Log relative materials price `ln(ρ/P)` faced in the period.
    pub log_materials_price: f64,
    /// Log relative wage `ln(w/P)` faced in the period.
    pub log_wage: f64,
    /// Log technology `f(k,l,m)`.
    pub log_f: f64,
}

/// Ground-truth table aligned with the simulated panel (same sort order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthTable {
    pub records: Vec<TruthRecord>,
}

impl TruthTable {
    /// Write the table as CSV.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "firm_id",
            "year",
            "omega",
            "omega_lag",
            "eta",
            "eps",
            "elas_k",
            "elas_l",
            "elas_m",
            "mp_k",
            "mp_l",
            "mp_m",
            "log_materials_price",
            "log_wage",
            "log_f",
        ])?;
        for r in &self.records {
            wtr.write_record([
                r.firm_id.clone(),
                r.year.to_string(),
                r.omega.to_string(),
                r.omega_lag.to_string(),
                r.eta.to_string(),
                r.eps.to_string(),
                r.elas_k.to_string(),
                r.elas_l.to_string(),
                r.elas_m.to_string(),
                r.mp_k.to_string(),
                r.mp_l.to_string(),
                r.mp_m.to_string(),
                r.log_materials_price.to_string(),
                r.log_wage.to_string(),
                r.log_f.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Solve the materials first-order condition for log materials `m`:
///
/// ```text
/// ln elas_M(k,l,m) + f(k,l,m) + ω + ln E[e^ε] − m = ln(ρ/P)
/// ```
///
/// Cobb–Douglas technology is solved in closed form; translog uses a
/// bracketed Newton/bisection hybrid on the descending crossing
/// (tolerance 1e-10 on the FOC residual). Errors when no admissible root
/// exists in the search window.
pub fn solve_materials_foc(
    technology: &Technology,
    mean_exp_eps: f64,
    k: f64,
    l: f64,
    omega: f64,
    log_materials_price: f64,
) -> Result<f64> {
    match *technology {
        Technology::CobbDouglas {
            alpha_k,
            alpha_l,
            alpha_m,
        } => Ok((alpha_m.ln() + mean_exp_eps.ln() - log_materials_price
            + omega
            + alpha_k * k
            + alpha_l * l)
            / (1.0 - alpha_m)),
        Technology::Translog { gamma, c_alpha } => {
            let h = |m: f64| -> Option<f64> {
                let elas = gamma.materials_elasticity(k, l, m);
                if elas <= 0.0 {
                    return None;
                }
                Some(
                    elas.ln()
                        + log_technology(&gamma, &c_alpha, k, l, m)
                        + omega
                        + mean_exp_eps.ln()
                        - m
                        - log_materials_price,
                )
            };
            // Scan a wide window for the descending sign change.
            const LO: f64 = -30.0;
            const HI: f64 = 30.0;
            const STEP: f64 = 0.25;
            let mut bracket: Option<(f64, f64)> = None;
            let mut prev: Option<(f64, f64)> = None;
            let mut m = LO;
            while m <= HI {
                if let Some(hm) = h(m) {
                    if let Some((pm, ph)) = prev {
                        if ph > 0.0 && hm <= 0.0 {
                            bracket = Some((pm, m));
                            break;
                        }
                    }
                    prev = Some((m, hm));
                } else {
                    prev = None;
                }
                m += STEP;
            }
            let (mut a, mut b) = bracket.ok_or_else(|| {
                Error::computation(format!(
                    "no materials FOC root for (k, l, ω) = ({k:.4}, {l:.4}, {omega:.4})"
                ))
            })?;
            // Newton with bisection safeguard.
            let mut x = 0.5 * (a + b);
            for _ in 0..200 {
                let hx = h(x).unwrap_or(f64::NAN);
                if hx.is_nan() {
                    x = 0.5 * (a + b);
                    continue;
                }
                if hx.abs() < 1e-10 {
                    return Ok(x);
                }
                if hx > 0.0 {
                    a = x;
                } else {
                    b = x;
                }
                let elas = gamma.materials_elasticity(k, l, x);
                let dh = gamma.d_elas_m_dm(k, l, x) / elas + elas - 1.0;
                let newton = x - hx / dh;
                x = if dh.abs() > 1e-14 && newton > a && newton < b {
                    newton
                } else {
                    0.5 * (a + b)
                };
                if (b - a).abs() < 1e-13 {
                    break;
                }
            }
            let hx = h(x).unwrap_or(f64::NAN);
            if hx.is_finite() && hx.abs() < 1e-10 {
                Ok(x)
            } else {
                Err(Error::computation(format!(
                    "materials FOC did not converge for (k, l, ω) = ({k:.4}, {l:.4}, {omega:.4})"
                )))
            }
        }
    }
}

/// Solve the flexible-labor expected-value FOC for log labor `l` at the end
/// of `t−1` (Cobb–Douglas only; see module docs). `m_cond` is the Markov
/// conditional mean `m(ω_{t−1})`.
pub fn solve_labor_foc(
    technology: &Technology,
    constants: &Constants,
    k: f64,
    m_cond: f64,
    log_wage: f64,
    log_materials_price: f64,
    labor_wedge: f64,
) -> Result<f64> {
    let Technology::CobbDouglas {
        alpha_k,
        alpha_l,
        alpha_m,
    } = *technology
    else {
        return Err(Error::validation(
            "the flexible-labor FOC requires Cobb-Douglas technology",
        ));
    };
    let mean_exp_eta_flex = constants
        .mean_exp_eta_flex
        .expect("Cobb-Douglas constants include the flexible-labor term");
    let one_m = 1.0 - alpha_m;
    let coef = alpha_l / one_m - 1.0; // < 0 by validation
    let rhs = log_wage + (1.0 + labor_wedge).ln()
        - alpha_l.ln()
        - alpha_k * k / one_m
        - alpha_m / one_m * (alpha_m.ln() + constants.mean_exp_eps.ln() - log_materials_price)
        - m_cond / one_m
        - mean_exp_eta_flex.ln()
        - constants.mean_exp_eps.ln();
    Ok(rhs / coef)
}

/// Simulate a panel and its ground truth.
///
/// Firms are independent; firm `i` draws from stream `i+1` of a ChaCha
/// generator seeded with `spec.seed`, so results do not depend on
/// evaluation order. Each period draws, in fixed order: `η`, `ε`, capital
/// policy noise, labor policy noise (the last is discarded under the
/// flexible-labor rule, keeping shock paths comparable across variants),
/// and — only when `sd_wage_noise > 0` — a wage draw, so zero-noise
/// specifications keep their exact streams.
pub fn simulate(spec: &DgpSpec) -> Result<(FirmPanel, TruthTable)> {
    spec.validate()?;
    let constants = closed_form_constants(spec);
    let (gamma, c_alpha) = spec.technology.params();

    let mut records = Vec::with_capacity(spec.n_firms * spec.n_years);
    let mut truths = Vec::with_capacity(spec.n_firms * spec.n_years);

    for firm in 0..spec.n_firms {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(firm as u64 + 1);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

        let firm_id = format!("f{firm:05}");
        let sector = format!("{}", 101 + firm % spec.n_sectors);

        // Initialize ω from the AR(1) stationary distribution when defined,
        // otherwise from the intercept; burn-in washes the choice out.
        let d1 = spec.markov.delta[1];
        let mut omega_lag = if spec.markov.is_ar1() {
            let mean = spec.markov.delta[0] / (1.0 - d1);
            let sd = if spec.markov.sd_eta > 0.0 {
                spec.markov.sd_eta / (1.0 - d1 * d1).sqrt()
            } else {
                0.0
            };
            mean + sd * std_normal.sample(&mut rng)
        } else {
            spec.markov.delta[0]
        };

        for t in 0..(spec.burn_in + spec.n_years) {
            let eta = spec.markov.sd_eta * std_normal.sample(&mut rng);
            let omega = spec.markov.conditional_mean(omega_lag) + eta;
            if !omega.is_finite() || omega.abs() > 50.0 {
                return Err(Error::computation(format!(
                    "Markov process diverged for firm {firm_id} (ω = {omega})"
                )));
            }
            if t < spec.burn_in {
                // Burn-in: advance the state only.
                omega_lag = omega;
                continue;
            }

            let t_rel = (t - spec.burn_in) as f64;
            let eps = spec.sd_eps * std_normal.sample(&mut rng);
            let noise_k = std_normal.sample(&mut rng);
            let noise_l = std_normal.sample(&mut rng);
            let noise_w = if spec.sd_wage_noise > 0.0 {
                spec.sd_wage_noise * std_normal.sample(&mut rng)
            } else {
                0.0
            };

            let log_rho = spec.log_materials_price.eval(omega_lag, t_rel);
            let log_w = spec.log_wage.eval(omega_lag, t_rel) + noise_w;

            let k = spec.capital_policy.base
                + spec.capital_policy.on_omega_lag * omega_lag
                + spec.capital_policy.sd_noise * noise_k;
            let l = match spec.labor {
                LaborRule::Policy(p) => p.base + p.on_omega_lag * omega_lag + p.sd_noise * noise_l,
                LaborRule::FlexibleFoc => solve_labor_foc(
                    &spec.technology,
                    &constants,
                    k,
                    spec.markov.conditional_mean(omega_lag),
                    log_w,
                    log_rho,
                    spec.labor_wedge,
                )?,
            };
            let m = solve_materials_foc(
                &spec.technology,
                constants.mean_exp_eps,
                k,
                l,
                omega,
                log_rho,
            )?;

            let f = log_technology(&gamma, &c_alpha, k, l, m);
            let y = f + omega + eps;
            let output = y.exp();
            if !output.is_finite() {
                return Err(Error::computation(format!(
                    "non-finite output for firm {firm_id} in period {t_rel}"
                )));
            }

            let elas_k = capital_elasticity(&gamma, &c_alpha, k, l, m);
            let elas_l = labor_elasticity(&gamma, &c_alpha, k, l, m);
            let elas_m = gamma.materials_elasticity(k, l, m);

            let year = spec.start_year + t_rel as i32;
            let mut rec = FirmYear::empty(firm_id.clone(), year);
            rec.sector = sector.clone();
            rec.country = "SIM".to_string();
            rec.output = Some(output);
            rec.capital = Some(k.exp());
            rec.labor = Some(l.exp());
            rec.materials = Some(m.exp());
            rec.wage_bill = Some((log_w + l).exp());
            rec.materials_cost = Some((log_rho + m).exp());
            rec.price = Some(1.0);
            records.push(rec);

            truths.push(TruthRecord {
                firm_id: firm_id.clone(),
                year,
                omega,
                omega_lag,
                eta,
                eps,
                elas_k,
                elas_l,
                elas_m,
                mp_k: elas_k * output / k.exp(),
                mp_l: elas_l * output / l.exp(),
                mp_m: elas_m * output / m.exp(),
                log_materials_price: log_rho,
                log_wage: log_w,
                log_f: f,
            });

            omega_lag = omega;
        }
    }

    // Panel sorting matches the generation order (firm ids are zero-padded),
    // so truth records stay aligned with panel records.
    let panel = FirmPanel::new(records)?;
    Ok((panel, TruthTable { records: truths }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constants_match_monte_carlo() {
        let spec = DgpSpec::baseline(1, 1, 7);
        let c = closed_form_constants(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, spec.sd_eps).unwrap();
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v: f64 = normal.sample(&mut rng);
            let e = v.exp();
            sum += e;
            sumsq += e * e;
        }
        let mean = sum / n as f64;
        let sd = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - c.mean_exp_eps).abs() < 3.0 * sd,
            "MC mean {mean} vs closed form {}",
            c.mean_exp_eps
        );
        // Log-normal arithmetic for the flexible constant.
        let s = spec.markov.sd_eta / 0.6;
        assert_relative_eq!(c.mean_exp_eta_flex.unwrap(), (0.5 * s * s).exp());
    }

    #[test]
    fn cobb_douglas_share_identity_holds_record_by_record() {
        let spec = DgpSpec::baseline(40, 6, 11);
        let (panel, truth) = simulate(&spec).unwrap();
        let c = closed_form_constants(&spec);
        for (r, t) in panel.records().iter().zip(&truth.records) {
            let share = r.materials_cost.unwrap() / (r.price_or_unit() * r.output.unwrap());
            let expected = 0.4 * c.mean_exp_eps * (-t.eps).exp();
            assert_relative_eq!(share, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn flexible_labor_identity_holds_record_by_record() {
        // The ratio below is wage-free, so it must hold whether wages are
        // common or carry firm-year heterogeneity (the FOC is solved at
        // the same wage the bill is recorded at).
        for wedge in [0.0, 0.3] {
            for sd_wage in [0.0, 0.25] {
                let mut spec = DgpSpec::baseline(30, 6, 13);
                spec.labor = LaborRule::FlexibleFoc;
                spec.labor_wedge = wedge;
                spec.sd_wage_noise = sd_wage;
                let (panel, truth) = simulate(&spec).unwrap();
                let c = closed_form_constants(&spec);
                let one_m = 0.6;
                for (r, t) in panel.records().iter().zip(&truth.records) {
                    // P·Y·elas_L / (w·L) = (1+τ_L)·e^ε·e^{η/(1−α_M)} / (𝓔·𝓜†)
                    let lhs = r.price_or_unit() * r.output.unwrap() * 0.3 / r.wage_bill.unwrap();
                    let rhs = (1.0 + wedge) * (t.eps + t.eta / one_m).exp()
                        / (c.mean_exp_eps * c.mean_exp_eta_flex.unwrap());
                    assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn translog_foc_residual_vanishes_and_share_identity_holds() {
        let gamma = GammaVector {
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
        let mut spec = DgpSpec::baseline(30, 6, 17);
        spec.technology = Technology::Translog { gamma, c_alpha };
        let (panel, truth) = simulate(&spec).unwrap();
        let c = closed_form_constants(&spec);
        for (r, t) in panel.records().iter().zip(&truth.records) {
            let k = r.capital.unwrap().ln();
            let l = r.labor.unwrap().ln();
            let m = r.materials.unwrap().ln();
            let elas = gamma.materials_elasticity(k, l, m);
            assert!(elas > 0.0 && elas < 1.0, "elasticity out of range: {elas}");
            let resid = elas.ln()
                + log_technology(&gamma, &c_alpha, k, l, m)
                + t.omega
                + c.mean_exp_eps.ln()
                - m
                - t.log_materials_price;
            assert!(resid.abs() < 1e-9, "FOC residual {resid}");
            let share = r.materials_cost.unwrap() / (r.price_or_unit() * r.output.unwrap());
            let expected = elas * c.mean_exp_eps * (-t.eps).exp();
            assert_relative_eq!(share, expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_panel_exactly() {
        let spec = DgpSpec::baseline(25, 5, 23);
        let (p1, t1) = simulate(&spec).unwrap();
        let (p2, t2) = simulate(&spec).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        let mut other = spec.clone();
        other.seed = 24;
        let (p3, _) = simulate(&other).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn explosive_ar1_is_rejected() {
        let mut spec = DgpSpec::baseline(5, 3, 1);
        spec.markov.delta = [0.0, 1.01, 0.0, 0.0];
        assert!(matches!(simulate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn flexible_labor_with_translog_is_rejected() {
        let mut spec = DgpSpec::baseline(5, 3, 1);
        spec.technology = Technology::Translog {
            gamma: GammaVector {
                c0: 0.4,
                ..GammaVector::zeros()
            },
            c_alpha: AlphaVector::zeros(),
        };
        spec.labor = LaborRule::FlexibleFoc;
        assert!(matches!(simulate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn eta_shift_moves_capital_and_labor_but_not_materials() {
        // Structural perturbation: hold (k, l, ε) fixed, move η, re-solve the
        // materials FOC. Log marginal products of the predetermined inputs
        // move by 1/(1−α_M) per unit of η; materials' does not move.
        let tech = Technology::CobbDouglas {
            alpha_k: 0.3,
            alpha_l: 0.3,
            alpha_m: 0.4,
        };
        let mean_exp_eps = 1.005_f64;
        let (k, l, log_rho, omega0, eps) = (2.0, 1.0, 0.05, 0.3, 0.1);
        let h = 1e-4;
        let log_mp = |x: usize, omega: f64| -> (f64, f64, f64) {
            let m = solve_materials_foc(&tech, mean_exp_eps, k, l, omega, log_rho).unwrap();
            let y = tech.log_output(k, l, m) + omega + eps;
            let inputs = [k, l, m];
            let elas: [f64; 3] = [0.3, 0.3, 0.4];
            (elas[x].ln() + y - inputs[x], m, y)
        };
        for (x, want) in [(0usize, 1.0 / 0.6), (1, 1.0 / 0.6), (2, 0.0)] {
            let (lo, _, _) = log_mp(x, omega0 - h);
            let (hi, _, _) = log_mp(x, omega0 + h);
            let slope = (hi - lo) / (2.0 * h);
            assert_relative_eq!(slope, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn eps_shift_moves_all_log_marginal_products_equally() {
        // ε is realized after all inputs: every log MP is ln elas + y − x,
        // and y moves one-for-one with ε.
        let spec = DgpSpec::baseline(5, 3, 29);
        let (panel, truth) = simulate(&spec).unwrap();
        let r = &panel.records()[0];
        let t = &truth.records[0];
        let deps = 0.25_f64;
        for (elas, x) in [
            (t.elas_k, r.capital.unwrap()),
            (t.elas_l, r.labor.unwrap()),
            (t.elas_m, r.materials.unwrap()),
        ] {
            let base = (elas * r.output.unwrap() / x).ln();
            let shifted = (elas * (r.output.unwrap() * deps.exp()) / x).ln();
            assert_relative_eq!(shifted - base, deps, epsilon = 1e-12);
        }
    }

    #[test]
    fn truth_rows_align_with_panel_rows() {
        let spec = DgpSpec::baseline(12, 4, 31);
        let (panel, truth) = simulate(&spec).unwrap();
        assert_eq!(panel.len(), truth.records.len());
        for (r, t) in panel.records().iter().zip(&truth.records) {
            assert_eq!(r.firm_id, t.firm_id);
            assert_eq!(r.year, t.year);
            // y = f + ω + ε reconstructs output exactly.
            assert_relative_eq!(
                r.output.unwrap().ln(),
                t.log_f + t.omega + t.eps,
                epsilon = 1e-12
            );
        }
    }
}
