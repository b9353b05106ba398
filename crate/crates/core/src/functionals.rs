//! Per-firm-year elasticities, marginal products, productivity pieces,
//! and the analytic pass-through of productivity shocks to log marginal
//! products.
//!
//! Marginal products follow `MP^X = (Y/X)·elas^X`; lowercase `mp` denotes
//! the log. TFP is `ν = ω + ε`, and its growth decomposes exactly as
//! `Δν = g(ω₋₁) + η + Δε` with `g(ω) = m(ω) − ω` the Markov growth
//! function.
//!
//! The channel derivatives answer: holding everything else fixed, how
//! much does the log marginal product of input `X` move per unit of a
//! productivity channel `θ ∈ {ω₋₁, η, ε}`? Materials re-optimize after
//! `ω₋₁` and `η` are known, so those channels feed back through the
//! materials allocation fixed point; `ε` lands after all allocations and
//! shifts every log marginal product one-for-one. Responses of the
//! predetermined inputs and of the materials relative price to each
//! channel are model-external and supplied by the caller (all zero by
//! default).

use std::io::Write as IoWrite;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{DeltaVector, GmmFit, ProductionModel};
use crate::panel::{EstimationSample, FirmPanel};
use crate::translog::{
    capital_elasticity, capital_elasticity_partials, labor_elasticity, labor_elasticity_partials,
    materials_elasticity_partials, AlphaVector, GammaVector,
};

/// Which input's marginal product is being examined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    Capital,
    Labor,
    Materials,
}

impl InputKind {
    pub const ALL: [InputKind; 3] = [InputKind::Capital, InputKind::Labor, InputKind::Materials];

    pub fn label(self) -> &'static str {
        match self {
            InputKind::Capital => "capital",
            InputKind::Labor => "labor",
            InputKind::Materials => "materials",
        }
    }
}

/// Productivity growth channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    /// Past persistent productivity `ω₋₁`.
    OmegaLag,
    /// Ex-ante innovation `η` (realized before materials are chosen).
    Eta,
    /// Ex-post shock `ε` (realized after all inputs).
    Eps,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::OmegaLag, Channel::Eta, Channel::Eps];

    pub fn label(self) -> &'static str {
        match self {
            Channel::OmegaLag => "omega_lag",
            Channel::Eta => "eta",
            Channel::Eps => "d_eps",
        }
    }
}

/// Caller-supplied responses of predetermined inputs and of the materials
/// relative price to one channel. The structural model is deliberately
/// silent on these; they default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelInputs {
    /// dk/dθ.
    pub dk: f64,
    /// dl/dθ.
    pub dl: f64,
    /// d log(materials price / output price) / dθ.
    pub dlogprice: f64,
}

impl ChannelInputs {
    fn validate(&self) -> Result<()> {
        if !(self.dk.is_finite() && self.dl.is_finite() && self.dlogprice.is_finite()) {
            return Err(Error::validation("channel responses must be finite"));
        }
        Ok(())
    }
}

/// Evaluation point for [`channel_effect`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPoint {
    pub k: f64,
    pub l: f64,
    pub m: f64,
    /// Lagged recovered productivity; required for the `ω₋₁` channel.
    pub omega_lag: Option<f64>,
}

/// All nine elasticity partial derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticityPartials {
    pub d_elas_k_dk: f64,
    pub d_elas_k_dl: f64,
    pub d_elas_k_dm: f64,
    pub d_elas_l_dk: f64,
    pub d_elas_l_dl: f64,
    pub d_elas_l_dm: f64,
    pub d_elas_m_dk: f64,
    pub d_elas_m_dl: f64,
    pub d_elas_m_dm: f64,
}

/// Compute all nine `∂elas^X/∂x` partials at `(k, l, m)`.
pub fn elasticity_partials(
    gamma: &GammaVector,
    alpha: &AlphaVector,
    k: f64,
    l: f64,
    m: f64,
) -> ElasticityPartials {
    let (kk, kl, km) = capital_elasticity_partials(gamma, alpha, k, l, m);
    let (lk, ll, lm) = labor_elasticity_partials(gamma, alpha, k, l, m);
    let (mk, ml, mm) = materials_elasticity_partials(gamma, alpha, k, l, m);
    ElasticityPartials {
        d_elas_k_dk: kk,
        d_elas_k_dl: kl,
        d_elas_k_dm: km,
        d_elas_l_dk: lk,
        d_elas_l_dl: ll,
        d_elas_l_dm: lm,
        d_elas_m_dk: mk,
        d_elas_m_dl: ml,
        d_elas_m_dm: mm,
    }
}

/// Derivative of the Markov growth function `g(ω) = m(ω) − ω`:
/// `g′(ω) = δ₁ − 1 + 2δ₂ω + 3δ₃ω²`.
pub fn g_prime(delta: &DeltaVector, omega_lag: f64) -> f64 {
    delta.derivative(omega_lag) - 1.0
}

/// Marginal product level `(Y/X)·elas`.
pub fn marginal_product(elasticity: f64, output: f64, input: f64) -> f64 {
    elasticity * output / input
}

/// Analytic derivative of the log marginal product of `input` with
/// respect to channel `theta` at a point.
///
/// `ε` shifts every log marginal product by exactly one. For the other
/// channels the materials allocation re-optimizes, which multiplies the
/// direct effect by the fixed-point factor
/// `Φ_X = (elas^M + ∂log elas^X/∂m) / (1 − elas^M − ∂log elas^M/∂m)`.
/// A vanishing denominator is a singularity of that fixed point and is an
/// error.
pub fn channel_effect(
    model: &ProductionModel,
    input: InputKind,
    theta: Channel,
    point: ChannelPoint,
    responses: &ChannelInputs,
) -> Result<f64> {
    responses.validate()?;
    if theta == Channel::Eps {
        // Realized after all allocations: a pure shifter of output.
        return Ok(1.0);
    }
    let ChannelPoint { k, l, m, omega_lag } = point;

    // The Markov conditional-mean response m(ω₋₁) enters only through the
    // past-productivity channel.
    let (d_markov, d_eta) = match theta {
        Channel::OmegaLag => {
            let w = omega_lag.ok_or_else(|| {
                Error::validation("past-productivity channel requires a lagged productivity value")
            })?;
            (model.delta.derivative(w), 0.0)
        }
        Channel::Eta => (0.0, 1.0),
        Channel::Eps => unreachable!(),
    };

    let elas_m = model.gamma.materials_elasticity(k, l, m);
    if elas_m <= 0.0 {
        return Err(Error::computation(format!(
            "non-positive materials elasticity {elas_m} at ({k}, {l}, {m})"
        )));
    }
    let p = elasticity_partials(&model.gamma, &model.alpha, k, l, m);
    let dlog_m_dm = p.d_elas_m_dm / elas_m;
    let denom = 1.0 - elas_m - dlog_m_dm;
    if denom.abs() < 1e-12 {
        return Err(Error::computation(format!(
            "singularity of the materials fixed point at ({k}, {l}, {m})"
        )));
    }

    if input == InputKind::Materials {
        // Log MP of materials is pinned to the relative price plus ε.
        return Ok(responses.dlogprice);
    }

    let elas_k = capital_elasticity(&model.gamma, &model.alpha, k, l, m);
    let elas_l = labor_elasticity(&model.gamma, &model.alpha, k, l, m);
    let (elas_x, dx_dk, dx_dl, dx_dm, own_k, own_l) = match input {
        InputKind::Capital => (
            elas_k,
            p.d_elas_k_dk,
            p.d_elas_k_dl,
            p.d_elas_k_dm,
            1.0,
            0.0,
        ),
        InputKind::Labor => (
            elas_l,
            p.d_elas_l_dk,
            p.d_elas_l_dl,
            p.d_elas_l_dm,
            0.0,
            1.0,
        ),
        InputKind::Materials => unreachable!(),
    };
    if elas_x <= 0.0 {
        return Err(Error::computation(format!(
            "non-positive {} elasticity {elas_x} at ({k}, {l}, {m})",
            input.label()
        )));
    }
    let dlog_x_dk = dx_dk / elas_x;
    let dlog_x_dl = dx_dl / elas_x;
    let dlog_x_dm = dx_dm / elas_x;
    let dlog_m_dk = p.d_elas_m_dk / elas_m;
    let dlog_m_dl = p.d_elas_m_dl / elas_m;

    let phi = (elas_m + dlog_x_dm) / denom;
    let coef_k = phi * (elas_k + dlog_m_dk) + (elas_k + dlog_x_dk - own_k);
    let coef_l = phi * (elas_l + dlog_m_dl) + (elas_l + dlog_x_dl - own_l);

    Ok(
        coef_k * responses.dk + coef_l * responses.dl - phi * responses.dlogprice
            + (1.0 + phi) * (d_markov + d_eta),
    )
}

/// Compose per-channel derivatives into the total derivative with respect
/// to TFP growth: the harmonic-style combination
/// `(g′/c_ω + 1/c_η + 1/c_ε)⁻¹`.
///
/// Errors when any component is zero (its reciprocal is undefined) or the
/// composed sum vanishes.
pub fn aggregate_channel(c_omega: f64, c_eta: f64, c_eps: f64, g_prime: f64) -> Result<f64> {
    for (name, c) in [("omega_lag", c_omega), ("eta", c_eta), ("d_eps", c_eps)] {
        if c == 0.0 || !c.is_finite() {
            return Err(Error::validation(format!(
                "channel component {name} = {c}: reciprocal undefined"
            )));
        }
    }
    if !g_prime.is_finite() {
        return Err(Error::validation("non-finite growth derivative"));
    }
    let sum = g_prime / c_omega + 1.0 / c_eta + 1.0 / c_eps;
    if sum == 0.0 {
        return Err(Error::computation(
            "channel composition sums to zero: reciprocal undefined",
        ));
    }
    Ok(1.0 / sum)
}

/// One firm-year row of the functional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalRecord {
    pub firm_id: String,
    pub country: String,
    pub sector: String,
    pub year: i32,
    /// Revenue `P·Y` in levels.
    pub revenue: f64,
    pub wage_bill: Option<f64>,
    pub elas_k: f64,
    pub elas_l: f64,
    pub elas_m: f64,
    /// Marginal product levels `(Y/X)·elas` (may be negative when the
    /// estimated elasticity is).
    pub mp_k: f64,
    pub mp_l: f64,
    pub mp_m: f64,
    /// Log marginal products; missing when the level is non-positive.
    pub log_mp_k: Option<f64>,
    pub log_mp_l: Option<f64>,
    pub log_mp_m: Option<f64>,
    /// `ν = ω + ε`.
    pub nu: f64,
    pub omega: f64,
    pub eps: f64,
    /// Markov innovation; present when the previous year is in sample.
    pub eta: Option<f64>,
    /// Lagged recovered productivity.
    pub omega_lag: Option<f64>,
    /// `Δν`; present when the previous year is in sample.
    pub dnu: Option<f64>,
    /// `Δε`.
    pub d_eps: Option<f64>,
}

/// Functional table aligned with the estimation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmFunctionals {
    pub records: Vec<FunctionalRecord>,
    /// Count of non-positive marginal-product levels whose log is missing.
    pub n_missing_log_mp: usize,
}

impl FirmFunctionals {
    /// Emit the table as CSV with stable column names; missing values are
    /// empty fields.
    pub fn write_csv<W: IoWrite>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "firm_id",
            "country",
            "sector",
            "year",
            "revenue",
            "wage_bill",
            "elas_k",
            "elas_l",
            "elas_m",
            "mp_k",
            "mp_l",
            "mp_m",
            "log_mp_k",
            "log_mp_l",
            "log_mp_m",
            "nu",
            "omega",
            "eps",
            "eta",
            "omega_lag",
            "dnu",
            "d_eps",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.firm_id.clone(),
                r.country.clone(),
                r.sector.clone(),
                r.year.to_string(),
                r.revenue.to_string(),
                opt(r.wage_bill),
                r.elas_k.to_string(),
                r.elas_l.to_string(),
                r.elas_m.to_string(),
                r.mp_k.to_string(),
                r.mp_l.to_string(),
                r.mp_m.to_string(),
                opt(r.log_mp_k),
                opt(r.log_mp_l),
                opt(r.log_mp_m),
                r.nu.to_string(),
                r.omega.to_string(),
                r.eps.to_string(),
                opt(r.eta),
                opt(r.omega_lag),
                opt(r.dnu),
                opt(r.d_eps),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the functional table from a fitted model and its sample.
///
/// The fit must come from this sample (record counts are checked); panel
/// records provide the level variables.
pub fn compute_functionals(
    panel: &FirmPanel,
    sample: &EstimationSample,
    fit: &GmmFit,
) -> Result<FirmFunctionals> {
    if fit.model.n_records != sample.len()
        || fit.omega.len() != sample.len()
        || fit.eps.len() != sample.len()
    {
        return Err(Error::validation(
            "model was not fitted on this estimation sample (record counts differ)",
        ));
    }
    let records_src = panel.records();
    let mut records = Vec::with_capacity(sample.len());
    let mut n_missing = 0usize;
    for i in 0..sample.len() {
        let idx = sample.record_index[i];
        let src = records_src.get(idx).ok_or_else(|| {
            Error::validation(format!("sample record {i} is outside the panel ({idx})"))
        })?;
        let (k, l, m) = (sample.k[i], sample.l[i], sample.m[i]);
        let output = src.output.ok_or_else(|| {
            Error::computation(format!(
                "panel record {}/{} lacks output despite being in the sample",
                src.firm_id, src.year
            ))
        })?;
        let capital = src.capital.expect("sampled record has capital");
        let labor = src.labor.expect("sampled record has labor");
        let materials = src.materials.expect("sampled record has materials");
        let elas_k = capital_elasticity(&fit.model.gamma, &fit.model.alpha, k, l, m);
        let elas_l = labor_elasticity(&fit.model.gamma, &fit.model.alpha, k, l, m);
        let elas_m = fit.model.gamma.materials_elasticity(k, l, m);
        let mp_k = marginal_product(elas_k, output, capital);
        let mp_l = marginal_product(elas_l, output, labor);
        let mp_m = marginal_product(elas_m, output, materials);
        let mut log_of = |v: f64| {
            if v > 0.0 {
                Some(v.ln())
            } else {
                n_missing += 1;
                None
            }
        };
        let log_mp_k = log_of(mp_k);
        let log_mp_l = log_of(mp_l);
        let log_mp_m = log_of(mp_m);
        let omega = fit.omega[i];
        let eps = fit.eps[i];
        let lag = sample.lag[i];
        let omega_lag = lag.map(|j| fit.omega[j]);
        let dnu = lag.map(|j| (omega + eps) - (fit.omega[j] + fit.eps[j]));
        let d_eps = lag.map(|j| eps - fit.eps[j]);
        records.push(FunctionalRecord {
            firm_id: src.firm_id.clone(),
            country: src.country.clone(),
            sector: src.sector.clone(),
            year: src.year,
            revenue: src.price_or_unit() * output,
            wage_bill: src.wage_bill,
            elas_k,
            elas_l,
            elas_m,
            mp_k,
            mp_l,
            mp_m,
            log_mp_k,
            log_mp_l,
            log_mp_m,
            nu: omega + eps,
            omega,
            eps,
            eta: fit.eta[i],
            omega_lag,
            dnu,
            d_eps,
        });
    }
    Ok(FirmFunctionals {
        records,
        n_missing_log_mp: n_missing,
    })
}
