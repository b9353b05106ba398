//! Shared translog technology algebra.
//!
//! Both the simulator and the estimators work with a gross-output
//! technology whose *materials elasticity* is a full second-order
//! polynomial in log capital `k`, log labor `l`, and log materials `m`:
//!
//! ```text
//! elas_M(k,l,m) = g0 + gk·k + gl·l + gm·m
//!              + gkk·k² + gll·l² + gmm·m²
//!              + gkl·k·l + gkm·k·m + glm·l·m
//! ```
//!
//! Integrating `elas_M` with respect to `m` recovers log technology up to a
//! function of `(k, l)` alone; that remainder is parameterized as a
//! second-order polynomial with no constant term,
//!
//! ```text
//! C(k,l) = ak·k + al·l + akk·k² + all·l² + akl·k·l ,
//! ```
//!
//! so that `f(k,l,m) = ∫ elas_M dm − C(k,l)`. The constant of integration is
//! normalized into the productivity process. Cobb–Douglas technology is the
//! special case `gamma = (a_M, 0, …)`, `alpha = (−a_K, −a_L, 0, 0, 0)`.
//!
//! Everything downstream — the share regression, the integration step, the
//! elasticity functionals, and their analytic partial derivatives — reads
//! from this module so that simulator truth and estimator output use one
//! set of formulas.

use serde::{Deserialize, Serialize};

/// Number of coefficients in the materials-elasticity polynomial.
pub const GAMMA_LEN: usize = 10;

/// Number of coefficients in the integration-remainder polynomial `C(k,l)`.
pub const ALPHA_LEN: usize = 5;

/// Coefficients of the materials-elasticity polynomial.
///
/// Field order matches [`basis`]: constant, `k`, `l`, `m`, `k²`, `l²`,
/// `m²`, `kl`, `km`, `lm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaVector {
    pub c0: f64,
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub kk: f64,
    pub ll: f64,
    pub mm: f64,
    pub kl: f64,
    pub km: f64,
    pub lm: f64,
}

/// Coefficients of the integration remainder `C(k,l)` (no constant term).
///
/// Field order: `k`, `l`, `k²`, `l²`, `kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub k: f64,
    pub l: f64,
    pub kk: f64,
    pub ll: f64,
    pub kl: f64,
}

/// Evaluate the ten polynomial basis functions at `(k, l, m)`.
///
/// Order matches the [`GammaVector`] fields.
pub fn basis(k: f64, l: f64, m: f64) -> [f64; GAMMA_LEN] {
    [1.0, k, l, m, k * k, l * l, m * m, k * l, k * m, l * m]
}

/// Evaluate the five `C(k,l)` basis functions at `(k, l)`.
///
/// Order matches the [`AlphaVector`] fields.
pub fn c_basis(k: f64, l: f64) -> [f64; ALPHA_LEN] {
    [k, l, k * k, l * l, k * l]
}

impl GammaVector {
    /// All-zero coefficient vector.
    pub fn zeros() -> Self {
        Self::from_array([0.0; GAMMA_LEN])
    }

    /// Construct from an array in [`basis`] order.
    pub fn from_array(a: [f64; GAMMA_LEN]) -> Self {
        GammaVector {
            c0: a[0],
            k: a[1],
            l: a[2],
            m: a[3],
            kk: a[4],
            ll: a[5],
            mm: a[6],
            kl: a[7],
            km: a[8],
            lm: a[9],
        }
    }

    /// Coefficients as an array in [`basis`] order.
    pub fn to_array(self) -> [f64; GAMMA_LEN] {
        [
            self.c0, self.k, self.l, self.m, self.kk, self.ll, self.mm, self.kl, self.km, self.lm,
        ]
    }

    /// Scale every coefficient by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        let mut a = self.to_array();
        for v in &mut a {
            *v *= factor;
        }
        Self::from_array(a)
    }

    /// Materials elasticity `elas_M(k,l,m)` — the polynomial itself.
    pub fn materials_elasticity(&self, k: f64, l: f64, m: f64) -> f64 {
        let b = basis(k, l, m);
        let g = self.to_array();
        let mut acc = 0.0;
        for i in 0..GAMMA_LEN {
            acc += g[i] * b[i];
        }
        acc
    }

    /// Antiderivative `∫₀^m elas_M(k,l,u) du`, evaluated in closed form.
    ///
    /// Equals
    /// `(g0 + gk·k + gl·l + (gm/2)·m + gkk·k² + gll·l² + (gmm/3)·m² +
    ///   gkl·k·l + (gkm/2)·k·m + (glm/2)·l·m) · m`.
    pub fn integrated_elasticity(&self, k: f64, l: f64, m: f64) -> f64 {
        (self.c0
            + self.k * k
            + self.l * l
            + self.m / 2.0 * m
            + self.kk * k * k
            + self.ll * l * l
            + self.mm / 3.0 * m * m
            + self.kl * k * l
            + self.km / 2.0 * k * m
            + self.lm / 2.0 * l * m)
            * m
    }

    /// `∂ elas_M / ∂k`.
    pub fn d_elas_m_dk(&self, k: f64, l: f64, m: f64) -> f64 {
        self.k + 2.0 * self.kk * k + self.kl * l + self.km * m
    }

    /// `∂ elas_M / ∂l`.
    pub fn d_elas_m_dl(&self, k: f64, l: f64, m: f64) -> f64 {
        self.l + 2.0 * self.ll * l + self.kl * k + self.lm * m
    }

    /// `∂ elas_M / ∂m`.
    pub fn d_elas_m_dm(&self, k: f64, l: f64, m: f64) -> f64 {
        self.m + 2.0 * self.mm * m + self.km * k + self.lm * l
    }
}

impl AlphaVector {
    /// All-zero coefficient vector.
    pub fn zeros() -> Self {
        Self::from_array([0.0; ALPHA_LEN])
    }

    /// Construct from an array in [`c_basis`] order.
    pub fn from_array(a: [f64; ALPHA_LEN]) -> Self {
        AlphaVector {
            k: a[0],
            l: a[1],
            kk: a[2],
            ll: a[3],
            kl: a[4],
        }
    }

    /// Coefficients as an array in [`c_basis`] order.
    pub fn to_array(self) -> [f64; ALPHA_LEN] {
        [self.k, self.l, self.kk, self.ll, self.kl]
    }

    /// `C(k,l)` — the integration remainder polynomial.
    pub fn c_poly(&self, k: f64, l: f64) -> f64 {
        self.k * k + self.l * l + self.kk * k * k + self.ll * l * l + self.kl * k * l
    }

    /// `∂C/∂k`.
    pub fn dc_dk(&self, k: f64, l: f64) -> f64 {
        self.k + 2.0 * self.kk * k + self.kl * l
    }

    /// `∂C/∂l`.
    pub fn dc_dl(&self, k: f64, l: f64) -> f64 {
        self.l + 2.0 * self.ll * l + self.kl * k
    }
}

/// Capital elasticity implied by `(gamma, alpha)`:
/// `∂f/∂k = m·(gk + 2gkk·k + gkl·l + (gkm/2)·m) − (ak + 2akk·k + akl·l)`.
pub fn capital_elasticity(gamma: &GammaVector, alpha: &AlphaVector, k: f64, l: f64, m: f64) -> f64 {
    m * (gamma.k + 2.0 * gamma.kk * k + gamma.kl * l + gamma.km / 2.0 * m) - alpha.dc_dk(k, l)
}

/// Labor elasticity implied by `(gamma, alpha)`:
/// `∂f/∂l = m·(gl + 2gll·l + gkl·k + (glm/2)·m) − (al + 2all·l + akl·k)`.
pub fn labor_elasticity(gamma: &GammaVector, alpha: &AlphaVector, k: f64, l: f64, m: f64) -> f64 {
    m * (gamma.l + 2.0 * gamma.ll * l + gamma.kl * k + gamma.lm / 2.0 * m) - alpha.dc_dl(k, l)
}

/// Log technology `f(k,l,m) = ∫ elas_M dm − C(k,l)` (no constant term).
pub fn log_technology(gamma: &GammaVector, alpha: &AlphaVector, k: f64, l: f64, m: f64) -> f64 {
    gamma.integrated_elasticity(k, l, m) - alpha.c_poly(k, l)
}

/// Partial derivatives of the capital elasticity.
///
/// Returned in `(∂/∂k, ∂/∂l, ∂/∂m)` order.
pub fn capital_elasticity_partials(
    gamma: &GammaVector,
    alpha: &AlphaVector,
    k: f64,
    l: f64,
    m: f64,
) -> (f64, f64, f64) {
    (
        2.0 * m * gamma.kk - 2.0 * alpha.kk,
        m * gamma.kl - alpha.kl,
        gamma.k + 2.0 * gamma.kk * k + gamma.kl * l + gamma.km * m,
    )
}

/// Partial derivatives of the labor elasticity, `(∂/∂k, ∂/∂l, ∂/∂m)`.
pub fn labor_elasticity_partials(
    gamma: &GammaVector,
    alpha: &AlphaVector,
    k: f64,
    l: f64,
    m: f64,
) -> (f64, f64, f64) {
    (
        m * gamma.kl - alpha.kl,
        2.0 * m * gamma.ll - 2.0 * alpha.ll,
        gamma.l + 2.0 * gamma.ll * l + gamma.kl * k + gamma.lm * m,
    )
}

/// Partial derivatives of the materials elasticity, `(∂/∂k, ∂/∂l, ∂/∂m)`.
pub fn materials_elasticity_partials(
    gamma: &GammaVector,
    _alpha: &AlphaVector,
    k: f64,
    l: f64,
    m: f64,
) -> (f64, f64, f64) {
    (
        gamma.d_elas_m_dk(k, l, m),
        gamma.d_elas_m_dl(k, l, m),
        gamma.d_elas_m_dm(k, l, m),
    )
}
