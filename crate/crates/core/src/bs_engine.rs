//! Black-Scholes analytics for the frictionless claim value V0 and its
//! cash-scaled S-derivatives up to fourth order.
//!
//! ```text
//! C(S,K,τ) = S N(d₊) − K e^{−rτ} N(d₋),   d± = [ln(S/K) + (r ± σ²/2)τ] / (σ√τ)
//! ```

use crate::error::{Error, Result};
use crate::market_model::{ClaimKind, ClaimSpec, MarketParams};
use crate::quad::normal_rule;
use std::f64::consts::{PI, SQRT_2};

/// Standard normal CDF through the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsCall {
    pub price: f64,
    pub d_plus: f64,
    pub d_minus: f64,
}

/// Black-Scholes call price with time to maturity `tau`.
pub fn bs_call(s: f64, k: f64, tau: f64, r: f64, sigma: f64) -> Result<BsCall> {
    if !(s > 0.0 && k > 0.0 && sigma > 0.0) {
        return Err(Error::Domain(format!(
            "bs_call needs S, K, sigma > 0 (got S={s}, K={k}, sigma={sigma})"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("bs_call needs tau > 0 (got {tau})")));
    }
    let sd = sigma * tau.sqrt();
    let d_plus = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / sd;
    let d_minus = d_plus - sd;
    let price = s * norm_cdf(d_plus) - (-r * tau).exp() * k * norm_cdf(d_minus);
    Ok(BsCall {
        price,
        d_plus,
        d_minus,
    })
}

/// Claim value and cash derivatives at a point (S,t).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BsGreeks {
    pub v0: f64,
    /// S·V0_S
    pub cash_delta: f64,
    /// S²·V0_SS
    pub cash_gamma: f64,
    /// S³·V0_SSS
    pub cash_speed: f64,
    /// S⁴·V0_SSSS
    pub cash_fourth: f64,
    /// V0_t
    pub theta: f64,
}

impl BsGreeks {
    pub fn delta(&self, s: f64) -> f64 {
        self.cash_delta / s
    }
    pub fn gamma(&self, s: f64) -> f64 {
        self.cash_gamma / (s * s)
    }
}

/// Closed-form call (or put) value and cash derivatives; `tau > 0`.
pub(crate) fn lognormal_greeks(s: f64, k: f64, tau: f64, r: f64, sigma: f64, put: bool) -> BsGreeks {
    let sd = sigma * tau.sqrt();
    let d_plus = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / sd;
    let d_minus = d_plus - sd;
    let disc_k = (-r * tau).exp() * k;
    let (v0, delta) = if put {
        (
            disc_k * norm_cdf(-d_minus) - s * norm_cdf(-d_plus),
            -norm_cdf(-d_plus),
        )
    } else {
        (s * norm_cdf(d_plus) - disc_k * norm_cdf(d_minus), norm_cdf(d_plus))
    };
    let cash_gamma = s * norm_pdf(d_plus) / sd;
    let a = 1.0 + d_plus / sd;
    let cash_speed = -cash_gamma * a;
    let cash_fourth = cash_gamma * (a * a + a - 1.0 / (sd * sd));
    let cash_delta = s * delta;
    let theta = r * v0 - r * cash_delta - 0.5 * sigma * sigma * cash_gamma;
    BsGreeks {
        v0,
        cash_delta,
        cash_gamma,
        cash_speed,
        cash_fourth,
        theta,
    }
}

/// Default Gauss-Hermite node count for custom claims.
pub const CUSTOM_NODES: usize = 64;
/// Relative change tolerated when the node count is doubled.
pub const CUSTOM_TOL: f64 = 1e-8;

/// Frictionless value V0(S,t) of the claim settled at T, with cash derivatives.
pub fn claim_v0(c: &ClaimSpec, p: &MarketParams, s: f64, t: f64) -> Result<BsGreeks> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("claim_v0 needs S > 0 (got {s})")));
    }
    if !(0.0..=p.horizon).contains(&t) {
        return Err(Error::Domain(format!(
            "claim_v0 needs t in [0, {}] (got {t})",
            p.horizon
        )));
    }
    Ok(match &c.kind {
        ClaimKind::None => BsGreeks::default(),
        ClaimKind::Linear { coeff } => BsGreeks {
            v0: coeff * s,
            cash_delta: coeff * s,
            ..BsGreeks::default()
        },
        ClaimKind::MollifiedCall { strike, delta_t } => {
            lognormal_greeks(s, *strike, delta_t + p.horizon - t, p.r, p.sigma, false)
        }
        ClaimKind::MollifiedPut { strike, delta_t } => {
            lognormal_greeks(s, *strike, delta_t + p.horizon - t, p.r, p.sigma, true)
        }
        ClaimKind::Custom(_) => {
            let lo = custom_greeks(c, p, s, t, CUSTOM_NODES)?;
            let hi = custom_greeks(c, p, s, t, 2 * CUSTOM_NODES)?;
            let pairs = [
                (lo.v0, hi.v0),
                (lo.cash_delta, hi.cash_delta),
                (lo.cash_gamma, hi.cash_gamma),
                (lo.cash_speed, hi.cash_speed),
                (lo.cash_fourth, hi.cash_fourth),
            ];
            let scale = pairs.iter().fold(1e-12_f64, |m, &(_, b)| m.max(b.abs()));
            for (a, b) in pairs {
                let change = (a - b).abs() / scale;
                if change > CUSTOM_TOL {
                    return Err(Error::Quadrature {
                        estimate: b,
                        change,
                    });
                }
            }
            hi
        }
    })
}

/// Risk-neutral Gauss-Hermite evaluation of V0 and S^i ∂^i V0 = e^{−rτ} E[S_T^i g^{(i)}(S_T)].
pub fn custom_greeks(c: &ClaimSpec, p: &MarketParams, s: f64, t: f64, nodes: usize) -> Result<BsGreeks> {
    let tau = p.horizon - t;
    let sig2 = p.sigma * p.sigma;
    let mut acc = [0.0; 5];
    if tau <= 0.0 {
        let d = c.derivatives(p, s)?;
        let mut sp = 1.0;
        for i in 0..5 {
            acc[i] = sp * d[i];
            sp *= s;
        }
    } else {
        let rule = normal_rule(nodes);
        let drift = (p.r - 0.5 * sig2) * tau;
        let vol = p.sigma * tau.sqrt();
        for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
            let st = s * (vol * z + drift).exp();
            let d = c.derivatives(p, st)?;
            let mut sp = 1.0;
            for i in 0..5 {
                acc[i] += w * sp * d[i];
                sp *= st;
            }
        }
        let disc = (-p.r * tau).exp();
        for a in acc.iter_mut() {
            *a *= disc;
        }
    }
    let theta = p.r * acc[0] - p.r * acc[1] - 0.5 * sig2 * acc[2];
    Ok(BsGreeks {
        v0: acc[0],
        cash_delta: acc[1],
        cash_gamma: acc[2],
        cash_speed: acc[3],
        cash_fourth: acc[4],
        theta,
    })
}

/// Golden-section maximization of a unimodal `f` on [a, b].
pub(crate) fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// sup_S of |g − g′S| (order 0) or S^i|g^{(i)}| (order i = 2, 3, 4): log-grid
/// scan over [K·10⁻⁴, K·10⁴] followed by golden-section refinement in ln S.
pub fn payoff_sup(c: &ClaimSpec, p: &MarketParams, order: usize) -> Result<f64> {
    if !matches!(order, 0 | 2 | 3 | 4) {
        return Err(Error::InvalidParam(format!("payoff_sup order must be 0, 2, 3 or 4 (got {order})")));
    }
    if matches!(c.kind, ClaimKind::None) || (order > 0 && matches!(c.kind, ClaimKind::Linear { .. })) {
        return Ok(0.0);
    }
    let k = c.scale();
    let n = 10_000;
    let (lo, hi) = ((k * 1e-4).ln(), (k * 1e4).ln());
    let h = (hi - lo) / (n - 1) as f64;
    let f = |x: f64| -> Result<f64> {
        let s = x.exp();
        let d = c.derivatives(p, s)?;
        Ok(if order == 0 {
            (d[0] - d[1] * s).abs()
        } else {
            (s.powi(order as i32) * d[order]).abs()
        })
    };
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let v = f(lo + h * i as f64)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    let a = lo + h * best.0.saturating_sub(1) as f64;
    let b = lo + h * (best.0 + 1).min(n - 1) as f64;
    let (_, refined) = golden_max(|x| f(x).unwrap_or(f64::NEG_INFINITY), a, b, 1e-10);
    Ok(refined.max(best.1))
}

/// sup_S S²|g″(S)|.
pub fn sup_cash_gamma(c: &ClaimSpec, p: &MarketParams) -> Result<f64> {
    payoff_sup(c, p, 2)
}

/// V0_t + ½σ²S²V0_SS + rSV0_S − rV0 with every derivative taken by central
/// differences of V0 at relative step `h`.
pub fn pde_residual(c: &ClaimSpec, p: &MarketParams, s: f64, t: f64, h: f64) -> Result<f64> {
    let v = |s: f64, t: f64| claim_v0(c, p, s, t).map(|g| g.v0);
    let hs = h * s;
    let ht = h * p.horizon;
    let v0 = v(s, t)?;
    let (vp, vm) = (v(s + hs, t)?, v(s - hs, t)?);
    let v_s = (vp - vm) / (2.0 * hs);
    let v_ss = (vp - 2.0 * v0 + vm) / (hs * hs);
    let v_t = if t - ht < 0.0 {
        (-3.0 * v0 + 4.0 * v(s, t + ht)? - v(s, t + 2.0 * ht)?) / (2.0 * ht)
    } else if t + ht > p.horizon {
        (3.0 * v0 - 4.0 * v(s, t - ht)? + v(s, t - 2.0 * ht)?) / (2.0 * ht)
    } else {
        (v(s, t + ht)? - v(s, t - ht)?) / (2.0 * ht)
    };
    Ok(v_t + 0.5 * p.sigma * p.sigma * s * s * v_ss + p.r * s * v_s - p.r * v0)
}

/// Admissibility margin ε₁ = e^{−rT}(μ−r)/(γσ²) − sup S²|g″|; positive iff the
/// cash-gamma condition holds.
pub fn assumption_margin(c: &ClaimSpec, p: &MarketParams) -> Result<f64> {
    Ok(p.merton_cash(0.0) - sup_cash_gamma(c, p)?)
}
