//! Small-cost expansion of the reduced value function.
//!
//! ```text
//! Q± = exp{ −γSy/δ + H₀ + ε^{2/3}H₂ + εH₃± + ε^{4/3}H₄(S, (y−y*)ε^{−1/3}, t) }   in the band
//! ```
//! extended exponentially into the buy and sell regions, together with the
//! band geometry, the value-function approximation and the indifference price.

pub mod h4;
mod heat;

pub use h4::H4;
pub use heat::{H2Values, HeatControls};

use crate::bs_engine::{claim_v0, BsGreeks};
use crate::error::{Error, Result};
use crate::market_model::{check_side, ClaimSpec, MarketParams, Side};
use h4::H4Coeffs;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Frictionless target y* and the derivatives the expansion needs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TargetDerivs {
    pub y: f64,
    pub y_s: f64,
    pub y_ss: f64,
    pub y_sss: f64,
    pub y_t: f64,
    pub y_st: f64,
}

/// Band geometry at (S,t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoTradeBand {
    pub y_star: f64,
    /// Y^(j): half-width before the ε^{1/3} scaling.
    pub half_width: f64,
    pub y_minus: f64,
    pub y_plus: f64,
}

impl NoTradeBand {
    pub fn region(&self, y: f64) -> Region {
        if y < self.y_minus {
            Region::Buy
        } else if y > self.y_plus {
            Region::Sell
        } else {
            Region::NoTrade
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Buy,
    NoTrade,
    Sell,
}

/// Selects Q⁺ (lower, H₃⁺ = −M(T−t) − M₁) or Q⁻ (upper).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bound {
    Plus,
    Minus,
}

impl Bound {
    pub fn sign(self) -> f64 {
        match self {
            Bound::Plus => 1.0,
            Bound::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H3 {
    pub value: f64,
    pub m: f64,
    pub m1: f64,
}

/// Expansion terms at a query point (S, Y, t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionBundle {
    pub h0: f64,
    pub h2: f64,
    pub s_h2_s: f64,
    pub h3_plus: f64,
    pub h3_minus: f64,
    pub m: f64,
    pub m1: f64,
    pub h4: H4,
}

/// ln Q and its partials at (S,y,t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogQ {
    pub region: Region,
    pub phi: f64,
    pub phi_y: f64,
    pub phi_s: f64,
    pub phi_t: f64,
    pub phi_yy: f64,
    pub phi_ys: f64,
    pub phi_ss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    pub certainty_equivalent: f64,
    pub error_order: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceBreakdown {
    pub price: f64,
    pub v0: f64,
    pub correction: f64,
    pub h2_claim: f64,
    pub h2_plain: f64,
    pub error_order: &'static str,
}

/// Grid used for the constant M of H₃.
#[derive(Debug, Clone, Copy)]
pub struct MGrid {
    pub n_s: usize,
    pub n_t: usize,
    pub n_y: usize,
    pub decades: f64,
    pub padding: f64,
}

impl Default for MGrid {
    fn default() -> Self {
        MGrid {
            n_s: 64,
            n_t: 17,
            n_y: 32,
            decades: 4.0,
            padding: 1.1,
        }
    }
}

/// Evaluator for one (parameters, claim, side) combination.
#[derive(Debug)]
pub struct Expansion {
    params: MarketParams,
    claim: ClaimSpec,
    side: Side,
    controls: HeatControls,
    m_grid: MGrid,
    h2_cache: Mutex<HashMap<(u64, u64), H2Values>>,
    m_const: OnceLock<Result<f64>>,
}

struct Point {
    s: f64,
    t: f64,
    delta: f64,
    greeks: BsGreeks,
    tg: TargetDerivs,
}

impl Expansion {
    pub fn new(p: &MarketParams, c: &ClaimSpec, j: Side) -> Result<Self> {
        check_side(c, j)?;
        Ok(Expansion {
            params: *p,
            claim: c.clone(),
            side: j,
            controls: HeatControls::default(),
            m_grid: MGrid::default(),
            h2_cache: Mutex::new(HashMap::new()),
            m_const: OnceLock::new(),
        })
    }

    /// Same claim and side at another ε, sharing the ε-free H₂ values and M.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let cache = self.h2_cache.lock().expect("h2 cache poisoned").clone();
        let m_const = OnceLock::new();
        if let Some(m) = self.m_const.get() {
            let _ = m_const.set(m.clone());
        }
        Ok(Expansion {
            params: self.params.with_epsilon(epsilon)?,
            claim: self.claim.clone(),
            side: self.side,
            controls: self.controls,
            m_grid: self.m_grid,
            h2_cache: Mutex::new(cache),
            m_const,
        })
    }

    pub fn with_controls(mut self, controls: HeatControls) -> Self {
        self.controls = controls;
        self
    }

    pub fn with_m_grid(mut self, grid: MGrid) -> Self {
        self.m_grid = grid;
        self
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn claim(&self) -> &ClaimSpec {
        &self.claim
    }

    pub fn side(&self) -> Side {
        self.side
    }

    fn check_point(&self, s: f64, t: f64) -> Result<()> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!("S must be positive (got {s})")));
        }
        if !(0.0..=self.params.horizon).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside [0, {}]",
                self.params.horizon
            )));
        }
        Ok(())
    }

    /// Claim greeks on the hedged side, zero otherwise.
    pub fn greeks(&self, s: f64, t: f64) -> Result<BsGreeks> {
        match self.side {
            Side::NoClaim => Ok(BsGreeks::default()),
            Side::WithClaim => claim_v0(&self.claim, &self.params, s, t),
        }
    }

    fn target_from(&self, s: f64, t: f64, g: &BsGreeks) -> TargetDerivs {
        let p = &self.params;
        let sig2 = p.sigma * p.sigma;
        let m = p.merton_cash(t);
        let (cg, cs, cf) = (g.cash_gamma, g.cash_speed, g.cash_fourth);
        let s2 = s * s;
        TargetDerivs {
            y: g.cash_delta / s + m / s,
            y_s: (cg - m) / s2,
            y_ss: (cs + 2.0 * m) / (s2 * s),
            y_sss: (cf - 6.0 * m) / (s2 * s2),
            y_t: ((-(p.r + sig2) * cg - 0.5 * sig2 * cs) + p.r * m) / s,
            y_st: (-(p.r + sig2) * cg - (p.r + 2.0 * sig2) * cs - 0.5 * sig2 * cf - p.r * m) / s2,
        }
    }

    pub fn target(&self, s: f64, t: f64) -> Result<TargetDerivs> {
        self.check_point(s, t)?;
        let g = self.greeks(s, t)?;
        Ok(self.target_from(s, t, &g))
    }

    pub fn y_star(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.target(s, t)?.y)
    }

    fn point(&self, s: f64, t: f64) -> Result<Point> {
        self.check_point(s, t)?;
        let greeks = self.greeks(s, t)?;
        let tg = self.target_from(s, t, &greeks);
        Ok(Point {
            s,
            t,
            delta: self.params.delta(t),
            greeks,
            tg,
        })
    }

    fn half_width_of(&self, pt: &Point) -> Result<f64> {
        if pt.tg.y_s == 0.0 || !pt.tg.y_s.is_finite() {
            return Err(Error::DegenerateBand { s: pt.s, t: pt.t });
        }
        let y = (1.5 * pt.s * pt.delta * pt.tg.y_s * pt.tg.y_s / self.params.gamma).cbrt();
        if !(y * pt.s > 0.0) {
            return Err(Error::DegenerateBand { s: pt.s, t: pt.t });
        }
        Ok(y)
    }

    fn band_of(&self, pt: &Point) -> Result<NoTradeBand> {
        let hw = self.half_width_of(pt)?;
        let w = self.params.epsilon.cbrt() * hw;
        Ok(NoTradeBand {
            y_star: pt.tg.y,
            half_width: hw,
            y_minus: pt.tg.y - w,
            y_plus: pt.tg.y + w,
        })
    }

    pub fn band(&self, s: f64, t: f64) -> Result<NoTradeBand> {
        let pt = self.point(s, t)?;
        self.band_of(&pt)
    }

    /// Band from precomputed greeks; used by the simulator's hot loop.
    pub fn band_from_greeks(&self, s: f64, t: f64, g: &BsGreeks) -> Result<NoTradeBand> {
        let tg = self.target_from(s, t, g);
        let pt = Point {
            s,
            t,
            delta: self.params.delta(t),
            greeks: *g,
            tg,
        };
        self.band_of(&pt)
    }

    fn h0_of(&self, pt: &Point) -> f64 {
        let p = &self.params;
        let sig2 = p.sigma * p.sigma;
        -(p.mu - p.r).powi(2) * (p.horizon - pt.t) / (2.0 * sig2)
            + p.gamma * pt.greeks.v0 / pt.delta * self.side.indicator()
    }

    pub fn h0(&self, s: f64, t: f64) -> Result<f64> {
        let pt = self.point(s, t)?;
        Ok(self.h0_of(&pt))
    }

    fn source_coeff(&self) -> f64 {
        let p = &self.params;
        0.5 * (1.5 * p.gamma * p.gamma * p.sigma.powi(3)).powf(2.0 / 3.0)
    }

    fn source_from(&self, s: f64, delta: f64, tg: &TargetDerivs) -> (f64, f64) {
        let c = self.source_coeff() * delta.powf(-4.0 / 3.0);
        let z = s * s * tg.y_s.abs();
        let zc = z.cbrt();
        let f = c * z * zc;
        let tf = 8.0 / 3.0 * f + 4.0 / 3.0 * c * zc * tg.y_s.signum() * s * s * s * tg.y_ss;
        (f, tf)
    }

    /// Source f(S,t) = ½(3γ²S⁴σ³(y*_S)²/(2δ²))^{2/3} of the H₂ equation.
    pub fn source(&self, s: f64, t: f64) -> Result<f64> {
        let pt = self.point(s, t)?;
        Ok(self.source_from(s, pt.delta, &pt.tg).0)
    }

    /// The constant source of the unhedged side.
    pub fn plain_source(&self) -> f64 {
        let p = &self.params;
        0.5 * (1.5 / p.sigma).powf(2.0 / 3.0) * (p.mu - p.r).powf(4.0 / 3.0)
    }

    /// Closed-form H₂ for claims without cash gamma.
    pub fn h2_closed_form(&self, t: f64) -> f64 {
        (self.params.horizon - t) * self.plain_source()
    }

    /// H₂ through the heat-kernel quadrature regardless of claim type.
    pub fn h2_heat_kernel(&self, s: f64, t: f64) -> Result<H2Values> {
        self.check_point(s, t)?;
        let key = (s.to_bits(), t.to_bits());
        if let Some(v) = self.h2_cache.lock().expect("h2 cache poisoned").get(&key) {
            return Ok(*v);
        }
        let v = self.h2_heat_kernel_with(s, t, &self.controls)?;
        self.h2_cache.lock().expect("h2 cache poisoned").insert(key, v);
        Ok(v)
    }

    fn h2_heat_kernel_with(&self, s: f64, t: f64, ctl: &HeatControls) -> Result<H2Values> {
        let p = &self.params;
        let bad = std::sync::atomic::AtomicBool::new(false);
        let src = |x: f64, tv: f64| -> (f64, f64, f64) {
            match self.greeks(x, tv) {
                Ok(g) => {
                    let tg = self.target_from(x, tv, &g);
                    let (f, tf) = self.source_from(x, p.delta(tv), &tg);
                    (f, tf, tg.y_s)
                }
                Err(_) => {
                    bad.store(true, std::sync::atomic::Ordering::Relaxed);
                    (0.0, 0.0, 1.0)
                }
            }
        };
        let [i0, i1, i2] = heat::heat_integrals(p.sigma, p.r, p.horizon, s, t, ctl, src)?;
        if bad.load(std::sync::atomic::Ordering::Relaxed) {
            return Err(Error::Numeric(format!(
                "claim evaluation failed inside the H2 quadrature at S={s}, t={t}"
            )));
        }
        let pt = self.point(s, t)?;
        let f = self.source_from(s, pt.delta, &pt.tg).0;
        let s2_h2_ss = i2 - i1;
        Ok(H2Values {
            h2: i0,
            s_h2_s: i1,
            s2_h2_ss,
            h2_t: -p.r * i1 - 0.5 * p.sigma * p.sigma * s2_h2_ss - f,
        })
    }

    /// H₂ with S-derivatives; closed form when the side carries no cash gamma.
    pub fn h2_values(&self, s: f64, t: f64) -> Result<H2Values> {
        self.check_point(s, t)?;
        if self.side == Side::NoClaim || self.claim.is_gamma_free() {
            return Ok(H2Values {
                h2: self.h2_closed_form(t),
                s_h2_s: 0.0,
                s2_h2_ss: 0.0,
                h2_t: -self.plain_source(),
            });
        }
        self.h2_heat_kernel(s, t)
    }

    pub fn h2(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.h2_values(s, t)?.h2)
    }

    /// H̃₂(τ,x) = e^{½(k−1)x + ¼(k+1)²τ − kτ}·H₂(S,t) with x = ln S,
    /// τ = σ²(T−t)/2 and k = 2r/σ².
    pub fn h2_tilde(&self, s: f64, t: f64) -> Result<f64> {
        let p = &self.params;
        let sig2 = p.sigma * p.sigma;
        let tau = 0.5 * sig2 * (p.horizon - t);
        let k = 2.0 * p.r / sig2;
        let x = s.ln();
        Ok((0.5 * (k - 1.0) * x + 0.25 * (k + 1.0).powi(2) * tau - k * tau).exp() * self.h2(s, t)?)
    }

    /// S·H₂_S.
    pub fn h2_cash_slope(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.h2_values(s, t)?.s_h2_s)
    }

    /// M₁ = 4e^{rT}(μ−r)/σ² + 2.
    pub fn m1(&self) -> f64 {
        let p = &self.params;
        4.0 * (p.r * p.horizon).exp() * (p.mu - p.r) / (p.sigma * p.sigma) + 2.0
    }

    /// |σ²S²γY H₂_S/δ − σ²S y*_S H₄_Y + σ²S² y*_S H₄_YS| at (S, Y, t).
    fn m_integrand(&self, pt: &Point, h2: &H2Values, coeffs: &H4Coeffs, big_y: f64) -> f64 {
        let p = &self.params;
        let sig2 = p.sigma * p.sigma;
        let h = coeffs.eval(big_y);
        let s = pt.s;
        (sig2 * s * p.gamma * big_y * h2.s_h2_s / pt.delta - sig2 * s * pt.tg.y_s * h.y
            + sig2 * s * s * pt.tg.y_s * h.ys)
            .abs()
    }

    /// The constant M of H₃: padded sup of the first-order residual over a grid.
    pub fn m_constant(&self) -> Result<f64> {
        self.m_const
            .get_or_init(|| {
                let g = self.m_grid;
                let p = &self.params;
                let m_ctl = HeatControls {
                    rel_tol: 1e-7,
                    ..self.controls
                };
                let centre = self.claim.scale().ln();
                let half = 0.5 * g.decades * std::f64::consts::LN_10;
                let pts: Vec<(f64, f64)> = (0..g.n_s)
                    .flat_map(|i| {
                        let x = centre - half + 2.0 * half * i as f64 / (g.n_s - 1) as f64;
                        (0..g.n_t).map(move |l| (x.exp(), p.horizon * l as f64 / (g.n_t - 1) as f64))
                    })
                    .collect();
                let sups: Vec<Result<f64>> = pts
                    .par_iter()
                    .map(|&(s, t)| {
                        let pt = self.point(s, t)?;
                        let hw = match self.half_width_of(&pt) {
                            Ok(v) => v,
                            Err(Error::DegenerateBand { .. }) => return Ok(0.0),
                            Err(e) => return Err(e),
                        };
                        let h2 = if self.side == Side::NoClaim || self.claim.is_gamma_free() {
                            self.h2_values(s, t)?
                        } else {
                            self.h2_heat_kernel_with(s, t, &m_ctl)?
                        };
                        let coeffs = H4Coeffs::new(s, pt.delta, p.gamma, p.r, &pt.tg);
                        let mut m = 0.0f64;
                        for k in 0..g.n_y {
                            let u = -1.0 + 2.0 * k as f64 / (g.n_y - 1) as f64;
                            m = m.max(self.m_integrand(&pt, &h2, &coeffs, u * hw));
                        }
                        Ok(m)
                    })
                    .collect();
                let mut sup = 0.0f64;
                for v in sups {
                    sup = sup.max(v?);
                }
                Ok(g.padding * (sup + 1.0))
            })
            .clone()
    }

    /// H₃± = ∓M(T−t) ∓ M₁.
    pub fn h3(&self, t: f64, bound: Bound) -> Result<H3> {
        if !(0.0..=self.params.horizon).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, T]")));
        }
        let m = self.m_constant()?;
        let m1 = self.m1();
        Ok(H3 {
            value: -bound.sign() * (m * (self.params.horizon - t) + m1),
            m,
            m1,
        })
    }

    /// H₄ and partials at translated coordinate Y with |Y| ≤ Y^(j).
    pub fn h4_partials(&self, s: f64, big_y: f64, t: f64) -> Result<H4> {
        let pt = self.point(s, t)?;
        let hw = self.half_width_of(&pt)?;
        if big_y.abs() > hw * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "|Y| = {} exceeds the band half-width {hw}",
                big_y.abs()
            )));
        }
        let p = &self.params;
        Ok(H4Coeffs::new(s, pt.delta, p.gamma, p.r, &pt.tg).eval(big_y))
    }

    pub fn bundle(&self, s: f64, big_y: f64, t: f64) -> Result<ExpansionBundle> {
        let pt = self.point(s, t)?;
        let h4 = self.h4_partials(s, big_y, t)?;
        let h2 = self.h2_values(s, t)?;
        let plus = self.h3(t, Bound::Plus)?;
        let minus = self.h3(t, Bound::Minus)?;
        Ok(ExpansionBundle {
            h0: self.h0_of(&pt),
            h2: h2.h2,
            s_h2_s: h2.s_h2_s,
            h3_plus: plus.value,
            h3_minus: minus.value,
            m: plus.m,
            m1: plus.m1,
            h4,
        })
    }

    /// (H₃ value, H₃_t) for an optional bound.
    fn h3_terms(&self, t: f64, bound: Option<Bound>) -> Result<(f64, f64)> {
        match bound {
            None => Ok((0.0, 0.0)),
            Some(b) => {
                let h = self.h3(t, b)?;
                Ok((h.value, b.sign() * h.m))
            }
        }
    }

    /// ln Q inside the closed band at y (Y clamped to the band).
    fn log_q_band(&self, pt: &Point, hw: f64, y: f64, h2: &H2Values, h3: (f64, f64)) -> LogQ {
        let p = &self.params;
        let (s, d) = (pt.s, pt.delta);
        let eps = p.epsilon;
        let e3 = eps.cbrt();
        let e23 = e3 * e3;
        let e43 = eps * e3;
        let sig2 = p.sigma * p.sigma;
        let big_y = ((y - pt.tg.y) / e3).clamp(-hw, hw);
        let h = H4Coeffs::new(s, d, p.gamma, p.r, &pt.tg).eval(big_y);
        let ind = self.side.indicator();
        let g = &pt.greeks;
        let h0 = self.h0_of(pt);
        let h0_s = p.gamma * g.cash_delta / (s * d) * ind;
        let h0_ss = p.gamma * g.cash_gamma / (s * s * d) * ind;
        let h0_t = (p.mu - p.r).powi(2) / (2.0 * sig2) + ind * p.gamma * (g.theta - p.r * g.v0) / d;
        let (h2_s, h2_ss) = (h2.s_h2_s / s, h2.s2_h2_ss / (s * s));
        let tg = &pt.tg;
        LogQ {
            region: Region::NoTrade,
            phi: -p.gamma * s * y / d + h0 + e23 * h2.h2 + eps * h3.0 + e43 * h.h,
            phi_y: -p.gamma * s / d + eps * h.y,
            phi_yy: e23 * h.yy,
            phi_s: -p.gamma * y / d + h0_s + e23 * h2_s + e43 * h.s - eps * tg.y_s * h.y,
            phi_ys: -p.gamma / d + eps * h.ys - e23 * tg.y_s * h.yy,
            phi_ss: h0_ss + e23 * h2_ss + e43 * h.ss - 2.0 * eps * tg.y_s * h.ys - eps * tg.y_ss * h.y
                + e23 * tg.y_s * tg.y_s * h.yy,
            phi_t: p.r * p.gamma * s * y / d + h0_t + e23 * h2.h2_t + eps * h3.1 + e43 * h.t
                - eps * tg.y_t * h.y,
        }
    }

    /// Exponential extension from the band edge `edge` (buy: y⁻, sell: y⁺).
    fn log_q_outside(&self, pt: &Point, hw: f64, y: f64, region: Region, h2: &H2Values, h3: (f64, f64)) -> LogQ {
        let p = &self.params;
        let (s, d) = (pt.s, pt.delta);
        let e3 = p.epsilon.cbrt();
        let tg = &pt.tg;
        let (side, cost) = match region {
            Region::Buy => (-1.0, 1.0 + p.epsilon),
            _ => (1.0, 1.0 - p.epsilon),
        };
        // derivatives of ln Y^(j)
        let rho = tg.y_ss / tg.y_s;
        let rho_s = tg.y_sss / tg.y_s - rho * rho;
        let ly_s = (1.0 / s + 2.0 * rho) / 3.0;
        let ly_ss = (-1.0 / (s * s) + 2.0 * rho_s) / 3.0;
        let ly_t = (p.r + 2.0 * tg.y_st / tg.y_s) / 3.0;
        let hw_s = hw * ly_s;
        let hw_ss = hw * (ly_ss + ly_s * ly_s);
        let hw_t = hw * ly_t;
        let b = tg.y + side * e3 * hw;
        let b_s = tg.y_s + side * e3 * hw_s;
        let b_ss = tg.y_ss + side * e3 * hw_ss;
        let b_t = tg.y_t + side * e3 * hw_t;
        let inner = self.log_q_band(pt, hw, b, h2, h3);
        let a = p.gamma * cost * s / d;
        let a_s = a / s;
        let a_t = -p.r * a;
        let dy = y - b;
        LogQ {
            region,
            phi: -a * dy + inner.phi,
            phi_y: -a,
            phi_yy: 0.0,
            phi_ys: -a_s,
            phi_s: -a_s * dy + a * b_s + inner.phi_s + inner.phi_y * b_s,
            phi_ss: 2.0 * a_s * b_s
                + a * b_ss
                + inner.phi_ss
                + 2.0 * inner.phi_ys * b_s
                + inner.phi_yy * b_s * b_s
                + inner.phi_y * b_ss,
            phi_t: -a_t * dy + a * b_t + inner.phi_t + inner.phi_y * b_t,
        }
    }

    fn log_q_frictionless(&self, pt: &Point, y: f64) -> LogQ {
        let p = &self.params;
        let (s, d) = (pt.s, pt.delta);
        let ind = self.side.indicator();
        let g = &pt.greeks;
        let sig2 = p.sigma * p.sigma;
        let region = if y < pt.tg.y {
            Region::Buy
        } else if y > pt.tg.y {
            Region::Sell
        } else {
            Region::NoTrade
        };
        LogQ {
            region,
            phi: -p.gamma * s * y / d + self.h0_of(pt),
            phi_y: -p.gamma * s / d,
            phi_yy: 0.0,
            phi_s: -p.gamma * y / d + p.gamma * g.cash_delta / (s * d) * ind,
            phi_ys: -p.gamma / d,
            phi_ss: p.gamma * g.cash_gamma / (s * s * d) * ind,
            phi_t: p.r * p.gamma * s * y / d
                + (p.mu - p.r).powi(2) / (2.0 * sig2)
                + ind * p.gamma * (g.theta - p.r * g.v0) / d,
        }
    }

    /// ln Q and partials; `bound = None` drops the H₃ term.
    pub fn log_q(&self, s: f64, y: f64, t: f64, bound: Option<Bound>) -> Result<LogQ> {
        let pt = self.point(s, t)?;
        if self.params.epsilon == 0.0 {
            return Ok(self.log_q_frictionless(&pt, y));
        }
        let band = self.band_of(&pt)?;
        let h2 = self.h2_values(s, t)?;
        let h3 = self.h3_terms(t, bound)?;
        Ok(match band.region(y) {
            Region::NoTrade => self.log_q_band(&pt, band.half_width, y, &h2, h3),
            r => self.log_q_outside(&pt, band.half_width, y, r, &h2, h3),
        })
    }

    /// ln Q from the band-interior formula evaluated at an edge of the band.
    pub fn log_q_band_edge(&self, s: f64, t: f64, edge: Region, bound: Option<Bound>) -> Result<LogQ> {
        let pt = self.point(s, t)?;
        let band = self.band_of(&pt)?;
        let h2 = self.h2_values(s, t)?;
        let h3 = self.h3_terms(t, bound)?;
        let y = match edge {
            Region::Buy => band.y_minus,
            Region::Sell => band.y_plus,
            Region::NoTrade => band.y_star,
        };
        Ok(self.log_q_band(&pt, band.half_width, y, &h2, h3))
    }

    /// ln Q from the extension formula evaluated at an edge of the band.
    pub fn log_q_extension_edge(&self, s: f64, t: f64, edge: Region, bound: Option<Bound>) -> Result<LogQ> {
        let pt = self.point(s, t)?;
        let band = self.band_of(&pt)?;
        let h2 = self.h2_values(s, t)?;
        let h3 = self.h3_terms(t, bound)?;
        let y = match edge {
            Region::Buy => band.y_minus,
            _ => band.y_plus,
        };
        let region = if edge == Region::Buy { Region::Buy } else { Region::Sell };
        Ok(self.log_q_outside(&pt, band.half_width, y, region, &h2, h3))
    }

    /// Q± at (S,y,t).
    pub fn q_pm(&self, s: f64, y: f64, t: f64, bound: Bound) -> Result<f64> {
        Ok(self.log_q(s, y, t, Some(bound))?.phi.exp())
    }

    /// 𝓓Q/Q = φ_t + μSφ_S + ½σ²S²(φ_SS + φ_S²).
    pub fn generator_ratio(&self, s: f64, lq: &LogQ) -> f64 {
        let p = &self.params;
        lq.phi_t + p.mu * s * lq.phi_s + 0.5 * p.sigma * p.sigma * s * s * (lq.phi_ss + lq.phi_s * lq.phi_s)
    }

    /// V ≈ −e^{−γB/δ} exp{−γSy/δ + H₀ + ε^{2/3}H₂} and its certainty equivalent.
    pub fn value_function(&self, t: f64, b: f64, y: f64, s: f64) -> Result<ValueEstimate> {
        let pt = self.point(s, t)?;
        let p = &self.params;
        let h2 = if p.epsilon == 0.0 { 0.0 } else { self.h2(s, t)? };
        let log_neg_v = -p.gamma * (b + s * y) / pt.delta + self.h0_of(&pt) + p.epsilon.powf(2.0 / 3.0) * h2;
        Ok(ValueEstimate {
            value: -log_neg_v.exp(),
            certainty_equivalent: -pt.delta / p.gamma * log_neg_v,
            error_order: "O(epsilon)",
        })
    }
}

/// V₀ + (δ/γ)ε^{2/3}(H₂^(w) − H₂^(1)).
pub fn indifference_price(p: &MarketParams, c: &ClaimSpec, s: f64, t: f64) -> Result<PriceBreakdown> {
    let w = Expansion::new(p, c, Side::WithClaim)?;
    let v0 = w.greeks(s, t)?.v0;
    w.check_point(s, t)?;
    if p.epsilon == 0.0 {
        return Ok(PriceBreakdown {
            price: v0,
            v0,
            correction: 0.0,
            h2_claim: f64::NAN,
            h2_plain: f64::NAN,
            error_order: "exact",
        });
    }
    let one = Expansion::new(p, c, Side::NoClaim)?;
    let (hw, h1) = (w.h2(s, t)?, one.h2(s, t)?);
    let correction = p.delta(t) / p.gamma * p.epsilon.powf(2.0 / 3.0) * (hw - h1);
    Ok(PriceBreakdown {
        price: v0 + correction,
        v0,
        correction,
        h2_claim: hw,
        h2_plain: h1,
        error_order: "O(epsilon)",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(eps: f64) -> Expansion {
        Expansion::new(&MarketParams::reference(eps), &ClaimSpec::none(), Side::NoClaim).unwrap()
    }

    #[test]
    fn target_reference() {
        assert!((plain(0.01).y_star(1.0, 0.0).unwrap() - 0.05).abs() < 1e-16);
        let lin = Expansion::new(&MarketParams::reference(0.01), &ClaimSpec::linear(0.5).unwrap(), Side::WithClaim).unwrap();
        assert!((lin.y_star(1.0, 0.0).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn band_reference() {
        let b = plain(1e-3).band(1.0, 0.0).unwrap();
        assert!((b.half_width - 0.00375f64.cbrt()).abs() < 1e-15);
        assert!((b.half_width - 0.155_362).abs() < 1e-6);
        assert!((b.y_minus - 0.034_463_8).abs() < 1e-7);
        assert!((b.y_plus - 0.065_536_2).abs() < 1e-7);
    }

    #[test]
    fn h2_closed_form_reference() {
        let v = plain(0.01).h2(1.0, 0.0).unwrap();
        let expect = (3.0 / (2.0 * 2f64.sqrt())).powf(2.0 / 3.0) * 0.1f64.powf(4.0 / 3.0) / 2.0;
        assert_eq!(v, expect);
        assert!((v - 0.024_137_2).abs() < 5e-8);
    }

    #[test]
    fn h4_edge_value() {
        let e = plain(0.01);
        let b = e.band(1.0, 0.0).unwrap();
        let h = e.h4_partials(1.0, b.half_width, 0.0).unwrap();
        let expect = 5.0 / 12.0 * (0.1125f64).powf(2.0 / 3.0);
        assert!((h.h - expect).abs() < 1e-14);
        assert!((h.h - 0.625 * b.half_width).abs() < 1e-15);
        assert!((h.y - 1.0).abs() < 1e-13);
        assert!(h.yy.abs() < 1e-13);
        assert!((h.ys - 1.0).abs() < 1e-13);
        assert!(e.h4_partials(1.0, 1.01 * b.half_width, 0.0).is_err());
    }

    #[test]
    fn m1_reference() {
        assert!((plain(0.01).m1() - 2.2).abs() < 1e-15);
    }

    #[test]
    fn m_constant_unhedged_closed_form() {
        // residual is 1.5(μ−r)|u − u³| on u = Y/Y^(1), whose sup is 2/(3√3)
        let sup = 1.5 * 0.1 * 2.0 / (3.0 * 3f64.sqrt());
        let m = plain(1e-3).m_constant().unwrap();
        assert!((m / (1.1 * (sup + 1.0)) - 1.0).abs() < 1e-3, "{m}");
    }

    fn call(eps: f64, dt: f64) -> Expansion {
        Expansion::new(&MarketParams::reference(eps), &ClaimSpec::mollified_call(1.0, dt).unwrap(), Side::WithClaim).unwrap()
    }

    #[test]
    fn heat_path_reproduces_constant_source() {
        let e = plain(1e-3);
        for &t in &[0.0, 0.4, 0.9] {
            let hk = e.h2_heat_kernel(1.3, t).unwrap();
            assert!((hk.h2 / e.h2_closed_form(t) - 1.0).abs() < 1e-6);
            assert!(hk.s_h2_s.abs() < 1e-12);
        }
    }

    #[test]
    fn cash_slope_matches_differences() {
        let e = call(1e-3, 1.0);
        for &(s, t) in &[(0.8, 0.0), (1.0, 0.3), (1.6, 0.6)] {
            let d = |h: f64| (e.h2(s * (1.0 + h), t).unwrap() - e.h2(s * (1.0 - h), t).unwrap()) / (2.0 * h);
            let fd = (4.0 * d(5e-4) - d(1e-3)) / 3.0;
            let an = e.h2_cash_slope(s, t).unwrap();
            assert!((fd - an).abs() < 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn h2_solves_its_pde() {
        // H₂_t + rSH₂_S + ½σ²S²H₂_SS = −f by differences of H₂ alone
        let e = call(1e-3, 1.0);
        let p = *e.params();
        for &(s, t) in &[(0.9, 0.2), (1.4, 0.5)] {
            let (hs, ht) = (1e-3 * s, 1e-3);
            let h = |s: f64, t: f64| e.h2(s, t).unwrap();
            let h0 = h(s, t);
            let h_s = (h(s + hs, t) - h(s - hs, t)) / (2.0 * hs);
            let h_ss = (h(s + hs, t) - 2.0 * h0 + h(s - hs, t)) / (hs * hs);
            let h_t = (h(s, t + ht) - h(s, t - ht)) / (2.0 * ht);
            let f = e.source(s, t).unwrap();
            let res = h_t + p.r * s * h_s + 0.5 * p.sigma * p.sigma * s * s * h_ss + f;
            assert!(res.abs() < 1e-4 * f, "residual {res} vs source {f}");
        }
    }

    #[test]
    fn h2_tilde_grows_as_mollification_shrinks() {
        let vals: Vec<f64> = [0.1, 0.5, 1.0].iter().map(|&dt| call(1e-3, dt).h2_tilde(1.0, 0.0).unwrap()).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2] && vals[2] > 0.0);
        // r = 0, x = 0: H̃₂ = e^{τ/4}H₂ with τ = 1
        let e = call(1e-3, 1.0);
        assert!((e.h2_tilde(1.0, 0.0).unwrap() - 0.25f64.exp() * e.h2(1.0, 0.0).unwrap()).abs() < 1e-15);
    }
}
