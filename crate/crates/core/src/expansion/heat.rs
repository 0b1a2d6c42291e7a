//! Nested quadrature for the second-order correction H₂ of the hedged side.
//!
//! With x = ln S, τ = σ²(T−t)/2 and k = 2r/σ², H₂ solves a heat equation in
//! (τ, x) with source f. Writing the kernel convolution as a Gaussian
//! expectation and measuring elapsed heat-time v = τ − s from the query,
//!
//! ```text
//! H₂(S,t)     = (2/σ²) ∫₀^τ E[ f(S e^{(k−1)v + √(2v)ξ}, t + 2v/σ²) ] dv
//! S·H₂_S      = same with f → S f_S
//! (S∂_S)² H₂  = (2/σ²) ∫₀^τ E[ S f_S(·) ξ ] / √(2v) dv
//! ```
//!
//! The outer integral is taken in w with v = τw⁶ (so kinks of the source
//! passing through S give integrands polynomial in w) on composite
//! Gauss-Legendre panels, doubled until the three integrals settle. The source may have a
//! |·|^{4/3} kink where y*_S changes sign, so the inner expectation is split at
//! the sign changes of a caller-supplied indicator and integrated with
//! Gauss-Legendre panels against the normal density, graded towards each
//! kink r. The two panels touching r use ξ = r ± d·w³, which turns
//! |ξ − r|^{1/3} and |ξ − r|^{4/3} into polynomials in w.

use crate::error::{Error, Result};
use crate::bs_engine::norm_pdf;
use crate::quad::unit_rule;

/// H₂ and its S-derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct H2Values {
    pub h2: f64,
    /// S·H₂_S
    pub s_h2_s: f64,
    /// S²·H₂_SS
    pub s2_h2_ss: f64,
    /// H₂_t, recovered from the PDE.
    pub h2_t: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HeatControls {
    /// Half-width of the truncated normal range in ξ.
    pub xi_range: f64,
    /// Width in ξ of the inner panels away from kinks.
    pub base_width: f64,
    pub legendre_nodes: usize,
    /// Panels next to a kink are graded down to 2^{−grading} wide.
    pub grading: usize,
    pub min_panels: usize,
    pub max_panels: usize,
    pub rel_tol: f64,
}

impl Default for HeatControls {
    fn default() -> Self {
        HeatControls {
            xi_range: 9.0,
            base_width: 1.0,
            legendre_nodes: 8,
            grading: 8,
            min_panels: 4,
            max_panels: 256,
            rel_tol: 1e-8,
        }
    }
}

/// Integrals [∫E[f], ∫E[θf], ∫E[θf ξ]/√(2v)] scaled by 2/σ², where
/// `source(S, t)` returns (f, S f_S, kink indicator).
pub(crate) fn heat_integrals<F>(
    sigma: f64,
    r: f64,
    horizon: f64,
    s: f64,
    t: f64,
    ctl: &HeatControls,
    source: F,
) -> Result<[f64; 3]>
where
    F: Fn(f64, f64) -> (f64, f64, f64),
{
    let sig2 = sigma * sigma;
    let tau = 0.5 * sig2 * (horizon - t);
    if tau <= 0.0 {
        return Ok([0.0; 3]);
    }
    let k = 2.0 * r / sig2;
    let gl = unit_rule(ctl.legendre_nodes);
    let umax = tau.sqrt();

    // Σ w φ(ξ)·[f, θf, θf ξ] over [a, b]
    let panel = |a: f64, b: f64, sv: f64, m: f64, c: f64, tv: f64, e: &mut [f64; 3]| {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (&z, &w) in gl.nodes.iter().zip(&gl.weights) {
            let xi = mid + half * z;
            let (f, tf, _) = source(sv * (m + c * xi).exp(), tv);
            let wd = half * w * norm_pdf(xi);
            e[0] += wd * f;
            e[1] += wd * tf;
            e[2] += wd * tf * xi;
        }
    };

    // panel from a kink r to r + d with ξ = r + d·w³, w ∈ [0, 1]
    let kink_panel = |r: f64, d: f64, sv: f64, m: f64, c: f64, tv: f64, e: &mut [f64; 3]| {
        for (&z, &w) in gl.nodes.iter().zip(&gl.weights) {
            let x = 0.5 * (z + 1.0);
            let xi = r + d * x * x * x;
            let (f, tf, _) = source(sv * (m + c * xi).exp(), tv);
            let wd = 0.5 * w * 3.0 * d.abs() * x * x * norm_pdf(xi);
            e[0] += wd * f;
            e[1] += wd * tf;
            e[2] += wd * tf * xi;
        }
    };

    // integrand values at u for the three integrals (before the 2/σ² factor)
    let at = |u: f64| -> [f64; 3] {
        let v = u * u;
        let tv = (t + 2.0 * v / sig2).min(horizon);
        let c = (2.0 * v).sqrt();
        let m = (k - 1.0) * v;
        let key = |xi: f64| source(s * (m + c * xi).exp(), tv).2;
        let l = ctl.xi_range;
        let n_base = (2.0 * l / ctl.base_width).ceil() as usize;
        let base: Vec<f64> = (0..=n_base).map(|i| -l + 2.0 * l * i as f64 / n_base as f64).collect();
        let keys: Vec<f64> = base.iter().map(|&xi| key(xi)).collect();
        let mut roots = Vec::new();
        for i in 0..n_base {
            if keys[i] * keys[i + 1] < 0.0 {
                let (mut lo, mut hi) = (base[i], base[i + 1]);
                let neg_lo = keys[i] < 0.0;
                while hi - lo > 1e-14 * (1.0 + lo.abs()) {
                    let mid = 0.5 * (lo + hi);
                    if (key(mid) < 0.0) == neg_lo {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
        }
        let mut pts: Vec<f64> = base.iter().chain(&roots).copied().collect();
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        // bisect until each panel is no wider than its distance to a kink;
        // the innermost panels use the cubic map
        let min_width = (2.0f64).powi(-(ctl.grading as i32));
        let is_root = |x: f64| roots.contains(&x);
        let mut e = [0.0; 3];
        let mut stack: Vec<(f64, f64)> = pts.windows(2).rev().map(|w| (w[0], w[1])).collect();
        while let Some((a, b)) = stack.pop() {
            let d = roots
                .iter()
                .map(|&r| if r < a { a - r } else if r > b { r - b } else { 0.0 })
                .fold(f64::INFINITY, f64::min);
            if b - a <= d {
                panel(a, b, s, m, c, tv, &mut e);
            } else if b - a < min_width && !(is_root(a) && is_root(b)) {
                if is_root(a) {
                    kink_panel(a, b - a, s, m, c, tv, &mut e);
                } else if is_root(b) {
                    kink_panel(b, a - b, s, m, c, tv, &mut e);
                } else {
                    panel(a, b, s, m, c, tv, &mut e);
                }
            } else {
                let mid = 0.5 * (a + b);
                stack.push((mid, b));
                stack.push((a, mid));
            }
        }
        [2.0 * u * e[0], 2.0 * u * e[1], std::f64::consts::SQRT_2 * e[2]]
    };

    let composite = |panels: usize| -> [f64; 3] {
        let h = 1.0 / panels as f64;
        let mut acc = [0.0; 3];
        for p in 0..panels {
            let mid = h * (p as f64 + 0.5);
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let z = mid + 0.5 * h * x;
                // u = √τ z³, du = 3√τ z² dz
                let vals = at(umax * z * z * z);
                let jac = 3.0 * umax * z * z;
                for i in 0..3 {
                    acc[i] += 0.5 * h * w * jac * vals[i];
                }
            }
        }
        acc
    };

    let mut panels = ctl.min_panels;
    let mut prev = composite(panels);
    loop {
        panels *= 2;
        let next = composite(panels);
        let scale = next.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        let change = (0..3).map(|i| (next[i] - prev[i]).abs()).fold(0.0f64, f64::max) / scale;
        if change <= ctl.rel_tol {
            let f = 2.0 / sig2;
            return Ok([f * next[0], f * next[1], f * next[2]]);
        }
        if panels >= ctl.max_panels {
            return Err(Error::Quadrature {
                estimate: 2.0 / sig2 * next[0],
                change,
            });
        }
        prev = next;
    }
}
