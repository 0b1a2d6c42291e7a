//! Grid checks of the properties that make Q⁺ a subsolution and Q⁻ a
//! supersolution: generator signs, gradient constraints, final-time ordering
//! and C¹/C² pasting across the band edges.

use crate::error::{Error, Result};
use crate::expansion::{Bound, Expansion, LogQ, Region};
use crate::market_model::{cash_value, ClaimSpec, MarketParams, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub grid: String,
    pub worst: f64,
    /// (S, y, t) of the worst value.
    pub location: [f64; 3],
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, grid: String, worst: (f64, [f64; 3]), tolerance: f64, detail: String) -> Self {
        CheckReport {
            name: name.to_string(),
            grid,
            worst: worst.0,
            location: worst.1,
            tolerance,
            passed: worst.0 <= tolerance,
            detail,
        }
    }
}

impl CheckReport {
    pub const CSV_HEADER: &'static str = "check,grid,worst,s,y,t,tolerance,passed,detail";

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.grid.clone(),
            format!("{:.16e}", self.worst),
            format!("{:.16e}", self.location[0]),
            format!("{:.16e}", self.location[1]),
            format!("{:.16e}", self.location[2]),
            format!("{:.16e}", self.tolerance),
            self.passed.to_string(),
            self.detail.clone(),
        ]
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<4} {:<24} worst {:+.3e} (tol {:.0e}) at S={:.4}, y={:.4}, t={:.4}  [{}]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.location[0],
            self.location[1],
            self.location[2],
            self.detail
        )
    }
}

/// (S, u, t) lattice over the band: S log-spaced in the window, u = Y/Y^(j).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyGrid {
    pub n_s: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub window: (f64, f64),
}

impl VerifyGrid {
    /// 32 × 32 × 9 over [K/2, 2K].
    pub fn standard(c: &ClaimSpec) -> Self {
        let k = c.scale();
        VerifyGrid {
            n_s: 32,
            n_y: 32,
            n_t: 9,
            window: (0.5 * k, 2.0 * k),
        }
    }

    fn describe(&self, what: &str) -> String {
        format!(
            "{}x{}x{} {what}, S in [{}, {}]",
            self.n_s, self.n_y, self.n_t, self.window.0, self.window.1
        )
    }

    fn s_nodes(&self) -> Vec<f64> {
        let (a, b) = (self.window.0.ln(), self.window.1.ln());
        (0..self.n_s)
            .map(|i| (a + (b - a) * i as f64 / (self.n_s.max(2) - 1) as f64).exp())
            .collect()
    }

    fn t_nodes(&self, horizon: f64) -> Vec<f64> {
        (0..self.n_t)
            .map(|l| horizon * l as f64 / (self.n_t.max(2) - 1) as f64)
            .collect()
    }

    fn u_nodes(&self) -> Vec<f64> {
        (0..self.n_y)
            .map(|k| -1.0 + 2.0 * k as f64 / (self.n_y.max(2) - 1) as f64)
            .collect()
    }
}

/// Points (S, y, t) of the grid placed in `region`: the band itself, or a strip
/// of width 3ε^{1/3}Y^(j) beyond the buy or sell edge.
fn region_points(e: &Expansion, grid: &VerifyGrid, region: Region) -> Result<Vec<[f64; 3]>> {
    let e3 = e.params().epsilon.cbrt();
    let mut pts = Vec::with_capacity(grid.n_s * grid.n_y * grid.n_t);
    for &t in &grid.t_nodes(e.params().horizon) {
        for &s in &grid.s_nodes() {
            let b = e.band(s, t)?;
            for (k, &u) in grid.u_nodes().iter().enumerate() {
                let d = 3.0 * e3 * b.half_width * (k + 1) as f64 / grid.n_y as f64;
                let y = match region {
                    Region::NoTrade => (b.y_star + e3 * u * b.half_width).clamp(b.y_minus, b.y_plus),
                    Region::Buy => b.y_minus - d,
                    Region::Sell => b.y_plus + d,
                };
                pts.push([s, y, t]);
            }
        }
    }
    Ok(pts)
}

fn worst_of(vals: impl Iterator<Item = (f64, [f64; 3])>) -> (f64, [f64; 3]) {
    vals.fold((f64::NEG_INFINITY, [f64::NAN; 3]), |a, b| if b.0 > a.0 { b } else { a })
}

/// Derivative of `f` at `x` by second-order differences whose stencil stays
/// inside the region of the base point and within [lo, hi].
fn stencil_diff<F>(f: F, x: f64, h: f64, lo: f64, hi: f64) -> Result<(LogQ, LogQ, LogQ, f64, i8)>
where
    F: Fn(f64) -> Result<LogQ>,
{
    let f0 = f(x)?;
    if x - h >= lo && x + h <= hi {
        let (fp, fm) = (f(x + h)?, f(x - h)?);
        if fp.region == f0.region && fm.region == f0.region {
            return Ok((f0, fp, fm, h, 0));
        }
    }
    if x + 2.0 * h <= hi {
        let (f1, f2) = (f(x + h)?, f(x + 2.0 * h)?);
        if f1.region == f0.region && f2.region == f0.region || x - h < lo {
            return Ok((f0, f1, f2, h, 1));
        }
    }
    Ok((f0, f(x - h)?, f(x - 2.0 * h)?, h, -1))
}

fn first_diff(d: &(LogQ, LogQ, LogQ, f64, i8), g: impl Fn(&LogQ) -> f64) -> f64 {
    let (f0, f1, f2, h, kind) = d;
    match kind {
        0 => (g(f1) - g(f2)) / (2.0 * h),
        1 => (-3.0 * g(f0) + 4.0 * g(f1) - g(f2)) / (2.0 * h),
        _ => (3.0 * g(f0) - 4.0 * g(f1) + g(f2)) / (2.0 * h),
    }
}

/// Largest relative mismatch between analytic partials of ln Q and
/// differences (relative step `h`) at `pt`.
pub fn partials_mismatch(e: &Expansion, pt: [f64; 3], bound: Option<Bound>, h: f64) -> Result<f64> {
    Ok(partial_errors(e, pt, bound, h)?.into_iter().fold(0.0, f64::max))
}

/// Relative mismatches of (φ_S, φ_SS, φ_y, φ_yy, φ_yS, φ_t) at `pt`.
pub fn partial_errors(e: &Expansion, pt: [f64; 3], bound: Option<Bound>, h: f64) -> Result<[f64; 6]> {
    let [s, y, t] = pt;
    let big_t = e.params().horizon;
    // y varies on the scale of the band width
    let hy = h * e.params().epsilon.cbrt() * e.band(s, t)?.half_width;
    let ds = stencil_diff(|x| e.log_q(x, y, t, bound), s, h * s, 0.0, f64::INFINITY)?;
    let dy = stencil_diff(|x| e.log_q(s, x, t, bound), y, hy, f64::NEG_INFINITY, f64::INFINITY)?;
    let dt = stencil_diff(|x| e.log_q(s, y, x, bound), t, h * big_t, 0.0, big_t)?;
    let a = ds.0;
    let num = [
        first_diff(&ds, |q| q.phi),
        first_diff(&ds, |q| q.phi_s),
        first_diff(&dy, |q| q.phi),
        first_diff(&dy, |q| q.phi_y),
        first_diff(&ds, |q| q.phi_y),
        first_diff(&dt, |q| q.phi),
    ];
    let ana = [a.phi_s, a.phi_ss, a.phi_y, a.phi_yy, a.phi_ys, a.phi_t];
    // each partial is compared on the scale of its leading-order size
    let gs = e.params().gamma * s / e.params().delta(t);
    let scale = [gs.max(1.0) / s, gs / (s * s), gs, gs * gs, gs / s, 1.0];
    Ok(std::array::from_fn(|i| {
        (num[i] - ana[i]).abs() / ana[i].abs().max(num[i].abs()).max(1e-3 * scale[i])
    }))
}

/// Analytic partials against finite differences on a subsample of `pts`.
fn cross_check(e: &Expansion, pts: &[[f64; 3]], bound: Option<Bound>) -> Result<(f64, [f64; 3])> {
    let step = (pts.len() / 64).max(1);
    let sample: Vec<[f64; 3]> = pts.iter().step_by(step).copied().collect();
    let vals: Vec<Result<(f64, [f64; 3])>> = sample
        .par_iter()
        .map(|&pt| partials_mismatch(e, pt, bound, 1e-5).map(|m| (m, pt)))
        .collect();
    let mut worst = (0.0f64, [f64::NAN; 3]);
    for v in vals {
        let v = v?;
        if v.0 > worst.0 {
            worst = v;
        }
    }
    Ok(worst)
}

const CROSS_CHECK_TOL: f64 = 1e-5;

fn ratios(e: &Expansion, pts: &[[f64; 3]], bound: Option<Bound>) -> Result<Vec<(f64, [f64; 3])>> {
    pts.par_iter()
        .map(|&[s, y, t]| {
            let lq: LogQ = e.log_q(s, y, t, bound)?;
            Ok((e.generator_ratio(s, &lq), [s, y, t]))
        })
        .collect()
}

/// Sign of 𝓓Q±/Q± on `region`: Q⁺ needs ≥ −tol, Q⁻ needs ≤ tol.
pub fn verify_pde_sign(e: &Expansion, grid: &VerifyGrid, bound: Bound, region: Region) -> Result<CheckReport> {
    let pts = region_points(e, grid, region)?;
    let (mismatch, at) = cross_check(e, &pts, Some(bound))?;
    if mismatch > CROSS_CHECK_TOL {
        return Err(Error::Consistency(format!(
            "analytic and finite-difference partials differ by {mismatch:.3e} at S={}, y={}, t={}",
            at[0], at[1], at[2]
        )));
    }
    let vals = ratios(e, &pts, Some(bound))?;
    let sgn = bound.sign();
    let worst = worst_of(vals.iter().map(|&(r, p)| (-sgn * r, p)));
    let tol = 1e-8;
    let name = format!("pde_sign_{}_{}", bound_tag(bound), region_tag(region));
    Ok(CheckReport::new(
        &name,
        grid.describe(region_label(region)),
        worst,
        tol,
        format!(
            "{} DQ/Q = {:.4e} over {} points; partials cross-check {mismatch:.2e}",
            if sgn > 0.0 { "min" } else { "max" },
            -sgn * worst.0,
            vals.len()
        ),
    ))
}

fn bound_tag(b: Bound) -> &'static str {
    match b {
        Bound::Plus => "plus",
        Bound::Minus => "minus",
    }
}

fn region_tag(r: Region) -> &'static str {
    match r {
        Region::NoTrade => "nt",
        Region::Buy => "buy",
        Region::Sell => "sell",
    }
}

fn region_label(r: Region) -> &'static str {
    match r {
        Region::NoTrade => "no-trade",
        Region::Buy => "buy strip",
        Region::Sell => "sell strip",
    }
}

/// Ratio of the worst |𝓓Q/Q| without the H₃ term at ε and at ε/8; O(ε)
/// cancellation makes it close to 8.
pub fn verify_epsilon_scaling(e: &Expansion, grid: &VerifyGrid) -> Result<CheckReport> {
    let eps = e.params().epsilon;
    let small = e.with_epsilon(eps / 8.0)?;
    let big = worst_of(ratios(e, &region_points(e, grid, Region::NoTrade)?, None)?.into_iter().map(|(r, p)| (r.abs(), p)));
    let little = worst_of(
        ratios(&small, &region_points(&small, grid, Region::NoTrade)?, None)?
            .into_iter()
            .map(|(r, p)| (r.abs(), p)),
    );
    let factor = big.0 / little.0;
    Ok(CheckReport {
        name: "epsilon_scaling".into(),
        grid: grid.describe("no-trade"),
        worst: factor,
        location: big.1,
        tolerance: 6.0,
        passed: factor >= 6.0,
        detail: format!("max|DQ/Q| = {:.4e} at eps, {:.4e} at eps/8", big.0, little.0),
    })
}

/// Gradient slacks (Q_y + γ(1+ε)SQ/δ)/Q and (−Q_y − γ(1−ε)SQ/δ)/Q: both ≥ 0 in
/// the band; the binding one vanishes outside and the other stays ≥ 0.
pub fn verify_gradient_constraints(e: &Expansion, grid: &VerifyGrid, bound: Bound, region: Region) -> Result<CheckReport> {
    let p = *e.params();
    let pts = region_points(e, grid, region)?;
    let vals: Vec<Result<(f64, [f64; 3])>> = pts
        .par_iter()
        .map(|&[s, y, t]| {
            let lq = e.log_q(s, y, t, Some(bound))?;
            let g = p.gamma * s / p.delta(t);
            let buy = lq.phi_y + (1.0 + p.epsilon) * g;
            let sell = -lq.phi_y - (1.0 - p.epsilon) * g;
            // normalised by γS/δ
            let v = match region {
                Region::NoTrade => (-buy).max(-sell),
                Region::Buy => buy.abs().max(-sell),
                Region::Sell => sell.abs().max(-buy),
            } / g;
            Ok((v, [s, y, t]))
        })
        .collect();
    let vals: Vec<(f64, [f64; 3])> = vals.into_iter().collect::<Result<_>>()?;
    let worst = worst_of(vals.iter().copied());
    let name = format!("gradient_{}_{}", bound_tag(bound), region_tag(region));
    Ok(CheckReport::new(
        &name,
        grid.describe(region_label(region)),
        worst,
        1e-12,
        "slack/(gamma S/delta): negative slack or nonzero binding slack".into(),
    ))
}

/// ln Q(S,y,T) of the physically settled final condition.
pub fn final_log_q(p: &MarketParams, c: &ClaimSpec, j: Side, s: f64, y: f64) -> Result<f64> {
    Ok(match j {
        Side::NoClaim => -p.gamma * cash_value(y, s, p.epsilon),
        Side::WithClaim => {
            let d = c.derivatives(p, s)?;
            -p.gamma * (cash_value(y - d[1], s, p.epsilon) - (d[0] - d[1] * s))
        }
    })
}

/// Q⁺(·,T) ≤ Q(·,T) ≤ Q⁻(·,T) over the band, both strips, and y = g′(S).
pub fn verify_final_time(e: &Expansion, grid: &VerifyGrid) -> Result<CheckReport> {
    let p = *e.params();
    let big_t = p.horizon;
    let g1 = VerifyGrid { n_t: 1, ..*grid };
    let mut pts: Vec<[f64; 3]> = Vec::new();
    for r in [Region::Buy, Region::NoTrade, Region::Sell] {
        pts.extend(region_points(e, &g1, r)?.into_iter().map(|[s, y, _]| [s, y, big_t]));
    }
    if e.side() == Side::WithClaim {
        for &s in &grid.s_nodes() {
            pts.push([s, e.claim().derivatives(&p, s)?[1], big_t]);
        }
    }
    let mut worst = (f64::NEG_INFINITY, [f64::NAN; 3]);
    let mut margin = f64::INFINITY;
    let mut first_fail: Option<[f64; 3]> = None;
    for &[s, y, t] in &pts {
        let lq = final_log_q(&p, e.claim(), e.side(), s, y)?;
        let lp = e.log_q(s, y, t, Some(Bound::Plus))?.phi;
        let lm = e.log_q(s, y, t, Some(Bound::Minus))?.phi;
        let v = (lp - lq).max(lq - lm);
        margin = margin.min((lq - lp).min(lm - lq));
        if v > 1e-12 * lq.abs().max(1.0) && first_fail.is_none() {
            first_fail = Some([s, y, t]);
        }
        if v > worst.0 {
            worst = (v, [s, y, t]);
        }
    }
    let mut r = CheckReport::new(
        "final_time",
        format!("{} points at t = T (band, strips, y = g'(S))", pts.len()),
        worst,
        1e-12,
        format!("min log-margin {margin:.4e}; eps*M1/2 = {:.4e}", p.epsilon * e.m1() / 2.0),
    );
    if let Some(at) = first_fail {
        r.detail = format!(
            "epsilon not small enough: first failure at S={}, y={}; {}",
            at[0], at[1], r.detail
        );
    }
    Ok(r)
}

/// One-sided limits of ln Q and all partials at y⁻ and y⁺, plus the H₄ edge
/// identities, at `samples` random (S,t). H₃ adds the same terms on both sides
/// of an edge and is left out.
pub fn verify_smooth_pasting(e: &Expansion, window: (f64, f64), samples: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let p = *e.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..samples)
        .map(|_| {
            let s = (window.0.ln() + rng.gen::<f64>() * (window.1 / window.0).ln()).exp();
            let t = if rng.gen::<f64>() < 0.02 { p.horizon } else { rng.gen::<f64>() * p.horizon };
            (s, t)
        })
        .collect();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let mut first = (f64::NEG_INFINITY, [f64::NAN; 3]);
    let mut second = (f64::NEG_INFINITY, [f64::NAN; 3]);
    let mut h4 = (f64::NEG_INFINITY, [f64::NAN; 3]);
    for &(s, t) in &pts {
        let band = e.band(s, t)?;
        for edge in [Region::Buy, Region::Sell] {
            let a = e.log_q_band_edge(s, t, edge, None)?;
            let b = e.log_q_extension_edge(s, t, edge, None)?;
            let y = if edge == Region::Buy { band.y_minus } else { band.y_plus };
            let f1 = [rel(a.phi, b.phi), rel(a.phi_y, b.phi_y), rel(a.phi_s, b.phi_s), rel(a.phi_t, b.phi_t)]
                .into_iter()
                .fold(0.0, f64::max);
            let f2 = [rel(a.phi_yy, b.phi_yy), rel(a.phi_ys, b.phi_ys), rel(a.phi_ss, b.phi_ss)]
                .into_iter()
                .fold(0.0, f64::max);
            if f1 > first.0 {
                first = (f1, [s, y, t]);
            }
            if f2 > second.0 {
                second = (f2, [s, y, t]);
            }
            let sgn = if edge == Region::Buy { -1.0 } else { 1.0 };
            let d = p.delta(t);
            let hh = e.h4_partials(s, sgn * band.half_width, t)?;
            let g = p.gamma * s / d;
            let v = [
                (hh.y - sgn * g).abs() / g,
                hh.yy.abs() / g,
                (hh.ys - sgn * p.gamma / d).abs() / (p.gamma / d),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            if v > h4.0 {
                h4 = (v, [s, y, t]);
            }
        }
    }
    let desc = format!("{samples} random (S,t), S in [{}, {}]", window.0, window.1);
    Ok(vec![
        CheckReport::new("pasting_first_order", desc.clone(), first, 1e-10, "ln Q, Q_y, Q_S, Q_t across y-/y+".into()),
        CheckReport::new("pasting_second_order", desc.clone(), second, 1e-8, "Q_yy, Q_yS, Q_SS across y-/y+".into()),
        CheckReport::new("h4_edge_identities", desc, h4, 1e-8, "H4_Y = ±gS/d, H4_YY = 0, H4_YS = ±g/d".into()),
    ])
}

/// Every check for one side.
pub fn verify_all(e: &Expansion, grid: &VerifyGrid, samples: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = vec![
        verify_pde_sign(e, grid, Bound::Plus, Region::NoTrade)?,
        verify_pde_sign(e, grid, Bound::Minus, Region::NoTrade)?,
        verify_pde_sign(e, grid, Bound::Plus, Region::Buy)?,
        verify_pde_sign(e, grid, Bound::Plus, Region::Sell)?,
        verify_epsilon_scaling(e, grid)?,
    ];
    for b in [Bound::Plus, Bound::Minus] {
        for r in [Region::NoTrade, Region::Buy, Region::Sell] {
            out.push(verify_gradient_constraints(e, grid, b, r)?);
        }
    }
    out.push(verify_final_time(e, grid)?);
    out.extend(verify_smooth_pasting(e, grid.window, samples, seed)?);
    Ok(out)
}

/// Largest ε in [lo, hi] (bisection in ln ε) at which `check` still passes,
/// or None if it already fails at `lo`.
pub fn epsilon_threshold<F>(e: &Expansion, lo: f64, hi: f64, iters: usize, check: F) -> Result<Option<f64>>
where
    F: Fn(&Expansion) -> Result<CheckReport>,
{
    let pass = |eps: f64| -> Result<bool> { Ok(check(&e.with_epsilon(eps)?)?.passed) };
    if !pass(lo)? {
        return Ok(None);
    }
    if pass(hi)? {
        return Ok(Some(hi));
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..iters {
        let m = 0.5 * (a + b);
        if pass(m.exp())? {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(a.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(eps: f64) -> Expansion {
        Expansion::new(&MarketParams::reference(eps), &ClaimSpec::none(), Side::NoClaim).unwrap()
    }

    fn small() -> VerifyGrid {
        VerifyGrid {
            n_s: 6,
            n_y: 7,
            n_t: 3,
            window: (0.5, 2.0),
        }
    }

    #[test]
    fn nt_slack_at_centre() {
        // Y = 0: both slacks equal εγS/δ
        let e = plain(1e-3);
        let b = e.band(1.3, 0.2).unwrap();
        let lq = e.log_q(1.3, b.y_star, 0.2, Some(Bound::Plus)).unwrap();
        let g = 1.3;
        assert!((lq.phi_y + 1.001 * g - 1e-3 * g).abs() < 1e-14);
        let lq = e.log_q(1.3, b.y_plus, 0.2, Some(Bound::Plus)).unwrap();
        assert!((lq.phi_y + 1.001 * g - 2e-3 * g).abs() < 1e-13);
        assert!((-lq.phi_y - 0.999 * g).abs() < 1e-13);
    }

    #[test]
    fn plain_side_checks_pass() {
        let e = plain(1e-3);
        for r in verify_all(&e, &small(), 50, 1).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn threshold_bisection_brackets() {
        let e = plain(1e-3);
        let g = small();
        let th = epsilon_threshold(&e, 1e-4, 0.5, 8, |x| verify_final_time(x, &g)).unwrap();
        assert!(th.is_some());
    }
}
