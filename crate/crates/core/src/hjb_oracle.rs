//! Finite-difference solver of the reduced quasi-variational HJB inequality
//!
//! ```text
//! min{ −𝓓Q,  Q_y + γ(1+ε)SQ/δ,  −Q_y − γ(1−ε)SQ/δ } = 0,   𝓓 = ∂_t + μS∂_S + ½σ²S²∂_SS
//! ```
//!
//! The lattice carries R = Q·exp{γSy/δ − γV₀/δ·1_w}, which is smooth and O(1)
//! near the band. With x = ln S, κ = γ/δ and u = y − Δ·1_w it solves
//!
//! ```text
//! R_t + (μ − σ²/2 − σ²κSu) R_x + ½σ² R_xx + [½σ²(κSu)² − (μ−r)κSu] R = 0
//! ```
//!
//! and the gradient constraints become: R·e^{εκSy} nondecreasing and
//! R·e^{−εκSy} nonincreasing in y. Each time step applies a Strang split of the
//! reaction term around a θ-scheme diffusion solve per y-slice, then enforces
//! both constraints by descending and ascending sweeps in y.

use crate::bs_engine::claim_v0;
use crate::error::{Error, Result};
use crate::expansion::{Bound, Expansion};
use crate::market_model::{check_side, ClaimSpec, MarketParams, Side};
use rayon::prelude::*;
use std::f64::consts::LN_10;

/// How the gradient constraints are enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintMode {
    Projection,
    Penalty { rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n_s: usize,
    pub n_y: usize,
    pub n_t: usize,
    /// Reporting window in S; the lattice is padded beyond it.
    pub window: (f64, f64),
    pub pad_decades: f64,
    pub mode: ConstraintMode,
    pub rannacher_steps: usize,
    /// Number of retained time slices besides t = T.
    pub slices: usize,
    pub min_band_nodes: usize,
}

impl GridSpec {
    /// 128 × 96 × 512 lattice over [K/2, 2K] padded by 1.5 decades.
    pub fn desk(c: &ClaimSpec) -> Self {
        let k = c.scale();
        GridSpec {
            n_s: 128,
            n_y: 96,
            n_t: 512,
            window: (0.5 * k, 2.0 * k),
            pad_decades: 1.5,
            mode: ConstraintMode::Projection,
            rannacher_steps: 2,
            slices: 8,
            min_band_nodes: 8,
        }
    }

    /// Same layout with every resolution halved.
    pub fn coarsened(&self) -> Self {
        GridSpec {
            n_s: self.n_s / 2,
            n_y: self.n_y / 2,
            n_t: self.n_t / 2,
            min_band_nodes: (self.min_band_nodes / 2).max(2),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_s < 16 || self.n_y < 16 {
            return Err(Error::InvalidParam(format!(
                "lattice needs N_S, N_y >= 16 (got {} x {})",
                self.n_s, self.n_y
            )));
        }
        if self.n_t == 0 || self.slices == 0 || self.n_t % self.slices != 0 {
            return Err(Error::InvalidParam(format!(
                "N_t = {} must be a positive multiple of the slice count {}",
                self.n_t, self.slices
            )));
        }
        if !(self.window.0 > 0.0 && self.window.1 > self.window.0) {
            return Err(Error::InvalidParam("empty S window".into()));
        }
        if let ConstraintMode::Penalty { rho } = self.mode {
            if !(rho > 0.0) {
                return Err(Error::InvalidParam("penalty parameter must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Buy,
    Sell,
    None,
}

impl Constraint {
    pub fn label(self) -> &'static str {
        match self {
            Constraint::Buy => "buy",
            Constraint::Sell => "sell",
            Constraint::None => "none",
        }
    }
}

/// One retained time slice.
#[derive(Debug, Clone)]
pub struct Slice {
    pub t: f64,
    /// ln R, index `k * n_s + i`.
    pub log_r: Vec<f64>,
    pub active: Vec<Constraint>,
    /// κ·V₀(S_i, t)·1_w.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QGrid {
    pub spec: GridSpec,
    pub params: MarketParams,
    pub side: Side,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Ascending in t; the last slice is t = T.
    pub slices: Vec<Slice>,
    /// Largest relative decrease made by the constraint step, per time step.
    pub max_projection_change: Vec<f64>,
    pub scheme: &'static str,
}

/// One lattice node for export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeRow {
    pub s: f64,
    pub y: f64,
    pub t: f64,
    pub q: f64,
    pub active: Constraint,
}

impl QGrid {
    pub fn n_s(&self) -> usize {
        self.x.len()
    }

    pub fn kappa(&self, t: f64) -> f64 {
        self.params.gamma / self.params.delta(t)
    }

    /// ln Q at lattice node (i, k) of slice `l`.
    pub fn log_q(&self, l: usize, i: usize, k: usize) -> f64 {
        let sl = &self.slices[l];
        let s = self.x[i].exp();
        sl.log_r[k * self.n_s() + i] - self.kappa(sl.t) * s * self.y[k] + sl.shift[i]
    }

    pub fn slice_index(&self, t: f64) -> Option<usize> {
        self.slices
            .iter()
            .position(|sl| (sl.t - t).abs() <= 1e-12 * self.params.horizon.max(1.0))
    }

    fn bracket(v: &[f64], z: f64) -> Option<(usize, f64)> {
        if !(z >= v[0] && z <= v[v.len() - 1]) {
            return None;
        }
        let j = v.partition_point(|&a| a <= z).clamp(1, v.len() - 1) - 1;
        Some((j, (z - v[j]) / (v[j + 1] - v[j])))
    }

    /// Bilinear interpolation of ln R in (ln S, y) on slice `l`.
    pub fn log_r_at(&self, l: usize, s: f64, y: f64) -> Result<f64> {
        let n = self.n_s();
        let (i, a) = Self::bracket(&self.x, s.ln())
            .ok_or_else(|| Error::Domain(format!("S = {s} outside the lattice")))?;
        let (k, b) = Self::bracket(&self.y, y)
            .ok_or_else(|| Error::Domain(format!("y = {y} outside the lattice")))?;
        let r = &self.slices[l].log_r;
        let at = |kk: usize, ii: usize| r[kk * n + ii];
        Ok((1.0 - b) * ((1.0 - a) * at(k, i) + a * at(k, i + 1)) + b * ((1.0 - a) * at(k + 1, i) + a * at(k + 1, i + 1)))
    }

    /// ln R at (S, y, t), linear in t between retained slices.
    pub fn log_r_interp(&self, s: f64, y: f64, t: f64) -> Result<f64> {
        if let Some(l) = self.slice_index(t) {
            return self.log_r_at(l, s, y);
        }
        let ts: Vec<f64> = self.slices.iter().map(|sl| sl.t).collect();
        let (l, w) = Self::bracket(&ts, t)
            .ok_or_else(|| Error::Domain(format!("t = {t} outside the lattice")))?;
        Ok((1.0 - w) * self.log_r_at(l, s, y)? + w * self.log_r_at(l + 1, s, y)?)
    }

    /// Rows (S, y, t, Q, active constraint) for every retained node.
    pub fn export_rows(&self) -> Vec<LatticeRow> {
        let n = self.n_s();
        let mut out = Vec::with_capacity(self.slices.len() * n * self.y.len());
        for (l, sl) in self.slices.iter().enumerate() {
            for (k, &y) in self.y.iter().enumerate() {
                for (i, &x) in self.x.iter().enumerate() {
                    out.push(LatticeRow {
                        s: x.exp(),
                        y,
                        t: sl.t,
                        q: self.log_q(l, i, k).exp(),
                        active: sl.active[k * n + i],
                    });
                }
            }
        }
        out
    }
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64], work: &mut [f64]) {
    let n = diag.len();
    work[0] = sup[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * work[i - 1];
        work[i] = sup[i] / m;
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= work[i] * rhs[i + 1];
    }
}

/// Cash deltas Δ(S_i,t)·1_w and frictionless values V₀(S_i,t)·1_w.
fn claim_profile(p: &MarketParams, c: &ClaimSpec, j: Side, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if j == Side::NoClaim {
        return Ok((vec![0.0; x.len()], vec![0.0; x.len()]));
    }
    let mut d = Vec::with_capacity(x.len());
    let mut v = Vec::with_capacity(x.len());
    for &xi in x {
        let s = xi.exp();
        let g = claim_v0(c, p, s, t)?;
        d.push(g.cash_delta / s);
        v.push(g.v0);
    }
    Ok((d, v))
}

/// Nonuniform y nodes from a density: inside every sampled band the local
/// spacing is at most width/(m+1), growing linearly with distance outside.
pub fn build_y_grid(spec: &GridSpec, p: &MarketParams, c: &ClaimSpec, j: Side) -> Result<Vec<f64>> {
    let e = Expansion::new(p, c, j)?;
    let samples = sample_window(spec, p);
    let mut bands = Vec::with_capacity(samples.len());
    for &(s, t) in &samples {
        bands.push(e.band(s, t)?);
    }
    let w_min = bands.iter().map(|b| b.y_plus - b.y_minus).fold(f64::INFINITY, f64::min);
    let bottom = bands
        .iter()
        .map(|b| 2.5 * b.y_minus - 1.5 * b.y_plus)
        .fold(-0.25 * w_min, f64::min);
    let top = bands.iter().map(|b| 2.5 * b.y_plus - 1.5 * b.y_minus).fold(f64::NEG_INFINITY, f64::max);
    let m = (spec.min_band_nodes + 1) as f64;
    let spacing = |y: f64| -> f64 {
        bands
            .iter()
            .map(|b| {
                let d = (b.y_minus - y).max(y - b.y_plus).max(0.0);
                (b.y_plus - b.y_minus) / m + 0.25 * d
            })
            .fold(f64::INFINITY, f64::min)
    };
    let n_aux = 8000;
    let aux: Vec<f64> = (0..=n_aux).map(|i| bottom + (top - bottom) * i as f64 / n_aux as f64).collect();
    let dens: Vec<f64> = aux.iter().map(|&y| 1.0 / spacing(y)).collect();
    let mut cum = vec![0.0; aux.len()];
    for i in 1..aux.len() {
        cum[i] = cum[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (aux[i] - aux[i - 1]);
    }
    let total = cum[n_aux];
    if total > (spec.n_y - 1) as f64 {
        return Err(Error::Resolution(format!(
            "{} y-nodes cannot resolve the bands (need about {:.0})",
            spec.n_y,
            total.ceil() + 1.0
        )));
    }
    let y: Vec<f64> = (0..spec.n_y)
        .map(|k| {
            let target = total * k as f64 / (spec.n_y - 1) as f64;
            let i = cum.partition_point(|&v| v < target).clamp(1, n_aux);
            let f = (target - cum[i - 1]) / (cum[i] - cum[i - 1]);
            aux[i - 1] + f * (aux[i] - aux[i - 1])
        })
        .collect();
    for (band, &(s, t)) in bands.iter().zip(&samples) {
        let inside = y.iter().filter(|&&v| v >= band.y_minus && v <= band.y_plus).count();
        if inside < spec.min_band_nodes {
            return Err(Error::Resolution(format!(
                "band at S={s:.4}, t={t:.4} holds {inside} y-nodes, need {}",
                spec.min_band_nodes
            )));
        }
    }
    Ok(y)
}

fn sample_window(spec: &GridSpec, p: &MarketParams) -> Vec<(f64, f64)> {
    let (a, b) = (spec.window.0.ln(), spec.window.1.ln());
    let mut out = Vec::new();
    for i in 0..=32 {
        let s = (a + (b - a) * i as f64 / 32.0).exp();
        for l in 0..=spec.slices {
            out.push((s, p.horizon * l as f64 / spec.slices as f64));
        }
    }
    out
}

/// Buy/sell projection on one S-column of R values; returns the largest
/// relative decrease.
fn project_column(r: &mut [f64], active: &mut [Constraint], y: &[f64], a: f64) -> f64 {
    let n = y.len();
    let mut change = 0.0f64;
    for k in (0..n - 1).rev() {
        let cap = r[k + 1] * (a * (y[k + 1] - y[k])).exp();
        if r[k] > cap {
            change = change.max(1.0 - cap / r[k]);
            r[k] = cap;
            active[k] = Constraint::Buy;
        }
    }
    for k in 1..n {
        let cap = r[k - 1] * (a * (y[k] - y[k - 1])).exp();
        if r[k] > cap {
            change = change.max(1.0 - cap / r[k]);
            r[k] = cap;
            active[k] = Constraint::Sell;
        }
    }
    change
}

/// Penalized constraint step: policy iteration on the active set, each pass
/// solving the tridiagonal penalized system exactly. The weight at node k is
/// ρ·R_k/min R, so the relative constraint violation stays below 1/ρ.
fn penalize_column(r: &mut [f64], active: &mut [Constraint], y: &[f64], a: f64, rho: f64) -> Result<f64> {
    let n = y.len();
    let base: Vec<f64> = r.to_vec();
    let floor = base.iter().copied().fold(f64::INFINITY, f64::min);
    let weight: Vec<f64> = base.iter().map(|v| rho * v / floor).collect();
    let up: Vec<f64> = (0..n - 1).map(|k| (a * (y[k + 1] - y[k])).exp()).collect();
    // a constraint switches on above cap·(1+tol) and off below cap·(1−tol)
    let tol = 1e-12;
    let flags = |r: &[f64], prev: &[(bool, bool)]| -> Vec<(bool, bool)> {
        let on = |v: f64, cap: f64, was: bool| if was { v >= cap * (1.0 - tol) } else { v > cap * (1.0 + tol) };
        (0..n)
            .map(|k| {
                let buy = k + 1 < n && on(r[k], up[k] * r[k + 1], prev[k].0);
                let sell = k > 0 && on(r[k], up[k - 1] * r[k - 1], prev[k].1);
                (buy, sell)
            })
            .collect()
    };
    let mut set = flags(r, &vec![(false, false); n]);
    let (mut sub, mut diag, mut sup, mut work) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..200 {
        for k in 0..n {
            let (buy, sell) = set[k];
            diag[k] = 1.0;
            sub[k] = 0.0;
            sup[k] = 0.0;
            if buy {
                diag[k] += weight[k];
                sup[k] = -weight[k] * up[k];
            }
            if sell {
                diag[k] += weight[k];
                sub[k] = -weight[k] * up[k - 1];
            }
            r[k] = base[k];
        }
        thomas(&sub, &diag, &sup, r, &mut work);
        let next = flags(r, &set);
        if next == set {
            let mut change = 0.0f64;
            for k in 0..n {
                change = change.max(1.0 - r[k] / base[k]);
                active[k] = match set[k] {
                    (true, _) => Constraint::Buy,
                    (false, true) => Constraint::Sell,
                    _ => Constraint::None,
                };
            }
            return Ok(change);
        }
        set = next;
    }
    Err(Error::Numeric("penalty active set did not settle".into()))
}

/// Backward induction of the QVI from the physical-delivery final condition.
pub fn solve_qvi(spec: &GridSpec, p: &MarketParams, c: &ClaimSpec, j: Side) -> Result<QGrid> {
    spec.validate()?;
    check_side(c, j)?;
    if !(p.epsilon > 0.0) {
        return Err(Error::InvalidParam("the QVI solver needs epsilon > 0".into()));
    }
    let y = build_y_grid(spec, p, c, j)?;
    let (ns, ny) = (spec.n_s, spec.n_y);
    let x_lo = spec.window.0.ln() - spec.pad_decades * LN_10;
    let x_hi = spec.window.1.ln() + spec.pad_decades * LN_10;
    let dx = (x_hi - x_lo) / (ns - 1) as f64;
    let x: Vec<f64> = (0..ns).map(|i| x_lo + dx * i as f64).collect();
    let s: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let dt = p.horizon / spec.n_t as f64;
    let sig2 = p.sigma * p.sigma;
    let keep = spec.n_t / spec.slices;
    let kappa = |t: f64| p.gamma / p.delta(t);

    // final condition R(T) = exp(γεS|y − g′(S)|)
    let g1: Vec<f64> = if j == Side::WithClaim {
        s.iter().map(|&si| c.derivatives(p, si).map(|d| d[1])).collect::<Result<_>>()?
    } else {
        vec![0.0; ns]
    };
    let mut r = vec![0.0; ny * ns];
    for k in 0..ny {
        for i in 0..ns {
            r[k * ns + i] = (p.gamma * p.epsilon * s[i] * (y[k] - g1[i]).abs()).exp();
        }
    }
    let (_, v_t) = claim_profile(p, c, j, &x, p.horizon)?;
    let mut slices = vec![Slice {
        t: p.horizon,
        log_r: r.iter().map(|v| v.ln()).collect(),
        active: vec![Constraint::None; ny * ns],
        shift: v_t.iter().map(|v| kappa(p.horizon) * v).collect(),
    }];
    let mut changes = Vec::with_capacity(spec.n_t);
    let (mut d_now, _) = claim_profile(p, c, j, &x, p.horizon)?;

    for n in 0..spec.n_t {
        let t_now = p.horizon - dt * n as f64;
        let t_new = p.horizon - dt * (n + 1) as f64;
        let t_mid = 0.5 * (t_now + t_new);
        let (d_mid, _) = claim_profile(p, c, j, &x, t_mid)?;
        let (d_new, v_new) = claim_profile(p, c, j, &x, t_new)?;
        let implicit = n < spec.rannacher_steps;
        let reaction = |t: f64, d: &[f64], i: usize, yk: f64| -> f64 {
            let z = kappa(t) * s[i] * (yk - d[i]);
            0.5 * sig2 * z * z - (p.mu - p.r) * z
        };
        let dn = &d_now;
        r.par_chunks_mut(ns).enumerate().try_for_each(|(k, row)| -> Result<()> {
            let yk = y[k];
            for i in 0..ns {
                row[i] *= (0.5 * dt * reaction(t_now, dn, i, yk)).exp();
            }
            let mut sub = vec![0.0; ns];
            let mut diag = vec![0.0; ns];
            let mut sup = vec![0.0; ns];
            let mut rhs = vec![0.0; ns];
            let half_d = 0.5 * sig2 / (dx * dx);
            for i in 0..ns {
                let b = p.mu - 0.5 * sig2 - sig2 * kappa(t_mid) * s[i] * (yk - d_mid[i]);
                let (am, a0, ap) = if i == 0 {
                    if b > 0.0 { (0.0, -b / dx, b / dx) } else { (0.0, 0.0, 0.0) }
                } else if i == ns - 1 {
                    if b < 0.0 { (-b / dx, b / dx, 0.0) } else { (0.0, 0.0, 0.0) }
                } else if b.abs() * dx <= sig2 {
                    (half_d - 0.5 * b / dx, -2.0 * half_d, half_d + 0.5 * b / dx)
                } else if b > 0.0 {
                    (half_d, -2.0 * half_d - b / dx, half_d + b / dx)
                } else {
                    (half_d - b / dx, -2.0 * half_d + b / dx, half_d)
                };
                let theta = if implicit || 1.0 + 0.5 * dt * a0 < 0.0 { 1.0 } else { 0.5 };
                sub[i] = -theta * dt * am;
                diag[i] = 1.0 - theta * dt * a0;
                sup[i] = -theta * dt * ap;
                let ex = (1.0 - theta) * dt;
                let left = if i > 0 { row[i - 1] } else { 0.0 };
                let right = if i + 1 < ns { row[i + 1] } else { 0.0 };
                rhs[i] = row[i] + ex * (am * left + a0 * row[i] + ap * right);
            }
            let mut work = vec![0.0; ns];
            thomas(&sub, &diag, &sup, &mut rhs, &mut work);
            for i in 0..ns {
                let v = rhs[i] * (0.5 * dt * reaction(t_new, &d_new, i, yk)).exp();
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "diffusion step lost positivity at S={:.6e}, y={yk:.6e}, t={t_new:.6e} (value {v:e})",
                        s[i]
                    )));
                }
                row[i] = v;
            }
            Ok(())
        })?;

        let mut active = vec![Constraint::None; ny * ns];
        let k_new = kappa(t_new);
        let mut step_change = 0.0f64;
        let mut col = vec![0.0; ny];
        let mut col_act = vec![Constraint::None; ny];
        for i in 0..ns {
            for k in 0..ny {
                col[k] = r[k * ns + i];
                col_act[k] = Constraint::None;
            }
            let a = p.epsilon * k_new * s[i];
            let ch = match spec.mode {
                ConstraintMode::Projection => project_column(&mut col, &mut col_act, &y, a),
                ConstraintMode::Penalty { rho } => penalize_column(&mut col, &mut col_act, &y, a, rho)?,
            };
            step_change = step_change.max(ch);
            for k in 0..ny {
                r[k * ns + i] = col[k];
                active[k * ns + i] = col_act[k];
            }
        }
        changes.push(step_change);
        d_now = d_new;
        if (n + 1) % keep == 0 {
            slices.push(Slice {
                t: t_new.max(0.0),
                log_r: r.iter().map(|v| v.ln()).collect(),
                active,
                shift: v_new.iter().map(|v| k_new * v).collect(),
            });
        }
    }
    slices.reverse();
    Ok(QGrid {
        spec: spec.clone(),
        params: *p,
        side: j,
        x,
        y,
        slices,
        max_projection_change: changes,
        scheme: match spec.mode {
            ConstraintMode::Projection => "crank-nicolson+rannacher, projection",
            ConstraintMode::Penalty { .. } => "crank-nicolson+rannacher, penalty",
        },
    })
}

/// (δ/γ)·ln(Q^(w)(S,0,t)/Q^(1)(S,0,t)).
pub fn oracle_price(qw: &QGrid, q1: &QGrid, c: &ClaimSpec, s: f64, t: f64) -> Result<f64> {
    if qw.spec != q1.spec || qw.params != q1.params {
        return Err(Error::InvalidParam("price needs lattices on the same grid spec".into()));
    }
    if qw.side != Side::WithClaim || q1.side != Side::NoClaim {
        return Err(Error::InvalidParam("price needs the (w, 1) pair of lattices".into()));
    }
    let p = &qw.params;
    let v0 = claim_v0(c, p, s, t)?.v0;
    let diff = qw.log_r_interp(s, 0.0, t)? - q1.log_r_interp(s, 0.0, t)?;
    Ok(v0 + p.delta(t) / p.gamma * diff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichReport {
    pub nodes: usize,
    pub satisfied: usize,
    /// Nodes skipped because the expansion was undefined there.
    pub skipped: usize,
    pub fraction: f64,
    /// Worst lower violation ln Q⁺ − ln Q_FD (positive means violated).
    pub worst_lower: f64,
    /// Worst upper violation ln Q_FD − ln Q⁻.
    pub worst_upper: f64,
    /// Quantiles (50%, 90%, 99%, max) of violation / error estimate.
    pub ratio_quantiles: [f64; 4],
    pub tolerance_factor: f64,
}

/// Per-node check of ln Q⁺ − 3e ≤ ln Q_FD ≤ ln Q⁻ + 3e over the window,
/// interior y-nodes and retained slices, where e is the discretization-error
/// estimate taken as the difference to the coarse lattice.
pub fn sandwich_report(fine: &QGrid, coarse: Option<&QGrid>, e: &Expansion) -> Result<SandwichReport> {
    if e.params() != &fine.params || e.side() != fine.side {
        return Err(Error::InvalidParam("expansion and lattice describe different problems".into()));
    }
    e.m_constant()?;
    let factor = 3.0;
    let n = fine.n_s();
    let in_window: Vec<usize> = (0..n)
        .filter(|&i| {
            let s = fine.x[i].exp();
            s >= fine.spec.window.0 && s <= fine.spec.window.1
        })
        .collect();
    let mut nodes = 0;
    let mut ok = 0;
    let mut skipped = 0;
    let mut worst_lower = f64::NEG_INFINITY;
    let mut worst_upper = f64::NEG_INFINITY;
    let mut ratios = Vec::new();
    for (l, sl) in fine.slices.iter().enumerate() {
        for &i in &in_window {
            let s = fine.x[i].exp();
            for k in 1..fine.y.len() - 1 {
                let y = fine.y[k];
                let (lp, lm) = match (e.log_q(s, y, sl.t, Some(Bound::Plus)), e.log_q(s, y, sl.t, Some(Bound::Minus))) {
                    (Ok(a), Ok(b)) => (a.phi, b.phi),
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let lq = fine.log_q(l, i, k);
                let err = match coarse {
                    Some(cg) => {
                        let lr = cg.log_r_interp(s, y, sl.t)?;
                        (fine.slices[l].log_r[k * n + i] - lr).abs()
                    }
                    None => 0.0,
                };
                let tol = factor * err + 1e-12 * lq.abs().max(1.0);
                let lo_v = lp - lq;
                let up_v = lq - lm;
                worst_lower = worst_lower.max(lo_v);
                worst_upper = worst_upper.max(up_v);
                nodes += 1;
                if lo_v <= tol && up_v <= tol {
                    ok += 1;
                }
                let v = lo_v.max(up_v).max(0.0);
                ratios.push(if err > 0.0 { v / err } else if v > 0.0 { f64::INFINITY } else { 0.0 });
            }
        }
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let q = |f: f64| -> f64 {
        if ratios.is_empty() {
            0.0
        } else {
            ratios[((ratios.len() - 1) as f64 * f).round() as usize]
        }
    };
    Ok(SandwichReport {
        nodes,
        satisfied: ok,
        skipped,
        fraction: if nodes > 0 { ok as f64 / nodes as f64 } else { 0.0 },
        worst_lower,
        worst_upper,
        ratio_quantiles: [q(0.5), q(0.9), q(0.99), q(1.0)],
        tolerance_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c: &ClaimSpec) -> GridSpec {
        GridSpec {
            n_s: 48,
            n_y: 40,
            n_t: 64,
            slices: 4,
            min_band_nodes: 4,
            ..GridSpec::desk(c)
        }
    }

    #[test]
    fn thomas_solves_tridiagonal() {
        let sub = [0.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0];
        let sup = [-1.0, -1.0, 0.0];
        let mut rhs = [3.0, 2.0, 3.0];
        let mut w = [0.0; 3];
        thomas(&sub, &diag, &sup, &mut rhs, &mut w);
        for v in rhs {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_is_idempotent_and_never_increases() {
        let y: Vec<f64> = (0..20).map(|k| -0.5 + 0.07 * k as f64).collect();
        let mut r: Vec<f64> = y.iter().map(|v| 1.0 + (3.0 * v).sin().abs() * 2.0).collect();
        let before = r.clone();
        let mut act = vec![Constraint::None; 20];
        project_column(&mut r, &mut act, &y, 0.3);
        assert!(r.iter().zip(&before).all(|(a, b)| a <= b));
        let again = r.clone();
        let ch = project_column(&mut r, &mut act, &y, 0.3);
        assert!(ch <= 1e-12);
        assert_eq!(r, again);
        for k in 0..19 {
            assert!(r[k] <= r[k + 1] * (0.3 * (y[k + 1] - y[k])).exp() * (1.0 + 1e-14));
            assert!(r[k + 1] <= r[k] * (0.3 * (y[k + 1] - y[k])).exp() * (1.0 + 1e-14));
        }
    }

    #[test]
    fn penalty_matches_projection() {
        let y: Vec<f64> = (0..20).map(|k| -0.5 + 0.07 * k as f64).collect();
        let r0: Vec<f64> = y.iter().map(|v| 1.0 + (3.0 * v).sin().abs() * 2.0).collect();
        let (mut a, mut b) = (r0.clone(), r0.clone());
        let mut act = vec![Constraint::None; 20];
        project_column(&mut a, &mut act, &y, 0.3);
        penalize_column(&mut b, &mut act, &y, 0.3, 1e9).unwrap();
        for k in 0..20 {
            assert!((a[k] / b[k] - 1.0).abs() < 1e-6, "{k}: {} vs {}", a[k], b[k]);
        }
    }

    #[test]
    fn y_grid_resolves_band() {
        let p = MarketParams::reference(1e-2);
        let c = ClaimSpec::none();
        let spec = small(&c);
        let y = build_y_grid(&spec, &p, &c, Side::NoClaim).unwrap();
        assert_eq!(y.len(), spec.n_y);
        assert!(y.windows(2).all(|w| w[1] > w[0]));
        assert!(y[0] < 0.0);
    }

    #[test]
    fn final_slice_and_positivity() {
        let p = MarketParams::reference(1e-2);
        let c = ClaimSpec::none();
        let spec = small(&c);
        let g = solve_qvi(&spec, &p, &c, Side::NoClaim).unwrap();
        let last = g.slices.last().unwrap();
        assert_eq!(last.t, 1.0);
        let n = g.n_s();
        for k in 0..g.y.len() {
            for i in 0..n {
                let s = g.x[i].exp();
                let expect = -s * g.y[k] + 0.01 * s * g.y[k].abs();
                assert!((g.log_q(g.slices.len() - 1, i, k) - expect).abs() < 1e-12 * expect.abs().max(1.0));
            }
        }
        for sl in &g.slices {
            assert!(sl.log_r.iter().all(|v| v.is_finite()));
        }
        assert_eq!(g.slices[0].t, 0.0);
    }

    #[test]
    fn rejects_zero_epsilon_and_small_grid() {
        let c = ClaimSpec::none();
        let mut spec = small(&c);
        assert!(solve_qvi(&spec, &MarketParams::reference(0.0), &c, Side::NoClaim).is_err());
        spec.n_y = 8;
        assert!(solve_qvi(&spec, &MarketParams::reference(0.01), &c, Side::NoClaim).is_err());
    }
}
