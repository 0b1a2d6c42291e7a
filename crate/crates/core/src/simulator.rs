//! Monte Carlo engine for the band strategy and baseline policies.
//!
//! Exact GBM steps, money-market accrual, trades at (1 ± ε)S, terminal
//! liquidation with physical delivery, CARA utility and certainty equivalent.
//! Path `i` draws from ChaCha8 stream `i` of the run seed, so results do not
//! depend on scheduling.

use crate::bs_engine::claim_v0;
use crate::error::{Error, Result};
use crate::expansion::{Expansion, NoTradeBand};
use crate::market_model::{terminal_wealth, utility, ClaimSpec, MarketParams, PortfolioPoint, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// State of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub b: f64,
    pub y: f64,
    pub s: f64,
    /// Cumulative shares bought.
    pub l_cum: f64,
    /// Cumulative shares sold.
    pub m_cum: f64,
    pub cost_paid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Trade to the nearest edge of the no-trade band.
    Band,
    /// Trade to y* every step.
    FrictionlessTarget,
    /// Never trade.
    NoRebalance,
}

impl Policy {
    pub fn label(self) -> &'static str {
        match self {
            Policy::Band => "band",
            Policy::FrictionlessTarget => "frictionless_target",
            Policy::NoRebalance => "no_rebalance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Number of leading paths whose steps are recorded.
    pub trace_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub n_paths: usize,
    pub mean_utility: f64,
    pub std_error: f64,
    pub ce: f64,
    pub ce_std_error: f64,
    pub mean_cost: f64,
    pub mean_terminal_wealth: f64,
    /// Mean number of rebalancing trades per path.
    pub mean_trades: f64,
    /// Fraction of decision times at which the policy traded.
    pub trade_frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Hold,
    Buy,
    Sell,
}

impl Action {
    pub fn label(self) -> &'static str {
        match self {
            Action::Hold => "hold",
            Action::Buy => "buy",
            Action::Sell => "sell",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub path: usize,
    pub t: f64,
    pub s: f64,
    pub y: f64,
    pub b: f64,
    pub action: Action,
    pub traded_shares: f64,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub result: SimResult,
    pub traces: Vec<TraceRow>,
}

/// Trade `dy` shares at price `s`: cash moves by the (1 ± ε) price.
pub fn apply_trade(st: &mut PathState, dy: f64, epsilon: f64) -> Action {
    if dy == 0.0 {
        return Action::Hold;
    }
    let notional = st.s * dy.abs();
    st.cost_paid += epsilon * notional;
    st.y += dy;
    if dy > 0.0 {
        st.b -= (1.0 + epsilon) * notional;
        st.l_cum += dy;
        Action::Buy
    } else {
        st.b += (1.0 - epsilon) * notional;
        st.m_cum -= dy;
        Action::Sell
    }
}

/// Band at (S,t), collapsed to y* where the band degenerates.
fn band_at(e: &Expansion, c: &ClaimSpec, p: &MarketParams, s: f64, t: f64) -> Result<NoTradeBand> {
    let g = match e.side() {
        Side::NoClaim => Default::default(),
        Side::WithClaim => claim_v0(c, p, s, t)?,
    };
    match e.band_from_greeks(s, t, &g) {
        Err(Error::DegenerateBand { .. }) => {
            let y = e.y_star(s, t)?;
            Ok(NoTradeBand {
                y_star: y,
                half_width: 0.0,
                y_minus: y,
                y_plus: y,
            })
        }
        r => r,
    }
}

fn target_trade(e: &Expansion, c: &ClaimSpec, p: &MarketParams, policy: Policy, st: &PathState) -> Result<f64> {
    Ok(match policy {
        Policy::NoRebalance => 0.0,
        Policy::FrictionlessTarget => e.y_star(st.s, st.t)? - st.y,
        Policy::Band => {
            let band = band_at(e, c, p, st.s, st.t)?;
            if st.y < band.y_minus {
                band.y_minus - st.y
            } else if st.y > band.y_plus {
                band.y_plus - st.y
            } else {
                0.0
            }
        }
    })
}

struct PathOut {
    utility: f64,
    wealth: f64,
    cost: f64,
    trades: usize,
    trace: Vec<TraceRow>,
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    e: &Expansion,
    c: &ClaimSpec,
    policy: Policy,
    cfg: &SimConfig,
    start: &PortfolioPoint,
    index: usize,
    stream: u64,
    flip: bool,
) -> Result<PathOut> {
    let p = e.params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let dt = (p.horizon - start.t) / cfg.n_steps as f64;
    let drift = (p.mu - 0.5 * p.sigma * p.sigma) * dt;
    let vol = p.sigma * dt.sqrt();
    let growth = (p.r * dt).exp();
    let record = index < cfg.trace_paths;
    let mut trace = Vec::new();
    let mut st = PathState {
        t: start.t,
        b: start.b,
        y: start.y,
        s: start.s,
        l_cum: 0.0,
        m_cum: 0.0,
        cost_paid: 0.0,
    };
    let mut trades = 0;
    let mut decide = |st: &mut PathState, trace: &mut Vec<TraceRow>| -> Result<()> {
        let dy = target_trade(e, c, p, policy, st)?;
        let before = st.cost_paid;
        let action = apply_trade(st, dy, p.epsilon);
        if action != Action::Hold {
            trades += 1;
        }
        if record {
            trace.push(TraceRow {
                path: index,
                t: st.t,
                s: st.s,
                y: st.y,
                b: st.b,
                action,
                traded_shares: dy,
                cost: st.cost_paid - before,
            });
        }
        Ok(())
    };
    decide(&mut st, &mut trace)?;
    for n in 1..=cfg.n_steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        let z = if flip { -z } else { z };
        st.s *= (drift + vol * z).exp();
        st.b *= growth;
        st.t = if n == cfg.n_steps { p.horizon } else { start.t + dt * n as f64 };
        if n < cfg.n_steps {
            decide(&mut st, &mut trace)?;
        }
    }
    let wealth = terminal_wealth(
        p,
        c,
        e.side(),
        &PortfolioPoint {
            t: p.horizon,
            b: st.b,
            y: st.y,
            s: st.s,
        },
    )?;
    Ok(PathOut {
        utility: utility(wealth, p.gamma),
        wealth,
        cost: st.cost_paid,
        trades,
        trace,
    })
}

/// Neumaier-compensated sum in slice order.
fn kahan_sum(v: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// CE = −(δ(t)/γ)·ln(−EU) and its delta-method standard error.
pub fn certainty_equivalent(mean_utility: f64, std_error: f64, p: &MarketParams, t: f64) -> Result<(f64, f64)> {
    if !(mean_utility < 0.0 && mean_utility.is_finite()) {
        return Err(Error::Impossible(format!(
            "mean utility {mean_utility} is not in (-inf, 0)"
        )));
    }
    let d = p.discount_factor(t)?;
    Ok((
        -d / p.gamma * (-mean_utility).ln(),
        d / (p.gamma * mean_utility.abs()) * std_error,
    ))
}

/// Simulate `cfg.n_paths` paths of `policy` from `start` to T.
pub fn simulate(
    p: &MarketParams,
    c: &ClaimSpec,
    j: Side,
    policy: Policy,
    cfg: &SimConfig,
    start: &PortfolioPoint,
) -> Result<SimOutput> {
    let e = Expansion::new(p, c, j)?;
    simulate_with(&e, policy, cfg, start)
}

/// As [`simulate`] with a prepared expansion.
pub fn simulate_with(e: &Expansion, policy: Policy, cfg: &SimConfig, start: &PortfolioPoint) -> Result<SimOutput> {
    let p = e.params();
    let c = e.claim();
    if !(start.s > 0.0 && start.s.is_finite()) {
        return Err(Error::Domain(format!("start price must be positive (got {})", start.s)));
    }
    if !(start.t >= 0.0 && start.t < p.horizon) {
        return Err(Error::Domain(format!("start time {} outside [0, T)", start.t)));
    }
    if cfg.n_steps == 0 || cfg.n_paths == 0 {
        return Err(Error::InvalidParam("need at least one path and one step".into()));
    }
    if cfg.antithetic && cfg.n_paths % 2 != 0 {
        return Err(Error::InvalidParam("antithetic sampling needs an even path count".into()));
    }
    let outs: Vec<PathOut> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let (stream, flip) = if cfg.antithetic { ((i / 2) as u64, i % 2 == 1) } else { (i as u64, false) };
            run_path(e, c, policy, cfg, start, i, stream, flip)
        })
        .collect::<Result<_>>()?;
    let n = outs.len() as f64;
    // independent samples: single paths, or antithetic pair means
    let samples: Vec<f64> = if cfg.antithetic {
        outs.chunks(2).map(|w| 0.5 * (w[0].utility + w[1].utility)).collect()
    } else {
        outs.iter().map(|o| o.utility).collect()
    };
    let m = samples.len() as f64;
    let mean = kahan_sum(samples.iter().copied()) / m;
    let var = if m > 1.0 {
        kahan_sum(samples.iter().map(|u| (u - mean) * (u - mean))) / (m - 1.0)
    } else {
        0.0
    };
    let se = (var / m).sqrt();
    let (ce, ce_se) = certainty_equivalent(mean, se, p, start.t)?;
    let trades: usize = outs.iter().map(|o| o.trades).sum();
    let traces = outs.iter().flat_map(|o| o.trace.iter().copied()).collect();
    Ok(SimOutput {
        result: SimResult {
            n_paths: cfg.n_paths,
            mean_utility: mean,
            std_error: se,
            ce,
            ce_std_error: ce_se,
            mean_cost: kahan_sum(outs.iter().map(|o| o.cost)) / n,
            mean_terminal_wealth: kahan_sum(outs.iter().map(|o| o.wealth)) / n,
            mean_trades: trades as f64 / n,
            trade_frequency: trades as f64 / (n * cfg.n_steps as f64),
        },
        traces,
    })
}
