use indiff_core::bs_engine::claim_v0;
use indiff_core::expansion::{indifference_price, Expansion};
use indiff_core::hjb_oracle::{oracle_price, sandwich_report, solve_qvi, SandwichReport};
use indiff_core::market_model::{check_side, validate_params, ClaimSpec, MarketParams, PortfolioPoint, Side};
use indiff_core::simulator::{simulate_with, Policy, SimConfig};
use indiff_core::verifier::{verify_all, CheckReport};

use crate::config::PolicyName;
use crate::output::{num, Stamp, Table};
use crate::{CliError, Command, Invocation, Outcome};

pub fn dispatch(inv: &Invocation) -> Result<Outcome, CliError> {
    let cfg = &inv.config;
    let p = cfg.market()?;
    let stamp = Stamp {
        command: inv.command.name().into(),
        config_hash: cfg.hash(),
        seed: seed(inv),
        deterministic: inv.deterministic,
    };
    if inv.command == Command::Figure1 {
        return figure1(inv, &p, &stamp);
    }
    let c = cfg.claim()?;
    assumptions(inv, &p, &c)?;
    match inv.command {
        Command::Price => price(inv, &p, &c, &stamp),
        Command::Band => band(inv, &p, &c, &stamp),
        Command::Simulate => simulate(inv, &p, &c, &stamp),
        Command::Oracle => oracle(inv, &p, &c, &stamp),
        Command::Verify => verify(inv, &p, &c, &stamp),
        Command::Figure1 => unreachable!("handled above"),
    }
}

fn seed(inv: &Invocation) -> u64 {
    inv.seed.unwrap_or(inv.config.run.seed)
}

fn assumptions(inv: &Invocation, p: &MarketParams, c: &ClaimSpec) -> Result<(), CliError> {
    let rep = validate_params(p, c)?;
    if rep.passed || !inv.config.run.enforce_assumptions {
        return Ok(());
    }
    Err(CliError::Assumption(format!(
        "sup S^2|g''| = {:.6e} exceeds the Merton cash position {:.6e} (set run.enforce_assumptions = false to proceed)",
        rep.sup_cash_gamma,
        p.merton_cash(0.0)
    )))
}

fn side_name(j: Side) -> &'static str {
    j.label()
}

fn sides(inv: &Invocation, c: &ClaimSpec) -> Result<Vec<Side>, CliError> {
    let sides = inv.config.sides()?;
    for &j in &sides {
        check_side(c, j)?;
    }
    Ok(sides)
}

fn price(inv: &Invocation, p: &MarketParams, c: &ClaimSpec, stamp: &Stamp) -> Result<Outcome, CliError> {
    let sec = &inv.config.price;
    let mut out = Outcome::default();
    let mut tab = Table::create(
        &inv.out,
        "price.csv",
        stamp,
        &["s", "t", "epsilon", "price", "v0", "correction", "h2_claim", "h2_plain"],
    )?;
    for &t in &sec.t {
        for &s in &sec.s {
            let b = indifference_price(p, c, s, t)?;
            tab.row([num(s), num(t), num(p.epsilon), num(b.price), num(b.v0), num(b.correction), num(b.h2_claim), num(b.h2_plain)])?;
            out.lines.push(format!("S={s} t={t}: price {:.10} (V0 {:.10}, correction {:+.3e})", b.price, b.v0, b.correction));
        }
    }
    out.files.push(tab.finish()?);
    Ok(out)
}

/// `n` log-spaced points over [lo, hi].
fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, CliError> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(CliError::Config(format!("grid [{lo}, {hi}] with {n} points is not valid")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

fn band(inv: &Invocation, p: &MarketParams, c: &ClaimSpec, stamp: &Stamp) -> Result<Outcome, CliError> {
    let sec = &inv.config.band;
    let grid = log_grid(sec.s_min, sec.s_max, sec.n_s)?;
    let mut out = Outcome::default();
    let mut tab = Table::create(&inv.out, "band.csv", stamp, &["side", "s", "t", "y_minus", "y_star", "y_plus"])?;
    for j in sides(inv, c)? {
        let e = Expansion::new(p, c, j)?;
        for &t in &sec.t {
            for &s in &grid {
                let b = e.band(s, t)?;
                tab.row([side_name(j).to_string(), num(s), num(t), num(b.y_minus), num(b.y_star), num(b.y_plus)])?;
            }
        }
        out.lines.push(format!("j={}: {} band rows", side_name(j), grid.len() * sec.t.len()));
    }
    out.files.push(tab.finish()?);
    Ok(out)
}

fn simulate(inv: &Invocation, p: &MarketParams, c: &ClaimSpec, stamp: &Stamp) -> Result<Outcome, CliError> {
    let sec = &inv.config.simulate;
    let policy = match sec.policy {
        PolicyName::Band => Policy::Band,
        PolicyName::FrictionlessTarget => Policy::FrictionlessTarget,
        PolicyName::NoRebalance => Policy::NoRebalance,
    };
    let sim = SimConfig {
        n_paths: sec.n_paths,
        n_steps: sec.n_steps,
        seed: seed(inv),
        antithetic: sec.antithetic,
        trace_paths: sec.trace_paths,
    };
    let mut out = Outcome::default();
    let mut tab = Table::create(
        &inv.out,
        "simulate.csv",
        stamp,
        &[
            "side",
            "policy",
            "n_paths",
            "n_steps",
            "y0",
            "mean_utility",
            "std_error",
            "ce",
            "ce_std_error",
            "expansion_ce",
            "tolerance",
            "within_tolerance",
            "mean_cost",
            "mean_terminal_wealth",
            "mean_trades",
            "trade_frequency",
        ],
    )?;
    let mut traces = if sec.trace_paths > 0 {
        Some(Table::create(
            &inv.out,
            "simulate_trace.csv",
            stamp,
            &["side", "path", "t", "s", "y", "b", "action", "traded_shares", "cost"],
        )?)
    } else {
        None
    };
    for j in sides(inv, c)? {
        let e = Expansion::new(p, c, j)?;
        let y0 = match sec.y0 {
            Some(y) => y,
            None => e.y_star(sec.s0, sec.t0)?,
        };
        let start = PortfolioPoint {
            t: sec.t0,
            b: sec.b0,
            y: y0,
            s: sec.s0,
        };
        let res = simulate_with(&e, policy, &sim, &start)?;
        let r = &res.result;
        let expected = e.value_function(sec.t0, sec.b0, y0, sec.s0)?.certainty_equivalent;
        let tol = (3.0 * r.ce_std_error).max(5.0 * p.epsilon);
        let within = (r.ce - expected).abs() <= tol;
        tab.row([
            side_name(j).to_string(),
            policy.label().to_string(),
            r.n_paths.to_string(),
            sim.n_steps.to_string(),
            num(y0),
            num(r.mean_utility),
            num(r.std_error),
            num(r.ce),
            num(r.ce_std_error),
            num(expected),
            num(tol),
            within.to_string(),
            num(r.mean_cost),
            num(r.mean_terminal_wealth),
            num(r.mean_trades),
            num(r.trade_frequency),
        ])?;
        if let Some(tr) = traces.as_mut() {
            for row in &res.traces {
                tr.row([
                    side_name(j).to_string(),
                    row.path.to_string(),
                    num(row.t),
                    num(row.s),
                    num(row.y),
                    num(row.b),
                    row.action.label().to_string(),
                    num(row.traded_shares),
                    num(row.cost),
                ])?;
            }
        }
        out.lines.push(format!(
            "j={}: CE {:.6} ± {:.6} vs expansion {:.6} (tolerance {:.2e}, {})",
            side_name(j),
            r.ce,
            r.ce_std_error,
            expected,
            tol,
            if within { "within" } else { "outside" }
        ));
    }
    out.files.push(tab.finish()?);
    if let Some(tr) = traces {
        out.files.push(tr.finish()?);
    }
    Ok(out)
}

/// Least-squares slope and intercept of ln y against ln x.
pub fn log_log_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn oracle(inv: &Invocation, p: &MarketParams, c: &ClaimSpec, stamp: &Stamp) -> Result<Outcome, CliError> {
    let sec = &inv.config.oracle;
    let spec = inv.config.grid_spec(c)?;
    let eps_list = if sec.epsilons.is_empty() { vec![p.epsilon] } else { sec.epsilons.clone() };
    let sides = [Side::NoClaim, Side::WithClaim];
    for j in sides {
        check_side(c, j)?;
    }
    // expansions built once so the ε-independent pieces are shared
    let mut exps: Vec<Expansion> = sides.iter().map(|&j| Expansion::new(p, c, j)).collect::<Result<_, _>>()?;
    let v0 = claim_v0(c, p, sec.s, 0.0)?.v0;
    let mut out = Outcome::default();
    let mut tab = Table::create(
        &inv.out,
        "oracle.csv",
        stamp,
        &[
            "epsilon",
            "price",
            "v0",
            "excess",
            "expansion_price",
            "fraction_1",
            "fraction_w",
            "nodes_1",
            "nodes_w",
            "worst_lower",
            "worst_upper",
            "max_projection_change",
        ],
    )?;
    let mut fit_points = Vec::new();
    for &eps in &eps_list {
        let pe = p.with_epsilon(eps)?;
        let mut grids = Vec::new();
        let mut reps: Vec<SandwichReport> = Vec::new();
        let mut max_change = 0.0f64;
        for (k, &j) in sides.iter().enumerate() {
            let fine = solve_qvi(&spec, &pe, c, j)?;
            let coarse = if sec.coarse { Some(solve_qvi(&spec.coarsened(), &pe, c, j)?) } else { None };
            exps[k] = exps[k].with_epsilon(eps)?;
            reps.push(sandwich_report(&fine, coarse.as_ref(), &exps[k])?);
            max_change = fine.max_projection_change.iter().fold(max_change, |m, &v| m.max(v));
            grids.push(fine);
        }
        let price = oracle_price(&grids[1], &grids[0], c, sec.s, 0.0)?;
        let expansion = indifference_price(&pe, c, sec.s, 0.0)?.price;
        let excess = price - v0;
        fit_points.push((eps, excess));
        let worst_lower = reps.iter().map(|r| r.worst_lower).fold(f64::NEG_INFINITY, f64::max);
        let worst_upper = reps.iter().map(|r| r.worst_upper).fold(f64::NEG_INFINITY, f64::max);
        tab.row([
            num(eps),
            num(price),
            num(v0),
            num(excess),
            num(expansion),
            num(reps[0].fraction),
            num(reps[1].fraction),
            reps[0].nodes.to_string(),
            reps[1].nodes.to_string(),
            num(worst_lower),
            num(worst_upper),
            num(max_change),
        ])?;
        out.lines.push(format!(
            "eps={eps:.3e}: price {price:.8} (V0 {v0:.8}, expansion {expansion:.8}); sandwich {:.4} / {:.4}",
            reps[0].fraction, reps[1].fraction
        ));
        for (r, j) in reps.iter().zip(sides) {
            if r.fraction < sec.min_fraction {
                out.failures.push(format!(
                    "sandwich for j={} at eps={eps:.3e}: {:.4} < {}",
                    side_name(j),
                    r.fraction,
                    sec.min_fraction
                ));
            }
        }
    }
    out.files.push(tab.finish()?);
    if let Some((slope, intercept)) = log_log_fit(&fit_points) {
        let [lo, hi] = sec.slope_range;
        let in_range = slope >= lo && slope <= hi;
        let mut fit = Table::create(&inv.out, "oracle_fit.csv", stamp, &["points", "slope", "intercept", "slope_lo", "slope_hi", "in_range"])?;
        fit.row([fit_points.len().to_string(), num(slope), num(intercept), num(lo), num(hi), in_range.to_string()])?;
        out.files.push(fit.finish()?);
        out.lines.push(format!("log-log slope of price - V0 against eps: {slope:.4} (range [{lo}, {hi}])"));
    }
    Ok(out)
}

fn verify(inv: &Invocation, p: &MarketParams, c: &ClaimSpec, stamp: &Stamp) -> Result<Outcome, CliError> {
    let grid = inv.config.verify_grid(c)?;
    let mut header = vec!["side"];
    header.extend(CheckReport::CSV_HEADER.split(','));
    let mut tab = Table::create(&inv.out, "verify.csv", stamp, &header)?;
    let mut out = Outcome::default();
    for j in sides(inv, c)? {
        let e = Expansion::new(p, c, j)?;
        for r in verify_all(&e, &grid, inv.config.verify.samples, seed(inv))? {
            let mut fields = vec![side_name(j).to_string()];
            fields.extend(r.csv_fields());
            tab.row(fields)?;
            out.lines.push(format!("j={} {}", side_name(j), r.summary()));
            if !r.passed {
                out.failures.push(format!("j={} {}", side_name(j), r.name));
            }
        }
    }
    out.files.push(tab.finish()?);
    Ok(out)
}

fn figure1(inv: &Invocation, p: &MarketParams, stamp: &Stamp) -> Result<Outcome, CliError> {
    let sec = &inv.config.figure1;
    let strike = inv.config.claim.strike;
    let mut tab = Table::create(&inv.out, "figure1.csv", stamp, &["delta_t", "h2_tilde", "h2"])?;
    let mut out = Outcome::default();
    for &dt in &sec.delta_t {
        let c = ClaimSpec::mollified_call(strike, dt).map_err(|e| CliError::Config(e.to_string()))?;
        let e = Expansion::new(p, &c, Side::WithClaim)?;
        let (ht, h) = (e.h2_tilde(sec.s, 0.0)?, e.h2(sec.s, 0.0)?);
        tab.row([num(dt), num(ht), num(h)])?;
        out.lines.push(format!("delta_T={dt}: H2~ {ht:.8}"));
    }
    out.files.push(tab.finish()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_power() {
        let pts: Vec<(f64, f64)> = [1e-3, 4e-3, 2e-2].iter().map(|&x: &f64| (x, 3.0 * x.powf(0.7))).collect();
        let (slope, icpt) = log_log_fit(&pts).unwrap();
        assert!((slope - 0.7).abs() < 1e-12);
        assert!((icpt - 3f64.ln()).abs() < 1e-10);
        assert!(log_log_fit(&pts[..1]).is_none());
    }

    #[test]
    fn log_grid_ends() {
        let g = log_grid(0.5, 2.0, 3).unwrap();
        assert!((g[1] - 1.0).abs() < 1e-15 && g[0] == 0.5 && (g[2] - 2.0).abs() < 1e-15);
        assert_eq!(log_grid(1.0, 1.0, 1).unwrap(), vec![1.0]);
        assert!(log_grid(0.0, 1.0, 4).is_err());
    }
}
