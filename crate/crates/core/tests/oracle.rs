use indiff_core::expansion::Expansion;
use indiff_core::hjb_oracle::{oracle_price, sandwich_report, solve_qvi, ConstraintMode, GridSpec, QGrid};
use indiff_core::market_model::{ClaimSpec, MarketParams, Side};

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

/// Relative gap between the slopes of ln Q at the outermost y nodes and the
/// binding buy (bottom) and sell (top) constraints, over the S window.
fn edge_mismatch(q: &QGrid) -> f64 {
    let p = &q.params;
    let n = q.y.len();
    let mut worst = 0.0f64;
    for (l, sl) in q.slices.iter().enumerate() {
        let kappa = q.kappa(sl.t);
        for i in 0..q.n_s() {
            let s = q.x[i].exp();
            if s < q.spec.window.0 || s > q.spec.window.1 {
                continue;
            }
            let lo = q.log_q(l, i, 0) - q.log_q(l, i, 1);
            let lo_ext = kappa * (1.0 + p.epsilon) * s * (q.y[1] - q.y[0]);
            let hi = q.log_q(l, i, n - 1) - q.log_q(l, i, n - 2);
            let hi_ext = -kappa * (1.0 - p.epsilon) * s * (q.y[n - 1] - q.y[n - 2]);
            worst = worst.max(((lo - lo_ext) / lo_ext).abs()).max(((hi - hi_ext) / hi_ext).abs());
        }
    }
    worst
}

#[test]
fn lattice_edges_follow_the_extensions() {
    let p = MarketParams::reference(0.01);
    let c = ClaimSpec::mollified_call(1.0, 1.0).unwrap();
    for j in [Side::NoClaim, Side::WithClaim] {
        let q = solve_qvi(&small(&c), &p, &c, j).unwrap();
        assert!(edge_mismatch(&q) <= 1e-6, "{j:?}: {}", edge_mismatch(&q));
    }
}

#[test]
fn unhedged_lattice_is_sandwiched() {
    let p = MarketParams::reference(0.01);
    let c = ClaimSpec::mollified_call(1.0, 1.0).unwrap();
    let spec = small(&c);
    let fine = solve_qvi(&spec, &p, &c, Side::NoClaim).unwrap();
    let coarse = solve_qvi(&spec.coarsened(), &p, &c, Side::NoClaim).unwrap();
    let e = Expansion::new(&p, &c, Side::NoClaim).unwrap();
    let rep = sandwich_report(&fine, Some(&coarse), &e).unwrap();
    assert!(rep.fraction >= 0.99, "{rep:?}");
}

#[test]
fn penalty_and_projection_agree_on_price() {
    let p = MarketParams::reference(0.01);
    let c = ClaimSpec::mollified_call(1.0, 1.0).unwrap();
    let spec = small(&c);
    let pen = GridSpec {
        mode: ConstraintMode::Penalty { rho: 1e8 },
        ..spec.clone()
    };
    let price = |g: &GridSpec| {
        let q1 = solve_qvi(g, &p, &c, Side::NoClaim).unwrap();
        let qw = solve_qvi(g, &p, &c, Side::WithClaim).unwrap();
        oracle_price(&qw, &q1, &c, 1.0, 0.0).unwrap()
    };
    let (a, b) = (price(&spec), price(&pen));
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}

#[test]
fn price_exceeds_frictionless_value() {
    let p = MarketParams::reference(0.01);
    let c = ClaimSpec::mollified_call(1.0, 1.0).unwrap();
    let spec = small(&c);
    let q1 = solve_qvi(&spec, &p, &c, Side::NoClaim).unwrap();
    let qw = solve_qvi(&spec, &p, &c, Side::WithClaim).unwrap();
    let v0 = indiff_core::bs_engine::claim_v0(&c, &p, 1.0, 0.0).unwrap().v0;
    assert!(oracle_price(&qw, &q1, &c, 1.0, 0.0).unwrap() > v0);
}

/// Log-log slope of oracle price minus V₀ against ε on the desk lattice.
/// Fails: the O(ε) cost of the initial trade into each band dominates.
#[test]
#[ignore = "known gap: fitted slope is close to 1 on the reference call"]
fn price_excess_scales_like_two_thirds_power() {
    let c = ClaimSpec::mollified_call(1.0, 1.0).unwrap();
    let spec = GridSpec::desk(&c);
    let v0 = indiff_core::bs_engine::claim_v0(&c, &MarketParams::reference(0.0), 1.0, 0.0).unwrap().v0;
    let pts: Vec<(f64, f64)> = [4e-3, 8e-3, 1.6e-2, 3.2e-2]
        .iter()
        .map(|&eps: &f64| {
            let p = MarketParams::reference(eps);
            let q1 = solve_qvi(&spec, &p, &c, Side::NoClaim).unwrap();
            let qw = solve_qvi(&spec, &p, &c, Side::WithClaim).unwrap();
            (eps.ln(), (oracle_price(&qw, &q1, &c, 1.0, 0.0).unwrap() - v0).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((0.60..=0.75).contains(&slope), "slope {slope}");
}
