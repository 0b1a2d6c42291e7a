//! Market and preference parameters, claim payoffs, utility, cash value and
//! terminal wealth.

use crate::bs_engine::{lognormal_greeks, payoff_sup};
use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Market and preference constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    /// Stock drift per year.
    pub mu: f64,
    /// Volatility per sqrt-year.
    pub sigma: f64,
    /// Interest rate per year.
    pub r: f64,
    /// Horizon T in years.
    pub horizon: f64,
    /// Absolute risk aversion.
    pub gamma: f64,
    /// Proportional transaction cost.
    pub epsilon: f64,
}

impl MarketParams {
    pub fn new(mu: f64, sigma: f64, r: f64, horizon: f64, gamma: f64, epsilon: f64) -> Result<Self> {
        let p = MarketParams {
            mu,
            sigma,
            r,
            horizon,
            gamma,
            epsilon,
        };
        p.check()?;
        Ok(p)
    }

    /// μ=0.1, σ=√2, r=0, T=1, γ=1 with the given cost.
    pub fn reference(epsilon: f64) -> Self {
        MarketParams {
            mu: 0.1,
            sigma: std::f64::consts::SQRT_2,
            r: 0.0,
            horizon: 1.0,
            gamma: 1.0,
            epsilon,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        MarketParams::new(self.mu, self.sigma, self.r, self.horizon, self.gamma, epsilon)
    }

    fn check(&self) -> Result<()> {
        let all = [self.mu, self.sigma, self.r, self.horizon, self.gamma, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("parameters must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParam(format!(
                "epsilon out of (0,1): {}",
                self.epsilon
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParam("sigma must be positive".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidParam("gamma must be positive".into()));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidParam("horizon T must be positive".into()));
        }
        if self.r < 0.0 {
            return Err(Error::InvalidParam("r must be non-negative".into()));
        }
        if self.mu <= self.r {
            return Err(Error::InvalidParam("mu must exceed r".into()));
        }
        Ok(())
    }

    /// Non-fatal deviations from the model's standing assumptions.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.r == 0.0 {
            w.push("r = 0: accepted, although the model assumes a positive rate".to_string());
        }
        w
    }

    /// δ(T,s) = e^{−r(T−s)}.
    pub fn discount_factor(&self, s: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&s) {
            return Err(Error::Domain(format!(
                "time {s} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.delta(s))
    }

    pub(crate) fn delta(&self, s: f64) -> f64 {
        (-self.r * (self.horizon - s)).exp()
    }

    /// δ(μ−r)/(γσ²): the frictionless cash amount held in the stock at time t.
    pub fn merton_cash(&self, t: f64) -> f64 {
        self.delta(t) * (self.mu - self.r) / (self.gamma * self.sigma * self.sigma)
    }
}

/// Exponential utility −e^{−γx}.
pub fn utility(x: f64, gamma: f64) -> f64 {
    -(-gamma * x).exp()
}

/// Liquidation value of `y` shares at price `s`: (1 − ε sign y)·y·S.
pub fn cash_value(y: f64, s: f64, epsilon: f64) -> f64 {
    y * s - epsilon * y.abs() * s
}

/// A smooth user payoff. `eval` returns [g, g′, g″, g‴, g⁗] at S.
pub trait Payoff: Send + Sync + fmt::Debug {
    fn eval(&self, s: f64) -> [f64; 5];
}

#[derive(Debug, Clone)]
pub enum ClaimKind {
    None,
    /// g(S) = C_BS(S, K, ΔT).
    MollifiedCall { strike: f64, delta_t: f64 },
    /// g(S) = P_BS(S, K, ΔT).
    MollifiedPut { strike: f64, delta_t: f64 },
    /// g(S) = coeff·S.
    Linear { coeff: f64 },
    Custom(Arc<dyn Payoff>),
}

#[derive(Debug, Clone)]
pub struct ClaimSpec {
    pub kind: ClaimKind,
}

impl ClaimSpec {
    pub fn none() -> Self {
        ClaimSpec {
            kind: ClaimKind::None,
        }
    }

    pub fn mollified_call(strike: f64, delta_t: f64) -> Result<Self> {
        check_strike(strike, delta_t)?;
        Ok(ClaimSpec {
            kind: ClaimKind::MollifiedCall { strike, delta_t },
        })
    }

    pub fn mollified_put(strike: f64, delta_t: f64) -> Result<Self> {
        check_strike(strike, delta_t)?;
        Ok(ClaimSpec {
            kind: ClaimKind::MollifiedPut { strike, delta_t },
        })
    }

    pub fn linear(coeff: f64) -> Result<Self> {
        if !coeff.is_finite() || coeff < 0.0 {
            return Err(Error::InvalidParam(format!(
                "linear coefficient must be finite and >= 0 (got {coeff})"
            )));
        }
        Ok(ClaimSpec {
            kind: ClaimKind::Linear { coeff },
        })
    }

    pub fn custom(payoff: Arc<dyn Payoff>) -> Self {
        ClaimSpec {
            kind: ClaimKind::Custom(payoff),
        }
    }

    /// Price scale used to centre grids: the strike, or 1.
    pub fn scale(&self) -> f64 {
        match self.kind {
            ClaimKind::MollifiedCall { strike, .. } | ClaimKind::MollifiedPut { strike, .. } => strike,
            _ => 1.0,
        }
    }

    /// True when g″ ≡ 0, so the claim carries no cash gamma anywhere.
    pub fn is_gamma_free(&self) -> bool {
        matches!(self.kind, ClaimKind::None | ClaimKind::Linear { .. })
    }

    /// [g, g′, g″, g‴, g⁗] at S.
    pub fn derivatives(&self, p: &MarketParams, s: f64) -> Result<[f64; 5]> {
        let d = match &self.kind {
            ClaimKind::None => [0.0; 5],
            ClaimKind::Linear { coeff } => [coeff * s, *coeff, 0.0, 0.0, 0.0],
            ClaimKind::MollifiedCall { strike, delta_t } => {
                from_greeks(s, lognormal_greeks(s, *strike, *delta_t, p.r, p.sigma, false))
            }
            ClaimKind::MollifiedPut { strike, delta_t } => {
                from_greeks(s, lognormal_greeks(s, *strike, *delta_t, p.r, p.sigma, true))
            }
            ClaimKind::Custom(f) => f.eval(s),
        };
        if let Some(i) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                s,
                what: format!("derivative of order {i}"),
            });
        }
        Ok(d)
    }
}

fn check_strike(strike: f64, delta_t: f64) -> Result<()> {
    if !(strike > 0.0 && strike.is_finite()) {
        return Err(Error::InvalidParam(format!("strike must be positive (got {strike})")));
    }
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "delta_T must be positive (got {delta_t})"
        )));
    }
    Ok(())
}

fn from_greeks(s: f64, g: crate::bs_engine::BsGreeks) -> [f64; 5] {
    [
        g.v0,
        g.cash_delta / s,
        g.cash_gamma / (s * s),
        g.cash_speed / (s * s * s),
        g.cash_fourth / (s * s * s * s),
    ]
}

/// j = 1 (no claim) or j = w (short the claim, physically settled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    NoClaim,
    WithClaim,
}

impl Side {
    pub fn indicator(self) -> f64 {
        match self {
            Side::NoClaim => 0.0,
            Side::WithClaim => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::NoClaim => "1",
            Side::WithClaim => "w",
        }
    }
}

/// Check that side and claim are compatible.
pub fn check_side(c: &ClaimSpec, j: Side) -> Result<()> {
    if j == Side::WithClaim && matches!(c.kind, ClaimKind::None) {
        return Err(Error::InvalidParam(
            "side w requires a claim of kind other than none".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioPoint {
    pub t: f64,
    /// Money-market balance.
    pub b: f64,
    /// Shares held.
    pub y: f64,
    /// Stock price.
    pub s: f64,
}

/// Terminal wealth Φ^(j) after liquidation and settlement at T.
pub fn terminal_wealth(p: &MarketParams, c: &ClaimSpec, j: Side, pt: &PortfolioPoint) -> Result<f64> {
    if (pt.t - p.horizon).abs() > 1e-12 * p.horizon.max(1.0) {
        return Err(Error::Domain(format!("terminal wealth needs t = T (got {})", pt.t)));
    }
    if !(pt.s > 0.0) {
        return Err(Error::Domain(format!("S must be positive (got {})", pt.s)));
    }
    Ok(match j {
        Side::NoClaim => pt.b + cash_value(pt.y, pt.s, p.epsilon),
        Side::WithClaim => {
            let d = c.derivatives(p, pt.s)?;
            pt.b + cash_value(pt.y - d[1], pt.s, p.epsilon) - (d[0] - d[1] * pt.s)
        }
    })
}

/// Assumption check on the claim and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// sup |g − g′S|
    pub sup_residual: f64,
    /// sup S²|g″|
    pub sup_cash_gamma: f64,
    /// sup |S³g‴|
    pub sup_cash_speed: f64,
    /// sup S⁴|g⁗|
    pub sup_cash_fourth: f64,
    /// e^{−rT}(μ−r)/(γσ²) − sup S²|g″|
    pub margin: f64,
    pub warnings: Vec<String>,
    pub passed: bool,
}

/// Payoff bounds and the cash-gamma margin.
pub fn validate_params(p: &MarketParams, c: &ClaimSpec) -> Result<ValidationReport> {
    let sups = [
        payoff_sup(c, p, 0)?,
        payoff_sup(c, p, 2)?,
        payoff_sup(c, p, 3)?,
        payoff_sup(c, p, 4)?,
    ];
    let sup_cg = sups[1];
    let margin = p.merton_cash(0.0) - sup_cg;
    let passed = margin > 0.0 && sups.iter().all(|v| v.is_finite());
    let mut warnings = p.warnings();
    if !passed {
        warnings.push(format!(
            "cash-gamma margin {margin:.6e} is not positive: the band may degenerate"
        ));
    }
    Ok(ValidationReport {
        sup_residual: sups[0],
        sup_cash_gamma: sups[1],
        sup_cash_speed: sups[2],
        sup_cash_fourth: sups[3],
        margin,
        warnings,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discount_factor_cases() {
        let p = MarketParams::new(0.1, 0.2, 0.05, 1.0, 1.0, 0.01).unwrap();
        assert_eq!(p.discount_factor(1.0).unwrap(), 1.0);
        assert!((p.discount_factor(0.0).unwrap() - 0.951_229_424_500_714).abs() < 1e-15);
        assert!(p.discount_factor(1.5).is_err());
        assert_eq!(MarketParams::reference(0.01).discount_factor(0.3).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let e = MarketParams::new(0.1, 0.2, 0.0, 1.0, 1.0, 1.2).unwrap_err();
        assert!(e.to_string().contains("epsilon out of (0,1)"));
    }

    #[test]
    fn utility_cases() {
        assert_eq!(utility(0.0, 1.0), -1.0);
        assert!((utility(2f64.ln(), 1.0) + 0.5).abs() < 1e-16);
    }

    #[test]
    fn cash_value_cases() {
        assert_eq!(cash_value(0.0, 3.0, 0.01), 0.0);
        assert!((cash_value(1.0, 1.0, 0.01) - 0.99).abs() < 1e-16);
        assert!((cash_value(-1.0, 1.0, 0.01) + 1.01).abs() < 1e-16);
    }

    #[test]
    fn terminal_wealth_cases() {
        let p = MarketParams::reference(0.01);
        let none = ClaimSpec::none();
        let pt = |b, y, s| PortfolioPoint { t: 1.0, b, y, s };
        assert_eq!(terminal_wealth(&p, &none, Side::NoClaim, &pt(1.0, 0.0, 1.0)).unwrap(), 1.0);
        assert!((terminal_wealth(&p, &none, Side::NoClaim, &pt(0.0, 1.0, 1.0)).unwrap() - 0.99).abs() < 1e-15);
        let lin = ClaimSpec::linear(0.5).unwrap();
        assert_eq!(terminal_wealth(&p, &lin, Side::WithClaim, &pt(0.0, 0.5, 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn side_requires_claim() {
        assert!(check_side(&ClaimSpec::none(), Side::WithClaim).is_err());
        assert!(check_side(&ClaimSpec::none(), Side::NoClaim).is_ok());
    }

    #[test]
    fn linear_claim_validates() {
        let r = validate_params(&MarketParams::reference(0.01), &ClaimSpec::linear(0.5).unwrap()).unwrap();
        assert_eq!(r.sup_cash_gamma, 0.0);
        assert!((r.margin - 0.05).abs() < 1e-16);
        assert!(r.passed);
        assert_eq!(r.warnings.len(), 1);
    }

    #[derive(Debug)]
    struct Broken;
    impl Payoff for Broken {
        fn eval(&self, s: f64) -> [f64; 5] {
            if s > 10.0 {
                [f64::NAN; 5]
            } else {
                [s, 1.0, 0.0, 0.0, 0.0]
            }
        }
    }

    #[test]
    fn non_finite_payoff_is_named() {
        let c = ClaimSpec::custom(Arc::new(Broken));
        match validate_params(&MarketParams::reference(0.01), &c) {
            Err(Error::NonFinite { s, .. }) => assert!(s > 10.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
