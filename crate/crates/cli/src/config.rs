use indiff_core::hjb_oracle::{ConstraintMode, GridSpec};
use indiff_core::market_model::{ClaimSpec, MarketParams, Side};
use indiff_core::verifier::VerifyGrid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Scenario read from a flat dotted-key TOML file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub market: MarketSection,
    pub claim: ClaimSection,
    pub run: RunSection,
    pub price: PriceSection,
    pub band: BandSection,
    pub simulate: SimulateSection,
    pub oracle: OracleSection,
    pub verify: VerifySection,
    pub figure1: Figure1Section,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSection {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub horizon: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        let p = MarketParams::reference(1e-3);
        MarketSection {
            mu: p.mu,
            sigma: p.sigma,
            r: p.r,
            horizon: p.horizon,
            gamma: p.gamma,
            epsilon: p.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKindName {
    None,
    Call,
    Put,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaimSection {
    pub kind: ClaimKindName,
    pub strike: f64,
    pub delta_t: f64,
    pub coeff: f64,
}

impl Default for ClaimSection {
    fn default() -> Self {
        ClaimSection {
            kind: ClaimKindName::Call,
            strike: 1.0,
            delta_t: 1.0,
            coeff: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideName {
    #[serde(rename = "no_claim", alias = "1")]
    NoClaim,
    #[serde(rename = "with_claim", alias = "w")]
    WithClaim,
}

impl From<SideName> for Side {
    fn from(s: SideName) -> Side {
        match s {
            SideName::NoClaim => Side::NoClaim,
            SideName::WithClaim => Side::WithClaim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub sides: Vec<SideName>,
    /// Refuse to run when the cash-gamma admissibility margin is not positive.
    pub enforce_assumptions: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 20240601,
            sides: vec![SideName::NoClaim, SideName::WithClaim],
            enforce_assumptions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceSection {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl Default for PriceSection {
    fn default() -> Self {
        PriceSection {
            s: vec![1.0],
            t: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandSection {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    pub t: Vec<f64>,
}

impl Default for BandSection {
    fn default() -> Self {
        BandSection {
            s_min: 0.5,
            s_max: 2.0,
            n_s: 16,
            t: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Band,
    FrictionlessTarget,
    NoRebalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub antithetic: bool,
    pub policy: PolicyName,
    pub s0: f64,
    pub t0: f64,
    pub b0: f64,
    /// Initial holding; the frictionless target y* when absent.
    pub y0: Option<f64>,
    pub trace_paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n_paths: 100_000,
            n_steps: 2000,
            antithetic: false,
            policy: PolicyName::Band,
            s0: 1.0,
            t0: 0.0,
            b0: 0.0,
            y0: None,
            trace_paths: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Projection,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n_s: usize,
    pub n_y: usize,
    pub n_t: usize,
    /// Reporting window in S; [K/2, 2K] when absent.
    pub window: Option<[f64; 2]>,
    pub pad_decades: f64,
    pub slices: usize,
    pub min_band_nodes: usize,
    pub mode: ModeName,
    pub rho: f64,
    /// Solve a half-resolution lattice for the error estimate.
    pub coarse: bool,
    pub s: f64,
    /// Cost levels to solve; `market.epsilon` alone when empty.
    pub epsilons: Vec<f64>,
    pub min_fraction: f64,
    pub slope_range: [f64; 2],
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = GridSpec::desk(&ClaimSpec::none());
        OracleSection {
            n_s: d.n_s,
            n_y: d.n_y,
            n_t: d.n_t,
            window: None,
            pad_decades: d.pad_decades,
            slices: d.slices,
            min_band_nodes: d.min_band_nodes,
            mode: ModeName::Projection,
            rho: 1e8,
            coarse: true,
            s: 1.0,
            epsilons: Vec::new(),
            min_fraction: 0.99,
            slope_range: [0.60, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub n_s: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub window: Option<[f64; 2]>,
    pub samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            n_s: 32,
            n_y: 32,
            n_t: 9,
            window: None,
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Figure1Section {
    pub delta_t: Vec<f64>,
    pub s: f64,
}

impl Default for Figure1Section {
    fn default() -> Self {
        Figure1Section {
            delta_t: vec![0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0],
            s: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the resolved configuration, defaults included.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("configuration serializes");
        Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn market(&self) -> Result<MarketParams, CliError> {
        let m = &self.market;
        MarketParams::new(m.mu, m.sigma, m.r, m.horizon, m.gamma, m.epsilon).map_err(config_err)
    }

    pub fn claim(&self) -> Result<ClaimSpec, CliError> {
        let c = &self.claim;
        match c.kind {
            ClaimKindName::None => Ok(ClaimSpec::none()),
            ClaimKindName::Call => ClaimSpec::mollified_call(c.strike, c.delta_t),
            ClaimKindName::Put => ClaimSpec::mollified_put(c.strike, c.delta_t),
            ClaimKindName::Linear => ClaimSpec::linear(c.coeff),
        }
        .map_err(config_err)
    }

    pub fn sides(&self) -> Result<Vec<Side>, CliError> {
        if self.run.sides.is_empty() {
            return Err(CliError::Config("run.sides is empty".into()));
        }
        Ok(self.run.sides.iter().map(|&s| s.into()).collect())
    }

    pub fn grid_spec(&self, c: &ClaimSpec) -> Result<GridSpec, CliError> {
        let o = &self.oracle;
        let k = c.scale();
        let window = o.window.map(|w| (w[0], w[1])).unwrap_or((0.5 * k, 2.0 * k));
        if !(window.0 > 0.0 && window.1 > window.0) {
            return Err(CliError::Config(format!("oracle.window {window:?} is not an increasing positive pair")));
        }
        Ok(GridSpec {
            n_s: o.n_s,
            n_y: o.n_y,
            n_t: o.n_t,
            window,
            pad_decades: o.pad_decades,
            mode: match o.mode {
                ModeName::Projection => ConstraintMode::Projection,
                ModeName::Penalty => ConstraintMode::Penalty { rho: o.rho },
            },
            slices: o.slices,
            min_band_nodes: o.min_band_nodes,
            ..GridSpec::desk(c)
        })
    }

    pub fn verify_grid(&self, c: &ClaimSpec) -> Result<VerifyGrid, CliError> {
        let v = &self.verify;
        let base = VerifyGrid::standard(c);
        let window = v.window.map(|w| (w[0], w[1])).unwrap_or(base.window);
        if !(window.0 > 0.0 && window.1 > window.0) {
            return Err(CliError::Config(format!("verify.window {window:?} is not an increasing positive pair")));
        }
        Ok(VerifyGrid {
            n_s: v.n_s,
            n_y: v.n_y,
            n_t: v.n_t,
            window,
        })
    }
}

fn config_err(e: indiff_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ScenarioConfig::parse("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn dotted_and_sectioned_keys_agree() {
        let a = ScenarioConfig::parse("market.epsilon = 0.01\nclaim.kind = \"put\"\n").unwrap();
        let b = ScenarioConfig::parse("[market]\nepsilon = 0.01\n[claim]\nkind = \"put\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.market.epsilon, 0.01);
        assert_eq!(a.claim.kind, ClaimKindName::Put);
    }

    #[test]
    fn unknown_key_is_reported_with_its_line() {
        let err = ScenarioConfig::parse("market.mu = 0.1\nmarket.sigmaa = 1.0\n").unwrap_err();
        let CliError::Config(msg) = err else { panic!("{err:?}") };
        assert!(msg.contains("sigmaa") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn side_aliases() {
        let c = ScenarioConfig::parse("run.sides = [\"w\", \"no_claim\"]").unwrap();
        assert_eq!(c.sides().unwrap(), vec![Side::WithClaim, Side::NoClaim]);
    }

    #[test]
    fn hash_ignores_layout() {
        let a = ScenarioConfig::parse("market.mu = 0.2").unwrap();
        let b = ScenarioConfig::parse("# comment\n[market]\nmu   = 0.2\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ScenarioConfig::default().hash());
    }
}
