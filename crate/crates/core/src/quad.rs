//! Cached Gauss rules in the forms used across the crate.

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;
use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights for E[F(Z)], Z ~ N(0,1).
#[derive(Debug)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// Nodes and weights on [-1, 1].
#[derive(Debug)]
pub struct UnitRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn normal_rule(n: usize) -> Arc<NormalRule> {
    static RULES: OnceLock<Mutex<HashMap<usize, Arc<NormalRule>>>> = OnceLock::new();
    let map = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = map.lock().expect("rule cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let gh = GaussHermite::new(NonZeroUsize::new(n).expect("n > 0"));
            let s = std::f64::consts::PI.sqrt();
            let (nodes, weights) = gh
                .as_node_weight_pairs()
                .iter()
                .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / s))
                .unzip();
            Arc::new(NormalRule { nodes, weights })
        })
        .clone()
}

pub fn unit_rule(n: usize) -> Arc<UnitRule> {
    static RULES: OnceLock<Mutex<HashMap<usize, Arc<UnitRule>>>> = OnceLock::new();
    let map = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = map.lock().expect("rule cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let gl = GaussLegendre::new(NonZeroUsize::new(n).expect("n > 0"));
            let (nodes, weights) = gl.as_node_weight_pairs().iter().copied().unzip();
            Arc::new(UnitRule { nodes, weights })
        })
        .clone()
}
