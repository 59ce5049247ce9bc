//! Problem data, portfolio encoding, the uniform time grid and the quadrature
//! primitives shared by the solver modules.
//!
//! Flows (trading rates) are piecewise constant on grid cells. Every other path
//! (inventories, adjoints, prices) is continuous and is carried as a
//! [`SmoothPath`]: its node values plus its values at the Gauss-Legendre points
//! of each cell, which is enough to integrate products of such paths to
//! near machine precision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid cells.
pub const DEFAULT_STEPS: usize = 200;

/// Number of Gauss-Legendre points used inside each cell.
pub const GAUSS_POINTS: usize = 4;

/// Gauss-Legendre abscissae mapped to `[0, 1]`.
pub const GAUSS_NODES: [f64; GAUSS_POINTS] = [
    0.5 * (1.0 - 0.861_136_311_594_052_6),
    0.5 * (1.0 - 0.339_981_043_584_856_3),
    0.5 * (1.0 + 0.339_981_043_584_856_3),
    0.5 * (1.0 + 0.861_136_311_594_052_6),
];

/// Gauss-Legendre weights for `[0, 1]` (they sum to one).
pub const GAUSS_WEIGHTS: [f64; GAUSS_POINTS] = [
    0.5 * 0.347_854_845_137_453_9,
    0.5 * 0.652_145_154_862_546_1,
    0.5 * 0.652_145_154_862_546_1,
    0.5 * 0.347_854_845_137_453_9,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Price drift (the trading signal).
    pub mu: f64,
    pub sigma: f64,
    /// Trading horizon `T`.
    pub horizon: f64,
    /// Broker temporary impact.
    pub kappa0: f64,
    /// Broker permanent impact.
    pub lambda0: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            sigma: 0.0,
            horizon: 1.0,
            kappa0: 0.1,
            lambda0: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub kappa: f64,
    pub lambda: f64,
    #[serde(default)]
    pub x0: f64,
}

impl AgentParams {
    pub fn new(kappa: f64, lambda: f64, x0: f64) -> Self {
        Self { kappa, lambda, x0 }
    }

    /// Permanent-to-temporary impact ratio `lambda / kappa`.
    pub fn impact_ratio(&self) -> f64 {
        self.lambda / self.kappa
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::InvalidProblem(self.violations))
        }
    }
}

/// Checks every parameter invariant and reports all violations at once.
pub fn validate_problem(market: &MarketParams, agents: &[AgentParams]) -> ValidationReport {
    let mut violations = Vec::new();
    let finite = [
        market.mu,
        market.sigma,
        market.horizon,
        market.kappa0,
        market.lambda0,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        violations.push("market parameters must be finite".to_string());
    }
    if !(market.horizon > 0.0) {
        violations.push("horizon must be positive".to_string());
    }
    if !(market.kappa0 > 0.0) {
        violations.push("kappa0 must be positive".to_string());
    }
    if !(market.sigma >= 0.0) {
        violations.push("sigma must be non-negative".to_string());
    }
    if !(market.lambda0 >= 0.0) {
        violations.push("lambda0 must be non-negative".to_string());
    }
    for (i, a) in agents.iter().enumerate() {
        if !(a.kappa > 0.0) || !a.kappa.is_finite() {
            violations.push(format!("agent {}: kappa must be positive", i + 1));
        }
        if !(a.lambda > 0.0) || !a.lambda.is_finite() {
            violations.push(format!("agent {}: lambda must be positive", i + 1));
        }
        if !a.x0.is_finite() {
            violations.push(format!("agent {}: x0 must be finite", i + 1));
        }
    }
    ValidationReport { violations }
}

/// Binary choice of clients: `theta[i] == true` iff agent `i` trades via the broker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Portfolio {
    pub theta: Vec<bool>,
}

impl Portfolio {
    pub fn new(theta: Vec<bool>) -> Self {
        Self { theta }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self::new(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn empty(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    pub fn full(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    /// Portfolio whose agent `i` is a client iff bit `i` of `mask` is set.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self::new((0..n).map(|i| mask >> i & 1 == 1).collect())
    }

    /// Binary value reading agent 1 as the most significant digit, so that
    /// ordering by this value is the lexicographic order of the bit string.
    pub fn binary_value(&self) -> u128 {
        self.theta
            .iter()
            .fold(0u128, |acc, &b| (acc << 1) | u128::from(b))
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_client(&self, i: usize) -> bool {
        self.theta[i]
    }

    pub fn n_clients(&self) -> usize {
        self.theta.iter().filter(|&&b| b).count()
    }

    pub fn has_clients(&self) -> bool {
        self.theta.iter().any(|&b| b)
    }

    /// The same portfolio with agent `i` trading independently.
    pub fn without(&self, i: usize) -> Self {
        let mut theta = self.theta.clone();
        theta[i] = false;
        Self::new(theta)
    }

    pub fn bits(&self) -> String {
        self.theta
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for Portfolio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, &b) in self.theta.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str(")")
    }
}

/// Split of the agents into independents and clients. Internally independents
/// are indexed `0..m` and clients `0..r`; both lists hold original labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub independents: Vec<usize>,
    pub clients: Vec<usize>,
}

impl Partition {
    pub fn m(&self) -> usize {
        self.independents.len()
    }

    pub fn n_agents(&self) -> usize {
        self.independents.len() + self.clients.len()
    }

    /// Internal order: independents first, then clients.
    pub fn permutation(&self) -> Vec<usize> {
        self.independents
            .iter()
            .chain(self.clients.iter())
            .copied()
            .collect()
    }

    /// Reorders values given in internal order back to original agent order.
    pub fn to_original<T: Clone>(&self, internal: &[T]) -> Vec<T> {
        let perm = self.permutation();
        let mut out: Vec<Option<T>> = vec![None; perm.len()];
        for (slot, &orig) in perm.iter().enumerate() {
            out[orig] = Some(internal[slot].clone());
        }
        out.into_iter()
            .map(|v| v.expect("permutation covers every agent"))
            .collect()
    }
}

pub fn partition(portfolio: &Portfolio) -> Partition {
    let (clients, independents): (Vec<usize>, Vec<usize>) =
        (0..portfolio.len()).partition(|&i| portfolio.is_client(i));
    Partition {
        independents,
        clients,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidProblem(vec![
                "grid must have at least one cell".to_string(),
            ]));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidProblem(vec![
                "horizon must be positive".to_string()
            ]));
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.node(k) + 0.5 * self.dt()
    }

    /// Offsets of the in-cell Gauss points from the left node.
    pub fn gauss_offsets(&self) -> [f64; GAUSS_POINTS] {
        let dt = self.dt();
        GAUSS_NODES.map(|x| x * dt)
    }

    pub fn gauss_time(&self, k: usize, g: usize) -> f64 {
        self.node(k) + GAUSS_NODES[g] * self.dt()
    }
}

/// Piecewise-constant rate: `values[k]` holds on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl FlowPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_steps {
            return Err(Error::DimensionMismatch {
                what: "flow values",
                expected: grid.n_steps,
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_steps],
        }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_steps],
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_steps).map(|k| f(grid.midpoint(k))).collect();
        Self { grid, values }
    }

    /// Cell `k` set to one, everything else zero.
    pub fn indicator(grid: TimeGrid, k: usize) -> Self {
        let mut p = Self::zeros(grid);
        p.values[k] = 1.0;
        p
    }

    /// Node values of the running integral `x0 + int_0^t flow ds`.
    pub fn inventory(&self, x0: f64) -> Vec<f64> {
        let dt = self.grid.dt();
        let mut out = Vec::with_capacity(self.values.len() + 1);
        let mut x = x0;
        out.push(x);
        for v in &self.values {
            x += v * dt;
            out.push(x);
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dt()
    }

    /// Inventory as a smooth path (exact, since it is piecewise linear).
    pub fn inventory_path(&self, x0: f64) -> SmoothPath {
        let nodes = self.inventory(x0);
        let dt = self.grid.dt();
        let inner = self
            .values
            .iter()
            .zip(&nodes)
            .map(|(v, x)| GAUSS_NODES.map(|s| x + v * s * dt))
            .collect();
        SmoothPath { nodes, inner }
    }

    /// The flow sampled at the Gauss points (constant within each cell).
    pub fn as_samples(&self) -> Vec<[f64; GAUSS_POINTS]> {
        self.values.iter().map(|&v| [v; GAUSS_POINTS]).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn axpy(&self, c: f64, other: &FlowPath) -> Self {
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A continuous path known at the grid nodes and at the in-cell Gauss points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothPath {
    pub nodes: Vec<f64>,
    pub inner: Vec<[f64; GAUSS_POINTS]>,
}

impl SmoothPath {
    pub fn zeros(grid: &TimeGrid) -> Self {
        Self {
            nodes: vec![0.0; grid.n_steps + 1],
            inner: vec![[0.0; GAUSS_POINTS]; grid.n_steps],
        }
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            nodes: grid.nodes().into_iter().map(&f).collect(),
            inner: (0..grid.n_steps)
                .map(|k| std::array::from_fn(|g| f(grid.gauss_time(k, g))))
                .collect(),
        }
    }

    pub fn terminal(&self) -> f64 {
        *self.nodes.last().expect("path has nodes")
    }

    /// Cell averages computed by the in-cell rule.
    pub fn cell_averages(&self) -> Vec<f64> {
        self.inner.iter().map(cell_mean).collect()
    }

    pub fn integral(&self, grid: &TimeGrid) -> f64 {
        let dt = grid.dt();
        self.inner.iter().map(|s| cell_mean(s) * dt).sum()
    }
}

pub fn cell_mean(samples: &[f64; GAUSS_POINTS]) -> f64 {
    samples
        .iter()
        .zip(GAUSS_WEIGHTS.iter())
        .map(|(v, w)| v * w)
        .sum()
}

/// Integrates `f` over every cell from in-cell samples and sums.
pub fn integrate_samples(grid: &TimeGrid, f: impl Fn(usize, usize) -> f64) -> f64 {
    let dt = grid.dt();
    (0..grid.n_steps)
        .map(|k| {
            (0..GAUSS_POINTS)
                .map(|g| GAUSS_WEIGHTS[g] * f(k, g))
                .sum::<f64>()
                * dt
        })
        .sum()
}

/// How the values passed to [`integrate`] sample the integrand.
#[derive(Debug, Clone, Copy)]
pub enum Integrand<'a> {
    /// One value per cell, exact for piecewise-constant integrands.
    PiecewiseConstant(&'a [f64]),
    /// One value per node, composite trapezoid rule.
    NodeSampled(&'a [f64]),
}

pub fn integrate(grid: &TimeGrid, integrand: Integrand<'_>) -> Result<f64> {
    let dt = grid.dt();
    match integrand {
        Integrand::PiecewiseConstant(v) => {
            if v.len() != grid.n_steps {
                return Err(Error::DimensionMismatch {
                    what: "cell values",
                    expected: grid.n_steps,
                    got: v.len(),
                });
            }
            Ok(v.iter().sum::<f64>() * dt)
        }
        Integrand::NodeSampled(v) => {
            if v.len() != grid.n_steps + 1 {
                return Err(Error::DimensionMismatch {
                    what: "node values",
                    expected: grid.n_steps + 1,
                    got: v.len(),
                });
            }
            let inner: f64 = v[1..v.len() - 1].iter().sum();
            Ok(dt * (0.5 * (v[0] + v[v.len() - 1]) + inner))
        }
    }
}
