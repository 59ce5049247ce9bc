//! Nash equilibrium of the independent agents for a given deterministic
//! broker order flow `u`.
//!
//! The adjoint vector `Y` solves the linear terminal-value ODE
//! `Y' = A Y + b u - mu 1`, `Y(T) = 0`, and the equilibrium rates are affine in
//! `Y` and `u`. For piecewise-constant `u` the ODE is integrated exactly cell by
//! cell with matrix exponentials and the phi-functions
//! `P1(s) = int_0^s e^{Ar} dr`, `P2(s) = int_0^s e^{A(s-r)} r dr`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    AgentParams, FlowPath, MarketParams, SmoothPath, TimeGrid, GAUSS_NODES, GAUSS_POINTS,
};

/// Coefficients of the independents' adjoint system.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrices {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gamma_tilde: DVector<f64>,
    /// Sum of the independents' `lambda / kappa` ratios.
    pub gamma: f64,
    pub kappas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub kappa0: f64,
    pub lambda0: f64,
}

impl InteractionMatrices {
    pub fn m(&self) -> usize {
        self.kappas.len()
    }

    /// `m + 1` as a float; it divides almost every coefficient.
    pub fn m1(&self) -> f64 {
        (self.m() + 1) as f64
    }
}

pub fn build_matrices(independents: &[AgentParams], market: &MarketParams) -> InteractionMatrices {
    let m = independents.len();
    let m1 = (m + 1) as f64;
    let ratios: Vec<f64> = independents.iter().map(AgentParams::impact_ratio).collect();
    let gamma: f64 = ratios.iter().sum();
    let a = DMatrix::from_fn(m, m, |i, j| {
        let shared = (gamma - ratios[i]) / m1;
        if i == j {
            shared
        } else {
            shared - ratios[j]
        }
    });
    let b = DVector::from_fn(m, |i, _| {
        (gamma - ratios[i]) * market.kappa0 / m1 - market.lambda0
    });
    let gamma_tilde = DVector::from_fn(m, |i, _| ratios[i] - gamma / m1);
    InteractionMatrices {
        a,
        b,
        gamma_tilde,
        gamma,
        kappas: independents.iter().map(|a| a.kappa).collect(),
        lambdas: independents.iter().map(|a| a.lambda).collect(),
        kappa0: market.kappa0,
        lambda0: market.lambda0,
    }
}

/// `e^{sA tau}`, `P1` and `P2` for one step length `tau`.
#[derive(Debug, Clone)]
pub struct StepMaps {
    pub exp: DMatrix<f64>,
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
}

impl StepMaps {
    fn new(a: &DMatrix<f64>, tau: f64) -> Self {
        let m = a.nrows();
        if m == 0 {
            return Self {
                exp: DMatrix::zeros(0, 0),
                p1: DMatrix::zeros(0, 0),
                p2: DMatrix::zeros(0, 0),
            };
        }
        // exp of [[A, I, 0], [0, 0, I], [0, 0, 0]] * tau carries e^{A tau},
        // P1 and P2 in its first block row.
        let mut big = DMatrix::zeros(3 * m, 3 * m);
        big.view_mut((0, 0), (m, m)).copy_from(&(a * tau));
        for i in 0..m {
            big[(i, m + i)] = tau;
            big[(m + i, 2 * m + i)] = tau;
        }
        let e = big.exp();
        Self {
            exp: e.view((0, 0), (m, m)).into_owned(),
            p1: e.view((0, m), (m, m)).into_owned(),
            p2: e.view((0, 2 * m), (m, m)).into_owned(),
        }
    }
}

/// Matrix exponential tables for one `(A, grid)` pair.
#[derive(Debug, Clone)]
pub struct ExpTable {
    pub grid: TimeGrid,
    /// `e^{A t_k}` for every node.
    pub forward: Vec<DMatrix<f64>>,
    /// `e^{-A t_k}` for every node.
    pub backward: Vec<DMatrix<f64>>,
    /// Step maps of `+A` at the Gauss offsets followed by the full cell.
    pub step_plus: Vec<StepMaps>,
    /// Step maps of `-A` at the same offsets.
    pub step_minus: Vec<StepMaps>,
}

impl ExpTable {
    /// Index of the full-cell entry in `step_plus` / `step_minus`.
    pub const CELL: usize = GAUSS_POINTS;

    pub fn m(&self) -> usize {
        self.forward.first().map_or(0, |e| e.nrows())
    }

    pub fn cell_plus(&self) -> &StepMaps {
        &self.step_plus[Self::CELL]
    }

    pub fn cell_minus(&self) -> &StepMaps {
        &self.step_minus[Self::CELL]
    }
}

fn dense_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        a.exp()
    }
}

pub fn exp_table(a: &DMatrix<f64>, grid: &TimeGrid) -> ExpTable {
    let neg = -a;
    let nodes = grid.nodes();
    let forward = nodes.iter().map(|&t| dense_exp(&(a * t))).collect();
    let backward = nodes.iter().map(|&t| dense_exp(&(&neg * t))).collect();
    let mut offsets: Vec<f64> = grid.gauss_offsets().to_vec();
    offsets.push(grid.dt());
    ExpTable {
        grid: *grid,
        forward,
        backward,
        step_plus: offsets.iter().map(|&s| StepMaps::new(a, s)).collect(),
        step_minus: offsets.iter().map(|&s| StepMaps::new(&neg, s)).collect(),
    }
}

/// Adjoint vector sampled at nodes and Gauss points, with the running
/// integrals needed by inventories and by the broker's gradient.
#[derive(Debug, Clone)]
pub struct AdjointPaths {
    pub nodes: Vec<DVector<f64>>,
    pub inner: Vec<[DVector<f64>; GAUSS_POINTS]>,
    /// `int_{t_k}^{t_k + tau_g} Y ds`.
    pub partial: Vec<[DVector<f64>; GAUSS_POINTS]>,
    /// `int` of `Y` over each cell.
    pub cell: Vec<DVector<f64>>,
}

impl AdjointPaths {
    /// Component `i` as a scalar smooth path.
    pub fn component(&self, i: usize) -> SmoothPath {
        SmoothPath {
            nodes: self.nodes.iter().map(|y| y[i]).collect(),
            inner: self
                .inner
                .iter()
                .map(|s| std::array::from_fn(|g| s[g][i]))
                .collect(),
        }
    }
}

/// Backward solve of `Y' = A Y + b u - mu 1`, `Y(T) = 0`, exact for
/// piecewise-constant `u`.
pub fn solve_y(
    mats: &InteractionMatrices,
    table: &ExpTable,
    u: &FlowPath,
    mu: f64,
) -> AdjointPaths {
    let grid = table.grid;
    let n = grid.n_steps;
    let m = mats.m();
    let ones = DVector::from_element(m, 1.0);
    let cell_p = table.cell_plus();
    let cell_m = table.cell_minus();
    let drive = |k: usize| &mats.b * u.values[k] - &ones * mu;

    let mut nodes = vec![DVector::zeros(m); n + 1];
    for k in (0..n).rev() {
        let c = drive(k);
        nodes[k] = &cell_m.exp * (&nodes[k + 1] - &cell_p.p1 * &c);
    }
    let mut inner = Vec::with_capacity(n);
    let mut partial = Vec::with_capacity(n);
    let mut cell = Vec::with_capacity(n);
    for k in 0..n {
        let c = drive(k);
        let yk = &nodes[k];
        inner.push(std::array::from_fn(|g| {
            let s = &table.step_plus[g];
            &s.exp * yk + &s.p1 * &c
        }));
        partial.push(std::array::from_fn(|g| {
            let s = &table.step_plus[g];
            &s.p1 * yk + &s.p2 * &c
        }));
        cell.push(&cell_p.p1 * yk + &cell_p.p2 * &c);
    }
    AdjointPaths {
        nodes,
        inner,
        partial,
        cell,
    }
}

/// Equilibrium rate of every independent from the adjoint vector `y` and the
/// broker rate `u` at one instant.
pub fn rates_at(mats: &InteractionMatrices, y: &DVector<f64>, u: f64) -> Vec<f64> {
    let m1 = mats.m1();
    let total: f64 = y.iter().sum();
    mats.kappas
        .iter()
        .enumerate()
        .map(|(i, k)| (m1 * y[i] - total - mats.kappa0 * u) / (k * m1))
        .collect()
}

/// Equilibrium rates sampled at the Gauss points, plus their cell averages.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumRates {
    pub samples: Vec<Vec<[f64; GAUSS_POINTS]>>,
    pub averages: Vec<FlowPath>,
}

pub fn equilibrium_rates(
    mats: &InteractionMatrices,
    y: &AdjointPaths,
    u: &FlowPath,
) -> EquilibriumRates {
    let m = mats.m();
    let grid = u.grid;
    let dt = grid.dt();
    let n = grid.n_steps;
    let mut samples = vec![vec![[0.0; GAUSS_POINTS]; n]; m];
    let mut averages = vec![vec![0.0; n]; m];
    for k in 0..n {
        for g in 0..GAUSS_POINTS {
            for (i, v) in rates_at(mats, &y.inner[k][g], u.values[k])
                .into_iter()
                .enumerate()
            {
                samples[i][k][g] = v;
            }
        }
        let mean = &y.cell[k] / dt;
        for (i, v) in rates_at(mats, &mean, u.values[k]).into_iter().enumerate() {
            averages[i][k] = v;
        }
    }
    EquilibriumRates {
        samples,
        averages: averages
            .into_iter()
            .map(|values| FlowPath { grid, values })
            .collect(),
    }
}

/// Sup over agents and Gauss points of the individual first-order condition
/// `nu_i = (Y_i - sum_{j != i} kappa_j nu_j - kappa0 u) / (2 kappa_i)`.
pub fn foc_residual(
    mats: &InteractionMatrices,
    y: &[SmoothPath],
    nu: &[Vec<[f64; GAUSS_POINTS]>],
    u: &FlowPath,
) -> Result<f64> {
    let m = mats.m();
    if y.len() != m || nu.len() != m {
        return Err(Error::DimensionMismatch {
            what: "independent paths",
            expected: m,
            got: y.len().min(nu.len()),
        });
    }
    let mut worst = 0.0f64;
    for k in 0..u.grid.n_steps {
        for g in 0..GAUSS_POINTS {
            let weighted: f64 = (0..m).map(|j| mats.kappas[j] * nu[j][k][g]).sum();
            for i in 0..m {
                let others = weighted - mats.kappas[i] * nu[i][k][g];
                let target = (y[i].inner[k][g] - others - mats.kappa0 * u.values[k])
                    / (2.0 * mats.kappas[i]);
                worst = worst.max((nu[i][k][g] - target).abs());
            }
        }
    }
    Ok(worst)
}

/// Full equilibrium of the independents for one broker flow.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub u: FlowPath,
    pub adjoint: AdjointPaths,
    /// Adjoint components as scalar paths, one per independent.
    pub y: Vec<SmoothPath>,
    pub rates: EquilibriumRates,
    /// Inventories of the independents, one per independent.
    pub inventories: Vec<SmoothPath>,
}

impl EquilibriumSolution {
    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn foc_residual(&self, mats: &InteractionMatrices) -> f64 {
        foc_residual(mats, &self.y, &self.rates.samples, &self.u).expect("consistent dimensions")
    }
}

/// Solves the adjoint system, the equilibrium rates and the resulting
/// inventories. `x0` holds the independents' initial inventories.
pub fn solve_equilibrium(
    mats: &InteractionMatrices,
    table: &ExpTable,
    u: &FlowPath,
    mu: f64,
    x0: &[f64],
) -> Result<EquilibriumSolution> {
    let m = mats.m();
    if x0.len() != m {
        return Err(Error::DimensionMismatch {
            what: "independent initial inventories",
            expected: m,
            got: x0.len(),
        });
    }
    if u.grid != table.grid {
        return Err(Error::DimensionMismatch {
            what: "flow grid cells",
            expected: table.grid.n_steps,
            got: u.grid.n_steps,
        });
    }
    let adjoint = solve_y(mats, table, u, mu);
    let rates = equilibrium_rates(mats, &adjoint, u);
    let grid = u.grid;
    let offsets = GAUSS_NODES.map(|s| s * grid.dt());
    let mut inventories = Vec::with_capacity(m);
    for i in 0..m {
        let mut nodes = Vec::with_capacity(grid.n_steps + 1);
        let mut inner = Vec::with_capacity(grid.n_steps);
        let mut x = x0[i];
        nodes.push(x);
        for k in 0..grid.n_steps {
            let uk = u.values[k];
            let traded = |int_y: &DVector<f64>, span: f64| {
                let total: f64 = int_y.iter().sum();
                (mats.m1() * int_y[i] - total - mats.kappa0 * uk * span)
                    / (mats.kappas[i] * mats.m1())
            };
            inner.push(std::array::from_fn(|g| {
                x + traded(&adjoint.partial[k][g], offsets[g])
            }));
            x += traded(&adjoint.cell[k], grid.dt());
            nodes.push(x);
        }
        inventories.push(SmoothPath { nodes, inner });
    }
    let y = (0..m).map(|i| adjoint.component(i)).collect();
    Ok(EquilibriumSolution {
        u: u.clone(),
        adjoint,
        y,
        rates,
        inventories,
    })
}

/// Shared, immutable exponential tables.
pub type SharedExpTable = Arc<ExpTable>;

#[cfg(test)]
mod tests {
    use super::*;

    fn market(kappa0: f64, lambda0: f64) -> MarketParams {
        MarketParams {
            mu: 1.0,
            sigma: 0.0,
            horizon: 1.0,
            kappa0,
            lambda0,
        }
    }

    #[test]
    fn single_agent_matrices_collapse() {
        let mats = build_matrices(&[AgentParams::new(0.1, 0.01, 0.0)], &market(0.1, 1e-3));
        assert!((mats.gamma - 0.1).abs() < 1e-15);
        assert_eq!(mats.a[(0, 0)], 0.0);
        assert!((mats.b[0] + 1e-3).abs() < 1e-15);
        assert!((mats.gamma_tilde[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn two_agent_matrices() {
        let agents = [AgentParams::new(0.1, 0.01, 0.0); 2];
        let mats = build_matrices(&agents, &market(0.1, 1e-3));
        assert!((mats.gamma - 0.2).abs() < 1e-15);
        assert!((mats.a[(0, 0)] - 0.1 / 3.0).abs() < 1e-15);
        assert!((mats.a[(0, 1)] - (-0.1 + 0.1 / 3.0)).abs() < 1e-15);
        assert!((mats.gamma_tilde[1] - (0.1 - 0.2 / 3.0)).abs() < 1e-15);
        assert!((mats.b[0] - (0.1 * 0.1 / 3.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn empty_matrices() {
        let mats = build_matrices(&[], &market(0.1, 1e-3));
        assert_eq!(mats.m(), 0);
        assert_eq!(mats.gamma, 0.0);
        assert_eq!(mats.a.nrows(), 0);
    }

    #[test]
    fn zero_matrix_exponential_is_identity() {
        let grid = TimeGrid::new(8, 1.0).unwrap();
        let t = exp_table(&DMatrix::zeros(1, 1), &grid);
        assert!(t.forward.iter().all(|e| (e[(0, 0)] - 1.0).abs() < 1e-15));
        assert!(t.backward.iter().all(|e| (e[(0, 0)] - 1.0).abs() < 1e-15));
        // P1 = tau, P2 = tau^2 / 2 for A = 0
        let dt = grid.dt();
        assert!((t.cell_plus().p1[(0, 0)] - dt).abs() < 1e-15);
        assert!((t.cell_plus().p2[(0, 0)] - dt * dt / 2.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_exponential() {
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -1.2]));
        let t = exp_table(&a, &grid);
        for (k, tk) in grid.nodes().into_iter().enumerate() {
            assert!((t.forward[k][(0, 0)] - (0.3 * tk).exp()).abs() < 1e-14);
            assert!((t.forward[k][(1, 1)] - (-1.2 * tk).exp()).abs() < 1e-14);
            assert!(t.forward[k][(0, 1)].abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_phi_functions() {
        let grid = TimeGrid::new(4, 1.0).unwrap();
        let a = 0.7;
        let t = exp_table(&DMatrix::from_element(1, 1, a), &grid);
        let s = grid.dt();
        let p1 = ((a * s).exp() - 1.0) / a;
        let p2 = ((a * s).exp() - 1.0 - a * s) / (a * a);
        assert!((t.cell_plus().p1[(0, 0)] - p1).abs() < 1e-15);
        assert!((t.cell_plus().p2[(0, 0)] - p2).abs() < 1e-15);
    }

    #[test]
    fn adjoint_is_linear_decay_without_interaction() {
        let mats = build_matrices(&[AgentParams::new(0.1, 0.01, 0.0)], &market(0.1, 0.0));
        let grid = TimeGrid::new(20, 1.0).unwrap();
        let table = exp_table(&mats.a, &grid);
        let y = solve_y(&mats, &table, &FlowPath::zeros(grid), 1.0);
        for (k, t) in grid.nodes().into_iter().enumerate() {
            assert!((y.nodes[k][0] - (1.0 - t)).abs() < 1e-14);
        }
        assert!(y.nodes[grid.n_steps][0].abs() < 1e-15);
    }

    #[test]
    fn no_drive_means_no_trading() {
        let agents = [
            AgentParams::new(0.1, 0.01, 0.0),
            AgentParams::new(0.2, 0.03, 0.0),
        ];
        let mats = build_matrices(&agents, &market(0.1, 1e-3));
        let grid = TimeGrid::new(16, 1.0).unwrap();
        let table = exp_table(&mats.a, &grid);
        let eq =
            solve_equilibrium(&mats, &table, &FlowPath::zeros(grid), 0.0, &[0.0, 0.0]).unwrap();
        assert!(eq.y.iter().all(|p| p.nodes.iter().all(|v| *v == 0.0)));
        assert!(eq.rates.averages.iter().all(|f| f.sup_norm() == 0.0));
    }

    #[test]
    fn single_agent_rate_is_half_adjoint_over_kappa() {
        let mats = build_matrices(&[AgentParams::new(0.1, 0.01, 0.0)], &market(0.1, 0.0));
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let table = exp_table(&mats.a, &grid);
        let eq = solve_equilibrium(&mats, &table, &FlowPath::zeros(grid), 1.0, &[0.0]).unwrap();
        for k in 0..grid.n_steps {
            for g in 0..GAUSS_POINTS {
                let t = grid.gauss_time(k, g);
                assert!((eq.rates.samples[0][k][g] - 5.0 * (1.0 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn foc_residual_detects_unit_perturbation() {
        let agents = [AgentParams::new(0.1, 0.01, 0.0); 2];
        let mats = build_matrices(&agents, &market(0.1, 1e-3));
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let table = exp_table(&mats.a, &grid);
        let u = FlowPath::constant(grid, 1.0);
        let eq = solve_equilibrium(&mats, &table, &u, 1.0, &[0.0, 0.0]).unwrap();
        assert!(eq.foc_residual(&mats) <= 1e-10);
        let mut nu = eq.rates.samples.clone();
        for g in 0..GAUSS_POINTS {
            nu[0][3][g] += 1.0;
        }
        let r = foc_residual(&mats, &eq.y, &nu, &u).unwrap();
        // the perturbed agent passes the unit shift straight through; the other
        // sees kappa_1 / (2 kappa_2) = 0.5
        assert!((r - 1.0).abs() < 1e-10, "residual {r}");
    }

    #[test]
    fn foc_residual_of_empty_set_is_zero() {
        let mats = build_matrices(&[], &market(0.1, 1e-3));
        let grid = TimeGrid::new(4, 1.0).unwrap();
        assert_eq!(
            foc_residual(&mats, &[], &[], &FlowPath::zeros(grid)).unwrap(),
            0.0
        );
    }

    #[test]
    fn aggregation_identity_holds() {
        let agents = [
            AgentParams::new(0.1, 0.01, 0.0),
            AgentParams::new(0.05, 0.02, 0.0),
            AgentParams::new(0.2, 0.005, 0.0),
        ];
        let mats = build_matrices(&agents, &market(0.07, 2e-3));
        let grid = TimeGrid::new(12, 1.0).unwrap();
        let table = exp_table(&mats.a, &grid);
        let u = FlowPath::from_fn(grid, |t| 1.0 - 2.0 * t);
        let eq = solve_equilibrium(&mats, &table, &u, 1.3, &[0.0; 3]).unwrap();
        let m = 3.0;
        for k in 0..grid.n_steps {
            for g in 0..GAUSS_POINTS {
                let lhs: f64 = (0..3)
                    .map(|j| mats.kappas[j] * eq.rates.samples[j][k][g])
                    .sum();
                let ysum: f64 = (0..3).map(|j| eq.y[j].inner[k][g]).sum();
                let rhs = (ysum - m * mats.kappa0 * u.values[k]) / (m + 1.0);
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
