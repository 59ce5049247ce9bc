//! The broker's reduced objective, its gradient and the optimal deterministic
//! order flow for a fixed portfolio of clients.
//!
//! Three evaluations of the objective are provided: the forward form (built
//! from `C`, `D`, `E`), the backward form (built from the adjoint `Y`) and the
//! direct form before integration by parts. They agree up to quadrature error
//! and are cross-checked in the tests.
//!
//! The solver does not iterate on the gradient. Every flow-dependent term
//! reduces to the scalar kernels `h(s) = gt' e^{-As} b` and
//! `h1(s) = gt' e^{-As} 1` (with `gt` the tilde-gamma vector), so the discrete
//! objective `c + L'u + u'Hu/2` is assembled exactly from iterated integrals of
//! those kernels on the lag grid.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    build_matrices, exp_table, solve_y, AdjointPaths, ExpTable, InteractionMatrices,
};
use crate::error::{Error, Result};
use crate::model::{
    partition, validate_problem, AgentParams, FlowPath, MarketParams, Partition, Portfolio,
    SmoothPath, TimeGrid, GAUSS_POINTS, GAUSS_WEIGHTS,
};

/// Largest grid solved by a dense factorization; finer grids use conjugate
/// gradients.
pub const DENSE_LIMIT: usize = 512;

/// Relative tolerance on the gradient density at the optimum.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Wellposedness {
    pub holds: bool,
    pub margin: f64,
    /// Spectral norm of `A`.
    pub norm_a: f64,
    pub frobenius_a: f64,
}

/// Sufficient concavity condition
/// `2 |gt| |b| e^{|A| T} T^2 + lambda0 T / 2 < kappa0`.
pub fn check_wellposedness(mats: &InteractionMatrices, market: &MarketParams) -> Wellposedness {
    let t = market.horizon;
    let norm_a = if mats.m() == 0 {
        0.0
    } else {
        mats.a
            .clone()
            .singular_values()
            .iter()
            .fold(0.0f64, |acc, s| acc.max(*s))
    };
    let frobenius_a = mats.a.norm();
    debug_assert!(norm_a <= frobenius_a * (1.0 + 1e-12) + 1e-300);
    let bound = 2.0 * mats.gamma_tilde.norm() * mats.b.norm() * (norm_a * t).exp() * t * t
        + market.lambda0 * t / 2.0;
    let margin = market.kappa0 - bound;
    Wellposedness {
        holds: margin > 0.0,
        margin,
        norm_a,
        frobenius_a,
    }
}

/// How strictly `solve_optimal_flow` enforces well-posedness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcavityGate {
    /// Require the sufficient condition itself.
    Assumption,
    /// Accept the sufficient condition, or a successful Cholesky factorization
    /// of the negated discrete Hessian.
    #[default]
    Certified,
}

/// Iterated integrals of the kernels on the lag grid `s_j = j dt`, `j = 0..=n`.
/// `h2[j]` is the second antiderivative of `h` at `s_j`, and so on.
#[derive(Debug, Clone)]
struct LagIntegrals {
    h2: Vec<f64>,
    h3: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
}

fn lag_integrals(mats: &InteractionMatrices, grid: &TimeGrid) -> LagIntegrals {
    let n = grid.n_steps;
    let m = mats.m();
    if m == 0 {
        return LagIntegrals {
            h2: vec![0.0; n + 1],
            h3: vec![0.0; n + 1],
            s2: vec![0.0; n + 1],
            s3: vec![0.0; n + 1],
        };
    }
    let dt = grid.dt();
    // exp of [[-A, I, 0, 0], [0, 0, I, 0], [0, 0, 0, I], [0, 0, 0, 0]] dt has
    // e^{-A dt} and its first three iterated integrals in the first block row.
    let mut big = DMatrix::zeros(4 * m, 4 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&(-&mats.a * dt));
    for blk in 0..3 {
        for i in 0..m {
            big[(blk * m + i, (blk + 1) * m + i)] = dt;
        }
    }
    let step_t = big.exp().transpose();
    let ones = DVector::from_element(m, 1.0);
    let mut row = DVector::zeros(4 * m);
    row.rows_mut(0, m).copy_from(&mats.gamma_tilde);
    let mut out = LagIntegrals {
        h2: Vec::with_capacity(n + 1),
        h3: Vec::with_capacity(n + 1),
        s2: Vec::with_capacity(n + 1),
        s3: Vec::with_capacity(n + 1),
    };
    for j in 0..=n {
        if j > 0 {
            row = &step_t * &row;
        }
        let i2 = row.rows(2 * m, m);
        let i3 = row.rows(3 * m, m);
        out.h2.push(i2.dot(&mats.b));
        out.h3.push(i3.dot(&mats.b));
        out.s2.push(i2.dot(&ones));
        out.s3.push(i3.dot(&ones));
    }
    out
}

/// The discrete objective `c + L'u + u'Hu/2` over cell values of `u`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn value(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        self.constant + self.linear.dot(&u) + 0.5 * u.dot(&(&self.hessian * &u))
    }
}

/// Everything about one portfolio that does not depend on the broker flow.
#[derive(Debug, Clone)]
pub struct BrokerObjectiveContext {
    pub market: MarketParams,
    pub grid: TimeGrid,
    pub portfolio: Portfolio,
    pub partition: Partition,
    pub mats: InteractionMatrices,
    pub table: Arc<ExpTable>,
    /// Aggregate initial inventory of the clients.
    pub x0_total: f64,
    /// Sum of `1 / lambda_i` over the clients.
    pub inv_lambda_sum: f64,
    /// Sum of the clients' reservation values.
    pub reservation_sum: f64,
    /// Adjoint for a zero broker flow; this is the `C` path of the forward form.
    pub c_path: AdjointPaths,
    wellposedness: Wellposedness,
    /// Coefficient of `(X0_T)^2 / 2`.
    k_terminal: f64,
    /// Coefficient of `x0 X0_T`.
    k_cross: f64,
    gamma_c: Vec<[f64; GAUSS_POINTS]>,
    gamma_r: Vec<[f64; GAUSS_POINTS]>,
    /// `gt' e^{A t}` at the Gauss points of each cell.
    rho: Vec<[DVector<f64>; GAUSS_POINTS]>,
    /// `e^{-A t_k} P1(-A, tau) b` at the Gauss offsets, then the full cell.
    beta: Vec<[DVector<f64>; GAUSS_POINTS + 1]>,
    /// `gt' int_0^T e^{At} dt`.
    int_exp_row: DVector<f64>,
    /// `P1(-A, tau) b` and `P2(-A, tau) b`, Gauss offsets then the full cell.
    p1b: Vec<DVector<f64>>,
    p2b: Vec<DVector<f64>>,
    lags: LagIntegrals,
}

impl BrokerObjectiveContext {
    pub fn new(
        market: &MarketParams,
        agents: &[AgentParams],
        portfolio: &Portfolio,
        grid: TimeGrid,
    ) -> Result<Self> {
        validate_problem(market, agents).into_result()?;
        if portfolio.len() != agents.len() {
            return Err(Error::DimensionMismatch {
                what: "portfolio length",
                expected: agents.len(),
                got: portfolio.len(),
            });
        }
        if !portfolio.has_clients() {
            return Err(Error::EmptyClientSet);
        }
        if (grid.horizon - market.horizon).abs() > 1e-12 * market.horizon {
            return Err(Error::InvalidProblem(vec![
                "grid horizon differs from the market horizon".to_string(),
            ]));
        }
        let part = partition(portfolio);
        let independents: Vec<AgentParams> = part.independents.iter().map(|&i| agents[i]).collect();
        let mats = build_matrices(&independents, market);
        let table = Arc::new(exp_table(&mats.a, &grid));
        Ok(Self::with_table(
            market, agents, portfolio, part, mats, table,
        ))
    }

    fn with_table(
        market: &MarketParams,
        agents: &[AgentParams],
        portfolio: &Portfolio,
        part: Partition,
        mats: InteractionMatrices,
        table: Arc<ExpTable>,
    ) -> Self {
        let grid = table.grid;
        let n = grid.n_steps;
        let m = mats.m();
        let m1 = mats.m1();
        let x0_total: f64 = part.clients.iter().map(|&i| agents[i].x0).sum();
        let inv_lambda_sum: f64 = part.clients.iter().map(|&i| 1.0 / agents[i].lambda).sum();
        let k_terminal = market.lambda0 / m1
            - 2.0 * mats.gamma * market.kappa0 / (m1 * m1)
            - 1.0 / inv_lambda_sum;
        let k_cross = market.lambda0 - mats.gamma * market.kappa0 / m1 - 1.0 / inv_lambda_sum;
        let gt = &mats.gamma_tilde;

        let c_path = solve_y(&mats, &table, &FlowPath::zeros(grid), market.mu);
        let gamma_c = c_path
            .inner
            .iter()
            .map(|s| std::array::from_fn(|g| gt.dot(&s[g])))
            .collect();

        let mut p1b: Vec<DVector<f64>> = table.step_minus.iter().map(|s| &s.p1 * &mats.b).collect();
        let mut p2b: Vec<DVector<f64>> = table.step_minus.iter().map(|s| &s.p2 * &mats.b).collect();
        if m == 0 {
            p1b.iter_mut().for_each(|v| *v = DVector::zeros(0));
            p2b.iter_mut().for_each(|v| *v = DVector::zeros(0));
        }

        let mut gamma_r = Vec::with_capacity(n);
        let mut r = DVector::zeros(m);
        let cell_minus = table.cell_minus();
        for _ in 0..n {
            gamma_r.push(std::array::from_fn(|g| {
                gt.dot(&(&table.step_minus[g].exp * &r + &p1b[g]))
            }));
            r = &cell_minus.exp * &r + &p1b[ExpTable::CELL];
        }

        let mut rho = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut int_exp_row = DVector::zeros(m);
        for k in 0..n {
            let row = table.forward[k].tr_mul(gt);
            rho.push(std::array::from_fn(|g| table.step_plus[g].exp.tr_mul(&row)));
            int_exp_row += table.cell_plus().p1.tr_mul(&row);
            beta.push(std::array::from_fn(|g| &table.backward[k] * &p1b[g]));
        }

        let lags = lag_integrals(&mats, &grid);
        let wellposedness = check_wellposedness(&mats, market);
        Self {
            market: *market,
            grid,
            portfolio: portfolio.clone(),
            partition: part,
            mats,
            table,
            x0_total,
            inv_lambda_sum,
            reservation_sum: 0.0,
            c_path,
            wellposedness,
            k_terminal,
            k_cross,
            gamma_c,
            gamma_r,
            rho,
            beta,
            int_exp_row,
            p1b,
            p2b,
            lags,
        }
    }

    pub fn with_reservation_sum(mut self, reservation_sum: f64) -> Self {
        self.reservation_sum = reservation_sum;
        self
    }

    pub fn m(&self) -> usize {
        self.mats.m()
    }

    pub fn wellposedness(&self) -> Wellposedness {
        self.wellposedness
    }

    fn check_flow(&self, u: &FlowPath) -> Result<()> {
        if u.grid != self.grid {
            return Err(Error::DimensionMismatch {
                what: "broker flow cells",
                expected: self.grid.n_steps,
                got: u.grid.n_steps,
            });
        }
        Ok(())
    }

    /// Terms that do not depend on the flow.
    fn constant_block(&self) -> f64 {
        let x0 = self.x0_total;
        self.market.mu * self.market.horizon * x0
            - x0 * x0 / (2.0 * self.inv_lambda_sum)
            - self.reservation_sum
    }

    /// Terms shared by the forward and backward forms that only involve `X0_T`
    /// and the flow itself.
    fn terminal_block(&self, u: &FlowPath, x_t: f64) -> f64 {
        let sq: f64 = u.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dt();
        0.5 * self.k_terminal * x_t * x_t + self.x0_total * self.k_cross * x_t
            - self.market.kappa0 / self.mats.m1() * sq
    }

    /// Objective through the forward representation with `C`, `D` and `E`.
    pub fn eval_objective(&self, u: &FlowPath) -> Result<f64> {
        self.check_flow(u)?;
        let m = self.m();
        let m1 = self.mats.m1();
        let mu = self.market.mu;
        let x0 = self.x0_total;
        let dt = self.grid.dt();
        let offsets = self.grid.gauss_offsets();

        let mut x = 0.0;
        let mut d = DVector::zeros(m);
        let mut e_t = DVector::zeros(m);
        let (mut drift, mut feedback, mut c_int, mut d_int) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..self.grid.n_steps {
            let uk = u.values[k];
            for g in 0..GAUSS_POINTS {
                let w = GAUSS_WEIGHTS[g] * dt;
                let xg = x + uk * offsets[g];
                let ed = self.rho[k][g].dot(&d) + uk * self.rho[k][g].dot(&self.beta[k][g]);
                drift += w * xg * (mu / m1 + 2.0 / m1 * self.gamma_c[k][g]);
                feedback += w * xg * ed;
                c_int += w * self.gamma_c[k][g];
                d_int += w * ed;
                e_t.axpy(w * xg, &self.rho[k][g], 1.0);
            }
            d.axpy(uk, &self.beta[k][GAUSS_POINTS], 1.0);
            x += uk * dt;
        }
        let value = drift + 2.0 / m1 * feedback - 2.0 / m1 * e_t.dot(&d) + x0 * c_int
            - x0 * self.int_exp_row.dot(&d)
            + x0 * d_int
            + self.terminal_block(u, x)
            + self.constant_block();
        Ok(value)
    }

    /// Objective through the backward representation with the adjoint `Y`.
    pub fn eval_objective_backward(&self, u: &FlowPath) -> Result<f64> {
        self.check_flow(u)?;
        let y = solve_y(&self.mats, &self.table, u, self.market.mu);
        let gt = &self.mats.gamma_tilde;
        let m1 = self.mats.m1();
        let mu = self.market.mu;
        let x0 = self.x0_total;
        let dt = self.grid.dt();
        let offsets = self.grid.gauss_offsets();
        let mut x = 0.0;
        let mut total = 0.0;
        for k in 0..self.grid.n_steps {
            let uk = u.values[k];
            for g in 0..GAUSS_POINTS {
                let s = gt.dot(&y.inner[k][g]);
                let xg = x + uk * offsets[g];
                total += GAUSS_WEIGHTS[g] * dt * (xg * (mu / m1 + 2.0 / m1 * s) + x0 * s);
            }
            x += uk * dt;
        }
        Ok(total + self.terminal_block(u, x) + self.constant_block())
    }

    /// Objective as first written, before any integration by parts.
    pub fn eval_objective_direct(&self, u: &FlowPath) -> Result<f64> {
        self.check_flow(u)?;
        let y = solve_y(&self.mats, &self.table, u, self.market.mu);
        let gt = &self.mats.gamma_tilde;
        let m1 = self.mats.m1();
        let kappa0 = self.market.kappa0;
        let drift_u = self.market.lambda0 - self.mats.gamma * kappa0 / m1;
        let x0 = self.x0_total;
        let dt = self.grid.dt();
        let offsets = self.grid.gauss_offsets();
        let mut x = 0.0;
        let mut total = 0.0;
        for k in 0..self.grid.n_steps {
            let uk = u.values[k];
            for g in 0..GAUSS_POINTS {
                let yg = &y.inner[k][g];
                let xg = x + uk * offsets[g] + x0;
                let integrand = xg * (self.market.mu + gt.dot(yg) + drift_u * uk)
                    - uk * (yg.sum() + kappa0 * uk) / m1;
                total += GAUSS_WEIGHTS[g] * dt * integrand;
            }
            x += uk * dt;
        }
        let xt = x + x0;
        Ok(total - xt * xt / (2.0 * self.inv_lambda_sum) - self.reservation_sum)
    }

    /// Gradient density `g` (cell averages) from the `(p, q, r)` system. The
    /// directional derivative along `v` is `int v g dt`.
    pub fn eval_gradient(&self, u: &FlowPath) -> Result<FlowPath> {
        self.check_flow(u)?;
        let n = self.grid.n_steps;
        let m = self.m();
        let m1 = self.mats.m1();
        let mu = self.market.mu;
        let t_end = self.market.horizon;
        let kappa0 = self.market.kappa0;
        let x0 = self.x0_total;
        let gt = &self.mats.gamma_tilde;
        let y = solve_y(&self.mats, &self.table, u, mu);

        let x_nodes = u.inventory(0.0);
        let x_t = x_nodes[n];
        // tail[k] = int_{t_k}^T gt'Y
        let mut tail = vec![0.0; n + 1];
        for k in (0..n).rev() {
            tail[k] = tail[k + 1] + gt.dot(&y.cell[k]);
        }
        let q_rows: Vec<DVector<f64>> = (0..GAUSS_POINTS)
            .map(|g| self.table.step_minus[g].exp.tr_mul(gt))
            .collect();
        let g_p1b: Vec<f64> = self.p1b.iter().map(|v| gt.dot(v)).collect();
        let g_p2b: Vec<f64> = self.p2b.iter().map(|v| gt.dot(v)).collect();
        let cell_minus = self.table.cell_minus();

        let mut q = DVector::zeros(m);
        let mut density = Vec::with_capacity(n);
        for k in 0..n {
            let uk = u.values[k];
            let xk = x_nodes[k];
            let mut acc = 0.0;
            for g in 0..GAUSS_POINTS {
                let t = self.grid.gauss_time(k, g);
                let p = self.k_terminal * x_t + 2.0 / m1 * (tail[k] - gt.dot(&y.partial[k][g]));
                let gq = q_rows[g].dot(&q) + g_p1b[g] * xk + g_p2b[g] * uk;
                let val = mu * (t_end - t) / m1 + p - 2.0 / m1 * gq + x0 * self.k_cross
                    - x0 * self.gamma_r[k][g]
                    - 2.0 * kappa0 * uk / m1;
                acc += GAUSS_WEIGHTS[g] * val;
            }
            density.push(acc);
            if m > 0 {
                q = &cell_minus.exp * &q
                    + &self.p1b[ExpTable::CELL] * xk
                    + &self.p2b[ExpTable::CELL] * uk;
            }
        }
        FlowPath::new(self.grid, density)
    }

    /// `int v g dt` for the gradient density at `u`.
    pub fn directional_derivative(&self, u: &FlowPath, v: &FlowPath) -> Result<f64> {
        self.check_flow(v)?;
        let g = self.eval_gradient(u)?;
        Ok(g.values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.grid.dt())
    }

    /// The discrete objective as an explicit quadratic in the cell values.
    pub fn quadratic_form(&self) -> QuadraticForm {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let t_end = self.market.horizon;
        let m1 = self.mats.m1();
        let mu = self.market.mu;
        let x0 = self.x0_total;
        let lg = &self.lags;

        // cell-pair integrals of the first antiderivative of h over {s < r}
        let lag_pair = |j: usize| -> f64 {
            if j == 0 {
                lg.h3[1]
            } else {
                lg.h3[j + 1] - 2.0 * lg.h3[j] + lg.h3[j - 1]
            }
        };
        let pair: Vec<f64> = (0..n).map(lag_pair).collect();
        let terminal = self.k_terminal * dt * dt;
        let hessian = DMatrix::from_fn(n, n, |k, l| {
            let j = k.abs_diff(l);
            let coupling = if j == 0 { 2.0 * pair[0] } else { pair[j] };
            let mut v = -2.0 / m1 * coupling + terminal;
            if j == 0 {
                v -= 2.0 * self.market.kappa0 / m1 * dt;
            }
            v
        });
        let linear = DVector::from_fn(n, |l, _| {
            let t_l = self.grid.node(l);
            mu / m1 * dt * (t_end - t_l - 0.5 * dt)
                + 2.0 * mu / m1 * (lg.s3[n - l] - lg.s3[n - l - 1])
                + x0 * self.k_cross * dt
                - x0 * (lg.h2[l + 1] - lg.h2[l])
        });
        let constant = x0 * mu * lg.s2[n] + self.constant_block();
        QuadraticForm {
            hessian,
            linear,
            constant,
        }
    }

    pub fn solve_optimal_flow(&self) -> Result<BrokerSolutionFlow> {
        self.solve_optimal_flow_with(ConcavityGate::default())
    }

    pub fn solve_optimal_flow_with(&self, gate: ConcavityGate) -> Result<BrokerSolutionFlow> {
        let wp = self.wellposedness;
        let violated = || Error::WellPosednessViolated {
            theta: self.portfolio.clone(),
            margin: wp.margin,
        };
        if gate == ConcavityGate::Assumption && !wp.holds {
            return Err(violated());
        }
        let form = self.quadratic_form();
        let n = self.grid.n_steps;
        let mut neg = -&form.hessian;
        neg = (&neg + neg.transpose()) * 0.5;
        let (values, certified) = if n <= DENSE_LIMIT {
            match neg.clone().cholesky() {
                Some(ch) => (ch.solve(&form.linear), true),
                None if wp.holds => {
                    let sol = neg.lu().solve(&form.linear).ok_or_else(violated)?;
                    (sol, false)
                }
                None => return Err(violated()),
            }
        } else {
            match conjugate_gradient(&neg, &form.linear, 1e-14, 4 * n) {
                Some(sol) => (sol, true),
                None if wp.holds => {
                    return Err(Error::SolverDidNotConverge {
                        residual: f64::NAN,
                        tolerance: GRADIENT_TOLERANCE,
                    })
                }
                None => return Err(violated()),
            }
        };
        let u_star = FlowPath::new(self.grid, values.iter().copied().collect())?;
        let objective_value = self.eval_objective(&u_star)?;
        let gradient = self.eval_gradient(&u_star)?;
        let gradient_residual = gradient.sup_norm();
        let tolerance = GRADIENT_TOLERANCE * objective_value.abs().max(1.0);
        if !(gradient_residual <= tolerance) {
            return Err(Error::SolverDidNotConverge {
                residual: gradient_residual,
                tolerance,
            });
        }
        let stationarity_residual =
            (self.mats.m1() / (2.0 * self.market.kappa0)) * gradient_residual;
        Ok(BrokerSolutionFlow {
            x0_path: u_star.inventory_path(0.0),
            u_star,
            gradient_residual,
            stationarity_residual,
            objective_value,
            wellposedness: wp,
            concavity_certified: certified,
        })
    }
}

/// Solves `M x = b` for symmetric positive definite `M`. Returns `None` if a
/// non-positive curvature direction shows up or the iteration cap is hit.
fn conjugate_gradient(
    mat: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> Option<DVector<f64>> {
    let mut x = DVector::zeros(rhs.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let target = rel_tol * rel_tol * rs.max(f64::MIN_POSITIVE);
    for _ in 0..max_iter {
        if rs <= target {
            return Some(x);
        }
        let ap = mat * &p;
        let curv = p.dot(&ap);
        if !(curv > 0.0) {
            return None;
        }
        let alpha = rs / curv;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    (rs <= target * 1e4).then_some(x)
}

#[derive(Debug, Clone, Serialize)]
pub struct BrokerSolutionFlow {
    pub u_star: FlowPath,
    /// Running integral of `u_star` from zero.
    pub x0_path: SmoothPath,
    /// Sup norm of the gradient density at `u_star`.
    pub gradient_residual: f64,
    /// Sup-norm mismatch of `u_star` against the flow equation of the
    /// forward-backward optimality system.
    pub stationarity_residual: f64,
    pub objective_value: f64,
    pub wellposedness: Wellposedness,
    /// Whether the negated Hessian was factorized (or passed CG) as positive
    /// definite.
    pub concavity_certified: bool,
}

impl BrokerSolutionFlow {
    pub fn terminal_inventory(&self) -> f64 {
        self.x0_path.terminal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_market() -> MarketParams {
        MarketParams {
            mu: 1.0,
            sigma: 0.0,
            horizon: 1.0,
            kappa0: 0.1,
            lambda0: 1e-3,
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        x0: bool,
    ) -> (MarketParams, Vec<AgentParams>, Portfolio) {
        let n_agents = rng.random_range(1..=4);
        let market = MarketParams {
            mu: rng.random_range(0.5..2.0),
            sigma: 0.3,
            horizon: rng.random_range(0.5..1.5),
            kappa0: rng.random_range(0.05..0.2),
            lambda0: rng.random_range(1e-4..2e-3),
        };
        let agents: Vec<AgentParams> = (0..n_agents)
            .map(|_| {
                AgentParams::new(
                    rng.random_range(0.05..0.2),
                    rng.random_range(1e-3..2e-2),
                    if x0 { rng.random_range(-1.0..1.0) } else { 0.0 },
                )
            })
            .collect();
        let mut theta: Vec<bool> = (0..n_agents).map(|_| rng.random_bool(0.5)).collect();
        let pick = rng.random_range(0..n_agents);
        theta[pick] = true;
        (market, agents, Portfolio::new(theta))
    }

    fn random_flow(rng: &mut ChaCha8Rng, grid: TimeGrid) -> FlowPath {
        FlowPath::new(
            grid,
            (0..grid.n_steps)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn wellposedness_examples() {
        let market = desk_market();
        let empty = build_matrices(&[], &market);
        let wp = check_wellposedness(&empty, &market);
        assert!(wp.holds);
        assert!((wp.margin - 0.0995).abs() < 1e-15);

        let one = build_matrices(&[AgentParams::new(0.1, 0.01, 0.0)], &market);
        let wp = check_wellposedness(&one, &market);
        assert!((wp.margin - 0.0994).abs() < 1e-12);

        let tiny = MarketParams {
            kappa0: 1e-6,
            ..market
        };
        let one = build_matrices(&[AgentParams::new(0.1, 0.01, 0.0)], &tiny);
        assert!(!check_wellposedness(&one, &tiny).holds);
    }

    #[test]
    fn spectral_norm_is_below_frobenius() {
        let agents = [
            AgentParams::new(0.1, 0.01, 0.0),
            AgentParams::new(0.05, 0.03, 0.0),
            AgentParams::new(0.2, 0.002, 0.0),
        ];
        let mats = build_matrices(&agents, &desk_market());
        let wp = check_wellposedness(&mats, &desk_market());
        assert!(wp.norm_a > 0.0 && wp.norm_a <= wp.frobenius_a);
    }

    #[test]
    fn zero_drift_and_inventory_gives_zero() {
        let market = MarketParams {
            mu: 0.0,
            ..desk_market()
        };
        let agents = [AgentParams::new(0.1, 0.01, 0.0); 2];
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let ctx =
            BrokerObjectiveContext::new(&market, &agents, &Portfolio::from_bits(&[0, 1]), grid)
                .unwrap();
        assert_eq!(ctx.eval_objective(&FlowPath::zeros(grid)).unwrap(), 0.0);
        let sol = ctx.solve_optimal_flow().unwrap();
        assert!(sol.u_star.sup_norm() < 1e-14);
        let shifted = ctx.clone().with_reservation_sum(1.0);
        let u = FlowPath::constant(grid, 0.3);
        let delta = ctx.eval_objective(&u).unwrap() - shifted.eval_objective(&u).unwrap();
        assert!((delta - 1.0).abs() < 1e-14);
        let sol = shifted.solve_optimal_flow().unwrap();
        assert!((sol.objective_value + 1.0).abs() < 1e-14);
    }

    #[test]
    fn c_path_vanishes_at_horizon() {
        let agents = [AgentParams::new(0.1, 0.01, 0.0); 3];
        let grid = TimeGrid::new(40, 1.0).unwrap();
        let ctx = BrokerObjectiveContext::new(
            &desk_market(),
            &agents,
            &Portfolio::from_bits(&[0, 1, 0]),
            grid,
        )
        .unwrap();
        assert!(ctx.c_path.nodes[grid.n_steps].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_client_set_is_rejected() {
        let agents = [AgentParams::new(0.1, 0.01, 0.0); 2];
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let err = BrokerObjectiveContext::new(&desk_market(), &agents, &Portfolio::empty(2), grid)
            .unwrap_err();
        assert_eq!(err, Error::EmptyClientSet);
    }

    #[test]
    fn desk_case_forward_matches_backward() {
        let agents = [AgentParams::new(0.1, 1e-3, 0.0); 2];
        let grid = TimeGrid::new(200, 1.0).unwrap();
        let ctx = BrokerObjectiveContext::new(
            &desk_market(),
            &agents,
            &Portfolio::from_bits(&[0, 1]),
            grid,
        )
        .unwrap();
        let u = FlowPath::constant(grid, 0.5);
        let fwd = ctx.eval_objective(&u).unwrap();
        let bwd = ctx.eval_objective_backward(&u).unwrap();
        assert!(
            (fwd - bwd).abs() <= 1e-8 * fwd.abs().max(1.0),
            "{fwd} vs {bwd}"
        );
    }

    #[test]
    fn all_forms_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (market, agents, theta) = random_instance(&mut rng, true);
            let grid = TimeGrid::new(60, market.horizon).unwrap();
            let ctx = BrokerObjectiveContext::new(&market, &agents, &theta, grid)
                .unwrap()
                .with_reservation_sum(0.25);
            let u = random_flow(&mut rng, grid);
            let fwd = ctx.eval_objective(&u).unwrap();
            let bwd = ctx.eval_objective_backward(&u).unwrap();
            let direct = ctx.eval_objective_direct(&u).unwrap();
            let quad = ctx.quadratic_form().value(&u.values);
            let scale = fwd.abs().max(1.0);
            assert!((fwd - bwd).abs() <= 1e-10 * scale, "fwd {fwd} bwd {bwd}");
            assert!(
                (fwd - direct).abs() <= 1e-10 * scale,
                "fwd {fwd} direct {direct}"
            );
            assert!((fwd - quad).abs() <= 1e-10 * scale, "fwd {fwd} quad {quad}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (market, agents, theta) = random_instance(&mut rng, true);
            let grid = TimeGrid::new(50, market.horizon).unwrap();
            let ctx = BrokerObjectiveContext::new(&market, &agents, &theta, grid).unwrap();
            let u = random_flow(&mut rng, grid);
            for _ in 0..5 {
                let v = random_flow(&mut rng, grid);
                let eps = 1e-5;
                let fd = (ctx.eval_objective(&u.axpy(eps, &v)).unwrap()
                    - ctx.eval_objective(&u.axpy(-eps, &v)).unwrap())
                    / (2.0 * eps);
                let an = ctx.directional_derivative(&u, &v).unwrap();
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-3),
                    "fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_horizon_for_all_clients() {
        let agents = [AgentParams::new(0.1, 1e-3, 0.0); 2];
        let grid = TimeGrid::new(400, 1.0).unwrap();
        let ctx = BrokerObjectiveContext::new(&desk_market(), &agents, &Portfolio::full(2), grid)
            .unwrap();
        let g = ctx.eval_gradient(&FlowPath::zeros(grid)).unwrap();
        // density is T - t on the last cell, averaged
        assert!(g.values[grid.n_steps - 1].abs() < grid.dt());
        let market = MarketParams {
            mu: 0.0,
            ..desk_market()
        };
        let ctx = BrokerObjectiveContext::new(&market, &agents, &Portfolio::full(2), grid).unwrap();
        assert_eq!(
            ctx.eval_gradient(&FlowPath::zeros(grid))
                .unwrap()
                .sup_norm(),
            0.0
        );
    }

    #[test]
    fn gradient_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (market, agents, theta) = random_instance(&mut rng, true);
        let grid = TimeGrid::new(40, market.horizon).unwrap();
        let ctx = BrokerObjectiveContext::new(&market, &agents, &theta, grid).unwrap();
        for _ in 0..5 {
            let a = random_flow(&mut rng, grid);
            let b = random_flow(&mut rng, grid);
            let c = random_flow(&mut rng, grid);
            let ga = ctx.eval_gradient(&a).unwrap();
            let gb = ctx.eval_gradient(&b).unwrap();
            let gac = ctx.eval_gradient(&a.axpy(1.0, &c)).unwrap();
            let gbc = ctx.eval_gradient(&b.axpy(1.0, &c)).unwrap();
            for k in 0..grid.n_steps {
                let d1 = gac.values[k] - ga.values[k];
                let d2 = gbc.values[k] - gb.values[k];
                assert!((d1 - d2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn objective_is_concave_when_wellposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (market, agents, theta) = random_instance(&mut rng, true);
            let grid = TimeGrid::new(30, market.horizon).unwrap();
            let ctx = BrokerObjectiveContext::new(&market, &agents, &theta, grid).unwrap();
            if !ctx.wellposedness().holds {
                continue;
            }
            let u = random_flow(&mut rng, grid);
            let v = random_flow(&mut rng, grid);
            let j = |w: &FlowPath| ctx.eval_objective(w).unwrap();
            let second = j(&u.axpy(0.1, &v)) + j(&u.axpy(-0.1, &v)) - 2.0 * j(&u);
            assert!(second <= 1e-12, "second difference {second}");
        }
    }

    #[test]
    fn optimal_flow_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let (market, agents, theta) = random_instance(&mut rng, true);
            let grid = TimeGrid::new(80, market.horizon).unwrap();
            let ctx = BrokerObjectiveContext::new(&market, &agents, &theta, grid).unwrap();
            let sol = ctx.solve_optimal_flow().unwrap();
            assert!((sol.objective_value - ctx.eval_objective(&sol.u_star).unwrap()).abs() < 1e-15);
            assert_eq!(sol.x0_path.nodes[0], 0.0);
            for _ in 0..5 {
                let v = random_flow(&mut rng, grid);
                for eps in [1e-3, -1e-3, 0.1] {
                    let other = ctx.eval_objective(&sol.u_star.axpy(eps, &v)).unwrap();
                    assert!(other <= sol.objective_value + 1e-12);
                }
            }
        }
    }

    #[test]
    fn doubling_drift_doubles_the_flow() {
        let agents = [
            AgentParams::new(0.1, 1e-3, 0.0),
            AgentParams::new(0.15, 2e-3, 0.0),
            AgentParams::new(0.08, 5e-3, 0.0),
        ];
        let grid = TimeGrid::new(100, 1.0).unwrap();
        let theta = Portfolio::from_bits(&[1, 0, 1]);
        let one = BrokerObjectiveContext::new(&desk_market(), &agents, &theta, grid).unwrap();
        let two_market = MarketParams {
            mu: 2.0,
            ..desk_market()
        };
        let two = BrokerObjectiveContext::new(&two_market, &agents, &theta, grid).unwrap();
        let u1 = one.solve_optimal_flow().unwrap().u_star;
        let u2 = two.solve_optimal_flow().unwrap().u_star;
        for k in 0..grid.n_steps {
            assert!((u2.values[k] - 2.0 * u1.values[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_does_not_change_the_solution() {
        let agents = [
            AgentParams::new(0.1, 1e-3, 0.2),
            AgentParams::new(0.12, 3e-3, -0.1),
        ];
        let grid = TimeGrid::new(60, 1.0).unwrap();
        let theta = Portfolio::from_bits(&[0, 1]);
        let calm = BrokerObjectiveContext::new(&desk_market(), &agents, &theta, grid).unwrap();
        let wild = BrokerObjectiveContext::new(
            &MarketParams {
                sigma: 5.0,
                ..desk_market()
            },
            &agents,
            &theta,
            grid,
        )
        .unwrap();
        let a = calm.solve_optimal_flow().unwrap();
        let b = wild.solve_optimal_flow().unwrap();
        assert_eq!(a.u_star, b.u_star);
        assert_eq!(a.objective_value.to_bits(), b.objective_value.to_bits());
    }

    #[test]
    fn strict_gate_rejects_failing_assumption() {
        let market = MarketParams {
            kappa0: 1e-4,
            lambda0: 1e-3,
            ..desk_market()
        };
        let agents = [
            AgentParams::new(0.1, 0.05, 0.0),
            AgentParams::new(0.1, 1e-3, 0.0),
        ];
        let grid = TimeGrid::new(20, 1.0).unwrap();
        let ctx =
            BrokerObjectiveContext::new(&market, &agents, &Portfolio::from_bits(&[0, 1]), grid)
                .unwrap();
        assert!(!ctx.wellposedness().holds);
        let err = ctx
            .solve_optimal_flow_with(ConcavityGate::Assumption)
            .unwrap_err();
        assert_eq!(err.kind(), "well_posedness_violated");
    }

    #[test]
    fn conjugate_gradient_matches_cholesky_on_fine_grid() {
        let agents = [
            AgentParams::new(0.1, 1e-3, 0.0),
            AgentParams::new(0.2, 4e-3, 0.0),
        ];
        let grid = TimeGrid::new(DENSE_LIMIT + 88, 1.0).unwrap();
        let ctx = BrokerObjectiveContext::new(
            &desk_market(),
            &agents,
            &Portfolio::from_bits(&[1, 0]),
            grid,
        )
        .unwrap();
        let sol = ctx.solve_optimal_flow().unwrap();
        let form = ctx.quadratic_form();
        let direct = (-form.hessian).cholesky().unwrap().solve(&form.linear);
        let diff = sol
            .u_star
            .values
            .iter()
            .zip(direct.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        assert!(diff < 1e-8, "diff {diff}");
    }
}
