//! Agent values, endogenous reservation values, client allocation, expected
//! fees and the broker's value for a portfolio.
//!
//! The optimal broker flow for a portfolio does not depend on any reservation
//! value, so each portfolio is solved once ([`CoreSolve`]) and the reservation
//! values are read off the solves of the portfolios with one client dropped.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::Serialize;

use crate::broker::{BrokerObjectiveContext, BrokerSolutionFlow, ConcavityGate, Wellposedness};
use crate::equilibrium::{
    build_matrices, exp_table, rates_at, solve_equilibrium, EquilibriumSolution,
    InteractionMatrices,
};
use crate::error::{Error, Result};
use crate::model::{
    integrate_samples, partition, validate_problem, AgentParams, FlowPath, MarketParams, Partition,
    Portfolio, SmoothPath, TimeGrid, GAUSS_POINTS,
};

/// Equilibrium value of independent `i` (internal index) for the broker flow
/// the equilibrium was solved with.
pub fn independent_agent_value(
    i: usize,
    mats: &InteractionMatrices,
    eq: &EquilibriumSolution,
    market: &MarketParams,
    x0_i: f64,
) -> f64 {
    let m = mats.m();
    let nu = &eq.rates.samples;
    let u = &eq.u;
    let x = &eq.inventories[i];
    let running = integrate_samples(&u.grid, |k, g| {
        let uk = u.values[k];
        let perm: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| mats.lambdas[j] * nu[j][k][g])
            .sum();
        let temp: f64 = (0..m).map(|j| mats.kappas[j] * nu[j][k][g]).sum();
        x.inner[k][g] * (market.mu + perm + market.lambda0 * uk)
            - nu[i][k][g] * (temp + market.kappa0 * uk)
    });
    running - 0.5 * mats.lambdas[i] * x0_i * x0_i
}

/// Terminal inventories and per-client flows for a broker flow.
#[derive(Debug, Clone, Serialize)]
pub struct ClientAllocation {
    pub terminal_inventories: Vec<f64>,
    pub flows: Vec<FlowPath>,
    /// Share `1 / (lambda_i sum_j 1/lambda_j)` of the broker flow.
    pub weights: Vec<f64>,
}

/// Splits `u_star` among the clients so that the terminal inventories minimize
/// `sum lambda_i X_T^2 / 2` under the aggregation constraint.
pub fn client_allocation(u_star: &FlowPath, clients: &[AgentParams]) -> Result<ClientAllocation> {
    if clients.is_empty() {
        return Err(Error::EmptyClientSet);
    }
    let inv_sum: f64 = clients.iter().map(|c| 1.0 / c.lambda).sum();
    let x0_total: f64 = clients.iter().map(|c| c.x0).sum();
    let horizon = u_star.grid.horizon;
    let x_t = u_star.total();
    let weights: Vec<f64> = clients.iter().map(|c| 1.0 / (c.lambda * inv_sum)).collect();
    let terminal_inventories = weights.iter().map(|w| w * (x_t + x0_total)).collect();
    let flows = clients
        .iter()
        .zip(&weights)
        .map(|(c, w)| {
            let shift = (x0_total * w - c.x0) / horizon;
            FlowPath {
                grid: u_star.grid,
                values: u_star.values.iter().map(|v| w * v + shift).collect(),
            }
        })
        .collect();
    Ok(ClientAllocation {
        terminal_inventories,
        flows,
        weights,
    })
}

/// Expected price without the Brownian part. Inventories enter through their
/// change since time zero, and temporary impact is absent at the horizon.
#[derive(Debug, Clone, Serialize)]
pub struct DeterministicPrice {
    /// Price at the grid nodes, using the rates of the cell that starts there.
    pub nodes: Vec<f64>,
    pub inner: Vec<[f64; GAUSS_POINTS]>,
    pub terminal: f64,
}

impl DeterministicPrice {
    pub fn build(
        market: &MarketParams,
        mats: &InteractionMatrices,
        eq: &EquilibriumSolution,
        broker_inventory: &SmoothPath,
    ) -> Self {
        let grid = eq.u.grid;
        let m = mats.m();
        // `None` for the gauss index reads the node value
        let permanent = |k: usize, g: Option<usize>| -> f64 {
            let at = |path: &SmoothPath| match g {
                Some(g) => path.inner[k][g],
                None => path.nodes[k],
            };
            let mut p = 0.0;
            for j in 0..m {
                let x = &eq.inventories[j];
                p += mats.lambdas[j] * (at(x) - x.nodes[0]);
            }
            p + market.lambda0 * (at(broker_inventory) - broker_inventory.nodes[0])
        };
        let inner = (0..grid.n_steps)
            .map(|k| {
                std::array::from_fn(|g| {
                    let temp: f64 = (0..m)
                        .map(|j| mats.kappas[j] * eq.rates.samples[j][k][g])
                        .sum();
                    market.mu * grid.gauss_time(k, g)
                        + permanent(k, Some(g))
                        + temp
                        + market.kappa0 * eq.u.values[k]
                })
            })
            .collect();
        let n = grid.n_steps;
        let terminal = market.mu * grid.horizon + permanent(n, None);
        let mut nodes: Vec<f64> = (0..n)
            .map(|k| {
                let rates = rates_at(mats, &eq.adjoint.nodes[k], eq.u.values[k]);
                let temp: f64 = rates.iter().zip(&mats.kappas).map(|(v, c)| v * c).sum();
                market.mu * grid.node(k)
                    + permanent(k, None)
                    + temp
                    + market.kappa0 * eq.u.values[k]
            })
            .collect();
        nodes.push(terminal);
        Self {
            nodes,
            inner,
            terminal,
        }
    }
}

/// `P_T X_T - int nu P dt - lambda X_T^2 / 2` against a deterministic price.
pub fn gross_trading_value(
    flow: &FlowPath,
    x0: f64,
    lambda: f64,
    price: &DeterministicPrice,
) -> f64 {
    gross_from_samples(
        &flow.grid,
        &flow.as_samples(),
        x0 + flow.total(),
        lambda,
        price,
    )
}

/// Same as [`gross_trading_value`] for a rate known at the Gauss points.
pub fn gross_from_samples(
    grid: &TimeGrid,
    rate: &[[f64; GAUSS_POINTS]],
    terminal_inventory: f64,
    lambda: f64,
    price: &DeterministicPrice,
) -> f64 {
    let paid = integrate_samples(grid, |k, g| rate[k][g] * price.inner[k][g]);
    price.terminal * terminal_inventory
        - paid
        - 0.5 * lambda * terminal_inventory * terminal_inventory
}

/// Expected first-best fee of a client: its expected trading value less its
/// reservation value.
pub fn expected_fee(
    flow: &FlowPath,
    x0: f64,
    lambda: f64,
    price: &DeterministicPrice,
    reservation: f64,
) -> f64 {
    gross_trading_value(flow, x0, lambda, price) - reservation
}

/// Everything about a portfolio that does not depend on reservation values.
#[derive(Debug, Clone)]
pub struct CoreSolve {
    pub portfolio: Portfolio,
    pub partition: Partition,
    pub mats: InteractionMatrices,
    /// `None` for the empty portfolio, where the broker does not trade.
    pub context: Option<Arc<BrokerObjectiveContext>>,
    pub flow: Option<BrokerSolutionFlow>,
    pub equilibrium: EquilibriumSolution,
    /// Equilibrium values of the independents, in internal order.
    pub independent_values: Vec<f64>,
    pub foc_residual: f64,
    pub wellposedness: Wellposedness,
}

impl CoreSolve {
    pub fn compute(
        market: &MarketParams,
        agents: &[AgentParams],
        portfolio: &Portfolio,
        grid: TimeGrid,
        gate: ConcavityGate,
    ) -> Result<Self> {
        let part = partition(portfolio);
        let x0_indep: Vec<f64> = part.independents.iter().map(|&i| agents[i].x0).collect();
        let (mats, table, context, flow, u) = if portfolio.has_clients() {
            let ctx = BrokerObjectiveContext::new(market, agents, portfolio, grid)?;
            let flow = ctx.solve_optimal_flow_with(gate)?;
            let u = flow.u_star.clone();
            (
                ctx.mats.clone(),
                ctx.table.clone(),
                Some(Arc::new(ctx)),
                Some(flow),
                u,
            )
        } else {
            validate_problem(market, agents).into_result()?;
            let independents: Vec<AgentParams> =
                part.independents.iter().map(|&i| agents[i]).collect();
            let mats = build_matrices(&independents, market);
            let table = Arc::new(exp_table(&mats.a, &grid));
            (mats, table, None, None, FlowPath::zeros(grid))
        };
        let eq = solve_equilibrium(&mats, &table, &u, market.mu, &x0_indep)?;
        let foc = eq.foc_residual(&mats);
        let independent_values = (0..mats.m())
            .map(|i| independent_agent_value(i, &mats, &eq, market, x0_indep[i]))
            .collect();
        let wellposedness = match &context {
            Some(ctx) => ctx.wellposedness(),
            None => crate::broker::check_wellposedness(&mats, market),
        };
        Ok(Self {
            portfolio: portfolio.clone(),
            partition: part,
            mats,
            context,
            flow,
            equilibrium: eq,
            independent_values,
            foc_residual: foc,
            wellposedness,
        })
    }

    /// Value of independent agent `agent` (original label).
    pub fn value_of(&self, agent: usize) -> Option<f64> {
        self.partition
            .independents
            .iter()
            .position(|&j| j == agent)
            .map(|pos| self.independent_values[pos])
    }

    /// Broker objective at the optimal flow before subtracting reservations.
    pub fn gross_broker_value(&self) -> f64 {
        self.flow.as_ref().map_or(0.0, |f| f.objective_value)
    }

    pub fn u_star(&self) -> &FlowPath {
        &self.equilibrium.u
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValuationReport {
    pub portfolio: Portfolio,
    pub broker_value: f64,
    /// Original labels of the clients, in increasing order.
    pub clients: Vec<usize>,
    pub reservations: Vec<f64>,
    pub expected_fees: Vec<f64>,
    pub client_terminal_inventories: Vec<f64>,
    pub client_flows: Vec<FlowPath>,
    /// Original labels of the independents, in increasing order.
    pub independents: Vec<usize>,
    pub independent_values: Vec<f64>,
    /// Value of every agent in original order: the reservation value for a
    /// client (what the contract leaves him) and the equilibrium value for an
    /// independent.
    pub agent_values: Vec<f64>,
    pub u_star: FlowPath,
    pub wellposedness: Wellposedness,
    pub gradient_residual: f64,
    pub foc_residual: f64,
    pub market: MarketParams,
    pub agents: Vec<AgentParams>,
    #[serde(skip)]
    pub core: Option<Arc<CoreSolve>>,
}

impl ValuationReport {
    pub fn fee_total(&self) -> f64 {
        self.expected_fees.iter().sum()
    }

    pub fn reservation_sum(&self) -> f64 {
        self.reservations.iter().sum()
    }
}

type Slot = Arc<OnceLock<std::result::Result<Arc<CoreSolve>, Error>>>;

/// Valuation of portfolios for one fixed problem, with a shared cache of
/// per-portfolio solves that is safe to use from several threads.
#[derive(Debug)]
pub struct Evaluator {
    pub market: MarketParams,
    pub agents: Vec<AgentParams>,
    pub grid: TimeGrid,
    pub gate: ConcavityGate,
    caching: bool,
    cache: Mutex<HashMap<Portfolio, Slot>>,
}

impl Evaluator {
    pub fn new(market: MarketParams, agents: Vec<AgentParams>, grid: TimeGrid) -> Result<Self> {
        validate_problem(&market, &agents).into_result()?;
        if (grid.horizon - market.horizon).abs() > 1e-12 * market.horizon {
            return Err(Error::InvalidProblem(vec![
                "grid horizon differs from the market horizon".to_string(),
            ]));
        }
        Ok(Self {
            market,
            agents,
            grid,
            gate: ConcavityGate::default(),
            caching: true,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_gate(mut self, gate: ConcavityGate) -> Self {
        self.gate = gate;
        self
    }

    /// Recompute every sub-solve instead of caching it.
    pub fn without_cache(mut self) -> Self {
        self.caching = false;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn cached_portfolios(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn check_portfolio(&self, theta: &Portfolio) -> Result<()> {
        if theta.len() != self.agents.len() {
            return Err(Error::DimensionMismatch {
                what: "portfolio length",
                expected: self.agents.len(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn core(&self, theta: &Portfolio) -> Result<Arc<CoreSolve>> {
        self.check_portfolio(theta)?;
        let compute = || {
            CoreSolve::compute(&self.market, &self.agents, theta, self.grid, self.gate)
                .map(Arc::new)
        };
        if !self.caching {
            return compute();
        }
        let slot = {
            let mut cache = self.cache.lock().expect("cache lock");
            cache.entry(theta.clone()).or_default().clone()
        };
        slot.get_or_init(|| {
            let out = compute();
            if let Err(e) = &out {
                log::debug!("portfolio {theta} failed: {e}");
            }
            out
        })
        .clone()
    }

    /// Reservation value of every client of `theta`, in increasing label order.
    pub fn reservation_values(&self, theta: &Portfolio) -> Result<Vec<f64>> {
        self.check_portfolio(theta)?;
        (0..theta.len())
            .filter(|&i| theta.is_client(i))
            .map(|i| {
                let core = self.core(&theta.without(i))?;
                Ok(core
                    .value_of(i)
                    .expect("dropped client trades independently"))
            })
            .collect()
    }

    pub fn broker_value(&self, theta: &Portfolio) -> Result<ValuationReport> {
        let core = self.core(theta)?;
        let part = &core.partition;
        let market = self.market;
        let reservations = self.reservation_values(theta)?;
        let mut agent_values = vec![0.0; self.agents.len()];
        for (pos, &i) in part.independents.iter().enumerate() {
            agent_values[i] = core.independent_values[pos];
        }
        for (pos, &i) in part.clients.iter().enumerate() {
            agent_values[i] = reservations[pos];
        }
        let mut report = ValuationReport {
            portfolio: theta.clone(),
            broker_value: 0.0,
            clients: part.clients.clone(),
            reservations,
            expected_fees: Vec::new(),
            client_terminal_inventories: Vec::new(),
            client_flows: Vec::new(),
            independents: part.independents.clone(),
            independent_values: core.independent_values.clone(),
            agent_values,
            u_star: core.u_star().clone(),
            wellposedness: core.wellposedness,
            gradient_residual: 0.0,
            foc_residual: core.foc_residual,
            market,
            agents: self.agents.clone(),
            core: Some(core.clone()),
        };
        let Some(flow) = &core.flow else {
            return Ok(report);
        };
        let clients: Vec<AgentParams> = part.clients.iter().map(|&i| self.agents[i]).collect();
        let alloc = client_allocation(&flow.u_star, &clients)?;
        let price =
            DeterministicPrice::build(&market, &core.mats, &core.equilibrium, &flow.x0_path);
        report.expected_fees = clients
            .iter()
            .zip(&alloc.flows)
            .zip(&report.reservations)
            .map(|((c, f), r)| expected_fee(f, c.x0, c.lambda, &price, *r))
            .collect();
        report.broker_value = flow.objective_value - report.reservation_sum();
        report.client_terminal_inventories = alloc.terminal_inventories;
        report.client_flows = alloc.flows;
        report.gradient_residual = flow.gradient_residual;
        Ok(report)
    }
}

/// Each agent's value under `star` less its value under `baseline`.
pub fn relative_values(star: &ValuationReport, baseline: &ValuationReport) -> Result<Vec<f64>> {
    if star.agents != baseline.agents {
        return Err(Error::ParameterMismatch(
            "agent parameters differ".to_string(),
        ));
    }
    if star.market != baseline.market {
        return Err(Error::ParameterMismatch(
            "market parameters differ".to_string(),
        ));
    }
    if star.u_star.grid != baseline.u_star.grid {
        return Err(Error::ParameterMismatch("time grids differ".to_string()));
    }
    Ok(star
        .agent_values
        .iter()
        .zip(&baseline.agent_values)
        .map(|(a, b)| a - b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn market() -> MarketParams {
        MarketParams {
            mu: 1.0,
            sigma: 0.0,
            horizon: 1.0,
            kappa0: 0.1,
            lambda0: 1e-3,
        }
    }

    fn evaluator(agents: Vec<AgentParams>, n: usize) -> Evaluator {
        Evaluator::new(market(), agents, TimeGrid::new(n, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn single_agent_value_matches_closed_form() {
        let ev = evaluator(vec![AgentParams::new(0.1, 0.01, 0.0)], 20);
        let core = ev.core(&Portfolio::empty(1)).unwrap();
        assert!((core.independent_values[0] - 1.0 / 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_gives_zero_values() {
        let m = MarketParams {
            mu: 0.0,
            ..market()
        };
        let ev = Evaluator::new(
            m,
            vec![AgentParams::new(0.1, 0.01, 0.0); 2],
            TimeGrid::new(20, 1.0).unwrap(),
        )
        .unwrap();
        let core = ev.core(&Portfolio::empty(2)).unwrap();
        assert!(core.independent_values.iter().all(|v| *v == 0.0));
        let report = ev.broker_value(&Portfolio::full(2)).unwrap();
        assert_eq!(report.broker_value, 0.0);
        assert!(report.reservations.iter().all(|v| *v == 0.0));
        assert!(report.expected_fees.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_inventory_penalty_survives_without_drift() {
        let m = MarketParams {
            mu: 0.0,
            ..market()
        };
        let ev = Evaluator::new(
            m,
            vec![AgentParams::new(0.1, 0.02, 1.0)],
            TimeGrid::new(10, 1.0).unwrap(),
        )
        .unwrap();
        let core = ev.core(&Portfolio::empty(1)).unwrap();
        assert!((core.independent_values[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn single_agent_reservation() {
        let ev = evaluator(vec![AgentParams::new(0.1, 0.01, 0.0)], 50);
        let r = ev.reservation_values(&Portfolio::full(1)).unwrap();
        assert!((r[0] - 1.0 / 1.2).abs() < 1e-12);
    }

    #[test]
    fn identical_agents_have_equal_reservations() {
        let ev = evaluator(vec![AgentParams::new(0.1, 1e-3, 0.0); 2], 60);
        let r = ev.reservation_values(&Portfolio::full(2)).unwrap();
        assert!((r[0] - r[1]).abs() < 1e-13);
    }

    #[test]
    fn allocation_examples() {
        let grid = TimeGrid::new(10, 1.0).unwrap();
        let u = FlowPath::constant(grid, 3.0);
        let one = client_allocation(&u, &[AgentParams::new(0.1, 0.5, 0.0)]).unwrap();
        assert!((one.terminal_inventories[0] - 3.0).abs() < 1e-14);
        assert_eq!(one.flows[0], u);

        let twins = client_allocation(&u, &[AgentParams::new(0.1, 0.5, 0.0); 2]).unwrap();
        assert!((twins.terminal_inventories[0] - 1.5).abs() < 1e-14);

        let alloc = client_allocation(
            &u,
            &[
                AgentParams::new(0.1, 1.0, 0.0),
                AgentParams::new(0.1, 2.0, 0.0),
            ],
        )
        .unwrap();
        assert!((alloc.terminal_inventories[0] - 2.0).abs() < 1e-14);
        assert!((alloc.terminal_inventories[1] - 1.0).abs() < 1e-14);
        let best = 0.5 * (1.0 * 4.0 + 2.0 * 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a: f64 = rng.random_range(-5.0..8.0);
            let cost = 0.5 * (a * a + 2.0 * (3.0 - a) * (3.0 - a));
            assert!(best <= cost + 1e-14);
        }
        assert!(client_allocation(&u, &[]).is_err());
    }

    #[test]
    fn flows_respect_inventory_targets() {
        let grid = TimeGrid::new(16, 2.0).unwrap();
        let u = FlowPath::from_fn(grid, |t| (t - 1.0).powi(2));
        let clients = [
            AgentParams::new(0.1, 1e-3, 0.5),
            AgentParams::new(0.1, 3e-3, -0.2),
            AgentParams::new(0.1, 2e-3, 0.1),
        ];
        let alloc = client_allocation(&u, &clients).unwrap();
        for k in 0..grid.n_steps {
            let total: f64 = alloc.flows.iter().map(|f| f.values[k]).sum();
            assert!((total - u.values[k]).abs() < 1e-13);
        }
        for (c, (f, x)) in clients
            .iter()
            .zip(alloc.flows.iter().zip(&alloc.terminal_inventories))
        {
            assert!((c.x0 + f.total() - x).abs() < 1e-13);
        }
        let moved: f64 = clients
            .iter()
            .zip(&alloc.terminal_inventories)
            .map(|(c, x)| x - c.x0)
            .sum();
        assert!((moved - u.total()).abs() < 1e-12);
    }

    #[test]
    fn reservation_shift_moves_fee() {
        let grid = TimeGrid::new(8, 1.0).unwrap();
        let flow = FlowPath::constant(grid, 1.0);
        let price = DeterministicPrice {
            nodes: vec![0.5; 9],
            inner: vec![[0.5; GAUSS_POINTS]; 8],
            terminal: 1.0,
        };
        let a = expected_fee(&flow, 0.0, 0.01, &price, 0.0);
        let b = expected_fee(&flow, 0.0, 0.01, &price, 0.25);
        assert!((a - b - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_portfolio_has_zero_value() {
        let ev = evaluator(vec![AgentParams::new(0.1, 1e-3, 0.0); 2], 20);
        let report = ev.broker_value(&Portfolio::empty(2)).unwrap();
        assert_eq!(report.broker_value, 0.0);
        assert!(report.clients.is_empty() && report.expected_fees.is_empty());
        assert_eq!(report.independents, vec![0, 1]);
    }

    #[test]
    fn budget_identity_on_desk_case() {
        let ev = evaluator(
            vec![
                AgentParams::new(0.1, 1e-3, 0.0),
                AgentParams::new(0.1, 2e-3, 0.0),
            ],
            200,
        );
        let report = ev.broker_value(&Portfolio::full(2)).unwrap();
        assert!(
            (report.broker_value - report.fee_total()).abs() <= 1e-8,
            "{} vs {}",
            report.broker_value,
            report.fee_total()
        );
    }

    #[test]
    fn budget_identity_with_inventories_and_independents() {
        let agents = vec![
            AgentParams::new(0.1, 1e-3, 0.3),
            AgentParams::new(0.08, 4e-3, -0.2),
            AgentParams::new(0.12, 2e-3, 0.5),
            AgentParams::new(0.15, 3e-3, 0.0),
        ];
        let ev = evaluator(agents, 120);
        for bits in [[1, 0, 1, 0], [1, 1, 1, 1], [0, 1, 0, 0]] {
            let report = ev.broker_value(&Portfolio::from_bits(&bits)).unwrap();
            assert!((report.broker_value - report.fee_total()).abs() <= 1e-8);
            let moved: f64 = report
                .clients
                .iter()
                .zip(&report.client_terminal_inventories)
                .map(|(&i, x)| x - ev.agents[i].x0)
                .sum();
            assert!((moved - report.u_star.total()).abs() < 1e-10);
            assert!(report.foc_residual <= 1e-8);
        }
    }

    #[test]
    fn two_agent_desk_prefers_both_clients() {
        let ev = evaluator(vec![AgentParams::new(0.1, 1e-3, 0.0); 2], 100);
        let full = ev.broker_value(&Portfolio::full(2)).unwrap().broker_value;
        for bits in [[1, 0], [0, 1], [0, 0]] {
            let other = ev
                .broker_value(&Portfolio::from_bits(&bits))
                .unwrap()
                .broker_value;
            assert!(full > other, "{bits:?}: {other} >= {full}");
        }
    }

    #[test]
    fn cache_is_transparent() {
        let agents = vec![
            AgentParams::new(0.1, 1e-3, 0.1),
            AgentParams::new(0.07, 5e-3, 0.0),
            AgentParams::new(0.2, 2e-3, 0.0),
        ];
        let cached = evaluator(agents.clone(), 40);
        let plain = evaluator(agents, 40).without_cache();
        let theta = Portfolio::from_bits(&[1, 1, 0]);
        let a = cached.broker_value(&theta).unwrap();
        let b = plain.broker_value(&theta).unwrap();
        assert_eq!(a.broker_value.to_bits(), b.broker_value.to_bits());
        assert_eq!(a.reservations, b.reservations);
        assert!(cached.cached_portfolios() >= 3);
        assert_eq!(plain.cached_portfolios(), 0);
    }

    #[test]
    fn relative_values_of_self_are_zero() {
        let ev = evaluator(vec![AgentParams::new(0.1, 1e-3, 0.0); 2], 20);
        let base = ev.broker_value(&Portfolio::empty(2)).unwrap();
        assert_eq!(relative_values(&base, &base).unwrap(), vec![0.0, 0.0]);
        let other = evaluator(vec![AgentParams::new(0.2, 1e-3, 0.0); 2], 20);
        let alt = other.broker_value(&Portfolio::empty(2)).unwrap();
        assert_eq!(
            relative_values(&base, &alt).unwrap_err().kind(),
            "parameter_mismatch"
        );
    }

    #[test]
    fn reservations_ignore_stored_reservations() {
        // the flipped portfolio's solve never sees reservation values
        let agents = vec![
            AgentParams::new(0.1, 1e-3, 0.0),
            AgentParams::new(0.09, 2e-3, 0.0),
            AgentParams::new(0.11, 3e-3, 0.0),
        ];
        let ev = evaluator(agents.clone(), 40);
        let theta = Portfolio::full(3);
        let r = ev.reservation_values(&theta).unwrap();
        let sub = Portfolio::from_bits(&[0, 1, 1]);
        let ctx =
            BrokerObjectiveContext::new(&market(), &agents, &sub, TimeGrid::new(40, 1.0).unwrap())
                .unwrap()
                .with_reservation_sum(123.0);
        let flow = ctx.solve_optimal_flow().unwrap();
        let eq = solve_equilibrium(&ctx.mats, &ctx.table, &flow.u_star, 1.0, &[0.0]).unwrap();
        let v = independent_agent_value(0, &ctx.mats, &eq, &market(), 0.0);
        assert_eq!(v.to_bits(), r[0].to_bits());
    }
}
