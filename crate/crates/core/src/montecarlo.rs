//! Monte Carlo check of the first-best contract along simulated price paths.
//!
//! Strategies are open loop, so every path shares the same flows and only the
//! Brownian part of the price changes. Fees are settled against the price
//! monitored on the grid (trapezoid rule for `int nu B dt`), while agents earn
//! the exact continuous-time trading value, which also carries the area of the
//! Brownian bridge inside each cell. The gap between the two is what makes the
//! realized net profit of a client deviate from its reservation value, and it
//! shrinks linearly with the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::InteractionMatrices;
use crate::error::{Error, Result};
use crate::model::{integrate_samples, FlowPath, MarketParams, TimeGrid};
use crate::valuation::{
    gross_from_samples, gross_trading_value, CoreSolve, DeterministicPrice, ValuationReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Number of leading paths returned in full.
    pub keep_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            seed: 1,
            keep_paths: 0,
        }
    }
}

/// Brownian increments and in-cell bridge areas of one path.
#[derive(Debug, Clone)]
pub struct Noise {
    pub increments: Vec<f64>,
    pub bridge_areas: Vec<f64>,
}

/// The noise of path `path` depends only on `(seed, path)`, never on the
/// thread that draws it.
pub fn path_noise(seed: u64, path: usize, grid: &TimeGrid) -> Noise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let dt = grid.dt();
    let (sd_b, sd_area) = (dt.sqrt(), (dt * dt * dt / 12.0).sqrt());
    let mut increments = Vec::with_capacity(grid.n_steps);
    let mut bridge_areas = Vec::with_capacity(grid.n_steps);
    for _ in 0..grid.n_steps {
        let z: f64 = rng.sample(StandardNormal);
        let w: f64 = rng.sample(StandardNormal);
        increments.push(sd_b * z);
        bridge_areas.push(sd_area * w);
    }
    Noise {
        increments,
        bridge_areas,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRealization {
    pub path: usize,
    /// Brownian motion at the grid nodes.
    pub brownian: Vec<f64>,
    /// Price at the grid nodes.
    pub price: Vec<f64>,
    /// Realized fee of each client, in report order.
    pub fees: Vec<f64>,
    /// Realized net profit of every agent, original order.
    pub net: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentSummary {
    pub agent: usize,
    pub client: bool,
    /// Reservation value for a client, equilibrium value for an independent.
    pub expected_value: f64,
    pub expected_fee: Option<f64>,
    pub mean_fee: Option<f64>,
    pub fee_std: Option<f64>,
    pub mean_net: f64,
    pub net_std: f64,
    pub max_abs_deviation: f64,
    pub rms_deviation: f64,
}

impl AgentSummary {
    /// Standard error of the mean realized fee.
    pub fn fee_standard_error(&self, n_paths: usize) -> Option<f64> {
        self.fee_std.map(|s| s / (n_paths as f64).sqrt())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationOutput {
    pub config: SimConfig,
    pub grid: TimeGrid,
    pub agents: Vec<AgentSummary>,
    /// Node inventories of every agent, original order. Identical on all paths.
    pub inventories: Vec<Vec<f64>>,
    pub mean_total_fee: f64,
    pub paths: Vec<PathRealization>,
}

impl SimulationOutput {
    pub fn clients(&self) -> impl Iterator<Item = &AgentSummary> {
        self.agents.iter().filter(|a| a.client)
    }
}

fn core_of(report: &ValuationReport) -> Result<&CoreSolve> {
    report.core.as_deref().ok_or_else(|| {
        Error::InvalidProblem(vec!["valuation report carries no solution".to_string()])
    })
}

fn price_of(report: &ValuationReport, core: &CoreSolve) -> DeterministicPrice {
    let broker_inventory = match &core.flow {
        Some(f) => f.x0_path.clone(),
        None => FlowPath::zeros(core.equilibrium.u.grid).inventory_path(0.0),
    };
    DeterministicPrice::build(
        &report.market,
        &core.mats,
        &core.equilibrium,
        &broker_inventory,
    )
}

/// Per-agent data that does not change across paths.
struct Leg {
    agent: usize,
    client: bool,
    cell_rates: Vec<f64>,
    terminal: f64,
    expected_gross: f64,
    expected_value: f64,
    expected_fee: Option<f64>,
}

fn legs(report: &ValuationReport, core: &CoreSolve, price: &DeterministicPrice) -> Vec<Leg> {
    let grid = report.u_star.grid;
    let mut legs = Vec::with_capacity(report.agents.len());
    for (pos, &i) in report.clients.iter().enumerate() {
        let a = report.agents[i];
        let flow = &report.client_flows[pos];
        legs.push(Leg {
            agent: i,
            client: true,
            cell_rates: flow.values.clone(),
            terminal: a.x0 + flow.total(),
            expected_gross: gross_trading_value(flow, a.x0, a.lambda, price),
            expected_value: report.reservations[pos],
            expected_fee: Some(report.expected_fees[pos]),
        });
    }
    let eq = &core.equilibrium;
    for (pos, &i) in report.independents.iter().enumerate() {
        let x = &eq.inventories[pos];
        let samples = &eq.rates.samples[pos];
        legs.push(Leg {
            agent: i,
            client: false,
            cell_rates: eq.rates.averages[pos].values.clone(),
            terminal: x.terminal(),
            expected_gross: gross_from_samples(
                &grid,
                samples,
                x.terminal(),
                report.agents[i].lambda,
                price,
            ),
            expected_value: report.independent_values[pos],
            expected_fee: None,
        });
    }
    legs.sort_by_key(|l| l.agent);
    legs
}

struct PathOutcome {
    fees: Vec<f64>,
    net: Vec<f64>,
    brownian: Vec<f64>,
}

fn run_path(legs: &[Leg], sigma: f64, noise: &Noise, dt: f64) -> PathOutcome {
    let mut brownian = Vec::with_capacity(noise.increments.len() + 1);
    let mut b = 0.0;
    brownian.push(b);
    for db in &noise.increments {
        b += db;
        brownian.push(b);
    }
    let b_t = b;
    let mut fees = Vec::new();
    let mut net = Vec::with_capacity(legs.len());
    for leg in legs {
        let mut monitored = 0.0;
        let mut area = 0.0;
        for (k, v) in leg.cell_rates.iter().enumerate() {
            monitored += v * 0.5 * dt * (brownian[k] + brownian[k + 1]);
            area += v * noise.bridge_areas[k];
        }
        let gross_noise = sigma * (b_t * leg.terminal - monitored - area);
        let gross = leg.expected_gross + gross_noise;
        match leg.expected_fee {
            Some(fee) => {
                let fee = fee + sigma * (b_t * leg.terminal - monitored);
                fees.push(fee);
                net.push(gross - fee);
            }
            None => net.push(gross),
        }
    }
    PathOutcome {
        fees,
        net,
        brownian,
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Simulates the contract of `report` on `config.n_paths` paths.
pub fn simulate(report: &ValuationReport, config: &SimConfig) -> Result<SimulationOutput> {
    if config.n_paths == 0 {
        return Err(Error::InvalidProblem(vec![
            "n_paths must be positive".to_string()
        ]));
    }
    let core = core_of(report)?;
    let grid = report.u_star.grid;
    let dt = grid.dt();
    let price = price_of(report, core);
    let legs = legs(report, core, &price);
    let sigma = report.market.sigma;
    let outcomes: Vec<PathOutcome> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| run_path(&legs, sigma, &path_noise(config.seed, p, &grid), dt))
        .collect();

    let mut fee_pos = 0;
    let agents = legs
        .iter()
        .enumerate()
        .map(|(a, leg)| {
            let net = outcomes.iter().map(|o| o.net[a]);
            let (mean_net, net_std) = mean_std(net.clone());
            let dev = net.map(|x| x - leg.expected_value);
            let max_abs_deviation = dev.clone().fold(0.0, |m: f64, d| m.max(d.abs()));
            let rms_deviation = (dev.map(|d| d * d).sum::<f64>() / config.n_paths as f64).sqrt();
            let (mean_fee, fee_std) = if leg.client {
                let f = fee_pos;
                fee_pos += 1;
                let (m, s) = mean_std(outcomes.iter().map(|o| o.fees[f]));
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            AgentSummary {
                agent: leg.agent,
                client: leg.client,
                expected_value: leg.expected_value,
                expected_fee: leg.expected_fee,
                mean_fee,
                fee_std,
                mean_net,
                net_std,
                max_abs_deviation,
                rms_deviation,
            }
        })
        .collect();

    let mean_total_fee = outcomes
        .iter()
        .map(|o| o.fees.iter().sum::<f64>())
        .sum::<f64>()
        / config.n_paths as f64;
    // independents hold smooth inventories, so their exact node values are used
    let inventories = legs
        .iter()
        .map(
            |leg| match report.independents.iter().position(|&j| j == leg.agent) {
                Some(pos) => core.equilibrium.inventories[pos].nodes.clone(),
                None => FlowPath {
                    grid,
                    values: leg.cell_rates.clone(),
                }
                .inventory(report.agents[leg.agent].x0),
            },
        )
        .collect();
    let paths = outcomes
        .into_iter()
        .take(config.keep_paths)
        .enumerate()
        .map(|(p, o)| PathRealization {
            path: p,
            price: price
                .nodes
                .iter()
                .zip(&o.brownian)
                .map(|(pbar, b)| pbar + sigma * b)
                .collect(),
            brownian: o.brownian,
            fees: o.fees,
            net: o.net,
        })
        .collect();
    Ok(SimulationOutput {
        config: *config,
        grid,
        agents,
        inventories,
        mean_total_fee,
        paths,
    })
}

/// Ratio of client RMS deviations on a grid and on one twice as fine.
pub fn refinement_ratios(coarse: &SimulationOutput, fine: &SimulationOutput) -> Vec<f64> {
    coarse
        .clients()
        .zip(fine.clients())
        .map(|(c, f)| c.rms_deviation / f.rms_deviation)
        .collect()
}

/// Value of independent `i` (internal index) when it adds `eps * shift` to its
/// equilibrium rate while everybody else keeps theirs.
pub fn independent_value_deviated(
    i: usize,
    mats: &InteractionMatrices,
    core: &CoreSolve,
    market: &MarketParams,
    x0_i: f64,
    shift: &FlowPath,
    eps: f64,
) -> f64 {
    let eq = &core.equilibrium;
    let m = mats.m();
    let nu = &eq.rates.samples;
    let u = &eq.u;
    let x = &eq.inventories[i];
    let dx = shift.inventory_path(0.0);
    let running = integrate_samples(&u.grid, |k, g| {
        let uk = u.values[k];
        let own = nu[i][k][g] + eps * shift.values[k];
        let xi = x.inner[k][g] + eps * dx.inner[k][g];
        let perm: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| mats.lambdas[j] * nu[j][k][g])
            .sum();
        let temp: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| mats.kappas[j] * nu[j][k][g])
            .sum::<f64>()
            + mats.kappas[i] * own;
        xi * (market.mu + perm + market.lambda0 * uk) - own * (temp + market.kappa0 * uk)
    });
    running - 0.5 * mats.lambdas[i] * x0_i * x0_i
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationResult {
    pub agent: usize,
    pub client: bool,
    /// Largest expected gain over all directions and sizes.
    pub max_gain: f64,
    /// Largest pathwise gain in absolute value (clients only).
    pub max_abs_path_gain: f64,
}

/// Tries `eps * d` for every direction `d` and size `eps` as a unilateral
/// deviation of `agent` (original label) and reports the best gain.
///
/// An independent is measured by its expected value with all other rates and
/// the broker flow fixed. A client's deviation passes through the broker, so
/// the price moves with it, and the client pays the fee computed from its
/// realized trades; gains are measured path by path.
pub fn deviation_test(
    report: &ValuationReport,
    agent: usize,
    directions: &[FlowPath],
    eps: &[f64],
    config: &SimConfig,
) -> Result<DeviationResult> {
    let core = core_of(report)?;
    let grid = report.u_star.grid;
    for d in directions {
        if d.grid != grid {
            return Err(Error::DimensionMismatch {
                what: "deviation grid steps",
                expected: grid.n_steps,
                got: d.grid.n_steps,
            });
        }
    }
    if let Some(pos) = report.independents.iter().position(|&j| j == agent) {
        let x0 = report.agents[agent].x0;
        let base = independent_value_deviated(
            pos,
            &core.mats,
            core,
            &report.market,
            x0,
            &FlowPath::zeros(grid),
            0.0,
        );
        let mut max_gain = f64::NEG_INFINITY;
        for d in directions {
            for &e in eps {
                let v = independent_value_deviated(pos, &core.mats, core, &report.market, x0, d, e);
                max_gain = max_gain.max(v - base);
            }
        }
        return Ok(DeviationResult {
            agent,
            client: false,
            max_gain,
            max_abs_path_gain: 0.0,
        });
    }
    let pos = report
        .clients
        .iter()
        .position(|&j| j == agent)
        .ok_or(Error::DimensionMismatch {
            what: "agent label",
            expected: report.agents.len(),
            got: agent,
        })?;
    let a = report.agents[agent];
    let base_flow = &report.client_flows[pos];
    let reservation = report.reservations[pos];
    let price = price_of(report, core);
    let dt = grid.dt();
    let sigma = report.market.sigma;
    let noises: Vec<Noise> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| path_noise(config.seed, p, &grid))
        .collect();

    let outcome = |flow: &FlowPath, price: &DeterministicPrice| -> Vec<f64> {
        let expected_gross = gross_trading_value(flow, a.x0, a.lambda, price);
        let leg = Leg {
            agent,
            client: true,
            cell_rates: flow.values.clone(),
            terminal: a.x0 + flow.total(),
            expected_gross,
            expected_value: reservation,
            expected_fee: Some(expected_gross - reservation),
        };
        noises
            .iter()
            .map(|nz| run_path(std::slice::from_ref(&leg), sigma, nz, dt).net[0])
            .collect()
    };
    let base = outcome(base_flow, &price);
    let mut max_gain = f64::NEG_INFINITY;
    let mut max_abs_path_gain: f64 = 0.0;
    for d in directions {
        let dx = d.inventory_path(0.0);
        for &e in eps {
            let flow = base_flow.axpy(e, d);
            let shifted = DeterministicPrice {
                nodes: price.nodes.clone(),
                inner: price
                    .inner
                    .iter()
                    .enumerate()
                    .map(|(k, row)| {
                        std::array::from_fn(|g| {
                            row[g]
                                + e * (report.market.kappa0 * d.values[k]
                                    + report.market.lambda0 * dx.inner[k][g])
                        })
                    })
                    .collect(),
                terminal: price.terminal + e * report.market.lambda0 * dx.terminal(),
            };
            let out = outcome(&flow, &shifted);
            let gains: Vec<f64> = out.iter().zip(&base).map(|(x, y)| x - y).collect();
            let mean = gains.iter().sum::<f64>() / gains.len().max(1) as f64;
            max_gain = max_gain.max(mean);
            max_abs_path_gain = gains.iter().fold(max_abs_path_gain, |m, g| m.max(g.abs()));
        }
    }
    Ok(DeviationResult {
        agent,
        client: true,
        max_gain,
        max_abs_path_gain,
    })
}

/// Piecewise-constant standard normal directions, reproducible from `seed`.
pub fn random_directions(grid: TimeGrid, count: usize, seed: u64) -> Vec<FlowPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| FlowPath {
            grid,
            values: (0..grid.n_steps)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        })
        .collect()
}
