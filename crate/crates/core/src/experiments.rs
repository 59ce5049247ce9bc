//! Running resolved experiments and writing their results.
//!
//! [`execute`] does the computation and returns typed rows; [`write_outputs`]
//! turns them into `results.csv`, `meta.json` and, for two-axis sweeps,
//! `heatmap.csv`. Rows always come out in sweep order.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{Experiment, ExperimentKind, SweepAxis};
use crate::error::{Error, Result};
use crate::model::{Portfolio, TimeGrid};
use crate::montecarlo::{refinement_ratios, simulate, SimulationOutput};
use crate::search::{
    exhaustive_search, percentile_count, percentile_portfolios, Direction, PercentilePoint,
};
use crate::valuation::{relative_values, Evaluator, ValuationReport};

/// One valued portfolio.
#[derive(Debug, Clone, Serialize)]
pub struct PointRow {
    pub theta: Portfolio,
    pub value: Option<f64>,
    pub margin: Option<f64>,
    pub assumption_holds: Option<bool>,
    pub gradient_residual: Option<f64>,
    pub foc_residual: Option<f64>,
    pub fee_total: Option<f64>,
    pub agent_values: Vec<f64>,
    pub error: Option<String>,
}

impl PointRow {
    pub fn from_report(r: &ValuationReport) -> Self {
        Self {
            theta: r.portfolio.clone(),
            value: Some(r.broker_value),
            margin: Some(r.wellposedness.margin),
            assumption_holds: Some(r.wellposedness.holds),
            gradient_residual: Some(r.gradient_residual),
            foc_residual: Some(r.foc_residual),
            fee_total: Some(r.fee_total()),
            agent_values: r.agent_values.clone(),
            error: None,
        }
    }

    pub fn failed(theta: Portfolio, err: &Error) -> Self {
        let margin = match err {
            Error::WellPosednessViolated { margin, .. } => Some(*margin),
            _ => None,
        };
        Self {
            theta,
            value: None,
            margin,
            assumption_holds: margin.map(|_| false),
            gradient_residual: None,
            foc_residual: None,
            fee_total: None,
            agent_values: Vec::new(),
            error: Some(err.to_string()),
        }
    }

    fn of(theta: &Portfolio, outcome: Result<ValuationReport>) -> Self {
        match outcome {
            Ok(r) => Self::from_report(&r),
            Err(e) => Self::failed(theta.clone(), &e),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub coords: Vec<f64>,
    /// The optimal portfolio at this point, or the failure.
    pub best: PointRow,
    /// Each agent's value under the optimal portfolio less its value without
    /// a broker.
    pub relative: Vec<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloRun {
    pub portfolio: Portfolio,
    pub coarse: SimulationOutput,
    pub fine: SimulationOutput,
    /// Client RMS deviation on the coarse grid over that on the fine grid.
    pub ratios: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub enum Outcome {
    Solve(PointRow),
    /// Every portfolio in binary order, with the winner flagged.
    Search(Vec<(PointRow, bool)>),
    Sweep(Vec<SweepPoint>),
    Percentile(Vec<(Direction, PercentilePoint)>),
    MonteCarlo(Box<MonteCarloRun>),
}

impl Outcome {
    pub fn rows(&self) -> usize {
        match self {
            Self::Solve(_) => 1,
            Self::Search(r) => r.len(),
            Self::Sweep(p) => p.len(),
            Self::Percentile(p) => p.len(),
            Self::MonteCarlo(mc) => mc.coarse.agents.len() + mc.fine.agents.len(),
        }
    }
}

fn evaluator(exp: &Experiment, n_steps: usize) -> Result<Evaluator> {
    let grid = TimeGrid::new(n_steps, exp.market.horizon)?;
    Ok(Evaluator::new(exp.market, exp.agents.clone(), grid)?.with_gate(exp.gate))
}

fn sweep_point(exp: &Experiment, axes: &[&SweepAxis], coords: &[f64]) -> SweepPoint {
    let mut market = exp.market;
    let mut agents = exp.agents.clone();
    for (axis, &v) in axes.iter().zip(coords) {
        axis.param.apply(v, &mut market, &mut agents);
    }
    let n = agents.len();
    let run = || -> Result<(PointRow, Vec<f64>, usize)> {
        let grid = TimeGrid::new(exp.n_steps, market.horizon)?;
        let ev = Evaluator::new(market, agents.clone(), grid)?.with_gate(exp.gate);
        let search = exhaustive_search(&ev)?;
        let best = ev.broker_value(&search.best_theta)?;
        let baseline = ev.broker_value(&Portfolio::empty(n))?;
        let relative = relative_values(&best, &baseline)?;
        Ok((
            PointRow::from_report(&best),
            relative,
            search.failures.len(),
        ))
    };
    match run() {
        Ok((best, relative, failures)) => SweepPoint {
            coords: coords.to_vec(),
            best,
            relative,
            failures,
        },
        Err(e) => SweepPoint {
            coords: coords.to_vec(),
            best: PointRow::failed(Portfolio::empty(n), &e),
            relative: Vec::new(),
            failures: 0,
        },
    }
}

pub fn execute(exp: &Experiment) -> Result<Outcome> {
    let n = exp.agents.len();
    match exp.kind {
        ExperimentKind::Solve => {
            let ev = evaluator(exp, exp.n_steps)?;
            let theta = exp.portfolio.clone().unwrap_or_else(|| Portfolio::full(n));
            Ok(Outcome::Solve(PointRow::from_report(
                &ev.broker_value(&theta)?,
            )))
        }
        ExperimentKind::Search => {
            let ev = evaluator(exp, exp.n_steps)?;
            let res = exhaustive_search(&ev)?;
            let rows = (0..1u64 << n)
                .into_par_iter()
                .map(|v| {
                    let theta = crate::search::portfolio_from_binary(v, n);
                    let best = theta == res.best_theta;
                    (PointRow::of(&theta, ev.broker_value(&theta)), best)
                })
                .collect();
            Ok(Outcome::Search(rows))
        }
        ExperimentKind::Sweep2d | ExperimentKind::Kappa0Sweep => {
            let axes: Vec<&SweepAxis> =
                [&exp.sweep_x, &exp.sweep_y].into_iter().flatten().collect();
            let mut points: Vec<Vec<f64>> = vec![Vec::new()];
            for axis in &axes {
                let values = axis.values();
                points = points
                    .iter()
                    .flat_map(|p| {
                        values.iter().map(move |v| {
                            let mut q = p.clone();
                            q.push(*v);
                            q
                        })
                    })
                    .collect();
            }
            let out = points
                .par_iter()
                .map(|c| sweep_point(exp, &axes, c))
                .collect();
            Ok(Outcome::Sweep(out))
        }
        ExperimentKind::Percentile => {
            let ev = evaluator(exp, exp.n_steps)?;
            let mut rows = Vec::new();
            for &dir in &exp.directions {
                for pt in percentile_portfolios(&ev, exp.sort_key, dir, &exp.p_values)? {
                    rows.push((dir, pt));
                }
            }
            Ok(Outcome::Percentile(rows))
        }
        ExperimentKind::Montecarlo => {
            let theta = exp.portfolio.clone().unwrap_or_else(|| Portfolio::full(n));
            let coarse_ev = evaluator(exp, exp.n_steps)?;
            let fine_ev = evaluator(exp, 2 * exp.n_steps)?;
            let coarse_report = coarse_ev.broker_value(&theta)?;
            let fine_report = fine_ev.broker_value(&theta)?;
            let coarse = simulate(&coarse_report, &exp.sim)?;
            let fine = simulate(&fine_report, &exp.sim)?;
            let ratios = refinement_ratios(&coarse, &fine);
            Ok(Outcome::MonteCarlo(Box::new(MonteCarloRun {
                portfolio: theta,
                margin: coarse_report.wellposedness.margin,
                coarse,
                fine,
                ratios,
            })))
        }
    }
}

/// Numbers carry 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn flag(b: Option<bool>) -> String {
    b.map(|b| u8::from(b).to_string()).unwrap_or_default()
}

fn agent_columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn padded(values: &[f64], n: usize) -> Vec<String> {
    if values.is_empty() {
        vec![String::new(); n]
    } else {
        values.iter().map(|v| num(*v)).collect()
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn point_columns(row: &PointRow) -> Vec<String> {
    vec![
        row.theta.to_string(),
        row.theta.n_clients().to_string(),
        opt(row.value),
        opt(row.margin),
        flag(row.assumption_holds),
        opt(row.gradient_residual),
        opt(row.foc_residual),
        opt(row.fee_total),
    ]
}

const POINT_HEADER: [&str; 8] = [
    "theta",
    "n_clients",
    "broker_value",
    "margin",
    "assumption_holds",
    "gradient_residual",
    "foc_residual",
    "fee_total",
];

fn results_table(exp: &Experiment, outcome: &Outcome) -> Table {
    let n = exp.agents.len();
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match outcome {
        Outcome::Solve(row) => {
            let mut header = strings(&POINT_HEADER);
            header.extend(agent_columns("value", n));
            let mut cells = point_columns(row);
            cells.extend(padded(&row.agent_values, n));
            Table {
                header,
                rows: vec![cells],
            }
        }
        Outcome::Search(rows) => {
            let mut header = strings(&POINT_HEADER);
            header.extend(strings(&["best", "error"]));
            header.extend(agent_columns("value", n));
            let rows = rows
                .iter()
                .map(|(row, best)| {
                    let mut cells = point_columns(row);
                    cells.push(u8::from(*best).to_string());
                    cells.push(row.error.clone().unwrap_or_default());
                    cells.extend(padded(&row.agent_values, n));
                    cells
                })
                .collect();
            Table { header, rows }
        }
        Outcome::Sweep(points) => {
            let mut header: Vec<String> = [&exp.sweep_x, &exp.sweep_y]
                .into_iter()
                .flatten()
                .map(|a| a.name.clone())
                .collect();
            header.extend(strings(&POINT_HEADER));
            header.extend(strings(&["failures", "error"]));
            header.extend(agent_columns("value", n));
            header.extend(agent_columns("relative", n));
            let rows = points
                .iter()
                .map(|p| {
                    let mut cells: Vec<String> = p.coords.iter().map(|c| num(*c)).collect();
                    cells.extend(point_columns(&p.best));
                    cells.push(p.failures.to_string());
                    cells.push(p.best.error.clone().unwrap_or_default());
                    cells.extend(padded(&p.best.agent_values, n));
                    cells.extend(padded(&p.relative, n));
                    cells
                })
                .collect();
            Table { header, rows }
        }
        Outcome::Percentile(points) => {
            let header = strings(&[
                "sort_key",
                "direction",
                "p",
                "count",
                "theta",
                "broker_value",
                "margin",
                "error",
            ]);
            let key = serde_json::to_value(exp.sort_key).expect("enum serializes");
            let rows = points
                .iter()
                .map(|(dir, pt)| {
                    let dir = serde_json::to_value(dir).expect("enum serializes");
                    vec![
                        key.as_str().unwrap_or_default().to_string(),
                        dir.as_str().unwrap_or_default().to_string(),
                        num(pt.p),
                        percentile_count(pt.p, n).to_string(),
                        pt.theta.to_string(),
                        opt(pt.value),
                        opt(pt.margin),
                        pt.error.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            Table { header, rows }
        }
        Outcome::MonteCarlo(mc) => {
            let header = strings(&[
                "n_steps",
                "agent",
                "role",
                "expected_value",
                "expected_fee",
                "mean_fee",
                "fee_std",
                "fee_standard_error",
                "mean_net",
                "net_std",
                "max_abs_deviation",
                "rms_deviation",
                "margin",
            ]);
            let mut rows = Vec::new();
            for out in [&mc.coarse, &mc.fine] {
                for a in &out.agents {
                    rows.push(vec![
                        out.grid.n_steps.to_string(),
                        (a.agent + 1).to_string(),
                        if a.client { "client" } else { "independent" }.to_string(),
                        num(a.expected_value),
                        opt(a.expected_fee),
                        opt(a.mean_fee),
                        opt(a.fee_std),
                        opt(a.fee_standard_error(out.config.n_paths)),
                        num(a.mean_net),
                        num(a.net_std),
                        num(a.max_abs_deviation),
                        num(a.rms_deviation),
                        num(mc.margin),
                    ]);
                }
            }
            Table { header, rows }
        }
    }
}

fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(&table.header)
        .map_err(|e| Error::Io(e.to_string()))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn extra_meta(outcome: &Outcome) -> serde_json::Value {
    match outcome {
        Outcome::Search(rows) => {
            let best = rows.iter().find(|(_, b)| *b).map(|(r, _)| r);
            json!({
                "best_theta": best.map(|r| r.theta.to_string()),
                "best_value": best.and_then(|r| r.value),
            })
        }
        Outcome::MonteCarlo(mc) => json!({
            "portfolio": mc.portfolio.to_string(),
            "refinement_ratios": mc.ratios,
            "coarse_steps": mc.coarse.grid.n_steps,
            "fine_steps": mc.fine.grid.n_steps,
            "paths": mc.coarse.paths,
        }),
        _ => serde_json::Value::Null,
    }
}

/// Writes the result files into `dir` (created if needed).
pub fn write_outputs(exp: &Experiment, outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let results = dir.join("results.csv");
    write_table(&results, &results_table(exp, outcome))?;
    files.push(results);
    if let (Outcome::Sweep(points), Some(_)) = (outcome, &exp.sweep_y) {
        let heatmap = dir.join("heatmap.csv");
        let table = Table {
            header: ["x", "y", "value", "theta"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: points
                .iter()
                .map(|p| {
                    vec![
                        num(p.coords[0]),
                        num(p.coords[1]),
                        opt(p.best.value),
                        p.best.theta.to_string(),
                    ]
                })
                .collect(),
        };
        write_table(&heatmap, &table)?;
        files.push(heatmap);
    }
    let meta = json!({
        "library": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": exp.kind.name(),
        "rows": outcome.rows(),
        "n_steps": exp.n_steps,
        "seeds": { "agents": exp.seed, "montecarlo": exp.sim.seed },
        "market": exp.market,
        "agents": exp.agents,
        "gate": exp.gate,
        "config": exp.config,
        "summary": extra_meta(outcome),
    });
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(&meta_path, text + "\n")?;
    files.push(meta_path);
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outcome: Outcome,
    pub files: Vec<PathBuf>,
}

pub fn run(exp: &Experiment, dir: &Path) -> Result<RunSummary> {
    let outcome = execute(exp)?;
    let files = write_outputs(exp, &outcome, dir)?;
    Ok(RunSummary { outcome, files })
}
