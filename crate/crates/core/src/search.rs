//! The broker's choice of clients: exhaustive search over all portfolios for
//! small populations and percentile families for large ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Portfolio;
use crate::valuation::Evaluator;

/// Default cap on the number of agents for exhaustive search.
pub const MAX_EXHAUSTIVE: usize = 16;

/// Values closer than this to the maximum count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub best_theta: Portfolio,
    pub best_value: f64,
    /// Every successfully valued portfolio, ordered by binary value.
    pub evaluated: Vec<(Portfolio, f64)>,
    pub failures: Vec<(Portfolio, String)>,
}

impl SearchResult {
    pub fn value_of(&self, theta: &Portfolio) -> Option<f64> {
        self.evaluated
            .iter()
            .find(|(t, _)| t == theta)
            .map(|(_, v)| *v)
    }
}

/// Portfolio whose bit string (agent 1 first) is the binary expansion of `value`.
pub fn portfolio_from_binary(value: u64, n: usize) -> Portfolio {
    Portfolio::new((0..n).map(|i| value >> (n - 1 - i) & 1 == 1).collect())
}

/// Picks the maximum; near-ties go to fewer clients, then to the
/// lexicographically smallest bit string.
pub fn select_best(evaluated: &[(Portfolio, f64)]) -> Option<(Portfolio, f64)> {
    let max = evaluated
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    evaluated
        .iter()
        .filter(|(_, v)| *v >= max - TIE_TOLERANCE)
        .min_by(|(a, _), (b, _)| {
            a.n_clients()
                .cmp(&b.n_clients())
                .then_with(|| a.binary_value().cmp(&b.binary_value()))
        })
        .cloned()
}

pub fn exhaustive_search(evaluator: &Evaluator) -> Result<SearchResult> {
    exhaustive_search_capped(evaluator, MAX_EXHAUSTIVE)
}

pub fn exhaustive_search_capped(evaluator: &Evaluator, n_max: usize) -> Result<SearchResult> {
    let n = evaluator.n_agents();
    if n > n_max || n >= 64 {
        return Err(Error::NTooLarge { n, max: n_max });
    }
    let outcomes: Vec<(Portfolio, Result<f64>)> = (0..1u64 << n)
        .into_par_iter()
        .map(|v| {
            let theta = portfolio_from_binary(v, n);
            let value = evaluator.broker_value(&theta).map(|r| r.broker_value);
            (theta, value)
        })
        .collect();
    let mut evaluated = Vec::new();
    let mut failures = Vec::new();
    for (theta, outcome) in outcomes {
        match outcome {
            Ok(v) => evaluated.push((theta, v)),
            Err(e) => {
                log::warn!("skipping portfolio {theta}: {e}");
                failures.push((theta, e.to_string()));
            }
        }
    }
    // the empty portfolio never fails, so there is always a best
    let (best_theta, best_value) = select_best(&evaluated).ok_or(Error::EmptyClientSet)?;
    Ok(SearchResult {
        best_theta,
        best_value,
        evaluated,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortKey {
    Lambda,
    Kappa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lowest,
    Highest,
}

/// Number of agents in the `p` percentile: `ceil(p N)`, with a small guard so
/// that products like `0.3 * 20` do not round up past the exact count.
pub fn percentile_count(p: f64, n: usize) -> usize {
    let raw = p * n as f64;
    ((raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0) as usize).min(n)
}

/// Portfolio holding the `ceil(p N)` agents with the lowest or highest key,
/// ties broken by agent index.
pub fn percentile_portfolio(
    evaluator: &Evaluator,
    key: SortKey,
    direction: Direction,
    p: f64,
) -> Portfolio {
    let n = evaluator.n_agents();
    let value = |i: usize| match key {
        SortKey::Lambda => evaluator.agents[i].lambda,
        SortKey::Kappa => evaluator.agents[i].kappa,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ord = value(a).total_cmp(&value(b));
        let ord = match direction {
            Direction::Lowest => ord,
            Direction::Highest => ord.reverse(),
        };
        ord.then(a.cmp(&b))
    });
    let mut theta = vec![false; n];
    for &i in order.iter().take(percentile_count(p, n)) {
        theta[i] = true;
    }
    Portfolio::new(theta)
}

#[derive(Debug, Clone, Serialize)]
pub struct PercentilePoint {
    pub p: f64,
    pub theta: Portfolio,
    pub value: Option<f64>,
    pub error: Option<String>,
    pub margin: Option<f64>,
}

pub fn percentile_portfolios(
    evaluator: &Evaluator,
    key: SortKey,
    direction: Direction,
    p_list: &[f64],
) -> Result<Vec<PercentilePoint>> {
    if let Some(p) = p_list.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProblem(vec![format!(
            "percentile {p} outside [0, 1]"
        )]));
    }
    Ok(p_list
        .par_iter()
        .map(|&p| {
            let theta = percentile_portfolio(evaluator, key, direction, p);
            match evaluator.broker_value(&theta) {
                Ok(r) => PercentilePoint {
                    p,
                    theta,
                    value: Some(r.broker_value),
                    error: None,
                    margin: Some(r.wellposedness.margin),
                },
                Err(e) => {
                    log::warn!("percentile {p} ({theta}) failed: {e}");
                    PercentilePoint {
                        p,
                        theta,
                        value: None,
                        error: Some(e.to_string()),
                        margin: None,
                    }
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentParams, MarketParams, TimeGrid};

    fn evaluator(market: MarketParams, agents: Vec<AgentParams>, n: usize) -> Evaluator {
        Evaluator::new(market, agents, TimeGrid::new(n, market.horizon).unwrap()).unwrap()
    }

    fn desk() -> MarketParams {
        MarketParams {
            mu: 1.0,
            sigma: 0.0,
            horizon: 1.0,
            kappa0: 0.1,
            lambda0: 1e-3,
        }
    }

    #[test]
    fn binary_order_reads_agent_one_first() {
        assert_eq!(portfolio_from_binary(0b100, 3).bits(), "100");
        assert_eq!(portfolio_from_binary(1, 3).bits(), "001");
    }

    #[test]
    fn zero_drift_tie_prefers_no_clients() {
        let ev = evaluator(
            MarketParams { mu: 0.0, ..desk() },
            vec![AgentParams::new(0.1, 0.01, 0.0)],
            20,
        );
        let res = exhaustive_search(&ev).unwrap();
        assert_eq!(res.best_theta, Portfolio::empty(1));
        assert_eq!(res.evaluated.len(), 2);
        assert!(res.evaluated.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn tie_breaking_rules() {
        let a = Portfolio::from_bits(&[1, 0]);
        let b = Portfolio::from_bits(&[0, 1]);
        let c = Portfolio::from_bits(&[1, 1]);
        let best =
            select_best(&[(c.clone(), 1.0), (a.clone(), 1.0 - 1e-13), (b.clone(), 1.0)]).unwrap();
        assert_eq!(best.0, b);
        let best = select_best(&[(c.clone(), 1.0), (a, 0.5)]).unwrap();
        assert_eq!(best.0, c);
    }

    #[test]
    fn too_many_agents_is_rejected() {
        let ev = evaluator(desk(), vec![AgentParams::new(0.1, 0.01, 0.0); 5], 10);
        let err = exhaustive_search_capped(&ev, 4).unwrap_err();
        assert_eq!(err, Error::NTooLarge { n: 5, max: 4 });
    }

    #[test]
    fn desk_pair_takes_both() {
        let ev = evaluator(
            desk(),
            vec![
                AgentParams::new(0.1, 2e-3, 0.0),
                AgentParams::new(0.1, 4e-2, 0.0),
            ],
            100,
        );
        let res = exhaustive_search(&ev).unwrap();
        assert_eq!(res.best_theta, Portfolio::full(2));
        assert!(res.failures.is_empty());
    }

    #[test]
    fn cached_search_matches_naive_recomputation() {
        let agents = vec![
            AgentParams::new(0.1, 1e-3, 0.0),
            AgentParams::new(0.05, 8e-3, 0.2),
            AgentParams::new(0.15, 3e-3, 0.0),
        ];
        let cached = exhaustive_search(&evaluator(desk(), agents.clone(), 40)).unwrap();
        let naive_ev = evaluator(desk(), agents, 40).without_cache();
        for (theta, value) in &cached.evaluated {
            let naive = naive_ev.broker_value(theta).unwrap().broker_value;
            assert_eq!(naive.to_bits(), value.to_bits(), "{theta}");
        }
        assert_eq!(cached.evaluated.len(), 8);
    }

    #[test]
    fn percentile_counts() {
        assert_eq!(percentile_count(0.0, 20), 0);
        assert_eq!(percentile_count(0.3, 20), 6);
        assert_eq!(percentile_count(0.31, 20), 7);
        assert_eq!(percentile_count(1.0, 20), 20);
        assert_eq!(percentile_count(0.1, 7), 1);
    }

    #[test]
    fn percentile_selection() {
        let agents = vec![
            AgentParams::new(0.1, 3e-3, 0.0),
            AgentParams::new(0.1, 1e-3, 0.0),
            AgentParams::new(0.1, 2e-3, 0.0),
            AgentParams::new(0.1, 1e-3, 0.0),
        ];
        let ev = evaluator(desk(), agents, 10);
        assert_eq!(
            percentile_portfolio(&ev, SortKey::Lambda, Direction::Lowest, 0.5).bits(),
            "0101"
        );
        assert_eq!(
            percentile_portfolio(&ev, SortKey::Lambda, Direction::Highest, 0.5).bits(),
            "1010"
        );
        assert_eq!(
            percentile_portfolio(&ev, SortKey::Lambda, Direction::Lowest, 0.25).bits(),
            "0100"
        );
        let full_lo = percentile_portfolio(&ev, SortKey::Kappa, Direction::Lowest, 1.0);
        let full_hi = percentile_portfolio(&ev, SortKey::Kappa, Direction::Highest, 1.0);
        assert_eq!(full_lo, full_hi);
        let pts = percentile_portfolios(&ev, SortKey::Lambda, Direction::Lowest, &[0.0]).unwrap();
        assert_eq!(pts[0].value, Some(0.0));
        assert!(percentile_portfolios(&ev, SortKey::Lambda, Direction::Lowest, &[1.5]).is_err());
    }
}
