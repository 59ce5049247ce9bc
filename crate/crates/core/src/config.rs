//! Experiment configuration: a flat JSON document, optionally layered on a
//! named preset, resolved into an [`Experiment`].

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::ConcavityGate;
use crate::error::{Error, Result};
use crate::model::{validate_problem, AgentParams, MarketParams, Portfolio, DEFAULT_STEPS};
use crate::montecarlo::SimConfig;
use crate::search::{Direction, SortKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Solve,
    Search,
    Sweep2d,
    Percentile,
    Kappa0Sweep,
    Montecarlo,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Search => "search",
            Self::Sweep2d => "sweep2d",
            Self::Percentile => "percentile",
            Self::Kappa0Sweep => "kappa0_sweep",
            Self::Montecarlo => "montecarlo",
        }
    }
}

/// How a per-agent coefficient is spread over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    /// `lo + (i / N) (hi - lo)` for agents `i = 1..N`.
    #[default]
    Ramp,
    /// Independent uniform draws, reproducible from `seed`.
    Uniform,
}

/// The configuration document. Every field is optional; missing ones come
/// from the preset, then from the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<AgentParams>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_spacing: Option<Spacing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_spacing: Option<Spacing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Bit string such as `"101"`, agent 1 first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub portfolio: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<ConcavityGate>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_x: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_x_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_x_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_y: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_y_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_y_count: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub sort_key: Option<SortKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<Direction>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_count: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_paths: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    /// `self` with every field set in `top` replaced.
    pub fn overlay(&self, top: &ExperimentConfig) -> ExperimentConfig {
        let mut out = self.clone();
        if top.agents.is_some() {
            // explicit agents replace whatever generator the base carried
            out.n_agents = None;
            out.kappa = None;
            out.lambda = None;
            out.kappa_range = None;
            out.lambda_range = None;
            out.kappa_spacing = None;
            out.lambda_spacing = None;
            out.x0 = None;
        }
        overlay_fields!(out, top;
            preset, experiment, mu, sigma, horizon, kappa0, lambda0, n_steps,
            agents, n_agents, kappa, lambda, kappa_range, lambda_range, kappa_spacing,
            lambda_spacing, x0, seed, portfolio, gate, sweep_x, sweep_x_range, sweep_x_count,
            sweep_y, sweep_y_range, sweep_y_count, sort_key, directions, p_values, p_count,
            n_paths, mc_seed, keep_paths, output);
        out
    }

    fn generator_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let checks: [(&'static str, bool); 8] = [
            ("n_agents", self.n_agents.is_some()),
            ("kappa", self.kappa.is_some()),
            ("lambda", self.lambda.is_some()),
            ("kappa_range", self.kappa_range.is_some()),
            ("lambda_range", self.lambda_range.is_some()),
            ("kappa_spacing", self.kappa_spacing.is_some()),
            ("lambda_spacing", self.lambda_spacing.is_some()),
            ("x0", self.x0.is_some()),
        ];
        for (k, set) in checks {
            if set {
                keys.push(k);
            }
        }
        keys
    }
}

/// Names of the shipped presets.
pub const PRESETS: [&str; 7] = [
    "fig1",
    "fig2",
    "fig3",
    "fig3-literal",
    "fig4",
    "fig5",
    "fig6",
];

/// Seed of the random coefficients in the large-population presets.
pub const PRESET_SEED: u64 = 7;

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        mu: Some(1.0),
        sigma: Some(0.0),
        horizon: Some(1.0),
        x0: Some(0.0),
        ..Default::default()
    };
    let cfg = match name {
        "fig1" => ExperimentConfig {
            experiment: Some(ExperimentKind::Sweep2d),
            kappa0: Some(0.1),
            lambda0: Some(1e-3),
            n_agents: Some(2),
            kappa: Some(0.1),
            lambda: Some(1e-3),
            sweep_x: Some("lambda1".into()),
            sweep_x_range: Some([1e-3, 5e-2]),
            sweep_x_count: Some(10),
            sweep_y: Some("lambda2".into()),
            sweep_y_range: Some([1e-3, 5e-2]),
            sweep_y_count: Some(10),
            ..base
        },
        "fig2" => ExperimentConfig {
            experiment: Some(ExperimentKind::Sweep2d),
            kappa0: Some(1e-2),
            lambda0: Some(1e-2),
            n_agents: Some(2),
            kappa: Some(1e-2),
            lambda: Some(1e-2),
            sweep_x: Some("kappa1".into()),
            sweep_x_range: Some([1e-2, 1e-1]),
            sweep_x_count: Some(10),
            sweep_y: Some("kappa2".into()),
            sweep_y_range: Some([1e-2, 1e-1]),
            sweep_y_count: Some(10),
            ..base
        },
        "fig3" | "fig3-literal" => ExperimentConfig {
            experiment: Some(ExperimentKind::Percentile),
            kappa0: Some(if name == "fig3" { 1e-2 } else { 2e-3 }),
            lambda0: Some(1e-4),
            n_agents: Some(20),
            kappa: Some(5e-2),
            lambda_range: Some([1e-4, 1e-3]),
            lambda_spacing: Some(Spacing::Uniform),
            seed: Some(PRESET_SEED),
            sort_key: Some(SortKey::Lambda),
            p_count: Some(10),
            ..base
        },
        "fig4" => ExperimentConfig {
            experiment: Some(ExperimentKind::Percentile),
            kappa0: Some(1e-3),
            lambda0: Some(5e-5),
            n_agents: Some(20),
            lambda: Some(1e-4),
            kappa_range: Some([1e-4, 1e-3]),
            kappa_spacing: Some(Spacing::Uniform),
            seed: Some(PRESET_SEED),
            sort_key: Some(SortKey::Kappa),
            p_count: Some(10),
            ..base
        },
        "fig5" | "fig6" => ExperimentConfig {
            experiment: Some(ExperimentKind::Kappa0Sweep),
            kappa0: Some(1e-3),
            lambda0: Some(1e-4),
            n_agents: Some(8),
            lambda_range: Some([1e-4, 1e-3]),
            kappa_range: Some([1e-2, 1e-1]),
            sweep_x: Some("kappa0".into()),
            sweep_x_range: Some([1e-3, 1e-2]),
            sweep_x_count: Some(8),
            ..base
        },
        _ => {
            return Err(Error::Config(format!(
                "unknown preset \"{name}\" (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        preset: Some(name.to_string()),
        ..cfg
    })
}

/// A parameter a sweep axis can move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    Mu,
    Sigma,
    Kappa0,
    Lambda0,
    /// Temporary impact of one agent (zero-based).
    Kappa(usize),
    Lambda(usize),
}

impl SweepParam {
    /// Parses `mu`, `sigma`, `kappa0`, `lambda0`, or `kappa<i>` / `lambda<i>`
    /// with a one-based agent label.
    pub fn parse(name: &str, n_agents: usize) -> Result<Self> {
        let agent = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(i) if (1..=n_agents).contains(&i) => Ok(i - 1),
                _ => Err(Error::Config(format!(
                    "sweep parameter \"{name}\" does not name an agent in 1..={n_agents}"
                ))),
            }
        };
        match name {
            "mu" => Ok(Self::Mu),
            "sigma" => Ok(Self::Sigma),
            "kappa0" => Ok(Self::Kappa0),
            "lambda0" => Ok(Self::Lambda0),
            _ if name.starts_with("kappa") => agent(&name[5..]).map(Self::Kappa),
            _ if name.starts_with("lambda") => agent(&name[6..]).map(Self::Lambda),
            _ => Err(Error::Config(format!("unknown sweep parameter \"{name}\""))),
        }
    }

    pub fn apply(self, value: f64, market: &mut MarketParams, agents: &mut [AgentParams]) {
        match self {
            Self::Mu => market.mu = value,
            Self::Sigma => market.sigma = value,
            Self::Kappa0 => market.kappa0 = value,
            Self::Lambda0 => market.lambda0 = value,
            Self::Kappa(i) => agents[i].kappa = value,
            Self::Lambda(i) => agents[i].lambda = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAxis {
    pub name: String,
    pub param: SweepParam,
    pub range: [f64; 2],
    pub count: usize,
}

impl SweepAxis {
    /// `count` equidistant points including both ends.
    pub fn values(&self) -> Vec<f64> {
        let [lo, hi] = self.range;
        match self.count {
            0 => Vec::new(),
            1 => vec![lo],
            c => (0..c)
                .map(|k| lo + (hi - lo) * k as f64 / (c - 1) as f64)
                .collect(),
        }
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub market: MarketParams,
    pub agents: Vec<AgentParams>,
    pub n_steps: usize,
    pub gate: ConcavityGate,
    pub portfolio: Option<Portfolio>,
    pub sweep_x: Option<SweepAxis>,
    pub sweep_y: Option<SweepAxis>,
    pub sort_key: SortKey,
    pub directions: Vec<Direction>,
    pub p_values: Vec<f64>,
    pub sim: SimConfig,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// The merged document the run was resolved from.
    pub config: ExperimentConfig,
}

/// Default percentile grid: `count` equidistant points on `[0, 1]`.
pub fn default_p_values(count: usize) -> Vec<f64> {
    SweepAxis {
        name: "p".into(),
        param: SweepParam::Mu,
        range: [0.0, 1.0],
        count,
    }
    .values()
}

fn coefficient(
    what: &str,
    constant: Option<f64>,
    range: Option<[f64; 2]>,
    spacing: Option<Spacing>,
    n: usize,
    rng: &mut ChaCha8Rng,
    seeded: bool,
) -> Result<Vec<f64>> {
    match (constant, range) {
        (Some(_), Some(_)) => Err(Error::Config(format!(
            "both {what} and {what}_range are set"
        ))),
        (Some(c), None) => Ok(vec![c; n]),
        (None, Some([lo, hi])) => match spacing.unwrap_or_default() {
            Spacing::Ramp => Ok((1..=n)
                .map(|i| lo + (i as f64 / n as f64) * (hi - lo))
                .collect()),
            Spacing::Uniform if !seeded => {
                Err(Error::Config(format!("uniform {what} draws need a seed")))
            }
            Spacing::Uniform => Ok((0..n).map(|_| rng.random_range(lo..=hi)).collect()),
        },
        (None, None) => Err(Error::Config(format!("no value given for {what}"))),
    }
}

fn build_agents(cfg: &ExperimentConfig) -> Result<Vec<AgentParams>> {
    let n = cfg
        .n_agents
        .ok_or_else(|| Error::Config("neither agents nor n_agents is set".into()))?;
    let seed = cfg.seed.unwrap_or(0);
    let mut lambda_rng = ChaCha8Rng::seed_from_u64(seed);
    lambda_rng.set_stream(1);
    let mut kappa_rng = ChaCha8Rng::seed_from_u64(seed);
    kappa_rng.set_stream(2);
    let seeded = cfg.seed.is_some();
    let kappas = coefficient(
        "kappa",
        cfg.kappa,
        cfg.kappa_range,
        cfg.kappa_spacing,
        n,
        &mut kappa_rng,
        seeded,
    )?;
    let lambdas = coefficient(
        "lambda",
        cfg.lambda,
        cfg.lambda_range,
        cfg.lambda_spacing,
        n,
        &mut lambda_rng,
        seeded,
    )?;
    let x0 = cfg.x0.unwrap_or(0.0);
    Ok(kappas
        .into_iter()
        .zip(lambdas)
        .map(|(k, l)| AgentParams::new(k, l, x0))
        .collect())
}

fn axis(
    name: &Option<String>,
    range: Option<[f64; 2]>,
    count: Option<usize>,
    n: usize,
    label: &str,
) -> Result<Option<SweepAxis>> {
    let Some(name) = name else {
        return Ok(None);
    };
    let range = range.ok_or_else(|| Error::Config(format!("{label}_range is missing")))?;
    let count = count.ok_or_else(|| Error::Config(format!("{label}_count is missing")))?;
    Ok(Some(SweepAxis {
        name: name.clone(),
        param: SweepParam::parse(name, n)?,
        range,
        count,
    }))
}

fn parse_portfolio(bits: &str, n: usize) -> Result<Portfolio> {
    let flags: Vec<bool> = bits
        .chars()
        .filter(|c| !matches!(c, ',' | ' ' | '(' | ')'))
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Config(format!(
                "portfolio \"{bits}\" must contain only 0 and 1"
            ))),
        })
        .collect::<Result<_>>()?;
    if flags.len() != n {
        return Err(Error::Config(format!(
            "portfolio \"{bits}\" has {} entries for {n} agents",
            flags.len()
        )));
    }
    Ok(Portfolio::new(flags))
}

/// Merges `user` over its preset (if any) and the defaults, and validates.
pub fn resolve(user: &ExperimentConfig) -> Result<Experiment> {
    if user.agents.is_some() {
        let keys = user.generator_keys();
        if !keys.is_empty() {
            return Err(Error::Config(format!(
                "explicit agents cannot be combined with generator keys ({})",
                keys.join(", ")
            )));
        }
    }
    let cfg = match &user.preset {
        Some(name) => preset(name)?.overlay(user),
        None => user.clone(),
    };
    let kind = cfg
        .experiment
        .ok_or_else(|| Error::Config("experiment kind is not set".into()))?;
    let defaults = MarketParams::default();
    let market = MarketParams {
        mu: cfg.mu.unwrap_or(defaults.mu),
        sigma: cfg.sigma.unwrap_or(defaults.sigma),
        horizon: cfg.horizon.unwrap_or(defaults.horizon),
        kappa0: cfg.kappa0.unwrap_or(defaults.kappa0),
        lambda0: cfg.lambda0.unwrap_or(defaults.lambda0),
    };
    let agents = match &cfg.agents {
        Some(a) => a.clone(),
        None => build_agents(&cfg)?,
    };
    validate_problem(&market, &agents)
        .into_result()
        .map_err(|e| Error::Config(e.to_string()))?;
    let n = agents.len();
    let n_steps = cfg.n_steps.unwrap_or(DEFAULT_STEPS);
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be positive".into()));
    }
    let portfolio = cfg
        .portfolio
        .as_deref()
        .map(|b| parse_portfolio(b, n))
        .transpose()?;
    let mut sweep_x = axis(
        &cfg.sweep_x,
        cfg.sweep_x_range,
        cfg.sweep_x_count,
        n,
        "sweep_x",
    )?;
    let sweep_y = axis(
        &cfg.sweep_y,
        cfg.sweep_y_range,
        cfg.sweep_y_count,
        n,
        "sweep_y",
    )?;
    match kind {
        ExperimentKind::Sweep2d if sweep_x.is_none() || sweep_y.is_none() => {
            return Err(Error::Config(
                "sweep2d needs both sweep_x and sweep_y".into(),
            ));
        }
        ExperimentKind::Kappa0Sweep => {
            if sweep_x.is_none() {
                sweep_x = axis(
                    &Some("kappa0".into()),
                    cfg.sweep_x_range,
                    cfg.sweep_x_count,
                    n,
                    "sweep_x",
                )?;
            }
            if sweep_y.is_some() {
                return Err(Error::Config("kappa0_sweep takes a single axis".into()));
            }
        }
        _ => {}
    }
    let p_values = match &cfg.p_values {
        Some(p) => p.clone(),
        None => default_p_values(cfg.p_count.unwrap_or(10)),
    };
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("percentile {p} outside [0, 1]")));
    }
    let sim = SimConfig {
        n_paths: cfg.n_paths.unwrap_or(1000),
        seed: cfg.mc_seed.unwrap_or(1),
        keep_paths: cfg.keep_paths.unwrap_or(0),
    };
    if sim.n_paths == 0 {
        return Err(Error::Config("n_paths must be positive".into()));
    }
    Ok(Experiment {
        kind,
        market,
        agents,
        n_steps,
        gate: cfg.gate.unwrap_or_default(),
        portfolio,
        sweep_x,
        sweep_y,
        sort_key: cfg.sort_key.unwrap_or(SortKey::Lambda),
        directions: cfg
            .directions
            .clone()
            .unwrap_or_else(|| vec![Direction::Lowest, Direction::Highest]),
        p_values,
        sim,
        seed: cfg.seed,
        output: cfg.output.clone(),
        config: cfg,
    })
}

/// Reads a configuration document. Unknown keys and malformed JSON are
/// reported with their line and column.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Io(format!("config file {} not found", path.display()))
        }
        _ => Error::Io(format!("cannot read {}: {e}", path.display())),
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}
