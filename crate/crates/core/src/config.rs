//! INI-style experiment configuration.
//!
//! ```text
//! [scenario]
//! nodes = 32, 64, 96
//! delta = 2
//! seeds = 0, 1, 2, 3
//! algo = heat, adrx
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::baselines::AdrConfig;
use crate::heat_agent::{ActMode, HeatConfig, HeatError};
use crate::node_mac::NodeMacConfig;
use crate::phy_link::{CodingRate, LinkBudgetParams, Sf};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key `{key}`: {message}")]
    Key { line: usize, key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Heat,
    HeatOnline,
    Adrx,
    Random,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Heat, Algo::HeatOnline, Algo::Adrx, Algo::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Heat => "heat",
            Algo::HeatOnline => "heat-online",
            Algo::Adrx => "adrx",
            Algo::Random => "random",
        }
    }

    pub fn needs_offline(self) -> bool {
        self == Algo::Heat
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Algo::Heat | Algo::HeatOnline)
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected heat, heat-online, adrx or random)"))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub buffer_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub nodes: Vec<usize>,
    pub deltas: Vec<f64>,
    pub radius_m: f64,
    pub duration_min: f64,
    pub seeds: Vec<u64>,
    pub algos: Vec<Algo>,
    /// Length of the random-policy collection run behind the offline buffer.
    pub offline_minutes: f64,
    pub half_duplex: bool,
    pub link: LinkBudgetParams,
    pub mac: NodeMacConfig,
    pub trade_off_lambda: f64,
    pub offline_capacity: usize,
    pub heat: HeatConfig,
    pub adr: AdrConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            nodes: vec![32],
            deltas: vec![2.0],
            radius_m: 500_000.0,
            duration_min: 120.0,
            seeds: (0..8).collect(),
            algos: Algo::ALL.to_vec(),
            offline_minutes: 25.0,
            half_duplex: true,
            link: LinkBudgetParams::default(),
            mac: NodeMacConfig::default(),
            trade_off_lambda: 0.5,
            offline_capacity: 100_000,
            heat: HeatConfig::default(),
            adr: AdrConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_one<T: FromStr>(value: &str) -> Result<T, String> {
    value.trim().parse::<T>().map_err(|_| format!("cannot parse `{}`", value.trim()))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err("empty list entry".to_string());
    }
    items.into_iter().map(parse_one).collect()
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

fn parse_sfs(value: &str) -> Result<Vec<Sf>, String> {
    parse_list::<u8>(value)?
        .into_iter()
        .map(|v| Sf::new(v).map_err(|_| format!("spreading factor {v} outside {}..={}", Sf::MIN, Sf::MAX)))
        .collect()
}

fn positive(v: f64) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn unit_interval(v: f64) -> Result<f64, String> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} must lie in [0, 1]"))
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line, message: format!("unterminated section header `{content}`") })?
                    .trim();
                if !["scenario", "phy", "node", "mdp", "heat", "adr", "output"].contains(&name) {
                    return Err(ConfigError::Syntax { line, message: format!("unknown section [{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("expected `key = value`, got `{content}`") })?;
            let key = key.trim();
            let value = value.trim();
            let Some(section) = section.as_deref() else {
                return Err(ConfigError::Key { line, key: key.into(), message: "key outside any section".into() });
            };
            config
                .set(section, key, value)
                .map_err(|message| ConfigError::Key { line, key: format!("{section}.{key}"), message })?;
        }
        config.validate()?;
        Ok(config)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match (section, key) {
            ("scenario", "nodes") => {
                self.nodes = parse_list(value)?;
                if self.nodes.contains(&0) {
                    return Err("node counts must be positive".into());
                }
            }
            ("scenario", "delta") => self.deltas = parse_list::<f64>(value)?.into_iter().map(positive).collect::<Result<_, _>>()?,
            ("scenario", "radius_m") => self.radius_m = positive(parse_one(value)?)?,
            ("scenario", "duration_min") => self.duration_min = positive(parse_one(value)?)?,
            ("scenario", "seeds") => self.seeds = parse_list(value)?,
            ("scenario", "algo") => self.algos = parse_list(value)?,
            ("scenario", "offline_minutes") => self.offline_minutes = positive(parse_one(value)?)?,
            ("scenario", "half_duplex") => self.half_duplex = parse_bool(value)?,

            ("phy", "carrier_hz") => self.link.carrier_hz = positive(parse_one(value)?)?,
            ("phy", "antenna_gain") => self.link.antenna_gain = positive(parse_one(value)?)?,
            ("phy", "bandwidth_hz") => self.link.bandwidth_hz = positive(parse_one(value)?)?,
            ("phy", "coding_rate") => {
                self.link.coding_rate = CodingRate::new(parse_one(value)?).map_err(|e| e.to_string())?;
            }
            ("phy", "noise_figure_db") => self.link.noise_figure_db = parse_one(value)?,
            ("phy", "noise_density_dbm_hz") => self.link.noise_density_dbm_hz = parse_one(value)?,
            ("phy", "capture_threshold_db") => self.link.capture_threshold_db = parse_one(value)?,
            ("phy", "lock_preambles") => self.link.lock_preambles = parse_one(value)?,
            ("phy", "preamble_symbols") => self.link.preamble_symbols = parse_one(value)?,

            ("node", "usf_set") => self.mac.sets.usf = parse_sfs(value)?,
            ("node", "dsf_set") => self.mac.sets.dsf = parse_sfs(value)?,
            ("node", "power_set") => self.mac.sets.power_dbm = parse_list(value)?,
            ("node", "window_set") => self.mac.sets.window_symbols = parse_list(value)?,
            ("node", "channels") => {
                self.mac.channels = parse_one(value)?;
                if self.mac.channels == 0 {
                    return Err("at least one channel is required".into());
                }
            }
            ("node", "payload_bytes") => self.mac.payload_bytes = parse_one(value)?,
            ("node", "downlink_payload_bytes") => self.mac.downlink_payload_bytes = parse_one(value)?,
            ("node", "pa_efficiency") => self.mac.pa_efficiency = positive(parse_one(value)?)?,
            ("node", "rx_power_mw") => self.mac.rx_power_mw = parse_one(value)?,
            ("node", "gateway_tx_dbm") => self.mac.gateway_tx_dbm = parse_one(value)?,

            ("mdp", "trade_off_lambda") => self.trade_off_lambda = unit_interval(parse_one(value)?)?,
            ("mdp", "online_capacity") => self.heat.online_capacity = parse_one(value)?,
            ("mdp", "offline_capacity") => self.offline_capacity = parse_one(value)?,

            ("heat", "layers") => self.heat.encoder.layers = parse_one(value)?,
            ("heat", "model_dim") => self.heat.encoder.model_dim = parse_one(value)?,
            ("heat", "heads") => self.heat.encoder.heads = parse_one(value)?,
            ("heat", "ff_dim") => self.heat.encoder.ff_dim = parse_one(value)?,
            ("heat", "state_widths") => self.heat.state_widths = parse_list(value)?,
            ("heat", "global_widths") => self.heat.global_widths = parse_list(value)?,
            ("heat", "trunk_width") => self.heat.trunk_width = parse_one(value)?,
            ("heat", "rho") => self.heat.rho = parse_one(value)?,
            ("heat", "alpha") => self.heat.alpha = parse_one(value)?,
            ("heat", "beta") => self.heat.beta_off = parse_one(value)?,
            ("heat", "gamma_start") => self.heat.gamma_start = parse_one(value)?,
            ("heat", "gamma_max") => self.heat.gamma_max = parse_one(value)?,
            ("heat", "gamma_ramp_updates") => self.heat.gamma_ramp_updates = parse_one(value)?,
            ("heat", "lr") => self.heat.lr = parse_one(value)?,
            ("heat", "offline_per_online") => self.heat.offline_per_online = parse_one(value)?,
            ("heat", "pretrain_steps") => self.heat.pretrain_steps = parse_one(value)?,
            ("heat", "warmup_steps") => self.heat.warmup_steps = parse_one(value)?,
            ("heat", "train_every") => self.heat.train_every = parse_one(value)?,
            ("heat", "policy_samples") => self.heat.policy_samples = parse_one(value)?,
            ("heat", "policy_baseline") => self.heat.policy_baseline = parse_bool(value)?,
            ("heat", "alg2_literal_sign") => self.heat.alg2_literal_sign = parse_bool(value)?,
            ("heat", "max_enumerated_actions") => self.heat.max_enumerated_actions = parse_one(value)?,
            ("heat", "act_mode") => {
                self.heat.act_mode = match value {
                    "sample" => ActMode::Sample,
                    "greedy" => ActMode::Greedy,
                    other => return Err(format!("expected sample or greedy, got `{other}`")),
                }
            }

            ("adr", "window") => self.adr.window = parse_one(value)?,
            ("adr", "step_db") => self.adr.step_db = positive(parse_one(value)?)?,
            ("adr", "initial_margin_db") => self.adr.initial_margin_db = parse_one(value)?,
            ("adr", "min_margin_db") => self.adr.min_margin_db = parse_one(value)?,
            ("adr", "max_margin_db") => self.adr.max_margin_db = parse_one(value)?,
            ("adr", "loss_low") => self.adr.loss_low = unit_interval(parse_one(value)?)?,
            ("adr", "loss_high") => self.adr.loss_high = unit_interval(parse_one(value)?)?,

            ("output", "csv") => self.output.csv = Some(PathBuf::from(value)),
            ("output", "trace_dir") => self.output.trace_dir = Some(PathBuf::from(value)),
            ("output", "checkpoint_dir") => self.output.checkpoint_dir = Some(PathBuf::from(value)),
            ("output", "buffer_dir") => self.output.buffer_dir = Some(PathBuf::from(value)),

            _ => return Err(format!("unknown key in [{section}]")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.nodes.is_empty() || self.deltas.is_empty() {
            return invalid("the scenario grid is empty".into());
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required".into());
        }
        if self.algos.is_empty() {
            return invalid("at least one algorithm is required".into());
        }
        if let Err(e) = self.mac.sets.validate() {
            return invalid(e.to_string());
        }
        if self.adr.window == 0 || self.adr.min_margin_db > self.adr.max_margin_db || self.adr.loss_low > self.adr.loss_high {
            return invalid("inconsistent ADR settings".into());
        }
        if self.offline_capacity == 0 {
            return invalid("offline_capacity must be positive".into());
        }
        self.heat.validate().map_err(|e: HeatError| ConfigError::Invalid(e.to_string()))
    }

    /// Number of CSV rows a sweep produces.
    pub fn run_count(&self) -> usize {
        self.algos.len() * self.nodes.len() * self.deltas.len() * self.seeds.len()
    }
}
