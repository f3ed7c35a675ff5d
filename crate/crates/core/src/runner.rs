//! Experiment pipelines: offline collection, single runs and parallel sweeps
//! emitting one CSV row per (algorithm, N, δ, seed).

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{AdrAgent, RandomAgent};
use crate::config::{Algo, ExperimentConfig};
use crate::heat_agent::{HeatAgent, HeatConfig, HeatError};
use crate::mdp_env::{Agent, MdpEnv, Origin, ReplayBuffer};
use crate::sim_engine::{policy_stream, run, DeploymentConfig, RunOutput, Scenario, SimError};

pub const CSV_HEADER: &str = "run_id,algo,N,delta,radius_m,seed,duration_s,sent,succ,pdr,energy_j,eer,train_updates,status";
pub const THREADS_ENV: &str = "HEATLAB_THREADS";
/// Epoch of the random-policy collection run; the evaluated run uses 0.
pub const OFFLINE_EPOCH: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Heat(#[from] HeatError),
    #[error("agent stopped training: {0}")]
    Training(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub algo: Algo,
    pub n_nodes: usize,
    pub delta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub run_id: usize,
    pub cell: Cell,
    pub radius_m: f64,
    pub duration_s: f64,
    pub sent: u64,
    pub succ: u64,
    pub pdr: Option<f64>,
    pub energy_j: f64,
    pub eer: Option<f64>,
    pub train_updates: u64,
    pub status: String,
}

impl RunRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let status: String = self.status.chars().map(|c| if c == ',' || c == '\n' || c == '"' { ';' } else { c }).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.cell.algo.as_str(),
            self.cell.n_nodes,
            self.cell.delta,
            self.radius_m,
            self.cell.seed,
            self.duration_s,
            self.sent,
            self.succ,
            opt(self.pdr),
            self.energy_j,
            opt(self.eer),
            self.train_updates,
            status
        )
    }
}

pub fn scenario(config: &ExperimentConfig, n_nodes: usize, delta: f64, seed: u64, duration_s: f64, epoch: u32) -> Scenario {
    let mut s = Scenario::new(DeploymentConfig { n_nodes, radius_m: config.radius_m, traffic_delta: delta, duration_s, seed });
    s.link = config.link.clone();
    s.mac = config.mac.clone();
    s.half_duplex = config.half_duplex;
    s.epoch = epoch;
    s
}

const OFFLINE_MAX_DOUBLINGS: u32 = 4;

/// Runs the uniform random policy on the same deployment and records every
/// transition. When some node stayed silent for the whole window the
/// collection is repeated over a doubled window, up to 16 times the
/// configured length.
pub fn collect_offline(config: &ExperimentConfig, n_nodes: usize, delta: f64, seed: u64) -> Result<ReplayBuffer, RunError> {
    let sets = &config.mac.sets;
    let mut minutes = config.offline_minutes;
    for attempt in 0..=OFFLINE_MAX_DOUBLINGS {
        let sc = scenario(config, n_nodes, delta, seed, minutes * 60.0, OFFLINE_EPOCH);
        let mut agent = RandomAgent::new(sets, policy_stream(seed, OFFLINE_EPOCH));
        let buffer = ReplayBuffer::new(n_nodes, config.offline_capacity, Origin::Offline);
        let mut env = MdpEnv::new(&mut agent, sets, n_nodes, config.trade_off_lambda).with_recorder(buffer);
        run(&sc, &mut env, false)?;
        let buffer = env.into_recorder().expect("recorder attached");
        if buffer.is_ready() || attempt == OFFLINE_MAX_DOUBLINGS {
            return Ok(buffer);
        }
        minutes *= 2.0;
    }
    unreachable!()
}

pub fn heat_config_for(config: &ExperimentConfig, algo: Algo) -> HeatConfig {
    match algo {
        Algo::HeatOnline => config.heat.online_only(),
        _ => config.heat.clone(),
    }
}

/// A learning agent ready for the evaluated run: offline buffer attached and
/// pretraining done when the algorithm uses them.
pub fn prepare_heat(
    config: &ExperimentConfig,
    algo: Algo,
    n_nodes: usize,
    delta: f64,
    seed: u64,
    offline: Option<ReplayBuffer>,
) -> Result<HeatAgent, RunError> {
    let mut agent = HeatAgent::new(heat_config_for(config, algo), &config.mac.sets, n_nodes, config.radius_m, seed)?;
    if algo.needs_offline() {
        let buffer = match offline {
            Some(b) => b,
            None => collect_offline(config, n_nodes, delta, seed)?,
        };
        agent.attach_offline(buffer)?;
        agent.pretrain()?;
    }
    Ok(agent)
}

/// Drives `agent` through one evaluated run.
pub fn run_agent(
    config: &ExperimentConfig,
    agent: &mut dyn Agent,
    n_nodes: usize,
    delta: f64,
    seed: u64,
    keep_trace: bool,
) -> Result<RunOutput, RunError> {
    let sc = scenario(config, n_nodes, delta, seed, config.duration_min * 60.0, 0);
    let mut env = MdpEnv::new(agent, &config.mac.sets, n_nodes, config.trade_off_lambda);
    Ok(run(&sc, &mut env, keep_trace)?)
}

/// Runs one cell with a fresh agent of the cell's algorithm.
pub fn run_cell(config: &ExperimentConfig, cell: Cell, keep_trace: bool) -> Result<(RunOutput, u64), RunError> {
    let Cell { algo, n_nodes, delta, seed } = cell;
    match algo {
        Algo::Random => {
            let mut agent = RandomAgent::new(&config.mac.sets, policy_stream(seed, 0));
            Ok((run_agent(config, &mut agent, n_nodes, delta, seed, keep_trace)?, 0))
        }
        Algo::Adrx => {
            let mut agent = AdrAgent::new(&config.mac.sets, n_nodes, config.adr.clone());
            Ok((run_agent(config, &mut agent, n_nodes, delta, seed, keep_trace)?, 0))
        }
        Algo::Heat | Algo::HeatOnline => {
            let mut agent = prepare_heat(config, algo, n_nodes, delta, seed, None)?;
            let out = run_agent(config, &mut agent, n_nodes, delta, seed, keep_trace)?;
            if let Some(e) = agent.failure() {
                return Err(RunError::Training(e.to_string()));
            }
            Ok((out, agent.train_updates()))
        }
    }
}

pub fn row_from(run_id: usize, config: &ExperimentConfig, cell: Cell, result: Result<(RunOutput, u64), RunError>) -> RunRow {
    let mut row = RunRow {
        run_id,
        cell,
        radius_m: config.radius_m,
        duration_s: config.duration_min * 60.0,
        sent: 0,
        succ: 0,
        pdr: None,
        energy_j: 0.0,
        eer: None,
        train_updates: 0,
        status: "ok".to_string(),
    };
    match result {
        Ok((out, updates)) => {
            let m = out.metrics;
            row.sent = m.sent;
            row.succ = m.succ;
            row.pdr = m.pdr;
            row.energy_j = m.energy_joules;
            row.eer = m.eer;
            row.train_updates = updates;
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

/// Grid cells in CSV order: algorithm, then N, then δ, then seed.
pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::with_capacity(config.run_count());
    for &algo in &config.algos {
        for &n_nodes in &config.nodes {
            for &delta in &config.deltas {
                for &seed in &config.seeds {
                    out.push(Cell { algo, n_nodes, delta, seed });
                }
            }
        }
    }
    out
}

/// Worker count from `HEATLAB_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|n: &usize| *n > 0)
}

/// Runs every cell; failed cells become rows with a failure status.
pub fn run_sweep(config: &ExperimentConfig) -> Vec<RunRow> {
    let work = || -> Vec<RunRow> {
        cells(config)
            .into_par_iter()
            .enumerate()
            .map(|(i, cell)| row_from(i, config, cell, run_cell(config, cell, false)))
            .collect()
    };
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        },
        None => work(),
    }
}

pub fn sweep_csv(rows: &[RunRow]) -> String {
    let mut out = String::with_capacity(96 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.to_csv());
    }
    out
}

/// Mean of a column over the ok rows matching `filter`.
pub fn mean_of<F, G>(rows: &[RunRow], filter: F, value: G) -> Option<f64>
where
    F: Fn(&RunRow) -> bool,
    G: Fn(&RunRow) -> Option<f64>,
{
    let vals: Vec<f64> = rows.iter().filter(|r| r.is_ok() && filter(r)).filter_map(&value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "[scenario]\nnodes = 3\ndelta = 2\nseeds = 0\nalgo = random\nduration_min = 5\nradius_m = 50000\n",
        )
        .unwrap()
    }

    #[test]
    fn one_cell_gives_header_and_one_row() {
        let rows = run_sweep(&tiny());
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
        assert!(lines[1].starts_with("0,random,3,2,50000,0,300,"));
        assert!(lines[1].ends_with(",0,ok"));
    }

    #[test]
    fn cell_order_is_algo_then_n_then_delta_then_seed() {
        let c = ExperimentConfig::parse("[scenario]\nnodes = 1,2\ndelta = 1,3\nseeds = 4,5\nalgo = adrx,random\n").unwrap();
        let cells = cells(&c);
        assert_eq!(cells.len(), 16);
        assert_eq!(cells[0], Cell { algo: Algo::Adrx, n_nodes: 1, delta: 1.0, seed: 4 });
        assert_eq!(cells[1].seed, 5);
        assert_eq!(cells[2].delta, 3.0);
        assert_eq!(cells[4].n_nodes, 2);
        assert_eq!(cells[8].algo, Algo::Random);
    }

    #[test]
    fn failures_are_reported_not_dropped() {
        let config = tiny();
        let cell = Cell { algo: Algo::Random, n_nodes: 3, delta: 2.0, seed: 0 };
        let row = row_from(7, &config, cell, Err(RunError::Training("bad, very bad".into())));
        assert!(!row.is_ok());
        let csv = row.to_csv();
        assert_eq!(csv.split(',').count(), 14);
        assert!(csv.ends_with("failed: agent stopped training: bad; very bad"));
    }

    #[test]
    fn offline_collection_records_every_decision() {
        let mut config = tiny();
        config.offline_minutes = 10.0;
        let buffer = collect_offline(&config, 3, 2.0, 0).unwrap();
        assert!(buffer.len() > 30);
        assert!(buffer.is_ready());
        assert!(buffer.iter().all(|t| t.origin == Origin::Offline));
    }

    #[test]
    fn offline_window_grows_until_every_node_is_heard() {
        let mut config = tiny();
        config.offline_minutes = 0.5;
        let sets = &config.mac.sets;
        let sc = scenario(&config, 4, 1.0, 0, 30.0, OFFLINE_EPOCH);
        let mut agent = RandomAgent::new(sets, policy_stream(0, OFFLINE_EPOCH));
        let mut env = MdpEnv::new(&mut agent, sets, 4, 0.5).with_recorder(ReplayBuffer::new(4, 1000, Origin::Offline));
        run(&sc, &mut env, false).unwrap();
        assert!(!env.into_recorder().unwrap().is_ready());
        let buffer = collect_offline(&config, 4, 1.0, 0).unwrap();
        assert!(buffer.is_ready());
    }
}
