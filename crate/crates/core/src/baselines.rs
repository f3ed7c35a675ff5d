//! Reference policies behind the same [`Agent`] hook as the learner: uniform
//! random parameters and an ADR-style link-margin controller.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mdp_env::{Action4, Agent, Observation};
use crate::node_mac::ParameterSets;

/// Draws every field independently and uniformly from its set.
pub fn random_uniform<R: Rng + ?Sized>(sets: &ParameterSets, rng: &mut R) -> Action4 {
    let [nu, np, nd, nw] = sets.branch_sizes();
    Action4 {
        usf: rng.random_range(0..nu),
        ptx: rng.random_range(0..np),
        dsf: rng.random_range(0..nd),
        w: rng.random_range(0..nw),
    }
}

pub struct RandomAgent {
    sets: ParameterSets,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(sets: &ParameterSets, rng: ChaCha8Rng) -> Self {
        RandomAgent { sets: sets.clone(), rng }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _obs: &Observation<'_>) -> Action4 {
        random_uniform(&self.sets, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdrConfig {
    pub window: usize,
    pub step_db: f64,
    pub initial_margin_db: f64,
    pub min_margin_db: f64,
    pub max_margin_db: f64,
    pub loss_low: f64,
    pub loss_high: f64,
}

impl Default for AdrConfig {
    fn default() -> Self {
        AdrConfig {
            window: 20,
            step_db: 3.0,
            initial_margin_db: 10.0,
            min_margin_db: 0.0,
            max_margin_db: 30.0,
            loss_low: 0.10,
            loss_high: 0.30,
        }
    }
}

/// Per-node server-side ADR bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AdrState {
    /// Received SNR minus the transmit power it was sent with, so samples
    /// stay comparable after power changes.
    pub link_db: VecDeque<f64>,
    pub margin_db: f64,
    /// Delivery flags since the last margin adaptation.
    pub outcomes: Vec<bool>,
}

impl AdrState {
    pub fn new(config: &AdrConfig) -> Self {
        AdrState { link_db: VecDeque::new(), margin_db: config.initial_margin_db, outcomes: Vec::new() }
    }

    pub fn record(&mut self, config: &AdrConfig, delivered: bool, snr_db: Option<f64>, ptx_dbm: f64) {
        if let (true, Some(snr)) = (delivered, snr_db) {
            if self.link_db.len() == config.window {
                self.link_db.pop_front();
            }
            self.link_db.push_back(snr - ptx_dbm);
        }
        self.outcomes.push(delivered);
        if self.outcomes.len() >= config.window {
            let loss = self.outcomes.iter().filter(|d| !**d).count() as f64 / self.outcomes.len() as f64;
            if loss > config.loss_high {
                self.margin_db += config.step_db;
            } else if loss < config.loss_low {
                self.margin_db -= config.step_db;
            }
            self.margin_db = self.margin_db.clamp(config.min_margin_db, config.max_margin_db);
            self.outcomes.clear();
        }
    }

    /// Best recent SNR had the node transmitted at `ptx_dbm`.
    pub fn max_snr_at(&self, ptx_dbm: f64) -> Option<f64> {
        self.link_db.iter().cloned().reduce(f64::max).map(|l| l + ptx_dbm)
    }
}

/// Margin-step rule: spend each 3 dB of headroom on a lower SF first, then on
/// lower power; a negative headroom raises power. DSF follows USF.
pub fn adr_like(current: Action4, sets: &ParameterSets, state: &AdrState, config: &AdrConfig) -> Action4 {
    let Some(max_snr) = state.max_snr_at(sets.power(&current)) else {
        return current;
    };
    let threshold = sets.usf(&current).profile().demod_threshold_db;
    let mut steps = ((max_snr - threshold - state.margin_db) / config.step_db).floor() as i64;
    let mut next = current;
    while steps > 0 {
        if next.usf > 0 {
            next.usf -= 1;
        } else if next.ptx > 0 {
            next.ptx -= 1;
        } else {
            break;
        }
        steps -= 1;
    }
    while steps < 0 && next.ptx + 1 < sets.power_dbm.len() {
        next.ptx += 1;
        steps += 1;
    }
    next.dsf = nearest_dsf(sets, sets.usf(&next).value());
    next
}

fn nearest_dsf(sets: &ParameterSets, sf: u8) -> usize {
    let mut best = 0;
    for (i, d) in sets.dsf.iter().enumerate() {
        if (d.value() as i32 - sf as i32).abs() < (sets.dsf[best].value() as i32 - sf as i32).abs() {
            best = i;
        }
    }
    best
}

pub struct AdrAgent {
    sets: ParameterSets,
    config: AdrConfig,
    states: Vec<AdrState>,
}

impl AdrAgent {
    pub fn new(sets: &ParameterSets, n_nodes: usize, config: AdrConfig) -> Self {
        let states = (0..n_nodes).map(|_| AdrState::new(&config)).collect();
        AdrAgent { sets: sets.clone(), config, states }
    }

    pub fn state(&self, node: usize) -> &AdrState {
        &self.states[node]
    }
}

impl Agent for AdrAgent {
    fn act(&mut self, obs: &Observation<'_>) -> Action4 {
        let current = obs.global[obs.node].params;
        let ptx = self.sets.power(&current);
        let state = &mut self.states[obs.node];
        state.record(&self.config, obs.report.delivered, obs.report.snr_db, ptx);
        adr_like(current, &self.sets, state, &self.config)
    }
}
