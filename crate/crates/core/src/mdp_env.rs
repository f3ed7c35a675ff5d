//! MDP view of the simulator: per-node states and actions, the history-aware
//! reward, transition recording and the replay buffers used for training.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Verdict;
use crate::node_mac::{EndNode, ParameterSets};
use crate::sim_engine::{Controller, UplinkContext};

pub const REPLAY_FORMAT: &str = "heatlab-replay";
pub const REPLAY_VERSION: u32 = 1;
pub const REWARD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("node {0} has no transition yet")]
    NotReady(usize),
    #[error("buffer is empty")]
    Empty,
    #[error("replay file version mismatch: file has {found}, this build reads {expected}")]
    Version { found: String, expected: String },
    #[error("replay file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index-encoded parameter tuple `{USF, P, DSF, w}`; also the action type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Action4 {
    pub usf: usize,
    pub ptx: usize,
    pub dsf: usize,
    pub w: usize,
}

impl Action4 {
    pub fn indices(&self) -> [usize; 4] {
        [self.usf, self.ptx, self.dsf, self.w]
    }

    pub fn from_indices(i: [usize; 4]) -> Self {
        Action4 { usf: i[0], ptx: i[1], dsf: i[2], w: i[3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState5 {
    pub distance_m: f64,
    pub params: Action4,
}

impl NodeState5 {
    pub fn of(node: &EndNode) -> Self {
        NodeState5 { distance_m: node.distance_m, params: node.params }
    }

    /// Network input: `d / R` followed by one-hot blocks for each parameter.
    pub fn features(&self, sets: &ParameterSets, radius_m: f64) -> Vec<f64> {
        let mut out = vec![0.0; feature_dim(sets)];
        self.write_features(sets, radius_m, &mut out);
        out
    }

    pub fn write_features(&self, sets: &ParameterSets, radius_m: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = (self.distance_m / radius_m).clamp(0.0, 1.0);
        let mut offset = 1;
        for (index, size) in self.params.indices().into_iter().zip(sets.branch_sizes()) {
            out[offset + index] = 1.0;
            offset += size;
        }
    }
}

pub fn feature_dim(sets: &ParameterSets) -> usize {
    1 + sets.branch_sizes().iter().sum::<usize>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub node: usize,
    /// Simulated time of the decision; used as the snapshot key.
    pub time: f64,
    pub step: u64,
    pub s: NodeState5,
    pub a: Action4,
    pub r: f64,
    pub s_next: NodeState5,
    pub origin: Origin,
}

/// `−2·log₂(1 − (1−λ)·p − λ·h)` with the argument clamped to `[ε, 1]`.
/// With no packets in the step the instantaneous ratio falls back to `h`.
pub fn reward(inst_succ: u64, inst_sent: u64, h_value: f64, trade_off_lambda: f64) -> f64 {
    let p = if inst_sent == 0 { h_value } else { inst_succ as f64 / inst_sent as f64 };
    let arg = (1.0 - (1.0 - trade_off_lambda) * p - trade_off_lambda * h_value).clamp(REWARD_EPSILON, 1.0);
    -2.0 * arg.log2()
}

/// Cumulative delivery ratio per parameter cell, pooled over all nodes.
#[derive(Clone, Debug)]
pub struct HistoryTracker {
    sets: ParameterSets,
    sent: Vec<u64>,
    succ: Vec<u64>,
}

impl HistoryTracker {
    pub fn new(sets: &ParameterSets) -> Self {
        let n = sets.joint_size();
        HistoryTracker { sets: sets.clone(), sent: vec![0; n], succ: vec![0; n] }
    }

    pub fn update(&mut self, cell: &Action4, delivered: bool) -> f64 {
        let j = self.sets.joint_index(cell);
        self.sent[j] += 1;
        self.succ[j] += delivered as u64;
        self.value(cell)
    }

    /// Laplace-smoothed ratio; 0.5 for an unvisited cell.
    pub fn value(&self, cell: &Action4) -> f64 {
        let j = self.sets.joint_index(cell);
        (self.succ[j] as f64 + 1.0) / (self.sent[j] as f64 + 2.0)
    }

    pub fn counts(&self, cell: &Action4) -> (u64, u64) {
        let j = self.sets.joint_index(cell);
        (self.sent[j], self.succ[j])
    }
}

/// Ring buffer of transitions with a per-node time index for contemporaneous sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    n_nodes: usize,
    capacity: usize,
    origin: Origin,
    entries: VecDeque<Transition>,
    /// Per node: (decision time, sequence number), ascending in time.
    per_node: Vec<VecDeque<(f64, u64)>>,
    first_seq: u64,
}

/// One transition per node, all taken at the same time cut.
#[derive(Clone, Debug)]
pub struct GlobalBatch {
    pub cut: f64,
    pub rows: Vec<Transition>,
}

impl GlobalBatch {
    pub fn states(&self) -> Vec<NodeState5> {
        self.rows.iter().map(|t| t.s).collect()
    }

    pub fn next_states(&self) -> Vec<NodeState5> {
        self.rows.iter().map(|t| t.s_next).collect()
    }
}

impl ReplayBuffer {
    pub fn new(n_nodes: usize, capacity: usize, origin: Origin) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            n_nodes,
            capacity,
            origin,
            entries: VecDeque::new(),
            per_node: vec![VecDeque::new(); n_nodes],
            first_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Appends, evicting the oldest transition when full. Per-node decision
    /// times must be non-decreasing.
    pub fn push(&mut self, mut transition: Transition) {
        assert!(transition.node < self.n_nodes, "transition for unknown node {}", transition.node);
        transition.origin = self.origin;
        if self.entries.len() == self.capacity {
            let old = self.entries.pop_front().expect("non-empty at capacity");
            let front = self.per_node[old.node].pop_front();
            debug_assert_eq!(front.map(|f| f.1), Some(self.first_seq));
            self.first_seq += 1;
        }
        let queue = &mut self.per_node[transition.node];
        if let Some(&(last, _)) = queue.back() {
            assert!(transition.time >= last, "per-node transitions must arrive in time order");
        }
        let seq = self.first_seq + self.entries.len() as u64;
        queue.push_back((transition.time, seq));
        self.entries.push_back(transition);
    }

    fn get(&self, seq: u64) -> &Transition {
        &self.entries[(seq - self.first_seq) as usize]
    }

    /// Earliest cut at which every node has a transition.
    pub fn ready_time(&self) -> Result<f64, BufferError> {
        let mut ready = f64::NEG_INFINITY;
        for (node, queue) in self.per_node.iter().enumerate() {
            match queue.front() {
                Some(&(t, _)) => ready = ready.max(t),
                None => return Err(BufferError::NotReady(node)),
            }
        }
        Ok(ready)
    }

    pub fn is_ready(&self) -> bool {
        self.ready_time().is_ok()
    }

    /// Number of snapshot times a cut may land on.
    pub fn eligible_cuts(&self) -> usize {
        match self.ready_time() {
            Ok(ready) => self.entries.iter().filter(|t| t.time >= ready).count(),
            Err(_) => 0,
        }
    }

    /// Each node's latest transition at or before `cut`.
    pub fn batch_at(&self, cut: f64) -> Result<GlobalBatch, BufferError> {
        let mut rows = Vec::with_capacity(self.n_nodes);
        for (node, queue) in self.per_node.iter().enumerate() {
            let k = queue.partition_point(|&(t, _)| t <= cut);
            if k == 0 {
                return Err(BufferError::NotReady(node));
            }
            rows.push(self.get(queue[k - 1].1).clone());
        }
        Ok(GlobalBatch { cut, rows })
    }

    /// Draws a cut uniformly over recorded snapshot times after the buffer
    /// became ready, then returns the contemporaneous batch.
    pub fn sample_global_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<GlobalBatch, BufferError> {
        let ready = self.ready_time()?;
        for _ in 0..64 {
            let t = self.entries[rng.random_range(0..self.entries.len())].time;
            if t >= ready {
                return self.batch_at(t);
            }
        }
        let eligible: Vec<f64> = self.entries.iter().map(|t| t.time).filter(|t| *t >= ready).collect();
        let cut = eligible[rng.random_range(0..eligible.len())];
        self.batch_at(cut)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), BufferError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> Result<(), BufferError> {
        let header = ReplayHeader {
            format: REPLAY_FORMAT.to_string(),
            version: REPLAY_VERSION,
            n_nodes: self.n_nodes,
            capacity: self.capacity,
            origin: self.origin,
            count: self.entries.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for t in &self.entries {
            writeln!(out, "{}", serde_json::to_string(&TransitionRecord::from(t)).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, BufferError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, BufferError> {
        let mut lines = input.lines();
        let header_line = lines.next().ok_or(BufferError::Malformed { line: 1, message: "missing header".into() })??;
        let header: serde_json::Value = serde_json::from_str(&header_line)
            .map_err(|e| BufferError::Malformed { line: 1, message: e.to_string() })?;
        let found = format!(
            "{} v{}",
            header.get("format").and_then(|v| v.as_str()).unwrap_or("?"),
            header.get("version").map(|v| v.to_string()).unwrap_or_else(|| "?".into())
        );
        let expected = format!("{REPLAY_FORMAT} v{REPLAY_VERSION}");
        if found != expected {
            return Err(BufferError::Version { found, expected });
        }
        let header: ReplayHeader =
            serde_json::from_value(header).map_err(|e| BufferError::Malformed { line: 1, message: e.to_string() })?;
        let mut buffer = ReplayBuffer::new(header.n_nodes, header.capacity, header.origin);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let record: TransitionRecord = serde_json::from_str(&line)
                .map_err(|e| BufferError::Malformed { line: line_no, message: e.to_string() })?;
            if record.node >= header.n_nodes {
                return Err(BufferError::Malformed { line: line_no, message: format!("node {} out of range", record.node) });
            }
            buffer.push(record.into_transition());
        }
        if buffer.len() != header.count {
            return Err(BufferError::Malformed {
                line: buffer.len() + 2,
                message: format!("expected {} transitions, found {}", header.count, buffer.len()),
            });
        }
        Ok(buffer)
    }
}

/// Uniform draw over the union of both buffers' snapshot times.
pub fn sample_hybrid<R: Rng + ?Sized>(
    offline: &ReplayBuffer,
    online: &ReplayBuffer,
    rng: &mut R,
) -> Result<GlobalBatch, BufferError> {
    let w_off = offline.eligible_cuts();
    let w_on = online.eligible_cuts();
    if w_off + w_on == 0 {
        return online.sample_global_batch(rng).or_else(|_| offline.sample_global_batch(rng));
    }
    if rng.random_range(0..w_off + w_on) < w_off {
        offline.sample_global_batch(rng)
    } else {
        online.sample_global_batch(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayHeader {
    format: String,
    version: u32,
    n_nodes: usize,
    capacity: usize,
    origin: Origin,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    node: usize,
    t: f64,
    step: u64,
    s: (f64, usize, usize, usize, usize),
    a: [usize; 4],
    r: f64,
    s_next: (f64, usize, usize, usize, usize),
    origin: Origin,
}

fn state_tuple(s: &NodeState5) -> (f64, usize, usize, usize, usize) {
    (s.distance_m, s.params.usf, s.params.ptx, s.params.dsf, s.params.w)
}

fn tuple_state(t: (f64, usize, usize, usize, usize)) -> NodeState5 {
    NodeState5 { distance_m: t.0, params: Action4 { usf: t.1, ptx: t.2, dsf: t.3, w: t.4 } }
}

impl From<&Transition> for TransitionRecord {
    fn from(t: &Transition) -> Self {
        TransitionRecord {
            node: t.node,
            t: t.time,
            step: t.step,
            s: state_tuple(&t.s),
            a: t.a.indices(),
            r: t.r,
            s_next: state_tuple(&t.s_next),
            origin: t.origin,
        }
    }
}

impl TransitionRecord {
    fn into_transition(self) -> Transition {
        Transition {
            node: self.node,
            time: self.t,
            step: self.step,
            s: tuple_state(self.s),
            a: Action4::from_indices(self.a),
            r: self.r,
            s_next: tuple_state(self.s_next),
            origin: self.origin,
        }
    }
}

/// What the network server learned from the uplink that just ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UplinkReport {
    pub delivered: bool,
    pub verdict: Verdict,
    pub snr_db: Option<f64>,
    pub rssi_dbm: f64,
    pub n_sent: u64,
    pub n_succ: u64,
}

pub struct Observation<'a> {
    pub node: usize,
    pub time: f64,
    pub global: &'a [NodeState5],
    pub report: UplinkReport,
}

/// A resource-allocation policy driven by the MDP facade.
pub trait Agent {
    fn act(&mut self, obs: &Observation<'_>) -> Action4;

    /// Completed transition plus the global state at its completion.
    fn observe(&mut self, _transition: &Transition, _global: &[NodeState5]) {}

    fn train_updates(&self) -> u64 {
        0
    }
}

struct PendingDecision {
    time: f64,
    s: NodeState5,
    a: Action4,
}

/// Bridges the event loop to an [`Agent`]: one decision per uplink, rewards
/// from the next uplink of the same node, optional recording into a buffer.
pub struct MdpEnv<'a, A: Agent + ?Sized> {
    agent: &'a mut A,
    sets: ParameterSets,
    trade_off_lambda: f64,
    history: HistoryTracker,
    pending: Vec<Option<PendingDecision>>,
    steps: Vec<u64>,
    recorder: Option<ReplayBuffer>,
    transitions: u64,
}

impl<'a, A: Agent + ?Sized> MdpEnv<'a, A> {
    pub fn new(agent: &'a mut A, sets: &ParameterSets, n_nodes: usize, trade_off_lambda: f64) -> Self {
        MdpEnv {
            agent,
            sets: sets.clone(),
            trade_off_lambda,
            history: HistoryTracker::new(sets),
            pending: (0..n_nodes).map(|_| None).collect(),
            steps: vec![0; n_nodes],
            recorder: None,
            transitions: 0,
        }
    }

    pub fn with_recorder(mut self, buffer: ReplayBuffer) -> Self {
        self.recorder = Some(buffer);
        self
    }

    pub fn history(&self) -> &HistoryTracker {
        &self.history
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn into_recorder(self) -> Option<ReplayBuffer> {
        self.recorder
    }
}

impl<A: Agent + ?Sized> Controller for MdpEnv<'_, A> {
    fn on_uplink_end(&mut self, ctx: &UplinkContext<'_>) -> Action4 {
        let node = &ctx.nodes[ctx.node];
        let delivered = ctx.outcome.verdict == Verdict::Delivered;
        let used = node.params;
        let h = self.history.update(&used, delivered);
        let global: Vec<NodeState5> = ctx.nodes.iter().map(NodeState5::of).collect();
        let s_now = global[ctx.node];

        if let Some(prev) = self.pending[ctx.node].take() {
            let transition = Transition {
                node: ctx.node,
                time: prev.time,
                step: self.steps[ctx.node],
                s: prev.s,
                a: prev.a,
                r: reward(delivered as u64, 1, h, self.trade_off_lambda),
                s_next: s_now,
                origin: self.recorder.as_ref().map(|b| b.origin()).unwrap_or(Origin::Online),
            };
            self.steps[ctx.node] += 1;
            self.transitions += 1;
            if let Some(buffer) = self.recorder.as_mut() {
                buffer.push(transition.clone());
            }
            self.agent.observe(&transition, &global);
        }

        let report = UplinkReport {
            delivered,
            verdict: ctx.outcome.verdict,
            snr_db: ctx.outcome.measured_sinr_db,
            rssi_dbm: ctx.outcome.measured_rssi_dbm,
            n_sent: node.n_sent,
            n_succ: node.n_succ,
        };
        let action = self.agent.act(&Observation { node: ctx.node, time: ctx.now, global: &global, report });
        debug_assert!(self.sets.check(&action).is_ok());
        self.pending[ctx.node] = Some(PendingDecision { time: ctx.now, s: s_now, a: action });
        action
    }
}
