//! Deterministic discrete-event core: deployment, the event queue, the node
//! uplink/receive-window cycle and end-of-run metrics.
//!
//! Random streams are split from the master seed: stream 0 places the nodes,
//! stream `(epoch << 32) | (i + 1)` drives node `i` and stream
//! `(epoch << 32) | 0xFFFF_FFFF` is handed to policies. Adding nodes never
//! changes the draws of existing ones.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::gateway::{
    AttemptId, DownlinkPlan, DownlinkRequest, Gateway, GatewayConfig, GatewayError, ReceiveWindow, ReceptionOutcome,
    Verdict,
};
use crate::mdp_env::Action4;
use crate::node_mac::{
    apply_downlink_command, begin_uplink, downlink_reaches_node, next_uplink_time, open_receive_windows,
    rx_energy_joules, EndNode, NodeError, NodeMacConfig, WindowSchedule,
};
use crate::phy_link::{LinkBudgetParams, TransmissionAttempt};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event time went backwards: {previous} -> {next}")]
    TimeRegression { previous: f64, next: f64 },
    #[error("invalid deployment: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Node(#[from] NodeError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeploymentConfig {
    pub n_nodes: usize,
    pub radius_m: f64,
    /// Packets per minute per node.
    pub traffic_delta: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_nodes == 0 {
            return Err(SimError::InvalidConfig("at least one node is required".into()));
        }
        if !(self.radius_m > 0.0) {
            return Err(SimError::InvalidConfig(format!("radius must be positive, got {}", self.radius_m)));
        }
        if !(self.traffic_delta > 0.0) {
            return Err(SimError::InvalidConfig(format!("traffic intensity must be positive, got {}", self.traffic_delta)));
        }
        if !(self.duration_s >= 0.0) {
            return Err(SimError::InvalidConfig(format!("duration must be non-negative, got {}", self.duration_s)));
        }
        Ok(())
    }

    /// Nodes per square metre of the deployment disk.
    pub fn density(&self) -> f64 {
        self.n_nodes as f64 / (std::f64::consts::PI * self.radius_m * self.radius_m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub deployment: DeploymentConfig,
    pub link: LinkBudgetParams,
    pub mac: NodeMacConfig,
    pub half_duplex: bool,
    /// Namespace for node and policy streams; deployment ignores it.
    pub epoch: u32,
}

impl Scenario {
    pub fn new(deployment: DeploymentConfig) -> Self {
        Scenario {
            deployment,
            link: LinkBudgetParams::default(),
            mac: NodeMacConfig::default(),
            half_duplex: true,
            epoch: 0,
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig { link: self.link.clone(), half_duplex: self.half_duplex, ..GatewayConfig::default() }
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn node_stream(seed: u64, epoch: u32, node: usize) -> ChaCha8Rng {
    stream_rng(seed, ((epoch as u64) << 32) | (node as u64 + 1))
}

pub fn policy_stream(seed: u64, epoch: u32) -> ChaCha8Rng {
    stream_rng(seed, ((epoch as u64) << 32) | 0xFFFF_FFFF)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

/// Uniform points on the disk of radius R (`r = R·√u`, uniform angle).
pub fn deploy_positions(n_nodes: usize, radius_m: f64, seed: u64) -> Vec<Position> {
    let mut rng = stream_rng(seed, 0);
    (0..n_nodes)
        .map(|_| {
            let u: f64 = rng.random();
            let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            // a node exactly on the gateway would have undefined path loss
            let r = (radius_m * u.sqrt()).max(f64::MIN_POSITIVE);
            Position { x: r * angle.cos(), y: r * angle.sin() }
        })
        .collect()
}

pub fn deploy_nodes(scenario: &Scenario) -> Result<Vec<EndNode>, SimError> {
    let d = &scenario.deployment;
    d.validate()?;
    scenario.mac.sets.validate()?;
    Ok(deploy_positions(d.n_nodes, d.radius_m, d.seed)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let distance = p.x.hypot(p.y);
            let params = scenario.mac.sets.initial_params(distance, d.radius_m);
            EndNode::new(i, distance, params, node_stream(d.seed, scenario.epoch, i))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    UplinkEnd,
    DownlinkEnd,
    Rx1Close,
    Rx2Close,
    DownlinkStart,
    Rx1Open,
    Rx2Open,
    UplinkStart,
}

impl EventKind {
    /// Tie-break rank at equal times; ends sort before starts.
    pub fn rank(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub node: usize,
    pub attempt: Option<AttemptId>,
    seq: u64,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.node.cmp(&other.node))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue ordered by (time, kind rank, node id, insertion order).
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    next_seq: u64,
    last_time: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, last_time: f64::NEG_INFINITY }
    }

    pub fn push(&mut self, time: f64, kind: EventKind, node: usize, attempt: Option<AttemptId>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(Event { time, kind, node, attempt, seq }));
    }

    pub fn pop(&mut self) -> Result<Option<Event>, SimError> {
        let Some(std::cmp::Reverse(event)) = self.heap.pop() else {
            return Ok(None);
        };
        if event.time < self.last_time {
            return Err(SimError::TimeRegression { previous: self.last_time, next: event.time });
        }
        self.last_time = event.time;
        Ok(Some(event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Information handed to the controller when an uplink ends.
pub struct UplinkContext<'a> {
    pub now: f64,
    pub node: usize,
    pub nodes: &'a [EndNode],
    pub outcome: &'a ReceptionOutcome,
}

/// Network-server hook: returns the command for the node whose uplink ended.
/// The command only reaches the node if the uplink was delivered and the
/// downlink carrying it is received.
pub trait Controller {
    fn on_uplink_end(&mut self, ctx: &UplinkContext<'_>) -> Action4;
}

/// Leaves every node on its current parameters.
pub struct HoldParameters;

impl Controller for HoldParameters {
    fn on_uplink_end(&mut self, ctx: &UplinkContext<'_>) -> Action4 {
        ctx.nodes[ctx.node].params
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub sent: u64,
    pub succ: u64,
    pub energy_joules: f64,
    pub pdr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub per_node: Vec<NodeMetrics>,
    pub sent: u64,
    pub succ: u64,
    pub energy_joules: f64,
    /// Absent when nothing was sent.
    pub pdr: Option<f64>,
    /// Successful packets per joule; absent when no energy was spent.
    pub eer: Option<f64>,
    pub verdict_counts: [u64; 7],
    pub downlinks_scheduled: u64,
    pub downlinks_dropped: u64,
    pub commands_applied: u64,
}

impl RunMetrics {
    pub fn from_nodes(nodes: &[EndNode]) -> Self {
        let per_node: Vec<NodeMetrics> = nodes
            .iter()
            .map(|n| NodeMetrics {
                sent: n.n_sent,
                succ: n.n_succ,
                energy_joules: n.energy_joules,
                pdr: (n.n_sent > 0).then(|| n.n_succ as f64 / n.n_sent as f64),
            })
            .collect();
        let sent = per_node.iter().map(|m| m.sent).sum();
        let succ = per_node.iter().map(|m| m.succ).sum();
        let energy_joules: f64 = per_node.iter().map(|m| m.energy_joules).sum();
        RunMetrics {
            per_node,
            sent,
            succ,
            energy_joules,
            pdr: (sent > 0).then(|| succ as f64 / sent as f64),
            eer: (energy_joules > 0.0).then(|| succ as f64 / energy_joules),
            ..RunMetrics::default()
        }
    }
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Option<Vec<ReceptionOutcome>>,
    pub nodes: Vec<EndNode>,
}

pub const TRACE_HEADER: &str = "time,node,channel,sf,verdict,rssi_dbm,sinr_db";

pub fn trace_csv(outcomes: &[ReceptionOutcome]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for o in outcomes {
        let sinr = o.measured_sinr_db.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{},{}", o.time, o.node, o.channel, o.sf, o.verdict.as_str(), o.measured_rssi_dbm, sinr);
    }
    out
}

#[derive(Clone, Debug)]
struct RxCycle {
    /// Uplink that opened this cycle; events carry it to detect stale ones.
    attempt: AttemptId,
    windows: WindowSchedule,
    command: Action4,
    plan: Option<(ReceiveWindow, f64, f64)>,
    /// The node detected the downlink preamble and keeps listening.
    receiving: bool,
    done: bool,
}

struct Engine<'c> {
    scenario: Scenario,
    gateway: Gateway,
    nodes: Vec<EndNode>,
    queue: EventQueue,
    cycles: Vec<Option<RxCycle>>,
    next_arrival: Vec<f64>,
    live: Vec<Option<AttemptId>>,
    next_attempt: AttemptId,
    trace: Option<Vec<ReceptionOutcome>>,
    metrics: RunMetrics,
    controller: &'c mut dyn Controller,
}

/// Runs the scenario until the queue drains. New uplinks only start before
/// `duration_s`; cycles already in flight are completed.
pub fn run(scenario: &Scenario, controller: &mut dyn Controller, keep_trace: bool) -> Result<RunOutput, SimError> {
    let nodes = deploy_nodes(scenario)?;
    run_with_nodes(scenario, nodes, controller, keep_trace)
}

pub fn run_with_nodes(
    scenario: &Scenario,
    nodes: Vec<EndNode>,
    controller: &mut dyn Controller,
    keep_trace: bool,
) -> Result<RunOutput, SimError> {
    let n = nodes.len();
    let mut engine = Engine {
        gateway: Gateway::new(scenario.gateway_config()),
        scenario: scenario.clone(),
        nodes,
        queue: EventQueue::new(),
        cycles: vec![None; n],
        next_arrival: vec![0.0; n],
        live: vec![None; n],
        next_attempt: 0,
        trace: keep_trace.then(Vec::new),
        metrics: RunMetrics::default(),
        controller,
    };
    engine.start()?;
    while let Some(event) = engine.queue.pop()? {
        engine.handle(event)?;
    }
    let mut metrics = RunMetrics::from_nodes(&engine.nodes);
    metrics.verdict_counts = engine.metrics.verdict_counts;
    metrics.downlinks_scheduled = engine.metrics.downlinks_scheduled;
    metrics.downlinks_dropped = engine.metrics.downlinks_dropped;
    metrics.commands_applied = engine.metrics.commands_applied;
    Ok(RunOutput { metrics, trace: engine.trace, nodes: engine.nodes })
}

impl Engine<'_> {
    fn start(&mut self) -> Result<(), SimError> {
        let delta = self.scenario.deployment.traffic_delta;
        for i in 0..self.nodes.len() {
            let first = next_uplink_time(&mut self.nodes[i].rng, delta);
            self.schedule_uplink(i, first);
        }
        Ok(())
    }

    fn schedule_uplink(&mut self, node: usize, at: f64) {
        if at < self.scenario.deployment.duration_s {
            self.queue.push(at, EventKind::UplinkStart, node, None);
        }
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        let now = event.time;
        let i = event.node;
        if !matches!(event.kind, EventKind::UplinkStart | EventKind::UplinkEnd)
            && self.cycles[i].as_ref().map(|c| c.attempt) != event.attempt
        {
            // left over from a cycle that already finished
            if event.kind == EventKind::DownlinkStart {
                self.gateway.begin_downlink(now);
            }
            return Ok(());
        }
        match event.kind {
            EventKind::UplinkStart => {
                let id = self.next_attempt;
                self.next_attempt += 1;
                let attempt = begin_uplink(&mut self.nodes[i], now, id, &self.scenario.mac, &self.scenario.link)?;
                let end = attempt.end;
                self.gateway.on_transmission_start(attempt, now)?;
                self.live[i] = Some(id);
                let gap = next_uplink_time(&mut self.nodes[i].rng, self.scenario.deployment.traffic_delta);
                self.next_arrival[i] = now + gap;
                self.queue.push(end, EventKind::UplinkEnd, i, Some(id));
            }
            EventKind::UplinkEnd => self.uplink_end(i, event.attempt.expect("uplink end carries its attempt"), now)?,
            EventKind::DownlinkStart => {
                self.gateway.begin_downlink(now);
                let dsf = self.scenario.mac.sets.dsf(&self.nodes[i].params);
                let heard = downlink_reaches_node(&mut self.nodes[i], dsf, &self.scenario.mac, &self.scenario.link)?;
                let cycle = self.cycles[i].as_mut().expect("downlink without receive cycle");
                cycle.receiving = heard;
            }
            EventKind::DownlinkEnd => {
                let cycle = self.cycles[i].as_mut().expect("downlink without receive cycle");
                if cycle.receiving && !cycle.done {
                    let (window, _, _) = cycle.plan.expect("downlink end without plan");
                    let opened = match window {
                        ReceiveWindow::Rx1 => cycle.windows.rx1_open,
                        ReceiveWindow::Rx2 => cycle.windows.rx2_open,
                    };
                    cycle.done = true;
                    cycle.receiving = false;
                    let command = cycle.command;
                    let node = &mut self.nodes[i];
                    node.energy_joules += rx_energy_joules(self.scenario.mac.rx_power_mw, now - opened);
                    apply_downlink_command(node, command, true);
                    self.metrics.commands_applied += 1;
                    self.finish_cycle(i, now);
                }
            }
            EventKind::Rx1Open | EventKind::Rx2Open => {
                debug_assert!(self.cycles[i].is_some());
            }
            EventKind::Rx1Close | EventKind::Rx2Close => {
                let cycle = self.cycles[i].as_mut().expect("window close without receive cycle");
                if cycle.done || cycle.receiving {
                    return Ok(());
                }
                let length = cycle.windows.length;
                self.nodes[i].energy_joules += rx_energy_joules(self.scenario.mac.rx_power_mw, length);
                if event.kind == EventKind::Rx2Close {
                    self.cycles[i].as_mut().unwrap().done = true;
                    self.finish_cycle(i, now);
                }
            }
        }
        Ok(())
    }

    fn uplink_end(&mut self, i: usize, id: AttemptId, now: f64) -> Result<(), SimError> {
        debug_assert_eq!(self.live[i], Some(id));
        self.live[i] = None;
        let outcome = self.gateway.finalize_reception(id, now)?;
        self.metrics.verdict_counts[outcome.verdict.index()] += 1;
        let delivered = outcome.verdict == Verdict::Delivered;
        if delivered {
            self.nodes[i].n_succ += 1;
        }
        let command = self.controller.on_uplink_end(&UplinkContext { now, node: i, nodes: &self.nodes, outcome: &outcome });
        if let Some(trace) = self.trace.as_mut() {
            trace.push(outcome);
        }

        let windows = open_receive_windows(&self.nodes[i], now, &self.scenario.mac, &self.scenario.link);
        let mut cycle = RxCycle { attempt: id, windows, command, plan: None, receiving: false, done: false };
        if delivered {
            let dsf = self.scenario.mac.sets.dsf(&self.nodes[i].params);
            let request = DownlinkRequest {
                node: i,
                rx1_open: windows.rx1_open,
                rx2_open: windows.rx2_open,
                window_s: windows.length,
                airtime_s: self.scenario.link.time_on_air(dsf, self.scenario.mac.downlink_payload_bytes),
            };
            match self.gateway.schedule_downlink(&request) {
                DownlinkPlan::Scheduled { window, start, end } => {
                    self.metrics.downlinks_scheduled += 1;
                    cycle.plan = Some((window, start, end));
                    self.queue.push(start, EventKind::DownlinkStart, i, Some(id));
                    self.queue.push(end, EventKind::DownlinkEnd, i, Some(id));
                }
                DownlinkPlan::Dropped => self.metrics.downlinks_dropped += 1,
            }
        }
        self.cycles[i] = Some(cycle);
        self.queue.push(windows.rx1_open, EventKind::Rx1Open, i, Some(id));
        self.queue.push(windows.rx1_close(), EventKind::Rx1Close, i, Some(id));
        self.queue.push(windows.rx2_open, EventKind::Rx2Open, i, Some(id));
        self.queue.push(windows.rx2_close(), EventKind::Rx2Close, i, Some(id));
        Ok(())
    }

    fn finish_cycle(&mut self, i: usize, now: f64) {
        self.nodes[i].busy_until = now;
        let at = self.next_arrival[i].max(now);
        self.schedule_uplink(i, at);
    }
}

/// Drives a bare gateway through the event queue with scripted uplinks and
/// downlink transmissions `(start, end)`. Returns outcomes in attempt order.
pub fn replay_attempts(
    config: GatewayConfig,
    attempts: &[TransmissionAttempt],
    downlinks: &[(f64, f64)],
) -> Result<Vec<ReceptionOutcome>, SimError> {
    let mut gateway = Gateway::new(config);
    let mut queue = EventQueue::new();
    for &(start, end) in downlinks {
        let plan = gateway.schedule_downlink(&DownlinkRequest {
            node: usize::MAX,
            rx1_open: start,
            rx2_open: start,
            window_s: 0.0,
            airtime_s: end - start,
        });
        assert!(matches!(plan, DownlinkPlan::Scheduled { .. }), "scripted downlinks must not overlap");
        queue.push(start, EventKind::DownlinkStart, usize::MAX, None);
    }
    for a in attempts {
        queue.push(a.start, EventKind::UplinkStart, a.node, Some(a.id));
        queue.push(a.end, EventKind::UplinkEnd, a.node, Some(a.id));
    }
    let by_id: std::collections::HashMap<AttemptId, &TransmissionAttempt> = attempts.iter().map(|a| (a.id, a)).collect();
    let mut outcomes = Vec::with_capacity(attempts.len());
    while let Some(event) = queue.pop()? {
        match event.kind {
            EventKind::DownlinkStart => {
                gateway.begin_downlink(event.time);
            }
            EventKind::UplinkStart => {
                let a = by_id[&event.attempt.unwrap()];
                gateway.on_transmission_start(a.clone(), event.time)?;
            }
            EventKind::UplinkEnd => outcomes.push(gateway.finalize_reception(event.attempt.unwrap(), event.time)?),
            _ => unreachable!("replay only schedules uplinks and downlink starts"),
        }
    }
    let order: std::collections::HashMap<AttemptId, usize> = attempts.iter().enumerate().map(|(k, a)| (a.id, k)).collect();
    outcomes.sort_by_key(|o| order[&o.attempt_id]);
    Ok(outcomes)
}
