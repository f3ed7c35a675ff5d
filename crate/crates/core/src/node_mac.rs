//! End-node MAC: Poisson traffic, ALOHA with uniform channel hopping,
//! class-A receive windows, command adoption and energy bookkeeping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::mdp_env::Action4;
use crate::phy_link::{compute_rssi, path_loss, FadingDraw, LinkBudgetParams, PhyError, Sf, TransmissionAttempt};

pub const RX1_DELAY_S: f64 = 1.0;
pub const RX2_DELAY_S: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("node {0} is busy and cannot start an uplink")]
    Busy(usize),
    #[error("{field} set must be non-empty and strictly ascending")]
    BadSet { field: &'static str },
    #[error("action index {index} out of range for {field} (size {size})")]
    OutOfSet { field: &'static str, index: usize, size: usize },
    #[error(transparent)]
    Phy(#[from] PhyError),
}

/// Allowed values of each controllable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSets {
    pub usf: Vec<Sf>,
    pub power_dbm: Vec<f64>,
    pub dsf: Vec<Sf>,
    pub window_symbols: Vec<u32>,
}

impl Default for ParameterSets {
    fn default() -> Self {
        ParameterSets {
            usf: Sf::ALL.to_vec(),
            power_dbm: vec![2.0, 5.0, 8.0, 11.0, 14.0, 17.0],
            dsf: Sf::ALL.to_vec(),
            window_symbols: vec![8, 16, 32, 64],
        }
    }
}

fn strictly_ascending<T: PartialOrd>(values: &[T]) -> bool {
    !values.is_empty() && values.windows(2).all(|w| w[0] < w[1])
}

impl ParameterSets {
    pub fn validate(&self) -> Result<(), NodeError> {
        if !strictly_ascending(&self.usf) {
            return Err(NodeError::BadSet { field: "usf" });
        }
        if !strictly_ascending(&self.power_dbm) {
            return Err(NodeError::BadSet { field: "power" });
        }
        if !strictly_ascending(&self.dsf) {
            return Err(NodeError::BadSet { field: "dsf" });
        }
        if !strictly_ascending(&self.window_symbols) {
            return Err(NodeError::BadSet { field: "window" });
        }
        Ok(())
    }

    /// Sizes of the four action branches.
    pub fn branch_sizes(&self) -> [usize; 4] {
        [self.usf.len(), self.power_dbm.len(), self.dsf.len(), self.window_symbols.len()]
    }

    pub fn joint_size(&self) -> usize {
        self.branch_sizes().iter().product()
    }

    pub fn check(&self, action: &Action4) -> Result<(), NodeError> {
        let names = ["usf", "power", "dsf", "window"];
        for ((index, size), field) in action.indices().into_iter().zip(self.branch_sizes()).zip(names) {
            if index >= size {
                return Err(NodeError::OutOfSet { field, index, size });
            }
        }
        Ok(())
    }

    pub fn usf(&self, a: &Action4) -> Sf {
        self.usf[a.usf]
    }

    pub fn power(&self, a: &Action4) -> f64 {
        self.power_dbm[a.ptx]
    }

    pub fn dsf(&self, a: &Action4) -> Sf {
        self.dsf[a.dsf]
    }

    pub fn window(&self, a: &Action4) -> u32 {
        self.window_symbols[a.w]
    }

    /// Decodes a joint index in `0..joint_size()` (window varies fastest).
    pub fn action_from_joint(&self, mut joint: usize) -> Action4 {
        let [_, np, nd, nw] = self.branch_sizes();
        let w = joint % nw;
        joint /= nw;
        let dsf = joint % nd;
        joint /= nd;
        let ptx = joint % np;
        joint /= np;
        Action4 { usf: joint, ptx, dsf, w }
    }

    pub fn joint_index(&self, a: &Action4) -> usize {
        let [_, np, nd, nw] = self.branch_sizes();
        ((a.usf * np + a.ptx) * nd + a.dsf) * nw + a.w
    }

    /// Distance-banded starting point: the radius is split in six rings
    /// mapped to SF7..SF12, power 14 dBm, DSF equal to USF and a 16-symbol window.
    pub fn initial_params(&self, distance_m: f64, radius_m: f64) -> Action4 {
        let band = ((6.0 * distance_m / radius_m).floor() as i64).clamp(0, 5) as u8;
        let target_sf = Sf::ALL[band as usize];
        let usf = nearest_by(&self.usf, |sf| (sf.value() as f64 - target_sf.value() as f64).abs());
        let dsf = nearest_by(&self.dsf, |sf| (sf.value() as f64 - target_sf.value() as f64).abs());
        let ptx = nearest_by(&self.power_dbm, |p| (p - 14.0).abs());
        let w = nearest_by(&self.window_symbols, |w| (*w as f64 - 16.0).abs());
        Action4 { usf, ptx, dsf, w }
    }
}

fn nearest_by<T>(values: &[T], distance: impl Fn(&T) -> f64) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if distance(v) < distance(&values[best]) {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeMacConfig {
    pub sets: ParameterSets,
    pub channels: u8,
    pub payload_bytes: usize,
    pub downlink_payload_bytes: usize,
    pub pa_efficiency: f64,
    pub rx_power_mw: f64,
    pub gateway_tx_dbm: f64,
}

impl Default for NodeMacConfig {
    fn default() -> Self {
        NodeMacConfig {
            sets: ParameterSets::default(),
            channels: 8,
            payload_bytes: 20,
            downlink_payload_bytes: 12,
            pa_efficiency: 0.25,
            rx_power_mw: 36.3,
            gateway_tx_dbm: 17.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EndNode {
    pub id: usize,
    pub distance_m: f64,
    pub params: Action4,
    pub energy_joules: f64,
    pub n_sent: u64,
    pub n_succ: u64,
    /// The node may not start an uplink before this time.
    pub busy_until: f64,
    pub rng: ChaCha8Rng,
}

impl EndNode {
    pub fn new(id: usize, distance_m: f64, params: Action4, rng: ChaCha8Rng) -> Self {
        EndNode { id, distance_m, params, energy_joules: 0.0, n_sent: 0, n_succ: 0, busy_until: 0.0, rng }
    }

    pub fn is_idle(&self, now: f64) -> bool {
        now >= self.busy_until
    }
}

/// Exponential inter-arrival gap in seconds for `delta_per_min` packets per minute.
pub fn next_uplink_time<R: Rng + ?Sized>(rng: &mut R, delta_per_min: f64) -> f64 {
    assert!(delta_per_min > 0.0, "traffic intensity must be positive");
    Exp::new(delta_per_min / 60.0).expect("positive rate").sample(rng)
}

/// Starts an ALOHA uplink on a uniformly drawn channel with the node's
/// current USF and power. Debits the transmit energy.
pub fn begin_uplink(
    node: &mut EndNode,
    now: f64,
    attempt_id: u64,
    config: &NodeMacConfig,
    link: &LinkBudgetParams,
) -> Result<TransmissionAttempt, NodeError> {
    if !node.is_idle(now) {
        return Err(NodeError::Busy(node.id));
    }
    let sf = config.sets.usf(&node.params);
    let ptx_dbm = config.sets.power(&node.params);
    let channel = node.rng.random_range(0..config.channels);
    let fading = FadingDraw::sample(&mut node.rng);
    let loss = path_loss(link.carrier_hz, node.distance_m)?;
    let rssi_dbm = compute_rssi(ptx_dbm, link.antenna_gain, loss, fading)?;
    let airtime = link.time_on_air(sf, config.payload_bytes);
    node.n_sent += 1;
    node.energy_joules += tx_energy_joules(ptx_dbm, airtime, config.pa_efficiency);
    node.busy_until = f64::INFINITY;
    Ok(TransmissionAttempt { id: attempt_id, node: node.id, channel, sf, ptx_dbm, rssi_dbm, start: now, end: now + airtime })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSchedule {
    pub rx1_open: f64,
    pub rx2_open: f64,
    /// Open duration of each window while waiting for a preamble.
    pub length: f64,
}

impl WindowSchedule {
    pub fn rx1_close(&self) -> f64 {
        self.rx1_open + self.length
    }

    pub fn rx2_close(&self) -> f64 {
        self.rx2_open + self.length
    }
}

pub fn open_receive_windows(node: &EndNode, uplink_end: f64, config: &NodeMacConfig, link: &LinkBudgetParams) -> WindowSchedule {
    let dsf = config.sets.dsf(&node.params);
    let length = config.sets.window(&node.params) as f64 * link.symbol_period(dsf);
    WindowSchedule { rx1_open: uplink_end + RX1_DELAY_S, rx2_open: uplink_end + RX2_DELAY_S, length }
}

/// Adopts the commanded parameters only when the downlink carrying them arrived.
pub fn apply_downlink_command(node: &mut EndNode, action: Action4, delivered: bool) {
    if delivered {
        node.params = action;
    }
}

/// Whether a downlink sent at `gateway_tx_dbm` on `dsf` clears the node's sensitivity.
pub fn downlink_reaches_node(
    node: &mut EndNode,
    dsf: Sf,
    config: &NodeMacConfig,
    link: &LinkBudgetParams,
) -> Result<bool, NodeError> {
    let fading = FadingDraw::sample(&mut node.rng);
    let loss = path_loss(link.carrier_hz, node.distance_m)?;
    let rssi = compute_rssi(config.gateway_tx_dbm, link.antenna_gain, loss, fading)?;
    Ok(rssi >= dsf.profile().sensitivity_dbm)
}

/// Transmit energy in joules: radiated power over PA efficiency times airtime.
pub fn tx_energy_joules(ptx_dbm: f64, airtime_s: f64, pa_efficiency: f64) -> f64 {
    10f64.powf(ptx_dbm / 10.0) / pa_efficiency * airtime_s * 1e-3
}

pub fn rx_energy_joules(rx_power_mw: f64, open_s: f64) -> f64 {
    rx_power_mw * open_s.max(0.0) * 1e-3
}
