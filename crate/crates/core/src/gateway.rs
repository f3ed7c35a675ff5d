//! Single-gateway receiver: demodulator pool with preamble lock, capture
//! arbitration between same channel/SF signals, end-of-packet SINR check and
//! a half-duplex downlink transmitter.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::phy_link::{
    compute_sinr, interference_sum, LinkBudgetParams, OrthogonalityMatrix, Sf, TransmissionAttempt, ORTHOGONALITY,
};

pub type AttemptId = u64;

pub const SX1301_DEMODULATORS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("attempt {0} already registered with the gateway")]
    DuplicateAttempt(AttemptId),
    #[error("attempt {0} is not known to the gateway")]
    UnknownAttempt(AttemptId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Verdict {
    Delivered,
    FailSensitivity,
    FailSinr,
    FailCapture,
    FailLocked,
    FailNoDemodulator,
    FailGatewayTransmitting,
}

impl Verdict {
    pub const ALL: [Verdict; 7] = [
        Verdict::Delivered,
        Verdict::FailSensitivity,
        Verdict::FailSinr,
        Verdict::FailCapture,
        Verdict::FailLocked,
        Verdict::FailNoDemodulator,
        Verdict::FailGatewayTransmitting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Delivered => "delivered",
            Verdict::FailSensitivity => "fail_sensitivity",
            Verdict::FailSinr => "fail_sinr",
            Verdict::FailCapture => "fail_capture",
            Verdict::FailLocked => "fail_locked",
            Verdict::FailNoDemodulator => "fail_no_demodulator",
            Verdict::FailGatewayTransmitting => "fail_gateway_transmitting",
        }
    }

    pub fn index(self) -> usize {
        Verdict::ALL.iter().position(|v| *v == self).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemodulatorSlot {
    pub attempt_id: AttemptId,
    pub locked_at: f64,
    pub channel: u8,
    pub sf: Sf,
    pub rssi_dbm: f64,
}

impl DemodulatorSlot {
    pub fn is_locked(&self, now: f64) -> bool {
        now >= self.locked_at
    }
}

/// Demodulators in use. A slot is reserved from preamble detection onwards;
/// it counts towards the locked total once its lock time has passed.
#[derive(Clone, Debug)]
pub struct DemodulatorPool {
    slots: Vec<DemodulatorSlot>,
    capacity: usize,
}

impl DemodulatorPool {
    pub fn new(capacity: usize) -> Self {
        DemodulatorPool { slots: Vec::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupied(&self) -> usize {
        self.slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    /// Number of demodulators locked onto a signal at `now`.
    pub fn locked_count(&self, now: f64) -> usize {
        self.slots.iter().filter(|s| s.is_locked(now)).count()
    }

    pub fn slots(&self) -> &[DemodulatorSlot] {
        &self.slots
    }

    fn find(&self, channel: u8, sf: Sf) -> Option<usize> {
        self.slots.iter().position(|s| s.channel == channel && s.sf == sf)
    }

    fn holder(&self, id: AttemptId) -> Option<usize> {
        self.slots.iter().position(|s| s.attempt_id == id)
    }

    fn insert(&mut self, slot: DemodulatorSlot) {
        self.slots.push(slot);
        assert!(self.slots.len() <= self.capacity, "demodulator pool over capacity");
    }

    fn remove(&mut self, index: usize) -> DemodulatorSlot {
        self.slots.swap_remove(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReceptionOutcome {
    pub attempt_id: AttemptId,
    pub node: usize,
    pub channel: u8,
    pub sf: u8,
    pub time: f64,
    pub verdict: Verdict,
    /// Only measured for attempts that held a demodulator to the end.
    pub measured_sinr_db: Option<f64>,
    pub measured_rssi_dbm: f64,
}

/// Status of an attempt right after its preamble reached the gateway.
#[derive(Clone, Debug, PartialEq)]
pub enum StartStatus {
    Pending { locks_at: f64 },
    /// The new signal took over the slot of a weaker, still unlocked one.
    Captured { locks_at: f64, displaced: AttemptId },
    Rejected(Verdict),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arbitration {
    IncomingWins,
    /// Existing signal already locked the demodulator.
    ExistingLocked,
    /// Existing unlocked signal dominates by the capture threshold.
    ExistingDominates,
    MutualLoss,
}

/// Decides who keeps a demodulator when two signals share channel and SF.
pub fn arbitrate_capture(existing: &DemodulatorSlot, incoming_rssi_dbm: f64, now: f64, capture_threshold_db: f64) -> Arbitration {
    if existing.is_locked(now) {
        Arbitration::ExistingLocked
    } else if incoming_rssi_dbm >= existing.rssi_dbm + capture_threshold_db {
        Arbitration::IncomingWins
    } else if existing.rssi_dbm >= incoming_rssi_dbm + capture_threshold_db {
        Arbitration::ExistingDominates
    } else {
        Arbitration::MutualLoss
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatewayConfig {
    pub link: LinkBudgetParams,
    pub demodulators: usize,
    pub half_duplex: bool,
    pub beta: OrthogonalityMatrix,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            link: LinkBudgetParams::default(),
            demodulators: SX1301_DEMODULATORS,
            half_duplex: true,
            beta: ORTHOGONALITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReceiveWindow {
    Rx1,
    Rx2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DownlinkPlan {
    Scheduled { window: ReceiveWindow, start: f64, end: f64 },
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownlinkRequest {
    pub node: usize,
    pub rx1_open: f64,
    pub rx2_open: f64,
    /// How long each window stays open waiting for a preamble.
    pub window_s: f64,
    pub airtime_s: f64,
}

#[derive(Clone, Debug)]
struct Tracked {
    attempt: TransmissionAttempt,
    ended: bool,
}

#[derive(Clone, Debug)]
pub struct Gateway {
    config: GatewayConfig,
    noise_dbm: f64,
    pool: DemodulatorPool,
    attempts: BTreeMap<AttemptId, Tracked>,
    provisional: HashMap<AttemptId, Verdict>,
    downlinks: Vec<(f64, f64)>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        let noise_dbm = config.link.noise_dbm();
        let pool = DemodulatorPool::new(config.demodulators);
        Gateway { config, noise_dbm, pool, attempts: BTreeMap::new(), provisional: HashMap::new(), downlinks: Vec::new() }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn pool(&self) -> &DemodulatorPool {
        &self.pool
    }

    pub fn noise_dbm(&self) -> f64 {
        self.noise_dbm
    }

    pub fn is_transmitting(&self, now: f64) -> bool {
        self.downlinks.iter().any(|&(s, e)| s <= now && now < e)
    }

    pub fn scheduled_downlinks(&self) -> &[(f64, f64)] {
        &self.downlinks
    }

    pub fn on_transmission_start(&mut self, attempt: TransmissionAttempt, now: f64) -> Result<StartStatus, GatewayError> {
        if self.attempts.contains_key(&attempt.id) {
            return Err(GatewayError::DuplicateAttempt(attempt.id));
        }
        let id = attempt.id;
        let (channel, sf, rssi) = (attempt.channel, attempt.sf, attempt.rssi_dbm);
        self.attempts.insert(id, Tracked { attempt, ended: false });

        if self.config.half_duplex && self.is_transmitting(now) {
            return Ok(self.reject(id, Verdict::FailGatewayTransmitting));
        }
        if rssi < sf.profile().sensitivity_dbm {
            return Ok(self.reject(id, Verdict::FailSensitivity));
        }
        let locks_at = now + self.config.link.lock_duration(sf);
        let new_slot = DemodulatorSlot { attempt_id: id, locked_at: locks_at, channel, sf, rssi_dbm: rssi };
        if let Some(index) = self.pool.find(channel, sf) {
            let existing = &self.pool.slots()[index];
            let existing_id = existing.attempt_id;
            return Ok(match arbitrate_capture(existing, rssi, now, self.config.link.capture_threshold_db) {
                Arbitration::ExistingLocked => self.reject(id, Verdict::FailLocked),
                Arbitration::ExistingDominates => self.reject(id, Verdict::FailCapture),
                Arbitration::IncomingWins => {
                    self.pool.slots[index] = new_slot;
                    self.provisional.insert(existing_id, Verdict::FailCapture);
                    StartStatus::Captured { locks_at, displaced: existing_id }
                }
                Arbitration::MutualLoss => {
                    self.pool.remove(index);
                    self.provisional.insert(existing_id, Verdict::FailCapture);
                    self.reject(id, Verdict::FailCapture)
                }
            });
        }
        if self.pool.is_full() {
            return Ok(self.reject(id, Verdict::FailNoDemodulator));
        }
        self.pool.insert(new_slot);
        Ok(StartStatus::Pending { locks_at })
    }

    fn reject(&mut self, id: AttemptId, verdict: Verdict) -> StartStatus {
        self.provisional.insert(id, verdict);
        StartStatus::Rejected(verdict)
    }

    /// Ends the attempt and issues its single outcome.
    pub fn finalize_reception(&mut self, id: AttemptId, now: f64) -> Result<ReceptionOutcome, GatewayError> {
        let tracked = self.attempts.get(&id).ok_or(GatewayError::UnknownAttempt(id))?;
        if tracked.ended {
            return Err(GatewayError::UnknownAttempt(id));
        }
        let target = tracked.attempt.clone();
        let mut outcome = ReceptionOutcome {
            attempt_id: id,
            node: target.node,
            channel: target.channel,
            sf: target.sf.value(),
            time: now,
            verdict: Verdict::FailSinr,
            measured_sinr_db: None,
            measured_rssi_dbm: target.rssi_dbm,
        };
        if let Some(verdict) = self.provisional.remove(&id) {
            debug_assert!(self.pool.holder(id).is_none());
            outcome.verdict = verdict;
        } else {
            let index = self.pool.holder(id).expect("live attempt without verdict must hold a demodulator");
            self.pool.remove(index);
            let concurrent = self
                .attempts
                .values()
                .filter(|t| t.attempt.id != id && t.attempt.overlaps(&target))
                .map(|t| &t.attempt);
            let interference = interference_sum(&target, concurrent, &self.config.beta);
            let sinr = compute_sinr(target.rssi_dbm, interference, self.noise_dbm);
            let profile = target.sf.profile();
            outcome.measured_sinr_db = Some(sinr);
            outcome.verdict = if target.rssi_dbm < profile.sensitivity_dbm {
                Verdict::FailSensitivity
            } else if sinr < profile.demod_threshold_db {
                Verdict::FailSinr
            } else {
                Verdict::Delivered
            };
        }
        self.attempts.get_mut(&id).unwrap().ended = true;
        self.prune();
        Ok(outcome)
    }

    fn prune(&mut self) {
        let earliest_live = self.attempts.values().filter(|t| !t.ended).map(|t| t.attempt.start).fold(f64::INFINITY, f64::min);
        self.attempts.retain(|_, t| !t.ended || t.attempt.end > earliest_live);
    }

    /// Aborts every reception in progress when the transmitter keys up.
    pub fn begin_downlink(&mut self, now: f64) -> Vec<AttemptId> {
        if !self.config.half_duplex {
            return Vec::new();
        }
        let aborted: Vec<AttemptId> = self.pool.slots.drain(..).map(|s| s.attempt_id).collect();
        for id in &aborted {
            self.provisional.insert(*id, Verdict::FailGatewayTransmitting);
        }
        self.downlinks.retain(|&(_, e)| e > now);
        aborted
    }

    /// Places a downlink in RX1, else RX2, so that its preamble starts while
    /// the node's window is open and the transmitter is otherwise idle.
    pub fn schedule_downlink(&mut self, request: &DownlinkRequest) -> DownlinkPlan {
        for (window, open) in [(ReceiveWindow::Rx1, request.rx1_open), (ReceiveWindow::Rx2, request.rx2_open)] {
            if let Some(start) = self.earliest_free(open, open + request.window_s, request.airtime_s) {
                let end = start + request.airtime_s;
                let at = self.downlinks.partition_point(|&(s, _)| s < start);
                self.downlinks.insert(at, (start, end));
                return DownlinkPlan::Scheduled { window, start, end };
            }
        }
        DownlinkPlan::Dropped
    }

    fn earliest_free(&self, open: f64, close: f64, airtime: f64) -> Option<f64> {
        let fits = |t: f64| self.downlinks.iter().all(|&(s, e)| t + airtime <= s || e <= t);
        std::iter::once(open)
            .chain(self.downlinks.iter().map(|&(_, e)| e).filter(|e| *e > open && *e < close))
            .find(|&t| fits(t))
    }

    pub fn live_attempts(&self) -> usize {
        self.attempts.values().filter(|t| !t.ended).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(v: u8) -> Sf {
        Sf::new(v).unwrap()
    }

    fn attempt(id: u64, channel: u8, sf_value: u8, rssi: f64, start: f64, end: f64) -> TransmissionAttempt {
        TransmissionAttempt { id, node: id as usize, channel, sf: sf(sf_value), ptx_dbm: 14.0, rssi_dbm: rssi, start, end }
    }

    fn gateway() -> Gateway {
        Gateway::new(GatewayConfig::default())
    }

    #[test]
    fn lone_packet_delivered_or_below_sensitivity() {
        let mut gw = gateway();
        gw.on_transmission_start(attempt(1, 0, 7, -120.0, 0.0, 0.05), 0.0).unwrap();
        assert_eq!(gw.finalize_reception(1, 0.05).unwrap().verdict, Verdict::Delivered);
        gw.on_transmission_start(attempt(2, 0, 7, -130.0, 1.0, 1.05), 1.0).unwrap();
        assert_eq!(gw.finalize_reception(2, 1.05).unwrap().verdict, Verdict::FailSensitivity);
    }

    #[test]
    fn pending_slot_locks_after_four_symbols() {
        let mut gw = gateway();
        let status = gw.on_transmission_start(attempt(1, 0, 7, -100.0, 0.0, 0.06), 0.0).unwrap();
        assert_eq!(status, StartStatus::Pending { locks_at: 4.0 * 1.024e-3 });
        assert_eq!(gw.pool().locked_count(0.001), 0);
        assert_eq!(gw.pool().locked_count(0.005), 1);
        assert_eq!(gw.pool().occupied(), 1);
    }

    #[test]
    fn ninth_signal_finds_no_demodulator() {
        let mut gw = gateway();
        for i in 0..8u64 {
            let s = gw.on_transmission_start(attempt(i, i as u8, 7, -100.0, 0.0, 1.0), 0.0).unwrap();
            assert!(matches!(s, StartStatus::Pending { .. }));
        }
        let s = gw.on_transmission_start(attempt(8, 0, 8, -100.0, 0.0, 1.0), 0.0).unwrap();
        assert_eq!(s, StartStatus::Rejected(Verdict::FailNoDemodulator));
        assert_eq!(gw.pool().occupied(), 8);
    }

    #[test]
    fn capture_rules() {
        let t_sym = 1.024e-3;
        let existing = DemodulatorSlot { attempt_id: 1, locked_at: 4.0 * t_sym, channel: 0, sf: sf(7), rssi_dbm: -100.0 };
        assert_eq!(arbitrate_capture(&existing, -93.0, 2.0 * t_sym, 6.0), Arbitration::IncomingWins);
        assert_eq!(arbitrate_capture(&existing, -94.0, 2.0 * t_sym, 6.0), Arbitration::IncomingWins);
        assert_eq!(arbitrate_capture(&existing, -94.1, 2.0 * t_sym, 6.0), Arbitration::MutualLoss);
        assert_eq!(arbitrate_capture(&existing, -90.0, 4.0 * t_sym, 6.0), Arbitration::ExistingLocked);
        assert_eq!(arbitrate_capture(&existing, -107.0, 1.0 * t_sym, 6.0), Arbitration::ExistingDominates);
    }

    #[test]
    fn locked_signal_keeps_demodulator_but_suffers_interference() {
        let mut gw = gateway();
        gw.on_transmission_start(attempt(1, 0, 7, -100.0, 0.0, 0.06), 0.0).unwrap();
        let late = 5.0 * 1.024e-3;
        let s = gw.on_transmission_start(attempt(2, 0, 7, -90.0, late, late + 0.06), late).unwrap();
        assert_eq!(s, StartStatus::Rejected(Verdict::FailLocked));
        let first = gw.finalize_reception(1, 0.06).unwrap();
        // the stronger late arrival still interferes: SINR ≈ −10 dB < −7.5 dB
        assert_eq!(first.verdict, Verdict::FailSinr);
        assert_eq!(gw.finalize_reception(2, late + 0.06).unwrap().verdict, Verdict::FailLocked);
    }

    #[test]
    fn sinr_with_equal_power_interferers() {
        for (count, expected) in [(1usize, Verdict::Delivered), (3, Verdict::Delivered), (8, Verdict::FailSinr)] {
            let mut gw = gateway();
            gw.on_transmission_start(attempt(100, 0, 7, -100.0, 0.0, 1.0), 0.0).unwrap();
            // late arrivals lose to the lock but still count as interference
            for k in 0..count as u64 {
                let t = 0.01 + k as f64 * 1e-4;
                gw.on_transmission_start(attempt(k, 0, 7, -100.0, t, 1.0 + t), t).unwrap();
            }
            let outcome = gw.finalize_reception(100, 1.0).unwrap();
            assert_eq!(outcome.verdict, expected, "{count} interferers, sinr {:?}", outcome.measured_sinr_db);
        }
    }

    #[test]
    fn downlink_blocks_uplink() {
        let mut gw = gateway();
        let req = DownlinkRequest { node: 0, rx1_open: 1.0, rx2_open: 2.0, window_s: 0.1, airtime_s: 0.3 };
        assert_eq!(gw.schedule_downlink(&req), DownlinkPlan::Scheduled { window: ReceiveWindow::Rx1, start: 1.0, end: 1.3 });
        gw.begin_downlink(1.0);
        let s = gw.on_transmission_start(attempt(5, 0, 7, -100.0, 1.1, 1.2), 1.1).unwrap();
        assert_eq!(s, StartStatus::Rejected(Verdict::FailGatewayTransmitting));
    }

    #[test]
    fn downlink_start_aborts_reception_in_progress() {
        let mut gw = gateway();
        gw.on_transmission_start(attempt(1, 0, 7, -100.0, 0.9, 1.2), 0.9).unwrap();
        let req = DownlinkRequest { node: 3, rx1_open: 1.0, rx2_open: 2.0, window_s: 0.1, airtime_s: 0.3 };
        gw.schedule_downlink(&req);
        assert_eq!(gw.begin_downlink(1.0), vec![1]);
        assert_eq!(gw.finalize_reception(1, 1.2).unwrap().verdict, Verdict::FailGatewayTransmitting);
        assert_eq!(gw.pool().occupied(), 0);
    }

    #[test]
    fn downlink_falls_back_to_rx2_then_drops() {
        let mut gw = gateway();
        let window = 8.0 * 32.768e-3;
        let busy = DownlinkRequest { node: 0, rx1_open: 0.9, rx2_open: 1.9, window_s: 0.05, airtime_s: 1.0 + window - 0.9 + 0.01 };
        assert!(matches!(gw.schedule_downlink(&busy), DownlinkPlan::Scheduled { window: ReceiveWindow::Rx1, .. }));
        let req = DownlinkRequest { node: 1, rx1_open: 1.0, rx2_open: 2.0, window_s: window, airtime_s: 0.2 };
        assert_eq!(
            gw.schedule_downlink(&req),
            DownlinkPlan::Scheduled { window: ReceiveWindow::Rx2, start: 2.0, end: 2.2 }
        );
        let mut gw = gateway();
        gw.schedule_downlink(&DownlinkRequest { node: 0, rx1_open: 0.5, rx2_open: 9.0, window_s: 0.0, airtime_s: 3.0 });
        assert_eq!(gw.schedule_downlink(&req), DownlinkPlan::Dropped);
    }

    #[test]
    fn downlink_waits_for_transmitter_within_window() {
        let mut gw = gateway();
        gw.schedule_downlink(&DownlinkRequest { node: 0, rx1_open: 0.9, rx2_open: 1.9, window_s: 0.0, airtime_s: 0.15 });
        let req = DownlinkRequest { node: 1, rx1_open: 1.0, rx2_open: 2.0, window_s: 0.1, airtime_s: 0.2 };
        assert_eq!(
            gw.schedule_downlink(&req),
            DownlinkPlan::Scheduled { window: ReceiveWindow::Rx1, start: 1.05, end: 1.25 }
        );
    }

    #[test]
    fn duplicate_and_unknown_attempts_are_errors() {
        let mut gw = gateway();
        gw.on_transmission_start(attempt(1, 0, 7, -100.0, 0.0, 0.1), 0.0).unwrap();
        assert_eq!(
            gw.on_transmission_start(attempt(1, 0, 7, -100.0, 0.0, 0.1), 0.0),
            Err(GatewayError::DuplicateAttempt(1))
        );
        assert_eq!(gw.finalize_reception(9, 0.1), Err(GatewayError::UnknownAttempt(9)));
        gw.finalize_reception(1, 0.1).unwrap();
        assert_eq!(gw.finalize_reception(1, 0.1), Err(GatewayError::UnknownAttempt(1)));
    }

    #[test]
    fn ended_attempts_are_pruned() {
        let mut gw = gateway();
        for i in 0..50u64 {
            let t = i as f64;
            gw.on_transmission_start(attempt(i, 0, 7, -100.0, t, t + 0.1), t).unwrap();
            gw.finalize_reception(i, t + 0.1).unwrap();
        }
        assert_eq!(gw.attempts.len(), 0);
    }
}
