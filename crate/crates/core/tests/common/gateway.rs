//! Brute-force reference receiver and scripted gateway scenarios.

use heatlab_core::gateway::{GatewayConfig, Verdict};
use heatlab_core::phy_link::{Sf, TransmissionAttempt};
use heatlab_core::sim_engine::replay_attempts;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Verdicts from the event-driven gateway replay, in attempt order.
pub fn engine(attempts: &[TransmissionAttempt], downlinks: &[(f64, f64)], demodulators: usize) -> Vec<Verdict> {
    let config = GatewayConfig { demodulators, ..GatewayConfig::default() };
    replay_attempts(config, attempts, downlinks).unwrap().into_iter().map(|o| o.verdict).collect()
}

pub const SENSITIVITY: [f64; 6] = [-127.0, -129.0, -132.5, -135.5, -138.0, -141.0];
pub const THRESHOLD: [f64; 6] = [-7.5, -10.0, -12.5, -15.0, -17.5, -20.0];
pub const BETA: [[f64; 6]; 6] = [
    [1.0, 0.104, 0.062, 0.041, 0.029, 0.021],
    [0.104, 1.0, 0.073, 0.043, 0.029, 0.020],
    [0.062, 0.073, 1.0, 0.052, 0.030, 0.020],
    [0.041, 0.043, 0.052, 1.0, 0.037, 0.021],
    [0.029, 0.029, 0.030, 0.037, 1.0, 0.026],
    [0.021, 0.020, 0.020, 0.021, 0.026, 1.0],
];

pub fn noise_mw() -> f64 {
    10f64.powf((-174.0 + 10.0 * 125_000f64.log10() + 6.0) / 10.0)
}

/// Four preamble symbols at 125 kHz.
pub fn lock_time(sf: u8) -> f64 {
    4.0 * 2f64.powi(sf as i32) / 125_000.0
}

pub fn attempt(id: u64, channel: u8, sf: u8, rssi_dbm: f64, start: f64, end: f64) -> TransmissionAttempt {
    TransmissionAttempt { id, node: id as usize, channel, sf: Sf::new(sf).unwrap(), ptx_dbm: 14.0, rssi_dbm, start, end }
}

fn k(a: &TransmissionAttempt) -> usize {
    a.sf.value() as usize - 7
}

/// Verdict per attempt, checking the receive constraints in order: transmitter
/// busy, sensitivity, same channel and SF arbitration, free demodulator,
/// abort by a later downlink, then the end-of-packet SINR.
pub fn oracle(attempts: &[TransmissionAttempt], downlinks: &[(f64, f64)], demodulators: usize) -> Vec<Verdict> {
    let n = attempts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| attempts[a].start.total_cmp(&attempts[b].start));
    let mut verdict: Vec<Option<Verdict>> = vec![None; n];
    let mut holding = vec![false; n];
    // Time at which a holder lost its demodulator to a newcomer.
    let mut displaced_at = vec![f64::INFINITY; n];
    let aborted_by = |y: &TransmissionAttempt, t: f64| downlinks.iter().any(|&(d, _)| y.start < d && d <= t && d < y.end);

    for &x in &order {
        let a = &attempts[x];
        let t = a.start;
        if downlinks.iter().any(|&(s, e)| s <= t && t < e) {
            verdict[x] = Some(Verdict::FailGatewayTransmitting);
            continue;
        }
        if a.rssi_dbm < SENSITIVITY[k(a)] {
            verdict[x] = Some(Verdict::FailSensitivity);
            continue;
        }
        let holders: Vec<usize> = (0..n)
            .filter(|&y| holding[y] && attempts[y].end > t && displaced_at[y] > t && !aborted_by(&attempts[y], t))
            .collect();
        if let Some(&h) = holders.iter().find(|&&y| attempts[y].channel == a.channel && attempts[y].sf == a.sf) {
            let b = &attempts[h];
            if t >= b.start + lock_time(b.sf.value()) {
                verdict[x] = Some(Verdict::FailLocked);
            } else if a.rssi_dbm >= b.rssi_dbm + 6.0 {
                displaced_at[h] = t;
                verdict[h] = Some(Verdict::FailCapture);
                holding[x] = true;
            } else if b.rssi_dbm >= a.rssi_dbm + 6.0 {
                verdict[x] = Some(Verdict::FailCapture);
            } else {
                displaced_at[h] = t;
                verdict[h] = Some(Verdict::FailCapture);
                verdict[x] = Some(Verdict::FailCapture);
            }
            continue;
        }
        if holders.len() >= demodulators {
            verdict[x] = Some(Verdict::FailNoDemodulator);
            continue;
        }
        holding[x] = true;
    }

    for x in 0..n {
        if verdict[x].is_some() {
            continue;
        }
        let a = &attempts[x];
        if aborted_by(a, a.end) {
            verdict[x] = Some(Verdict::FailGatewayTransmitting);
            continue;
        }
        let interference: f64 = attempts
            .iter()
            .filter(|o| o.id != a.id && o.channel == a.channel && o.start < a.end && a.start < o.end)
            .map(|o| 10f64.powf(o.rssi_dbm / 10.0) * BETA[k(a)][k(o)])
            .sum();
        let sinr = a.rssi_dbm - 10.0 * (interference + noise_mw()).log10();
        verdict[x] = Some(if sinr < THRESHOLD[k(a)] { Verdict::FailSinr } else { Verdict::Delivered });
    }
    verdict.into_iter().map(|v| v.unwrap()).collect()
}

pub struct Case {
    pub name: String,
    pub attempts: Vec<TransmissionAttempt>,
    pub downlinks: Vec<(f64, f64)>,
    /// Hand-labelled verdicts, in attempt order.
    pub expected: Vec<Verdict>,
}

/// Interferer power that puts `target` exactly at `sinr_db` when it is the
/// only other signal on the channel.
fn interferer_for(target_rssi: f64, target_sf: u8, interferer_sf: u8, sinr_db: f64) -> f64 {
    let total = 10f64.powf((target_rssi - sinr_db) / 10.0);
    let coeff = BETA[target_sf as usize - 7][interferer_sf as usize - 7];
    10.0 * ((total - noise_mw()) / coeff).log10()
}

pub fn constraint_suite() -> Vec<Case> {
    use Verdict::*;
    let mut cases = Vec::new();
    for sf in 7..=12u8 {
        let s = SENSITIVITY[sf as usize - 7];
        cases.push(Case {
            name: format!("sensitivity SF{sf}"),
            attempts: vec![attempt(1, 0, sf, s - 0.01, 0.0, 0.5), attempt(2, 1, sf, s + 0.01, 1.0, 1.5)],
            downlinks: vec![],
            expected: vec![FailSensitivity, FailSinr],
        });
    }
    for (offset, want) in [(-0.1, FailSinr), (0.1, Delivered)] {
        let target = THRESHOLD[0] + offset;
        let i_rssi = interferer_for(-100.0, 7, 9, target);
        cases.push(Case {
            name: format!("sinr {:+.1} dB around threshold", offset),
            attempts: vec![attempt(1, 0, 7, -100.0, 0.0, 0.1), attempt(2, 0, 9, i_rssi, 0.01, 0.3)],
            downlinks: vec![],
            expected: vec![want, Delivered],
        });
    }
    cases.push(Case {
        name: "capture at +6.0 dB".into(),
        attempts: vec![attempt(1, 0, 7, -100.0, 0.0, 0.1), attempt(2, 0, 7, -94.0, 0.001, 0.101)],
        downlinks: vec![],
        expected: vec![FailCapture, Delivered],
    });
    cases.push(Case {
        name: "mutual loss at +5.9 dB".into(),
        attempts: vec![attempt(1, 0, 7, -100.0, 0.0, 0.1), attempt(2, 0, 7, -94.1, 0.001, 0.101)],
        downlinks: vec![],
        expected: vec![FailCapture, FailCapture],
    });
    let lock = lock_time(12);
    cases.push(Case {
        name: "lock holds against +10 dB".into(),
        attempts: vec![attempt(1, 0, 12, -110.0, 0.0, 1.5), attempt(2, 0, 12, -100.0, lock + 0.001, 1.6)],
        downlinks: vec![],
        expected: vec![Delivered, FailLocked],
    });
    let mut nine: Vec<TransmissionAttempt> =
        (0..9u8).map(|c| attempt(c as u64 + 1, c, 7 + c % 6, -90.0, 0.01 * c as f64, 1.0)).collect();
    nine.push(attempt(10, 0, 8, -90.0, 1.1, 1.5));
    let mut expected = vec![Delivered; 8];
    expected.extend([FailNoDemodulator, Delivered]);
    cases.push(Case { name: "ninth signal finds no demodulator".into(), attempts: nine, downlinks: vec![], expected });
    cases.push(Case {
        name: "downlink blocks uplink".into(),
        attempts: vec![
            attempt(1, 0, 7, -90.0, 0.9, 1.05),
            attempt(2, 1, 7, -90.0, 1.2, 1.3),
            attempt(3, 2, 7, -90.0, 1.5, 1.6),
        ],
        downlinks: vec![(1.0, 1.5)],
        expected: vec![FailGatewayTransmitting, FailGatewayTransmitting, Delivered],
    });
    cases
}

/// Up to `max_nodes` nodes with up to `max_packets` back-to-back packets
/// each, crowded into two channels and a short horizon.
pub fn random_scenario(rng: &mut ChaCha8Rng, max_nodes: usize, max_packets: usize) -> (Vec<TransmissionAttempt>, Vec<(f64, f64)>, usize) {
    let mut attempts = Vec::new();
    for node in 0..rng.random_range(1..=max_nodes) {
        let mut t = rng.random_range(0.0..0.5);
        for _ in 0..rng.random_range(1..=max_packets) {
            let sf = rng.random_range(7..=12u8);
            let airtime = rng.random_range(0.02..0.6);
            let rssi = SENSITIVITY[sf as usize - 7] + rng.random_range(-3.0..25.0);
            let mut a = attempt(attempts.len() as u64, rng.random_range(0..2), sf, rssi, t, t + airtime);
            a.node = node;
            attempts.push(a);
            t += airtime + rng.random_range(0.0..0.3);
        }
    }
    let mut downlinks = Vec::new();
    if rng.random_bool(0.5) {
        let s = rng.random_range(0.0..1.5);
        downlinks.push((s, s + rng.random_range(0.05..0.4)));
    }
    let demodulators = rng.random_range(1..=8);
    (attempts, downlinks, demodulators)
}
