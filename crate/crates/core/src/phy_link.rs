//! Radio link budget for the uplink and downlink paths.
//!
//! Powers are stored in dBm and summed in mW. Path loss and antenna gain are
//! linear factors. Randomness only enters through [`FadingDraw`] values that
//! the caller draws from its own seeded stream.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyError {
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("carrier frequency must be positive, got {0} Hz")]
    NonPositiveCarrier(f64),
    #[error("bandwidth must be positive, got {0} Hz")]
    NonPositiveBandwidth(f64),
    #[error("spreading factor {0} outside 7..=12")]
    SfOutOfRange(u8),
    #[error("coding rate denominator {0} outside 5..=8")]
    CodingRateOutOfRange(u8),
    #[error("fading draw must be positive and finite, got {0}")]
    InvalidFading(f64),
    #[error("path loss factor must be positive, got {0}")]
    NonPositiveLoss(f64),
}

/// LoRa spreading factor, always within 7..=12.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Sf(u8);

impl Sf {
    pub const MIN: u8 = 7;
    pub const MAX: u8 = 12;
    pub const ALL: [Sf; 6] = [Sf(7), Sf(8), Sf(9), Sf(10), Sf(11), Sf(12)];

    pub fn new(value: u8) -> Result<Self, PhyError> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(Sf(value))
        } else {
            Err(PhyError::SfOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Row/column index into the SF tables (SF7 → 0).
    pub fn index(self) -> usize {
        (self.0 - Self::MIN) as usize
    }

    pub fn profile(self) -> &'static SfProfile {
        &SF_PROFILES[self.index()]
    }
}

impl TryFrom<u8> for Sf {
    type Error = PhyError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Sf::new(value)
    }
}

impl From<Sf> for u8 {
    fn from(sf: Sf) -> u8 {
        sf.0
    }
}

impl fmt::Display for Sf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SF{}", self.0)
    }
}

/// Receiver figures for one spreading factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfProfile {
    pub sf: u8,
    pub sensitivity_dbm: f64,
    pub demod_threshold_db: f64,
    pub data_rate_bps: f64,
}

pub const SF_PROFILES: [SfProfile; 6] = [
    SfProfile { sf: 7, sensitivity_dbm: -127.0, demod_threshold_db: -7.5, data_rate_bps: 5469.0 },
    SfProfile { sf: 8, sensitivity_dbm: -129.0, demod_threshold_db: -10.0, data_rate_bps: 3125.0 },
    SfProfile { sf: 9, sensitivity_dbm: -132.5, demod_threshold_db: -12.5, data_rate_bps: 1758.0 },
    SfProfile { sf: 10, sensitivity_dbm: -135.5, demod_threshold_db: -15.0, data_rate_bps: 977.0 },
    SfProfile { sf: 11, sensitivity_dbm: -138.0, demod_threshold_db: -17.5, data_rate_bps: 537.0 },
    SfProfile { sf: 12, sensitivity_dbm: -141.0, demod_threshold_db: -20.0, data_rate_bps: 293.0 },
];

/// Inter-SF interference coefficients; rows are the target SF, columns the interferer SF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthogonalityMatrix {
    pub beta: [[f64; 6]; 6],
}

pub const ORTHOGONALITY: OrthogonalityMatrix = OrthogonalityMatrix {
    beta: [
        [1.0, 0.104, 0.062, 0.041, 0.029, 0.021],
        [0.104, 1.0, 0.073, 0.043, 0.029, 0.020],
        [0.062, 0.073, 1.0, 0.052, 0.030, 0.020],
        [0.041, 0.043, 0.052, 1.0, 0.037, 0.021],
        [0.029, 0.029, 0.030, 0.037, 1.0, 0.026],
        [0.021, 0.020, 0.020, 0.021, 0.026, 1.0],
    ],
};

impl OrthogonalityMatrix {
    pub fn coefficient(&self, target: Sf, interferer: Sf) -> f64 {
        self.beta[target.index()][interferer.index()]
    }
}

impl Default for OrthogonalityMatrix {
    fn default() -> Self {
        ORTHOGONALITY
    }
}

/// LoRa coding rate 4/denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodingRate(u8);

impl CodingRate {
    pub const CR_4_5: CodingRate = CodingRate(5);

    pub fn new(denominator: u8) -> Result<Self, PhyError> {
        if (5..=8).contains(&denominator) {
            Ok(CodingRate(denominator))
        } else {
            Err(PhyError::CodingRateOutOfRange(denominator))
        }
    }

    pub fn denominator(self) -> u8 {
        self.0
    }

    pub fn ratio(self) -> f64 {
        4.0 / self.0 as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkBudgetParams {
    pub carrier_hz: f64,
    /// Combined transmit/receive antenna gain, linear.
    pub antenna_gain: f64,
    pub bandwidth_hz: f64,
    pub coding_rate: CodingRate,
    pub noise_figure_db: f64,
    pub noise_density_dbm_hz: f64,
    pub capture_threshold_db: f64,
    /// Preamble symbols after which a demodulator is locked to a signal.
    pub lock_preambles: u32,
    pub preamble_symbols: u32,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        LinkBudgetParams {
            carrier_hz: 470.0e6,
            antenna_gain: 1.0,
            bandwidth_hz: 125_000.0,
            coding_rate: CodingRate::CR_4_5,
            noise_figure_db: 6.0,
            noise_density_dbm_hz: -174.0,
            capture_threshold_db: 6.0,
            lock_preambles: 4,
            preamble_symbols: 8,
        }
    }
}

impl LinkBudgetParams {
    pub fn noise_dbm(&self) -> f64 {
        noise_floor(self.bandwidth_hz, self.noise_figure_db, self.noise_density_dbm_hz)
    }

    pub fn symbol_period(&self, sf: Sf) -> f64 {
        symbol_period(sf, self.bandwidth_hz)
    }

    pub fn time_on_air(&self, sf: Sf, payload_bytes: usize) -> f64 {
        time_on_air(sf, payload_bytes, self.preamble_symbols, self.bandwidth_hz, self.coding_rate)
    }

    pub fn lock_duration(&self, sf: Sf) -> f64 {
        preamble_lock_duration(sf, self.lock_preambles, self.bandwidth_hz)
    }
}

/// Small-scale Rayleigh fading power factor, unit-mean exponential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadingDraw {
    zeta: f64,
}

impl FadingDraw {
    pub const NONE: FadingDraw = FadingDraw { zeta: 1.0 };

    pub fn new(zeta: f64) -> Result<Self, PhyError> {
        if zeta > 0.0 && zeta.is_finite() {
            Ok(FadingDraw { zeta })
        } else {
            Err(PhyError::InvalidFading(zeta))
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let zeta: f64 = Exp1.sample(rng);
            if zeta > 0.0 {
                return FadingDraw { zeta };
            }
        }
    }

    pub fn zeta(self) -> f64 {
        self.zeta
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Free-space (Friis) power gain `(c / 4πfd)²`.
pub fn path_loss(carrier_hz: f64, distance_m: f64) -> Result<f64, PhyError> {
    if !(carrier_hz > 0.0) {
        return Err(PhyError::NonPositiveCarrier(carrier_hz));
    }
    if !(distance_m > 0.0) {
        return Err(PhyError::NonPositiveDistance(distance_m));
    }
    let ratio = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * carrier_hz * distance_m);
    Ok(ratio * ratio)
}

pub fn compute_rssi(ptx_dbm: f64, gain: f64, loss: f64, fading: FadingDraw) -> Result<f64, PhyError> {
    if !(loss > 0.0) {
        return Err(PhyError::NonPositiveLoss(loss));
    }
    Ok(ptx_dbm + linear_to_db(gain * loss * fading.zeta()))
}

pub fn noise_floor(bandwidth_hz: f64, noise_figure_db: f64, noise_density_dbm_hz: f64) -> f64 {
    noise_density_dbm_hz + noise_figure_db + 10.0 * bandwidth_hz.log10()
}

/// One packet in the air, as heard at the gateway.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionAttempt {
    pub id: u64,
    pub node: usize,
    pub channel: u8,
    pub sf: Sf,
    pub ptx_dbm: f64,
    pub rssi_dbm: f64,
    pub start: f64,
    pub end: f64,
}

impl TransmissionAttempt {
    pub fn overlaps(&self, other: &TransmissionAttempt) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Interference power in mW seen by `target` from attempts the caller already
/// knows overlap it in time. Other-channel attempts contribute nothing.
pub fn interference_sum<'a, I>(target: &TransmissionAttempt, concurrent: I, beta: &OrthogonalityMatrix) -> f64
where
    I: IntoIterator<Item = &'a TransmissionAttempt>,
{
    concurrent
        .into_iter()
        .filter(|other| other.id != target.id && other.channel == target.channel)
        .map(|other| dbm_to_mw(other.rssi_dbm) * beta.coefficient(target.sf, other.sf))
        .sum()
}

pub fn compute_sinr(rssi_dbm: f64, interference_mw: f64, noise_dbm: f64) -> f64 {
    debug_assert!(interference_mw >= 0.0);
    if interference_mw == 0.0 {
        // keeps SINR == SNR bit-exact in the interference-free case
        return rssi_dbm - noise_dbm;
    }
    mw_to_dbm(dbm_to_mw(rssi_dbm) / (dbm_to_mw(noise_dbm) + interference_mw))
}

pub fn symbol_period(sf: Sf, bandwidth_hz: f64) -> f64 {
    (1u32 << sf.value()) as f64 / bandwidth_hz
}

pub fn payload_symbols(sf: Sf, payload_bytes: usize, coding_rate: CodingRate) -> u64 {
    let sf = sf.value() as i64;
    let numerator = 8 * payload_bytes as i64 - 4 * sf + 28 + 16;
    let denominator = 4 * sf;
    let blocks = if numerator > 0 { (numerator + denominator - 1) / denominator } else { 0 };
    8 + (blocks * coding_rate.denominator() as i64).max(0) as u64
}

/// Semtech airtime with explicit header, CRC on and low-data-rate optimisation off.
pub fn time_on_air(
    sf: Sf,
    payload_bytes: usize,
    preamble_symbols: u32,
    bandwidth_hz: f64,
    coding_rate: CodingRate,
) -> f64 {
    let t_sym = symbol_period(sf, bandwidth_hz);
    let preamble = (preamble_symbols as f64 + 4.25) * t_sym;
    preamble + payload_symbols(sf, payload_bytes, coding_rate) as f64 * t_sym
}

pub fn preamble_lock_duration(sf: Sf, lock_preambles: u32, bandwidth_hz: f64) -> f64 {
    lock_preambles as f64 * symbol_period(sf, bandwidth_hz)
}

/// Nominal bit rate `sf · BW · CR / 2^sf`.
pub fn nominal_bit_rate(sf: Sf, bandwidth_hz: f64, coding_rate: CodingRate) -> f64 {
    sf.value() as f64 * bandwidth_hz * coding_rate.ratio() / (1u32 << sf.value()) as f64
}

pub fn sf_table_csv() -> String {
    let mut out = String::from("sf,sensitivity_dbm,demod_threshold_db,data_rate_bps\n");
    for p in SF_PROFILES.iter() {
        out.push_str(&format!("{},{},{},{}\n", p.sf, p.sensitivity_dbm, p.demod_threshold_db, p.data_rate_bps));
    }
    out
}

pub fn orthogonality_csv() -> String {
    let mut out = String::from("target_sf");
    for sf in Sf::ALL {
        out.push_str(&format!(",sf{}", sf.value()));
    }
    out.push('\n');
    for (i, row) in ORTHOGONALITY.beta.iter().enumerate() {
        out.push_str(&format!("{}", Sf::ALL[i].value()));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
