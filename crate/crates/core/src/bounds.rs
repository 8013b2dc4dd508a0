//! Secret-key capacity bounds for comparison with achieved rates.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finitestats::hbar;
use crate::model::{db_to_transmissivity, DetectorParams};

fn check_eta(eta: f64, what: &'static str) -> Result<()> {
    if eta == 1.0 {
        return Err(Error::DivergentCapacity(eta));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Domain {
            function: what,
            value: eta,
            domain: "[0, 1)",
        });
    }
    Ok(())
}

/// Repeaterless capacity `-log2(1 - eta)`.
pub fn skc0(eta: f64) -> Result<f64> {
    check_eta(eta, "skc0")?;
    Ok(-(-eta).ln_1p() / LN_2)
}

/// Single-repeater capacity, limited by the worse arm.
pub fn skc1(eta_a: f64, eta_b: f64) -> Result<f64> {
    check_eta(eta_a, "skc1")?;
    check_eta(eta_b, "skc1")?;
    skc0(eta_a.min(eta_b))
}

/// Repeaterless capacity with the detector efficiency folded into the channel.
pub fn relative_skc0(eta_channel: f64, efficiency: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(Error::Domain {
            function: "relative_skc0",
            value: efficiency,
            domain: "[0, 1]",
        });
    }
    check_eta(eta_channel, "relative_skc0")?;
    skc0(eta_channel * efficiency)
}

/// First-order thermal photon number `d_c / (1 - eta_total)` of the
/// equivalent thermal-loss channel.
pub fn thermal_mean_photon(dark_prob: f64, eta_total: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&dark_prob) {
        return Err(Error::Domain {
            function: "thermal_mean_photon",
            value: dark_prob,
            domain: "[0, 1)",
        });
    }
    check_eta(eta_total, "thermal_mean_photon")?;
    Ok(dark_prob / (1.0 - eta_total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyBound {
    pub value: f64,
    /// False when `n_bar >= eta / (1 - eta)`, where the formula bounds nothing.
    pub valid: bool,
}

/// Thermal-loss capacity upper bound `-log2[(1-eta) eta^n] - g(n)`.
pub fn noisy_skc0_ub(eta_total: f64, n_bar: f64) -> Result<NoisyBound> {
    check_eta(eta_total, "noisy_skc0_ub")?;
    if !(n_bar >= 0.0) || !n_bar.is_finite() {
        return Err(Error::Domain {
            function: "noisy_skc0_ub",
            value: n_bar,
            domain: "[0, inf)",
        });
    }
    let valid = n_bar < eta_total / (1.0 - eta_total);
    let thermal = if n_bar == 0.0 { 0.0 } else { -n_bar * eta_total.log2() };
    let value = skc0(eta_total)? + thermal - hbar(n_bar)?;
    Ok(NoisyBound {
        value: if value.is_finite() { value } else { 0.0 },
        valid,
    })
}

/// How the per-use dark probability is formed from the two detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DarkAggregation {
    #[default]
    PerDetector,
    BothDetectors,
}

impl DarkAggregation {
    pub fn dark_prob(self, det: &DetectorParams, clock_rate_hz: f64) -> f64 {
        let pd = det.dark_prob(clock_rate_hz);
        match self {
            DarkAggregation::PerDetector => pd,
            DarkAggregation::BothDetectors => 2.0 * pd,
        }
    }
}

/// All bounds for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub eta_a: f64,
    pub eta_b: f64,
    pub detector_efficiency: f64,
    pub dark_prob: f64,
    pub n_bar: f64,
    pub skc0: f64,
    pub skc0_relative: f64,
    /// Single-repeater capacity with the total loss split evenly.
    pub skc1_symmetric: f64,
    /// Single-repeater capacity for the arms as given.
    pub skc1_asymmetric: f64,
    /// Clamped at zero.
    pub noisy_skc0_ub: f64,
    pub noisy_valid: bool,
}

pub fn capacity_point(eta_a: f64, eta_b: f64, efficiency: f64, dark_prob: f64) -> Result<CapacityPoint> {
    let eta = eta_a * eta_b;
    let eta_total = eta * efficiency;
    let n_bar = thermal_mean_photon(dark_prob, eta_total)?;
    let ub = noisy_skc0_ub(eta_total, n_bar)?;
    let half = eta.sqrt();
    Ok(CapacityPoint {
        eta_a,
        eta_b,
        detector_efficiency: efficiency,
        dark_prob,
        n_bar,
        skc0: skc0(eta)?,
        skc0_relative: relative_skc0(eta, efficiency)?,
        skc1_symmetric: skc1(half, half)?,
        skc1_asymmetric: skc1(eta_a, eta_b)?,
        noisy_skc0_ub: ub.value.max(0.0),
        noisy_valid: ub.valid,
    })
}

/// One line of the bounds sweep file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub loss_db: f64,
    pub skc0: f64,
    pub skc0_relative: f64,
    pub skc1_sym: f64,
    pub skc1_asym: f64,
    pub noisy_ub: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsConfig {
    pub detector: DetectorParams,
    pub clock_rate_hz: f64,
    pub aggregation: DarkAggregation,
    /// Share of the total loss carried by Alice's arm in the asymmetric case.
    pub alice_fraction: f64,
}

impl BoundsConfig {
    pub fn new(detector: DetectorParams, clock_rate_hz: f64) -> Self {
        BoundsConfig {
            detector,
            clock_rate_hz,
            aggregation: DarkAggregation::PerDetector,
            alice_fraction: 156.7 / 253.9,
        }
    }
}

pub fn bounds_sweep(losses_db: &[f64], cfg: &BoundsConfig) -> Result<Vec<CapacityRow>> {
    if losses_db.is_empty() {
        return Err(Error::arg("sweep", "no loss values given"));
    }
    if !(0.0..=1.0).contains(&cfg.alice_fraction) {
        return Err(Error::arg("alice_fraction", format!("{} outside [0, 1]", cfg.alice_fraction)));
    }
    let pd = cfg.aggregation.dark_prob(&cfg.detector, cfg.clock_rate_hz);
    losses_db
        .iter()
        .map(|&db| {
            if !(db >= 0.0) {
                return Err(Error::arg("sweep", format!("loss {db} dB is negative")));
            }
            let eta_a = db_to_transmissivity(db * cfg.alice_fraction);
            let eta_b = db_to_transmissivity(db * (1.0 - cfg.alice_fraction));
            let p = capacity_point(eta_a, eta_b, cfg.detector.efficiency, pd)?;
            Ok(CapacityRow {
                loss_db: db,
                skc0: p.skc0,
                skc0_relative: p.skc0_relative,
                skc1_sym: p.skc1_symmetric,
                skc1_asym: p.skc1_asymmetric,
                noisy_ub: p.noisy_skc0_ub,
                valid: p.noisy_valid,
            })
        })
        .collect()
}
