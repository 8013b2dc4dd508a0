//! Single-photon interference at Charlie's 50/50 beam splitter.

use crate::model::{DetectorParams, Transmissivities};

/// Gated detector as seen by one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDetector {
    pub efficiency: f64,
    pub dark_prob: f64,
}

impl GateDetector {
    pub fn new(det: &DetectorParams, clock_rate_hz: f64) -> Self {
        GateDetector {
            efficiency: det.efficiency,
            dark_prob: det.dark_prob(clock_rate_hz),
        }
    }
}

/// Mean detected photon numbers at the two output ports.
///
/// Port 1 is the constructive port when the total phase difference is zero.
#[allow(clippy::too_many_arguments)]
pub fn port_means(
    mu_a: f64,
    mu_b: f64,
    theta_a: f64,
    theta_b: f64,
    delta_phi: f64,
    etas: &Transmissivities,
    efficiency: f64,
    visibility: f64,
) -> (f64, f64) {
    let la = efficiency * etas.eta_a * mu_a;
    let lb = efficiency * etas.eta_b * mu_b;
    let cross = visibility * (la * lb).sqrt() * (theta_a - theta_b + delta_phi).cos();
    let half = (la + lb) / 2.0;
    ((half + cross).max(0.0), (half - cross).max(0.0))
}

/// Click probabilities `(p1, p2)` of the two threshold detectors.
#[allow(clippy::too_many_arguments)]
pub fn interfere(
    mu_a: f64,
    mu_b: f64,
    theta_a: f64,
    theta_b: f64,
    delta_phi: f64,
    etas: &Transmissivities,
    det: &GateDetector,
    visibility: f64,
) -> (f64, f64) {
    let (m1, m2) = port_means(mu_a, mu_b, theta_a, theta_b, delta_phi, etas, det.efficiency, visibility);
    let q = 1.0 - det.dark_prob;
    (1.0 - q * (-m1).exp(), 1.0 - q * (-m2).exp())
}
