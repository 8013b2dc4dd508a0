//! Off-band phase stabilisation: a free random walk of the channel phase,
//! a fast coarse loop locking the support wavelength, and a slow fine loop
//! locking the quantum wavelength from reference-pulse counts.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TraceRow;

/// Wraps an angle into (-pi, pi].
pub fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    /// Channel phase, wrapped into (-pi, pi].
    pub delta_phi: f64,
    /// Random-walk strength in rad / sqrt(s).
    pub sigma_drift: f64,
    pub coarse_gain: f64,
    pub fine_gain: f64,
    /// Standard deviation of the locked residual, once measured.
    pub residual_sigma: f64,
}

pub fn phase_drift_step<R: Rng + ?Sized>(state: &PhaseState, dt: f64, rng: &mut R) -> PhaseState {
    assert!(dt > 0.0, "time step must be positive");
    if state.sigma_drift == 0.0 {
        return *state;
    }
    let step = Normal::new(0.0, state.sigma_drift * dt.sqrt()).expect("finite positive sigma");
    PhaseState {
        delta_phi: wrap(state.delta_phi + step.sample(rng)),
        ..*state
    }
}

/// Proportional correction from one sample of the support-wavelength phase error.
pub fn coarse_feedback(state: &PhaseState, interference_sample: f64) -> f64 {
    -state.coarse_gain * wrap(interference_sample)
}

/// Reference-pulse detections over one fine window, with the modulator at
/// 0 (in phase) and at pi/2 (quadrature).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCounts {
    pub in_phase: (f64, f64),
    pub quadrature: (f64, f64),
}

impl ReferenceCounts {
    /// Phase estimate from the two normalised count imbalances.
    pub fn phase_estimate(&self) -> Option<f64> {
        let imb = |(a, b): (f64, f64)| if a + b > 0.0 { Some((a - b) / (a + b)) } else { None };
        let c = imb(self.in_phase)?;
        let s = -imb(self.quadrature)?;
        Some(s.atan2(c))
    }
}

/// Correction toward `setpoint` from the window-integrated reference counts.
pub fn fine_feedback(state: &PhaseState, counts: &ReferenceCounts, setpoint: f64) -> f64 {
    counts
        .phase_estimate()
        .map_or(0.0, |est| -state.fine_gain * wrap(est - setpoint))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Free,
    Coarse,
    CoarseFine,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "free" => Ok(Stage::Free),
            "coarse" => Ok(Stage::Coarse),
            "fine" | "coarse_fine" | "coarse+fine" => Ok(Stage::CoarseFine),
            _ => Err(format!("unknown stage `{s}` (free, coarse, fine)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizerConfig {
    /// Common channel drift, rad / sqrt(s).
    pub sigma_drift: f64,
    /// Drift of the quantum wavelength relative to the support one, rad / sqrt(s).
    pub differential_sigma: f64,
    /// Static phase offset between the two wavelengths, rad.
    pub static_offset: f64,
    /// Coarse loop period, s.
    pub coarse_dt: f64,
    pub coarse_gain: f64,
    /// Measurement noise on each support-wavelength error sample, rad.
    pub coarse_noise: f64,
    /// Coarse steps per fine update.
    pub fine_every: usize,
    pub fine_gain: f64,
    /// Mean reference detections per modulator setting per fine window.
    pub reference_counts: f64,
    pub reference_visibility: f64,
    /// Draw Poisson reference counts (otherwise use their expectations).
    pub shot_noise: bool,
    pub setpoint: f64,
    pub lock_tolerance: f64,
    /// Initial period excluded from the trace statistics, s.
    pub settle_s: f64,
    /// Keep every n-th coarse step in the recorded trace.
    pub record_every: usize,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            sigma_drift: 1.0,
            differential_sigma: 0.02,
            static_offset: 0.6,
            coarse_dt: 1e-5,
            coarse_gain: 0.5,
            coarse_noise: 0.01,
            fine_every: 1000,
            fine_gain: 0.5,
            reference_counts: 2000.0,
            reference_visibility: 0.97,
            shot_noise: true,
            setpoint: 0.0,
            lock_tolerance: 0.05,
            settle_s: 0.05,
            record_every: 10,
        }
    }
}

impl StabilizerConfig {
    fn check(&self, stage: Stage) -> Result<()> {
        let gain_ok = |g: f64| g > 0.0 && g < 2.0;
        if stage != Stage::Free && !gain_ok(self.coarse_gain) {
            return Err(Error::UnstableGain {
                stage: "coarse",
                gain: self.coarse_gain,
            });
        }
        if stage == Stage::CoarseFine && !gain_ok(self.fine_gain) {
            return Err(Error::UnstableGain {
                stage: "fine",
                gain: self.fine_gain,
            });
        }
        if !(self.coarse_dt > 0.0) || self.fine_every == 0 || self.record_every == 0 {
            return Err(Error::arg("stabilizer", "time steps and decimation must be positive"));
        }
        if !(self.sigma_drift >= 0.0) || !(self.differential_sigma >= 0.0) || !(self.coarse_noise >= 0.0) {
            return Err(Error::arg("stabilizer", "noise strengths must be non-negative"));
        }
        if !(self.reference_counts > 0.0) || !(0.0..=1.0).contains(&self.reference_visibility) {
            return Err(Error::arg("stabilizer", "reference counts must be positive and visibility in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    /// Standard deviation of `delta_phi - setpoint` after settling.
    pub residual_std: f64,
    /// Mean of `delta_phi - setpoint` after settling.
    pub mean_offset: f64,
    pub locked: bool,
    pub final_coarse_correction: f64,
    pub final_fine_correction: f64,
}

/// Quantum-wavelength phase at Charlie over time.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub stage: Stage,
    pub seed: u64,
    pub sample_dt: f64,
    pub samples: Vec<f64>,
    pub stats: TraceStats,
}

impl PhaseTrace {
    /// Phase at time `t`, holding the last sample.
    pub fn at(&self, t: f64) -> f64 {
        let i = (t / self.sample_dt) as usize;
        self.samples[i.min(self.samples.len() - 1)]
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &d)| TraceRow {
                t_s: i as f64 * self.sample_dt,
                delta_phi_rad: d,
            })
            .collect()
    }
}

const GUARD_WINDOW: usize = 1000;
const GUARD_RMS: f64 = 1.0;

/// Runs the stabiliser for `duration_s`.
pub fn simulate_stabilization(cfg: &StabilizerConfig, stage: Stage, duration_s: f64, seed: u64) -> Result<PhaseTrace> {
    cfg.check(stage)?;
    if !(duration_s > 0.0) {
        return Err(Error::arg("duration", format!("{duration_s} s is not positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (duration_s / cfg.coarse_dt).ceil() as usize;
    let mut chan = PhaseState {
        delta_phi: 0.0,
        sigma_drift: cfg.sigma_drift,
        coarse_gain: cfg.coarse_gain,
        fine_gain: cfg.fine_gain,
        residual_sigma: f64::NAN,
    };
    let diff_step = Normal::new(0.0, cfg.differential_sigma * cfg.coarse_dt.sqrt()).expect("finite sigma");
    let meas = Normal::new(0.0, cfg.coarse_noise).expect("finite sigma");
    let (mut diff, mut coarse_act, mut fine_act) = (0.0f64, 0.0f64, 0.0f64);
    let (mut last_coarse, mut last_fine) = (0.0, 0.0);
    let (mut win_cos, mut win_sin) = (0.0, 0.0);
    let mut guard = std::collections::VecDeque::with_capacity(GUARD_WINDOW + 1);
    let mut guard_sq = 0.0;
    let mut samples = Vec::with_capacity(steps / cfg.record_every + 1);

    for k in 0..steps {
        chan = phase_drift_step(&chan, cfg.coarse_dt, &mut rng);
        if cfg.differential_sigma > 0.0 {
            diff += diff_step.sample(&mut rng);
        }
        if stage != Stage::Free {
            let noise = if cfg.coarse_noise > 0.0 { meas.sample(&mut rng) } else { 0.0 };
            let sample = wrap(chan.delta_phi + coarse_act + noise);
            last_coarse = coarse_feedback(&chan, sample);
            coarse_act = wrap(coarse_act + last_coarse);
            guard_sq += sample * sample;
            guard.push_back(sample * sample);
            if guard.len() > GUARD_WINDOW {
                guard_sq -= guard.pop_front().unwrap_or(0.0);
                let rms = (guard_sq / GUARD_WINDOW as f64).max(0.0).sqrt();
                if rms > GUARD_RMS {
                    return Err(Error::LostLock {
                        time_s: k as f64 * cfg.coarse_dt,
                        rms,
                    });
                }
            }
        }
        let dq = wrap(chan.delta_phi + diff + cfg.static_offset + coarse_act + fine_act);
        if stage == Stage::CoarseFine {
            win_cos += dq.cos();
            win_sin += dq.sin();
            if (k + 1) % cfg.fine_every == 0 {
                let n = cfg.fine_every as f64;
                let (c, s) = (win_cos / n, win_sin / n);
                let half = cfg.reference_counts / 2.0;
                let v = cfg.reference_visibility;
                let mut draw = |mean: f64| -> f64 {
                    if cfg.shot_noise && mean > 0.0 {
                        Poisson::new(mean).expect("positive mean").sample(&mut rng)
                    } else {
                        mean
                    }
                };
                let counts = ReferenceCounts {
                    in_phase: (draw(half * (1.0 + v * c)), draw(half * (1.0 - v * c))),
                    quadrature: (draw(half * (1.0 - v * s)), draw(half * (1.0 + v * s))),
                };
                last_fine = fine_feedback(&chan, &counts, cfg.setpoint);
                fine_act = wrap(fine_act + last_fine);
                win_cos = 0.0;
                win_sin = 0.0;
            }
        }
        if k % cfg.record_every == 0 {
            samples.push(dq);
        }
    }

    let sample_dt = cfg.coarse_dt * cfg.record_every as f64;
    let skip = ((cfg.settle_s / sample_dt) as usize).min(samples.len().saturating_sub(1));
    let err: Vec<f64> = samples[skip..].iter().map(|d| wrap(d - cfg.setpoint)).collect();
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / err.len() as f64;
    Ok(PhaseTrace {
        stage,
        seed,
        sample_dt,
        samples,
        stats: TraceStats {
            residual_std: var.sqrt(),
            mean_offset: mean,
            locked: mean.abs() < cfg.lock_tolerance,
            final_coarse_correction: last_coarse,
            final_fine_correction: last_fine,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_range() {
        for x in [-10.0, -PI, -1.0, 0.0, 1.0, PI, 3.5, 100.0] {
            let w = wrap(x);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((x - w) / TAU - ((x - w) / TAU).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn no_drift_no_motion() {
        let s = PhaseState {
            delta_phi: 0.3,
            sigma_drift: 0.0,
            coarse_gain: 0.5,
            fine_gain: 0.5,
            residual_sigma: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(phase_drift_step(&s, 1e-3, &mut rng).delta_phi, 0.3);
    }

    #[test]
    fn increment_statistics() {
        let s = PhaseState {
            delta_phi: 0.0,
            sigma_drift: 2.0,
            coarse_gain: 0.5,
            fine_gain: 0.5,
            residual_sigma: 0.0,
        };
        let dt = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let mut cur = s;
        let (mut m1, mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let next = phase_drift_step(&cur, dt, &mut rng);
            let d = wrap(next.delta_phi - cur.delta_phi);
            m1 += d;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
            cur = next;
        }
        let nf = n as f64;
        let (mean, var) = (m1 / nf, m2 / nf - (m1 / nf).powi(2));
        let sd = var.sqrt();
        let want = 2.0 * dt.sqrt();
        assert!((sd - want).abs() / want < 0.01, "{sd} vs {want}");
        let skew = (m3 / nf - 3.0 * mean * var - mean.powi(3)) / sd.powi(3);
        let kurt = (m4 / nf) / var.powi(2);
        assert!(skew.abs() < 0.02, "skew {skew}");
        assert!((kurt - 3.0).abs() < 0.05, "kurtosis {kurt}");
    }

    #[test]
    fn reference_estimate_inverts_fringe() {
        for d in [-2.5, -0.4, 0.0, 0.9, 3.0] {
            let v = 0.9;
            let c = ReferenceCounts {
                in_phase: (1.0 + v * f64::cos(d), 1.0 - v * f64::cos(d)),
                quadrature: (1.0 - v * f64::sin(d), 1.0 + v * f64::sin(d)),
            };
            assert!((c.phase_estimate().unwrap() - d).abs() < 1e-12);
        }
        let empty = ReferenceCounts {
            in_phase: (0.0, 0.0),
            quadrature: (1.0, 1.0),
        };
        assert_eq!(empty.phase_estimate(), None);
    }

    #[test]
    fn quiet_channel_corrections_vanish() {
        let cfg = StabilizerConfig {
            sigma_drift: 0.0,
            differential_sigma: 0.0,
            coarse_noise: 0.0,
            shot_noise: false,
            ..Default::default()
        };
        let t = simulate_stabilization(&cfg, Stage::CoarseFine, 0.5, 3).unwrap();
        assert!(t.stats.final_coarse_correction.abs() < 1e-12);
        assert!(t.stats.final_fine_correction.abs() < 1e-9);
        assert!(t.samples.last().unwrap().abs() < 1e-9);
        assert!(t.stats.locked);
    }

    #[test]
    fn bad_gains_rejected() {
        let cfg = StabilizerConfig {
            coarse_gain: 2.5,
            ..Default::default()
        };
        assert!(matches!(
            simulate_stabilization(&cfg, Stage::Coarse, 0.1, 1),
            Err(Error::UnstableGain { stage: "coarse", .. })
        ));
        assert!(simulate_stabilization(&cfg, Stage::Free, 0.1, 1).is_ok());
        let cfg = StabilizerConfig {
            fine_gain: 0.0,
            ..Default::default()
        };
        assert!(simulate_stabilization(&cfg, Stage::CoarseFine, 0.1, 1).is_err());
    }

    #[test]
    fn overwhelmed_loop_reports_lost_lock() {
        let cfg = StabilizerConfig {
            sigma_drift: 2000.0,
            coarse_gain: 0.01,
            ..Default::default()
        };
        assert!(matches!(
            simulate_stabilization(&cfg, Stage::Coarse, 0.2, 1),
            Err(Error::LostLock { .. })
        ));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = StabilizerConfig::default();
        let a = simulate_stabilization(&cfg, Stage::CoarseFine, 0.1, 5).unwrap();
        let b = simulate_stabilization(&cfg, Stage::CoarseFine, 0.1, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn each_stage_improves_the_lock() {
        let cfg = StabilizerConfig::default();
        let run = |stage| simulate_stabilization(&cfg, stage, 2.0, 17).unwrap().stats;
        let (free, coarse, fine) = (run(Stage::Free), run(Stage::Coarse), run(Stage::CoarseFine));
        assert!(coarse.residual_std * 10.0 <= free.residual_std);
        assert!(!coarse.locked, "static offset survives the coarse loop");
        assert!(fine.locked);
        assert!(fine.residual_std < 0.1);
    }
}
