//! Secret key rate assembly, the end-to-end count pipeline, and the analytic
//! forward model behind simulated rate-versus-distance curves.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aopp::{aopp_estimate, AoppOutput, ZTally};
use crate::decoy::{self, matched_fraction, DecoyCounts, DecoyEstimates, MatchedTally, UntaggedCounts};
use crate::error::{Error, Result};
use crate::finitestats::{binary_entropy, Chernoff};
use crate::model::{
    transmissivities, ArmSplit, Category, DetectorParams, LinkBudget, ProtocolParams, PulseClass,
    SecurityParams,
};

/// `log2(2/eps_cor) + 2 log2(1/(sqrt(2) eps_pa eps_hat))`.
pub fn finite_size_correction(sec: &SecurityParams) -> f64 {
    (2.0 / sec.eps_cor).log2() + 2.0 * (1.0 / (2f64.sqrt() * sec.eps_pa * sec.eps_hat)).log2()
}

pub const CONVENTION_NOTE: &str = "r_per_signal = secure_bits / n_tot; \
r_formula = 2 * secure_bits / n_tot is the same key counted per pulse of one transmitter pair half";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    /// Secure bits per sent pulse pair.
    pub r_per_signal: f64,
    /// `(2 / n_tot) * secure_bits`, the normalisation written in the rate formula.
    pub r_formula: f64,
    pub bits_per_second: f64,
    pub secure_bits: f64,
    /// The bracketed key length before clamping at zero.
    pub key_length_raw: f64,
    pub delta_fs: f64,
    pub privacy_term: f64,
    pub leak_ec: f64,
    pub n1_prime: f64,
    pub e1ph_prime: f64,
    pub n_t_prime: f64,
    pub e_z_prime: f64,
    pub n_tot: f64,
    pub convention_note: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl KeyRateReport {
    fn zero(n_tot: f64, delta_fs: f64, reason: String) -> Self {
        KeyRateReport {
            r_per_signal: 0.0,
            r_formula: 0.0,
            bits_per_second: 0.0,
            secure_bits: 0.0,
            key_length_raw: -delta_fs,
            delta_fs,
            privacy_term: 0.0,
            leak_ec: 0.0,
            n1_prime: 0.0,
            e1ph_prime: 0.5,
            n_t_prime: 0.0,
            e_z_prime: 0.0,
            n_tot,
            convention_note: CONVENTION_NOTE.into(),
            diagnostics: vec![reason],
        }
    }
}

/// `n1' [1 - h(e1ph')] - f_ec n_t' h(E_Z') - delta_fs`, clamped at zero.
pub fn secret_key_rate(
    aopp: &AoppOutput,
    sec: &SecurityParams,
    n_tot: f64,
    clock_rate_hz: f64,
    duty_cycle: f64,
) -> Result<KeyRateReport> {
    if !(n_tot > 0.0) || !n_tot.is_finite() {
        return Err(Error::arg("n_tot", format!("{n_tot} is not a positive count")));
    }
    let delta_fs = finite_size_correction(sec);
    let privacy_term = aopp.n1_prime * (1.0 - binary_entropy(aopp.e1ph_prime)?);
    let leak_ec = sec.f_ec * aopp.n_t_prime * binary_entropy(aopp.e_z_prime)?;
    let raw = privacy_term - leak_ec - delta_fs;
    let mut diagnostics = Vec::new();
    if !(raw > 0.0) {
        diagnostics.push(format!(
            "key length {raw:.4e} is not positive (privacy {privacy_term:.4e}, leak {leak_ec:.4e}, finite-size {delta_fs:.2}); rate set to 0"
        ));
    }
    let secure_bits = raw.max(0.0);
    let r = secure_bits / n_tot;
    Ok(KeyRateReport {
        r_per_signal: r,
        r_formula: 2.0 * r,
        bits_per_second: r * (clock_rate_hz * duty_cycle),
        secure_bits,
        key_length_raw: raw,
        delta_fs,
        privacy_term,
        leak_ec,
        n1_prime: aopp.n1_prime,
        e1ph_prime: aopp.e1ph_prime,
        n_t_prime: aopp.n_t_prime,
        e_z_prime: aopp.e_z_prime,
        n_tot,
        convention_note: CONVENTION_NOTE.into(),
        diagnostics,
    })
}

/// Every stage of the analysis of one count set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_tot: f64,
    pub n_t: f64,
    pub e_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qber_xvv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qber_xuu: Option<f64>,
    pub decoy: Option<DecoyEstimates>,
    pub aopp: Option<AoppOutput>,
    pub key_rate: KeyRateReport,
}

fn is_estimation_gap(e: &Error) -> bool {
    matches!(e, Error::EstimationFailure(_) | Error::EmptyCategory(_))
}

/// counting rates -> decoy bounds -> pairing estimate -> key rate.
///
/// A decoy analysis that cannot produce a positive untagged yield is not an
/// error: the report carries a zero rate and the reason.
pub fn analyze(counts: &DecoyCounts, params: &ProtocolParams, sec: &SecurityParams) -> Result<PipelineReport> {
    params.ensure_valid()?;
    sec.validate()?;
    counts.validate()?;
    let tally = ZTally::from_counts(counts);
    let mut report = PipelineReport {
        n_tot: counts.n_tot,
        n_t: tally.n_t(),
        e_z: tally.e_z(),
        qber_xvv: counts.matched_vv.map(|t| t.error_rate()),
        qber_xuu: counts.matched_uu.map(|t| t.error_rate()),
        decoy: None,
        aopp: None,
        key_rate: KeyRateReport::zero(counts.n_tot, finite_size_correction(sec), String::new()),
    };
    if !(counts.n_tot > 0.0) {
        report.key_rate.diagnostics = vec!["no pulses sent".into()];
        return Ok(report);
    }
    let chernoff = Chernoff::new(sec.chernoff_xi)?;
    let est = match decoy::estimate(counts, params, &chernoff) {
        Ok(e) => e,
        Err(e) if is_estimation_gap(&e) => {
            report.key_rate.diagnostics = vec![e.to_string()];
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let untagged = UntaggedCounts {
        n01: est.n01_lower,
        n10: est.n10_lower,
        n1: est.n1_lower,
    };
    let aopp = aopp_estimate(&tally, &untagged, est.e1ph_upper);
    report.key_rate = secret_key_rate(&aopp, sec, counts.n_tot, params.clock_rate_hz, params.duty_cycle)?;
    report.decoy = Some(est);
    report.aopp = Some(aopp);
    Ok(report)
}

/// Interference and misalignment settings of the analytic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub visibility: f64,
    /// Standard deviation (rad) of a Gaussian residual phase error.
    pub phase_jitter_sigma: f64,
}

impl Default for ForwardModel {
    fn default() -> Self {
        ForwardModel {
            visibility: 0.97,
            phase_jitter_sigma: 0.0,
        }
    }
}

/// Modified Bessel function I0 by its power series (fine for the small
/// arguments that occur here).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Herald and phase-flip probabilities within the matched windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub fraction: f64,
    pub herald_prob: f64,
    pub error_prob: f64,
}

/// Per-pulse-pair herald probabilities for every category.
#[derive(Debug, Clone, PartialEq)]
pub struct HeraldModel {
    pub herald_prob: [f64; Category::COUNT],
    pub matched_vv: WindowStats,
    pub matched_uu: WindowStats,
}

struct PairOptics {
    /// Mean of either detector averaged over phase.
    m: f64,
    /// Amplitude of the interference term.
    c: f64,
    q: f64,
}

impl PairOptics {
    fn herald_at(&self, delta: f64) -> f64 {
        let x = self.c * delta.cos();
        2.0 * self.q * (-self.m).exp() * x.cosh() - 2.0 * self.q * self.q * (-2.0 * self.m).exp()
    }

    fn wrong_port_at(&self, delta: f64) -> f64 {
        let x = self.c * delta.cos();
        self.q * (-self.m - x).exp() - self.q * self.q * (-2.0 * self.m).exp()
    }

    fn herald_averaged(&self) -> f64 {
        2.0 * self.q * (-self.m).exp() * bessel_i0(self.c) - 2.0 * self.q * self.q * (-2.0 * self.m).exp()
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean of `f(theta + j)` for theta uniform in [-w, w] and j ~ N(0, sigma^2).
fn window_mean(f: impl Fn(f64) -> f64, w: f64, sigma: f64) -> f64 {
    let inner = |j: f64| simpson(|t| f(t + j), -w, w, 400) / (2.0 * w);
    if sigma <= 0.0 {
        return inner(0.0);
    }
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    simpson(|j| inner(j) * norm * (-0.5 * (j / sigma).powi(2)).exp(), -6.0 * sigma, 6.0 * sigma, 120)
}

impl HeraldModel {
    pub fn new(
        params: &ProtocolParams,
        link: &LinkBudget,
        det: &DetectorParams,
        model: &ForwardModel,
    ) -> Result<Self> {
        params.ensure_valid()?;
        link.validate()?;
        det.validate(params.clock_rate_hz)?;
        if !(0.0..=1.0).contains(&model.visibility) {
            return Err(Error::arg("visibility", format!("{} outside [0, 1]", model.visibility)));
        }
        let t = transmissivities(link, det);
        let q = 1.0 - det.dark_prob(params.clock_rate_hz);
        let optics = |c: Category| {
            let la = det.efficiency * t.eta_a * params.alice.intensity(c.alice);
            let lb = det.efficiency * t.eta_b * params.bob.intensity(c.bob);
            PairOptics {
                m: (la + lb) / 2.0,
                c: model.visibility * (la * lb).sqrt(),
                q,
            }
        };
        let mut herald_prob = [0.0; Category::COUNT];
        for c in Category::all() {
            herald_prob[c.index()] = optics(c).herald_averaged();
        }
        let w = params.phase_window().min(PI / 2.0);
        let frac = matched_fraction(params.phase_slices);
        let window = |c: Category| {
            let o = optics(c);
            WindowStats {
                fraction: frac,
                herald_prob: window_mean(|d| o.herald_at(d), w, model.phase_jitter_sigma),
                error_prob: window_mean(|d| o.wrong_port_at(d), w, model.phase_jitter_sigma),
            }
        };
        Ok(HeraldModel {
            herald_prob,
            matched_vv: window(Category::new(PulseClass::V, PulseClass::V)),
            matched_uu: window(Category::new(PulseClass::U, PulseClass::U)),
        })
    }

    /// Expected counts given how many pulse pairs of each category were sent.
    pub fn expected_counts(&self, n_tot: f64, sent: [f64; Category::COUNT]) -> DecoyCounts {
        let mut detected = [0.0; Category::COUNT];
        for i in 0..Category::COUNT {
            detected[i] = sent[i] * self.herald_prob[i];
        }
        let tally = |ws: &WindowStats, c: Category| {
            let n = sent[c.index()] * ws.fraction;
            MatchedTally {
                sent: n,
                detected: n * ws.herald_prob,
                errors: n * ws.error_prob,
            }
        };
        DecoyCounts {
            n_tot,
            detected,
            sent,
            matched_vv: Some(tally(&self.matched_vv, Category::new(PulseClass::V, PulseClass::V))),
            matched_uu: Some(tally(&self.matched_uu, Category::new(PulseClass::U, PulseClass::U))),
        }
    }
}

/// Expected heralded counts for `n_tot` pulse pairs sent with the nominal class probabilities.
pub fn expected_rates_model(
    params: &ProtocolParams,
    link: &LinkBudget,
    det: &DetectorParams,
    model: &ForwardModel,
    n_tot: f64,
) -> Result<DecoyCounts> {
    let hm = HeraldModel::new(params, link, det, model)?;
    let mut sent = [0.0; Category::COUNT];
    for c in Category::all() {
        sent[c.index()] = n_tot * params.category_prob(c);
    }
    Ok(hm.expected_counts(n_tot, sent))
}

/// Everything a rate-versus-loss sweep needs besides the loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveConfig {
    pub params: ProtocolParams,
    pub detector: DetectorParams,
    pub security: SecurityParams,
    pub model: ForwardModel,
    pub split: ArmSplit,
    pub n_tot: f64,
    pub attenuation_db_per_km: f64,
}

impl CurveConfig {
    pub fn new(params: ProtocolParams, detector: DetectorParams) -> Self {
        let split = ArmSplit::matched_arrival(&params);
        CurveConfig {
            params,
            detector,
            security: SecurityParams::default(),
            model: ForwardModel::default(),
            split,
            n_tot: 1.36581e13,
            attenuation_db_per_km: 0.22,
        }
    }

    pub fn link_at(&self, total_db: f64) -> LinkBudget {
        LinkBudget::from_total_loss(total_db, self.split, Some(self.attenuation_db_per_km))
    }

    pub fn analyze_at(&self, total_db: f64) -> Result<PipelineReport> {
        let counts = expected_rates_model(&self.params, &self.link_at(total_db), &self.detector, &self.model, self.n_tot)?;
        analyze(&counts, &self.params, &self.security)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub loss_db: f64,
    pub length_km: f64,
    pub skr_bit_per_pulse: f64,
    pub skr_bit_per_s: f64,
}

pub fn skr_vs_distance(sweep: &[f64], cfg: &CurveConfig) -> Result<Vec<CurvePoint>> {
    if sweep.is_empty() {
        return Err(Error::arg("sweep", "no loss values given"));
    }
    sweep
        .par_iter()
        .map(|&db| {
            let r = cfg.analyze_at(db)?.key_rate;
            Ok(CurvePoint {
                loss_db: db,
                length_km: db / cfg.attenuation_db_per_km,
                skr_bit_per_pulse: r.r_per_signal,
                skr_bit_per_s: r.bits_per_second,
            })
        })
        .collect()
}
