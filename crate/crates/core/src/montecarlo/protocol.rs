//! Slot-by-slot simulation of a full run.
//!
//! Only slots with at least one click matter, so batches advance by
//! geometric skips at the highest click probability of any category and
//! thin by the actual one. A slot whose pulses are not both X-basis is
//! phase randomised and sampled photon by photon, which also yields the
//! emitted photon numbers behind the ground-truth yields. X-basis pairs
//! use the coherent click model at their actual phase difference.
//! Deadtime is applied afterwards in slot order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::interference::{interfere, GateDetector};
use super::phase::{simulate_stabilization, wrap, PhaseTrace, Stage, StabilizerConfig, TraceStats};
use crate::aopp::{PackedKeys, RawKeyPair};
use crate::decoy::{DecoyCounts, MatchedTally};
use crate::error::{Error, Result};
use crate::io::TraceRow;
use crate::keyrate::ForwardModel;
use crate::model::{
    synthesize_pattern, transmissivities, Category, DetectorParams, LinkBudget, ProtocolParams, PulseClass,
    PulsePair, Transmissivities,
};

pub const MIN_SLOTS: u64 = 10_000;
const MAX_PATTERN: usize = 1 << 20;
const BATCH_SLOTS: u64 = 1 << 22;
const BATCHES_PER_CHUNK: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseNoise {
    /// The channel phase is held exactly at zero.
    Ideal,
    Stabilized { stage: Stage, config: StabilizerConfig },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub params: ProtocolParams,
    pub link: LinkBudget,
    pub detector: DetectorParams,
    /// Interference visibility and extra per-slot Gaussian phase jitter.
    pub model: ForwardModel,
    pub phase: PhaseNoise,
    pub n_slots: u64,
    pub seed: u64,
    /// Length of the encoded pattern, repeated to fill `n_slots`.
    /// Defaults to `min(n_slots, 2^20)`.
    pub pattern_len: Option<usize>,
}

impl MonteCarloConfig {
    pub fn new(params: ProtocolParams, link: LinkBudget, detector: DetectorParams, n_slots: u64, seed: u64) -> Self {
        MonteCarloConfig {
            params,
            link,
            detector,
            model: ForwardModel::default(),
            phase: PhaseNoise::Ideal,
            n_slots,
            seed,
            pattern_len: None,
        }
    }
}

/// Yields and untagged-bit counts known only to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Heralds with exactly one photon from Alice and none from Bob.
    pub heralds_10: u64,
    pub heralds_01: u64,
    /// Expected number of slots with those photon numbers.
    pub slots_10: f64,
    pub slots_01: f64,
    pub s10: f64,
    pub s01: f64,
    /// Yield mixture weighted like the decoy bound on `s1`.
    pub s1: f64,
    /// Correct Z bits from a lone single photon.
    pub n10: u64,
    pub n01: u64,
}

impl GroundTruth {
    pub fn n1(&self) -> u64 {
        self.n10 + self.n01
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickStats {
    pub clicks_before_deadtime: u64,
    pub clicks_after_deadtime: u64,
    /// Slots with exactly one click, ignoring deadtime.
    pub heralds_before_deadtime: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub counts: DecoyCounts,
    pub qber_z: f64,
    pub qber_xuu: f64,
    pub qber_xvv: f64,
    pub raw_keys: RawKeyPair,
    pub phase_trace: Vec<TraceRow>,
    pub trace_stats: Option<TraceStats>,
    pub seed: u64,
    pub n_slots: u64,
    pub truth: GroundTruth,
    pub clicks: ClickStats,
}

/// Everything in a [`SimOutcome`] except the counts, which travel in the
/// ordinary counts format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub n_slots: u64,
    pub qber_z: f64,
    pub qber_xuu: f64,
    pub qber_xvv: f64,
    pub truth: GroundTruth,
    pub clicks: ClickStats,
    pub trace_stats: Option<TraceStats>,
    pub raw_keys: PackedKeys,
}

impl SimOutcome {
    pub fn summary(&self) -> SimSummary {
        SimSummary {
            seed: self.seed,
            n_slots: self.n_slots,
            qber_z: self.qber_z,
            qber_xuu: self.qber_xuu,
            qber_xvv: self.qber_xvv,
            truth: self.truth,
            clicks: self.clicks,
            trace_stats: self.trace_stats.clone(),
            raw_keys: self.raw_keys.to_packed(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Window {
    Outside,
    Zero,
    Pi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Other,
    OneZero,
    ZeroOne,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    slot: u64,
    pair: u32,
    click1: bool,
    click2: bool,
    tag: Tag,
}

struct CatOptics {
    mu_a: f64,
    mu_b: f64,
    la: f64,
    lambda: f64,
    p_any: f64,
    p_photon: f64,
    lost_a: Option<Poisson<f64>>,
    lost_b: Option<Poisson<f64>>,
}

struct Sim<'a> {
    pattern: Vec<PulsePair>,
    windows: Vec<Window>,
    optics: Vec<CatOptics>,
    etas: Transmissivities,
    gate: GateDetector,
    visibility: f64,
    jitter: Option<Normal<f64>>,
    trace: Option<&'a PhaseTrace>,
    settle_s: f64,
    slot_s: f64,
    p_max: f64,
}

fn poisson(mean: f64) -> Option<Poisson<f64>> {
    (mean > 0.0).then(|| Poisson::new(mean).expect("positive finite mean"))
}

fn binomial<R: Rng>(rng: &mut R, n: u32, p: f64) -> u32 {
    (0..n).filter(|_| rng.random::<f64>() < p).count() as u32
}

fn zero_truncated_poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    let target = rng.random::<f64>() * -(-lambda).exp_m1();
    let mut term = (-lambda).exp() * lambda;
    let mut cum = term;
    let mut k = 1u32;
    while cum < target && k < 10_000 {
        k += 1;
        term *= lambda / f64::from(k);
        cum += term;
    }
    k
}

impl Sim<'_> {
    fn channel_phase(&self, slot: u64) -> f64 {
        self.trace.map_or(0.0, |t| t.at(slot as f64 * self.slot_s + self.settle_s))
    }

    fn draw_clicks<R: Rng>(&self, rng: &mut R, slot: u64, pair: &PulsePair) -> (bool, bool, Tag) {
        let cat = pair.category();
        let o = &self.optics[cat.index()];
        if cat.is_xx() {
            let mut delta = self.channel_phase(slot);
            if let Some(j) = &self.jitter {
                delta += j.sample(rng);
            }
            let (p1, p2) = interfere(o.mu_a, o.mu_b, pair.phase_a, pair.phase_b, delta, &self.etas, &self.gate, self.visibility);
            let (only1, only2, both) = (p1 * (1.0 - p2), (1.0 - p1) * p2, p1 * p2);
            let u = rng.random::<f64>() * (only1 + only2 + both);
            let (c1, c2) = if u < only1 {
                (true, false)
            } else if u < only1 + only2 {
                (false, true)
            } else {
                (true, true)
            };
            return (c1, c2, Tag::Other);
        }

        let pd = self.gate.dark_prob;
        let (mut k_a, mut k_b) = (0u32, 0u32);
        let (c1, c2);
        if rng.random::<f64>() * o.p_any < o.p_photon {
            let k = zero_truncated_poisson(rng, o.lambda);
            k_a = binomial(rng, k, o.la / o.lambda);
            k_b = k - k_a;
            let common_a = binomial(rng, k_a, self.visibility);
            let common_b = binomial(rng, k_b, self.visibility);
            let n = common_a + common_b;
            let (mut to1, mut to2) = (false, false);
            if n > 0 {
                let one_side = binom_coeff(n, common_a) / 2f64.powi(n as i32);
                let u = rng.random::<f64>();
                if u < one_side {
                    to1 = true;
                } else if u < 2.0 * one_side {
                    to2 = true;
                } else {
                    to1 = true;
                    to2 = true;
                }
            }
            for _ in 0..(k - n) {
                if rng.random::<bool>() {
                    to1 = true;
                } else {
                    to2 = true;
                }
            }
            c1 = to1 || rng.random::<f64>() < pd;
            c2 = to2 || rng.random::<f64>() < pd;
        } else {
            let q = 1.0 - pd;
            let u = rng.random::<f64>() * (2.0 * pd * q + pd * pd);
            (c1, c2) = if u < pd * q {
                (true, false)
            } else if u < 2.0 * pd * q {
                (false, true)
            } else {
                (true, true)
            };
        }
        let n_a = k_a + o.lost_a.as_ref().map_or(0, |p| p.sample(rng) as u32);
        let n_b = k_b + o.lost_b.as_ref().map_or(0, |p| p.sample(rng) as u32);
        let tag = match (n_a, n_b) {
            (1, 0) => Tag::OneZero,
            (0, 1) => Tag::ZeroOne,
            _ => Tag::Other,
        };
        (c1, c2, tag)
    }

    fn run_batch(&self, seed: u64, batch: u64, start: u64, end: u64) -> Vec<Event> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(batch + 1);
        let mut events = Vec::new();
        if self.p_max <= 0.0 {
            return events;
        }
        let skip = Geometric::new(self.p_max).expect("probability in (0, 1]");
        let len = self.pattern.len() as u64;
        let mut k = start;
        loop {
            k = k.saturating_add(skip.sample(&mut rng));
            if k >= end {
                break;
            }
            let idx = (k % len) as usize;
            let pair = &self.pattern[idx];
            let p_any = self.optics[pair.category().index()].p_any;
            if p_any >= self.p_max || rng.random::<f64>() * self.p_max < p_any {
                let (click1, click2, tag) = self.draw_clicks(&mut rng, k, pair);
                events.push(Event {
                    slot: k,
                    pair: idx as u32,
                    click1,
                    click2,
                    tag,
                });
            }
            k += 1;
        }
        events
    }
}

fn binom_coeff(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| f64::from(n - k + i) / f64::from(i)).product()
}

fn classify_window(pair: &PulsePair, half_width: f64) -> Window {
    let d = wrap(pair.phase_a - pair.phase_b);
    if d.abs() <= half_width {
        Window::Zero
    } else if wrap(d - PI).abs() <= half_width {
        Window::Pi
    } else {
        Window::Outside
    }
}

#[derive(Default)]
struct Tallies {
    detected: [u64; Category::COUNT],
    vv: [u64; 2],
    uu: [u64; 2],
    truth10: u64,
    truth01: u64,
    n10: u64,
    n01: u64,
    clicks: ClickStats,
}

struct Deadtime {
    slots: f64,
    last: [Option<u64>; 2],
}

impl Deadtime {
    fn keep(&mut self, det: usize, slot: u64) -> bool {
        let ok = self.last[det].is_none_or(|l| ((slot - l) as f64) >= self.slots);
        if ok {
            self.last[det] = Some(slot);
        }
        ok
    }
}

fn validate(cfg: &MonteCarloConfig) -> Result<()> {
    cfg.params.ensure_valid()?;
    cfg.link.validate()?;
    cfg.detector.validate(cfg.params.clock_rate_hz)?;
    if cfg.n_slots < MIN_SLOTS {
        return Err(Error::arg("n_slots", format!("{} is below the minimum of {MIN_SLOTS}", cfg.n_slots)));
    }
    if !(0.0..=1.0).contains(&cfg.model.visibility) {
        return Err(Error::arg("visibility", format!("{} outside [0, 1]", cfg.model.visibility)));
    }
    if !(cfg.model.phase_jitter_sigma >= 0.0) {
        return Err(Error::arg("phase jitter", "must be non-negative"));
    }
    if cfg.pattern_len == Some(0) || cfg.pattern_len.is_some_and(|l| l as u64 > cfg.n_slots || l > u32::MAX as usize) {
        return Err(Error::arg("pattern_len", "must be positive and at most n_slots"));
    }
    Ok(())
}

/// Simulates `cfg.n_slots` protocol slots.
///
/// Output depends only on the configuration, not on the thread count.
pub fn run_protocol(cfg: &MonteCarloConfig) -> Result<SimOutcome> {
    validate(cfg)?;
    let params = &cfg.params;
    let pattern_len = cfg.pattern_len.unwrap_or_else(|| cfg.n_slots.min(MAX_PATTERN as u64) as usize);
    let pattern: Vec<PulsePair> = synthesize_pattern(params, pattern_len, cfg.seed)?.protocol_pairs().copied().collect();
    let half_width = params.phase_window().min(PI / 2.0);
    let windows: Vec<Window> = pattern
        .iter()
        .map(|p| if p.category().is_xx() { classify_window(p, half_width) } else { Window::Outside })
        .collect();

    let etas = transmissivities(&cfg.link, &cfg.detector);
    let gate = GateDetector::new(&cfg.detector, params.clock_rate_hz);
    let q = 1.0 - gate.dark_prob;
    let optics: Vec<CatOptics> = Category::all()
        .map(|c| {
            let mu_a = params.alice.intensity(c.alice);
            let mu_b = params.bob.intensity(c.bob);
            let la = gate.efficiency * etas.eta_a * mu_a;
            let lb = gate.efficiency * etas.eta_b * mu_b;
            let lambda = la + lb;
            CatOptics {
                mu_a,
                mu_b,
                la,
                lambda,
                p_any: 1.0 - q * q * (-lambda).exp(),
                p_photon: -(-lambda).exp_m1(),
                lost_a: poisson(mu_a - la),
                lost_b: poisson(mu_b - lb),
            }
        })
        .collect();
    let p_max = optics.iter().map(|o| o.p_any).fold(0.0, f64::max).min(1.0);

    let slot_s = 1.0 / params.protocol_rate_hz();
    let trace = match &cfg.phase {
        PhaseNoise::Ideal => None,
        PhaseNoise::Stabilized { stage, config } => {
            let duration = cfg.n_slots as f64 * slot_s + config.settle_s;
            Some((simulate_stabilization(config, *stage, duration, cfg.seed)?, config.settle_s))
        }
    };
    let sim = Sim {
        pattern,
        windows,
        optics,
        etas,
        gate,
        visibility: cfg.model.visibility,
        jitter: (cfg.model.phase_jitter_sigma > 0.0)
            .then(|| Normal::new(0.0, cfg.model.phase_jitter_sigma).expect("finite sigma")),
        trace: trace.as_ref().map(|(t, _)| t),
        settle_s: trace.as_ref().map_or(0.0, |(_, s)| *s),
        slot_s,
        p_max,
    };

    let vv = Category::new(PulseClass::V, PulseClass::V).index();
    let uu = Category::new(PulseClass::U, PulseClass::U).index();
    let sn = Category::new(PulseClass::S, PulseClass::N).index();
    let ns = Category::new(PulseClass::N, PulseClass::S).index();

    let mut dead = Deadtime {
        slots: cfg.detector.deadtime_s * params.protocol_rate_hz(),
        last: [None, None],
    };
    let mut t = Tallies::default();
    let mut keys = RawKeyPair::with_tags();
    let n_batches = cfg.n_slots.div_ceil(BATCH_SLOTS);
    let mut next = 0;
    while next < n_batches {
        let hi = (next + BATCHES_PER_CHUNK).min(n_batches);
        let chunk: Vec<Vec<Event>> = (next..hi)
            .into_par_iter()
            .map(|b| sim.run_batch(cfg.seed, b, b * BATCH_SLOTS, ((b + 1) * BATCH_SLOTS).min(cfg.n_slots)))
            .collect();
        next = hi;
        for ev in chunk.iter().flatten() {
            t.clicks.clicks_before_deadtime += u64::from(ev.click1) + u64::from(ev.click2);
            if ev.click1 != ev.click2 {
                t.clicks.heralds_before_deadtime += 1;
            }
            let c1 = ev.click1 && dead.keep(0, ev.slot);
            let c2 = ev.click2 && dead.keep(1, ev.slot);
            t.clicks.clicks_after_deadtime += u64::from(c1) + u64::from(c2);
            if c1 == c2 {
                continue;
            }
            let pair = &sim.pattern[ev.pair as usize];
            let cat = pair.category();
            let ci = cat.index();
            t.detected[ci] += 1;
            match ev.tag {
                Tag::OneZero => t.truth10 += 1,
                Tag::ZeroOne => t.truth01 += 1,
                Tag::Other => {}
            }
            if cat.is_zz() {
                let a = cat.alice == PulseClass::S;
                let b = cat.bob != PulseClass::S;
                let untagged = (ci == sn && ev.tag == Tag::OneZero) || (ci == ns && ev.tag == Tag::ZeroOne);
                if untagged {
                    if ci == sn {
                        t.n10 += 1;
                    } else {
                        t.n01 += 1;
                    }
                }
                keys.push(a, b, untagged);
            }
            if ci == vv || ci == uu {
                let w = sim.windows[ev.pair as usize];
                if w != Window::Outside {
                    let err = (w == Window::Zero && c2) || (w == Window::Pi && c1);
                    let slot = if ci == vv { &mut t.vv } else { &mut t.uu };
                    slot[0] += 1;
                    slot[1] += u64::from(err);
                }
            }
        }
    }

    let len = sim.pattern.len() as u64;
    let (reps, rem) = (cfg.n_slots / len, (cfg.n_slots % len) as usize);
    let mut sent = [0u64; Category::COUNT];
    let mut matched = [0u64; Category::COUNT];
    for (i, (p, w)) in sim.pattern.iter().zip(&sim.windows).enumerate() {
        let n = reps + u64::from(i < rem);
        sent[p.category().index()] += n;
        if *w != Window::Outside {
            matched[p.category().index()] += n;
        }
    }

    let tally = |ci: usize, d: [u64; 2]| MatchedTally {
        sent: matched[ci] as f64,
        detected: d[0] as f64,
        errors: d[1] as f64,
    };
    let counts = DecoyCounts {
        n_tot: cfg.n_slots as f64,
        detected: t.detected.map(|d| d as f64),
        sent: sent.map(|s| s as f64),
        matched_vv: Some(tally(vv, t.vv)),
        matched_uu: Some(tally(uu, t.uu)),
    };

    let (mut slots_10, mut slots_01) = (0.0, 0.0);
    for c in Category::all().filter(|c| !c.is_xx()) {
        let o = &sim.optics[c.index()];
        let n = sent[c.index()] as f64;
        slots_10 += n * o.mu_a * (-o.mu_a).exp() * (-o.mu_b).exp();
        slots_01 += n * o.mu_b * (-o.mu_b).exp() * (-o.mu_a).exp();
    }
    let ratio = |h: u64, n: f64| if n > 0.0 { h as f64 / n } else { 0.0 };
    let s10 = ratio(t.truth10, slots_10);
    let s01 = ratio(t.truth01, slots_01);
    let (va, vb) = (params.alice.v, params.bob.v);
    let truth = GroundTruth {
        heralds_10: t.truth10,
        heralds_01: t.truth01,
        slots_10,
        slots_01,
        s10,
        s01,
        s1: (va * s10 + vb * s01) / (va + vb),
        n10: t.n10,
        n01: t.n01,
    };
    let rate = |d: [u64; 2]| if d[0] > 0 { d[1] as f64 / d[0] as f64 } else { 0.0 };
    let (phase_trace, trace_stats) = match trace {
        Some((tr, _)) => (tr.rows(), Some(tr.stats.clone())),
        None => (Vec::new(), None),
    };
    Ok(SimOutcome {
        qber_z: keys.qber(),
        qber_xuu: rate(t.uu),
        qber_xvv: rate(t.vv),
        counts,
        raw_keys: keys,
        phase_trace,
        trace_stats,
        seed: cfg.seed,
        n_slots: cfg.n_slots,
        truth,
        clicks: t.clicks,
    })
}
