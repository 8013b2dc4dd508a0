//! Decoy-state bounds on single-photon yields, untagged bits and the
//! phase-flip error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finitestats::{BoundedValue, Chernoff};
use crate::model::{Category, ProtocolParams, PulseClass};

/// Sent pulse pairs, heralds and phase-flip errors restricted to the
/// phase-matched windows of one X-basis category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchedTally {
    pub sent: f64,
    pub detected: f64,
    pub errors: f64,
}

impl MatchedTally {
    /// Reconstructs a tally from a reported error rate, assuming a fraction
    /// `matched_fraction` of the category's pulse pairs fall in a matched window.
    pub fn from_error_rate(sent: f64, detected: f64, error_rate: f64, matched_fraction: f64) -> Self {
        let detected = detected * matched_fraction;
        MatchedTally {
            sent: sent * matched_fraction,
            detected,
            errors: detected * error_rate,
        }
    }

    pub fn error_rate(&self) -> f64 {
        if self.detected > 0.0 {
            self.errors / self.detected
        } else {
            0.0
        }
    }

    pub fn add(&mut self, other: &MatchedTally) {
        self.sent += other.sent;
        self.detected += other.detected;
        self.errors += other.errors;
    }
}

/// Fraction of uniformly random phase differences accepted by the
/// matching rule `|d| <= 2 pi / M` or `|d - pi| <= 2 pi / M` (mod 2 pi).
pub fn matched_fraction(phase_slices: u32) -> f64 {
    (4.0 / f64::from(phase_slices)).min(1.0)
}

/// Category-resolved heralded counts for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyCounts {
    pub n_tot: f64,
    /// Single-detector heralds, indexed by [`Category::index`].
    pub detected: [f64; Category::COUNT],
    /// Pulse pairs sent, indexed by [`Category::index`].
    pub sent: [f64; Category::COUNT],
    pub matched_vv: Option<MatchedTally>,
    pub matched_uu: Option<MatchedTally>,
}

impl DecoyCounts {
    /// Sent counts follow from the class probabilities times `n_tot`.
    pub fn from_detected(n_tot: f64, detected: [f64; Category::COUNT], params: &ProtocolParams) -> Self {
        let mut sent = [0.0; Category::COUNT];
        for c in Category::all() {
            sent[c.index()] = n_tot * params.category_prob(c);
        }
        DecoyCounts {
            n_tot,
            detected,
            sent,
            matched_vv: None,
            matched_uu: None,
        }
    }

    pub fn detected(&self, c: Category) -> f64 {
        self.detected[c.index()]
    }

    pub fn sent(&self, c: Category) -> f64 {
        self.sent[c.index()]
    }

    pub fn total_detected(&self) -> f64 {
        self.detected.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_tot >= 0.0) || !self.n_tot.is_finite() {
            return Err(Error::InconsistentCounts {
                category: "N_total_sent".into(),
                reason: format!("{} is not a non-negative count", self.n_tot),
            });
        }
        for c in Category::all() {
            let (n, big_n) = (self.detected(c), self.sent(c));
            let bad = |reason: String| Error::InconsistentCounts {
                category: c.label(),
                reason,
            };
            if !(n >= 0.0 && n.is_finite()) || !(big_n >= 0.0 && big_n.is_finite()) {
                return Err(bad(format!("detected {n} / sent {big_n} must be non-negative")));
            }
            if n > big_n * (1.0 + 1e-9) {
                return Err(bad(format!("detected {n} exceeds sent {big_n}")));
            }
        }
        for (label, t) in [("XXvv", &self.matched_vv), ("XXuu", &self.matched_uu)] {
            if let Some(t) = t {
                if t.errors > t.detected * (1.0 + 1e-9) || t.detected > t.sent * (1.0 + 1e-9) || t.errors < 0.0 {
                    return Err(Error::InconsistentCounts {
                        category: format!("matched {label}"),
                        reason: format!("{t:?} is not errors <= detected <= sent"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Code-basis bit error rate before pairing.
    pub fn qber_z(&self) -> f64 {
        let zz = |a, b| self.detected(Category::new(a, b));
        use PulseClass::{N, S};
        let total = zz(S, S) + zz(S, N) + zz(N, S) + zz(N, N);
        if total > 0.0 {
            (zz(S, S) + zz(N, N)) / total
        } else {
            0.0
        }
    }
}

/// Bounded counting rates `S = n / N` for every category with pulses sent.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    rates: [Option<BoundedValue>; Category::COUNT],
}

impl RateTable {
    pub fn get(&self, c: Category) -> Result<BoundedValue> {
        self.rates[c.index()].ok_or_else(|| Error::EmptyCategory(c.label()))
    }

    fn of(&self, a: PulseClass, b: PulseClass) -> Result<BoundedValue> {
        self.get(Category::new(a, b))
    }

    pub fn from_rates(rates: [Option<BoundedValue>; Category::COUNT]) -> Self {
        RateTable { rates }
    }
}

pub fn counting_rates(counts: &DecoyCounts, chernoff: &Chernoff) -> RateTable {
    let mut rates = [None; Category::COUNT];
    for c in Category::all() {
        let big_n = counts.sent(c);
        if big_n > 0.0 {
            rates[c.index()] = Some(chernoff.bound(counts.detected(c)).scale(1.0 / big_n));
        }
    }
    RateTable { rates }
}

fn yield_bound(
    u: f64,
    v: f64,
    s_v_lower: f64,
    s_u_upper: f64,
    s_ww_upper: f64,
    side: &'static str,
) -> Result<f64> {
    if !(u > v) || !(v > 0.0) {
        return Err(Error::InvalidParams(vec![format!(
            "{side}: decoy bound needs u > v > 0, got u={u} v={v}"
        )]));
    }
    let num = u * u * v.exp() * s_v_lower - v * v * u.exp() * s_u_upper - (u * u - v * v) * s_ww_upper;
    Ok((num / (u * v * (u - v))).clamp(0.0, 1.0))
}

/// Lower bound on the yield of states with no photon from Alice and one from Bob.
pub fn bound_s01(rates: &RateTable, params: &ProtocolParams) -> Result<f64> {
    use PulseClass::{U, V, W};
    yield_bound(
        params.bob.u,
        params.bob.v,
        rates.of(W, V)?.lower,
        rates.of(W, U)?.upper,
        rates.of(W, W)?.upper,
        "Bob",
    )
}

/// Lower bound on the yield of states with one photon from Alice and none from Bob.
pub fn bound_s10(rates: &RateTable, params: &ProtocolParams) -> Result<f64> {
    use PulseClass::{U, V, W};
    yield_bound(
        params.alice.u,
        params.alice.v,
        rates.of(V, W)?.lower,
        rates.of(U, W)?.upper,
        rates.of(W, W)?.upper,
        "Alice",
    )
}

/// Weighted untagged yield: `s1 = v_A/(v_A+v_B) s10 + v_B/(v_A+v_B) s01`.
pub fn bound_s1(s01: f64, s10: f64, params: &ProtocolParams) -> Result<f64> {
    let (va, vb) = (params.alice.v, params.bob.v);
    if !(va + vb > 0.0) {
        return Err(Error::InvalidParams(vec!["v_A + v_B must be positive".into()]));
    }
    Ok(va / (va + vb) * s10 + vb / (va + vb) * s01)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UntaggedCounts {
    /// Untagged bits from Bob-only single photons.
    pub n01: f64,
    /// Untagged bits from Alice-only single photons.
    pub n10: f64,
    pub n1: f64,
}

pub fn untagged_counts(s01: f64, s10: f64, params: &ProtocolParams, n_tot: f64) -> UntaggedCounts {
    let (a, b) = (&params.alice, &params.bob);
    let zz = n_tot * a.p_z * b.p_z;
    let n10 = zz * a.single_photon_send() * (1.0 - b.send_prob) * s10;
    let n01 = zz * b.single_photon_send() * (1.0 - a.send_prob) * s01;
    UntaggedCounts {
        n01,
        n10,
        n1: n01 + n10,
    }
}

/// Upper bound on the phase-flip error rate of untagged bits, clamped to [0, 0.5].
pub fn phase_error_rate(t_x1_upper: f64, s_ww_upper: f64, s1_lower: f64, params: &ProtocolParams) -> Result<f64> {
    if !(s1_lower > 0.0) {
        return Err(Error::EstimationFailure(format!(
            "untagged yield lower bound is {s1_lower}; no phase-error estimate possible"
        )));
    }
    let vsum = params.alice.v + params.bob.v;
    let damp = (-vsum).exp();
    let e = (t_x1_upper - damp * s_ww_upper / 2.0) / (damp * vsum * s1_lower);
    Ok(e.clamp(0.0, 0.5))
}

/// Error events per phase-matched pulse pair, with a Chernoff interval on the error count.
pub fn phase_flip_rate(tally: &MatchedTally, chernoff: &Chernoff) -> Result<BoundedValue> {
    if !(tally.sent > 0.0) {
        return Err(Error::EmptyCategory("phase-matched XXvv".into()));
    }
    Ok(chernoff.bound(tally.errors).scale(1.0 / tally.sent))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyEstimates {
    pub s01_lower: f64,
    pub s10_lower: f64,
    pub s1_lower: f64,
    pub n01_lower: f64,
    pub n10_lower: f64,
    pub n1_lower: f64,
    pub t_x1_upper: f64,
    pub s_ww_upper: f64,
    pub e1ph_upper: f64,
}

/// Runs the full decoy analysis on one set of counts.
pub fn estimate(counts: &DecoyCounts, params: &ProtocolParams, chernoff: &Chernoff) -> Result<DecoyEstimates> {
    counts.validate()?;
    let rates = counting_rates(counts, chernoff);
    let s01 = bound_s01(&rates, params)?;
    let s10 = bound_s10(&rates, params)?;
    let s1 = bound_s1(s01, s10, params)?;
    let untagged = untagged_counts(s01, s10, params, counts.n_tot);
    let tally = counts.matched_vv.ok_or_else(|| {
        Error::EstimationFailure("counts carry no phase-matched XXvv tally".into())
    })?;
    let t_x1 = phase_flip_rate(&tally, chernoff)?;
    let s_ww = rates.of(PulseClass::W, PulseClass::W)?.upper;
    let e1ph = phase_error_rate(t_x1.upper, s_ww, s1, params)?;
    Ok(DecoyEstimates {
        s01_lower: s01,
        s10_lower: s10,
        s1_lower: s1,
        n01_lower: untagged.n01,
        n10_lower: untagged.n10,
        n1_lower: untagged.n1,
        t_x1_upper: t_x1.upper,
        s_ww_upper: s_ww,
        e1ph_upper: e1ph,
    })
}
