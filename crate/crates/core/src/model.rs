//! Protocol, channel, detector and security parameters, plus fair-sampling
//! pattern synthesis.

use std::f64::consts::TAU;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Alice,
    Bob,
}

/// What a transmitter emits in one protocol slot.
///
/// `S` and `N` are the code-basis "send" and "not send" choices; `U`, `V`
/// and `W` are the test-basis decoy intensities. The not-send state shares
/// its stored intensity with `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PulseClass {
    S,
    N,
    U,
    V,
    W,
}

impl PulseClass {
    pub const ALL: [PulseClass; 5] = [
        PulseClass::S,
        PulseClass::N,
        PulseClass::U,
        PulseClass::V,
        PulseClass::W,
    ];

    pub fn basis(self) -> Basis {
        match self {
            PulseClass::S | PulseClass::N => Basis::Z,
            _ => Basis::X,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            PulseClass::S => 's',
            PulseClass::N => 'n',
            PulseClass::U => 'u',
            PulseClass::V => 'v',
            PulseClass::W => 'w',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        PulseClass::ALL.into_iter().find(|p| p.letter() == c)
    }
}

/// A joint (Alice, Bob) pulse-class choice: one of the 25 announcement cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Category {
    pub alice: PulseClass,
    pub bob: PulseClass,
}

impl Category {
    pub const COUNT: usize = 25;

    pub fn new(alice: PulseClass, bob: PulseClass) -> Self {
        Category { alice, bob }
    }

    pub fn all() -> impl Iterator<Item = Category> {
        (0..Self::COUNT).map(Category::from_index)
    }

    pub fn index(self) -> usize {
        self.alice.index() * 5 + self.bob.index()
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < Self::COUNT);
        Category {
            alice: PulseClass::ALL[i / 5],
            bob: PulseClass::ALL[i % 5],
        }
    }

    /// Label in the `ZXsu` style: both bases, then both classes.
    pub fn label(self) -> String {
        let b = |c: PulseClass| match c.basis() {
            Basis::Z => 'Z',
            Basis::X => 'X',
        };
        format!(
            "{}{}{}{}",
            b(self.alice),
            b(self.bob),
            self.alice.letter(),
            self.bob.letter()
        )
    }

    pub fn parse(label: &str) -> Option<Self> {
        let c: Vec<char> = label.chars().collect();
        if c.len() != 4 {
            return None;
        }
        let cat = Category::new(PulseClass::from_letter(c[2])?, PulseClass::from_letter(c[3])?);
        (cat.label() == label).then_some(cat)
    }

    pub fn is_xx(self) -> bool {
        self.alice.basis() == Basis::X && self.bob.basis() == Basis::X
    }

    pub fn is_zz(self) -> bool {
        self.alice.basis() == Basis::Z && self.bob.basis() == Basis::Z
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One transmitter's settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideParams {
    /// Signal intensity `s` sent with probability `send_prob` in the code basis.
    pub s: f64,
    pub u: f64,
    pub v: f64,
    /// Weakest decoy; also the intensity of the not-send state.
    pub w: f64,
    pub p_z: f64,
    pub send_prob: f64,
    pub p_u: f64,
    pub p_v: f64,
    pub p_w: f64,
}

impl SideParams {
    pub fn intensity(&self, class: PulseClass) -> f64 {
        match class {
            PulseClass::S => self.s,
            PulseClass::N | PulseClass::W => self.w,
            PulseClass::U => self.u,
            PulseClass::V => self.v,
        }
    }

    pub fn p_x(&self) -> f64 {
        1.0 - self.p_z
    }

    /// Unconditional probability of emitting `class` in a protocol slot.
    pub fn class_prob(&self, class: PulseClass) -> f64 {
        match class {
            PulseClass::S => self.p_z * self.send_prob,
            PulseClass::N => self.p_z * (1.0 - self.send_prob),
            PulseClass::U => self.p_x() * self.p_u,
            PulseClass::V => self.p_x() * self.p_v,
            PulseClass::W => self.p_x() * self.p_w,
        }
    }

    /// `eps * s * exp(-s)`: probability of a single-photon send in a code slot.
    pub(crate) fn single_photon_send(&self) -> f64 {
        self.send_prob * self.s * (-self.s).exp()
    }
}

/// Both transmitters' settings plus the slot timing.
///
/// Deserialised from a flat JSON object (`s_A`, `u_A`, ..., `phase_slices_M`,
/// `clock_rate_hz`, `duty_cycle`). Construction does not validate; call
/// [`validate_params`] or [`ProtocolParams::ensure_valid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamsFile", into = "ParamsFile")]
pub struct ProtocolParams {
    pub alice: SideParams,
    pub bob: SideParams,
    pub phase_slices: u32,
    pub clock_rate_hz: f64,
    pub duty_cycle: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    s_A: f64,
    s_B: f64,
    u_A: f64,
    u_B: f64,
    v_A: f64,
    v_B: f64,
    #[serde(alias = "n_A")]
    w_A: f64,
    #[serde(alias = "n_B")]
    w_B: f64,
    p_z_A: f64,
    p_z_B: f64,
    eps_A: f64,
    eps_B: f64,
    p_u_A: f64,
    p_v_A: f64,
    p_w_A: f64,
    p_u_B: f64,
    p_v_B: f64,
    p_w_B: f64,
    phase_slices_M: u32,
    clock_rate_hz: f64,
    duty_cycle: f64,
}

impl From<ParamsFile> for ProtocolParams {
    fn from(f: ParamsFile) -> Self {
        ProtocolParams {
            alice: SideParams {
                s: f.s_A,
                u: f.u_A,
                v: f.v_A,
                w: f.w_A,
                p_z: f.p_z_A,
                send_prob: f.eps_A,
                p_u: f.p_u_A,
                p_v: f.p_v_A,
                p_w: f.p_w_A,
            },
            bob: SideParams {
                s: f.s_B,
                u: f.u_B,
                v: f.v_B,
                w: f.w_B,
                p_z: f.p_z_B,
                send_prob: f.eps_B,
                p_u: f.p_u_B,
                p_v: f.p_v_B,
                p_w: f.p_w_B,
            },
            phase_slices: f.phase_slices_M,
            clock_rate_hz: f.clock_rate_hz,
            duty_cycle: f.duty_cycle,
        }
    }
}

impl From<ProtocolParams> for ParamsFile {
    fn from(p: ProtocolParams) -> Self {
        let (a, b) = (p.alice, p.bob);
        ParamsFile {
            s_A: a.s,
            s_B: b.s,
            u_A: a.u,
            u_B: b.u,
            v_A: a.v,
            v_B: b.v,
            w_A: a.w,
            w_B: b.w,
            p_z_A: a.p_z,
            p_z_B: b.p_z,
            eps_A: a.send_prob,
            eps_B: b.send_prob,
            p_u_A: a.p_u,
            p_v_A: a.p_v,
            p_w_A: a.p_w,
            p_u_B: b.p_u,
            p_v_B: b.p_v,
            p_w_B: b.p_w,
            phase_slices_M: p.phase_slices,
            clock_rate_hz: p.clock_rate_hz,
            duty_cycle: p.duty_cycle,
        }
    }
}

impl ProtocolParams {
    /// The parameter set used on the 254 km deployed link.
    pub fn field_trial() -> Self {
        ProtocolParams {
            alice: SideParams {
                s: 0.52,
                u: 0.52,
                v: 0.08,
                w: 0.0002,
                p_z: 0.8,
                send_prob: 0.42,
                p_u: 0.05,
                p_v: 0.80,
                p_w: 0.15,
            },
            bob: SideParams {
                s: 0.24,
                u: 0.13,
                v: 0.012,
                w: 0.0002,
                p_z: 0.8,
                send_prob: 0.15,
                p_u: 0.05,
                p_v: 0.80,
                p_w: 0.15,
            },
            phase_slices: 16,
            clock_rate_hz: 1e9,
            duty_cycle: 0.5,
        }
    }

    pub fn side(&self, party: Party) -> &SideParams {
        match party {
            Party::Alice => &self.alice,
            Party::Bob => &self.bob,
        }
    }

    pub fn category_prob(&self, cat: Category) -> f64 {
        self.alice.class_prob(cat.alice) * self.bob.class_prob(cat.bob)
    }

    /// Protocol pulse pairs per second.
    pub fn protocol_rate_hz(&self) -> f64 {
        self.clock_rate_hz * self.duty_cycle
    }

    /// Half-width of the phase-matching acceptance window, `2 pi / M`.
    pub fn phase_window(&self) -> f64 {
        TAU / f64::from(self.phase_slices)
    }

    /// Errors unless every structural check passes (the asymmetry tolerance is not consulted).
    pub fn ensure_valid(&self) -> Result<()> {
        let failures: Vec<String> = structural_checks(self)
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(failures))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    /// A type invariant; failing it makes the parameters unusable.
    Structural,
    /// A physical relation that must hold only up to the requested tolerance.
    Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tolerance: f64,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn structural_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.kind == CheckKind::Structural)
    }

    pub fn tolerance_failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.kind == CheckKind::Tolerance)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const PROB_SUM_TOL: f64 = 1e-9;

fn structural(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        kind: CheckKind::Structural,
        passed,
        detail,
        deviation: None,
    }
}

fn structural_checks(p: &ProtocolParams) -> Vec<Check> {
    let mut out = Vec::new();
    for (tag, s) in [("A", &p.alice), ("B", &p.bob)] {
        let intens = [s.s, s.u, s.v, s.w];
        out.push(structural(
            &format!("intensities non-negative ({tag})"),
            intens.iter().all(|x| x.is_finite() && *x >= 0.0),
            format!("s={} u={} v={} w={}", s.s, s.u, s.v, s.w),
        ));
        out.push(structural(
            &format!("signal intensity positive ({tag})"),
            s.s > 0.0,
            format!("s={}", s.s),
        ));
        out.push(structural(
            &format!("decoy ordering u > v > w ({tag})"),
            s.u > s.v && s.v > s.w,
            format!("u={} v={} w={}", s.u, s.v, s.w),
        ));
        out.push(structural(
            &format!("basis probability ({tag})"),
            (0.0..=1.0).contains(&s.p_z),
            format!("p_z={}", s.p_z),
        ));
        out.push(structural(
            &format!("sending probability ({tag})"),
            (0.0..=1.0).contains(&s.send_prob),
            format!("eps={}", s.send_prob),
        ));
        let probs = [s.p_u, s.p_v, s.p_w];
        let sum: f64 = probs.iter().sum();
        out.push(structural(
            &format!("decoy probabilities ({tag})"),
            probs.iter().all(|x| (0.0..=1.0).contains(x)) && (sum - 1.0).abs() <= PROB_SUM_TOL,
            format!("p_u+p_v+p_w={sum}"),
        ));
    }
    out.push(structural(
        "phase slices",
        p.phase_slices >= 2,
        format!("M={}", p.phase_slices),
    ));
    out.push(structural(
        "duty cycle",
        p.duty_cycle > 0.0 && p.duty_cycle <= 1.0,
        format!("duty={}", p.duty_cycle),
    ));
    out.push(structural(
        "clock rate",
        p.clock_rate_hz.is_finite() && p.clock_rate_hz > 0.0,
        format!("clock={} Hz", p.clock_rate_hz),
    ));
    out
}

/// Both sides of the intensity relation `v_A / v_B = eps_A (1-eps_B) s_A e^-s_A / (eps_B (1-eps_A) s_B e^-s_B)`.
pub fn asymmetry_sides(p: &ProtocolParams) -> (f64, f64) {
    let (a, b) = (&p.alice, &p.bob);
    let lhs = a.v / b.v;
    let rhs = (a.send_prob * (1.0 - b.send_prob) * a.s * (-a.s).exp())
        / (b.send_prob * (1.0 - a.send_prob) * b.s * (-b.s).exp());
    (lhs, rhs)
}

/// Runs every structural check and the asymmetric-intensity condition.
pub fn validate_params(params: &ProtocolParams, tolerance: f64) -> ValidationReport {
    let mut checks = structural_checks(params);
    let (lhs, rhs) = asymmetry_sides(params);
    let deviation = (lhs / rhs - 1.0).abs();
    let passed = deviation.is_finite() && deviation <= tolerance;
    checks.push(Check {
        name: "asymmetry condition".into(),
        kind: CheckKind::Tolerance,
        passed,
        detail: format!("v_A/v_B = {lhs:.6}, required {rhs:.6}, deviation {deviation:.4e}"),
        deviation: Some(deviation),
    });
    ValidationReport { tolerance, checks }
}

/// Per-arm losses for the Alice–Charlie and Bob–Charlie fibres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub length_ac_km: f64,
    pub length_bc_km: f64,
    pub loss_ac_db: f64,
    pub loss_bc_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_coeff_db_per_km: Option<f64>,
}

/// How a total channel loss is shared between the two arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmSplit {
    Symmetric,
    /// Alice's arm carries this fraction of the total loss.
    Proportional { alice_fraction: f64 },
    /// Alice's arm is lossier by `offset_db`. Totals below the offset cannot
    /// be split this way, so Bob's arm is padded with attenuation and the
    /// link behaves as if its total were `offset_db`.
    Offset { offset_db: f64 },
}

impl ArmSplit {
    /// Offset that makes the `v` decoys arrive at Charlie with equal mean photon number.
    pub fn matched_arrival(params: &ProtocolParams) -> Self {
        ArmSplit::Offset {
            offset_db: 10.0 * (params.alice.v / params.bob.v).log10(),
        }
    }

    fn split(self, total_db: f64) -> (f64, f64) {
        match self {
            ArmSplit::Symmetric => (total_db / 2.0, total_db / 2.0),
            ArmSplit::Proportional { alice_fraction } => {
                (total_db * alice_fraction, total_db * (1.0 - alice_fraction))
            }
            ArmSplit::Offset { offset_db } => {
                let off = offset_db.abs();
                let a = (total_db + off) / 2.0;
                let (hi, lo) = if total_db >= off { (a, total_db - a) } else { (off, 0.0) };
                if offset_db >= 0.0 {
                    (hi, lo)
                } else {
                    (lo, hi)
                }
            }
        }
    }
}

impl LinkBudget {
    /// The deployed link: 156.7 km and 97.2 km of fibre at 0.22 dB/km.
    pub fn field_trial() -> Self {
        Self::from_lengths(156.7, 97.2, 0.22)
    }

    pub fn from_lengths(length_ac_km: f64, length_bc_km: f64, coeff_db_per_km: f64) -> Self {
        LinkBudget {
            length_ac_km,
            length_bc_km,
            loss_ac_db: length_ac_km * coeff_db_per_km,
            loss_bc_db: length_bc_km * coeff_db_per_km,
            attenuation_coeff_db_per_km: Some(coeff_db_per_km),
        }
    }

    /// Losses only; lengths are filled in when an attenuation coefficient is given.
    pub fn from_losses(loss_ac_db: f64, loss_bc_db: f64, coeff_db_per_km: Option<f64>) -> Self {
        let len = |db: f64| coeff_db_per_km.map_or(0.0, |c| if c > 0.0 { db / c } else { 0.0 });
        LinkBudget {
            length_ac_km: len(loss_ac_db),
            length_bc_km: len(loss_bc_db),
            loss_ac_db,
            loss_bc_db,
            attenuation_coeff_db_per_km: coeff_db_per_km,
        }
    }

    pub fn from_total_loss(total_db: f64, split: ArmSplit, coeff_db_per_km: Option<f64>) -> Self {
        let (a, b) = split.split(total_db);
        Self::from_losses(a, b, coeff_db_per_km)
    }

    pub fn total_loss_db(&self) -> f64 {
        self.loss_ac_db + self.loss_bc_db
    }

    pub fn total_length_km(&self) -> f64 {
        self.length_ac_km + self.length_bc_km
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.length_ac_km,
            self.length_bc_km,
            self.loss_ac_db,
            self.loss_bc_db,
        ];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParams(vec![format!(
                "link budget must have non-negative lengths and losses, got {self:?}"
            )]))
        }
    }
}

pub fn db_to_transmissivity(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn transmissivity_to_db(eta: f64) -> f64 {
    -10.0 * eta.log10()
}

/// Single-photon avalanche detector characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
    pub deadtime_s: f64,
}

impl DetectorParams {
    /// Detectors on the protocol outputs (APD 1 and 2).
    pub fn protocol_apd() -> Self {
        DetectorParams {
            efficiency: 0.145,
            dark_rate_hz: 450.0,
            deadtime_s: 10e-6,
        }
    }

    /// Detectors monitoring the stabilisation signals (APD 3 and 4).
    pub fn support_apd() -> Self {
        DetectorParams {
            efficiency: 0.15,
            dark_rate_hz: 500.0,
            deadtime_s: 64e-9,
        }
    }

    pub fn without_deadtime(self) -> Self {
        DetectorParams {
            deadtime_s: 0.0,
            ..self
        }
    }

    /// Dark-count probability per gate at the given gating rate.
    pub fn dark_prob(&self, clock_rate_hz: f64) -> f64 {
        self.dark_rate_hz / clock_rate_hz
    }

    pub fn validate(&self, clock_rate_hz: f64) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.efficiency) {
            bad.push(format!("efficiency {} outside [0, 1]", self.efficiency));
        }
        let pd = self.dark_prob(clock_rate_hz);
        if !(self.dark_rate_hz >= 0.0) || !(pd < 1.0) {
            bad.push(format!("dark probability per gate {pd} outside [0, 1)"));
        }
        if !(self.deadtime_s >= 0.0) || !self.deadtime_s.is_finite() {
            bad.push(format!("deadtime {} s is negative", self.deadtime_s));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(bad))
        }
    }
}

/// Composable-security failure probabilities and reconciliation efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub eps_cor: f64,
    pub eps_pa: f64,
    pub eps_hat: f64,
    pub f_ec: f64,
    /// Failure probability attached to each Chernoff estimate.
    pub chernoff_xi: f64,
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            eps_cor: 1e-10,
            eps_pa: 1e-10,
            eps_hat: 1e-10,
            f_ec: 1.05,
            chernoff_xi: 1e-10,
        }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, e) in [
            ("eps_cor", self.eps_cor),
            ("eps_pa", self.eps_pa),
            ("eps_hat", self.eps_hat),
            ("chernoff_xi", self.chernoff_xi),
        ] {
            if !(e > 0.0 && e < 1.0) {
                bad.push(format!("{name}={e} outside (0, 1)"));
            }
        }
        if !(self.f_ec >= 1.0) {
            bad.push(format!("f_ec={} below 1", self.f_ec));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(bad))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmissivities {
    pub eta_a: f64,
    pub eta_b: f64,
    pub eta_channel: f64,
    pub eta_total: f64,
}

pub fn transmissivities(link: &LinkBudget, det: &DetectorParams) -> Transmissivities {
    let eta_a = db_to_transmissivity(link.loss_ac_db);
    let eta_b = db_to_transmissivity(link.loss_bc_db);
    let eta_channel = eta_a * eta_b;
    Transmissivities {
        eta_a,
        eta_b,
        eta_channel,
        eta_total: eta_channel * det.efficiency,
    }
}

/// One protocol pulse pair with the two transmitters' global phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsePair {
    pub alice: PulseClass,
    pub bob: PulseClass,
    pub phase_a: f64,
    pub phase_b: f64,
}

impl PulsePair {
    pub fn category(&self) -> Category {
        Category::new(self.alice, self.bob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Reference,
    Protocol(PulsePair),
}

/// A shuffled transmission pattern with exactly prescribed class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPattern {
    pub slots: Vec<Slot>,
    pub seed: u64,
    /// Number of protocol slots per category, indexed by [`Category::index`].
    pub category_counts: [usize; Category::COUNT],
}

impl EncodedPattern {
    pub fn protocol_pairs(&self) -> impl Iterator<Item = &PulsePair> + '_ {
        self.slots.iter().filter_map(|s| match s {
            Slot::Protocol(p) => Some(p),
            Slot::Reference => None,
        })
    }

    pub fn n_protocol(&self) -> usize {
        self.category_counts.iter().sum()
    }

    pub fn class_count(&self, party: Party, class: PulseClass) -> usize {
        Category::all()
            .filter(|c| match party {
                Party::Alice => c.alice == class,
                Party::Bob => c.bob == class,
            })
            .map(|c| self.category_counts[c.index()])
            .sum()
    }
}

/// Exact per-category slot counts by largest remainder.
///
/// Each cell first receives `floor(p n)`. Leftover slots go to the cells
/// with the largest fractional parts; exact ties are broken in favour of the
/// cell whose Alice and Bob classes are further below their own marginal
/// targets, then by lower category index.
pub fn allocate_counts(params: &ProtocolParams, n: usize) -> Result<[usize; Category::COUNT]> {
    if n == 0 {
        return Err(Error::InfeasiblePattern {
            slots: 0,
            reason: "at least one protocol slot is required".into(),
        });
    }
    let nf = n as f64;
    let quota: Vec<f64> = Category::all().map(|c| params.category_prob(c) * nf).collect();
    let mut counts = [0usize; Category::COUNT];
    for (i, q) in quota.iter().enumerate() {
        counts[i] = q.floor() as usize;
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut bumped = [false; Category::COUNT];
    while leftover > 0 {
        let mut marg_a = [0usize; 5];
        let mut marg_b = [0usize; 5];
        for c in Category::all() {
            marg_a[c.alice.index()] += counts[c.index()];
            marg_b[c.bob.index()] += counts[c.index()];
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for c in Category::all() {
            let i = c.index();
            if bumped[i] || quota[i] <= 0.0 {
                continue;
            }
            let rem = quota[i] - quota[i].floor();
            let deficit = (params.alice.class_prob(c.alice) * nf - marg_a[c.alice.index()] as f64)
                + (params.bob.class_prob(c.bob) * nf - marg_b[c.bob.index()] as f64);
            let better = match best {
                None => true,
                Some((_, brem, bdef)) => {
                    if (rem - brem).abs() > 1e-9 {
                        rem > brem
                    } else {
                        deficit > bdef + 1e-9
                    }
                }
            };
            if better {
                best = Some((i, rem, deficit));
            }
        }
        let (i, _, _) = best.ok_or_else(|| Error::InfeasiblePattern {
            slots: n,
            reason: "class probabilities do not sum to one".into(),
        })?;
        counts[i] += 1;
        bumped[i] = true;
        leftover -= 1;
    }
    if let Some(c) = Category::all().find(|c| quota[c.index()] > 0.0 && counts[c.index()] == 0) {
        return Err(Error::InfeasiblePattern {
            slots: n,
            reason: format!(
                "category {c} has probability {:.3e} but receives no slot",
                params.category_prob(c)
            ),
        });
    }
    Ok(counts)
}

/// Builds a fair-sampled pattern of `n_protocol_slots` pulse pairs, shuffled
/// and interleaved with reference slots according to the duty cycle.
pub fn synthesize_pattern(
    params: &ProtocolParams,
    n_protocol_slots: usize,
    seed: u64,
) -> Result<EncodedPattern> {
    params.ensure_valid()?;
    let counts = allocate_counts(params, n_protocol_slots)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cats: Vec<Category> = Vec::with_capacity(n_protocol_slots);
    for c in Category::all() {
        cats.extend(std::iter::repeat_n(c, counts[c.index()]));
    }
    cats.shuffle(&mut rng);

    let d = params.duty_cycle;
    let mut slots = Vec::with_capacity((n_protocol_slots as f64 / d).ceil() as usize + 1);
    let mut placed = 0;
    let mut i = 0u64;
    while placed < n_protocol_slots {
        let protocol = ((i + 1) as f64 * d).floor() > (i as f64 * d).floor();
        if protocol {
            let c = cats[placed];
            slots.push(Slot::Protocol(PulsePair {
                alice: c.alice,
                bob: c.bob,
                phase_a: rng.random::<f64>() * TAU,
                phase_b: rng.random::<f64>() * TAU,
            }));
            placed += 1;
        } else {
            slots.push(Slot::Reference);
        }
        i += 1;
    }
    Ok(EncodedPattern {
        slots,
        seed,
        category_counts: counts,
    })
}
