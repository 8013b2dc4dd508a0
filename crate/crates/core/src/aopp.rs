//! Actively odd-parity pairing.
//!
//! Bit convention for code windows: Alice's bit is 1 when she sends and 0
//! when she does not; Bob's bit is 0 when he sends and 1 when he does not.
//!
//! | Alice | Bob  | Alice bit | Bob bit | correct |
//! |-------|------|-----------|---------|---------|
//! | send  | none | 1         | 1       | yes     |
//! | none  | send | 0         | 0       | yes     |
//! | send  | send | 1         | 0       | no      |
//! | none  | none | 0         | 1       | no      |

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoy::{DecoyCounts, UntaggedCounts};
use crate::error::{Error, Result};
use crate::model::{Category, PulseClass};

/// Alice's and Bob's raw code-basis keys, with optional simulation-only
/// flags marking bits that came from an untagged single-photon event.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawKeyPair {
    alice: Vec<bool>,
    bob: Vec<bool>,
    untagged: Option<Vec<bool>>,
}

impl RawKeyPair {
    pub fn new(alice: Vec<bool>, bob: Vec<bool>, untagged: Option<Vec<bool>>) -> Result<Self> {
        if alice.len() != bob.len() || untagged.as_ref().is_some_and(|t| t.len() != alice.len()) {
            return Err(Error::arg("raw keys", "Alice, Bob and tag strings differ in length"));
        }
        Ok(RawKeyPair { alice, bob, untagged })
    }

    pub fn alice(&self) -> &[bool] {
        &self.alice
    }

    pub fn bob(&self) -> &[bool] {
        &self.bob
    }

    pub fn untagged(&self) -> Option<&[bool]> {
        self.untagged.as_deref()
    }

    pub fn len(&self) -> usize {
        self.alice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice.is_empty()
    }

    pub fn errors(&self) -> usize {
        self.alice.iter().zip(&self.bob).filter(|(a, b)| a != b).count()
    }

    pub fn qber(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.errors() as f64 / self.len() as f64
        }
    }

    pub(crate) fn push(&mut self, alice: bool, bob: bool, untagged: bool) {
        self.alice.push(alice);
        self.bob.push(bob);
        if let Some(t) = self.untagged.as_mut() {
            t.push(untagged);
        }
    }

    pub(crate) fn with_tags() -> Self {
        RawKeyPair {
            untagged: Some(Vec::new()),
            ..Default::default()
        }
    }

    pub fn to_packed(&self) -> PackedKeys {
        PackedKeys {
            length: self.len(),
            alice_hex: hex::encode(pack(&self.alice)),
            bob_hex: hex::encode(pack(&self.bob)),
            untagged_hex: self.untagged.as_ref().map(|t| hex::encode(pack(t))),
        }
    }

    pub fn from_packed(p: &PackedKeys) -> Result<Self> {
        let dec = |s: &str, what: &str| -> Result<Vec<bool>> {
            let bytes = hex::decode(s).map_err(|e| Error::Schema {
                source_name: "packed keys".into(),
                reason: format!("{what}: {e}"),
            })?;
            if bytes.len() != p.length.div_ceil(8) {
                return Err(Error::Schema {
                    source_name: "packed keys".into(),
                    reason: format!("{what} holds {} bytes for {} bits", bytes.len(), p.length),
                });
            }
            Ok(unpack(&bytes, p.length))
        };
        let tags = p.untagged_hex.as_deref().map(|s| dec(s, "untagged")).transpose()?;
        RawKeyPair::new(dec(&p.alice_hex, "alice")?, dec(&p.bob_hex, "bob")?, tags)
    }
}

/// Raw keys as hex strings of MSB-first packed bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedKeys {
    pub length: usize,
    pub alice_hex: String,
    pub bob_hex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub untagged_hex: Option<String>,
}

fn pack(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|ch| ch.iter().enumerate().fold(0u8, |b, (i, &x)| b | (u8::from(x) << (7 - i))))
        .collect()
}

fn unpack(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect()
}

/// Pairs each of Bob's 0-bits with a 1-bit, chosen uniformly at random.
///
/// Returns `min(#0, #1)` pairs as `(lower index, higher index)`, ordered by
/// the lower index. Unpaired bits are dropped.
pub fn aopp_pair(bob_bits: &[bool], seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zeros: Vec<usize> = (0..bob_bits.len()).filter(|&i| !bob_bits[i]).collect();
    let mut ones: Vec<usize> = (0..bob_bits.len()).filter(|&i| bob_bits[i]).collect();
    zeros.shuffle(&mut rng);
    ones.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = zeros
        .into_iter()
        .zip(ones)
        .map(|(z, o)| (z.min(o), z.max(o)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Result of running the pairing on actual bit strings.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    /// First bit of every odd-parity pair, for both parties.
    pub keys: RawKeyPair,
    pub n_t_prime: usize,
    pub e_z_prime: f64,
    /// Survivors whose two source bits were both untagged (only when tags are known).
    pub n1_prime: Option<usize>,
}

/// Alice announces her parity on every pair; even-parity pairs are
/// discarded and the first bit of each survivor is kept.
pub fn aopp_sift(keys: &RawKeyPair, pairs: &[(usize, usize)]) -> Result<SiftOutcome> {
    let n = keys.len();
    let mut used = vec![false; n];
    let mut out = match keys.untagged {
        Some(_) => RawKeyPair::with_tags(),
        None => RawKeyPair::default(),
    };
    let mut n1 = 0usize;
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(Error::arg("pairs", format!("pair ({i}, {j}) out of range for {n} bits")));
        }
        if i == j || used[i] || used[j] {
            return Err(Error::arg("pairs", format!("index reused in pair ({i}, {j})")));
        }
        used[i] = true;
        used[j] = true;
        if keys.bob[i] == keys.bob[j] {
            return Err(Error::arg("pairs", format!("pair ({i}, {j}) does not join a 0 with a 1")));
        }
        if keys.alice[i] != keys.alice[j] {
            let both_untagged = keys.untagged.as_ref().is_some_and(|t| t[i] && t[j]);
            n1 += usize::from(both_untagged);
            out.push(keys.alice[i], keys.bob[i], both_untagged);
        }
    }
    let n_t_prime = out.len();
    Ok(SiftOutcome {
        e_z_prime: out.qber(),
        n1_prime: keys.untagged.as_ref().map(|_| n1),
        keys: out,
        n_t_prime,
    })
}

/// Raw-key composition split by Bob's bit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTally {
    pub zeros: f64,
    pub ones: f64,
    pub zero_errors: f64,
    pub one_errors: f64,
}

impl ZTally {
    pub fn from_counts(c: &DecoyCounts) -> Self {
        use PulseClass::{N, S};
        let d = |a, b| c.detected(Category::new(a, b));
        ZTally {
            zeros: d(S, S) + d(N, S),
            ones: d(S, N) + d(N, N),
            zero_errors: d(S, S),
            one_errors: d(N, N),
        }
    }

    pub fn from_keys(k: &RawKeyPair) -> Self {
        let mut t = ZTally {
            zeros: 0.0,
            ones: 0.0,
            zero_errors: 0.0,
            one_errors: 0.0,
        };
        for (&a, &b) in k.alice.iter().zip(&k.bob) {
            let err = f64::from(u8::from(a != b));
            if b {
                t.ones += 1.0;
                t.one_errors += err;
            } else {
                t.zeros += 1.0;
                t.zero_errors += err;
            }
        }
        t
    }

    pub fn n_t(&self) -> f64 {
        self.zeros + self.ones
    }

    pub fn e_z(&self) -> f64 {
        let n = self.n_t();
        if n > 0.0 {
            (self.zero_errors + self.one_errors) / n
        } else {
            0.0
        }
    }
}

/// Expected post-pairing quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoppOutput {
    pub n_pairs: f64,
    pub n_t_prime: f64,
    pub e_z_prime: f64,
    pub n1_prime: f64,
    pub e1ph_prime: f64,
}

/// Closed-form expectations for random pairing.
///
/// With per-group error rates `e0`, `e1` a pair survives with probability
/// `e0 e1 + (1-e0)(1-e1)` and its kept bit is wrong only if both were.
/// Untagged bits are always correct, so a pair of two untagged bits always
/// survives. The phase error of a surviving untagged bit is `2e(1-e)`.
pub fn aopp_estimate(tally: &ZTally, untagged: &UntaggedCounts, e1ph_upper: f64) -> AoppOutput {
    let n_pairs = tally.zeros.min(tally.ones);
    if !(n_pairs > 0.0) {
        return AoppOutput {
            n_pairs: 0.0,
            n_t_prime: 0.0,
            e_z_prime: 0.0,
            n1_prime: 0.0,
            e1ph_prime: e1ph_upper.clamp(0.0, 0.5),
        };
    }
    let e0 = tally.zero_errors / tally.zeros;
    let e1 = tally.one_errors / tally.ones;
    let p_odd = e0 * e1 + (1.0 - e0) * (1.0 - e1);
    let f0 = (untagged.n01 / tally.zeros).clamp(0.0, 1.0);
    let f1 = (untagged.n10 / tally.ones).clamp(0.0, 1.0);
    let e = e1ph_upper.clamp(0.0, 0.5);
    AoppOutput {
        n_pairs,
        n_t_prime: n_pairs * p_odd,
        e_z_prime: if p_odd > 0.0 { e0 * e1 / p_odd } else { 0.0 },
        n1_prime: n_pairs * f0 * f1,
        e1ph_prime: 2.0 * e * (1.0 - e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn pairing_examples() {
        assert!(aopp_pair(&bits("0000"), 1).is_empty());
        assert_eq!(aopp_pair(&bits("01"), 1), vec![(0, 1)]);
        let b = bits("001011");
        for seed in 0..20 {
            let p = aopp_pair(&b, seed);
            assert_eq!(p.len(), 3);
            let mut seen = [false; 6];
            for &(i, j) in &p {
                assert!(i < j && b[i] != b[j]);
                assert!(!seen[i] && !seen[j]);
                seen[i] = true;
                seen[j] = true;
            }
        }
    }

    #[test]
    fn pairing_depends_on_seed() {
        let b: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        assert_eq!(aopp_pair(&b, 4), aopp_pair(&b, 4));
        assert_ne!(aopp_pair(&b, 4), aopp_pair(&b, 5));
    }

    #[test]
    fn error_free_keys_keep_every_pair() {
        let b = bits("0110100101");
        let keys = RawKeyPair::new(b.clone(), b.clone(), None).unwrap();
        let pairs = aopp_pair(&b, 9);
        let out = aopp_sift(&keys, &pairs).unwrap();
        assert_eq!(out.n_t_prime, pairs.len());
        assert_eq!(out.e_z_prime, 0.0);
        assert_eq!(out.n1_prime, None);
    }

    #[test]
    fn forced_pair() {
        let keys = RawKeyPair::new(bits("01"), bits("01"), None).unwrap();
        let out = aopp_sift(&keys, &[(0, 1)]).unwrap();
        assert_eq!(out.keys.alice(), &[false]);
        assert_eq!(out.keys.bob(), &[false]);
        assert_eq!(out.e_z_prime, 0.0);
    }

    #[test]
    fn bad_pairs_rejected() {
        let keys = RawKeyPair::new(bits("0101"), bits("0101"), None).unwrap();
        assert!(aopp_sift(&keys, &[(0, 9)]).is_err());
        assert!(aopp_sift(&keys, &[(0, 1), (1, 2)]).is_err());
        assert!(aopp_sift(&keys, &[(0, 2)]).is_err());
        assert!(RawKeyPair::new(bits("01"), bits("0"), None).is_err());
    }

    #[test]
    fn packed_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [0usize, 1, 7, 8, 9, 1001] {
            let r = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.random::<bool>()).collect::<Vec<_>>();
            let k = RawKeyPair::new(r(&mut rng), r(&mut rng), Some(r(&mut rng))).unwrap();
            let p = k.to_packed();
            assert_eq!(RawKeyPair::from_packed(&p).unwrap(), k);
        }
        assert_eq!(hex::encode(pack(&bits("10000001" ))), "81");
        assert_eq!(hex::encode(pack(&bits("101"))), "a0");
    }

    #[test]
    fn degenerate_key_gives_nothing() {
        let t = ZTally {
            zeros: 100.0,
            ones: 0.0,
            zero_errors: 10.0,
            one_errors: 0.0,
        };
        let u = UntaggedCounts { n01: 10.0, n10: 0.0, n1: 10.0 };
        let out = aopp_estimate(&t, &u, 0.05);
        assert_eq!((out.n_t_prime, out.n1_prime), (0.0, 0.0));
    }

    #[test]
    fn error_free_estimate() {
        let t = ZTally {
            zeros: 400.0,
            ones: 600.0,
            zero_errors: 0.0,
            one_errors: 0.0,
        };
        let u = UntaggedCounts { n01: 100.0, n10: 300.0, n1: 400.0 };
        let out = aopp_estimate(&t, &u, 0.0);
        assert_eq!(out.e_z_prime, 0.0);
        assert_eq!(out.n_t_prime, 400.0);
        assert_eq!(out.e1ph_prime, 0.0);
        assert!(out.n1_prime <= u.n1);
    }

    #[test]
    fn field_counts_post_pairing_error() {
        // Code-window cells of the 254 km run.
        let t = ZTally {
            zeros: 80_342_420.0 + 86_381_667.0,
            ones: 104_894_262.0 + 4_163_565.0,
            zero_errors: 80_342_420.0,
            one_errors: 4_163_565.0,
        };
        assert!((t.e_z() - 0.307).abs() < 1e-3);
        let u = UntaggedCounts { n01: 6.3e7, n10: 5.8e7, n1: 1.21e8 };
        let out = aopp_estimate(&t, &u, 0.02);
        assert!((out.e_z_prime - 0.0356).abs() < 1e-3, "{}", out.e_z_prime);
        assert!(out.n1_prime <= u.n1);
    }

    /// Exact expectations of survivors and surviving errors over every
    /// possible Alice string, given Bob's string and per-group flip rates.
    fn enumerate(bob: &[bool], pairs: &[(usize, usize)], e0: f64, e1: f64) -> (f64, f64) {
        let n = bob.len();
        let flip = |i: usize| if bob[i] { e1 } else { e0 };
        let (mut survivors, mut errors) = (0.0, 0.0);
        for mask in 0u32..(1 << n) {
            let alice: Vec<bool> = (0..n).map(|i| bob[i] ^ (mask >> i & 1 == 1)).collect();
            let prob: f64 = (0..n)
                .map(|i| if mask >> i & 1 == 1 { flip(i) } else { 1.0 - flip(i) })
                .product();
            let keys = RawKeyPair::new(alice, bob.to_vec(), None).unwrap();
            let out = aopp_sift(&keys, pairs).unwrap();
            survivors += prob * out.n_t_prime as f64;
            errors += prob * out.keys.errors() as f64;
        }
        (survivors, errors)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn estimator_matches_exhaustive_enumeration(bob_mask in 0u32..(1 << 20), seed in any::<u64>()) {
            // Per-group flip rates from the field run (30.7 % overall).
            let (e0, e1) = (0.4819, 0.0382);
            let bob: Vec<bool> = (0..20).map(|i| bob_mask >> i & 1 == 1).collect();
            let pairs = aopp_pair(&bob, seed);
            let (surv, errs) = enumerate(&bob, &pairs, e0, e1);
            let zeros = bob.iter().filter(|b| !**b).count() as f64;
            let tally = ZTally {
                zeros,
                ones: 20.0 - zeros,
                zero_errors: e0 * zeros,
                one_errors: e1 * (20.0 - zeros),
            };
            let u = UntaggedCounts { n01: 0.0, n10: 0.0, n1: 0.0 };
            let est = aopp_estimate(&tally, &u, 0.0);
            prop_assert!((est.n_t_prime - surv).abs() < 1e-9);
            if surv > 0.0 {
                prop_assert!((est.e_z_prime - errs / surv).abs() < 1e-9);
                prop_assert!(est.e_z_prime < 0.05);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pairing_never_raises_the_error_rate(seed in any::<u64>(), e in 0.01f64..0.45) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bob: Vec<bool> = (0..10_000).map(|_| rng.random()).collect();
            let alice: Vec<bool> = bob.iter().map(|&b| b ^ rng.random_bool(e)).collect();
            let keys = RawKeyPair::new(alice, bob, None).unwrap();
            let before = keys.qber();
            let out = aopp_sift(&keys, &aopp_pair(keys.bob(), seed ^ 1)).unwrap();
            prop_assert!(out.e_z_prime <= before);
            prop_assert!(out.n_t_prime <= keys.len() / 2);
        }

        #[test]
        fn sift_length_is_odd_parity_count(seed in any::<u64>(), len in 2usize..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bob: Vec<bool> = (0..len).map(|_| rng.random()).collect();
            let alice: Vec<bool> = (0..len).map(|_| rng.random()).collect();
            let keys = RawKeyPair::new(alice.clone(), bob.clone(), None).unwrap();
            let pairs = aopp_pair(&bob, seed);
            let odd = pairs.iter().filter(|&&(i, j)| alice[i] != alice[j]).count();
            let out = aopp_sift(&keys, &pairs).unwrap();
            prop_assert_eq!(out.n_t_prime, odd);
            let zeros = bob.iter().filter(|b| !**b).count();
            prop_assert!(out.n_t_prime <= zeros.min(len - zeros));
        }
    }
}
