//! Shared inputs for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfqkd_core::aopp::RawKeyPair;
use tfqkd_core::decoy::DecoyCounts;
use tfqkd_core::io::counts_from_map;
use tfqkd_core::ProtocolParams;

const FIELD_COUNTS: &str = include_str!("../../../fixtures/field_counts.json");

pub fn field_counts(params: &ProtocolParams) -> DecoyCounts {
    let map = serde_json::from_str(FIELD_COUNTS).expect("bundled counts parse");
    counts_from_map(&map, params, "field_counts.json").expect("bundled counts are complete")
}

/// Keys with the given per-bit flip probability.
pub fn noisy_keys(len: usize, flip: f64, seed: u64) -> RawKeyPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bob: Vec<bool> = (0..len).map(|_| rng.random()).collect();
    let alice = bob.iter().map(|&b| b ^ rng.random_bool(flip)).collect();
    RawKeyPair::new(alice, bob, None).expect("equal lengths")
}
