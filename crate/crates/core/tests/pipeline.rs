use std::collections::BTreeMap;

use proptest::prelude::*;
use tfqkd_core::bounds::skc1;
use tfqkd_core::decoy::DecoyCounts;
use tfqkd_core::io::{counts_from_map, counts_to_json};
use tfqkd_core::keyrate::{analyze, expected_rates_model, CurveConfig};
use tfqkd_core::{transmissivities, Category, Chernoff, DetectorParams, ProtocolParams, SecurityParams};

const FIELD_COUNTS: &str = include_str!("../../../fixtures/field_counts.json");

fn field_counts(params: &ProtocolParams) -> DecoyCounts {
    let map: BTreeMap<String, f64> = serde_json::from_str(FIELD_COUNTS).unwrap();
    counts_from_map(&map, params, "field_counts.json").unwrap()
}

fn modelled(total_db: f64, n_tot: f64) -> (CurveConfig, DecoyCounts) {
    let mut cfg = CurveConfig::new(ProtocolParams::field_trial(), DetectorParams::protocol_apd());
    cfg.n_tot = n_tot;
    let counts = expected_rates_model(&cfg.params, &cfg.link_at(total_db), &cfg.detector, &cfg.model, n_tot).unwrap();
    (cfg, counts)
}

#[test]
fn field_counts_give_a_positive_key() {
    let params = ProtocolParams::field_trial();
    let report = analyze(&field_counts(&params), &params, &SecurityParams::default()).unwrap();
    let k = &report.key_rate;
    assert!((k.r_per_signal / 2.3248e-7 - 1.0).abs() < 5e-4, "{}", k.r_per_signal);
    assert!((k.secure_bits - k.r_per_signal * k.n_tot).abs() <= 1e-6 * k.secure_bits);
    assert_eq!(k.r_formula, 2.0 * k.r_per_signal);
    assert!((report.e_z - (80342420.0 + 4163565.0) / 275781914.0).abs() < 1e-12);
    assert!((k.e_z_prime - 0.0356).abs() < 5e-4);
    let decoy = report.decoy.unwrap();
    assert!(decoy.s1_lower > 0.0 && decoy.s1_lower < 1.0);
    assert!(decoy.e1ph_upper > 0.0 && decoy.e1ph_upper <= 0.5);
}

#[test]
fn counts_survive_a_json_round_trip() {
    let params = ProtocolParams::field_trial();
    let counts = field_counts(&params);
    let map: BTreeMap<String, f64> = serde_json::from_str(&counts_to_json(&counts)).unwrap();
    let back = counts_from_map(&map, &params, "round trip").unwrap();
    for c in Category::all() {
        assert_eq!(back.detected(c), counts.detected(c), "{}", c.label());
    }
    let sec = SecurityParams::default();
    assert_eq!(
        analyze(&back, &params, &sec).unwrap().key_rate,
        analyze(&counts, &params, &sec).unwrap().key_rate
    );
}

#[test]
fn a_dead_link_has_no_key() {
    let (cfg, counts) = modelled(120.0, 1e13);
    let report = analyze(&counts, &cfg.params, &cfg.security).unwrap();
    assert_eq!(report.key_rate.r_per_signal, 0.0);
    assert_eq!(report.key_rate.secure_bits, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn modelled_rate_stays_under_the_single_repeater_capacity(total_db in 8.5f64..70.0) {
        let (cfg, counts) = modelled(total_db, 1.36581e13);
        let r = analyze(&counts, &cfg.params, &cfg.security).unwrap().key_rate.r_per_signal;
        let t = transmissivities(&cfg.link_at(total_db), &cfg.detector);
        prop_assert!(r >= 0.0);
        prop_assert!(r <= skc1(t.eta_a, t.eta_b).unwrap(), "r = {r} at {total_db} dB");
    }

    #[test]
    fn more_pulses_never_shrink_the_rate(total_db in 10.0f64..45.0, k in 1.0f64..100.0) {
        let (cfg, small) = modelled(total_db, 1e12);
        let (_, large) = modelled(total_db, 1e12 * k);
        let r_small = analyze(&small, &cfg.params, &cfg.security).unwrap().key_rate.r_per_signal;
        let r_large = analyze(&large, &cfg.params, &cfg.security).unwrap().key_rate.r_per_signal;
        prop_assert!(r_large >= r_small * (1.0 - 1e-9), "{r_small} -> {r_large}");
    }

    #[test]
    fn chernoff_interval_brackets_the_observation(x in 0.0f64..1e12, log_xi in -15.0f64..-1.0) {
        let ch = Chernoff::new(10f64.powf(log_xi)).unwrap();
        let b = ch.bound(x);
        prop_assert!(b.lower <= x && x <= b.upper);
        prop_assert!(b.lower >= 0.0);
    }
}
