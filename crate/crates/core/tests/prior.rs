use blendrig_core::prior::{PriorSpec, Violation, DEFAULT_PRIOR_JSON};
use blendrig_core::NameRegistry;
use proptest::prelude::*;

#[test]
fn ten_thousand_samples_are_closed_under_the_rules() {
    let prior = PriorSpec::default_arkit();
    let names = prior.names();
    let close = names.index_of("mouthClose").unwrap();
    let open = names.index_of("jawOpen").unwrap();
    let mut max_seen = [0.0f64; 52];
    let mut max_mouth = 0;
    for seed in 0..10_000u64 {
        let w = prior.sample_seeded(seed);
        let violations = prior.validate(&w);
        assert!(violations.is_empty(), "seed {seed}: {violations:?}");
        assert!(w[close] <= w[open], "seed {seed}");
        let mouth = prior
            .active_groups(&w)
            .into_iter()
            .find(|(r, _)| r == "mouth")
            .unwrap()
            .1;
        assert!(mouth <= 4, "seed {seed}: {mouth} mouth groups");
        max_mouth = max_mouth.max(mouth);
        for (m, &v) in max_seen.iter_mut().zip(w.iter()) {
            *m = m.max(v);
        }
    }
    assert_eq!(max_mouth, 4);
    for (i, m) in max_seen.iter().enumerate() {
        assert!(*m > 0.5, "{} never exceeds 0.5 (max {m})", names.name(i));
    }
}

#[test]
fn loading_from_disk_matches_the_builtin_prior() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.json");
    std::fs::write(&path, DEFAULT_PRIOR_JSON).unwrap();
    let loaded = PriorSpec::load(&path, NameRegistry::arkit()).unwrap();
    let builtin = PriorSpec::default_arkit();
    assert_eq!(loaded.content_hash(), builtin.content_hash());
    for seed in 0..50 {
        assert_eq!(loaded.sample_seeded(seed), builtin.sample_seeded(seed));
    }
    assert!(PriorSpec::load(&dir.path().join("missing.json"), NameRegistry::arkit()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn samples_are_deterministic_and_admissible(seed in any::<u64>()) {
        let prior = PriorSpec::default_arkit();
        let w = prior.sample_seeded(seed);
        prop_assert_eq!(&w, &prior.sample_seeded(seed));
        prop_assert!(w.in_unit_box());
        prop_assert!(prior.validate(&w).is_empty());
    }

    #[test]
    fn breaking_the_ordering_is_reported(lo in 0.0f64..0.99, gap in 0.001f64..0.5) {
        let prior = PriorSpec::default_arkit();
        let names = prior.names();
        let mut w = vec![0.0; 52];
        w[names.index_of("jawOpen").unwrap()] = lo;
        w[names.index_of("mouthClose").unwrap()] = (lo + gap).min(1.0);
        let v = prior.validate(&w);
        prop_assert!(v.iter().any(|v| matches!(v, Violation::Ordering { .. })), "{:?}", v);
    }
}
