use proptest::prelude::*;

use dpfp::attacks::subset_attack;
use dpfp::crypto_rand::SecretKey;
use dpfp::datamodel::{RelationalDatabase, SensitivityConfig, SensitivityMode};
use dpfp::extractor::extract_with_plan;
use dpfp::fingerprinter::{
    min_marking_probability, postprocess_domain, recipient_fingerprint, FingerprintParams, MarkPlan,
};
use dpfp::synthetic::uniform_database;

fn key(tag: u64) -> SecretKey {
    SecretKey::new(format!("property-key-{tag:08}").into_bytes()).unwrap()
}

fn table() -> impl Strategy<Value = RelationalDatabase> {
    (1usize..60, prop::collection::vec(2u32..9, 1..5), any::<u64>())
        .prop_map(|(n, sizes, seed)| uniform_database(n, &sizes, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_round_trip(db in table()) {
        let schema = db.schema(SensitivityConfig { mode: SensitivityMode::Global, delta: None });
        let text = db.to_csv_string().unwrap();
        let back = RelationalDatabase::read_csv(text.as_bytes(), &schema).unwrap();
        prop_assert_eq!(back, db);
    }

    #[test]
    fn marking_probability_below_half(eps in 1e-3f64..20.0, k in 1u32..16) {
        let p = min_marking_probability(eps, k);
        prop_assert!(p > 0.0 && p < 0.5);
    }

    #[test]
    fn parallel_plan_matches_sequential(db in table(), eps in 0.5f64..6.0, tag in any::<u64>()) {
        let params = FingerprintParams::from_epsilon(eps, 3, 32).unwrap();
        let k = key(tag);
        prop_assert_eq!(MarkPlan::build(&db, &params, &k), MarkPlan::build_sequential(&db, &params, &k));
    }

    #[test]
    fn release_stays_in_domain_and_keys(db in table(), eps in 0.5f64..6.0, tag in any::<u64>()) {
        let params = FingerprintParams::from_epsilon(eps, 3, 32).unwrap();
        let k = key(tag);
        let plan = MarkPlan::build(&db, &params, &k);
        let f = recipient_fingerprint(&params, &k, "sp").unwrap();
        let released = postprocess_domain(plan.apply(&db, &f).unwrap());
        prop_assert_eq!(released.len(), db.len());
        for (a, b) in released.records.iter().zip(&db.records) {
            prop_assert_eq!(&a.primary_key, &b.primary_key);
            for (t, &v) in a.entries.iter().enumerate() {
                prop_assert!(released.domains[t].contains(v));
            }
        }
    }

    #[test]
    fn resolved_bits_agree_before_clamp(db in table(), eps in 0.5f64..4.0, tag in any::<u64>()) {
        let params = FingerprintParams::from_epsilon(eps, 7, 16).unwrap();
        let k = key(tag);
        let plan = MarkPlan::build(&db, &params, &k);
        let f = recipient_fingerprint(&params, &k, "sp").unwrap();
        let marked = plan.apply(&db, &f).unwrap();
        let ex = extract_with_plan(&db, &marked, &params, &plan).unwrap();
        for (l, b) in ex.bits.iter().enumerate() {
            if let Some(b) = b {
                prop_assert_eq!(*b, f.bit(l));
            }
        }
    }

    #[test]
    fn subset_keeps_original_rows(db in table(), g in 0.0f64..=1.0, seed in any::<u64>()) {
        let sub = subset_attack(&db, g, seed).unwrap();
        let index = db.key_index();
        for r in &sub.records {
            let i = index[r.primary_key.as_str()];
            prop_assert_eq!(&db.records[i], r);
        }
    }
}
