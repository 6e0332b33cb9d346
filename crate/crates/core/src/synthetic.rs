//! Synthetic tables for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::datamodel::{AttributeDomain, Record, RelationalDatabase};

const NURSERY: [(&str, &[&str]); 8] = [
    ("parents", &["usual", "pretentious", "great_pret"]),
    ("has_nurs", &["proper", "less_proper", "improper", "critical", "very_crit"]),
    ("form", &["complete", "completed", "incomplete", "foster"]),
    ("children", &["1", "2", "3", "more"]),
    ("housing", &["convenient", "less_conv", "critical"]),
    ("finance", &["convenient", "inconv"]),
    ("social", &["nonprob", "slightly_prob", "problematic"]),
    ("health", &["recommended", "priority", "not_recom"]),
];

/// The eight nursery attributes in their conventional order.
pub fn nursery_domains() -> Vec<AttributeDomain> {
    NURSERY
        .iter()
        .map(|(name, labels)| AttributeDomain::from_labels(name, labels).unwrap())
        .collect()
}

/// Full factorial over the nursery domains: 12960 rows, uniform marginals.
///
/// Class labels follow a simple rule on `health` and `has_nurs`; they are
/// carried along but never fingerprinted.
pub fn nursery_like() -> RelationalDatabase {
    let domains = nursery_domains();
    let sizes: Vec<u32> = domains.iter().map(|d| d.len() as u32).collect();
    let total: u32 = sizes.iter().product();
    let mut records = Vec::with_capacity(total as usize);
    for n in 0..total {
        let mut rest = n;
        let mut entries = vec![0u32; sizes.len()];
        for t in (0..sizes.len()).rev() {
            entries[t] = rest % sizes[t];
            rest /= sizes[t];
        }
        let label = match (entries[7], entries[1]) {
            (2, _) => "not_recom",
            (_, 3) | (_, 4) => "spec_prior",
            (1, _) => "priority",
            _ => "very_recom",
        };
        records.push(Record {
            primary_key: (n + 1).to_string(),
            entries,
            label: Some(label.to_string()),
        });
    }
    RelationalDatabase::new(domains, records, "id", Some("class".into())).unwrap()
}

fn numbered_domains(sizes: &[u32]) -> Vec<AttributeDomain> {
    sizes
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            AttributeDomain::new(format!("a{t}"), (0..s).map(|v| format!("v{v}")).collect()).unwrap()
        })
        .collect()
}

/// `n` rows with independent uniform codes; keys are `r0, r1, ...`.
pub fn uniform_database(n: usize, sizes: &[u32], seed: u64) -> RelationalDatabase {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| Record {
            primary_key: format!("r{i}"),
            entries: sizes.iter().map(|&s| rng.gen_range(0..s)).collect(),
            label: None,
        })
        .collect();
    RelationalDatabase::new(numbered_domains(sizes), records, "id", None).unwrap()
}

/// `n` rows over binary attributes where every attribute copies a hidden
/// coin with probability `agreement`, otherwise draws a fresh coin.
pub fn correlated_binary(n: usize, attributes: usize, agreement: f64, seed: u64) -> RelationalDatabase {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let hidden = rng.gen_range(0..2u32);
            let entries = (0..attributes)
                .map(|_| {
                    if rng.gen_bool(agreement) {
                        hidden
                    } else {
                        rng.gen_range(0..2u32)
                    }
                })
                .collect();
            Record {
                primary_key: format!("r{i}"),
                entries,
                label: None,
            }
        })
        .collect();
    RelationalDatabase::new(numbered_domains(&vec![2; attributes]), records, "id", None).unwrap()
}
