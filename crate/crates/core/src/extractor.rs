//! Fingerprint extraction by majority vote, and accusation.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::crypto_rand::{FingerprintBits, SecretKey};
use crate::datamodel::RelationalDatabase;
use crate::error::{Error, Result};
use crate::fingerprinter::{FingerprintParams, MarkPlan};

/// Vote counts and recovered template of one extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub c0: Vec<u64>,
    pub c1: Vec<u64>,
    /// `Some(bit)` when the index received a vote; ties resolve to 0.
    pub bits: Vec<Option<u8>>,
    pub resolved_fraction: f64,
    /// Leaked rows whose key was not found in the original.
    pub skipped_rows: usize,
}

impl ExtractionResult {
    pub fn from_counts(c0: Vec<u64>, c1: Vec<u64>, skipped_rows: usize) -> Self {
        let bits: Vec<Option<u8>> = c0
            .iter()
            .zip(&c1)
            .map(|(&a, &b)| match (a, b) {
                (0, 0) => None,
                _ if b > a => Some(1),
                _ => Some(0),
            })
            .collect();
        let resolved = bits.iter().filter(|b| b.is_some()).count();
        let resolved_fraction = if bits.is_empty() {
            0.0
        } else {
            resolved as f64 / bits.len() as f64
        };
        Self {
            c0,
            c1,
            bits,
            resolved_fraction,
            skipped_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The template as text: `0`, `1`, or `?` for indices with no vote.
    pub fn template(&self) -> String {
        self.bits
            .iter()
            .map(|b| match b {
                Some(1) => '1',
                Some(_) => '0',
                None => '?',
            })
            .collect()
    }

    /// Resolved bits agreeing with `f`; unresolved bits never match.
    pub fn matches(&self, f: &FingerprintBits) -> usize {
        self.bits
            .iter()
            .enumerate()
            .filter(|(l, b)| *l < f.len() && **b == Some(f.bit(*l)))
            .count()
    }
}

/// Replays the selection over the rows present in `leaked` and votes.
pub fn extract_fingerprint(
    original: &RelationalDatabase,
    leaked: &RelationalDatabase,
    params: &FingerprintParams,
    key: &SecretKey,
) -> Result<ExtractionResult> {
    let plan = MarkPlan::build(original, params, key);
    extract_with_plan(original, leaked, params, &plan)
}

/// Extraction against a prebuilt plan of `original`.
pub fn extract_with_plan(
    original: &RelationalDatabase,
    leaked: &RelationalDatabase,
    params: &FingerprintParams,
    plan: &MarkPlan,
) -> Result<ExtractionResult> {
    if leaked.attribute_count() != original.attribute_count() {
        return Err(Error::Alignment(format!(
            "leak has {} attributes, original has {}",
            leaked.attribute_count(),
            original.attribute_count()
        )));
    }
    if plan.row_count() != original.len() {
        return Err(Error::Alignment("plan was built for a different table".into()));
    }
    let index = original.key_index();
    let len = params.fingerprint_len;
    let mut c0 = vec![0u64; len];
    let mut c1 = vec![0u64; len];
    let mut skipped = 0usize;
    for r in &leaked.records {
        let Some(&i) = index.get(r.primary_key.as_str()) else {
            log::warn!("leaked row with unknown primary key '{}' skipped", r.primary_key);
            skipped += 1;
            continue;
        };
        let orig = &original.records[i];
        for pm in plan.row(i) {
            let t = pm.attribute as usize;
            let shift = pm.bit - 1;
            let mark = (((r.entries[t] ^ orig.entries[t]) >> shift) & 1) as u8;
            let bit = mark ^ pm.mask;
            let l = pm.index as usize;
            if bit == 1 {
                c1[l] += 1;
            } else {
                c0[l] += 1;
            }
        }
    }
    Ok(ExtractionResult::from_counts(c0, c1, skipped))
}

/// Per-recipient match counts and the accused recipient, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccusationVerdict {
    pub matches: BTreeMap<String, usize>,
    pub accused: Option<String>,
    pub threshold: usize,
}

/// Accuses the unique recipient with the most matches, provided it reaches `d`.
pub fn detect_traitor(
    extraction: &ExtractionResult,
    candidates: &[(String, FingerprintBits)],
    d: usize,
) -> Result<AccusationVerdict> {
    let mut matches = BTreeMap::new();
    for (sp, f) in candidates {
        if f.len() != extraction.len() {
            return Err(Error::Precondition(format!(
                "candidate '{sp}' has {} bits, extraction has {}",
                f.len(),
                extraction.len()
            )));
        }
        matches.insert(sp.clone(), extraction.matches(f));
    }
    let best = matches.values().copied().max().unwrap_or(0);
    let leaders: Vec<&String> = matches
        .iter()
        .filter(|(_, &m)| m == best)
        .map(|(sp, _)| sp)
        .collect();
    let accused = if best >= d && leaders.len() == 1 {
        Some(leaders[0].clone())
    } else {
        None
    };
    Ok(AccusationVerdict {
        matches,
        accused,
        threshold: d,
    })
}

/// Smallest `D` such that an innocent `L`-bit fingerprint reaches `D` chance
/// matches with probability at most `1/C`, floored at a strict majority.
pub fn match_threshold_d(recipients: u64, len: usize) -> Result<usize> {
    if recipients == 0 || len == 0 {
        return Err(Error::Parameter("recipients and length must be positive".into()));
    }
    let l = len as u64;
    // tail(D) * 2^L = sum_{j >= D} binom(L, j); condition tail * C <= 2^L.
    let total = BigUint::from(1u8) << len;
    let mut binom = vec![BigUint::from(1u8); len + 1];
    for j in 1..=len {
        binom[j] = &binom[j - 1] * BigUint::from(l - j as u64 + 1) / BigUint::from(j as u64);
    }
    let c = BigUint::from(recipients);
    let mut tail = BigUint::from(0u8);
    let mut tails = vec![BigUint::from(0u8); len + 2];
    for j in (0..=len).rev() {
        tail += &binom[j];
        tails[j] = tail.clone();
    }
    let start = len.div_ceil(2);
    let found = (start..=len).find(|&d| &tails[d] * &c <= total).unwrap_or(len);
    Ok(found.max(len / 2 + 1).min(len))
}
