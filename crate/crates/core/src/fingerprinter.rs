//! Fingerprint insertion by keyed bit-level randomized response.
//!
//! A position is the `k`-th least significant bit of attribute `t` in row
//! `i`, for `k` up to `min(K, K_t)`. Position `(i, t, k)` is selected when
//! `U_1(s) mod floor(1/(2p)) == 0`; a selected bit is XORed with
//! `B = x ^ f(l)` where `x` is the parity of `U_2(s)` and `l = U_3(s) mod L`.
//!
//! The selection, mask and index of a position depend on the key and the
//! position's seed only, not on the recipient. [`MarkPlan`] caches them so a
//! table can be fingerprinted for many recipients without recomputing the
//! keyed digests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crypto_rand::{gen_fingerprint, FingerprintBits, Prs, SecretKey, Seed};
use crate::datamodel::{bit_width, RelationalDatabase};
use crate::error::{Error, Result};

pub const DEFAULT_FINGERPRINT_LEN: usize = 128;

/// `(ε, Δ, K, p, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintParams {
    pub epsilon: f64,
    pub delta: u32,
    pub k: u32,
    pub p: f64,
    pub fingerprint_len: usize,
}

/// `1/(e^{ε/K}+1)`, the smallest marking probability that yields ε-entry-level DP.
pub fn min_marking_probability(epsilon: f64, k: u32) -> f64 {
    1.0 / ((epsilon / f64::from(k)).exp() + 1.0)
}

/// Number of marked low-order bits, `floor(log2 Δ) + 1`.
pub fn bits_for_sensitivity(delta: u32) -> u32 {
    bit_width(delta)
}

impl FingerprintParams {
    /// Parameters with `p` at its minimum for the budget.
    pub fn from_epsilon(epsilon: f64, delta: u32, fingerprint_len: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if delta == 0 {
            return Err(Error::Parameter("sensitivity must be at least 1".into()));
        }
        if fingerprint_len == 0 || fingerprint_len > crate::crypto_rand::MAX_FINGERPRINT_LEN {
            return Err(Error::Parameter(format!(
                "fingerprint length must be in 1..=128, got {fingerprint_len}"
            )));
        }
        let k = bits_for_sensitivity(delta);
        Ok(Self {
            epsilon,
            delta,
            k,
            p: min_marking_probability(epsilon, k),
            fingerprint_len,
        })
    }

    /// Parameters for a given `p`, with ε the budget `p` is minimal for.
    pub fn from_p(p: f64, delta: u32, fingerprint_len: usize) -> Result<Self> {
        if !(p > 0.0 && p < 0.5) {
            return Err(Error::Parameter(format!("marking probability must lie in (0, 0.5), got {p}")));
        }
        let k = bits_for_sensitivity(delta.max(1));
        let epsilon = f64::from(k) * ((1.0 - p) / p).ln();
        let mut params = Self::from_epsilon(epsilon, delta, fingerprint_len)?;
        params.p = p;
        Ok(params)
    }

    /// Replaces `p` with a larger marking probability (more robust, same ε).
    pub fn with_p(mut self, p: f64) -> Result<Self> {
        let min = min_marking_probability(self.epsilon, self.k);
        if !(p < 0.5) || p < min * (1.0 - 1e-12) {
            return Err(Error::Parameter(format!(
                "marking probability {p} must lie in [{min}, 0.5)"
            )));
        }
        self.p = p;
        Ok(self)
    }

    /// `floor(1/(2p))`, saturating, at least 1.
    pub fn selection_modulus(&self) -> u64 {
        selection_modulus(self.p)
    }

    /// Probability that a position is selected, `1/floor(1/(2p))`.
    pub fn selection_probability(&self) -> f64 {
        1.0 / self.selection_modulus() as f64
    }
}

/// `floor(1/(2p))`. A relative slack of `1e-12` keeps exact integers such as
/// `p = 1/(e^{ln 3}+1)` from rounding down a whole step.
pub fn selection_modulus(p: f64) -> u64 {
    let m = (1.0 / (2.0 * p) * (1.0 + 1e-12)).floor();
    if m >= u64::MAX as f64 {
        u64::MAX
    } else {
        (m as u64).max(1)
    }
}

/// Number of touchable bits of attribute `t`, `min(K, K_t)`.
pub fn touchable_bits(db: &RelationalDatabase, k: u32, t: usize) -> u32 {
    k.min(db.domains[t].bit_width())
}

/// All positions `(i, t, k)`, with `i` and `t` 0-based and `k` 1-based.
pub fn fingerprintable_set(db: &RelationalDatabase, k: u32) -> Vec<(usize, usize, u32)> {
    let widths: Vec<u32> = (0..db.attribute_count()).map(|t| touchable_bits(db, k, t)).collect();
    let mut out = Vec::with_capacity(db.len() * widths.iter().sum::<u32>() as usize);
    for i in 0..db.len() {
        for (t, &w) in widths.iter().enumerate() {
            for bit in 1..=w {
                out.push((i, t, bit));
            }
        }
    }
    out
}

/// One applied mark, as recorded in the key-holder's debug artifact.
///
/// `row` is 0-based; `attribute` and `bit` are 1-based as in the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkDecision {
    pub row: usize,
    pub primary_key: String,
    pub attribute: u32,
    pub bit: u32,
    pub mask: u8,
    pub index: usize,
    pub mark: u8,
}

/// A selected position with its recipient-independent mask and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedMark {
    /// 0-based attribute.
    pub attribute: u32,
    /// 1-based bit, 1 being the least significant.
    pub bit: u32,
    pub mask: u8,
    pub index: u32,
}

/// Selected positions of a table under one key and parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkPlan {
    marks: Vec<PlannedMark>,
    row_offsets: Vec<usize>,
    positions: usize,
}

fn plan_row(
    prs: &Prs,
    primary_key: &str,
    widths: &[u32],
    modulus: u64,
    len: u64,
) -> Vec<PlannedMark> {
    let mut out = Vec::new();
    for (t, &w) in widths.iter().enumerate() {
        for bit in 1..=w {
            let [u1, u2, u3] = prs.triple(&Seed::new(primary_key, t as u32 + 1, bit));
            if u1 % modulus == 0 {
                out.push(PlannedMark {
                    attribute: t as u32,
                    bit,
                    mask: (u2 & 1) as u8,
                    index: (u3 % len) as u32,
                });
            }
        }
    }
    out
}

impl MarkPlan {
    /// Replays the selection rule for every position, rows in parallel.
    pub fn build(db: &RelationalDatabase, params: &FingerprintParams, key: &SecretKey) -> Self {
        Self::build_with(db, params, key, true)
    }

    /// Same plan computed on the calling thread only.
    pub fn build_sequential(
        db: &RelationalDatabase,
        params: &FingerprintParams,
        key: &SecretKey,
    ) -> Self {
        Self::build_with(db, params, key, false)
    }

    fn build_with(
        db: &RelationalDatabase,
        params: &FingerprintParams,
        key: &SecretKey,
        parallel: bool,
    ) -> Self {
        let prs = Prs::new(key);
        let widths: Vec<u32> = (0..db.attribute_count())
            .map(|t| touchable_bits(db, params.k, t))
            .collect();
        let modulus = params.selection_modulus();
        let len = params.fingerprint_len as u64;
        let per_row: Vec<Vec<PlannedMark>> = if parallel {
            db.records
                .par_iter()
                .map(|r| plan_row(&prs, &r.primary_key, &widths, modulus, len))
                .collect()
        } else {
            db.records
                .iter()
                .map(|r| plan_row(&prs, &r.primary_key, &widths, modulus, len))
                .collect()
        };
        let mut row_offsets = Vec::with_capacity(per_row.len() + 1);
        row_offsets.push(0);
        let mut marks = Vec::with_capacity(per_row.iter().map(Vec::len).sum());
        for row in per_row {
            marks.extend(row);
            row_offsets.push(marks.len());
        }
        Self {
            marks,
            row_offsets,
            positions: db.len() * widths.iter().sum::<u32>() as usize,
        }
    }

    pub fn row_count(&self) -> usize {
        self.row_offsets.len() - 1
    }

    /// Size of the fingerprintable set the plan was built over.
    pub fn position_count(&self) -> usize {
        self.positions
    }

    pub fn selected_count(&self) -> usize {
        self.marks.len()
    }

    pub fn row(&self, i: usize) -> &[PlannedMark] {
        &self.marks[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    fn check_rows(&self, db: &RelationalDatabase) -> Result<()> {
        if db.len() != self.row_count() {
            return Err(Error::Alignment(format!(
                "plan covers {} rows, table has {}",
                self.row_count(),
                db.len()
            )));
        }
        Ok(())
    }

    /// Per-entry XOR masks for fingerprint `f`, indexed `[row][attribute]`.
    fn xor_masks(&self, n_attrs: usize, f: &FingerprintBits) -> Vec<Vec<u32>> {
        (0..self.row_count())
            .map(|i| {
                let mut m = vec![0u32; n_attrs];
                for pm in self.row(i) {
                    let b = pm.mask ^ f.bit(pm.index as usize);
                    m[pm.attribute as usize] ^= u32::from(b) << (pm.bit - 1);
                }
                m
            })
            .collect()
    }

    /// Fingerprinted copy of `db` for fingerprint `f`, before domain clamping.
    pub fn apply(&self, db: &RelationalDatabase, f: &FingerprintBits) -> Result<RelationalDatabase> {
        self.check_rows(db)?;
        let masks = self.xor_masks(db.attribute_count(), f);
        let mut out = db.clone();
        for (r, m) in out.records.iter_mut().zip(masks) {
            for (v, x) in r.entries.iter_mut().zip(m) {
                *v ^= x;
            }
        }
        Ok(out)
    }

    /// `||M(R) - R||_{1,1}` of the pre-clamp copy, without materializing it.
    pub fn density(&self, db: &RelationalDatabase, f: &FingerprintBits) -> Result<u64> {
        self.check_rows(db)?;
        let masks = self.xor_masks(db.attribute_count(), f);
        Ok(db
            .records
            .iter()
            .zip(masks)
            .map(|(r, m)| {
                r.entries
                    .iter()
                    .zip(m)
                    .map(|(&v, x)| u64::from(v.abs_diff(v ^ x)))
                    .sum::<u64>()
            })
            .sum())
    }

    /// The applied marks for fingerprint `f`.
    pub fn decisions(&self, db: &RelationalDatabase, f: &FingerprintBits) -> Vec<MarkDecision> {
        let mut out = Vec::with_capacity(self.marks.len());
        for (i, r) in db.records.iter().enumerate().take(self.row_count()) {
            for pm in self.row(i) {
                out.push(MarkDecision {
                    row: i,
                    primary_key: r.primary_key.clone(),
                    attribute: pm.attribute + 1,
                    bit: pm.bit,
                    mask: pm.mask,
                    index: pm.index as usize,
                    mark: pm.mask ^ f.bit(pm.index as usize),
                });
            }
        }
        out
    }
}

/// Fingerprint of recipient `internal_id`, with the parameters' length.
pub fn recipient_fingerprint(
    params: &FingerprintParams,
    key: &SecretKey,
    internal_id: &str,
) -> Result<FingerprintBits> {
    gen_fingerprint(key, internal_id.as_bytes(), params.fingerprint_len)
}

/// Inserts the fingerprint of `internal_id`; the result is not yet clamped.
pub fn insert_fingerprint(
    db: &RelationalDatabase,
    params: &FingerprintParams,
    key: &SecretKey,
    internal_id: &str,
) -> Result<(RelationalDatabase, Vec<MarkDecision>)> {
    let f = recipient_fingerprint(params, key, internal_id)?;
    let plan = MarkPlan::build(db, params, key);
    let out = plan.apply(db, &f)?;
    let decisions = plan.decisions(db, &f);
    Ok((out, decisions))
}

/// Clamps every code to its attribute's largest valid code.
pub fn postprocess_domain(mut db: RelationalDatabase) -> RelationalDatabase {
    let maxes: Vec<u32> = db.domains.iter().map(|d| d.max_code()).collect();
    for r in &mut db.records {
        for (v, &m) in r.entries.iter_mut().zip(&maxes) {
            *v = (*v).min(m);
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn key() -> SecretKey {
        SecretKey::new(b"fingerprinter-test-key".to_vec()).unwrap()
    }

    #[test]
    fn params_examples() {
        let a = FingerprintParams::from_epsilon(1.0, 1, 128).unwrap();
        assert_eq!(a.k, 1);
        assert!((a.p - 0.2689).abs() < 5e-5);
        let b = FingerprintParams::from_epsilon(2.0, 1, 128).unwrap();
        assert!((b.p - 0.1192).abs() < 5e-5);
        let c = FingerprintParams::from_epsilon(1.0, 4, 128).unwrap();
        assert_eq!(c.k, 3);
        assert!((c.p - 1.0 / ((1.0f64 / 3.0).exp() + 1.0)).abs() < 1e-15);
        assert!(FingerprintParams::from_epsilon(0.0, 1, 128).is_err());
        assert!(FingerprintParams::from_epsilon(1.0, 0, 128).is_err());
    }

    #[test]
    fn k_from_sensitivity() {
        for delta in 1u32..=1000 {
            assert_eq!(bits_for_sensitivity(delta), (delta as f64).log2().floor() as u32 + 1);
        }
    }

    #[test]
    fn p_override_bounds() {
        let base = FingerprintParams::from_epsilon(1.0, 1, 128).unwrap();
        assert!(base.with_p(0.3).is_ok());
        assert!(base.with_p(0.1).is_err());
        assert!(base.with_p(0.5).is_err());
    }

    #[test]
    fn p_is_below_half_for_every_positive_budget() {
        for e in [1e-9, 1e-3, 0.5, 1.0, 10.0, 100.0] {
            for d in [1, 3, 4, 100] {
                let p = FingerprintParams::from_epsilon(e, d, 128).unwrap().p;
                assert!(p > 0.0 && p < 0.5);
            }
        }
    }

    #[test]
    fn fingerprintable_set_sizes() {
        let db = synthetic::uniform_database(2, &[4], 1);
        assert_eq!(fingerprintable_set(&db, 3).len(), 4);
        let db = synthetic::uniform_database(1, &[5, 2, 3], 1);
        assert_eq!(fingerprintable_set(&db, 1).len(), 3);
        let nursery = synthetic::nursery_like();
        assert_eq!(fingerprintable_set(&nursery, 1).len(), 103_680);
    }

    #[test]
    fn vanishing_p_marks_nothing() {
        let db = synthetic::uniform_database(10, &[5, 5, 5], 3);
        let params = FingerprintParams::from_epsilon(50.0, 4, 128).unwrap().with_p(1e-6).unwrap();
        let (out, marks) = insert_fingerprint(&db, &params, &key(), "sp").unwrap();
        assert!(marks.is_empty());
        assert_eq!(out, db);
    }

    #[test]
    fn insertion_is_deterministic_and_keeps_keys() {
        let db = synthetic::uniform_database(300, &[5, 3, 4], 11);
        let params = FingerprintParams::from_epsilon(1.0, 4, 128).unwrap();
        let a = insert_fingerprint(&db, &params, &key(), "sp-1").unwrap();
        let b = insert_fingerprint(&db, &params, &key(), "sp-1").unwrap();
        assert_eq!(a, b);
        for (x, y) in a.0.records.iter().zip(&db.records) {
            assert_eq!(x.primary_key, y.primary_key);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn parallel_plan_equals_sequential() {
        let db = synthetic::uniform_database(500, &[5, 3, 4, 2], 5);
        let params = FingerprintParams::from_epsilon(2.0, 4, 128).unwrap();
        assert_eq!(
            MarkPlan::build(&db, &params, &key()),
            MarkPlan::build_sequential(&db, &params, &key())
        );
    }

    #[test]
    fn only_selected_bits_change() {
        let db = synthetic::uniform_database(400, &[5, 4, 3], 8);
        let params = FingerprintParams::from_epsilon(3.0, 4, 128).unwrap();
        let (out, marks) = insert_fingerprint(&db, &params, &key(), "sp").unwrap();
        let mut expected = db.clone();
        for m in &marks {
            assert!(m.bit >= 1 && m.bit <= params.k);
            assert!(m.index < 128);
            assert_eq!(m.mark, m.mask ^ recipient_fingerprint(&params, &key(), "sp").unwrap().bit(m.index));
            expected.records[m.row].entries[m.attribute as usize - 1] ^= u32::from(m.mark) << (m.bit - 1);
        }
        assert_eq!(out, expected);
    }

    #[test]
    fn selection_and_mark_frequencies() {
        // 10^5 positions: 12500 rows of 8 binary attributes.
        let db = synthetic::uniform_database(12_500, &[2; 8], 2);
        for eps in [1.0, 2.0, 3.0] {
            let params = FingerprintParams::from_epsilon(eps, 1, 128).unwrap();
            let (_, marks) = insert_fingerprint(&db, &params, &key(), "sp").unwrap();
            let sel = marks.len() as f64 / 100_000.0;
            assert!((sel - params.selection_probability()).abs() < 0.01, "eps {eps}: {sel}");
            assert!(params.selection_probability() >= 2.0 * params.p - 1e-12 || params.selection_modulus() == 1);
            let ones = marks.iter().filter(|m| m.mark == 1).count() as f64 / marks.len() as f64;
            assert!((ones - 0.5).abs() < 0.01 + 3.0 * (0.25 / marks.len() as f64).sqrt(), "{ones}");
        }
    }

    #[test]
    fn plan_density_matches_materialized_difference() {
        let db = synthetic::uniform_database(300, &[5, 3, 4], 4);
        let params = FingerprintParams::from_epsilon(1.0, 4, 128).unwrap();
        let plan = MarkPlan::build(&db, &params, &key());
        let f = recipient_fingerprint(&params, &key(), "x").unwrap();
        let out = plan.apply(&db, &f).unwrap();
        let direct: u64 = out
            .records
            .iter()
            .zip(&db.records)
            .flat_map(|(a, b)| a.entries.iter().zip(&b.entries).map(|(x, y)| u64::from(x.abs_diff(*y))))
            .sum();
        assert_eq!(plan.density(&db, &f).unwrap(), direct);
    }

    #[test]
    fn clamp_examples() {
        let mut db = synthetic::uniform_database(3, &[5], 1);
        db.records[0].entries[0] = 5;
        db.records[1].entries[0] = 7;
        db.records[2].entries[0] = 2;
        let out = postprocess_domain(db);
        assert_eq!(out.column(0), vec![4, 4, 2]);
        let clean = synthetic::uniform_database(50, &[5, 3], 9);
        assert_eq!(postprocess_domain(clean.clone()), clean);
    }

    #[test]
    fn changed_entry_rate_on_nursery_at_unit_budget() {
        // Oracle: with K = 1 each entry is touched at its least significant bit
        // with the selection probability s, the mark bit is a fair coin, and a
        // flip that leaves the domain is clamped back to the original code.
        let db = synthetic::nursery_like();
        let params = FingerprintParams::from_epsilon(1.0, 1, 128).unwrap();
        let s = params.selection_probability();
        let mut expected = 0.0;
        for d in &db.domains {
            let stays = (0..d.len() as u32).filter(|&v| (v ^ 1) <= d.max_code()).count();
            expected += s * 0.5 * stays as f64 / d.len() as f64;
        }
        expected /= db.domains.len() as f64;
        let (out, _) = insert_fingerprint(&db, &params, &key(), "sp").unwrap();
        let out = postprocess_domain(out);
        let changed = out
            .records
            .iter()
            .zip(&db.records)
            .flat_map(|(a, b)| a.entries.iter().zip(&b.entries).map(|(x, y)| x != y))
            .filter(|&c| c)
            .count() as f64
            / (db.len() * db.domains.len()) as f64;
        assert!((changed - expected).abs() < 0.02, "{changed} vs {expected}");
    }
}
