//! Task-independent utility metrics and the two-stage baseline.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto_rand::{Prs, SecretKey, Seed};
use crate::datamodel::RelationalDatabase;
use crate::error::{Error, Result};
use crate::fingerprinter::{postprocess_domain, recipient_fingerprint, touchable_bits, FingerprintParams};

/// Pairwise joint distribution of attributes `first < second`, indexed `[a][b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub first: usize,
    pub second: usize,
    pub probs: Vec<Vec<f64>>,
}

/// Marginals of every attribute and joints of every attribute pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub marginals: Vec<Vec<f64>>,
    pub joints: Vec<JointTable>,
}

impl Distributions {
    /// Joint of `(t, z)` oriented as `[value of t][value of z]`.
    pub fn joint(&self, t: usize, z: usize) -> Option<Vec<Vec<f64>>> {
        if t == z {
            return None;
        }
        let (a, b) = (t.min(z), t.max(z));
        let table = self.joints.iter().find(|j| j.first == a && j.second == b)?;
        if t == a {
            Some(table.probs.clone())
        } else {
            let rows = table.probs.len();
            let cols = table.probs.first().map_or(0, Vec::len);
            Some((0..cols).map(|j| (0..rows).map(|i| table.probs[i][j]).collect()).collect())
        }
    }
}

fn in_domain_code(db: &RelationalDatabase, t: usize, v: u32) -> Result<usize> {
    if db.domains[t].contains(v) {
        Ok(v as usize)
    } else {
        Err(Error::Precondition(format!(
            "code {v} outside the domain of '{}'; clamp before measuring",
            db.domains[t].name
        )))
    }
}

/// Frequency estimates of all marginals and pairwise joints.
pub fn empirical_distributions(db: &RelationalDatabase) -> Result<Distributions> {
    if db.is_empty() {
        return Err(Error::Precondition("distributions of an empty table".into()));
    }
    let n = db.len() as f64;
    let t_count = db.attribute_count();
    let sizes: Vec<usize> = db.domains.iter().map(|d| d.len()).collect();
    let mut marginals: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut joints = Vec::new();
    for a in 0..t_count {
        for b in a + 1..t_count {
            joints.push(JointTable {
                first: a,
                second: b,
                probs: vec![vec![0.0; sizes[b]]; sizes[a]],
            });
        }
    }
    for r in &db.records {
        let codes = (0..t_count)
            .map(|t| in_domain_code(db, t, r.entries[t]))
            .collect::<Result<Vec<_>>>()?;
        for (t, &c) in codes.iter().enumerate() {
            marginals[t][c] += 1.0;
        }
        for j in &mut joints {
            j.probs[codes[j.first]][codes[j.second]] += 1.0;
        }
    }
    for m in &mut marginals {
        m.iter_mut().for_each(|x| *x /= n);
    }
    for j in &mut joints {
        j.probs.iter_mut().flatten().for_each(|x| *x /= n);
    }
    Ok(Distributions { marginals, joints })
}

/// Rows of `shared` in the order of `original`, requiring identical key sets.
fn align<'a>(
    original: &'a RelationalDatabase,
    shared: &'a RelationalDatabase,
) -> Result<Vec<(&'a [u32], &'a [u32])>> {
    if original.attribute_count() != shared.attribute_count() {
        return Err(Error::Alignment("tables have different attribute counts".into()));
    }
    if original.len() != shared.len() {
        return Err(Error::Alignment(format!(
            "tables have {} and {} rows",
            original.len(),
            shared.len()
        )));
    }
    let index = shared.key_index();
    original
        .records
        .iter()
        .map(|r| {
            let j = index.get(r.primary_key.as_str()).ok_or_else(|| {
                Error::Alignment(format!("key '{}' missing from shared table", r.primary_key))
            })?;
            Ok((r.entries.as_slice(), shared.records[*j].entries.as_slice()))
        })
        .collect()
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// `Var(shared_t) - Var(original_t)` per attribute, population variance of codes.
pub fn variance_change(original: &RelationalDatabase, shared: &RelationalDatabase) -> Result<Vec<f64>> {
    let rows = align(original, shared)?;
    Ok((0..original.attribute_count())
        .map(|t| {
            let after = population_variance(rows.iter().map(|(_, s)| f64::from(s[t])));
            let before = population_variance(rows.iter().map(|(o, _)| f64::from(o[t])));
            after - before
        })
        .collect())
}

/// `||shared - original||_{1,1}` over key-aligned rows.
pub fn fingerprint_density(original: &RelationalDatabase, shared: &RelationalDatabase) -> Result<u64> {
    Ok(align(original, shared)?
        .iter()
        .map(|(o, s)| o.iter().zip(*s).map(|(a, b)| u64::from(a.abs_diff(*b))).sum::<u64>())
        .sum())
}

/// Fraction of entries whose code differs.
pub fn changed_entry_fraction(original: &RelationalDatabase, shared: &RelationalDatabase) -> Result<f64> {
    let rows = align(original, shared)?;
    let total = rows.len() * original.attribute_count();
    if total == 0 {
        return Ok(0.0);
    }
    let changed = rows
        .iter()
        .map(|(o, s)| o.iter().zip(*s).filter(|(a, b)| a != b).count())
        .sum::<usize>();
    Ok(changed as f64 / total as f64)
}

/// Conjunctive equality selection returning primary keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub predicates: Vec<(String, String)>,
}

impl QuerySpec {
    fn resolve(&self, db: &RelationalDatabase) -> Result<Vec<(usize, u32)>> {
        self.predicates
            .iter()
            .map(|(attr, value)| {
                let t = db
                    .domains
                    .iter()
                    .position(|d| &d.name == attr)
                    .ok_or_else(|| Error::Schema(format!("query names unknown attribute '{attr}'")))?;
                let code = db.domains[t].code_of(value).ok_or_else(|| {
                    Error::Schema(format!("query value '{value}' not in the domain of '{attr}'"))
                })?;
                Ok((t, code))
            })
            .collect()
    }

    /// Keys of the rows satisfying every predicate.
    pub fn select<'a>(&self, db: &'a RelationalDatabase) -> Result<HashSet<&'a str>> {
        let preds = self.resolve(db)?;
        Ok(db
            .records
            .iter()
            .filter(|r| preds.iter().all(|&(t, c)| r.entries[t] == c))
            .map(|r| r.primary_key.as_str())
            .collect())
    }
}

/// `|Q(shared) ∩ Q(original)| / |Q(original)|`.
///
/// When the original result is empty the accuracy is 1 if the shared result
/// is also empty and 0 otherwise.
pub fn query_accuracy(
    original: &RelationalDatabase,
    shared: &RelationalDatabase,
    query: &QuerySpec,
) -> Result<f64> {
    let truth = query.select(original)?;
    let got = query.select(shared)?;
    if truth.is_empty() {
        return Ok(if got.is_empty() { 1.0 } else { 0.0 });
    }
    Ok(truth.intersection(&got).count() as f64 / truth.len() as f64)
}

/// k-ary randomized response on every entry.
///
/// A value is kept with probability `e^ε/(e^ε+k-1)`, otherwise replaced by a
/// uniform draw among the other `k-1` values.
pub fn randomized_response(db: &RelationalDatabase, epsilon: f64, rng_seed: u64) -> Result<RelationalDatabase> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let sizes: Vec<u32> = db.domains.iter().map(|d| d.len() as u32).collect();
    let mut out = db.clone();
    for r in &mut out.records {
        for (v, &k) in r.entries.iter_mut().zip(&sizes) {
            if k == 1 {
                continue;
            }
            let keep = if epsilon.is_infinite() {
                1.0
            } else {
                let e = epsilon.exp();
                e / (e + f64::from(k) - 1.0)
            };
            if !rng.gen_bool(keep.min(1.0)) {
                let other = rng.gen_range(0..k - 1);
                *v = if other >= *v { other + 1 } else { other };
            }
        }
    }
    Ok(out)
}

/// Conventional fingerprinting with a direct marking fraction `lambda`.
///
/// A position is selected when `U_1(s) / 2^64 < lambda`; its bit is set to
/// `x ^ f(l)` rather than XORed. The result is clamped.
pub fn fraction_fingerprint(
    db: &RelationalDatabase,
    k: u32,
    lambda: f64,
    key: &SecretKey,
    params: &FingerprintParams,
    internal_id: &str,
) -> Result<RelationalDatabase> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("marking fraction must lie in [0, 1], got {lambda}")));
    }
    let f = recipient_fingerprint(params, key, internal_id)?;
    let prs = Prs::new(key);
    let threshold = lambda * 2f64.powi(64);
    let widths: Vec<u32> = (0..db.attribute_count()).map(|t| touchable_bits(db, k, t)).collect();
    let mut out = db.clone();
    for r in &mut out.records {
        for (t, &w) in widths.iter().enumerate() {
            for bit in 1..=w {
                let [u1, u2, u3] = prs.triple(&Seed::new(&r.primary_key, t as u32 + 1, bit));
                if (u1 as f64) < threshold {
                    let b = ((u2 & 1) as u8) ^ f.bit((u3 % params.fingerprint_len as u64) as usize);
                    let mask = 1u32 << (bit - 1);
                    r.entries[t] = (r.entries[t] & !mask) | (u32::from(b) << (bit - 1));
                }
            }
        }
    }
    Ok(postprocess_domain(out))
}

/// Local randomized response on the whole table, then fingerprinting with
/// marking fraction `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_baseline(
    db: &RelationalDatabase,
    epsilon: f64,
    key: &SecretKey,
    params: &FingerprintParams,
    internal_id: &str,
    lambda: f64,
    rng_seed: u64,
) -> Result<RelationalDatabase> {
    let perturbed = randomized_response(db, epsilon, rng_seed)?;
    fraction_fingerprint(&perturbed, params.k, lambda, key, params, internal_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{AttributeDomain, Record};
    use crate::fingerprinter::insert_fingerprint;
    use crate::synthetic;

    fn two_rows(a: u32, b: u32) -> RelationalDatabase {
        let d = AttributeDomain::from_labels("v", &["0", "1", "2", "3"]).unwrap();
        let recs = vec![
            Record { primary_key: "x".into(), entries: vec![a], label: None },
            Record { primary_key: "y".into(), entries: vec![b], label: None },
        ];
        RelationalDatabase::new(vec![d], recs, "id", None).unwrap()
    }

    #[test]
    fn variance_change_by_hand() {
        let original = two_rows(1, 1);
        let shared = two_rows(1, 2);
        assert_eq!(variance_change(&original, &original).unwrap(), vec![0.0]);
        // Var{1,2} = 0.25, Var{1,1} = 0.
        assert_eq!(variance_change(&original, &shared).unwrap(), vec![0.25]);
    }

    #[test]
    fn density_examples() {
        let original = two_rows(0, 1);
        assert_eq!(fingerprint_density(&original, &original).unwrap(), 0);
        assert_eq!(fingerprint_density(&original, &two_rows(3, 1)).unwrap(), 3);
    }

    #[test]
    fn alignment_is_by_key() {
        let original = two_rows(0, 1);
        let mut swapped = two_rows(0, 1);
        swapped.records.reverse();
        assert_eq!(fingerprint_density(&original, &swapped).unwrap(), 0);
        let mut other = two_rows(0, 1);
        other.records[0].primary_key = "z".into();
        assert!(matches!(fingerprint_density(&original, &other), Err(Error::Alignment(_))));
        other.records.pop();
        assert!(matches!(variance_change(&original, &other), Err(Error::Alignment(_))));
    }

    #[test]
    fn translation_consistency() {
        let a = synthetic::uniform_database(200, &[6, 6], 1);
        let b = synthetic::uniform_database(200, &[6, 6], 2);
        let shift = |db: &RelationalDatabase| {
            let mut out = db.clone();
            for d in &mut out.domains {
                d.values.extend(["x", "y"].map(String::from));
            }
            for r in &mut out.records {
                r.entries.iter_mut().for_each(|v| *v += 2);
            }
            out
        };
        let dv = variance_change(&a, &b).unwrap();
        let dv2 = variance_change(&shift(&a), &shift(&b)).unwrap();
        for (x, y) in dv.iter().zip(&dv2) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(fingerprint_density(&a, &b).unwrap(), fingerprint_density(&shift(&a), &shift(&b)).unwrap());
    }

    #[test]
    fn distributions_sum_to_one() {
        let db = synthetic::uniform_database(4000, &[4, 3, 2], 5);
        let d = empirical_distributions(&db).unwrap();
        for m in &d.marginals {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for j in &d.joints {
            assert!((j.probs.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for &x in &d.marginals[0] {
            assert!((x - 0.25).abs() < 0.03);
        }
        // independent columns: joint close to the product of marginals
        let j = d.joint(0, 1).unwrap();
        for a in 0..4 {
            for b in 0..3 {
                assert!((j[a][b] - d.marginals[0][a] * d.marginals[1][b]).abs() < 0.02);
            }
        }
        let jt = d.joint(1, 0).unwrap();
        assert_eq!(jt[2][3], j[3][2]);
    }

    #[test]
    fn single_row_point_masses() {
        let db = synthetic::uniform_database(1, &[3, 3], 5);
        let d = empirical_distributions(&db).unwrap();
        for (t, m) in d.marginals.iter().enumerate() {
            let v = db.records[0].entries[t] as usize;
            assert_eq!(m[v], 1.0);
        }
        assert!(empirical_distributions(&db.empty_like()).is_err());
    }

    #[test]
    fn query_accuracy_conventions() {
        let db = synthetic::nursery_like();
        let q = QuerySpec {
            predicates: vec![("children".into(), "more".into()), ("social".into(), "slightly_prob".into())],
        };
        assert_eq!(query_accuracy(&db, &db, &q).unwrap(), 1.0);
        let small = two_rows(0, 0);
        let nothing = QuerySpec { predicates: vec![("v".into(), "3".into())] };
        assert_eq!(query_accuracy(&small, &small, &nothing).unwrap(), 1.0);
        assert_eq!(query_accuracy(&small, &two_rows(3, 0), &nothing).unwrap(), 0.0);
        let bad = QuerySpec { predicates: vec![("nope".into(), "1".into())] };
        assert!(query_accuracy(&small, &small, &bad).is_err());
    }

    #[test]
    fn query_accuracy_improves_with_budget() {
        let db = synthetic::nursery_like();
        let key = SecretKey::new(b"utility-test-key-0000".to_vec()).unwrap();
        let q = QuerySpec {
            predicates: vec![("children".into(), "more".into()), ("social".into(), "slightly_prob".into())],
        };
        let acc = |eps: f64| {
            let params = FingerprintParams::from_epsilon(eps, 1, 128).unwrap();
            let (out, _) = insert_fingerprint(&db, &params, &key, "sp").unwrap();
            query_accuracy(&db, &postprocess_domain(out), &q).unwrap()
        };
        assert!(acc(2.0) > acc(0.25));
    }

    #[test]
    fn randomized_response_keep_rate() {
        let db = synthetic::uniform_database(20_000, &[5], 1);
        let out = randomized_response(&db, 1.0, 3).unwrap();
        let kept = 1.0 - changed_entry_fraction(&db, &out).unwrap();
        let e = 1f64.exp();
        assert!((kept - e / (e + 4.0)).abs() < 0.01, "{kept}");
        out.validate().unwrap();
        assert_eq!(randomized_response(&db, f64::INFINITY, 3).unwrap(), db);
    }

    #[test]
    fn baseline_without_perturbation_is_plain_fingerprinting() {
        let db = synthetic::uniform_database(500, &[4, 3], 1);
        let key = SecretKey::new(b"utility-test-key-0000".to_vec()).unwrap();
        let params = FingerprintParams::from_epsilon(1.0, 1, 128).unwrap();
        let base = two_stage_baseline(&db, f64::INFINITY, &key, &params, "sp", 0.2, 1).unwrap();
        let plain = fraction_fingerprint(&db, 1, 0.2, &key, &params, "sp").unwrap();
        assert_eq!(base, plain);
        assert_eq!(fraction_fingerprint(&db, 1, 0.0, &key, &params, "sp").unwrap(), db);
    }
}
