//! Attack simulations against a fingerprinted table.
//!
//! All attacks keep primary keys and the schema. The bit-level attacks clamp
//! their output to the domains, as a released table would be.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::RelationalDatabase;
use crate::error::{Error, Result};
use crate::fingerprinter::{postprocess_domain, touchable_bits};
use crate::utility::{empirical_distributions, Distributions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    RandomFlipping,
    Subset,
    Correlation,
}

/// Which attack to run and its parameters. Only the chosen kind's parameter is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub gamma_rnd: f64,
    pub gamma_sub: f64,
    pub tau: f64,
    pub rng_seed: u64,
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl AttackConfig {
    pub fn random_flipping(gamma_rnd: f64, rng_seed: u64) -> Self {
        Self {
            kind: AttackKind::RandomFlipping,
            gamma_rnd,
            gamma_sub: 1.0,
            tau: 0.0,
            rng_seed,
        }
    }

    pub fn subset(gamma_sub: f64, rng_seed: u64) -> Self {
        Self {
            kind: AttackKind::Subset,
            gamma_rnd: 0.0,
            gamma_sub,
            tau: 0.0,
            rng_seed,
        }
    }

    pub fn correlation(tau: f64, rng_seed: u64) -> Self {
        Self {
            kind: AttackKind::Correlation,
            gamma_rnd: 0.0,
            gamma_sub: 1.0,
            tau,
            rng_seed,
        }
    }

    /// Runs the configured attack. `k` is the number of low bits the attacker touches.
    pub fn apply(
        &self,
        db: &RelationalDatabase,
        k: u32,
        reference: Option<&Distributions>,
    ) -> Result<RelationalDatabase> {
        match self.kind {
            AttackKind::RandomFlipping => random_flipping(db, k, self.gamma_rnd, self.rng_seed),
            AttackKind::Subset => subset_attack(db, self.gamma_sub, self.rng_seed),
            AttackKind::Correlation => {
                let reference = reference.ok_or_else(|| {
                    Error::Config("correlation attack needs reference joint distributions".into())
                })?;
                correlation_attack(db, reference, self.tau, k, self.rng_seed)
            }
        }
    }
}

/// Flips each of the last `min(K, K_t)` bits of every entry with probability
/// `gamma`. No clamping.
pub fn flip_bits(db: &RelationalDatabase, k: u32, gamma: f64, rng_seed: u64) -> Result<RelationalDatabase> {
    check_probability("gamma_rnd", gamma)?;
    let widths: Vec<u32> = (0..db.attribute_count()).map(|t| touchable_bits(db, k, t)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut out = db.clone();
    for r in &mut out.records {
        for (v, &w) in r.entries.iter_mut().zip(&widths) {
            for bit in 0..w {
                if rng.gen_bool(gamma) {
                    *v ^= 1 << bit;
                }
            }
        }
    }
    Ok(out)
}

/// Random bit flipping followed by clamping to the domains.
pub fn random_flipping(db: &RelationalDatabase, k: u32, gamma: f64, rng_seed: u64) -> Result<RelationalDatabase> {
    Ok(postprocess_domain(flip_bits(db, k, gamma, rng_seed)?))
}

/// Keeps each row independently with probability `gamma_sub`.
pub fn subset_attack(db: &RelationalDatabase, gamma_sub: f64, rng_seed: u64) -> Result<RelationalDatabase> {
    check_probability("gamma_sub", gamma_sub)?;
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut out = db.empty_like();
    out.records = db
        .records
        .iter()
        .filter(|_| rng.gen_bool(gamma_sub))
        .cloned()
        .collect();
    Ok(out)
}

/// `qualified[t][π]`: whether value `π` of attribute `t` deviates by at least
/// `tau` from the reference in every joint cell `(z, ω)`, `z != t`.
///
/// With a single attribute there is no cell to compare and every value qualifies.
pub fn qualified_values(
    db: &RelationalDatabase,
    reference: &Distributions,
    tau: f64,
) -> Result<Vec<Vec<bool>>> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("tau must be non-negative, got {tau}")));
    }
    let n_attrs = db.attribute_count();
    if reference.marginals.len() != n_attrs {
        return Err(Error::Config(format!(
            "reference describes {} attributes, table has {n_attrs}",
            reference.marginals.len()
        )));
    }
    let observed = empirical_distributions(db)?;
    let mut out = Vec::with_capacity(n_attrs);
    for t in 0..n_attrs {
        let size = db.domains[t].len();
        let mut row = vec![true; size];
        for z in (0..n_attrs).filter(|&z| z != t) {
            let refj = reference.joint(t, z).ok_or_else(|| {
                Error::Config(format!("reference lacks the joint of attributes {t} and {z}"))
            })?;
            let obs = observed.joint(t, z).expect("observed joints are complete");
            let z_size = db.domains[z].len();
            if refj.len() != size || refj.iter().any(|r| r.len() != z_size) {
                return Err(Error::Config(format!(
                    "reference joint of attributes {t} and {z} has the wrong shape"
                )));
            }
            for (pi, q) in row.iter_mut().enumerate() {
                for omega in 0..z_size {
                    if (obs[pi][omega] - refj[pi][omega]).abs() < tau {
                        *q = false;
                    }
                }
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Randomizes the last `K` bits (each with probability 1/2) of every entry
/// whose value qualifies under [`qualified_values`], then clamps.
pub fn correlation_attack(
    db: &RelationalDatabase,
    reference: &Distributions,
    tau: f64,
    k: u32,
    rng_seed: u64,
) -> Result<RelationalDatabase> {
    let qualified = qualified_values(db, reference, tau)?;
    let widths: Vec<u32> = (0..db.attribute_count()).map(|t| touchable_bits(db, k, t)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut out = db.clone();
    for r in &mut out.records {
        for (t, v) in r.entries.iter_mut().enumerate() {
            let hit = qualified[t].get(*v as usize).copied().unwrap_or(false);
            if !hit {
                continue;
            }
            for bit in 0..widths[t] {
                if rng.gen_bool(0.5) {
                    *v ^= 1 << bit;
                }
            }
        }
    }
    Ok(postprocess_domain(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn changed_bits(a: &RelationalDatabase, b: &RelationalDatabase) -> u32 {
        a.records
            .iter()
            .zip(&b.records)
            .flat_map(|(x, y)| x.entries.iter().zip(&y.entries).map(|(u, v)| (u ^ v).count_ones()))
            .sum()
    }

    #[test]
    fn zero_gamma_is_identity() {
        let db = synthetic::uniform_database(100, &[5, 3], 1);
        assert_eq!(random_flipping(&db, 3, 0.0, 5).unwrap(), db);
        assert!(random_flipping(&db, 3, 1.5, 5).is_err());
    }

    #[test]
    fn full_gamma_flips_every_last_bit() {
        let db = synthetic::uniform_database(100, &[4, 2], 1);
        let out = flip_bits(&db, 1, 1.0, 5).unwrap();
        for (a, b) in out.records.iter().zip(&db.records) {
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert_eq!(x ^ y, 1);
            }
        }
    }

    #[test]
    fn flip_fraction_matches_gamma() {
        let db = synthetic::uniform_database(12_500, &[2; 8], 3);
        let out = flip_bits(&db, 1, 0.8, 9).unwrap();
        let frac = f64::from(changed_bits(&db, &out)) / 100_000.0;
        assert!((frac - 0.8).abs() < 0.01, "{frac}");
    }

    #[test]
    fn double_flip_composes() {
        let db = synthetic::uniform_database(12_500, &[2; 8], 3);
        let q = 0.3;
        let once = flip_bits(&db, 1, q, 1).unwrap();
        let twice = flip_bits(&once, 1, q, 2).unwrap();
        let frac = f64::from(changed_bits(&db, &twice)) / 100_000.0;
        assert!((frac - 2.0 * q * (1.0 - q)).abs() < 0.01, "{frac}");
    }

    #[test]
    fn attacks_preserve_keys() {
        let db = synthetic::uniform_database(500, &[5, 3, 4], 3);
        let flipped = random_flipping(&db, 3, 0.5, 1).unwrap();
        flipped.validate().unwrap();
        for (a, b) in flipped.records.iter().zip(&db.records) {
            assert_eq!(a.primary_key, b.primary_key);
        }
        let sub = subset_attack(&db, 0.5, 1).unwrap();
        let index = db.key_index();
        for r in &sub.records {
            assert_eq!(&db.records[index[r.primary_key.as_str()]], r);
        }
    }

    #[test]
    fn subset_extremes_and_count() {
        let db = synthetic::uniform_database(10_000, &[3], 1);
        assert_eq!(subset_attack(&db, 1.0, 2).unwrap(), db);
        assert!(subset_attack(&db, 0.0, 2).unwrap().is_empty());
        let kept = subset_attack(&db, 0.5, 2).unwrap().len() as i64;
        assert!((kept - 5000).abs() <= 150, "{kept}");
    }

    #[test]
    fn correlation_extremes() {
        let db = synthetic::correlated_binary(2000, 3, 0.7, 4);
        let reference = empirical_distributions(&db).unwrap();
        assert_eq!(correlation_attack(&db, &reference, 1.0, 1, 3).unwrap(), db);
        // tau = 0: every entry qualifies and its bit becomes a fair coin.
        let out = correlation_attack(&db, &reference, 0.0, 1, 3).unwrap();
        let frac = f64::from(changed_bits(&db, &out)) / 6000.0;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn correlation_requires_complete_reference() {
        let db = synthetic::correlated_binary(100, 3, 0.7, 4);
        let mut reference = empirical_distributions(&db).unwrap();
        reference.joints.pop();
        assert!(matches!(
            correlation_attack(&db, &reference, 0.1, 1, 3),
            Err(Error::Config(_))
        ));
        let cfg = AttackConfig::correlation(0.1, 1);
        assert!(matches!(cfg.apply(&db, 1, None), Err(Error::Config(_))));
    }

    #[test]
    fn single_attribute_qualifies_vacuously() {
        let db = synthetic::uniform_database(50, &[2], 1);
        let reference = empirical_distributions(&db).unwrap();
        let q = qualified_values(&db, &reference, 0.9).unwrap();
        assert_eq!(q, vec![vec![true, true]]);
    }

    #[test]
    fn reproducible_from_seed() {
        let db = synthetic::uniform_database(300, &[5, 3], 1);
        for cfg in [AttackConfig::random_flipping(0.4, 8), AttackConfig::subset(0.4, 8)] {
            assert_eq!(cfg.apply(&db, 3, None).unwrap(), cfg.apply(&db, 3, None).unwrap());
        }
    }
}
