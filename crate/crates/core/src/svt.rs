//! Multi-recipient sharing with a noisy density threshold, and the budget
//! arithmetic around it.
//!
//! For recipient `c`, trial `i` draws the internal id `Hash(key | c | i)`,
//! fingerprints the table with budget ε, and releases the copy only if its
//! pre-clamp density plus `Lap(Δ/ε₂)` noise reaches `Γ` plus `Lap(Δ/ε₃)` noise.

use serde::{Deserialize, Serialize};

use crate::crypto_rand::{internal_id, LaplaceSampler, SecretKey};
use crate::datamodel::RelationalDatabase;
use crate::error::{Error, Result};
use crate::fingerprinter::{postprocess_domain, recipient_fingerprint, FingerprintParams, MarkPlan};

pub const DEFAULT_MAX_TRIALS: usize = 10_000;

/// Which table size multiplies the default threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaBasis {
    /// `N·K`, as used for the reported experiments.
    #[default]
    Nk,
    /// `N·T`, matching the expected-density bound.
    Nt,
}

/// `Γ = (1/2 + 1/√12)·Δ·p·N·m`, with `m` either `K` or `T`.
pub fn default_gamma(delta: u32, p: f64, n: usize, multiplier: usize) -> f64 {
    (0.5 + 1.0 / 12f64.sqrt()) * f64::from(delta) * p * n as f64 * multiplier as f64
}

/// Parameters of a sharing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvtConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub epsilon2: f64,
    pub epsilon3: f64,
    pub delta: u32,
    pub recipients: usize,
    pub delta_prime: f64,
    pub max_trials: usize,
    pub fingerprint_len: usize,
    pub noise_seed: u64,
}

impl SvtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("threshold must be non-negative, got {}", self.gamma)));
        }
        for (name, v) in [("epsilon", self.epsilon), ("epsilon2", self.epsilon2), ("epsilon3", self.epsilon3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.recipients == 0 {
            return Err(Error::Parameter("at least one recipient is required".into()));
        }
        if !(self.delta_prime > 0.0 && self.delta_prime < 1.0) {
            return Err(Error::Parameter(format!("delta' must lie in (0, 1), got {}", self.delta_prime)));
        }
        if self.max_trials == 0 {
            return Err(Error::Parameter("trial cap must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint_params(&self) -> Result<FingerprintParams> {
        FingerprintParams::from_epsilon(self.epsilon, self.delta, self.fingerprint_len)
    }
}

/// One noisy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub i: u64,
    pub internal_id: String,
    pub density: u64,
    pub mu: f64,
    pub rho: f64,
    pub passed: bool,
}

/// Transcript of one recipient's search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipientRecord {
    pub c: u64,
    pub trials: Vec<Trial>,
    pub internal_id: String,
}

impl RecipientRecord {
    pub fn released_trial(&self) -> &Trial {
        self.trials.last().expect("a record always ends with its passing trial")
    }
}

/// Full key-holder record of a sharing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingLedger {
    pub config: SvtConfig,
    pub recipients: Vec<RecipientRecord>,
    pub shared: usize,
    pub total_trials: usize,
    pub epsilon0: f64,
    pub delta0: f64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the noise stream for recipient `c`; `stream` 1 is μ, 2 is ρ.
pub fn noise_stream_seed(noise_seed: u64, c: u64, stream: u64) -> u64 {
    mix64(mix64(noise_seed ^ mix64(c)) ^ stream)
}

/// Runs the noisy-threshold search for recipient `c` against a prebuilt plan.
pub fn determine_internal_id_with_plan(
    db: &RelationalDatabase,
    plan: &MarkPlan,
    params: &FingerprintParams,
    c: u64,
    config: &SvtConfig,
    key: &SecretKey,
) -> Result<RecipientRecord> {
    let scale = f64::from(config.delta);
    let mut mu_rng = LaplaceSampler::new(scale / config.epsilon2, noise_stream_seed(config.noise_seed, c, 1))?;
    let mut rho_rng = LaplaceSampler::new(scale / config.epsilon3, noise_stream_seed(config.noise_seed, c, 2))?;
    let mut trials = Vec::new();
    for i in 1..=config.max_trials as u64 {
        let id = internal_id(key, c, i)?;
        let f = recipient_fingerprint(params, key, &id)?;
        let density = plan.density(db, &f)?;
        let mu = mu_rng.sample();
        let rho = rho_rng.sample();
        let passed = density as f64 + mu >= config.gamma + rho;
        trials.push(Trial {
            i,
            internal_id: id.clone(),
            density,
            mu,
            rho,
            passed,
        });
        if passed {
            return Ok(RecipientRecord {
                c,
                trials,
                internal_id: id,
            });
        }
    }
    Err(Error::NonTermination {
        trials: config.max_trials,
    })
}

/// Noisy-threshold search for recipient `c`.
pub fn determine_internal_id(
    db: &RelationalDatabase,
    c: u64,
    config: &SvtConfig,
    key: &SecretKey,
) -> Result<RecipientRecord> {
    config.validate()?;
    let params = config.fingerprint_params()?;
    let plan = MarkPlan::build(db, &params, key);
    determine_internal_id_with_plan(db, &plan, &params, c, config, key)
}

/// Runs the search for recipients `1..=C` without materializing releases.
pub fn run_sharing(db: &RelationalDatabase, config: &SvtConfig, key: &SecretKey) -> Result<(SharingLedger, MarkPlan)> {
    config.validate()?;
    let params = config.fingerprint_params()?;
    let plan = MarkPlan::build(db, &params, key);
    let mut recipients = Vec::with_capacity(config.recipients);
    for c in 1..=config.recipients as u64 {
        recipients.push(determine_internal_id_with_plan(db, &plan, &params, c, config, key)?);
    }
    let total_trials = recipients.iter().map(|r| r.trials.len()).sum();
    let shared = recipients.len();
    let mut ledger = SharingLedger {
        config: *config,
        recipients,
        shared,
        total_trials,
        epsilon0: 0.0,
        delta0: 0.0,
    };
    let (e0, d0) = ledger_privacy(&ledger, config);
    ledger.epsilon0 = e0;
    ledger.delta0 = d0;
    Ok((ledger, plan))
}

/// Releases one clamped fingerprinted copy per recipient, with the ledger.
pub fn share_multi(
    db: &RelationalDatabase,
    config: &SvtConfig,
    key: &SecretKey,
) -> Result<(Vec<RelationalDatabase>, SharingLedger)> {
    let (ledger, plan) = run_sharing(db, config, key)?;
    let params = config.fingerprint_params()?;
    let copies = ledger
        .recipients
        .iter()
        .map(|r| {
            let f = recipient_fingerprint(&params, key, &r.internal_id)?;
            Ok(postprocess_domain(plan.apply(db, &f)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((copies, ledger))
}

/// Advanced composition of `C` (ε, δ) mechanisms:
/// `(√(2C ln(1/δ'))·ε + C·ε·(e^ε − 1), C·δ + δ')`.
pub fn advanced_composition(epsilon: f64, delta: f64, c: usize, delta_prime: f64) -> (f64, f64) {
    let cf = c as f64;
    let s = (2.0 * cf * (1.0 / delta_prime).ln()).sqrt();
    (s * epsilon + cf * epsilon * epsilon.exp_m1(), cf * delta + delta_prime)
}

/// Cumulative `(ε₀, δ₀)` of a sharing run, using the number of copies released.
pub fn ledger_privacy(ledger: &SharingLedger, config: &SvtConfig) -> (f64, f64) {
    sharing_totals(ledger.shared, config.epsilon, config.epsilon2 + config.epsilon3, config.delta_prime)
}

/// `ε₀ = √(2C ln(1/δ'))(ε + x) + C(ε(e^ε − 1) + x(e^x − 1))`, `δ₀ = 2δ'`,
/// where `x = ε₂ + ε₃`. `C = 0` gives `(0, 2δ')`.
pub fn sharing_totals(c: usize, epsilon: f64, x: f64, delta_prime: f64) -> (f64, f64) {
    let cf = c as f64;
    let s = (2.0 * cf * (1.0 / delta_prime).ln()).sqrt();
    (
        s * (epsilon + x) + cf * (epsilon * epsilon.exp_m1() + x * x.exp_m1()),
        2.0 * delta_prime,
    )
}

/// Root of the budget equation and its equal split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub comparison_budget: f64,
    pub epsilon2: f64,
    pub epsilon3: f64,
    pub residual: f64,
}

fn bisect(f: impl Fn(f64) -> f64, target: f64, mut hi: f64) -> f64 {
    let mut lo = 0.0;
    while f(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Largest insertion budget ε for which some positive comparison budget fits
/// within `ε₀`.
pub fn max_feasible_epsilon(epsilon0: f64, delta_prime: f64, c: usize) -> f64 {
    let cf = c as f64;
    let s = (2.0 * cf * (1.0 / delta_prime).ln()).sqrt();
    bisect(|e| (s - cf) * e + cf * e * e.exp(), epsilon0, epsilon0.max(1e-9))
}

/// Solves `(S − C)x + C x e^x = ε₀ − (S − C)ε − C ε e^ε` for `x = ε₂ + ε₃`,
/// with `S = √(2C ln(1/δ'))`, and splits `x` equally.
pub fn solve_budget(epsilon0: f64, delta_prime: f64, c: usize, epsilon: f64) -> Result<BudgetSolution> {
    if !(epsilon0 > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Parameter("need epsilon0 > 0 and epsilon >= 0".into()));
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::Parameter(format!("delta' must lie in (0, 1), got {delta_prime}")));
    }
    if c == 0 {
        return Err(Error::Parameter("at least one recipient is required".into()));
    }
    let cf = c as f64;
    let s = (2.0 * cf * (1.0 / delta_prime).ln()).sqrt();
    let rhs = epsilon0 - (s - cf) * epsilon - cf * epsilon * epsilon.exp();
    if !(rhs > 0.0) {
        return Err(Error::BudgetInfeasible {
            rhs,
            max_feasible_epsilon: max_feasible_epsilon(epsilon0, delta_prime, c),
        });
    }
    let lhs = |x: f64| (s - cf) * x + cf * x * x.exp();
    let x = bisect(lhs, rhs, epsilon0);
    let residual = (lhs(x) - rhs).abs();
    if residual >= 1e-9 {
        return Err(Error::Parameter(format!("budget solver residual {residual:e} too large")));
    }
    Ok(BudgetSolution {
        comparison_budget: x,
        epsilon2: x / 2.0,
        epsilon3: x / 2.0,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn key() -> SecretKey {
        SecretKey::new(b"svt-unit-test-key-000".to_vec()).unwrap()
    }

    fn config(gamma: f64, e2: f64, e3: f64, c: usize) -> SvtConfig {
        SvtConfig {
            gamma,
            epsilon: 1.0,
            epsilon2: e2,
            epsilon3: e3,
            delta: 1,
            recipients: c,
            delta_prime: 1e-3,
            max_trials: DEFAULT_MAX_TRIALS,
            fingerprint_len: 128,
            noise_seed: 7,
        }
    }

    #[test]
    fn gamma_examples() {
        let g = default_gamma(1, 0.25, 1000, 1);
        assert!((g - (0.5 + 1.0 / 12f64.sqrt()) * 250.0).abs() < 1e-9);
        assert!((g - 197.17).abs() < 0.01);
        assert_eq!(default_gamma(1, 0.25, 0, 1), 0.0);
        assert!((default_gamma(2, 0.1, 200, 3) - 2.0 * default_gamma(2, 0.1, 100, 3)).abs() < 1e-12);
    }

    #[test]
    fn vacuous_threshold_passes_first_trial() {
        let db = synthetic::uniform_database(200, &[2; 4], 1);
        for run in 0..50 {
            let mut cfg = config(0.0, 1e6, 1e6, 1);
            cfg.noise_seed = run;
            let rec = determine_internal_id(&db, 1, &cfg, &key()).unwrap();
            assert_eq!(rec.trials.len(), 1);
        }
    }

    #[test]
    fn unreachable_threshold_hits_the_cap() {
        // ε = ln 3 gives p = 1/4, where the realized flip rate equals p.
        let db = synthetic::uniform_database(100, &[2; 4], 1);
        let params = FingerprintParams::from_epsilon(3f64.ln(), 1, 128).unwrap();
        assert_eq!(params.selection_modulus(), 2);
        let bound = crate::theory::density_bound(1, params.p, 100, 4).hi;
        let mut cfg = config(bound + 10.0 * 10.0, 0.1, 0.1, 1);
        cfg.epsilon = 3f64.ln();
        cfg.max_trials = 50;
        match determine_internal_id(&db, 1, &cfg, &key()) {
            Err(Error::NonTermination { trials }) => assert_eq!(trials, 50),
            Ok(rec) => assert!(rec.trials.len() > 1),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn sharing_invariants() {
        let db = synthetic::uniform_database(300, &[5, 3, 4], 2);
        let params = FingerprintParams::from_epsilon(1.0, 1, 128).unwrap();
        let gamma = default_gamma(1, params.p, 300, 1);
        let cfg = config(gamma, 0.05, 0.05, 5);
        let (copies, ledger) = share_multi(&db, &cfg, &key()).unwrap();
        assert_eq!(copies.len(), 5);
        assert_eq!(ledger.shared, 5);
        for r in &ledger.recipients {
            let passes = r.trials.iter().filter(|t| t.passed).count();
            assert_eq!(passes, 1);
            let last = r.released_trial();
            assert!(last.passed);
            assert_eq!(last.internal_id, r.internal_id);
            assert!(last.density as f64 >= cfg.gamma + last.rho - last.mu);
        }
        for a in 0..5 {
            for b in a + 1..5 {
                let fa = recipient_fingerprint(&params, &key(), &ledger.recipients[a].internal_id).unwrap();
                let fb = recipient_fingerprint(&params, &key(), &ledger.recipients[b].internal_id).unwrap();
                assert!(fa.hamming(&fb) > 0);
            }
        }
        for copy in &copies {
            copy.validate().unwrap();
        }
    }

    #[test]
    fn single_recipient_matches_single_search() {
        let db = synthetic::uniform_database(100, &[3, 3], 2);
        let cfg = config(20.0, 0.5, 0.5, 1);
        let (ledger, _) = run_sharing(&db, &cfg, &key()).unwrap();
        let rec = determine_internal_id(&db, 1, &cfg, &key()).unwrap();
        assert_eq!(ledger.recipients, vec![rec]);
    }

    #[test]
    fn composition_examples() {
        let dp = (-1.0f64).exp();
        let (e, d) = advanced_composition(0.1, 0.0, 1, dp);
        assert!((e - (2f64.sqrt() * 0.1 + 0.1 * (0.1f64.exp() - 1.0))).abs() < 1e-15);
        assert!((d - dp).abs() < 1e-15);
        assert_eq!(advanced_composition(0.0, 0.01, 5, 0.1), (0.0, 5.0 * 0.01 + 0.1));
        let mut prev = 0.0;
        for c in 1..50 {
            let (e, _) = advanced_composition(0.3, 0.0, c, 1e-3);
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn sharing_totals_properties() {
        assert_eq!(sharing_totals(0, 0.5, 0.002, 1e-3), (0.0, 2e-3));
        let base = sharing_totals(100, 0.5, 0.002, 1e-3).0;
        assert!(sharing_totals(100, 0.51, 0.002, 1e-3).0 > base);
        assert!(sharing_totals(100, 0.5, 0.003, 1e-3).0 > base);
    }

    #[test]
    fn solver_residual_and_round_trip() {
        // C = 1, ε = 0: the root must satisfy the equation to 1e-9 and
        // reproduce ε₀ through the forward totals.
        let sol = solve_budget(0.5, 1e-3, 1, 0.0).unwrap();
        let s = (2.0 * (1e3f64).ln()).sqrt();
        let x = sol.comparison_budget;
        assert!(((s - 1.0) * x + x * x.exp() - 0.5).abs() < 1e-9);
        assert!((sharing_totals(1, 0.0, x, 1e-3).0 - 0.5).abs() < 1e-9);
        assert_eq!(sol.epsilon2, sol.epsilon3);
        let sol = solve_budget(60.0, 1e-3, 100, 0.5).unwrap();
        assert!((sharing_totals(100, 0.5, sol.comparison_budget, 1e-3).0 - 60.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_budget_reports_limit() {
        match solve_budget(40.0, 1e-3, 100, 0.5) {
            Err(Error::BudgetInfeasible { rhs, max_feasible_epsilon }) => {
                assert!(rhs < 0.0);
                assert!((max_feasible_epsilon - 0.43579).abs() < 1e-4, "{max_feasible_epsilon}");
                assert!(solve_budget(40.0, 1e-3, 100, max_feasible_epsilon * 0.999).is_ok());
            }
            other => panic!("{other:?}"),
        }
    }
}
