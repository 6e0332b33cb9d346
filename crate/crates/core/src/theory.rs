//! Closed-form privacy, utility and robustness bounds, with the exact and
//! simulated counterparts used to check them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::flip_bits;
use crate::crypto_rand::{FingerprintBits, SecretKey};
use crate::datamodel::{AttributeDomain, Record, RelationalDatabase};
use crate::error::{Error, Result};
use crate::extractor::extract_with_plan;
use crate::fingerprinter::{selection_modulus, FingerprintParams, MarkPlan};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Largest posterior an attacker with prior odds `psi` can reach at budget ε.
pub fn infcap_bound(psi: f64, epsilon: f64) -> Result<f64> {
    if !(psi > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!(
            "need psi > 0 and epsilon >= 0, got psi={psi}, epsilon={epsilon}"
        )));
    }
    let a = psi * epsilon.exp();
    Ok(if a.is_infinite() { 1.0 } else { a / (a + 1.0) })
}

/// Expected per-entry error interval `[0, Δp]`.
pub fn expected_error_bound(delta: u32, p: f64) -> Interval {
    Interval {
        lo: 0.0,
        hi: f64::from(delta) * p,
    }
}

/// Expected fingerprint density interval `[0, ΔpNT]`.
pub fn density_bound(delta: u32, p: f64, n: usize, t: usize) -> Interval {
    Interval {
        lo: 0.0,
        hi: f64::from(delta) * p * n as f64 * t as f64,
    }
}

/// Interval of a post-fingerprint joint probability.
pub fn joint_bounds(p: f64, k: u32, joint: f64, pr_min: f64, pr_max: f64) -> Interval {
    let keep = (1.0 - p).powi(k as i32);
    let lambda = 1.0 - keep;
    Interval {
        lo: joint * keep * keep + pr_min * lambda * lambda,
        hi: joint * keep * keep + pr_max * lambda * lambda,
    }
}

/// Interval of a post-fingerprint marginal probability; same form as the joint.
pub fn marginal_bounds(p: f64, k: u32, marginal: f64, pr_min: f64, pr_max: f64) -> Interval {
    joint_bounds(p, k, marginal, pr_min, pr_max)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Probability that a subset leak keeps at least one row carrying a given
/// fingerprint index, or that no row carries it at all.
///
/// Each of a row's `KT` positions carries index `l` with probability `p/L`,
/// and each row is kept with probability `gamma_sub`. With
/// `y = (1 - p/L)^{KT}` the value is `1 + y^N - (y + (1 - gamma_sub)(1 - y))^N`.
pub fn p_rbst_sub(p: f64, len: usize, k: u32, t: usize, n: usize, gamma_sub: f64) -> Result<f64> {
    check_unit("p", p)?;
    check_unit("gamma_sub", gamma_sub)?;
    if len == 0 {
        return Err(Error::Parameter("fingerprint length must be positive".into()));
    }
    let y = (1.0 - p / len as f64).powf(f64::from(k) * t as f64);
    let n = n as i32;
    let v = 1.0 + y.powi(n) - (y + (1.0 - gamma_sub) * (1.0 - y)).powi(n);
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustnessMode {
    ExactTiny,
    MonteCarlo { trials: usize, seed: u64 },
}

/// Probability that a single fingerprint index is recovered correctly from
/// `w` votes, each flipped independently with probability `gamma`.
/// Ties go to 0, which is right for half of the random fingerprints.
fn vote_correct(w: usize, gamma: f64) -> f64 {
    if w == 0 {
        return 0.0;
    }
    let mut pmf = vec![0.0; w + 1];
    pmf[0] = 1.0;
    for _ in 0..w {
        for q in (0..=w).rev() {
            let stay = pmf[q] * (1.0 - gamma);
            let flip = if q > 0 { pmf[q - 1] * gamma } else { 0.0 };
            pmf[q] = stay + flip;
        }
    }
    (0..=w)
        .map(|q| {
            if 2 * q < w {
                pmf[q]
            } else if 2 * q == w {
                0.5 * pmf[q]
            } else {
                0.0
            }
        })
        .sum()
}

fn binomial_pmf(n: usize, prob: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    pmf[0] = 1.0;
    for _ in 0..n {
        for j in (0..=n).rev() {
            let a = pmf[j] * (1.0 - prob);
            let b = if j > 0 { pmf[j - 1] * prob } else { 0.0 };
            pmf[j] = a + b;
        }
    }
    pmf
}

/// All compositions of `m` into `parts` non-negative parts.
fn compositions(m: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 1 {
        prefix.push(m);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in 0..=m {
        prefix.push(first);
        compositions(m - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Probability that at least `d` of `L` fingerprint bits are recovered after
/// random bit flipping with probability `gamma_rnd`.
///
/// The exact mode marginalizes over the number of selected positions, their
/// split across fingerprint indices and the per-index vote outcome; it uses
/// the mechanism's realized selection probability `1/floor(1/(2p))`. The Monte
/// Carlo mode runs insertion, flipping and extraction end to end on tables
/// whose domains have `2^K` values, so no mark is erased by clamping.
#[allow(clippy::too_many_arguments)]
pub fn p_rbst_rnd(
    p: f64,
    gamma_rnd: f64,
    n: usize,
    k: u32,
    t: usize,
    len: usize,
    d: usize,
    mode: RobustnessMode,
) -> Result<f64> {
    check_unit("gamma_rnd", gamma_rnd)?;
    if !(p > 0.0 && p < 0.5) {
        return Err(Error::Parameter(format!("p must lie in (0, 0.5), got {p}")));
    }
    if len == 0 || k == 0 || d > len {
        return Err(Error::Parameter("need L >= 1, K >= 1 and D <= L".into()));
    }
    match mode {
        RobustnessMode::ExactTiny => p_rbst_rnd_exact(p, gamma_rnd, n * k as usize * t, len, d),
        RobustnessMode::MonteCarlo { trials, seed } => {
            p_rbst_rnd_simulated(p, gamma_rnd, n, k, t, len, d, trials, seed)
        }
    }
}

fn p_rbst_rnd_exact(p: f64, gamma: f64, positions: usize, len: usize, d: usize) -> Result<f64> {
    if positions > 20 || len > 4 {
        return Err(Error::Size(format!(
            "exact evaluation needs NKT <= 20 and L <= 4, got NKT={positions}, L={len}"
        )));
    }
    let s = 1.0 / selection_modulus(p) as f64;
    let m_pmf = binomial_pmf(positions, s);
    let correct: Vec<f64> = (0..=positions).map(|w| vote_correct(w, gamma)).collect();
    let mut total = 0.0;
    for (m, &pm) in m_pmf.iter().enumerate() {
        if pm == 0.0 {
            continue;
        }
        let mut comps = Vec::new();
        compositions(m, len, &mut Vec::new(), &mut comps);
        let base = ln_factorial(m) - m as f64 * (len as f64).ln();
        for w in comps {
            let ln_multi = base - w.iter().map(|&x| ln_factorial(x)).sum::<f64>();
            // Poisson-binomial over indices: number recovered correctly.
            let mut dist = vec![0.0; len + 1];
            dist[0] = 1.0;
            for &wl in &w {
                let c = correct[wl];
                for j in (0..=len).rev() {
                    let a = dist[j] * (1.0 - c);
                    let b = if j > 0 { dist[j - 1] * c } else { 0.0 };
                    dist[j] = a + b;
                }
            }
            let tail: f64 = dist[d..].iter().sum();
            total += pm * ln_multi.exp() * tail;
        }
    }
    Ok(total.min(1.0))
}

/// Table of `n` rows over `t` attributes with `2^k` values each.
pub fn full_width_table(n: usize, k: u32, t: usize, seed: u64) -> RelationalDatabase {
    let size = 1u32 << k;
    let domains = (0..t)
        .map(|j| AttributeDomain::new(format!("a{j}"), (0..size).map(|v| v.to_string()).collect()).unwrap())
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| Record {
            primary_key: format!("r{i}"),
            entries: (0..t).map(|_| rng.gen_range(0..size)).collect(),
            label: None,
        })
        .collect();
    RelationalDatabase::new(domains, records, "id", None).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn p_rbst_rnd_simulated(
    p: f64,
    gamma: f64,
    n: usize,
    k: u32,
    t: usize,
    len: usize,
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let delta = (1u32 << k) - 1;
    let params = FingerprintParams::from_p(p, delta, len)?;
    let db = full_width_table(n, k, t, seed);
    let mut hits = 0usize;
    for trial in 0..trials as u64 {
        let key = SecretKey::new(format!("robustness-trial-key-{seed}-{trial}").into_bytes())?;
        let plan = MarkPlan::build_sequential(&db, &params, &key);
        let f = crate::fingerprinter::recipient_fingerprint(&params, &key, "sp")?;
        let marked = plan.apply(&db, &f)?;
        let leaked = flip_bits(&marked, k, gamma, seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let ex = extract_with_plan(&db, &leaked, &params, &plan)?;
        if ex.matches(&f) >= d {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// One joint cell `(z, ω)` entering the confidence gain of value `π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCell {
    pub joint: f64,
    pub pr_min: f64,
    pub pr_max: f64,
}

/// Form of the `A`, `B` endpoints used by the confidence gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainVariant {
    /// `A = J((1-p)^{2K}+1)(-λ) + Pr_min λ²`.
    #[default]
    ScaledLambda,
    /// `A = J((1-p)^{2K}-1) + Pr_min λ²`.
    Difference,
}

/// The `(A, B)` endpoints of one cell.
pub fn gain_endpoints(p: f64, k: u32, cell: &GainCell, variant: GainVariant) -> (f64, f64) {
    let keep = (1.0 - p).powi(k as i32);
    let lambda = 1.0 - keep;
    let head = match variant {
        GainVariant::ScaledLambda => cell.joint * (keep * keep + 1.0) * (-lambda),
        GainVariant::Difference => cell.joint * (keep * keep - 1.0),
    };
    (head + cell.pr_min * lambda * lambda, head + cell.pr_max * lambda * lambda)
}

/// Confidence gain `G` of the correlation attacker for one value `π`.
///
/// Each cell contributes `min(1, τ / max(|A|, |B|))`; a cell with
/// `max(|A|, |B|) = 0` contributes 1.
pub fn confidence_gain(
    p: f64,
    k: u32,
    tau: f64,
    cells: &[GainCell],
    marginal_pi: f64,
    variant: GainVariant,
) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("tau must be non-negative, got {tau}")));
    }
    let lambda = 1.0 - (1.0 - p).powi(k as i32);
    let denom = lambda * marginal_pi;
    if !(denom > 0.0) {
        return Err(Error::Undefined(format!(
            "confidence gain needs p > 0 and Pr(π) > 0 (p={p}, Pr(π)={marginal_pi})"
        )));
    }
    let mut prod = 1.0;
    for cell in cells {
        let (a, b) = gain_endpoints(p, k, cell, variant);
        let width = a.abs().max(b.abs());
        if width > 0.0 {
            prod *= (tau / width).min(1.0);
        }
    }
    Ok((1.0 - prod) / denom)
}

/// Exact output distribution of bit-level randomized response on the `k`
/// low bits of `x`, without clamping. Index is the output value.
pub fn bitwise_rr_distribution(x: u32, k: u32, flip: f64) -> Vec<f64> {
    let size = 1usize << k;
    let high = x & !((size as u32) - 1);
    let mut out = vec![0.0; (high as usize) + size];
    for mask in 0..size as u32 {
        let flips = mask.count_ones() as i32;
        let prob = flip.powi(flips) * (1.0 - flip).powi(k as i32 - flips);
        out[(x ^ mask) as usize] += prob;
    }
    out
}

/// Largest output probability ratio between neighbouring single-entry
/// databases over values `0..2^K` differing by at most `Δ`.
///
/// Returns infinity if some output is possible under one neighbour only.
pub fn max_neighbor_ratio(k: u32, delta: u32, flip: f64) -> f64 {
    let size = 1u32 << k;
    let dists: Vec<Vec<f64>> = (0..size).map(|x| bitwise_rr_distribution(x, k, flip)).collect();
    let mut worst: f64 = 1.0;
    for x in 0..size {
        for y in 0..size {
            if x == y || x.abs_diff(y) > delta {
                continue;
            }
            for out in 0..size as usize {
                let a = dists[x as usize][out];
                let b = dists[y as usize][out];
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                worst = worst.max(if b == 0.0 { f64::INFINITY } else { a / b });
            }
        }
    }
    worst
}

/// Probability that the mechanism releases `y` when the true code is `x`.
///
/// Each of the `bits` low bits flips with probability `flip`, and results
/// above `max_code` are clamped to it.
pub fn release_likelihood(y: u32, x: u32, bits: u32, flip: f64, max_code: u32) -> f64 {
    let mut total = 0.0;
    for mask in 0..(1u32 << bits) {
        if (x ^ mask).min(max_code) == y {
            let f = mask.count_ones() as i32;
            total += flip.powi(f) * (1.0 - flip).powi(bits as i32 - f);
        }
    }
    total
}

/// One attacker inference on a single released entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfCapObservation {
    pub row: usize,
    pub attribute: usize,
    pub zeta1: u32,
    pub zeta2: u32,
    pub psi: f64,
    pub posterior: f64,
    pub bound: f64,
}

/// Bayesian attacker separating the true value `ζ1` of each entry from every
/// alternative `ζ2` within `Δ`.
///
/// The prior odds `ψ` come from the occurrence frequencies of `ζ1` and `ζ2`
/// among the other rows of the original column; pairs with `ψ` of 0 or
/// infinity are skipped. The likelihood is the mechanism's exact release
/// probability at the realized per-bit flip probability
/// `1/(2 floor(1/(2p)))`.
pub fn infcap_attack(
    original: &RelationalDatabase,
    released: &RelationalDatabase,
    params: &FingerprintParams,
) -> Result<Vec<InfCapObservation>> {
    if original.len() != released.len() || original.attribute_count() != released.attribute_count() {
        return Err(Error::Alignment("original and release differ in shape".into()));
    }
    let flip = 0.5 / selection_modulus(params.p) as f64;
    let mut out = Vec::new();
    for t in 0..original.attribute_count() {
        let domain = &original.domains[t];
        let bits = params.k.min(domain.bit_width());
        let mut counts = vec![0u64; domain.len()];
        for r in &original.records {
            counts[r.entries[t] as usize] += 1;
        }
        for (i, (o, rel)) in original.records.iter().zip(&released.records).enumerate() {
            if o.primary_key != rel.primary_key {
                return Err(Error::Alignment(format!("row {i} keys differ")));
            }
            let z1 = o.entries[t];
            let y = rel.entries[t];
            let c1 = counts[z1 as usize] - 1;
            for z2 in 0..domain.len() as u32 {
                if z2 == z1 || z2.abs_diff(z1) > params.delta {
                    continue;
                }
                let c2 = counts[z2 as usize];
                if c1 == 0 || c2 == 0 {
                    continue;
                }
                let psi = c1 as f64 / c2 as f64;
                let l1 = release_likelihood(y, z1, bits, flip, domain.max_code());
                let l2 = release_likelihood(y, z2, bits, flip, domain.max_code());
                let posterior = psi * l1 / (psi * l1 + l2);
                out.push(InfCapObservation {
                    row: i,
                    attribute: t,
                    zeta1: z1,
                    zeta2: z2,
                    psi,
                    posterior,
                    bound: infcap_bound(psi, params.epsilon)?,
                });
            }
        }
    }
    Ok(out)
}

/// Mean absolute error and its standard error of bit-level randomized
/// response with per-bit flip probability `p` on `K = floor(log2 Δ)+1` bits.
///
/// True values are uniform over `0..=max_code`; outputs are clamped to
/// `max_code` when `clamp` is set.
pub fn simulate_entry_error(delta: u32, p: f64, max_code: u32, clamp: bool, n: usize, seed: u64) -> (f64, f64) {
    let k = crate::fingerprinter::bits_for_sensitivity(delta);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let x = rng.gen_range(0..=max_code);
        let mut y = x;
        for b in 0..k {
            if rng.gen_bool(p) {
                y ^= 1 << b;
            }
        }
        if clamp {
            y = y.min(max_code);
        }
        let e = f64::from(x.abs_diff(y));
        sum += e;
        sq += e * e;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Empirical confidence gain: fraction of marked entries among those the
/// correlation attacker targets, over the overall marking rate.
pub fn empirical_gain(qualified_marked: usize, qualified: usize, marked: usize, total: usize) -> Option<f64> {
    if qualified == 0 || marked == 0 || total == 0 {
        return None;
    }
    Some((qualified_marked as f64 / qualified as f64) / (marked as f64 / total as f64))
}

/// Fingerprint with every bit fixed; handy for closed-form checks.
pub fn constant_fingerprint(len: usize, bit: u8) -> FingerprintBits {
    FingerprintBits::from_bits(vec![bit; len]).expect("non-empty")
}
