//! Server side of a round: sampling, submodel extraction, partial averaging
//! and the global step.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::masking::{eval_mask, is_nested, topk_threshold, Mask, MaskScope, Threshold};
use crate::params::ParamVector;

/// Uniform `a`-subset of `0..n` without replacement, ascending.
pub fn sample_clients(n: usize, a: usize, seed: u64) -> Result<Vec<usize>> {
    if a == 0 || a > n {
        return Err(Error::invalid(format!("cannot sample {a} of {n} clients")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, a).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Submodel {
    pub params: ParamVector,
    pub threshold: Threshold,
    pub mask: Mask,
}

/// `x ⊙ M(x)` with `M` the Top-K magnitude mask at ratio `gamma`.
pub fn extract_submodel(x: &ParamVector, gamma: f64, scope: &MaskScope) -> Result<Submodel> {
    let threshold = topk_threshold(x, gamma, scope)?;
    let mask = eval_mask(x, &threshold)?.with_gamma(gamma);
    Ok(Submodel {
        params: mask.apply_params(x)?,
        threshold,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggResult {
    pub delta: Vec<f64>,
    /// Number of participants whose mask holds each index.
    pub counts: Vec<usize>,
}

fn common_len(updates: &[ClientUpdate]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("no updates to aggregate"))?;
    let d = first.delta.len();
    for u in updates {
        for len in [u.delta.len(), u.mask.len()] {
            if len != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: len,
                });
            }
        }
    }
    Ok(d)
}

/// Per-index mean over the participants whose mask holds that index; zero
/// where nobody holds it. Membership comes from the mask, so a held
/// coordinate with an exactly-zero update still counts.
pub fn aggregate_indexwise(updates: &[ClientUpdate]) -> Result<AggResult> {
    let d = common_len(updates)?;
    let mut sum = vec![0.0; d];
    let mut counts = vec![0usize; d];
    for u in updates {
        for j in 0..d {
            if u.mask.get(j) {
                sum[j] += u.delta[j];
                counts[j] += 1;
            }
        }
    }
    let delta = sum
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(AggResult { delta, counts })
}

/// Partial averaging over nested submodels: indices are split into bands by
/// the smallest submodel that holds them, and each band is averaged over the
/// participants holding a submodel at least that large.
///
/// Sums run in the order of `updates`, so the result is bit-identical to
/// [`aggregate_indexwise`] on the same input.
pub fn aggregate_nested(updates: &[ClientUpdate]) -> Result<AggResult> {
    let d = common_len(updates)?;

    // distinct masks ordered by size form the tiers
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].mask.popcount());
    let mut tiers: Vec<&Mask> = Vec::new();
    let mut rank = vec![0usize; updates.len()];
    for &i in &order {
        let m = &updates[i].mask;
        match tiers.last() {
            Some(top) if top.bits() == m.bits() => {}
            Some(top) if !is_nested(top, m) => {
                return Err(Error::NotNested(format!(
                    "mask of client {} does not contain a smaller participant mask",
                    updates[i].client_id
                )));
            }
            _ => tiers.push(m),
        }
        rank[i] = tiers.len() - 1;
    }

    let mut delta = vec![0.0; d];
    let mut counts = vec![0usize; d];
    let mut band_of = vec![None; d];
    for (r, tier) in tiers.iter().enumerate().rev() {
        for (j, &held) in tier.bits().iter().enumerate() {
            if held {
                band_of[j] = Some(r);
            }
        }
    }
    for band in 0..tiers.len() {
        let holders: Vec<&ClientUpdate> = updates
            .iter()
            .zip(&rank)
            .filter(|(_, &r)| r >= band)
            .map(|(u, _)| u)
            .collect();
        let n = holders.len();
        for j in (0..d).filter(|&j| band_of[j] == Some(band)) {
            let mut s = 0.0;
            for u in &holders {
                s += u.delta[j];
            }
            delta[j] = s / n as f64;
            counts[j] = n;
        }
    }
    Ok(AggResult { delta, counts })
}

/// `x - eta_s * agg`.
pub fn global_step(x: &ParamVector, agg: &AggResult, eta_s: f64) -> Result<ParamVector> {
    if agg.delta.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: agg.delta.len(),
        });
    }
    x.with_values(
        x.values()
            .iter()
            .zip(&agg.delta)
            .map(|(v, d)| v - eta_s * d)
            .collect(),
    )
}

pub fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Expected partial-average coefficient of each tier when `a` of `n`
/// clients are sampled uniformly: `(C(n, a) - C(n - |tier|, a)) / C(n, a)`,
/// i.e. the probability that at least one holder of the tier participates.
pub fn expected_agg_coeff(n: usize, a: usize, tier_sizes: &[usize]) -> Result<Vec<BigRational>> {
    if a == 0 || a > n {
        return Err(Error::invalid(format!("cannot sample {a} of {n} clients")));
    }
    if let Some(s) = tier_sizes.iter().find(|s| **s > n) {
        return Err(Error::invalid(format!("tier of {s} clients exceeds {n}")));
    }
    let total = binomial(n, a);
    Ok(tier_sizes
        .iter()
        .map(|&s| BigRational::new(&total - binomial(n - s, a), total.clone()))
        .collect())
}
