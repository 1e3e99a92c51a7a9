//! Exploration rate, mask churn and per-tier accuracy.

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::nn::evaluate;
use crate::params::ParamVector;

/// Cumulative record of which parameters have been assigned to any
/// participant, plus the latest server-side mask of every tier.
#[derive(Clone, Debug)]
pub struct MaskHistory {
    ever: Mask,
    rounds: usize,
    last_tier: Vec<Option<Mask>>,
}

impl MaskHistory {
    pub fn new(d: usize, num_tiers: usize) -> Self {
        Self {
            ever: Mask::empty(d),
            rounds: 0,
            last_tier: vec![None; num_tiers],
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Adds one round of participant masks.
    pub fn record_round<'a>(&mut self, masks: impl IntoIterator<Item = &'a Mask>) {
        for m in masks {
            self.ever.union_with(m);
        }
        self.rounds += 1;
    }

    /// Stores this round's tier masks; returns churn against the previous
    /// round per tier (`None` for a tier's first mask).
    pub fn record_tier_masks(&mut self, masks: &[Mask]) -> Result<Vec<Option<f64>>> {
        if masks.len() != self.last_tier.len() {
            return Err(Error::LengthMismatch {
                expected: self.last_tier.len(),
                actual: masks.len(),
            });
        }
        let mut churn = Vec::with_capacity(masks.len());
        for (slot, m) in self.last_tier.iter_mut().zip(masks) {
            churn.push(match slot {
                Some(prev) => Some(mask_churn(prev, m)?),
                None => None,
            });
            *slot = Some(m.clone());
        }
        Ok(churn)
    }

    /// Fraction of parameters never assigned to a participant.
    pub fn exploration_rate(&self) -> f64 {
        if self.ever.is_empty() {
            return 0.0;
        }
        1.0 - self.ever.popcount() as f64 / self.ever.len() as f64
    }

    pub fn ever_active(&self) -> &Mask {
        &self.ever
    }
}

/// Normalized Hamming distance.
pub fn mask_churn(a: &Mask, b: &Mask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(x, y)| x != y)
        .count();
    Ok(diff as f64 / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TierReport {
    pub gamma: f64,
    /// Mean local-test accuracy of the tier's clients; `None` when none of
    /// them has test samples.
    pub local_acc: Option<f64>,
    pub global_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub tiers: Vec<TierReport>,
    /// Mean over tiers of `local_acc`.
    pub local_mean: Option<f64>,
    /// Mean over tiers of `global_acc`.
    pub global_mean: f64,
}

/// Accuracy of each tier's submodel on its clients' local tests and on the
/// global test. `tier_masks[r]` is the submodel mask for tier `r` and
/// `client_tier[i]` the tier of client `i`.
pub fn report_round(
    x: &ParamVector,
    tier_masks: &[(f64, Mask)],
    clients: &[ClientDataset],
    client_tier: &[usize],
    global: &Dataset,
) -> Result<RoundReport> {
    if clients.len() != client_tier.len() {
        return Err(Error::LengthMismatch {
            expected: clients.len(),
            actual: client_tier.len(),
        });
    }
    let mut tiers = Vec::with_capacity(tier_masks.len());
    for (r, (gamma, mask)) in tier_masks.iter().enumerate() {
        let mut accs = Vec::new();
        for (c, _) in clients.iter().zip(client_tier).filter(|(_, t)| **t == r) {
            if !c.test.is_empty() {
                accs.push(evaluate(x, mask, &c.test)?);
            }
        }
        let local_acc = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        tiers.push(TierReport {
            gamma: *gamma,
            local_acc,
            global_acc: evaluate(x, mask, global)?,
        });
    }
    let locals: Vec<f64> = tiers.iter().filter_map(|t| t.local_acc).collect();
    let local_mean = (!locals.is_empty()).then(|| locals.iter().sum::<f64>() / locals.len() as f64);
    let global_mean = if tiers.is_empty() {
        0.0
    } else {
        tiers.iter().map(|t| t.global_acc).sum::<f64>() / tiers.len() as f64
    };
    Ok(RoundReport {
        tiers,
        local_mean,
        global_mean,
    })
}
