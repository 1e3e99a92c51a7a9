//! Magnitude thresholds, hard masks and the straight-through bias factor.
//!
//! A *granularity unit* is the set of maskable indices that share one
//! threshold: the whole model, one layer, or one shard of consecutive layers.
//! When biases are exempt from masking they belong to no unit and are always
//! kept.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    ModelWise,
    LayerWise,
    /// Half-open ranges of layer indices; must tile `0..num_layers`.
    ShardWise(Vec<Range<usize>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskScope {
    pub granularity: Granularity,
    pub mask_biases: bool,
}

impl Default for MaskScope {
    fn default() -> Self {
        Self {
            granularity: Granularity::ModelWise,
            mask_biases: true,
        }
    }
}

impl MaskScope {
    pub fn new(granularity: Granularity, mask_biases: bool) -> Self {
        Self {
            granularity,
            mask_biases,
        }
    }

    /// Index ranges of every granularity unit, each in ascending flat order.
    pub fn units(&self, layout: &LayerLayout) -> Result<Vec<Vec<Range<usize>>>> {
        let layer_ranges = |l: usize| -> Result<Vec<Range<usize>>> {
            if self.mask_biases {
                Ok(vec![layout.layer_range(l)?])
            } else {
                Ok(vec![layout.weight_range(l)?])
            }
        };
        let groups: Vec<Range<usize>> = match &self.granularity {
            Granularity::ModelWise => std::iter::once(0..layout.num_layers()).collect(),
            Granularity::LayerWise => (0..layout.num_layers()).map(|l| l..l + 1).collect(),
            Granularity::ShardWise(shards) => {
                validate_shards(shards, layout.num_layers())?;
                shards.clone()
            }
        };
        let mut units = Vec::with_capacity(groups.len());
        for group in groups {
            let mut ranges = Vec::new();
            for l in group {
                ranges.extend(layer_ranges(l)?);
            }
            if ranges.iter().all(|r| r.is_empty()) {
                return Err(Error::invalid(
                    "granularity unit has no maskable parameters",
                ));
            }
            units.push(ranges);
        }
        Ok(units)
    }

    /// Flags of the indices that take part in masking.
    pub fn maskable(&self, layout: &LayerLayout) -> Vec<bool> {
        if self.mask_biases {
            vec![true; layout.d()]
        } else {
            layout.bias_flags().into_iter().map(|b| !b).collect()
        }
    }
}

fn validate_shards(shards: &[Range<usize>], num_layers: usize) -> Result<()> {
    let mut next = 0;
    for s in shards {
        if s.start != next || s.end <= s.start {
            return Err(Error::invalid(format!(
                "shards must be contiguous, non-empty and disjoint; got {shards:?}"
            )));
        }
        next = s.end;
    }
    if next != num_layers {
        return Err(Error::invalid(format!(
            "shards cover {next} of {num_layers} layers"
        )));
    }
    Ok(())
}

/// Per-client capacity ratios plus how thresholds are laid out.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityProfile {
    gammas: Vec<f64>,
    scope: MaskScope,
}

impl CapacityProfile {
    pub fn new(gammas: Vec<f64>, scope: MaskScope) -> Result<Self> {
        for (i, &g) in gammas.iter().enumerate() {
            check_gamma(g).map_err(|_| Error::invalid(format!("client {i} has gamma {g}")))?;
        }
        if let Granularity::ShardWise(shards) = &scope.granularity {
            if shards.is_empty() {
                return Err(Error::invalid(
                    "shard-wise strategy needs at least one shard",
                ));
            }
        }
        Ok(Self { gammas, scope })
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn gamma(&self, client: usize) -> f64 {
        self.gammas[client]
    }

    pub fn scope(&self) -> &MaskScope {
        &self.scope
    }

    /// Distinct capacity levels in ascending order.
    pub fn tiers(&self) -> Vec<f64> {
        let mut t = self.gammas.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "capacity ratio {gamma} outside (0, 1]"
        )))
    }
}

/// Number of entries kept in a unit of `unit_len` at ratio `gamma`.
pub fn unit_budget(gamma: f64, unit_len: usize) -> usize {
    if gamma >= 1.0 {
        return unit_len;
    }
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    let k = (gamma * unit_len as f64 + 1e-9).floor() as usize;
    k.clamp(1, unit_len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Threshold {
    scope: MaskScope,
    values: Vec<f64>,
    budgets: Option<Vec<usize>>,
}

impl Threshold {
    pub fn new(scope: MaskScope, values: Vec<f64>) -> Result<Self> {
        if let Some(t) = values.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::invalid(format!(
                "threshold {t} must be finite and >= 0"
            )));
        }
        Ok(Self {
            scope,
            values,
            budgets: None,
        })
    }

    /// One model-wide threshold over all parameters.
    pub fn model_wise(theta: f64) -> Result<Self> {
        Self::new(MaskScope::default(), vec![theta])
    }

    /// Attach per-unit Top-K budgets; ties at the threshold are trimmed to fit.
    pub fn with_budgets(mut self, budgets: Vec<usize>) -> Result<Self> {
        if budgets.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: budgets.len(),
            });
        }
        self.budgets = Some(budgets);
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn budgets(&self) -> Option<&[usize]> {
        self.budgets.as_deref()
    }

    pub fn scope(&self) -> &MaskScope {
        &self.scope
    }

    fn units_for(&self, layout: &LayerLayout) -> Result<Vec<Vec<Range<usize>>>> {
        let units = self.scope.units(layout)?;
        if units.len() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "threshold has {} values but the layout has {} units",
                self.values.len(),
                units.len()
            )));
        }
        Ok(units)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    bits: Vec<bool>,
    threshold: Option<Threshold>,
    gamma: Option<f64>,
}

impl Mask {
    pub fn full(d: usize) -> Self {
        Self::from_bits(vec![true; d])
    }

    pub fn empty(d: usize) -> Self {
        Self::from_bits(vec![false; d])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self {
            bits,
            threshold: None,
            gamma: None,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn threshold(&self) -> Option<&Threshold> {
        self.threshold.as_ref()
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    /// `values ⊙ mask`.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.bits)
            .map(|(v, &b)| if b { *v } else { 0.0 })
            .collect()
    }

    pub fn apply_params(&self, p: &ParamVector) -> Result<ParamVector> {
        if p.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                actual: self.len(),
            });
        }
        p.with_values(self.apply(p.values()))
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }
}

/// Per-unit Top-K threshold: `k = max(1, floor(gamma * d_u))` and the threshold
/// is the k-th largest magnitude in the unit. `gamma == 1` keeps everything
/// with a threshold of exactly zero.
pub fn topk_threshold(p: &ParamVector, gamma: f64, scope: &MaskScope) -> Result<Threshold> {
    check_gamma(gamma)?;
    let units = scope.units(p.layout())?;
    let values = p.values();
    let mut thetas = Vec::with_capacity(units.len());
    let mut budgets = Vec::with_capacity(units.len());
    for ranges in &units {
        let mut mags: Vec<f64> = ranges
            .iter()
            .flat_map(|r| values[r.clone()].iter().map(|v| v.abs()))
            .collect();
        if mags.is_empty() {
            return Err(Error::invalid("empty granularity unit"));
        }
        let k = unit_budget(gamma, mags.len());
        let theta = if gamma >= 1.0 {
            0.0
        } else {
            let (_, kth, _) = mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            *kth
        };
        thetas.push(theta);
        budgets.push(k);
    }
    Threshold::new(scope.clone(), thetas)?.with_budgets(budgets)
}

/// Hard mask `|p| >= theta` per unit. With budgets attached, indices tied at
/// exactly `theta` are dropped from the largest flat index down until the
/// unit fits its budget.
pub fn eval_mask(p: &ParamVector, th: &Threshold) -> Result<Mask> {
    let layout = p.layout();
    let units = th.units_for(layout)?;
    let values = p.values();
    let mut bits = th
        .scope
        .maskable(layout)
        .iter()
        .map(|m| !m)
        .collect::<Vec<_>>();
    for (u, ranges) in units.iter().enumerate() {
        let theta = th.values[u];
        let indices = ranges.iter().flat_map(|r| r.clone());
        match th.budgets.as_ref().map(|b| b[u]) {
            None => {
                for j in indices {
                    bits[j] = values[j].abs() >= theta;
                }
            }
            Some(k) => {
                let above = indices.clone().filter(|&j| values[j].abs() > theta).count();
                let mut ties_left = k.saturating_sub(above);
                for j in indices {
                    let a = values[j].abs();
                    bits[j] = if a > theta {
                        true
                    } else if a == theta && ties_left > 0 {
                        ties_left -= 1;
                        true
                    } else {
                        false
                    };
                }
            }
        }
    }
    Ok(Mask {
        bits,
        threshold: Some(th.clone()),
        gamma: None,
    })
}

/// `1 + 2|x|θ / (|x| + θ)^2` per coordinate; 1 where `|x| = θ = 0` and on
/// indices outside every unit.
pub fn ste_factor(p: &ParamVector, th: &Threshold) -> Result<Vec<f64>> {
    let units = th.units_for(p.layout())?;
    let values = p.values();
    let mut factor = vec![1.0; values.len()];
    for (u, ranges) in units.iter().enumerate() {
        let theta = th.values[u];
        for j in ranges.iter().flat_map(|r| r.clone()) {
            factor[j] = bias_factor(values[j].abs(), theta);
        }
    }
    Ok(factor)
}

#[inline]
pub(crate) fn bias_factor(magnitude: f64, theta: f64) -> f64 {
    let s = magnitude + theta;
    if s == 0.0 {
        1.0
    } else {
        1.0 + 2.0 * magnitude * theta / (s * s)
    }
}

/// Every set bit of `a` is also set in `b`. Masks of different length are
/// never nested.
pub fn is_nested(a: &Mask, b: &Mask) -> bool {
    a.len() == b.len() && a.bits.iter().zip(&b.bits).all(|(&x, &y)| !x || y)
}
