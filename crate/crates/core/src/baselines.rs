//! Baseline submodel extractors: static (HeteroFL), rolling (FedRolex) and
//! greedy magnitude pruning with a mask frozen for the round.
//!
//! HeteroFL and FedRolex are structured: they keep whole hidden units. A
//! weight survives when both of its endpoints are kept units; input features
//! and output classes are always kept.

use crate::client::{local_train_fixed_mask, ClientUpdate, LocalTraining};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{check_gamma, Mask, MaskScope};
use crate::params::{LayerLayout, ParamVector};
use crate::server::extract_submodel;

/// Widths of the hidden layers (outputs of every layer but the last).
pub fn hidden_widths(layout: &LayerLayout) -> Vec<usize> {
    let layers = layout.layers();
    layers[..layers.len() - 1]
        .iter()
        .map(|s| s.out_dim)
        .collect()
}

/// Builds the flat mask that keeps the flagged hidden units.
fn unit_mask(layout: &LayerLayout, kept: &[Vec<bool>], mask_biases: bool) -> Vec<bool> {
    let last = layout.num_layers() - 1;
    let mut bits = vec![false; layout.d()];
    for (l, spec) in layout.layers().iter().enumerate() {
        for o in 0..spec.out_dim {
            let out_keep = l == last || kept[l][o];
            if spec.has_bias {
                bits[layout.bias_index(l, o)] = out_keep || !mask_biases;
            }
            if !out_keep {
                continue;
            }
            for i in 0..spec.in_dim {
                if l == 0 || kept[l - 1][i] {
                    bits[layout.weight_index(l, o, i)] = true;
                }
            }
        }
    }
    bits
}

fn units_for_scale(widths: &[usize], scale: f64) -> Vec<usize> {
    widths
        .iter()
        .map(|&w| ((scale * w as f64 - 1e-9).ceil() as usize).clamp(1, w))
        .collect()
}

fn prefix_flags(widths: &[usize], counts: &[usize]) -> Vec<Vec<bool>> {
    widths
        .iter()
        .zip(counts)
        .map(|(&w, &k)| (0..w).map(|u| u < k).collect())
        .collect()
}

fn maskable_count(layout: &LayerLayout, bits: &[bool], mask_biases: bool) -> usize {
    if mask_biases {
        bits.iter().filter(|b| **b).count()
    } else {
        let bias = layout.bias_flags();
        bits.iter()
            .zip(bias)
            .filter(|(b, is_bias)| **b && !is_bias)
            .count()
    }
}

/// Kept units per hidden layer at capacity `gamma`: the widest common width
/// ratio whose submodel fits `gamma * d` maskable parameters, and never fewer
/// than one unit per layer.
pub fn kept_units(layout: &LayerLayout, gamma: f64, mask_biases: bool) -> Result<Vec<usize>> {
    check_gamma(gamma)?;
    let widths = hidden_widths(layout);
    if widths.is_empty() || gamma >= 1.0 {
        return Ok(widths);
    }
    let total = maskable_count(layout, &vec![true; layout.d()], mask_biases);
    let budget = gamma * total as f64 + 1e-9;
    let mut scales: Vec<f64> = widths
        .iter()
        .flat_map(|&w| (1..=w).map(move |k| k as f64 / w as f64))
        .collect();
    scales.sort_by(|a, b| b.total_cmp(a));
    scales.dedup();
    for s in scales {
        let counts = units_for_scale(&widths, s);
        let bits = unit_mask(layout, &prefix_flags(&widths, &counts), mask_biases);
        if maskable_count(layout, &bits, mask_biases) as f64 <= budget {
            return Ok(counts);
        }
    }
    Ok(vec![1; widths.len()])
}

/// Static HeteroFL submodel: the leading units of every hidden layer.
pub fn heterofl_mask(layout: &LayerLayout, gamma: f64, mask_biases: bool) -> Result<Mask> {
    let widths = hidden_widths(layout);
    let counts = kept_units(layout, gamma, mask_biases)?;
    if counts.contains(&0) {
        return Err(Error::invalid(format!(
            "gamma {gamma} keeps no hidden units"
        )));
    }
    Ok(Mask::from_bits(unit_mask(
        layout,
        &prefix_flags(&widths, &counts),
        mask_biases,
    ))
    .with_gamma(gamma))
}

/// Per hidden layer rolling offset, advanced by one unit per round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollState {
    offsets: Vec<usize>,
    widths: Vec<usize>,
}

impl RollState {
    pub fn new(layout: &LayerLayout) -> Self {
        let widths = hidden_widths(layout);
        Self {
            offsets: vec![0; widths.len()],
            widths,
        }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn advanced(&self) -> Self {
        Self {
            offsets: self
                .offsets
                .iter()
                .zip(&self.widths)
                .map(|(o, w)| (o + 1) % w)
                .collect(),
            widths: self.widths.clone(),
        }
    }
}

/// Units `offset, offset+1, ...` wrapping around `width`.
pub fn rolling_window(width: usize, size: usize, offset: usize) -> Vec<usize> {
    (0..size.min(width)).map(|k| (offset + k) % width).collect()
}

/// FedRolex submodel: a wrapping window of the HeteroFL size, starting at
/// the current offset. Returns the state for the next round.
pub fn fedrolex_mask(
    layout: &LayerLayout,
    gamma: f64,
    state: &RollState,
    mask_biases: bool,
) -> Result<(Mask, RollState)> {
    let counts = kept_units(layout, gamma, mask_biases)?;
    if state.widths != hidden_widths(layout) {
        return Err(Error::ShapeMismatch(
            "roll state belongs to another layout".into(),
        ));
    }
    let flags: Vec<Vec<bool>> = state
        .widths
        .iter()
        .zip(&counts)
        .zip(&state.offsets)
        .map(|((&w, &k), &off)| {
            let mut f = vec![false; w];
            for u in rolling_window(w, k, off) {
                f[u] = true;
            }
            f
        })
        .collect();
    let mask = Mask::from_bits(unit_mask(layout, &flags, mask_biases)).with_gamma(gamma);
    Ok((mask, state.advanced()))
}

/// Greedy pruning: the Top-K magnitude mask is computed once from `x_t` and
/// then held fixed for plain local SGD.
pub fn pruning_greedy_round(
    client_id: usize,
    x_t: &ParamVector,
    gamma: f64,
    scope: &MaskScope,
    data: &Dataset,
    cfg: &LocalTraining,
    seed: u64,
) -> Result<ClientUpdate> {
    let sub = extract_submodel(x_t, gamma, scope)?;
    local_train_fixed_mask(client_id, &sub.params, &sub.mask, data, cfg, seed)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::client::local_train_fiarse;
    use crate::data::gen_synthetic;
    use crate::masking::{is_nested, ste_factor};
    use crate::params::init_params;

    fn layout() -> LayerLayout {
        LayerLayout::mlp(&[5, 8, 6, 3], true).unwrap()
    }

    #[test]
    fn full_capacity_keeps_everything() {
        let l = layout();
        assert_eq!(heterofl_mask(&l, 1.0, true).unwrap().popcount(), l.d());
        let (m, _) = fedrolex_mask(&l, 1.0, &RollState::new(&l).advanced(), true).unwrap();
        assert_eq!(m.popcount(), l.d());
    }

    #[test]
    fn heterofl_is_static_and_nested() {
        let l = layout();
        let a = heterofl_mask(&l, 0.25, true).unwrap();
        assert_eq!(a, heterofl_mask(&l, 0.25, true).unwrap());
        let gammas = [0.05, 0.125, 0.25, 0.5, 0.75, 1.0];
        for w in gammas.windows(2) {
            let lo = heterofl_mask(&l, w[0], true).unwrap();
            let hi = heterofl_mask(&l, w[1], true).unwrap();
            assert!(is_nested(&lo, &hi));
        }
    }

    #[test]
    fn budget_with_one_unit_of_slack() {
        for widths in [vec![8, 32, 4], vec![5, 8, 6, 3], vec![2, 64, 64, 10]] {
            let l = LayerLayout::mlp(&widths, true).unwrap();
            // parameters touching one unit, per hidden layer
            let slack: usize = (0..l.num_layers() - 1)
                .map(|h| l.layers()[h].in_dim + 1 + l.layers()[h + 1].out_dim)
                .sum();
            for gamma in [0.01, 0.125, 0.25, 0.5, 0.9] {
                let m = heterofl_mask(&l, gamma, true).unwrap();
                assert!(m.popcount() as f64 <= gamma * l.d() as f64 + slack as f64);
            }
        }
    }

    #[test]
    fn rolling_windows_wrap() {
        let windows: Vec<Vec<usize>> = (0..4).map(|o| rolling_window(4, 2, o)).collect();
        assert_eq!(
            windows,
            vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 0]]
        );
        assert_eq!(rolling_window(4, 4, 3), vec![3, 0, 1, 2]);
    }

    #[test]
    fn fedrolex_rolls_and_covers() {
        let l = LayerLayout::mlp(&[3, 6, 2], true).unwrap();
        let mut state = RollState::new(&l);
        let mut union = Mask::empty(l.d());
        let mut prev: Option<Mask> = None;
        for _ in 0..6 {
            let (m, next) = fedrolex_mask(&l, 0.3, &state, true).unwrap();
            if let Some(p) = &prev {
                assert_ne!(p, &m);
            }
            union.union_with(&m);
            prev = Some(m);
            state = next;
        }
        assert_eq!(union.popcount(), l.d());
        assert_eq!(state.offsets(), &[0]);
    }

    #[test]
    fn biases_stay_when_exempt() {
        let l = LayerLayout::mlp(&[3, 6, 2], true).unwrap();
        let m = heterofl_mask(&l, 0.2, false).unwrap();
        for (bit, is_bias) in m.bits().iter().zip(l.bias_flags()) {
            if is_bias {
                assert!(*bit);
            }
        }
    }

    #[test]
    fn pruning_greedy_is_unscaled_fiarse_for_one_step() {
        let layout = Arc::new(LayerLayout::mlp(&[4, 6, 3], true).unwrap());
        let x = init_params(layout, 3);
        let data = gen_synthetic(3, 4, 40, 1, 1.0).unwrap();
        let cfg = LocalTraining {
            eta: 1e-3,
            steps: 1,
            batch_size: Some(8),
        };
        let scope = MaskScope::default();
        let sub = extract_submodel(&x, 0.5, &scope).unwrap();
        let fiarse = local_train_fiarse(0, &sub.params, &sub.threshold, &data, &cfg, 5).unwrap();
        let greedy = pruning_greedy_round(0, &x, 0.5, &scope, &data, &cfg, 5).unwrap();
        let factor = ste_factor(&sub.params, &sub.threshold).unwrap();
        assert_eq!(greedy.mask.bits(), sub.mask.bits());
        for j in 0..x.len() {
            if sub.mask.get(j) {
                let expect = fiarse.delta[j] / factor[j];
                assert!((greedy.delta[j] - expect).abs() <= 1e-15 + 1e-12 * expect.abs());
            } else {
                assert_eq!(greedy.delta[j], 0.0);
            }
        }
    }

    #[test]
    fn pruning_greedy_full_capacity_is_plain_sgd() {
        let layout = Arc::new(LayerLayout::mlp(&[4, 6, 3], true).unwrap());
        let x = init_params(layout, 4);
        let data = gen_synthetic(3, 4, 40, 1, 1.0).unwrap();
        let cfg = LocalTraining {
            eta: 0.1,
            steps: 4,
            batch_size: Some(8),
        };
        let greedy =
            pruning_greedy_round(1, &x, 1.0, &MaskScope::default(), &data, &cfg, 2).unwrap();
        let plain = local_train_fixed_mask(1, &x, &Mask::full(x.len()), &data, &cfg, 2).unwrap();
        assert_eq!(greedy.delta, plain.delta);
    }
}
