//! Flat parameter storage with per-layer segmentation.
//!
//! Every weight and bias of the network lives in one contiguous `Vec<f64>`.
//! Layer `l` occupies a weight block (`out_dim * in_dim`, row-major by output
//! unit) immediately followed by its bias block (`out_dim`, if present).

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, has_bias: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            has_bias,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.out_dim
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    layers: Vec<LayerSpec>,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    d: usize,
}

impl LayerLayout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidLayout("no layers".into()));
        }
        let mut weight_offsets = Vec::with_capacity(layers.len());
        let mut bias_offsets = Vec::with_capacity(layers.len());
        let mut cursor = 0;
        for (l, spec) in layers.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::InvalidLayout(format!(
                    "layer {l} has a zero dimension"
                )));
            }
            weight_offsets.push(cursor);
            cursor += spec.weight_len();
            bias_offsets.push(cursor);
            cursor += spec.bias_len();
        }
        Ok(Self {
            layers,
            weight_offsets,
            bias_offsets,
            d: cursor,
        })
    }

    /// Fully-connected chain `widths[0] -> widths[1] -> ... -> widths[n-1]`.
    pub fn mlp(widths: &[usize], has_bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidLayout(
                "an mlp needs at least an input and an output width".into(),
            ));
        }
        Self::new(
            widths
                .windows(2)
                .map(|w| LayerSpec::new(w[0], w[1], has_bias))
                .collect(),
        )
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Result<&LayerSpec> {
        self.layers.get(l).ok_or(Error::IndexOutOfRange {
            index: l,
            len: self.layers.len(),
        })
    }

    pub fn weight_range(&self, l: usize) -> Result<Range<usize>> {
        let spec = self.layer(l)?;
        let start = self.weight_offsets[l];
        Ok(start..start + spec.weight_len())
    }

    /// Empty range when the layer has no bias.
    pub fn bias_range(&self, l: usize) -> Result<Range<usize>> {
        let spec = self.layer(l)?;
        let start = self.bias_offsets[l];
        Ok(start..start + spec.bias_len())
    }

    /// Weight and bias blocks of layer `l` together (they are adjacent).
    pub fn layer_range(&self, l: usize) -> Result<Range<usize>> {
        let w = self.weight_range(l)?;
        let b = self.bias_range(l)?;
        Ok(w.start..b.end)
    }

    /// Flat index of weight `(out, inp)` in layer `l`. No bounds checks.
    #[inline]
    pub fn weight_index(&self, l: usize, out: usize, inp: usize) -> usize {
        self.weight_offsets[l] + out * self.layers[l].in_dim + inp
    }

    #[inline]
    pub fn bias_index(&self, l: usize, out: usize) -> usize {
        self.bias_offsets[l] + out
    }

    /// Flags every flat index that belongs to a bias block.
    pub fn bias_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.d];
        for l in 0..self.layers.len() {
            let r = self.bias_range(l).expect("layer index in range");
            flags[r].iter_mut().for_each(|f| *f = true);
        }
        flags
    }
}

/// The global model or any submodel view of it: `values.len() == layout.d()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.d() {
            return Err(Error::LengthMismatch {
                expected: layout.d(),
                actual: values.len(),
            });
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {j} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        let d = layout.d();
        Self {
            values: vec![0.0; d],
            layout,
        }
    }

    /// New vector on the same layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(weights, biases)` of layer `l`; biases is empty for bias-free layers.
    pub fn slice_layer(&self, l: usize) -> Result<(&[f64], &[f64])> {
        let w = self.layout.weight_range(l)?;
        let b = self.layout.bias_range(l)?;
        Ok((&self.values[w], &self.values[b]))
    }
}

/// Scaled-uniform initialization: each layer draws from `U(-b, b)` with
/// `b = sqrt(6 / (in_dim + out_dim))`, biases included.
pub fn init_params(layout: Arc<LayerLayout>, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.d()];
    for (l, spec) in layout.layers().iter().enumerate() {
        let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
        let range = layout.layer_range(l).expect("layer index in range");
        for v in &mut values[range] {
            *v = rng.random_range(-bound..bound);
        }
    }
    ParamVector { values, layout }
}
