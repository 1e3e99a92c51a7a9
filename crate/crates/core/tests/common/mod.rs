//! Reference implementations used as test oracles. They share nothing with
//! the library beyond the flat parameter layout.

#![allow(dead_code)]

use fiarse::data::Dataset;
use fiarse::LayerLayout;

/// Unnormalized double-double number `hi + lo`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    /// Exact `a + b`.
    pub fn sum(a: f64, b: f64) -> Self {
        let (s, e) = two_sum(a, b);
        Dd { hi: s, lo: e }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        quick(s, e + self.lo + o.lo)
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd {
            hi: -o.hi,
            lo: -o.lo,
        })
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Double-double forward pass. Returns logits and the ReLU on/off pattern
/// of every hidden unit.
pub fn forward_dd(layout: &LayerLayout, w: &[Dd], x: &[f64]) -> (Vec<Dd>, Vec<bool>) {
    let mut act: Vec<Dd> = x.iter().map(|v| Dd::new(*v)).collect();
    let mut pattern = Vec::new();
    let last = layout.num_layers() - 1;
    for (l, spec) in layout.layers().iter().enumerate() {
        let mut out = Vec::with_capacity(spec.out_dim);
        for o in 0..spec.out_dim {
            let mut acc = if spec.has_bias {
                w[layout.bias_index(l, o)]
            } else {
                Dd::new(0.0)
            };
            for (i, a) in act.iter().enumerate() {
                acc = acc.add(w[layout.weight_index(l, o, i)].mul(*a));
            }
            if l < last {
                let on = acc.positive();
                pattern.push(on);
                out.push(if on { acc } else { Dd::new(0.0) });
            } else {
                out.push(acc);
            }
        }
        act = out;
    }
    (act, pattern)
}

/// Plain f64 forward pass keeping every layer's pre-activation.
fn forward(layout: &LayerLayout, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::new();
    let mut act = x.to_vec();
    let last = layout.num_layers() - 1;
    for (l, spec) in layout.layers().iter().enumerate() {
        let z: Vec<f64> = (0..spec.out_dim)
            .map(|o| {
                let b = if spec.has_bias {
                    w[layout.bias_index(l, o)]
                } else {
                    0.0
                };
                (0..spec.in_dim).fold(b, |s, i| s + w[layout.weight_index(l, o, i)] * act[i])
            })
            .collect();
        act = if l < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    pre
}

/// Mean cross-entropy of the MLP with parameters `w` and its gradient.
pub fn loss_grad(layout: &LayerLayout, w: &[f64], data: &Dataset) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let n = data.len() as f64;
    for s in 0..data.len() {
        let x = data.row(s);
        let pre = forward(layout, w, x);
        let z = pre.last().unwrap();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let y = data.label(s);
        loss += m + total.ln() - z[y];
        // dL/dz for the current layer, walked backwards
        let mut dz: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, v)| (v - m).exp() / total - if k == y { 1.0 } else { 0.0 })
            .collect();
        for l in (0..layout.num_layers()).rev() {
            let spec = layout.layers()[l];
            let input: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|v| v.max(0.0)).collect()
            };
            for o in 0..spec.out_dim {
                if spec.has_bias {
                    grad[layout.bias_index(l, o)] += dz[o] / n;
                }
                for i in 0..spec.in_dim {
                    grad[layout.weight_index(l, o, i)] += dz[o] * input[i] / n;
                }
            }
            if l > 0 {
                dz = (0..spec.in_dim)
                    .map(|i| {
                        if pre[l - 1][i] > 0.0 {
                            (0..spec.out_dim)
                                .map(|o| dz[o] * w[layout.weight_index(l, o, i)])
                                .sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }
    (loss / n, grad)
}
