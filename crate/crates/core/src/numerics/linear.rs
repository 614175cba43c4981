use alloc::vec;
use alloc::vec::Vec;

use super::{Probe, Scalar, Tensor};
use crate::error::{Error, Result};

/// Classifier shared by all channel-group heads of one layer site.
///
/// Head `c` uses the feature columns `0..bounds[c]` only:
/// `logit[c][n] = bias[n] + Σ_{k < bounds[c]} weight[n, k] · f[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeLinear<S> {
    /// `[classes, features]`
    pub weight: Tensor<S>,
    /// `[classes]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> CumulativeLinear<S> {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Keeps feature columns `0..features`; used for sliced heads.
    pub fn truncated(&self, features: usize) -> Self {
        let (n, f) = (self.classes(), self.features());
        let mut data = Vec::with_capacity(n * features);
        for row in 0..n {
            data.extend_from_slice(&self.weight.data()[row * f..row * f + features]);
        }
        CumulativeLinear {
            weight: Tensor::from_vec(&[n, features], data).expect("non-empty"),
            bias: self.bias.clone(),
        }
    }
}

/// Logits of every head in `bounds` for `features [batch, width]`.
///
/// Output layout `[bounds.len(), batch, classes]`. Each logit starts at the
/// bias and accumulates feature columns in increasing order; the value for
/// bound `c + 1` continues the running sum of bound `c`, so a head computed
/// alone (with a shorter `bounds`) is bit-identical to the same head here.
pub fn cumulative_logits<S: Scalar, P: Probe>(
    layer: &CumulativeLinear<S>,
    features: &[S],
    batch: usize,
    width: usize,
    bounds: &[usize],
    probe: &mut P,
) -> Result<Vec<S>> {
    let (n, f) = (layer.classes(), layer.features());
    let last = bounds.last().copied().unwrap_or(0);
    if last > width || last > f || features.len() != batch * width || bounds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::ShapeMismatch {
            op: "cumulative_logits",
            left: vec![batch, width],
            right: vec![n, f, last],
        });
    }
    let groups = bounds.len();
    let w = layer.weight.data();
    let mut out = vec![S::zero(); groups * batch * n];
    for b in 0..batch {
        let feat = &features[b * width..(b + 1) * width];
        for cls in 0..n {
            let row = &w[cls * f..(cls + 1) * f];
            let mut acc = layer.bias.data()[cls];
            let mut k = 0;
            for (g, &bound) in bounds.iter().enumerate() {
                while k < bound {
                    acc = acc + row[k] * feat[k];
                    k += 1;
                }
                out[(g * batch + b) * n + cls] = acc;
            }
        }
    }
    probe.linear((batch * n * last) as u64);
    Ok(out)
}

/// Reverse pass of [`cumulative_logits`] over all `bounds`.
///
/// `grad` has layout `[bounds.len(), batch, classes]`. Returns
/// `(d_features [batch, width], d_weight, d_bias)`; feature columns at or
/// beyond the last bound get zero gradient.
pub fn cumulative_logits_backward<S: Scalar>(
    layer: &CumulativeLinear<S>,
    features: &[S],
    batch: usize,
    bounds: &[usize],
    grad: &[S],
) -> (Vec<S>, Tensor<S>, Tensor<S>) {
    let (n, f) = (layer.classes(), layer.features());
    let groups = bounds.len();
    debug_assert_eq!(grad.len(), groups * batch * n);
    // Column k in group g receives the summed gradient of heads g..groups.
    let mut suffix = vec![S::zero(); groups * batch * n];
    for g in (0..groups).rev() {
        for j in 0..batch * n {
            let next = if g + 1 < groups { suffix[(g + 1) * batch * n + j] } else { S::zero() };
            suffix[g * batch * n + j] = next + grad[g * batch * n + j];
        }
    }
    let w = layer.weight.data();
    let mut dfeat = vec![S::zero(); batch * f];
    let mut dw = vec![S::zero(); n * f];
    let mut db = vec![S::zero(); n];
    if groups > 0 {
        for b in 0..batch {
            for cls in 0..n {
                db[cls] = db[cls] + suffix[b * n + cls];
            }
        }
    }
    let mut start = 0;
    for (g, &bound) in bounds.iter().enumerate() {
        let gs = &suffix[g * batch * n..(g + 1) * batch * n];
        for b in 0..batch {
            for cls in 0..n {
                let d = gs[b * n + cls];
                for k in start..bound {
                    dw[cls * f + k] = dw[cls * f + k] + d * features[b * f + k];
                    dfeat[b * f + k] = dfeat[b * f + k] + d * w[cls * f + k];
                }
            }
        }
        start = bound;
    }
    (
        dfeat,
        Tensor::from_vec(&[n, f], dw).expect("shape"),
        Tensor::from_vec(&[n], db).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{NoProbe, Rng};

    fn layer(rng: &mut Rng, n: usize, f: usize) -> CumulativeLinear<f64> {
        CumulativeLinear {
            weight: Tensor::from_vec(&[n, f], (0..n * f).map(|_| rng.normal()).collect()).unwrap(),
            bias: Tensor::from_vec(&[n], (0..n).map(|_| rng.normal()).collect()).unwrap(),
        }
    }

    #[test]
    fn last_head_is_the_full_classifier() {
        let mut rng = Rng::new(1);
        let lin = layer(&mut rng, 3, 6);
        let feat: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let out = cumulative_logits(&lin, &feat, 2, 6, &[2, 4, 6], &mut NoProbe).unwrap();
        for b in 0..2 {
            for n in 0..3 {
                let full: f64 = lin.bias.data()[n] + (0..6).map(|k| lin.weight.data()[n * 6 + k] * feat[b * 6 + k]).sum::<f64>();
                assert!((out[(2 * 2 + b) * 3 + n] - full).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_of_bounds_is_bit_identical() {
        let mut rng = Rng::new(2);
        let lin = layer(&mut rng, 4, 8);
        let feat: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let all = cumulative_logits(&lin, &feat, 1, 8, &[2, 4, 6, 8], &mut NoProbe).unwrap();
        let two = cumulative_logits(&lin, &feat[..4], 1, 4, &[2, 4], &mut NoProbe).unwrap();
        assert_eq!(&all[..8], &two[..]);
    }

    #[test]
    fn backward_is_the_closed_form_outer_product() {
        // single head: dW = g ⊗ f, db = g, df = Wᵀ g
        let mut rng = Rng::new(3);
        let lin = layer(&mut rng, 2, 3);
        let feat = vec![0.5, -1.0, 2.0];
        let g = vec![0.3, -0.7];
        let (df, dw, db) = cumulative_logits_backward(&lin, &feat, 1, &[3], &g);
        for n in 0..2 {
            for k in 0..3 {
                assert_eq!(dw.data()[n * 3 + k], g[n] * feat[k]);
            }
        }
        assert_eq!(db.data(), &g[..]);
        for k in 0..3 {
            let expect = g[0] * lin.weight.data()[k] + g[1] * lin.weight.data()[3 + k];
            assert!((df[k] - expect).abs() < 1e-15);
        }
    }
}
