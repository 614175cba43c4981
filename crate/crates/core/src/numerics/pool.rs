use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `[B, C, H, W] -> [B, C]`: spatial mean per channel.
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape().len() != 4 {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: "global_avg_pool expects [B, C, H, W]",
        });
    }
    let [b, c, h, w] = input.dims4();
    Tensor::from_vec(&[b, c], pool_raw(input.data(), b * c, h * w))
}

/// Pools `rows` contiguous planes of `plane` values each. Sums in row-major
/// order, then divides by the plane size.
pub(crate) fn pool_raw<S: Scalar>(data: &[S], rows: usize, plane: usize) -> Vec<S> {
    let denom = S::from_usize(plane);
    (0..rows)
        .map(|r| {
            let mut acc = S::zero();
            for &v in &data[r * plane..(r + 1) * plane] {
                acc = acc + v;
            }
            acc / denom
        })
        .collect()
}

/// Spreads `grad [B, C]` uniformly back over `H × W`.
pub fn global_avg_pool_backward<S: Scalar>(grad: &Tensor<S>, hw: (usize, usize)) -> Result<Tensor<S>> {
    let (b, c) = match grad.shape() {
        &[b, c] => (b, c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "pool gradient must be [B, C]",
            })
        }
    };
    let plane = hw.0 * hw.1;
    let denom = S::from_usize(plane);
    let mut out = vec![S::zero(); b * c * plane];
    for (r, &g) in grad.data().iter().enumerate() {
        out[r * plane..(r + 1) * plane].fill(g / denom);
    }
    Tensor::from_vec(&[b, c, hw.0, hw.1], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn constant_map_pools_to_constant() {
        let x = Tensor::<f64>::filled(&[2, 3, 4, 5], 0.75).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn unit_spatial_is_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 3, 1, 1], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn matches_direct_mean() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::from_vec(&[2, 3, 4, 4], (0..96).map(|_| rng.normal()).collect()).unwrap();
        let y = global_avg_pool(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut vals = Vec::new();
                for i in 0..16 {
                    vals.push(x.data()[(b * 3 + c) * 16 + i]);
                }
                let mean = vals.iter().sum::<f64>() / 16.0;
                assert!((mean - y.data()[b * 3 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_spreads_evenly() {
        let g = Tensor::<f64>::from_vec(&[1, 2], vec![4.0, 8.0]).unwrap();
        let dx = global_avg_pool_backward(&g, (2, 2)).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
