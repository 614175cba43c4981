use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with affine parameters and running
/// statistics. Each channel's statistics depend only on that channel, so the
/// op preserves channel-group causality.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

/// What the train-mode forward keeps for the reverse pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    pub(crate) batch_mean: Vec<S>,
    pub(crate) batch_var: Vec<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// First `channels` channels only, as used by a sliced model.
    pub fn truncated(&self, channels: usize) -> Self {
        BatchNorm {
            gamma: self.gamma[..channels].to_vec(),
            beta: self.beta[..channels].to_vec(),
            running_mean: self.running_mean[..channels].to_vec(),
            running_var: self.running_var[..channels].to_vec(),
        }
    }

    /// Inference-mode normalization of `[batch, channels, plane]` data in
    /// place, using running statistics. `channels` may be fewer than the
    /// layer holds.
    pub fn forward_eval(&self, data: &mut [S], batch: usize, channels: usize, plane: usize) {
        let eps = S::from_f64(BN_EPS);
        for c in 0..channels {
            let scale = self.gamma[c] / (self.running_var[c] + eps).sqrt();
            let mean = self.running_mean[c];
            let shift = self.beta[c];
            for b in 0..batch {
                for v in &mut data[(b * channels + c) * plane..][..plane] {
                    *v = (*v - mean) * scale + shift;
                }
            }
        }
    }

    /// Training-mode normalization with batch statistics (biased variance).
    pub fn forward_train(&self, data: &mut [S], batch: usize, plane: usize) -> BatchNormCache<S> {
        let channels = self.channels();
        let n = S::from_usize(batch * plane);
        let eps = S::from_f64(BN_EPS);
        let mut cache = BatchNormCache {
            xhat: vec![S::zero(); data.len()],
            inv_std: vec![S::zero(); channels],
            batch_mean: vec![S::zero(); channels],
            batch_var: vec![S::zero(); channels],
        };
        for c in 0..channels {
            let mut sum = S::zero();
            for b in 0..batch {
                for &v in &data[(b * channels + c) * plane..][..plane] {
                    sum = sum + v;
                }
            }
            let mean = sum / n;
            let mut sq = S::zero();
            for b in 0..batch {
                for &v in &data[(b * channels + c) * plane..][..plane] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            let var = sq / n;
            let inv_std = S::one() / (var + eps).sqrt();
            cache.inv_std[c] = inv_std;
            cache.batch_mean[c] = mean;
            cache.batch_var[c] = var;
            for b in 0..batch {
                let off = (b * channels + c) * plane;
                for (v, xh) in data[off..off + plane].iter_mut().zip(&mut cache.xhat[off..off + plane]) {
                    *xh = (*v - mean) * inv_std;
                    *v = *xh * self.gamma[c] + self.beta[c];
                }
            }
        }
        cache
    }

    /// Exponential update of the running statistics from one training batch.
    /// The running variance uses the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BatchNormCache<S>, count: usize) {
        let m = S::from_f64(BN_MOMENTUM);
        let keep = S::one() - m;
        let unbias = if count > 1 {
            S::from_usize(count) / S::from_usize(count - 1)
        } else {
            S::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * cache.batch_var[c] * unbias;
        }
    }

    /// Reverse pass of [`forward_train`](Self::forward_train). Consumes the
    /// output gradient and returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BatchNormCache<S>, grad_out: &[S], batch: usize, plane: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
        let channels = self.channels();
        let n = S::from_usize(batch * plane);
        let mut dx = vec![S::zero(); grad_out.len()];
        let mut dgamma = vec![S::zero(); channels];
        let mut dbeta = vec![S::zero(); channels];
        for c in 0..channels {
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for b in 0..batch {
                let off = (b * channels + c) * plane;
                for (&dy, &xh) in grad_out[off..off + plane].iter().zip(&cache.xhat[off..off + plane]) {
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * xh;
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let k = self.gamma[c] * cache.inv_std[c] / n;
            for b in 0..batch {
                let off = (b * channels + c) * plane;
                for j in off..off + plane {
                    dx[j] = k * (n * grad_out[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = Rng::new(2);
        let (b, c, p) = (4, 3, 5);
        let mut data: Vec<f64> = (0..b * c * p).map(|_| 3.0 + 2.0 * rng.normal()).collect();
        let bn = BatchNorm::<f64>::new(c);
        bn.forward_train(&mut data, b, p);
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|bi| data[(bi * c + ch) * p..][..p].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let (b, c, p) = (3, 2, 4);
        let x: Vec<f64> = (0..b * c * p).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..b * c * p).map(|_| rng.normal()).collect();
        let mut bn = BatchNorm::<f64>::new(c);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.1];
        // loss = Σ r ⊙ bn(x)
        let loss = |bn: &BatchNorm<f64>, x: &[f64]| {
            let mut y = x.to_vec();
            bn.forward_train(&mut y, b, p);
            y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.clone();
        let cache = bn.forward_train(&mut y, b, p);
        let (dx, dgamma, dbeta) = bn.backward(&cache, &r, b, p);
        let eps = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += eps;
            let mut xm = x.clone();
            xm[j] -= eps;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            assert!((fd - dx[j]).abs() < 1e-7, "dx[{j}] {fd} vs {}", dx[j]);
        }
        for ch in 0..c {
            let mut p1 = bn.clone();
            p1.gamma[ch] += eps;
            let mut m1 = bn.clone();
            m1.gamma[ch] -= eps;
            let fd = (loss(&p1, &x) - loss(&m1, &x)) / (2.0 * eps);
            assert!((fd - dgamma[ch]).abs() < 1e-7);
            let mut p2 = bn.clone();
            p2.beta[ch] += eps;
            let mut m2 = bn.clone();
            m2.beta[ch] -= eps;
            let fd = (loss(&p2, &x) - loss(&m2, &x)) / (2.0 * eps);
            assert!((fd - dbeta[ch]).abs() < 1e-7);
        }
    }
}
