//! Labelled image sets, the synthetic oriented-bar task and deterministic
//! mini-batching.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[count, channels, h, w]` with values in `[0, 1]` and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDataset("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, h, w)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Stacks the given samples into a `[n, c, h, w]` batch.
    pub fn gather<S: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| S::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// Orientation of class `k` in degrees: horizontal, vertical, the two
/// diagonals, then the four intermediate angles.
const ORIENTATIONS_DEG: [f64; 8] = [0.0, 90.0, 45.0, 135.0, 22.5, 112.5, 67.5, 157.5];

pub const MAX_BAR_CLASSES: usize = ORIENTATIONS_DEG.len();

/// Noise-free `hw × hw` template of class `class`: pixels whose centre lies
/// within 0.75 of the line through the image centre at the class angle.
pub fn bar_template(class: usize, hw: usize) -> Vec<f32> {
    let theta = ORIENTATIONS_DEG[class].to_radians();
    let (sin, cos) = (Float::sin(theta), Float::cos(theta));
    let centre = hw as f64 / 2.0;
    let mut out = Vec::with_capacity(hw * hw);
    for y in 0..hw {
        for x in 0..hw {
            let dx = x as f64 + 0.5 - centre;
            let dy = y as f64 + 0.5 - centre;
            let dist = Float::abs(dx * sin - dy * cos);
            out.push(if dist <= 0.75 { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Single-channel oriented-bar images plus clamped Gaussian noise.
///
/// Sample `i` has class `i % num_classes`, so class counts differ by at
/// most one. Fully determined by the arguments.
pub fn synth_bars(count: usize, hw: usize, num_classes: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || num_classes > MAX_BAR_CLASSES {
        return Err(Error::InvalidDataset(format!(
            "bar dataset supports 2..={MAX_BAR_CLASSES} classes, got {num_classes}"
        )));
    }
    if count == 0 || hw < 3 || !(noise_sigma >= 0.0) {
        return Err(Error::InvalidDataset("need count > 0, hw >= 3 and noise_sigma >= 0".into()));
    }
    let templates: Vec<Vec<f32>> = (0..num_classes).map(|k| bar_template(k, hw)).collect();
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(count * hw * hw);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % num_classes;
        labels.push(class);
        for &t in &templates[class] {
            let v = if noise_sigma > 0.0 {
                (t as f64 + noise_sigma * rng.normal()).clamp(0.0, 1.0) as f32
            } else {
                t
            };
            data.push(v);
        }
    }
    Dataset::new(Tensor::from_vec(&[count, 1, hw, hw], data)?, labels, num_classes, Split::Train)
}

/// Train/test pair drawn from the bar task; the test set uses `seed + 1`.
pub fn synth_bars_split(
    train: usize,
    test: usize,
    hw: usize,
    num_classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let tr = synth_bars(train, hw, num_classes, noise_sigma, seed)?;
    let mut te = synth_bars(test, hw, num_classes, noise_sigma, seed.wrapping_add(1))?;
    te.split = Split::Test;
    Ok((tr, te))
}

/// Index batches of one epoch. The permutation is a pure function of
/// `(seed, epoch)`; a final partial batch is dropped.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} must be in 1..={len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    Rng::with_stream(seed, epoch).shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_images_are_templates() {
        let d = synth_bars(8, 8, 4, 0.0, 3).unwrap();
        for i in 0..8 {
            let t = bar_template(i % 4, 8);
            assert_eq!(&d.images().data()[i * 64..(i + 1) * 64], &t[..]);
        }
        // horizontal bar covers the two middle rows
        let h = bar_template(0, 8);
        assert_eq!(h.iter().filter(|&&v| v == 1.0).count(), 16);
        assert!(h[3 * 8..5 * 8].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn templates_are_distinct() {
        let ts: Vec<_> = (0..MAX_BAR_CLASSES).map(|k| bar_template(k, 8)).collect();
        for a in 0..ts.len() {
            for b in a + 1..ts.len() {
                assert_ne!(ts[a], ts[b], "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_bars(600, 8, 3, 0.3, 7).unwrap();
        let b = synth_bars(600, 8, 3, 0.3, 7).unwrap();
        assert!(a.images().bit_eq(b.images()));
        let counts: Vec<usize> = (0..3).map(|k| a.labels().iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(counts, [200, 200, 200]);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(synth_bars(600, 8, 3, 0.3, 8).unwrap(), a);
    }

    #[test]
    fn rejects_too_many_classes() {
        assert!(synth_bars(10, 8, 9, 0.1, 0).is_err());
    }

    #[test]
    fn batching_partitions_and_repeats() {
        let one = batches(10, 10, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let mut all = one[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let a = batches(103, 10, 5, 2).unwrap();
        assert_eq!(a, batches(103, 10, 5, 2).unwrap());
        assert_ne!(a, batches(103, 10, 5, 3).unwrap());
        assert_eq!(a.len(), 10);
        let mut seen: Vec<usize> = a.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
        assert!(batches(5, 6, 0, 0).is_err());
    }
}
