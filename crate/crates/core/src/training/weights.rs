use alloc::format;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// How a [`LossWeightMatrix`] was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    /// `λ(l, c) = 1`
    Flat,
    /// `λ(l, c) = γ^-(l+c)`, favouring cheap heads.
    Descend { gamma: f64 },
    /// `λ(l, c) = γ^(l+c)`, favouring expensive heads.
    Ascend { gamma: f64 },
    /// User-supplied table.
    Custom,
    /// `λ(l*, c*) = weight`, every other head `base`. Coordinates are 1-based.
    SinglePick { l: usize, c: usize, weight: f64, base: f64 },
}

impl core::fmt::Display for WeightKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WeightKind::Flat => write!(f, "flat"),
            WeightKind::Descend { gamma } => write!(f, "descend γ={gamma}"),
            WeightKind::Ascend { gamma } => write!(f, "ascend γ={gamma}"),
            WeightKind::Custom => write!(f, "custom"),
            WeightKind::SinglePick { l, c, weight, base } => write!(f, "pick ({l},{c}) k={weight} base={base}"),
        }
    }
}

/// Per-head multipliers `λ(l, c)` of the aggregate loss. All entries are
/// finite and non-negative, at least one is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeightMatrix {
    values: Grid<f64>,
    kind: WeightKind,
}

impl LossWeightMatrix {
    /// Builds `kind` on an `layers × groups` grid. `Custom` is not
    /// constructible here; use [`custom`](Self::custom).
    pub fn make(kind: WeightKind, layers: usize, groups: usize) -> Result<Self> {
        let values = match &kind {
            WeightKind::Flat => Grid::filled(layers, groups, 1.0),
            WeightKind::Descend { gamma } | WeightKind::Ascend { gamma } => {
                if !(*gamma > 1.0) || !gamma.is_finite() {
                    return Err(Error::GammaNotAboveOne(*gamma));
                }
                let sign = if matches!(kind, WeightKind::Descend { .. }) { -1.0 } else { 1.0 };
                Grid::from_fn(layers, groups, |r, c| Float::powf(*gamma, sign * (r + 1 + c + 1) as f64))
            }
            WeightKind::SinglePick { l, c, weight, base } => {
                if *l == 0 || *c == 0 || *l > layers || *c > groups {
                    return Err(Error::HeadOutOfRange {
                        l: *l,
                        c: *c,
                        layers,
                        groups,
                    });
                }
                Grid::from_fn(layers, groups, |r, cc| if (r + 1, cc + 1) == (*l, *c) { *weight } else { *base })
            }
            WeightKind::Custom => {
                return Err(Error::InvalidWeights("custom weights need a table".into()));
            }
        };
        Self::validated(values, kind)
    }

    pub fn flat(layers: usize, groups: usize) -> Self {
        Self::make(WeightKind::Flat, layers, groups).expect("flat weights are valid")
    }

    /// Weight 1 at head `(l, c)` and 0 elsewhere.
    pub fn one_hot(layers: usize, groups: usize, l: usize, c: usize) -> Result<Self> {
        Self::make(
            WeightKind::SinglePick {
                l,
                c,
                weight: 1.0,
                base: 0.0,
            },
            layers,
            groups,
        )
    }

    pub fn custom(values: Grid<f64>) -> Result<Self> {
        Self::validated(values, WeightKind::Custom)
    }

    fn validated(values: Grid<f64>, kind: WeightKind) -> Result<Self> {
        if let Some(((r, c), v)) = values.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidWeights(format!("entry ({}, {}) = {v} is negative or non-finite", r + 1, c + 1)));
        }
        if values.as_slice().iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroWeightSum);
        }
        Ok(LossWeightMatrix { values, kind })
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn sum(&self) -> f64 {
        self.values.as_slice().iter().sum()
    }

    /// Multiplies every entry by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::validated(self.values.map(|v| v * k), self.kind.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn descend_and_ascend_values() {
        let d = LossWeightMatrix::make(WeightKind::Descend { gamma: 2.0 }, 2, 2).unwrap();
        assert_eq!(d.values().as_slice(), &[0.25, 0.125, 0.125, 0.0625]);
        let a = LossWeightMatrix::make(WeightKind::Ascend { gamma: 2.0 }, 2, 2).unwrap();
        assert_eq!(a.values().as_slice(), &[4.0, 8.0, 8.0, 16.0]);
    }

    #[test]
    fn gamma_must_exceed_one() {
        for g in [1.0, 0.5, -2.0, f64::NAN] {
            assert!(LossWeightMatrix::make(WeightKind::Descend { gamma: g }, 2, 2).is_err());
            assert!(LossWeightMatrix::make(WeightKind::Ascend { gamma: g }, 2, 2).is_err());
        }
    }

    #[test]
    fn single_pick_center_of_sixteen() {
        let kind = WeightKind::SinglePick {
            l: 8,
            c: 8,
            weight: 100.0,
            base: 1.0,
        };
        let m = LossWeightMatrix::make(kind, 16, 16).unwrap();
        assert_eq!(m.values()[(7, 7)], 100.0);
        assert_eq!(m.values().as_slice().iter().filter(|&&v| v == 1.0).count(), 255);
        assert_eq!(m.sum(), 355.0);
    }

    #[test]
    fn rejects_all_zero_and_negative() {
        assert_eq!(
            LossWeightMatrix::custom(Grid::filled(2, 2, 0.0)).unwrap_err(),
            Error::ZeroWeightSum
        );
        let g = Grid::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        assert!(LossWeightMatrix::custom(g).is_err());
        assert!(LossWeightMatrix::one_hot(2, 2, 3, 1).is_err());
    }
}
