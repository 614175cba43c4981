use core::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar the engine is generic over: `f32` for training,
/// `f64` for gradient verification.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Bytes per value in the little-endian model container.
    const BYTES: usize;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_usize(v: usize) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn from_usize(v: usize) -> Self {
        v as f64
    }
}
