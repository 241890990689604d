//! Floating-point element types usable by the tensor engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Training runs use `f32`; gradient checks and the Gaussian analysis use
/// `f64`.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Name written into checkpoint manifests.
    const DTYPE: &'static str;
    /// Size of one element in a checkpoint blob.
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
