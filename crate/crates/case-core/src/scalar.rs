use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type for tensors and the autodiff tape.
///
/// Implemented for `f32` and `f64`. Math that must not lose precision
/// regardless of the build's compute type (metrics, Adam's bias-correction
/// schedule, flop accounting) is always done in `f64`; this trait carries the
/// conversions.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Sum + Default + Display + Debug + Send + Sync + 'static
{
    /// Bytes per element in serialized form.
    const BYTE_WIDTH: usize;
    /// Dtype name stored in checkpoint manifests.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from `bytes` (must be exactly `BYTE_WIDTH` long).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTE_WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTE_WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}
