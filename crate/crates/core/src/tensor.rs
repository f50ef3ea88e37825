//! Dense feature maps and convolution kernels.
//!
//! A [`FeatureMap`] is a row-major `height × width × channels` array with the
//! channel index fastest. Every map is generic over its scalar so the same
//! pipeline can run at 32-bit for compute and at 64-bit for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Scalar type usable by every kernel in the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Allocation accounting for feature-map storage.
///
/// Counters are per thread: the live byte count goes up when a map is
/// allocated or cloned and down when it is dropped, and the high-water mark
/// tracks the maximum since the last [`reset_peak`](memory::reset_peak).
pub mod memory {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(crate) fn on_alloc(bytes: usize) {
        LIVE.with(|live| {
            let now = live.get() + bytes;
            live.set(now);
            PEAK.with(|peak| {
                if now > peak.get() {
                    peak.set(now);
                }
            });
        });
    }

    pub(crate) fn on_free(bytes: usize) {
        LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
    }

    pub fn live_bytes() -> usize {
        LIVE.with(Cell::get)
    }

    pub fn peak_bytes() -> usize {
        PEAK.with(Cell::get)
    }

    /// Restart high-water tracking from the current live byte count.
    pub fn reset_peak() {
        let live = live_bytes();
        PEAK.with(|peak| peak.set(live));
    }

    /// Counts a scratch buffer that is not a feature map for as long as the
    /// guard lives.
    pub(crate) struct Charge(usize);

    impl Charge {
        pub(crate) fn new(bytes: usize) -> Self {
            on_alloc(bytes);
            Charge(bytes)
        }
    }

    impl Drop for Charge {
        fn drop(&mut self) {
            on_free(self.0);
        }
    }
}

/// Rank-3 dense array, `height × width × channels`, channel-fastest.
#[derive(PartialEq)]
pub struct FeatureMap<T: Real = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    fn track(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        memory::on_alloc(data.len() * std::mem::size_of::<T>());
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// All-zero map. Panics if any dimension is zero.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "feature map dimensions must be positive, got {height}x{width}x{channels}"
        );
        Self::track(height, width, channels, vec![value; height * width * channels])
    }

    /// Build a map from a function of `(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut map = Self::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    map.data[(i * width + j) * channels + c] = f(i, j, c);
                }
            }
        }
        map
    }

    /// Wrap raw row-major data, validating length and finiteness.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{height}x{width}x{channels} needs {} elements, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite element at flat index {pos}"
            )));
        }
        Ok(Self::track(height, width, channels, data))
    }

    /// Uniform random entries in `[-bound, bound)`.
    pub fn random_uniform(
        height: usize,
        width: usize,
        channels: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| {
            T::lit(rng.gen_range(-bound..bound))
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        let idx = self.index(i, j, c);
        self.data[idx] = v;
    }

    /// Channel vector at `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let start = (i * self.width + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::track(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Convert to another scalar type.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap::track(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        )
    }

    /// Per-channel arithmetic mean over all positions.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v.as_f64();
            }
        }
        let n = self.positions() as f64;
        sums.iter().map(|s| s / n).collect()
    }

    /// Per-channel `(min, max)` over all positions.
    pub fn channel_ranges(&self) -> Vec<(T, T)> {
        let mut ranges = vec![(T::infinity(), T::neg_infinity()); self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (r, &v) in ranges.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        ranges
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_err!(
                "cannot compare {:?} with {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn into_vec(mut self) -> Vec<T> {
        memory::on_free(self.data.len() * std::mem::size_of::<T>());
        std::mem::take(&mut self.data)
    }
}

impl<T: Real> Clone for FeatureMap<T> {
    fn clone(&self) -> Self {
        Self::track(self.height, self.width, self.channels, self.data.clone())
    }
}

impl<T: Real> Drop for FeatureMap<T> {
    fn drop(&mut self) {
        memory::on_free(self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T: Real> Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureMap")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

/// Convolution weights laid out `[out][in][ky][kx]`, plus one bias per output.
///
/// The same type parameterizes forward, transposed, and 1×1 convolutions;
/// for a transposed convolution `in_channels` is the channel count of the
/// map being upsampled.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T: Real = f32> {
    out_channels: usize,
    in_channels: usize,
    kernel_height: usize,
    kernel_width: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_height: usize,
        kernel_width: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_height == 0 || kernel_width == 0 {
            return Err(shape_err!("kernel dimensions must be positive"));
        }
        let expected = out_channels * in_channels * kernel_height * kernel_width;
        if weights.len() != expected {
            return Err(shape_err!(
                "kernel {out_channels}x{in_channels}x{kernel_height}x{kernel_width} needs {expected} weights, got {}",
                weights.len()
            ));
        }
        if bias.len() != out_channels {
            return Err(shape_err!(
                "bias length {} does not match {out_channels} output channels",
                bias.len()
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_height,
            kernel_width,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self::new(
            out_channels,
            in_channels,
            kh,
            kw,
            vec![T::zero(); out_channels * in_channels * kh * kw],
            vec![T::zero(); out_channels],
        )
        .expect("positive kernel dimensions")
    }

    /// Uniform init in `±sqrt(1 / (in_channels·kh·kw))` for weights and bias.
    pub fn init_uniform(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_channels * kh * kw) as f64).sqrt();
        let mut draw = || T::lit(rng.gen_range(-bound..bound));
        let weights = (0..out_channels * in_channels * kh * kw)
            .map(|_| draw())
            .collect();
        let bias = (0..out_channels).map(|_| draw()).collect();
        Self::new(out_channels, in_channels, kh, kw, weights, bias)
            .expect("positive kernel dimensions")
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_height(&self) -> usize {
        self.kernel_height
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Weights and bias borrowed mutably at once.
    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.bias)
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_channels + i) * self.kernel_height + ky) * self.kernel_width + kx]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: T) {
        let idx = ((o * self.in_channels + i) * self.kernel_height + ky) * self.kernel_width + kx;
        self.weights[idx] = v;
    }

    /// Same weights with the input and output channel roles exchanged.
    ///
    /// `conv_transpose2d(y, k.swap_roles())` is the adjoint of
    /// `conv2d(x, k)` under matching stride and padding (bias aside).
    pub fn swap_roles(&self) -> Self {
        let mut out = Self::zeros(
            self.in_channels,
            self.out_channels,
            self.kernel_height,
            self.kernel_width,
        );
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..self.kernel_height {
                    for kx in 0..self.kernel_width {
                        out.set_weight(i, o, ky, kx, self.weight(o, i, ky, kx));
                    }
                }
            }
        }
        out
    }

    /// Weights repacked as `[ky][kx][in][out]` for output-channel-contiguous loops.
    pub(crate) fn packed_hwio(&self) -> Vec<T> {
        let (co, ci, kh, kw) = (
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        );
        let mut packed = vec![T::zero(); self.weights.len()];
        for o in 0..co {
            for i in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        packed[((ky * kw + kx) * ci + i) * co + o] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        packed
    }

    /// Inverse of [`packed_hwio`](Self::packed_hwio).
    pub(crate) fn from_packed_hwio(&self, packed: &[T], bias: Vec<T>) -> Self {
        let (co, ci, kh, kw) = (
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        );
        let mut weights = vec![T::zero(); packed.len()];
        for o in 0..co {
            for i in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        weights[((o * ci + i) * kh + ky) * kw + kx] =
                            packed[((ky * kw + kx) * ci + i) * co + o];
                    }
                }
            }
        }
        Self {
            weights,
            bias,
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_height: self.kernel_height,
            kernel_width: self.kernel_width,
            weights: self.weights.iter().map(|&v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates() {
        assert!(FeatureMap::<f32>::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureMap::<f32>::from_vec(0, 2, 1, vec![]).is_err());
        assert!(FeatureMap::<f32>::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
        let m = FeatureMap::<f32>::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.get(0, 1, 0), 3.0);
        assert_eq!(m.pixel(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn kernel_validates_lengths() {
        assert!(ConvKernel::<f32>::new(2, 1, 1, 1, vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(ConvKernel::<f32>::new(1, 1, 1, 1, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn packing_round_trips() {
        let mut rng = rand::thread_rng();
        let k = ConvKernel::<f64>::init_uniform(3, 2, 2, 3, &mut rng);
        let packed = k.packed_hwio();
        assert_eq!(k.from_packed_hwio(&packed, k.bias().to_vec()), k);
        assert_eq!(k.swap_roles().swap_roles().weights(), k.weights());
    }

    #[test]
    fn accounting_tracks_live_and_peak() {
        memory::reset_peak();
        let base = memory::live_bytes();
        let a = FeatureMap::<f32>::zeros(4, 4, 4);
        let b = a.clone();
        assert_eq!(memory::live_bytes() - base, 2 * 64 * 4);
        drop(a);
        drop(b);
        assert_eq!(memory::live_bytes(), base);
        assert!(memory::peak_bytes() >= base + 2 * 64 * 4);
    }
}
