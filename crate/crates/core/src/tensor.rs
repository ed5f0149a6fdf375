//! Dense channel-height-width tensors and label maps.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Floating point element type. Pipeline tensors use `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Sum + Send + Sync + 'static {
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Semantic role of a tensor's contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Image,
    Feature,
    Logits,
    Probs,
    Alpha,
    Flow,
    Mask,
}

/// Row-major tensor of rank at most 4. Rank-3 tensors are read as
/// (channels, height, width); a rank-2 tensor is a single-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    kind: Kind,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>, kind: Kind) -> Result<Self> {
        if dims.len() > 4 {
            return shape_err(format!("rank {} exceeds 4", dims.len()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!("dims {:?} need {} values, got {}", dims, n, data.len()));
        }
        Ok(Self { dims, data, kind })
    }

    pub fn zeros(c: usize, h: usize, w: usize, kind: Kind) -> Self {
        Self { dims: vec![c, h, w], data: vec![T::zero(); c * h * w], kind }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: T, kind: Kind) -> Self {
        Self { dims: vec![c, h, w], data: vec![value; c * h * w], kind }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, kind: Kind, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { dims: vec![c, h, w], data, kind }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn with_kind(mut self, kind: Kind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (channels, height, width) view of a rank-2 or rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            [n, c, h, w] if *n == 1 => (*c, *h, *w),
            _ => panic!("tensor of dims {:?} has no channel-height-width reading", self.dims),
        }
    }

    pub fn channels(&self) -> usize {
        self.chw().0
    }

    pub fn height(&self) -> usize {
        self.chw().1
    }

    pub fn width(&self) -> usize {
        self.chw().2
    }

    pub fn plane(&self) -> usize {
        let (_, h, w) = self.chw();
        h * w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_spatial(&self, other: &Tensor<T>) -> bool {
        let (_, h, w) = self.chw();
        let (_, h2, w2) = other.chw();
        h == h2 && w == w2
    }

    pub fn ensure_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.chw() != other.chw() {
            return shape_err(format!("{}: {:?} vs {:?}", what, self.chw(), other.chw()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect(), kind: self.kind }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!("elementwise: {:?} vs {:?}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims.clone(), data, kind: self.kind })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("accumulate: {:?} vs {:?}", self.dims, other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Multiplies every channel by a single-channel map of the same spatial size.
    pub fn mul_map(&self, map: &Tensor<T>) -> Result<Self> {
        if !self.same_spatial(map) || map.channels() != 1 {
            return shape_err("mul_map needs a single-channel map of equal spatial size");
        }
        let p = self.plane();
        let m = map.data();
        let data = self.data.iter().enumerate().map(|(i, &v)| v * m[i % p]).collect();
        Ok(Self { dims: self.dims.clone(), data, kind: self.kind })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            kind: self.kind,
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the invariants attached to this tensor's kind.
    pub fn validate(&self) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::NonFinite(format!("{:?} tensor", self.kind)));
        }
        match self.kind {
            Kind::Probs => {
                let (c, _, _) = self.chw();
                let p = self.plane();
                let tol = T::lit(1e-5);
                for i in 0..p {
                    let s: T = (0..c).map(|ch| self.data[ch * p + i]).sum();
                    if (s - T::one()).abs() > tol {
                        return Err(Error::InvalidArgument(format!("probabilities sum to {:?} at pixel {}", s, i)));
                    }
                }
            }
            Kind::Alpha => {
                if self.channels() != 1 {
                    return shape_err("alpha maps have one channel");
                }
                if self.data.iter().any(|&v| v < T::zero() || v > T::one()) {
                    return Err(Error::InvalidArgument("alpha outside [0, 1]".into()));
                }
            }
            Kind::Mask => {
                if self.data.iter().any(|&v| v != T::zero() && v != T::one()) {
                    return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
                }
            }
            Kind::Flow => {
                if self.channels() != 2 {
                    return shape_err("flow fields have two channels");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("label map {}x{} needs {} values, got {}", height, width, height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}
