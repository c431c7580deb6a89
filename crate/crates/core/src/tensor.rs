//! Layer hyperparameters, dense activation/filter volumes, and depth-slice views.
//!
//! The flat layout is fixed: width is the innermost dimension, then height,
//! then depth, then batch. Index `[x, y, d, b]` maps to
//! `x + width * (y + height * (d + depth * b))`. Every other module assumes
//! this layout when reasoning about contiguous transfer sizes.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("receptive field {f} does not fit: wi + 2p = {padded} < f")]
    InvalidGeometry { padded: usize, f: usize },
    #[error("stride {s} does not divide wi + 2p - f = {span}")]
    NonIntegralOutputWidth { span: usize, s: usize },
    #[error("index out of range: {what} = {got}, extent {extent}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        extent: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("extent must be at least 1: {0}")]
    ZeroExtent(&'static str),
    #[error("fully-connected layer requires f = wi, s = 1, p = 0, wo = 1")]
    NotFullyConnected,
}

/// Numeric precision of one word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn word_bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

/// Scalar element of a volume. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const PRECISION: Precision;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Spatial extent of the output plane: `(wi + 2p - f) / s + 1`.
///
/// Errors when the filter does not fit or the stride does not divide the
/// spanned extent evenly.
pub fn output_width(wi: usize, p: usize, f: usize, s: usize) -> Result<usize, TensorError> {
    debug_assert!(wi >= 1 && f >= 1 && s >= 1);
    let padded = wi + 2 * p;
    if padded < f {
        return Err(TensorError::InvalidGeometry { padded, f });
    }
    let span = padded - f;
    if span % s != 0 {
        return Err(TensorError::NonIntegralOutputWidth { span, s });
    }
    Ok(span / s + 1)
}

/// Validated hyperparameters of one convolutional or fully-connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHyperparams {
    pub wi: usize,
    pub di: usize,
    pub wo: usize,
    pub do_: usize,
    pub f: usize,
    pub p: usize,
    pub s: usize,
    pub b: usize,
    pub precision: Precision,
}

impl LayerHyperparams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        wi: usize,
        di: usize,
        do_: usize,
        f: usize,
        p: usize,
        s: usize,
        b: usize,
        precision: Precision,
    ) -> Result<Self, TensorError> {
        for (name, v) in [("wi", wi), ("di", di), ("do", do_), ("f", f), ("s", s), ("b", b)] {
            if v == 0 {
                return Err(TensorError::ZeroExtent(name));
            }
        }
        let wo = output_width(wi, p, f, s)?;
        Ok(Self {
            wi,
            di,
            wo,
            do_,
            f,
            p,
            s,
            b,
            precision,
        })
    }

    /// FC convention: the filter covers the whole input plane, so wo = 1.
    pub fn fully_connected(
        wi: usize,
        di: usize,
        do_: usize,
        b: usize,
        precision: Precision,
    ) -> Result<Self, TensorError> {
        Self::new(wi, di, do_, wi, 0, 1, b, precision)
    }

    pub fn is_fully_connected(&self) -> bool {
        self.f == self.wi && self.s == 1 && self.p == 0 && self.wo == 1
    }

    pub fn word_bytes(&self) -> usize {
        self.precision.word_bytes()
    }
}

/// Dense 4D activation volume (width x height x depth x batch).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Element> {
    width: usize,
    height: usize,
    depth: usize,
    batch: usize,
    data: Vec<T>,
}

impl<T: Element> Volume<T> {
    pub fn zeros(width: usize, height: usize, depth: usize, batch: usize) -> Self {
        Self {
            width,
            height,
            depth,
            batch,
            data: vec![T::default(); width * height * depth * batch],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        depth: usize,
        batch: usize,
        data: Vec<T>,
    ) -> Result<Self, TensorError> {
        if data.len() != width * height * depth * batch {
            return Err(TensorError::ShapeMismatch(format!(
                "data length {} != {}x{}x{}x{}",
                data.len(),
                width,
                height,
                depth,
                batch
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            batch,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn flat_index(&self, x: usize, y: usize, d: usize, b: usize) -> usize {
        x + self.width * (y + self.height * (d + self.depth * b))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize, b: usize) -> T {
        self.data[self.flat_index(x, y, d, b)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: usize, b: usize, v: T) {
        let i = self.flat_index(x, y, d, b);
        self.data[i] = v;
    }

    fn check_slice(&self, depth_index: usize, batch_index: usize) -> Result<usize, TensorError> {
        if depth_index >= self.depth {
            return Err(TensorError::IndexOutOfRange {
                what: "depth",
                got: depth_index,
                extent: self.depth,
            });
        }
        if batch_index >= self.batch {
            return Err(TensorError::IndexOutOfRange {
                what: "batch",
                got: batch_index,
                extent: self.batch,
            });
        }
        Ok(self.width * self.height * (depth_index + self.depth * batch_index))
    }

    /// Read-only view over one width x height plane.
    pub fn slice_view(&self, depth_index: usize, batch_index: usize) -> Result<SliceView<'_, T>, TensorError> {
        let off = self.check_slice(depth_index, batch_index)?;
        Ok(SliceView {
            width: self.width,
            height: self.height,
            data: &self.data[off..off + self.width * self.height],
        })
    }

    /// Mutable view over one width x height plane; writes land in the volume.
    pub fn slice_view_mut(
        &mut self,
        depth_index: usize,
        batch_index: usize,
    ) -> Result<SliceViewMut<'_, T>, TensorError> {
        let off = self.check_slice(depth_index, batch_index)?;
        let (w, h) = (self.width, self.height);
        Ok(SliceViewMut {
            width: w,
            height: h,
            data: &mut self.data[off..off + w * h],
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SliceView<'a, T: Element> {
    width: usize,
    height: usize,
    data: &'a [T],
}

impl<'a, T: Element> SliceView<'a, T> {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.width * y]
    }
    pub fn as_slice(&self) -> &'a [T] {
        self.data
    }
}

#[derive(Debug)]
pub struct SliceViewMut<'a, T: Element> {
    width: usize,
    height: usize,
    data: &'a mut [T],
}

impl<'a, T: Element> SliceViewMut<'a, T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.width * y]
    }
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[x + self.width * y] = v;
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.data
    }
}

/// Filter parameters of one layer: extents f x f x di x do, same layout rule
/// (filter column innermost, then row, then input depth, then output depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Filters<T: Element> {
    f: usize,
    di: usize,
    do_: usize,
    data: Vec<T>,
}

impl<T: Element> Filters<T> {
    pub fn zeros(f: usize, di: usize, do_: usize) -> Self {
        Self {
            f,
            di,
            do_,
            data: vec![T::default(); f * f * di * do_],
        }
    }

    pub fn from_data(f: usize, di: usize, do_: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != f * f * di * do_ {
            return Err(TensorError::ShapeMismatch(format!(
                "filter data length {} != {}^2 x {} x {}",
                data.len(),
                f,
                di,
                do_
            )));
        }
        Ok(Self { f, di, do_, data })
    }

    pub fn field(&self) -> usize {
        self.f
    }
    pub fn in_depth(&self) -> usize {
        self.di
    }
    pub fn out_depth(&self) -> usize {
        self.do_
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// One f x f kernel for the (di, do) slice pair.
    pub fn kernel(&self, di: usize, do_: usize) -> Result<SliceView<'_, T>, TensorError> {
        if di >= self.di {
            return Err(TensorError::IndexOutOfRange {
                what: "filter di",
                got: di,
                extent: self.di,
            });
        }
        if do_ >= self.do_ {
            return Err(TensorError::IndexOutOfRange {
                what: "filter do",
                got: do_,
                extent: self.do_,
            });
        }
        let off = self.f * self.f * (di + self.di * do_);
        Ok(SliceView {
            width: self.f,
            height: self.f,
            data: &self.data[off..off + self.f * self.f],
        })
    }

    pub fn kernel_mut(&mut self, di: usize, do_: usize) -> &mut [T] {
        let off = self.f * self.f * (di + self.di * do_);
        &mut self.data[off..off + self.f * self.f]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_width_known_values() {
        assert_eq!(output_width(32, 1, 3, 1).unwrap(), 32);
        assert_eq!(output_width(7, 0, 7, 1).unwrap(), 1);
        assert!(matches!(
            output_width(5, 0, 2, 2),
            Err(TensorError::NonIntegralOutputWidth { .. })
        ));
        assert!(matches!(
            output_width(2, 0, 5, 1),
            Err(TensorError::InvalidGeometry { .. })
        ));
    }

    #[test]
    fn fc_convention_always_yields_one() {
        for wi in 1..40 {
            assert_eq!(output_width(wi, 0, wi, 1).unwrap(), 1);
        }
        let h = LayerHyperparams::fully_connected(7, 3, 5, 2, Precision::Single).unwrap();
        assert_eq!(h.wo, 1);
        assert!(h.is_fully_connected());
    }

    #[test]
    fn hyperparams_reject_invalid_geometry() {
        assert!(LayerHyperparams::new(5, 1, 1, 2, 0, 2, 1, Precision::Double).is_err());
        assert!(LayerHyperparams::new(5, 0, 1, 3, 0, 1, 1, Precision::Double).is_err());
        let h = LayerHyperparams::new(32, 128, 128, 3, 1, 1, 1, Precision::Single).unwrap();
        assert_eq!(h.wo, 32);
    }

    #[test]
    fn slice_view_reads_zero_volume() {
        let v: Volume<f64> = Volume::zeros(4, 4, 3, 1);
        let s = v.slice_view(0, 0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(s.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn slice_view_mut_writes_through() {
        let mut v: Volume<f64> = Volume::zeros(4, 4, 3, 2);
        {
            let mut s = v.slice_view_mut(2, 1).unwrap();
            s.set(1, 3, 1.0);
        }
        let idx = v.flat_index(1, 3, 2, 1);
        assert_eq!(v.data()[idx], 1.0);
        // layout identity at the origin
        let mut v2: Volume<f32> = Volume::zeros(3, 3, 3, 1);
        v2.slice_view_mut(0, 0).unwrap().set(0, 0, 1.0);
        assert_eq!(v2.data()[0], 1.0);
    }

    #[test]
    fn slice_view_bound_check() {
        let v: Volume<f32> = Volume::zeros(2, 2, 3, 1);
        assert!(matches!(
            v.slice_view(3, 0),
            Err(TensorError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            v.slice_view(0, 1),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn flat_index_matches_view_round_trip() {
        let mut v: Volume<f64> = Volume::zeros(3, 4, 2, 2);
        let mut n = 0.0;
        for b in 0..2 {
            for d in 0..2 {
                for y in 0..4 {
                    for x in 0..3 {
                        v.set(x, y, d, b, n);
                        n += 1.0;
                    }
                }
            }
        }
        for b in 0..2 {
            for d in 0..2 {
                let s = v.slice_view(d, b).unwrap();
                for y in 0..4 {
                    for x in 0..3 {
                        assert_eq!(s.get(x, y), v.data()[v.flat_index(x, y, d, b)]);
                    }
                }
            }
        }
    }
}
