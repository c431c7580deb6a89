//! Numerical primitives and naive single-memory oracle layers.
//!
//! The oracles never touch the machine model; they are the independent
//! ground truth the schedules are checked against. Accumulation orders are
//! fixed so that schedules which keep the same order can be compared
//! bit-exactly.

use crate::tensor::{output_width, Element, Filters, LayerHyperparams, SliceView, TensorError, Volume};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("extent mismatch: {0} vs {1}")]
    ExtentMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Geometry(#[from] TensorError),
}

/// One width x height plane with a square extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D<T: Element> {
    extent: usize,
    values: Vec<T>,
}

impl<T: Element> Slice2D<T> {
    pub fn zeros(extent: usize) -> Self {
        Self {
            extent,
            values: vec![T::default(); extent * extent],
        }
    }

    pub fn from_values(extent: usize, values: Vec<T>) -> Result<Self, KernelError> {
        if values.len() != extent * extent {
            return Err(KernelError::ShapeMismatch(format!(
                "slice data length {} != {}^2",
                values.len(),
                extent
            )));
        }
        Ok(Self { extent, values })
    }

    pub fn from_view(view: SliceView<'_, T>) -> Result<Self, KernelError> {
        if view.width() != view.height() {
            return Err(KernelError::ExtentMismatch(view.width(), view.height()));
        }
        Ok(Self {
            extent: view.width(),
            values: view.as_slice().to_vec(),
        })
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[x + self.extent * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.values[x + self.extent * y] = v;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// 2D convolution of one depth slice with one kernel.
///
/// `out[x, y] = sum over (v outer, u inner, both ascending) of
/// in_padded[s*x + u, s*y + v] * kernel[u, v]`, where the input reads as
/// zero outside its extent. Padding is realized by bounds checks, never by
/// materialized zero borders.
pub fn conv2d_slice<T: Element>(
    input: &Slice2D<T>,
    kernel: &Slice2D<T>,
    p: usize,
    s: usize,
) -> Result<Slice2D<T>, KernelError> {
    let wi = input.extent();
    let f = kernel.extent();
    let wo = output_width(wi, p, f, s)?;
    let mut out = Slice2D::zeros(wo);
    for y in 0..wo {
        for x in 0..wo {
            let mut acc = T::default();
            for v in 0..f {
                for u in 0..f {
                    // padded coordinate minus p, skipped while in the border
                    let px = s * x + u;
                    let py = s * y + v;
                    if px < p || py < p {
                        continue;
                    }
                    let ix = px - p;
                    let iy = py - p;
                    if ix >= wi || iy >= wi {
                        continue;
                    }
                    acc += input.get(ix, iy) * kernel.get(u, v);
                }
            }
            out.set(x, y, acc);
        }
    }
    Ok(out)
}

/// Accumulate a convolution into an existing output plane, same order as
/// `conv2d_slice`. This is the per-slice step every conv schedule executes.
pub fn conv2d_accumulate<T: Element>(
    out: &mut [T],
    input: &[T],
    wi: usize,
    kernel: &[T],
    f: usize,
    p: usize,
    s: usize,
    wo: usize,
) {
    debug_assert_eq!(out.len(), wo * wo);
    debug_assert_eq!(input.len(), wi * wi);
    debug_assert_eq!(kernel.len(), f * f);
    for y in 0..wo {
        for x in 0..wo {
            let mut acc = T::default();
            for v in 0..f {
                for u in 0..f {
                    let px = s * x + u;
                    let py = s * y + v;
                    if px < p || py < p {
                        continue;
                    }
                    let ix = px - p;
                    let iy = py - p;
                    if ix >= wi || iy >= wi {
                        continue;
                    }
                    acc += input[ix + wi * iy] * kernel[u + f * v];
                }
            }
            out[x + wo * y] += acc;
        }
    }
}

/// Element-wise multiply-accumulate of two equal planes, flat index order.
pub fn elem_mac<T: Element>(a: &Slice2D<T>, b: &Slice2D<T>) -> Result<T, KernelError> {
    if a.extent() != b.extent() {
        return Err(KernelError::ExtentMismatch(a.extent(), b.extent()));
    }
    Ok(elem_mac_flat(a.values(), b.values()))
}

pub fn elem_mac_flat<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::default();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

fn check_conv_shapes<T: Element>(
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<(), KernelError> {
    if T::PRECISION != h.precision {
        return Err(KernelError::ShapeMismatch(format!(
            "element precision {:?} != layer precision {:?}",
            T::PRECISION,
            h.precision
        )));
    }
    if input.width() != h.wi || input.height() != h.wi || input.depth() != h.di {
        return Err(KernelError::ShapeMismatch(format!(
            "input {}x{}x{} does not match wi={} di={}",
            input.width(),
            input.height(),
            input.depth(),
            h.wi,
            h.di
        )));
    }
    if filters.field() != h.f || filters.in_depth() != h.di || filters.out_depth() != h.do_ {
        return Err(KernelError::ShapeMismatch(format!(
            "filters {}x{}x{} do not match f={} di={} do={}",
            filters.field(),
            filters.in_depth(),
            filters.out_depth(),
            h.f,
            h.di,
            h.do_
        )));
    }
    Ok(())
}

/// Naive convolutional layer: `O[:,:,do] = sum over ascending di of
/// conv2d_slice(I[:,:,di], F[:,:,di,do])`. Conv layers are unbatched.
pub fn oracle_conv_layer<T: Element>(
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<Volume<T>, KernelError> {
    check_conv_shapes(h, input, filters)?;
    if h.b != 1 || input.batch() != 1 {
        return Err(KernelError::ShapeMismatch(
            "conv layers are unbatched (b = 1)".into(),
        ));
    }
    let mut out = Volume::zeros(h.wo, h.wo, h.do_, 1);
    for do_ in 0..h.do_ {
        for di in 0..h.di {
            let in_slice = input.slice_view(di, 0).map_err(KernelError::Geometry)?;
            let kernel = filters.kernel(di, do_).map_err(KernelError::Geometry)?;
            let mut out_slice = out.slice_view_mut(do_, 0).map_err(KernelError::Geometry)?;
            conv2d_accumulate(
                out_slice.as_mut_slice(),
                in_slice.as_slice(),
                h.wi,
                kernel.as_slice(),
                h.f,
                h.p,
                h.s,
                h.wo,
            );
        }
    }
    Ok(out)
}

/// Naive fully-connected layer: `O[0,0,do,b] = sum over ascending di of
/// elem_mac(I[:,:,di,b], F[:,:,di,do])`.
pub fn oracle_fc_layer<T: Element>(
    h: &LayerHyperparams,
    input: &Volume<T>,
    filters: &Filters<T>,
) -> Result<Volume<T>, KernelError> {
    check_conv_shapes(h, input, filters)?;
    if !h.is_fully_connected() {
        return Err(KernelError::ShapeMismatch(
            "not a fully-connected layer (need f = wi, p = 0, s = 1)".into(),
        ));
    }
    if input.batch() != h.b {
        return Err(KernelError::ShapeMismatch(format!(
            "input batch {} != b = {}",
            input.batch(),
            h.b
        )));
    }
    let mut out = Volume::zeros(1, 1, h.do_, h.b);
    for b in 0..h.b {
        for do_ in 0..h.do_ {
            let mut acc = T::default();
            for di in 0..h.di {
                let in_slice = input.slice_view(di, b).map_err(KernelError::Geometry)?;
                let kernel = filters.kernel(di, do_).map_err(KernelError::Geometry)?;
                acc += elem_mac_flat(in_slice.as_slice(), kernel.as_slice());
            }
            out.set(0, 0, do_, b, acc);
        }
    }
    Ok(out)
}
