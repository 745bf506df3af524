//! Raw loops shared by the tape ops and the tape-free diagnostics.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(strides(shape)).map(|(&i, s)| i * s).sum()
}

/// Right-aligned (numpy-style) broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an input of shape `inp` is laid over an output of shape `out`.
pub(crate) enum Layout {
    Same,
    /// Input element `(i / inner) % period`: the input's non-unit axes form
    /// one contiguous run of output axes.
    Block {
        inner: usize,
        period: usize,
    },
    Mapped(Vec<usize>),
}

/// Input offsets for output elements `0..n`, without per-element division.
pub(crate) struct Offsets<'a> {
    layout: &'a Layout,
    i: usize,
    n: usize,
    inner_pos: usize,
    block: usize,
}

impl Iterator for Offsets<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.i == self.n {
            return None;
        }
        let i = self.i;
        self.i += 1;
        Some(match self.layout {
            Layout::Same => i,
            Layout::Mapped(m) => m[i],
            Layout::Block { inner, period } => {
                let o = self.block;
                self.inner_pos += 1;
                if self.inner_pos == *inner {
                    self.inner_pos = 0;
                    self.block += 1;
                    if self.block == *period {
                        self.block = 0;
                    }
                }
                o
            }
        })
    }
}

impl Layout {
    pub(crate) fn offsets(&self, n: usize) -> Offsets<'_> {
        Offsets {
            layout: self,
            i: 0,
            n,
            inner_pos: 0,
            block: 0,
        }
    }
}

/// Offset into `inp` for every element of `out`; `inp` must broadcast to `out`.
pub(crate) fn broadcast_layout(out: &[usize], inp: &[usize]) -> Layout {
    if out == inp {
        return Layout::Same;
    }
    let rank = out.len();
    let pad = rank - inp.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(inp.iter().copied()).collect();
    let kept: Vec<usize> = (0..rank).filter(|&ax| padded[ax] != 1).collect();
    match (kept.first(), kept.last()) {
        (None, _) => return Layout::Block { inner: 1, period: 1 },
        (Some(&a), Some(&b)) if b - a + 1 == kept.len() && (a..=b).all(|ax| padded[ax] == out[ax]) => {
            return Layout::Block {
                inner: out[b + 1..].iter().product(),
                period: out[a..=b].iter().product(),
            };
        }
        _ => {}
    }
    let in_strides = strides(inp);
    // Effective stride per output axis: zero where the input is broadcast.
    let eff: Vec<usize> = (0..rank)
        .map(|ax| {
            if ax < pad || inp[ax - pad] == 1 {
                0
            } else {
                in_strides[ax - pad]
            }
        })
        .collect();
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Layout::Mapped(map)
}

/// Sum `grad` (shaped like the broadcast output) back down to `inp`'s shape.
pub(crate) fn unbroadcast(grad: &Tensor, inp: &[usize]) -> Tensor {
    let layout = broadcast_layout(grad.shape(), inp);
    if let Layout::Same = layout {
        return grad.clone();
    }
    let numel: usize = inp.iter().product();
    let mut out = vec![0.0; numel];
    for (o, g) in layout.offsets(grad.numel()).zip(grad.data()) {
        out[o] += g;
    }
    Tensor::from_parts(inp.to_vec(), out)
}

pub(crate) fn normalize_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.iter().find(|&&a| a >= rank) {
        return Err(Error::Axis { op, axis: bad, rank });
    }
    Ok(v)
}

/// Shape with reduced axes kept as extent 1.
pub(crate) fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect()
}

pub(crate) fn squeeze_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    if s.is_empty() {
        vec![1]
    } else {
        s
    }
}

pub(crate) fn reduce_sum(x: &Tensor, axes: &[usize]) -> Tensor {
    let keep = keepdim_shape(x.shape(), axes);
    let layout = broadcast_layout(x.shape(), &keep);
    let mut out = vec![0.0; keep.iter().product()];
    for (o, v) in layout.offsets(x.numel()).zip(x.data()) {
        out[o] += v;
    }
    Tensor::from_parts(keep, out)
}

/// Max over axes plus, for each output slot, the flat input index of the winner.
pub(crate) fn reduce_max(x: &Tensor, axes: &[usize]) -> (Tensor, Vec<usize>) {
    let keep = keepdim_shape(x.shape(), axes);
    let layout = broadcast_layout(x.shape(), &keep);
    let n: usize = keep.iter().product();
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    for (i, (o, &v)) in layout.offsets(x.numel()).zip(x.data()).enumerate() {
        if v > out[o] || out[o] == f64::NEG_INFINITY {
            out[o] = v;
            arg[o] = i;
        }
    }
    (Tensor::from_parts(keep, out), arg)
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = strides(&out_shape);
    let rank = shape.len();
    // For each input axis, the output stride it advances.
    let mut step = vec![0usize; rank];
    for (pos, &ax) in perm.iter().enumerate() {
        step[ax] = out_strides[pos];
    }
    let mut out = vec![0.0; x.numel()];
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for &v in x.data() {
        out[off] = v;
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += step[ax];
            if counter[ax] < shape[ax] {
                break;
            }
            off -= step[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs buffer too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs buffer too short");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: out buffer too short");
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 {
            return None;
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub(crate) fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one image (C×H×W) into a (C·k·k) × (H'·W') column matrix.
    pub(crate) fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let ol = self.out_len();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * self.out_w + ox] =
                                if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                                    img[(c * self.height + y as usize) * self.width + x as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto an image gradient.
    pub(crate) fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let k = self.kernel;
        let ol = self.out_len();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x < 0 || x as usize >= self.width {
                                continue;
                            }
                            img[(c * self.height + y as usize) * self.width + x as usize] += src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
