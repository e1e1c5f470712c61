//! Raw numeric kernels shared by the tape operations.

use crate::tensor::Element;

/// Geometry of a square-kernel, stride-1 convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, pad: usize) -> Option<Self> {
        let h = (height + 2 * pad).checked_sub(kernel)? + 1;
        let w = (width + 2 * pad).checked_sub(kernel)? + 1;
        Some(ConvGeom { channels, height, width, kernel, pad, out_h: h, out_w: w })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` lies inside `0..width`.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.out_w);
    let hi = (g.width + g.pad).saturating_sub(kx).min(g.out_w).max(lo);
    (lo, hi)
}

/// Unfold one `C×H×W` sample into a `(C·k·k) × (out_h·out_w)` column block whose
/// rows start `row_stride` elements apart in `cols`.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, input: &[T], cols: &mut [T], row_stride: usize) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                let dst = &mut cols[row * row_stride..row * row_stride + g.out_len()];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = iy * g.width + lo + kx - g.pad;
                    line[lo..hi].copy_from_slice(&plane[start..start + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C×H×W` sample.
pub(crate) fn col2im_add<T: Element>(g: &ConvGeom, cols: &[T], row_stride: usize, out: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                let src = &cols[row * row_stride..row * row_stride + g.out_len()];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.height {
                        continue;
                    }
                    let start = iy * g.width + lo + kx - g.pad;
                    let dst = &mut plane[start..start + (hi - lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * g.out_w + lo..oy * g.out_w + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// 2×2/stride-2 max pooling of one plane; odd extents are padded on the right with −∞.
/// Returns argmax input offsets, first maximal element (row-major) wins.
pub(crate) fn maxpool_plane<T: Element>(
    input: &[T],
    height: usize,
    width: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (height.div_ceil(2), width.div_ceil(2));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = T::neg_infinity();
            let mut best_at = usize::MAX;
            for dy in 0..2 {
                let y = 2 * oy + dy;
                if y >= height {
                    continue;
                }
                for dx in 0..2 {
                    let x = 2 * ox + dx;
                    if x >= width {
                        continue;
                    }
                    let v = input[y * width + x];
                    if best_at == usize::MAX || v > best {
                        best = v;
                        best_at = y * width + x;
                    }
                }
            }
            out[oy * ow + ox] = best;
            argmax[oy * ow + ox] = best_at as u32;
        }
    }
}

/// Row-wise softmax of `logits / temperature`, max-stabilised.
pub(crate) fn softmax_rows<T: Element>(logits: &[T], cols: usize, temperature: T, out: &mut [T]) {
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / temperature).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
}
