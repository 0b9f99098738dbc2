//! Plain loop kernels behind the differentiable ops.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Spatial padding policy for 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; the odd pixel goes
    /// to the bottom/right edge.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn resolve_axis(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    axis: &'static str,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > size {
                return Err(Error::shape(
                    "conv2d",
                    format!("{axis}: kernel {kernel} does not fit input {size} without padding"),
                ));
            }
            Ok(((size - kernel) / stride + 1, 0))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        let (out_h, pad_top) = resolve_axis(height, kernel_h, stride, padding, "height")?;
        let (out_w, pad_left) = resolve_axis(width, kernel_w, stride, padding, "width")?;
        Ok(Self {
            in_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds one `C x H x W` image into a `(C*KH*KW) x (OH*OW)` matrix.
pub fn im2col<T: Element>(geom: &ConvGeometry, image: &[T], col: &mut [T]) {
    let cols = geom.col_cols();
    let mut row = 0;
    for c in 0..geom.in_channels {
        let plane = &image[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..geom.kernel_h {
            for kx in 0..geom.kernel_w {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..geom.out_h {
                    let line = &mut dst[oy * geom.out_w..(oy + 1) * geom.out_w];
                    match geom.source(oy, ky, geom.pad_top, geom.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * geom.width..(iy + 1) * geom.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match geom.source(ox, kx, geom.pad_left, geom.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Element>(geom: &ConvGeometry, col: &[T], image: &mut [T]) {
    let cols = geom.col_cols();
    let mut row = 0;
    for c in 0..geom.in_channels {
        let base = c * geom.height * geom.width;
        for ky in 0..geom.kernel_h {
            for kx in 0..geom.kernel_w {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..geom.out_h {
                    let Some(iy) = geom.source(oy, ky, geom.pad_top, geom.height) else {
                        continue;
                    };
                    for ox in 0..geom.out_w {
                        if let Some(ix) = geom.source(ox, kx, geom.pad_left, geom.width) {
                            image[base + iy * geom.width + ix] += src[oy * geom.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`.
/// Returns the pooled values and, per output, the flat input index of the
/// winning element (first in scan order on ties).
pub fn maxpool2x2<T: Element>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}
