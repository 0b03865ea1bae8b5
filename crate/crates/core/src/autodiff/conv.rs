//! im2col lowering for 2-D cross-correlation.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `C_in·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `N·H'·W'`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Lays input windows out as a `[C_in·k·k, N·H'·W']` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * plane..][..plane];
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let dst = &mut dst_row[(n * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *d = src[iy * g.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_accumulate<T: Real>(cols: &[T], g: &ConvGeometry, grad_input: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = g.positions();
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut grad_input[(n * g.in_channels + c) * plane..][..plane];
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let src = &src_row[(n * ho + oy) * wo..][..wo];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                dst[iy * g.width + ix] = dst[iy * g.width + ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, N·P]` → `[N, C, P]`.
pub(crate) fn channel_major_to_batch_major<T: Real>(
    src: &[T],
    channels: usize,
    batch: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for n in 0..batch {
            out[(n * channels + c) * plane..][..plane]
                .copy_from_slice(&src[(c * batch + n) * plane..][..plane]);
        }
    }
    out
}

/// `[N, C, P]` → `[C, N·P]`.
pub(crate) fn batch_major_to_channel_major<T: Real>(
    src: &[T],
    channels: usize,
    batch: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(c * batch + n) * plane..][..plane]
                .copy_from_slice(&src[(n * channels + c) * plane..][..plane]);
        }
    }
    out
}
