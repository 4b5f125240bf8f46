use super::Real;
use crate::error::{Error, Result};

/// Resolved extents of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    // Only trailing padding may be left unvisited by the last window; a dropped
    // input row/column means the output extent is not integral.
    if span % stride > pad {
        return Err(Error::dim(format!(
            "output extent ({extent}+2·{pad}−{kernel})/{stride}+1 is not integral"
        )));
    }
    Ok(span / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects B×C×H×W input and O×C×k×k weight, got {x:?} and {w:?}"
            )));
        }
        if w[1] != x[1] || w[2] != w[3] {
            return Err(Error::dim(format!(
                "conv2d weight {w:?} incompatible with input {x:?}"
            )));
        }
        if !matches!(w[2], 1 | 3) {
            return Err(Error::dim(format!("conv2d kernel must be 1 or 3, got {}", w[2])));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let out_h = out_extent(x[2], w[2], stride, pad)?;
        let out_w = out_extent(x[3], w[2], stride, pad)?;
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            in_h: x[2],
            in_w: x[3],
            out_ch: w[0],
            kernel: w[2],
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Multiply-adds for the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.col_rows() * self.out_pixels()) as u64
    }

    /// Output columns `lo..hi` whose kernel tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let reach = self.in_w + self.pad;
        let hi = if reach > kj { ((reach - kj - 1) / self.stride + 1).min(self.out_w) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfold one sample (C×H×W) into a `col_rows × out_pixels` block whose
    /// rows are `ld` apart in `cols`.
    pub(crate) fn im2col<T: Real>(&self, x: &[T], cols: &mut [T], ld: usize) {
        let k = self.kernel;
        let op = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ld..row * ld + op];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        let (lo, hi) = self.valid_cols(kj);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back into a C×H×W sample.
    pub(crate) fn col2im<T: Real>(&self, cols: &[T], ld: usize, dx: &mut [T]) {
        let k = self.kernel;
        let op = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ld..row * ld + op];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        let line = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        let (lo, hi) = self.valid_cols(kj);
                        let first = lo * self.stride + kj - self.pad;
                        for (d, &g) in dst[first..].iter_mut().step_by(self.stride).zip(&line[lo..hi]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
}
