//! Patch unrolling for 2-D convolutions.
//!
//! `ConvGeom` always describes the *convolution* direction: a `channels ×
//! in_h × in_w` image is read through `k × k` windows at `stride` with
//! zero padding `pad`, yielding an `out_h × out_w` grid. Transposed
//! convolutions reuse the same geometry with the roles swapped.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Self {
            channels,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    /// Rows of the unrolled matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Unroll `img` (`channels × in_h × in_w`) into `cols`
    /// (`patch_len × out_len`, row-major).
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        debug_assert_eq!(img.len(), self.in_len());
        debug_assert_eq!(cols.len(), self.patch_len() * self.out_len());
        let (ow, olen) = (self.out_w, self.out_len());
        for c in 0..self.channels {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * olen..(row + 1) * olen];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let seg = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.in_h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, out) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `cols` back into `img`.
    /// `img` is accumulated into, not overwritten.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        debug_assert_eq!(img.len(), self.in_len());
        debug_assert_eq!(cols.len(), self.patch_len() * self.out_len());
        let (ow, olen) = (self.out_w, self.out_len());
        for c in 0..self.channels {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * olen..(row + 1) * olen];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
