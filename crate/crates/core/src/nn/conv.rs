//! Single-sample kernels behind the partial convolution op.

use super::tensor::Real;

/// Spatial layout of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out() * self.w_out()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Input coordinate for output `o` and tap `t` along one axis, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }
}

/// Number of valid taps (single-channel mask, zero padding invalid) under
/// every output window.
pub fn window_counts<T: Real>(mask: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut counts = vec![T::zero(); ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut s = T::zero();
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.w) {
                        s += mask[iy * g.w + ix];
                    }
                }
            }
            counts[oy * wo + ox] = s;
        }
    }
    counts
}

/// Unfold `x ⊙ mask` into a `(c_in·k·k) × (h_out·w_out)` row-major matrix.
pub fn im2col<T: Real>(x: &[T], mask: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let np = ho * wo;
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let base = iy * g.w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = match g.src(ox, kx, g.w) {
                            Some(ix) => xc[base + ix] * mask[base + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Fold column gradients back onto the input and gate them by the mask.
pub fn col2im_masked<T: Real>(dcols: &[T], mask: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let np = ho * wo;
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &dcols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let base = iy * g.w;
                    for ox in 0..wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dxc[base + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
        for (d, &m) in dxc.iter_mut().zip(&mask[..plane]) {
            *d *= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_of_stride_two() {
        let g = ConvGeom { c_in: 2, h: 8, w: 6, k: 3, stride: 2, pad: 1 };
        assert_eq!((g.h_out(), g.w_out()), (4, 3));
        let g = ConvGeom { c_in: 2, h: 8, w: 6, k: 1, stride: 1, pad: 0 };
        assert_eq!((g.h_out(), g.w_out()), (8, 6));
    }

    #[test]
    fn counts_at_borders_exclude_padding() {
        let g = ConvGeom { c_in: 1, h: 4, w: 4, k: 3, stride: 1, pad: 1 };
        let c = window_counts(&[1.0f64; 16], &g);
        assert_eq!(c[0], 4.0);
        assert_eq!(c[1], 6.0);
        assert_eq!(c[5], 9.0);
    }
}
