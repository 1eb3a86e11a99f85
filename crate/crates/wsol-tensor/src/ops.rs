//! Low-level compute kernels shared by the tape ops. Convolution goes
//! through im2col so the hot loop is always a contiguous multiply-accumulate.

use crate::tensor::Element;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T  (dot products over the shared n axis)
pub fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let dot: T = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            c[i * k + j] += dot;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }
    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image (in_c,in_h,in_w) into a (in_c*k_h*k_w, out_h*out_w)
/// patch matrix, zero-filling padded taps.
pub fn im2col<T: Element>(img: &[T], g: &ConvGeom, patches: &mut [T]) {
    debug_assert_eq!(patches.len(), g.patch_rows() * g.out_pixels());
    for v in patches.iter_mut() {
        *v = T::zero();
    }
    let cols = g.out_pixels();
    for c in 0..g.in_c {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut patches[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[oy * g.out_w + ox] = img[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input image, accumulating
/// overlapping taps.
pub fn col2im_acc<T: Element>(patches: &[T], g: &ConvGeom, img_grad: &mut [T]) {
    debug_assert_eq!(patches.len(), g.patch_rows() * g.out_pixels());
    debug_assert_eq!(img_grad.len(), g.in_c * g.in_h * g.in_w);
    let cols = g.out_pixels();
    for c in 0..g.in_c {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &patches[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        img_grad[dst_row + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}
