//! Raw loops behind the differentiable ops. All buffers are row-major.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_abt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f32 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_atb_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(image: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_acc(cols: &[f32], g: &ConvGeometry, image: &mut [f32]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
