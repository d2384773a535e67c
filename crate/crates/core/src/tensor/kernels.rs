//! Raw buffer kernels behind the graph operations. Shapes are validated by the
//! callers in `graph.rs`; everything here assumes consistent sizes.

use super::Scalar;

/// Geometry of a stride-1, zero-padded "same" convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `(Cin, H, W)` sample into a `(Cin*k*k, H*W)` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k as isize, g.pad());
    let hw = g.hw();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky - pad;
                let dx = kx - pad;
                for oy in 0..h {
                    let iy = oy + dy;
                    let out_row = &mut dst[(oy * w) as usize..((oy + 1) * w) as usize];
                    if iy < 0 || iy >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let lo = (-dx).clamp(0, w);
                    let hi = (w - dx).clamp(0, w);
                    out_row[..lo as usize].fill(T::zero());
                    out_row[hi as usize..].fill(T::zero());
                    if hi > lo {
                        out_row[lo as usize..hi as usize]
                            .copy_from_slice(&src_row[(lo + dx) as usize..(hi + dx) as usize]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into a sample.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k as isize, g.pad());
    let hw = g.hw();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * hw..(row + 1) * hw];
                let ddy = ky - pad;
                let ddx = kx - pad;
                for oy in 0..h {
                    let iy = oy + ddy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let lo = (-ddx).clamp(0, w);
                    let hi = (w - ddx).clamp(0, w);
                    let src_row = &src[(oy * w) as usize..((oy + 1) * w) as usize];
                    let dst_row = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for ox in lo..hi {
                        dst_row[(ox + ddx) as usize] += src_row[ox as usize];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let hw = g.hw();
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut col = if g.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    for b in 0..g.n {
        let xs = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        let src: &[T] = if g.k == 1 {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let dst = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        // SAFETY: weight is (cout, rows), src is (rows, hw), dst is (cout, hw),
        // all row-major and sized by the geometry.
        unsafe {
            T::gemm(
                g.cout,
                rows,
                hw,
                T::one(),
                weight.as_ptr(),
                rows as isize,
                1,
                src.as_ptr(),
                hw as isize,
                1,
                if bias.is_some() { T::one() } else { T::zero() },
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    out
}

/// Accumulates conv gradients. Any of the output buffers may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = g.hw();
    let rows = g.col_rows();
    let need_col = g.k != 1;
    let mut col = vec![T::zero(); if need_col { rows * hw } else { 0 }];
    let mut dcol = vec![
        T::zero();
        if need_col && dx.is_some() {
            rows * hw
        } else {
            0
        }
    ];
    for b in 0..g.n {
        let xs = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        let dys = &dout[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dys.chunks(hw).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if need_col {
                im2col(xs, g, &mut col);
                &col
            } else {
                xs
            };
            // dW (cout, rows) += dY (cout, hw) * col^T (hw, rows)
            unsafe {
                T::gemm(
                    g.cout,
                    hw,
                    rows,
                    T::one(),
                    dys.as_ptr(),
                    hw as isize,
                    1,
                    src.as_ptr(),
                    1,
                    hw as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[b * g.cin * hw..(b + 1) * g.cin * hw];
            // dcol (rows, hw) = W^T (rows, cout) * dY (cout, hw)
            let (target, beta) = if need_col {
                (dcol.as_mut_ptr(), T::zero())
            } else {
                (dxs.as_mut_ptr(), T::one())
            };
            unsafe {
                T::gemm(
                    rows,
                    g.cout,
                    hw,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    rows as isize,
                    dys.as_ptr(),
                    hw as isize,
                    1,
                    beta,
                    target,
                    hw as isize,
                    1,
                );
            }
            if need_col {
                col2im(&dcol, g, dxs);
            }
        }
    }
}

/// 2x2 max pooling; returns the pooled values and the flat input index of
/// each winner (first maximum on ties).
pub(crate) fn max_pool2x2<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling of `planes` planes of size `h x w`.
pub(crate) fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * ow + 2 * xx;
                dst[y * w + xx] += src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
}
