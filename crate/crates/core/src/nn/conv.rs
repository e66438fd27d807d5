use super::{gemm, MatMut, MatRef, Scalar};

/// Geometry of a square-kernel convolution with `k / 2` zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies
/// inside the image.
fn valid_columns(s: &ConvShape, kx: usize, wo: usize) -> (usize, usize) {
    let p = s.pad();
    let lo = p.saturating_sub(kx).div_ceil(s.stride).min(wo);
    // ix < w  ⇔  ox·stride < w + p − kx
    let hi = (s.w + p).saturating_sub(kx).div_ceil(s.stride).min(wo);
    (lo, hi.max(lo))
}

/// Unfolds one `[cin, h, w]` image into `[cin·k·k, ho·wo]` columns.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let (ho, wo, k, p) = (s.out_h(), s.out_w(), s.k, s.pad() as isize);
    let hw_out = ho * wo;
    for ci in 0..s.cin {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= s.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let (lo, hi) = valid_columns(s, kx, wo);
                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let first = lo * s.stride + kx - p as usize;
                        if s.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns back, summing overlapping contributions.
fn col2im<T: Scalar>(col: &[T], s: &ConvShape, dx: &mut [T]) {
    let (ho, wo, k, p) = (s.out_h(), s.out_w(), s.k, s.pad() as isize);
    let hw_out = ho * wo;
    for ci in 0..s.cin {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - p;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let (lo, hi) = valid_columns(s, kx, wo);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * s.stride + kx - p as usize;
                    let from = &src[oy * wo + lo..oy * wo + hi];
                    for (v, &g) in line[first..].iter_mut().step_by(s.stride).zip(from) {
                        *v = *v + g;
                    }
                }
            }
        }
    }
}

/// Batched convolution. `weight` is `[cout, cin, k, k]`, `x` is
/// `[B, cin, h, w]`, the result `[B, cout, ho, wo]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    s: &ConvShape,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    assert_eq!(x.len(), batch * s.in_len());
    assert_eq!(weight.len(), s.cout * s.patch_len());
    assert_eq!(bias.len(), s.cout);
    let hw_out = s.out_h() * s.out_w();
    let mut y = vec![T::zero(); batch * s.out_len()];
    let mut col = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); s.patch_len() * hw_out]
    };
    for b in 0..batch {
        let xb = &x[b * s.in_len()..(b + 1) * s.in_len()];
        let yb = &mut y[b * s.out_len()..(b + 1) * s.out_len()];
        for (co, plane) in yb.chunks_exact_mut(hw_out).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[co]);
        }
        let cols: &[T] = if s.is_pointwise() {
            xb
        } else {
            im2col(xb, s, &mut col);
            &col
        };
        gemm(
            T::one(),
            MatRef::new(weight, s.cout, s.patch_len()),
            MatRef::new(cols, s.patch_len(), hw_out),
            T::one(),
            MatMut::new(yb, s.cout, hw_out),
        );
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    s: &ConvShape,
    weight: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    assert_eq!(dy.len(), batch * s.out_len());
    let hw_out = s.out_h() * s.out_w();
    let pl = s.patch_len();
    let mut col = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); pl * hw_out]
    };
    let mut dcol = if s.is_pointwise() || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); pl * hw_out]
    };
    let mut dx = need_dx.then(|| vec![T::zero(); batch * s.in_len()]);
    for b in 0..batch {
        let xb = &x[b * s.in_len()..(b + 1) * s.in_len()];
        let dyb = &dy[b * s.out_len()..(b + 1) * s.out_len()];
        for (co, plane) in dyb.chunks_exact(hw_out).enumerate() {
            db[co] = db[co] + plane.iter().copied().sum::<T>();
        }
        let cols: &[T] = if s.is_pointwise() {
            xb
        } else {
            im2col(xb, s, &mut col);
            &col
        };
        gemm(
            T::one(),
            MatRef::new(dyb, s.cout, hw_out),
            MatRef::new(cols, pl, hw_out).t(),
            T::one(),
            MatMut::new(dw, s.cout, pl),
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * s.in_len()..(b + 1) * s.in_len()];
            if s.is_pointwise() {
                gemm(
                    T::one(),
                    MatRef::new(weight, s.cout, pl).t(),
                    MatRef::new(dyb, s.cout, hw_out),
                    T::zero(),
                    MatMut::new(dxb, pl, hw_out),
                );
            } else {
                gemm(
                    T::one(),
                    MatRef::new(weight, s.cout, pl).t(),
                    MatRef::new(dyb, s.cout, hw_out),
                    T::zero(),
                    MatMut::new(&mut dcol, pl, hw_out),
                );
                col2im(&dcol, s, dxb);
            }
        }
    }
    dx
}
