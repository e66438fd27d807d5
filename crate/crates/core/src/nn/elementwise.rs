use super::Scalar;

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() || v.is_nan() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the post-activation output `y` is not positive.
pub fn relu_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &out) in dy.iter_mut().zip(y) {
        if out <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    x.iter()
        .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
        .collect()
}

/// Gradient through GELU given its input `x`.
pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect()
}

/// Nearest-neighbour ×2 upsampling of `[B·C, h, w]` planes.
pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    assert_eq!(x.len(), planes * h * w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for oy in 0..h2 {
            for ox in 0..w2 {
                dst[oy * w2 + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    assert_eq!(dy.len(), planes * h2 * w2);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..h2 {
            for ox in 0..w2 {
                let i = (oy / 2) * w + ox / 2;
                dst[i] = dst[i] + src[oy * w2 + ox];
            }
        }
    }
    dx
}
