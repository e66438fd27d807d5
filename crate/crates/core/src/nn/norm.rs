use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Normalized activations and inverse standard deviations per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last dimension of `x: [n, d]`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, LayerNormCache<T>) {
    let n = x.len() / d;
    let eps = T::lit(LN_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    dy: &[T],
    d: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let n = dy.len() / d;
    let dn = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = T::zero();
        let mut dot = T::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + g[j] * xh[j];
            dbeta[j] = dbeta[j] + g[j];
            dxhat[j] = g[j] * gamma[j];
            sum = sum + dxhat[j];
            dot = dot + dxhat[j] * xh[j];
        }
        let scale = cache.rstd[r] / dn;
        for j in 0..d {
            dx[r * d + j] = scale * (dn * dxhat[j] - sum - xh[j] * dot);
        }
    }
    dx
}
