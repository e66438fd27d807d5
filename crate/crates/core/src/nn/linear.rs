use super::{gemm, MatMut, MatRef, Scalar};

/// `y = x·w + b` for `x: [n, din]`, `w: [din, dout]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    b: Option<&[T]>,
    dout: usize,
) -> Vec<T> {
    assert_eq!(x.len(), n * din);
    assert_eq!(w.len(), din * dout);
    let mut y = match b {
        Some(b) => {
            assert_eq!(b.len(), dout);
            let mut y = Vec::with_capacity(n * dout);
            for _ in 0..n {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); n * dout],
    };
    gemm(
        T::one(),
        MatRef::new(x, n, din),
        MatRef::new(w, din, dout),
        T::one(),
        MatMut::new(&mut y, n, dout),
    );
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
) -> Vec<T> {
    assert_eq!(dy.len(), n * dout);
    gemm(
        T::one(),
        MatRef::new(x, n, din).t(),
        MatRef::new(dy, n, dout),
        T::one(),
        MatMut::new(dw, din, dout),
    );
    if let Some(db) = db {
        for row in dy.chunks_exact(dout) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g = *g + v;
            }
        }
    }
    let mut dx = vec![T::zero(); n * din];
    gemm(
        T::one(),
        MatRef::new(dy, n, dout),
        MatRef::new(w, din, dout).t(),
        T::zero(),
        MatMut::new(&mut dx, n, din),
    );
    dx
}
