use super::{gemm, MatMut, MatRef, Scalar};

/// Multi-head self-attention core.
///
/// `qkv` is `[B·T, 3d]` with the query, key and value projections packed in
/// that order along the last axis; head `h` owns columns `h·dh..(h+1)·dh` of
/// each. Returns the concatenated head outputs `[B·T, d]` and the attention
/// probabilities `[B, heads, T, T]`.
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    batch: usize,
    tokens: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    assert_eq!(qkv.len(), batch * tokens * 3 * d);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let tt = tokens * tokens;
    let mut out = vec![T::zero(); batch * tokens * d];
    let mut probs = vec![T::zero(); batch * heads * tt];
    for b in 0..batch {
        let base = &qkv[b * tokens * 3 * d..(b + 1) * tokens * 3 * d];
        for h in 0..heads {
            let q = MatRef::strided(&base[h * dh..], tokens, dh, 3 * d, 1);
            let k = MatRef::strided(&base[d + h * dh..], tokens, dh, 3 * d, 1);
            let v = MatRef::strided(&base[2 * d + h * dh..], tokens, dh, 3 * d, 1);
            let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, tokens, tokens));
            for row in p.chunks_exact_mut(tokens) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            let o = &mut out[b * tokens * d + h * dh..];
            gemm(
                T::one(),
                MatRef::new(p, tokens, tokens),
                v,
                T::zero(),
                MatMut::strided(o, tokens, dh, d),
            );
        }
    }
    (out, probs)
}

/// Gradient with respect to the packed `qkv` input.
pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    tokens: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let tt = tokens * tokens;
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); tt];
    for b in 0..batch {
        let base = &qkv[b * tokens * 3 * d..(b + 1) * tokens * 3 * d];
        let dbase = &mut dqkv[b * tokens * 3 * d..(b + 1) * tokens * 3 * d];
        let dob = &dout[b * tokens * d..(b + 1) * tokens * d];
        for h in 0..heads {
            let q = MatRef::strided(&base[h * dh..], tokens, dh, 3 * d, 1);
            let k = MatRef::strided(&base[d + h * dh..], tokens, dh, 3 * d, 1);
            let v = MatRef::strided(&base[2 * d + h * dh..], tokens, dh, 3 * d, 1);
            let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            let pm = MatRef::new(p, tokens, tokens);
            let d_o = MatRef::strided(&dob[h * dh..], tokens, dh, d, 1);

            gemm(
                T::one(),
                pm.t(),
                d_o,
                T::zero(),
                MatMut::strided(&mut dbase[2 * d + h * dh..], tokens, dh, 3 * d),
            );
            gemm(T::one(), d_o, v.t(), T::zero(), MatMut::new(&mut dp, tokens, tokens));
            for (drow, prow) in dp.chunks_exact_mut(tokens).zip(p.chunks_exact(tokens)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            let ds = MatRef::new(&dp, tokens, tokens);
            gemm(
                scale,
                ds,
                k,
                T::zero(),
                MatMut::strided(&mut dbase[h * dh..], tokens, dh, 3 * d),
            );
            gemm(
                scale,
                ds.t(),
                q,
                T::zero(),
                MatMut::strided(&mut dbase[d + h * dh..], tokens, dh, 3 * d),
            );
        }
    }
    dqkv
}
