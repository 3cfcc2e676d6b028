//! Inner-loop kernels with a rayon data-parallel path and a sequential
//! fallback (`--no-default-features` drops the `parallel` feature).
//!
//! Both paths compute every output element with the identical sequence of
//! floating-point operations, so results are bit-identical: parallelism is
//! only ever across independent output rows/channels, never across a
//! reduction. Reductions (sums, losses) stay sequential everywhere.

use super::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this size are not worth a rayon dispatch.
const PAR_MIN_ROWS: usize = 8;

fn matmul_row<F: Scalar>(a_row: &[F], b: &[F], k: usize, n: usize, out_row: &mut [F]) {
    for v in out_row.iter_mut() {
        *v = F::ZERO;
    }
    for (p, &a_ip) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
            *o += a_ip * b_pj;
        }
    }
}

/// C[m,n] = A[m,k] @ B[k,n], sequential.
pub fn matmul_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// C[m,n] = A[m,k] @ B[k,n], rows in parallel.
#[cfg(feature = "parallel")]
pub fn matmul_par<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, k, n, out_row);
    });
}

pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    #[cfg(feature = "parallel")]
    {
        if m >= PAR_MIN_ROWS {
            return matmul_par(a, b, m, k, n, out);
        }
    }
    matmul_seq(a, b, m, k, n, out)
}

/// out[n,m] = transpose of a[m,n].
pub fn transpose<F: Scalar>(a: &[F], m: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter().skip(1) {
        max = max.max(v);
    }
    let mut sum = F::ZERO;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Row-wise stable softmax over an [m,n] matrix.
pub fn softmax_rows<F: Scalar>(a: &[F], m: usize, n: usize, out: &mut [F]) {
    #[cfg(feature = "parallel")]
    {
        if m >= PAR_MIN_ROWS {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, o)| softmax_row(&a[i * n..(i + 1) * n], o));
            return;
        }
    }
    for i in 0..m {
        softmax_row(&a[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
    }
}

/// Elementwise map, parallel over elements. `f` must be pure.
pub fn map_elems<F: Scalar>(a: &[F], out: &mut [F], f: impl Fn(F) -> F + Sync) {
    #[cfg(feature = "parallel")]
    {
        if a.len() >= 4096 {
            out.par_iter_mut().zip(a.par_iter()).for_each(|(o, &v)| *o = f(v));
            return;
        }
    }
    for (o, &v) in out.iter_mut().zip(a.iter()) {
        *o = f(v);
    }
}

/// Depthwise causal 1-D convolution: y[t,c] = sum_j w[j,c] * x[t-k+1+j, c],
/// with implicit left zero padding. w is [k, channels].
pub fn conv1d_causal<F: Scalar>(x: &[F], w: &[F], t_len: usize, channels: usize, k: usize, out: &mut [F]) {
    let work = |t: usize, out_row: &mut [F]| {
        for (c, o) in out_row.iter_mut().enumerate() {
            let mut acc = F::ZERO;
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    acc += w[j * channels + c] * x[src as usize * channels + c];
                }
            }
            *o = acc;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if t_len >= PAR_MIN_ROWS {
            out.par_chunks_mut(channels).enumerate().for_each(|(t, row)| work(t, row));
            return;
        }
    }
    for (t, row) in out.chunks_mut(channels).enumerate() {
        work(t, row);
    }
}

/// Sequential sum; reduction order is part of the determinism contract.
pub fn sum<F: Scalar>(a: &[F]) -> F {
    let mut acc = F::ZERO;
    for &v in a {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &eye, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (33, 17, 29);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut o1 = vec![0.0f32; m * n];
        let mut o2 = vec![0.0f32; m * n];
        matmul_seq(&a, &b, m, k, n, &mut o1);
        matmul_par(&a, &b, m, k, n, &mut o2);
        assert_eq!(
            o1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            o2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn conv_is_causal() {
        // kernel [k=2, c=1]: y[t] = w0*x[t-1] + w1*x[t]
        let x = vec![1.0f64, 2.0, 3.0];
        let w = vec![10.0, 1.0];
        let mut out = vec![0.0; 3];
        conv1d_causal(&x, &w, 3, 1, 2, &mut out);
        assert_eq!(out, vec![1.0, 12.0, 23.0]);
    }
}
