use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `c (+)= op(a) * op(b)` for row-major matrices, with optional transposes.
///
/// `a` is `m x k` after its transpose is applied, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_output;
        let ga = ctx.needs[0].then(|| {
            let mut out = vec![0.0; self.batch * m * k];
            for i in 0..self.batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &b[i * k * n..(i + 1) * k * n],
                    true,
                    &mut out[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            out
        });
        let gb = ctx.needs[1].then(|| {
            let mut out = vec![0.0; self.batch * k * n];
            for i in 0..self.batch {
                gemm(
                    k,
                    m,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    true,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &mut out[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
            out
        });
        vec![ga, gb]
    }
}

impl Tape {
    /// Matrix product of `M x K` and `K x N` operands, or batched over a
    /// shared leading dimension for rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => return Err(shape_err(format!("matmul of {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {sa:?} x {sb:?}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(value, &[a, b], MatmulBackward { batch, m, k, n }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 - 1.5);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(eye, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn hand_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn transposed_gemm_matches_naive() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        let b = Tensor::from_fn(&[5, 3], |i| (i as f64 * 1.3).cos());
        // c = a^T * b^T : (4x3)(3x5)
        let mut c = vec![0.0; 20];
        gemm(4, 3, 5, a.data(), true, b.data(), true, &mut c, false);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|t| a.at(&[t, i]) * b.at(&[j, t])).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}
