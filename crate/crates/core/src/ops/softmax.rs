use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::Result;
use crate::tensor::{axis_split, check_axis, Tensor};

struct SoftmaxBackward {
    axis: usize,
}

impl Backward for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }

    // dx_i = y_i (g_i - sum_j g_j y_j) along the axis.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let y = ctx.output.data();
        let g = ctx.grad_output;
        let (outer, len, inner) = axis_split(ctx.output.shape(), self.axis);
        let mut grad = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                for k in 0..len {
                    let idx = base + k * inner;
                    grad[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Max-subtracted softmax of `data` (with `shape`) along `axis`.
pub(crate) fn softmax_values(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let m = (0..len)
                .map(|k| data[base + k * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
    out
}

impl Tape {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis(axis, xv.rank())?;
        let data = softmax_values(xv.data(), xv.shape(), axis);
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.record(value, &[x], SoftmaxBackward { axis }))
    }
}
