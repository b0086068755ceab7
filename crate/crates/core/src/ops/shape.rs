use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{axis_split, check_axis, Tensor};

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (outer, total, inner) = axis_split(ctx.output.shape(), self.axis);
        let g = ctx.grad_output;
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (k, &len) in self.sizes.iter().enumerate() {
            if ctx.needs[k] {
                let mut buf = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    buf.extend_from_slice(&g[base..base + len * inner]);
                }
                out.push(Some(buf));
            } else {
                out.push(None);
            }
            start += len;
        }
        out
    }
}

struct SliceBackward {
    axis: usize,
    start: usize,
}

impl Backward for SliceBackward {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let input = ctx.inputs[0];
        let (outer, full, inner) = axis_split(input.shape(), self.axis);
        let len = ctx.output.shape()[self.axis];
        let mut grad = vec![0.0; input.numel()];
        for o in 0..outer {
            let dst = (o * full + self.start) * inner;
            let src = o * len * inner;
            grad[dst..dst + len * inner].copy_from_slice(&ctx.grad_output[src..src + len * inner]);
        }
        vec![Some(grad)]
    }
}

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.to_vec())]
    }
}

struct TransposeBackward;

impl Backward for TransposeBackward {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(transpose_last2(ctx.grad_output, ctx.output.shape()))]
    }
}

/// Swaps the last two axes of row-major `data` with the given shape.
fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = data[off + i * cols + j];
            }
        }
    }
    out
}

impl Tape {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        check_axis(axis, base.len())?;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat along axis {axis}: {base:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                let off = o * len * inner;
                data.extend_from_slice(&src[off..off + len * inner]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(value, parts, ConcatBackward { axis, sizes }))
    }

    /// Takes `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let value = crate::tensor::slice_axis(self.value(x), axis, start, len);
        Ok(self.record(value, &[x], SliceBackward { axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.record(value, &[x], ReshapeBackward))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(shape_err(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let data = transpose_last2(self.value(x).data(), &shape);
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(value, &[x], TransposeBackward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channel_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
    }

    #[test]
    fn concat_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[1, 2, 4, 5]));
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn slice_gradient_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 4], |i| i as f64));
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0]);
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn transpose_swaps_last_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 3], |i| i as f64));
        let t = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(t), &[1, 3, 2]);
        assert_eq!(tape.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
