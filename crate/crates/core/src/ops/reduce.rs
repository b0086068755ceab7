use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{broadcast_index_map, check_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

struct ReduceBackward {
    op: ReduceOp,
    /// Output flat index of every input element.
    map: Vec<usize>,
    count: usize,
    /// Winning input index per output element (max only).
    argmax: Vec<usize>,
}

impl Backward for ReduceBackward {
    fn name(&self) -> &'static str {
        match self.op {
            ReduceOp::Sum => "reduce_sum",
            ReduceOp::Mean => "reduce_mean",
            ReduceOp::Max => "reduce_max",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        let grad = match self.op {
            ReduceOp::Sum => self.map.iter().map(|&o| g[o]).collect(),
            ReduceOp::Mean => {
                let k = 1.0 / self.count as f64;
                self.map.iter().map(|&o| g[o] * k).collect()
            }
            ReduceOp::Max => {
                let mut out = vec![0.0; self.map.len()];
                for (o, &i) in self.argmax.iter().enumerate() {
                    out[i] += g[o];
                }
                out
            }
        };
        vec![Some(grad)]
    }
}

impl Tape {
    /// Reduces over `axes`. Reduced axes are kept with size 1 when `keepdims`
    /// is set; reducing every axis without `keepdims` yields shape `[1]`.
    /// Max routes its gradient to the lowest flat index among ties.
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axes: &[usize], keepdims: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        for (i, &ax) in axes.iter().enumerate() {
            check_axis(ax, rank)?;
            if axes[..i].contains(&ax) {
                return Err(shape_err(format!("duplicate reduction axis {ax}")));
            }
        }
        let kept: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdims {
            kept.clone()
        } else {
            let s: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let map = broadcast_index_map(&kept, &in_shape);
        let out_numel: usize = kept.iter().product();
        let count = map.len() / out_numel;
        let data = self.value(x).data();

        let mut argmax = Vec::new();
        let out = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0; out_numel];
                for (v, &o) in data.iter().zip(&map) {
                    acc[o] += v;
                }
                if op == ReduceOp::Mean {
                    let k = count as f64;
                    acc.iter_mut().for_each(|v| *v /= k);
                }
                acc
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_numel];
                argmax = vec![usize::MAX; out_numel];
                for (i, (&v, &o)) in data.iter().zip(&map).enumerate() {
                    if argmax[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.record(value, &[x], ReduceBackward { op, map, count, argmax }))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum, axes, keepdims)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean, axes, keepdims)
    }

    pub fn max(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Max, axes, keepdims)
    }

    /// Sum of every element as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }
}
