use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{spec_err, Result};
use crate::tensor::Tensor;

/// Half-open input range `[floor(i*n/out), ceil((i+1)*n/out))` of bin `i`.
pub(crate) fn bin_range(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

struct AdaptiveAvgPoolBackward {
    out: (usize, usize),
}

impl Backward for AdaptiveAvgPoolBackward {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4().expect("checked in forward");
        let (oh, ow) = self.out;
        let g = ctx.grad_output;
        let mut grad = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            let src = &mut grad[nc * h * w..(nc + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = bin_range(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin_range(j, w, ow);
                    let share = g[(nc * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for v in &mut src[y * w + x0..y * w + x1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        vec![Some(grad)]
    }
}

impl Tape {
    /// Averages each of the `oh x ow` bins of every channel.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = out;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(spec_err(format!("adaptive pool to {oh}x{ow} from {h}x{w}")));
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = bin_range(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin_range(j, w, ow);
                    let s: f64 = (y0..y1).map(|y| src[y * w + x0..y * w + x1].iter().sum::<f64>()).sum();
                    data[(nc * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.record(value, &[x], AdaptiveAvgPoolBackward { out }))
    }
}
