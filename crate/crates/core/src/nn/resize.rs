//! Bilinear resizing with the align-corners convention.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{spec_err, Result};
use crate::tensor::Tensor;

/// Interpolation taps `(lo, hi, frac)` of each output index along one axis.
///
/// Output index `i` samples source coordinate `i * (n - 1) / (out - 1)`, or
/// the centre `(n - 1) / 2` when `out == 1`.
fn taps(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let pos = if out == 1 {
                (n - 1) as f64 / 2.0
            } else {
                (i * (n - 1)) as f64 / (out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

struct ResizeBackward {
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
}

impl Backward for ResizeBackward {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4().expect("checked in forward");
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let g = ctx.grad_output;
        let mut grad = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            let dst = &mut grad[nc * h * w..(nc + 1) * h * w];
            let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
            for (i, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let v = src[i * ow + j];
                    let top = v * (1.0 - fy);
                    let bot = v * fy;
                    dst[y0 * w + x0] += top * (1.0 - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (1.0 - fx);
                    dst[y1 * w + x1] += bot * fx;
                }
            }
        }
        vec![Some(grad)]
    }
}

impl Tape {
    pub fn bilinear_resize(&mut self, x: Var, out: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = out;
        if oh == 0 || ow == 0 {
            return Err(spec_err(format!("resize to {oh}x{ow}")));
        }
        if (oh, ow) == (h, w) {
            // taps are exact integers here; skip the arithmetic
            let value = self.value(x).clone();
            return Ok(self.record(
                value,
                &[x],
                ResizeBackward {
                    ty: taps(h, oh),
                    tx: taps(w, ow),
                },
            ));
        }
        let ty = taps(h, oh);
        let tx = taps(w, ow);
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    // lerp form keeps constants exact
                    let a = src[y0 * w + x0];
                    let b = src[y0 * w + x1];
                    let c0 = src[y1 * w + x0];
                    let d = src[y1 * w + x1];
                    let top = a + fx * (b - a);
                    let bot = c0 + fx * (d - c0);
                    dst[i * ow + j] = top + fy * (bot - top);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.record(value, &[x], ResizeBackward { ty, tx }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_are_preserved() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.bilinear_resize(x, (4, 4)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(v.at(&[0, 0, 0, 3]), 2.0);
        assert_eq!(v.at(&[0, 0, 3, 0]), 3.0);
        assert_eq!(v.at(&[0, 0, 3, 3]), 4.0);
    }

    #[test]
    fn constants_stay_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 5], 0.3));
        for out in [(7, 2), (1, 1), (3, 5), (2, 9)] {
            let y = tape.bilinear_resize(x, out).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        // x(i, j) = i + 2j sampled at align-corners source coordinates
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |k| {
            (k / 3) as f64 + 2.0 * (k % 3) as f64
        }));
        let y = tape.bilinear_resize(x, (5, 5)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (si, sj) = (i as f64 * 0.5, j as f64 * 0.5);
                assert!((tape.value(y).at(&[0, 0, i, j]) - (si + 2.0 * sj)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_output_samples_centre() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 1, 4], |k| k as f64));
        let y = tape.bilinear_resize(x, (1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);
    }
}
