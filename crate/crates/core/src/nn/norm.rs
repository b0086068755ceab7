use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::params::{Ctx, Init, Mode};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

struct BatchNormBackward {
    /// Normalised input, same layout as `x`.
    xhat: Vec<f64>,
    invstd: Vec<f64>,
    /// Batch statistics were used (train mode), so the mean and variance
    /// depend on `x`.
    batch_stats: bool,
}

impl Backward for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let (n, c, h, w) = x.dims4().expect("checked in forward");
        let plane = h * w;
        let count = (n * plane) as f64;
        let g = ctx.grad_output;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (gi, xi) in g[off..off + plane].iter().zip(&self.xhat[off..off + plane]) {
                    dgamma[ch] += gi * xi;
                    dbeta[ch] += gi;
                }
            }
        }

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; x.numel()];
            for ch in 0..c {
                let k = gamma[ch] * self.invstd[ch];
                let (mean_g, mean_gx) = (dbeta[ch] / count, dgamma[ch] / count);
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        dx[i] = if self.batch_stats {
                            k * (g[i] - mean_g - self.xhat[i] * mean_gx)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    }
}

/// Per-channel statistics of a batch-norm forward pass.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    /// Batch normalisation over `N x H x W` per channel. With `stats` given
    /// (eval mode) those running statistics are used; otherwise batch
    /// statistics are computed and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&BatchStats>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!(
                "batch norm over {c} channels got gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let xd = self.value(x).data();
        let (mean, var) = match stats {
            Some(s) => (s.mean.clone(), s.var.clone()),
            None => {
                if count <= 1 {
                    return Err(Error::DegenerateBatch);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xd[off..off + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += xd[off..off + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                (mean, var)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xd[i] - mean[ch]) * invstd[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let v = self.record(
            value,
            &[x, gamma, beta],
            BatchNormBackward {
                xhat,
                invstd,
                batch_stats: stats.is_none(),
            },
        );
        Ok((v, BatchStats { mean, var }))
    }
}

/// Batch-norm layer with `{name}.weight` (gamma), `{name}.bias` (beta) and
/// running statistics `{name}.running_mean` / `{name}.running_var`.
///
/// Train mode normalises with batch statistics and updates the running
/// statistics as `running <- (1 - momentum) * running + momentum * batch`.
pub fn batchnorm2d(ctx: &mut Ctx<'_>, x: Var, name: &str, momentum: f64, eps: f64) -> Result<Var> {
    let (_, c, _, _) = ctx.tape.value(x).dims4()?;
    let gamma = ctx.param(&format!("{name}.weight"), &[c], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.bias"), &[c], Init::Zeros)?;
    let rm_name = format!("{name}.running_mean");
    let rv_name = format!("{name}.running_var");
    let running_mean = ctx.buffer(&rm_name, &[c], Init::Zeros)?;
    let running_var = ctx.buffer(&rv_name, &[c], Init::Ones)?;
    match ctx.mode {
        Mode::Eval => {
            let stats = BatchStats {
                mean: running_mean.into_data(),
                var: running_var.into_data(),
            };
            Ok(ctx.tape.batch_norm(x, gamma, beta, Some(&stats), eps)?.0)
        }
        Mode::Train => {
            let (y, batch) = ctx.tape.batch_norm(x, gamma, beta, None, eps)?;
            let blend = |running: Tensor, fresh: &[f64]| {
                let data = running
                    .data()
                    .iter()
                    .zip(fresh)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect();
                Tensor::new(&[c], data)
            };
            ctx.set_buffer(&rm_name, blend(running_mean, &batch.mean)?)?;
            ctx.set_buffer(&rv_name, blend(running_var, &batch.var)?)?;
            Ok(y)
        }
    }
}

/// [`batchnorm2d`] with the default momentum and epsilon.
pub fn bn(ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    batchnorm2d(ctx, x, name, BN_MOMENTUM, BN_EPS)
}
