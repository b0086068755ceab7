//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per tensor, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Count a failing coordinate as a kink instead of a failure when the
    /// two one-sided differences disagree and the analytic value matches one
    /// of them: the `+-eps` window straddles a non-differentiable point.
    pub kink_aware: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            kink_aware: false,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn kink_aware(mut self) -> Self {
        self.kink_aware = true;
        self
    }

    pub fn sampled(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub failures: usize,
    /// Coordinates excused as kinks (only with `kink_aware`).
    pub kinks: usize,
    /// `(tensor, flat index, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradcheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            pass: true,
            checked: 0,
            failures: 0,
            kinks: 0,
            worst: None,
        }
    }

    pub fn merge(mut self, other: GradcheckReport) -> GradcheckReport {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_err > self.max_rel_err) {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.pass &= other.pass;
        self.checked += other.checked;
        self.failures += other.failures;
        self.kinks += other.kinks;
        self
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Coordinates of a tensor with `numel` elements to probe.
pub fn coordinates(numel: usize, opts: &GradcheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < numel => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut picked = index::sample(&mut rng, numel, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..numel).collect(),
    }
}

/// Compares `analytic[i]` against `(f(+eps) - f(-eps)) / 2eps` for each
/// coordinate `i`, where `eval(i, delta)` evaluates the function with
/// coordinate `i` shifted by `delta`.
pub fn compare(
    tensor_id: usize,
    analytic: &[f64],
    coords: &[usize],
    opts: &GradcheckOptions,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::empty();
    for &i in coords {
        let plus = eval(i, opts.eps)?;
        let minus = eval(i, -opts.eps)?;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let err = rel_err(analytic[i], numeric);
        report.checked += 1;
        if err.is_nan() || err > opts.tol {
            if opts.kink_aware && straddles_kink(analytic[i], plus, minus, eval(i, 0.0)?, opts) {
                report.kinks += 1;
                continue;
            }
            report.failures += 1;
            report.pass = false;
        }
        if report.worst.is_none() || err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some((tensor_id, i, analytic[i], numeric));
        }
    }
    Ok(report)
}

fn straddles_kink(analytic: f64, plus: f64, minus: f64, centre: f64, opts: &GradcheckOptions) -> bool {
    let right = (plus - centre) / opts.eps;
    let left = (centre - minus) / opts.eps;
    rel_err(left, right) > opts.tol && (rel_err(analytic, left) <= opts.tol || rel_err(analytic, right) <= opts.tol)
}

/// Checks the gradient of scalar `f` with respect to every tensor in `inputs`.
pub fn gradcheck_many<F>(mut f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut report = GradcheckReport::empty();
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let coords = coordinates(grad.numel(), opts, t as u64);
        let r = compare(t, grad.data(), &coords, opts, |i, delta| {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + delta;
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|x| tape.constant(x.clone())).collect();
            let y = f(&mut tape, &vars);
            probe[t].data_mut()[i] = orig;
            scalar_of(&tape, y?)
        })?;
        report = report.merge(r);
    }
    Ok(report)
}

/// Single-input convenience over [`gradcheck_many`].
pub fn gradcheck<F>(mut f: F, x: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), opts)
}

pub(crate) fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    t.item()
        .ok_or_else(|| crate::error::Error::NotScalar(t.shape().to_vec()))
}

/// `mean(weights * y)` with weights uniform in `[-1, 1]`: turns a
/// tensor-valued output into a scalar whose gradient exercises every output
/// element with a distinct weight. Averaging rather than summing keeps the
/// objective O(1), so finite-difference round-off on coordinates whose true
/// gradient is zero stays well under the `1e-8` floor of [`rel_err`].
pub fn weighted_mean(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).numel() as f64;
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0) / n);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let r = gradcheck(|t, v| t.sum_all(v), &x, &GradcheckOptions::default()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::zeros(&[5]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = tape.sigmoid(v).unwrap();
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 0.25));

        let r = gradcheck(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum_all(s)
            },
            &x,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x evaluated with a constant copy of x as one factor gives
        // half the true derivative.
        let x = Tensor::from_fn(&[4], |i| 1.0 + i as f64);
        let r = gradcheck(
            |t, v| {
                let c = t.constant(t.value(v).clone());
                let p = t.mul(v, c)?;
                t.sum_all(p)
            },
            &x,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic() {
        let opts = GradcheckOptions::default().sampled(5, 9);
        let a = coordinates(100, &opts, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(a, coordinates(100, &opts, 3));
        assert_eq!(coordinates(4, &opts, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn kink_is_excused_only_when_asked() {
        let x = Tensor::new(&[1], vec![1e-6]).unwrap();
        let plain = gradcheck(
            |t, v| {
                let y = t.relu(v)?;
                t.sum_all(y)
            },
            &x,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!plain.pass);
        let aware = GradcheckOptions::default().kink_aware();
        let r = gradcheck(
            |t, v| {
                let y = t.relu(v)?;
                t.sum_all(y)
            },
            &x,
            &aware,
        )
        .unwrap();
        assert!(r.pass);
        assert_eq!(r.kinks, 1);
    }
}
