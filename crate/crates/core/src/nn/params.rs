//! Named parameter storage and the forward-pass context that binds
//! parameters onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gradcheck::{compare, coordinates, scalar_of, GradcheckOptions, GradcheckReport};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a parameter is filled the first time it is requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Ordered map from parameter path (e.g. `backbone.s0.conv0.weight`) to
/// tensor, plus the seed every missing entry is initialised from.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    entries: BTreeMap<String, ParamEntry>,
    seed: u64,
    frozen: bool,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl LayerParams {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed,
            frozen: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A frozen store refuses to create missing parameters, which is how
    /// loaded checkpoints detect config mismatches.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                trainable,
                grad: None,
            },
        );
    }

    /// Overwrites an existing value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "`{name}` has shape {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Sets every parameter whose path starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (k, e) in self.entries.iter_mut() {
            if k.starts_with(prefix) && e.trainable {
                e.value = Tensor::zeros(e.value.shape());
                n += 1;
            }
        }
        n
    }

    /// Rounds all values to `f32` precision so a GTF checkpoint is lossless.
    pub fn narrow_to_f32(&mut self) {
        for e in self.entries.values_mut() {
            e.value.narrow_to_f32();
        }
    }

    fn fetch_or_init(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<&Tensor> {
        if !self.entries.contains_key(name) {
            if self.frozen {
                return Err(Error::MissingParam(name.to_string()));
            }
            let value = init_tensor(shape, init, self.seed ^ fnv1a(name));
            self.insert(name, value, trainable);
        }
        let e = &self.entries[name];
        if e.value.shape() != shape {
            return Err(shape_err(format!(
                "parameter `{name}` has shape {:?}, layer expects {shape:?}",
                e.value.shape()
            )));
        }
        Ok(&e.value)
    }
}

/// Deterministic parameter initialisation from a per-parameter seed.
pub fn init_tensor(shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::XavierUniform { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        }
    }
}

/// State threaded through a forward pass: the tape being recorded, the
/// parameter store, and train/eval mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a mut LayerParams,
    pub mode: Mode,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut LayerParams, mode: Mode) -> Self {
        Self {
            tape,
            params,
            mode,
            bound: BTreeMap::new(),
        }
    }

    /// Binds a trainable parameter, creating it on first use.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.fetch_or_init(name, shape, init, true)?.clone();
        let v = self.tape.param(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.params.fetch_or_init(name, shape, init, false)?.clone())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.params.set(name, value)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Runs backward from `loss` and stores the gradient of every bound
    /// parameter in the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(e) = self.params.get_mut(name) {
                e.grad = self.tape.grad(v);
            }
        }
        Ok(())
    }
}

/// Finite-difference check of `f`'s gradient with respect to the named
/// parameters. `f` builds the scalar to differentiate from a fresh context.
pub fn gradcheck_params<F>(
    params: &LayerParams,
    names: &[String],
    mode: Mode,
    opts: &GradcheckOptions,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Ctx<'_>) -> Result<Var>,
{
    let mut work = params.clone();
    let mut tape = Tape::new();
    let analytic = {
        let mut ctx = Ctx::new(&mut tape, &mut work, mode);
        let out = f(&mut ctx)?;
        ctx.backward(out)?;
        names
            .iter()
            .map(|n| {
                let e = ctx.params.get(n).ok_or_else(|| Error::MissingParam(n.clone()))?;
                e.grad.clone().ok_or_else(|| Error::MissingGrad(n.clone()))
            })
            .collect::<Result<Vec<Tensor>>>()?
    };

    let mut report: Option<GradcheckReport> = None;
    for (t, (name, grad)) in names.iter().zip(&analytic).enumerate() {
        let coords = coordinates(grad.numel(), opts, t as u64 + 1000);
        let r = compare(t, grad.data(), &coords, opts, |i, delta| {
            let mut probe = params.clone();
            probe.get_mut(name).expect("checked above").value.data_mut()[i] += delta;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &mut probe, mode);
            let y = f(&mut ctx)?;
            scalar_of(&tape, y)
        })?;
        report = Some(match report {
            Some(acc) => acc.merge(r),
            None => r,
        });
    }
    report.ok_or_else(|| shape_err("gradcheck_params with no parameters"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let init = Init::XavierUniform { fan_in: 9, fan_out: 18 };
        let a = init_tensor(&[2, 1, 3, 3], init, 42);
        let b = init_tensor(&[2, 1, 3, 3], init, 42);
        assert_eq!(a, b);
        assert_ne!(a, init_tensor(&[2, 1, 3, 3], init, 43));
    }

    #[test]
    fn xavier_mean_within_three_standard_errors() {
        let (fan_in, fan_out) = (27, 48);
        let b = (6.0f64 / (fan_in + fan_out) as f64).sqrt();
        let n = 10_000;
        let t = init_tensor(&[n], Init::XavierUniform { fan_in, fan_out }, 7);
        assert!(t.data().iter().all(|v| v.abs() <= b));
        let mean = t.data().iter().sum::<f64>() / n as f64;
        // uniform(-b, b) has standard deviation b / sqrt(3)
        let se = b / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
    }

    #[test]
    fn frozen_store_rejects_new_params() {
        let mut p = LayerParams::new(0);
        p.freeze();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut p, Mode::Eval);
        assert!(matches!(ctx.param("w", &[2], Init::Zeros), Err(Error::MissingParam(_))));
    }

    #[test]
    fn shape_conflict_is_reported() {
        let mut p = LayerParams::new(0);
        p.insert("w", Tensor::zeros(&[3]), true);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut p, Mode::Eval);
        assert!(matches!(
            ctx.param("w", &[2], Init::Zeros),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn binding_is_cached_per_context() {
        let mut p = LayerParams::new(1);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut p, Mode::Train);
        let a = ctx.param("w", &[2], Init::Ones).unwrap();
        let b = ctx.param("w", &[2], Init::Ones).unwrap();
        assert_eq!(a, b);
    }
}
