use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Binary elementwise operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Unary elementwise operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Exp,
    Log,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index maps from the output into each operand; `None` when the operand
/// already has the output shape.
struct Broadcast {
    shape: Vec<usize>,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(a, b)?;
        let map = |s: &[usize]| (s != shape.as_slice()).then(|| broadcast_index_map(s, &shape));
        Ok(Self {
            a_map: map(a),
            b_map: map(b),
            shape,
        })
    }
}

fn gather(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        Some(m) => data[m[i]],
        None => data[i],
    }
}

/// Sums `grad` (output-shaped) back onto an operand of `numel` elements.
fn reduce_to(grad: impl Iterator<Item = f64>, map: &Option<Vec<usize>>, numel: usize) -> Vec<f64> {
    match map {
        None => grad.collect(),
        Some(m) => {
            let mut out = vec![0.0; numel];
            for (g, &j) in grad.zip(m) {
                out[j] += g;
            }
            out
        }
    }
}

struct BinaryBackward {
    op: BinaryOp,
    bc: Broadcast,
}

impl Backward for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_output;
        let ga = ctx.needs[0].then(|| match self.op {
            BinaryOp::Add | BinaryOp::Sub => reduce_to(g.iter().copied(), &self.bc.a_map, a.numel()),
            BinaryOp::Mul => reduce_to(
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * gather(b.data(), &self.bc.b_map, i)),
                &self.bc.a_map,
                a.numel(),
            ),
        });
        let gb = ctx.needs[1].then(|| match self.op {
            BinaryOp::Add => reduce_to(g.iter().copied(), &self.bc.b_map, b.numel()),
            BinaryOp::Sub => reduce_to(g.iter().map(|&x| -x), &self.bc.b_map, b.numel()),
            BinaryOp::Mul => reduce_to(
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * gather(a.data(), &self.bc.a_map, i)),
                &self.bc.b_map,
                b.numel(),
            ),
        });
        vec![ga, gb]
    }
}

struct UnaryBackward(UnaryOp);

impl Backward for UnaryBackward {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad_output;
        let grad: Vec<f64> = match self.0 {
            UnaryOp::Sigmoid => (0..g.len()).map(|i| g[i] * y[i] * (1.0 - y[i])).collect(),
            UnaryOp::Relu => (0..g.len()).map(|i| if x[i] > 0.0 { g[i] } else { 0.0 }).collect(),
            UnaryOp::Exp => (0..g.len()).map(|i| g[i] * y[i]).collect(),
            UnaryOp::Log => (0..g.len()).map(|i| g[i] / x[i]).collect(),
        };
        vec![Some(grad)]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.iter().map(|g| g * self.0).collect())]
    }
}

impl Tape {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let numel: usize = bc.shape.iter().product();
        let data: Vec<f64> = if bc.a_map.is_none() && bc.b_map.is_none() {
            match op {
                BinaryOp::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
                BinaryOp::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
                BinaryOp::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            }
        } else {
            (0..numel)
                .map(|i| {
                    let x = gather(ad, &bc.a_map, i);
                    let y = gather(bd, &bc.b_map, i);
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                    }
                })
                .collect()
        };
        let value = Tensor::new(&bc.shape, data)?;
        Ok(self.record(value, &[a, b], BinaryBackward { op, bc }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = match op {
            UnaryOp::Sigmoid => xv.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Relu => xv.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryOp::Exp => xv.data().iter().map(|&v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::DomainError(format!("log of non-positive value {bad}")));
                }
                xv.data().iter().map(|&v| v.ln()).collect()
            }
        };
        if op == UnaryOp::Exp && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("exp overflow".into()));
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.record(value, &[x], UnaryBackward(op)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?;
        Ok(self.record(value, &[x], ScaleBackward(factor)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let a = tape.constant(x.clone());
        let b = tape.constant(Tensor::ones(&[2, 3]));
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn mul_grad_matches_central_difference() {
        let f = |a: f64| a * 3.0;
        let eps = 1e-6;
        let numeric = (f(2.0 + eps) - f(2.0 - eps)) / (2.0 * eps);

        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        let analytic = tape.grad(a).unwrap().data()[0];
        assert_eq!(analytic, 3.0);
        assert!((analytic - numeric).abs() / analytic.abs() < 1e-8);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::DomainError(_))));
    }

    #[test]
    fn incompatible_shapes_fail() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn broadcast_grad_sums_over_stretched_axes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.param(Tensor::new(&[2, 1], vec![10.0, 20.0]).unwrap());
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[4]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 4]);
    }
}
