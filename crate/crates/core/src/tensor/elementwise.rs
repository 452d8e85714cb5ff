use super::graph::{Adjoints, Graph, Op, Var};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    LogSigmoid,
    Neg,
    Tanh,
}

/// Elementwise activations exposed as one entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
}

/// Maps output flat indices of a broadcast op back to one input.
enum IndexMap {
    Same,
    Scalar,
    /// Input matches a trailing block of the output: `i % len`.
    Cycle(usize),
    /// Input matches a leading block of the output: `i / inner`.
    Repeat(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    fn new(input: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let mut full = vec![1; rank - input.len()];
        full.extend_from_slice(input);
        let numel: usize = input.iter().product();
        if full == out {
            return IndexMap::Same;
        }
        if numel == 1 {
            return IndexMap::Scalar;
        }
        if let Some(k) = (0..=rank).find(|&k| full[..k].iter().all(|&d| d == 1) && full[k..] == out[k..]) {
            if k > 0 {
                return IndexMap::Cycle(numel);
            }
        }
        if let Some(k) = (0..=rank).rev().find(|&k| full[..k] == out[..k] && full[k..].iter().all(|&d| d == 1)) {
            if k < rank {
                return IndexMap::Repeat(out[k..].iter().product());
            }
        }
        let in_strides = strides(&full);
        let eff: Vec<usize> = full
            .iter()
            .zip(&in_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let total: usize = out.iter().product();
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            table.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        IndexMap::Table(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Scalar => 0,
            IndexMap::Cycle(n) => i % n,
            IndexMap::Repeat(inner) => i / inner,
            IndexMap::Table(t) => t[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl<'p, T: Real> Graph<'p, T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Dimension {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let ma = IndexMap::new(sa, &out_shape);
        let mb = IndexMap::new(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: usize = out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let data: Vec<T> = match (&ma, &mb) {
            (IndexMap::Same, IndexMap::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..total).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(out_shape, data)?, Op::Binary { kind, a, b }, rg, name)
    }

    pub(super) fn bw_binary(&self, kind: BinaryKind, a: Var, b: Var, out: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let out_shape = self.shape(out);
        let da = self.value(a).data();
        let db = self.value(b).data();
        if adj.slot(a).is_some() {
            let ma = IndexMap::new(self.shape(a), out_shape);
            let mb = IndexMap::new(self.shape(b), out_shape);
            let ga = adj.slot(a).unwrap();
            for (i, &g) in gout.iter().enumerate() {
                let (ia, ib) = (ma.at(i), mb.at(i));
                let (x, y) = (da[ia], db[ib]);
                let d = match kind {
                    BinaryKind::Add | BinaryKind::Sub => T::one(),
                    BinaryKind::Mul => y,
                    BinaryKind::Div => T::one() / y,
                    BinaryKind::Min => bool_to(x <= y),
                    BinaryKind::Max => bool_to(x >= y),
                };
                ga[ia] += g * d;
            }
        }
        if adj.slot(b).is_some() {
            let ma = IndexMap::new(self.shape(a), out_shape);
            let mb = IndexMap::new(self.shape(b), out_shape);
            let gb = adj.slot(b).unwrap();
            for (i, &g) in gout.iter().enumerate() {
                let (ia, ib) = (ma.at(i), mb.at(i));
                let (x, y) = (da[ia], db[ib]);
                let d = match kind {
                    BinaryKind::Add => T::one(),
                    BinaryKind::Sub => -T::one(),
                    BinaryKind::Mul => x,
                    BinaryKind::Div => -x / (y * y),
                    BinaryKind::Min => bool_to(x > y),
                    BinaryKind::Max => bool_to(x < y),
                };
                gb[ib] += g * d;
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b, "minimum")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b, "maximum")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale { a, factor }, rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Offset { a }, rg, "add_scalar")
    }

    fn unary(&mut self, kind: UnaryKind, a: Var, name: &'static str) -> Result<Var> {
        let f = |x: T| match kind {
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::LogSigmoid => log_sigmoid(x),
            UnaryKind::Neg => -x,
            UnaryKind::Tanh => x.tanh(),
        };
        let t = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Unary { kind, a }, rg, name)
    }

    pub(super) fn bw_unary(&self, kind: UnaryKind, a: Var, out: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let xs = self.value(a).data();
        let ys = self.value(out).data();
        let Some(ga) = adj.slot(a) else { return };
        for i in 0..gout.len() {
            let (x, y) = (xs[i], ys[i]);
            let d = match kind {
                UnaryKind::Relu => bool_to(x > T::zero()),
                UnaryKind::Sigmoid => y * (T::one() - y),
                UnaryKind::Exp => y,
                UnaryKind::Log => T::one() / x,
                UnaryKind::Abs => {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sqrt => T::cast(0.5) / y,
                UnaryKind::LogSigmoid => sigmoid(-x),
                UnaryKind::Neg => -T::one(),
                UnaryKind::Tanh => T::one() - y * y,
            };
            ga[i] += gout[i] * d;
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a, "abs")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a, "sqrt")
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::LogSigmoid, a, "log_sigmoid")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a, "neg")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a, "tanh")
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Exp => self.exp(a),
        }
    }

    /// `x^exponent` for non-negative `x`.
    pub fn powf(&mut self, a: Var, exponent: T) -> Result<Var> {
        let t = self.value(a).map(|x| x.powf(exponent));
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Powf { a, exponent }, rg, "powf")
    }

    pub(super) fn bw_powf(&self, a: Var, p: T, gout: &[T], adj: &mut Adjoints<T>) {
        let xs = self.value(a).data();
        let Some(ga) = adj.slot(a) else { return };
        for i in 0..gout.len() {
            let d = if p == T::one() {
                T::one()
            } else if xs[i] == T::zero() {
                if p > T::one() {
                    T::zero()
                } else {
                    T::infinity()
                }
            } else {
                p * xs[i].powf(p - T::one())
            };
            ga[i] += gout[i] * d;
        }
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Clamp { a, lo, hi }, rg, "clamp")
    }

    pub(super) fn bw_clamp(&self, a: Var, lo: T, hi: T, gout: &[T], adj: &mut Adjoints<T>) {
        let xs = self.value(a).data();
        let Some(ga) = adj.slot(a) else { return };
        for i in 0..gout.len() {
            if xs[i] >= lo && xs[i] <= hi {
                ga[i] += gout[i];
            }
        }
    }
}

#[inline]
fn bool_to<T: Real>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_sigmoid_exp_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.activation(x, Activation::Relu).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.activation(z, Activation::Sigmoid).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let e_in = g.constant(t(&[2], &[0.0, 1.0]));
        let e = g.activation(e_in, Activation::Exp).unwrap();
        assert_eq!(g.value(e).data()[0], 1.0);
        assert!((g.value(e).data()[1] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcasting_bias_and_column() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = g.variable(t(&[3], &[10., 20., 30.]));
        let col = g.variable(t(&[2, 1], &[1., 2.]));
        let y = g.add(x, bias).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let z = g.mul(y, col).unwrap();
        assert_eq!(g.value(z).data(), &[11., 22., 33., 28., 50., 72.]);
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(bias).unwrap().data(), &[3., 3., 3.]);
        assert_eq!(g.grad(col).unwrap().data(), &[66., 75.]);
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn general_broadcast_uses_table() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.variable(t(&[1, 2, 1], &[10., 100.]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 3]);
        assert_eq!(
            g.value(y).data(),
            &[10., 20., 30., 100., 200., 300., 40., 50., 60., 400., 500., 600.]
        );
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[110.; 6]);
        assert_eq!(g.grad(b).unwrap().data(), &[21., 21.]);
    }

    #[test]
    fn incompatible_broadcast_is_a_dimension_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-1000.0f64) + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(1000.0f64).abs() < 1e-300);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
