use super::elementwise::{BinaryKind, UnaryKind};
use super::param::{Gradients, ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(super) enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Recorded operation. Inputs always refer to earlier nodes, so the node
/// vector is a valid topological order.
pub(super) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { a: Var, factor: T },
    Offset { a: Var },
    Unary { kind: UnaryKind, a: Var },
    Powf { a: Var, exponent: T },
    Clamp { a: Var, lo: T, hi: T },
    MatMul { a: Var, b: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Upsample2x { a: Var },
    Bilinear { feat: Var, points: Var },
}

pub(super) struct Node<'p, T> {
    value: Value<'p, T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Gradient buffers for one backward sweep, allocated on first write.
pub(super) struct Adjoints<T> {
    slots: Vec<Option<Vec<T>>>,
    need: Vec<bool>,
    sizes: Vec<usize>,
}

impl<T: Real> Adjoints<T> {
    /// Mutable gradient buffer for `v`, or `None` when `v` does not need one.
    pub(super) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.need[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); size]))
    }

    fn take(&mut self, i: usize) -> Option<Vec<T>> {
        self.slots[i].take()
    }
}

/// Differentiation tape. Values are computed eagerly as ops are recorded.
///
/// Calling [`Graph::backward`] more than once accumulates into the leaf
/// gradients; call [`Graph::zero_grad`] to reset them.
pub struct Graph<'p, T: Real = f32> {
    pub(super) nodes: Vec<Node<'p, T>>,
    store: Option<&'p ParamStore<T>>,
    params_require_grad: bool,
    bound: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            params_require_grad: true,
            bound: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A tape that can bind parameters from `store` by reference.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            params_require_grad: true,
            bound: vec![None; store.len()],
            leaf_grads: Vec::new(),
        }
    }

    /// Bound parameters will not require gradients (evaluation mode).
    pub fn frozen(mut self) -> Self {
        self.params_require_grad = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that does not take part in differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(t), false)
    }

    /// Differentiable leaf; its gradient is available after `backward`.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(t), true)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Binds a parameter of the attached store. Repeated calls return the
    /// same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let v = self.push_leaf(Value::Borrowed(store.value(id)), self.params_require_grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_leaf(&mut self, value: Value<'p, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(super) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(super) fn push(&mut self, t: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !t.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf ends up
    /// with a gradient, zero when the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = loss.0 + 1;
        let mut adj = Adjoints {
            slots: (0..count).map(|_| None).collect(),
            need: self.nodes[..count].iter().map(|n| n.requires_grad).collect(),
            sizes: self.nodes[..count].iter().map(|n| n.value.get().numel()).collect(),
        };
        if let Some(s) = adj.slot(loss) {
            s[0] = T::one();
        }
        for i in (0..count).rev() {
            let Some(gout) = adj.take(i) else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    let shape = self.nodes[i].value.get().shape().to_vec();
                    match &mut self.leaf_grads[i] {
                        Some(acc) => {
                            for (a, g) in acc.data_mut().iter_mut().zip(&gout) {
                                *a += *g;
                            }
                        }
                        slot => *slot = Some(Tensor::new(shape, gout)?),
                    }
                }
                _ => self.backward_node(Var(i), &gout, &mut adj)?,
            }
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.leaf_grads[i].is_none() {
                self.leaf_grads[i] = Some(Tensor::zeros(node.value.get().shape()));
            }
        }
        Ok(())
    }

    fn backward_node(&self, out: Var, gout: &[T], adj: &mut Adjoints<T>) -> Result<()> {
        match &self.nodes[out.0].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Binary { kind, a, b } => self.bw_binary(*kind, *a, *b, out, gout, adj),
            Op::Scale { a, factor } => {
                if let Some(ga) = adj.slot(*a) {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += *g * *factor;
                    }
                }
            }
            Op::Offset { a } => {
                if let Some(ga) = adj.slot(*a) {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += *g;
                    }
                }
            }
            Op::Unary { kind, a } => self.bw_unary(*kind, *a, out, gout, adj),
            Op::Powf { a, exponent } => self.bw_powf(*a, *exponent, gout, adj),
            Op::Clamp { a, lo, hi } => self.bw_clamp(*a, *lo, *hi, gout, adj),
            Op::MatMul { a, b } => self.bw_matmul(*a, *b, out, gout, adj),
            Op::Permute { a, perm } => self.bw_permute(*a, perm, out, gout, adj),
            Op::Reshape { a } => {
                if let Some(ga) = adj.slot(*a) {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += *g;
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = adj.slot(*a) {
                    for x in ga.iter_mut() {
                        *x += gout[0];
                    }
                }
            }
            Op::SumAxis { a, axis } => self.bw_sum_axis(*a, *axis, gout, adj)?,
            Op::Softmax { a, axis } => self.bw_softmax(*a, *axis, out, gout, adj)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => self.bw_layer_norm(*x, *gain, *bias, *axis, xhat, rstd, gout, adj)?,
            Op::Concat { inputs, axis } => self.bw_concat(inputs, *axis, out, gout, adj)?,
            Op::Narrow { a, axis, start } => self.bw_narrow(*a, *axis, *start, out, gout, adj)?,
            Op::IndexSelect { a, indices } => self.bw_index_select(*a, indices, gout, adj),
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                cols,
            } => self.bw_conv2d(*x, *k, *stride, *pad, cols, out, gout, adj),
            Op::Upsample2x { a } => self.bw_upsample2x(*a, gout, adj),
            Op::Bilinear { feat, points } => self.bw_bilinear(*feat, *points, gout, adj),
        }
        Ok(())
    }

    /// Gradients of every bound parameter, aligned with the store; unused
    /// parameters get zeros.
    pub fn param_grads(&self) -> Gradients<T> {
        let store = self.store.expect("graph has no parameter store attached");
        let mut grads = Gradients::zeros_like(store);
        self.add_param_grads(&mut grads, T::one());
        grads
    }

    /// Adds `scale * grad` of every bound parameter into `grads`.
    pub fn add_param_grads(&self, grads: &mut Gradients<T>, scale: T) {
        for (pid, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = &self.leaf_grads[v.0] {
                for (acc, x) in grads.get_mut(ParamId(pid)).data_mut().iter_mut().zip(g.data()) {
                    *acc += *x * scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let unused = g.variable(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicated_input_paths_add_up() {
        // loss = sum(x * x + 3 x) has gradient 2x + 3; x feeds three edges.
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[1.5, -0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, lin).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 2.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let x = g.variable(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
