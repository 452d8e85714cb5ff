//! Parameterized building blocks shared by the backbone and both stages.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

/// Registers named parameters in a store. Each random initial value is drawn
/// from a stream keyed by the parameter's full name, so adding or removing
/// a module leaves the other modules' initial values unchanged.
pub struct Builder<'a, T: Real = f32> {
    store: &'a mut ParamStore<T>,
    init: &'a mut Init,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, init: &'a mut Init) -> Self {
        Builder {
            store,
            init,
            prefix: String::new(),
        }
    }

    /// Builder whose parameter names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: self.full(name),
            store: &mut *self.store,
            init: &mut *self.init,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(full, value)
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = self.init.fork(&self.full(name)).xavier(shape);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn full_of(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), T::cast(value)))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let t = self.init.fork(&self.full(name)).uniform(shape, lo, hi);
        self.add(name, t)
    }

    /// Overrides the initial value of an already registered parameter.
    pub fn store_value(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.store.value_mut(id)
    }
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Linear {
            w: s.xavier("weight", &[din, dout])?,
            b: s.zeros("bias", &[dout])?,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Norm {
            gain: s.full_of("gain", &[dim], 1.0)?,
            bias: s.zeros("bias", &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, gain, bias, axis, T::cast(NORM_EPS))
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Ffn {
            fc1: Linear::new(&mut s, "fc1", din, hidden)?,
            fc2: Linear::new(&mut s, "fc2", hidden, dout)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with input and output projections, wrapped as
/// `query + attend(norm(query), keys, values)`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm: Norm,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "channel count {dim} is not divisible by {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Attention {
            wq: Linear::new(&mut s, "q", dim, dim)?,
            wk: Linear::new(&mut s, "k", dim, dim)?,
            wv: Linear::new(&mut s, "v", dim, dim)?,
            wo: Linear::new(&mut s, "out", dim, dim)?,
            norm: Norm::new(&mut s, "norm", dim)?,
            heads,
            dim,
        })
    }

    /// Projected multi-head attention without residual or norm.
    /// `query` is `[n, c]`, `keys` and `values` are `[m, c]`.
    pub fn attend<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, keys: Var, values: Var) -> Result<Var> {
        let n = g.shape(query)[0];
        let m = g.shape(keys)[0];
        let (h, d) = (self.heads, self.dim / self.heads);
        let q = self.wq.forward(g, query)?;
        let k = self.wk.forward(g, keys)?;
        let v = self.wv.forward(g, values)?;
        let q = split_heads(g, q, n, h, d)?;
        let k = split_heads(g, k, m, h, d)?;
        let v = split_heads(g, v, m, h, d)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::cast(1.0 / (d as f64).sqrt()))?;
        let attn = g.softmax(scores, 2)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = g.permute(mixed, &[1, 0, 2])?;
        let mixed = g.reshape(mixed, [n, self.dim])?;
        self.wo.forward(g, mixed)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, keys: Var, values: Var) -> Result<Var> {
        let n = self.norm.forward(g, query)?;
        let a = self.attend(g, n, keys, values)?;
        g.add(query, a)
    }

    pub fn self_attend<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let n = self.norm.forward(g, q)?;
        let a = self.attend(g, n, n, n)?;
        g.add(q, a)
    }
}

fn split_heads<T: Real>(g: &mut Graph<'_, T>, x: Var, rows: usize, heads: usize, d: usize) -> Result<Var> {
    let x = g.reshape(x, [rows, heads, d])?;
    g.permute(x, &[1, 0, 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build<T: Real>(f: impl FnOnce(&mut Builder<'_, T>) -> Result<Attention>) -> (ParamStore<T>, Attention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let a = f(&mut Builder::new(&mut store, &mut init)).unwrap();
        (store, a)
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        let err = Attention::new(&mut Builder::new(&mut store, &mut init), "a", 10, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scoped_names_nest() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        let mut b = Builder::new(&mut store, &mut init);
        let mut s = b.scope("outer");
        Linear::new(&mut s, "inner", 2, 3).unwrap();
        assert!(store.find("outer.inner.weight").is_some());
        assert!(store.find("outer.inner.bias").is_some());
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let (store, a) = build::<f64>(|b| Attention::new(b, "a", 4, 2));
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::from_f64([2, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -0.2, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64([3, 4], &[0.7, 0.1, -0.4, 0.2].repeat(3)).unwrap());
        let vals = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0, 0.0, 1.0, 1.0, 0.0];
        let v = g.constant(Tensor::from_f64([3, 4], &vals).unwrap());
        let out = a.attend(&mut g, q, k, v).unwrap();
        let mean = g.constant(Tensor::from_f64([3, 4], &[0.0, 1.0, 3.0, 2.0].repeat(3)).unwrap());
        let expect = a.attend(&mut g, q, k, mean).unwrap();
        let (x, y) = (g.value(out).clone(), g.value(expect).clone());
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn saturated_scores_pick_one_value_row() {
        let (mut store, a) = build::<f64>(|b| Attention::new(b, "a", 2, 1));
        for id in [a.wq.w, a.wk.w, a.wv.w, a.wo.w] {
            *store.value_mut(id) = Tensor::eye(2);
        }
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::from_f64([1, 2], &[100.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::from_f64([2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = a.attend(&mut g, q, k, v).unwrap();
        assert!(g.value(out).max_abs_diff(&Tensor::from_f64([1, 2], &[5.0, 6.0]).unwrap()) < 1e-9);
    }
}
