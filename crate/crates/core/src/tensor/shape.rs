use super::graph::{Adjoints, Graph, Op, Var};
use super::{split_at_axis, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Visits `(output_offset, input_offset)` pairs of a permutation in output order.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in 0..total {
        f(o, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Reshape { a }, rg, "reshape")
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, [n])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for shape {sa:?}")));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&sa, perm, |o, i| out[o] = src[i]);
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
            "permute",
        )
    }

    pub(super) fn bw_permute(&self, a: Var, perm: &[usize], _out: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let sa = self.shape(a).to_vec();
        if let Some(ga) = adj.slot(a) {
            for_each_permuted(&sa, perm, |o, i| ga[i] += gout[o]);
        }
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::cast(n as f64))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (outer, len, inner) = split_at_axis(&sa, axis)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis { a, axis }, rg, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| Error::Axis {
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::cast(len.max(1) as f64))
    }

    pub(super) fn bw_sum_axis(&self, a: Var, axis: usize, gout: &[T], adj: &mut Adjoints<T>) -> Result<()> {
        let (outer, len, inner) = split_at_axis(self.shape(a), axis)?;
        if let Some(ga) = adj.slot(a) {
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        ga[base + i] += gout[o * inner + i];
                    }
                }
            }
        }
        Ok(())
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        split_at_axis(&s0, axis)?;
        let mut total_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_len += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&s0, axis)?;
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = s0;
        out_shape[axis] = total_len;
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub(super) fn bw_concat(&self, inputs: &[Var], axis: usize, out: Var, gout: &[T], adj: &mut Adjoints<T>) -> Result<()> {
        let (outer, total_len, inner) = split_at_axis(self.shape(out), axis)?;
        let mut start = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            if let Some(gv) = adj.slot(v) {
                for o in 0..outer {
                    let src = &gout[(o * total_len + start) * inner..(o * total_len + start + len) * inner];
                    for (x, g) in gv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                        *x += *g;
                    }
                }
            }
            start += len;
        }
        Ok(())
    }

    /// Inserts a new axis at `axis` and joins along it.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(Error::Axis { axis, shape: s });
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (outer, full, inner) = split_at_axis(&sa, axis)?;
        if start + len > full {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {sa:?}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(out_shape, out)?, Op::Narrow { a, axis, start }, rg, "narrow")
    }

    pub(super) fn bw_narrow(&self, a: Var, axis: usize, start: usize, out: Var, gout: &[T], adj: &mut Adjoints<T>) -> Result<()> {
        let (outer, full, inner) = split_at_axis(self.shape(a), axis)?;
        let len = self.shape(out)[axis];
        if let Some(ga) = adj.slot(a) {
            for o in 0..outer {
                let dst = &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                for (x, g) in dst.iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner]) {
                    *x += *g;
                }
            }
        }
        Ok(())
    }

    /// Gathers rows (entries of axis 0) in the given order.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let rows = *sa.first().ok_or_else(|| Error::Shape("index_select on a scalar".into()))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row index {bad} out of range for {sa:?}")));
        }
        let inner: usize = sa[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = sa;
        out_shape[0] = indices.len();
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
            },
            rg,
            "index_select",
        )
    }

    pub(super) fn bw_index_select(&self, a: Var, indices: &[usize], gout: &[T], adj: &mut Adjoints<T>) {
        let inner: usize = self.shape(a)[1..].iter().product();
        if let Some(ga) = adj.slot(a) {
            for (n, &i) in indices.iter().enumerate() {
                for k in 0..inner {
                    ga[i * inner + k] += gout[n * inner + k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let a = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let v = g.value(p);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(v.at(&[k, i, j]), (i * 12 + j * 4 + k) as f64);
                }
            }
        }
        assert!(g.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_narrow_roundtrip_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2, 1], &[1., 2.]));
        let b = g.variable(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let n = g.narrow(c, 1, 1, 1).unwrap();
        assert_eq!(g.value(n).data(), &[3., 5.]);
        let s = g.sum(n).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0., 0.]);
        assert_eq!(g.grad(b).unwrap().data(), &[1., 0., 1., 0.]);
    }

    #[test]
    fn sum_axis_and_index_select() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let s = g.sum_axis(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[9., 12.]);
        let rows = g.index_select(a, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        let tot = g.sum(rows).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
        assert!(g.index_select(a, &[3]).is_err());
    }

    #[test]
    fn stack_adds_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.value(s).data(), &[1., 3., 2., 4.]);
    }
}
