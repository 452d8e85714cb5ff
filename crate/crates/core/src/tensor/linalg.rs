use super::elementwise::broadcast_shape;
use super::graph::{Adjoints, Graph, Op, Var};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

/// `c[p x r] += a[p x q] * b[q x r]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != T::zero() {
                axpy(aik, &b[k * r..(k + 1) * r], c_row);
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[p x q] += a[p x r] * b[q x r]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * r..(i + 1) * r];
        for k in 0..q {
            c[i * q + k] += dot(a_row, &b[k * r..(k + 1) * r]);
        }
    }
}

/// Dot product with eight independent partial sums, in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for (&u, &v) in xr.iter().zip(yr) {
        tail += u * v;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `c[q x r] += a[p x q]^T * b[p x r]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let b_row = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != T::zero() {
                axpy(aik, b_row, &mut c[k * r..(k + 1) * r]);
            }
        }
    }
}

struct MatmulPlan {
    p: usize,
    q: usize,
    r: usize,
    out_shape: Vec<usize>,
    /// Per output batch entry: (batch index into a, batch index into b).
    batches: Vec<(usize, usize)>,
}

fn plan(sa: &[usize], sb: &[usize]) -> Result<MatmulPlan> {
    let err = || Error::Dimension {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if q != q2 {
        return Err(err());
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
    let rank = batch.len();
    let pad = |s: &[usize]| {
        let mut full = vec![1; rank - s.len()];
        full.extend_from_slice(s);
        full
    };
    let (fa, fb) = (pad(ba), pad(bb));
    let (sta, stb) = (strides(&fa), strides(&fb));
    let total: usize = batch.iter().product();
    let mut batches = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if fa[d] != 1 {
                oa += idx[d] * sta[d];
            }
            if fb[d] != 1 {
                ob += idx[d] * stb[d];
            }
        }
        batches.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend_from_slice(&[p, r]);
    Ok(MatmulPlan {
        p,
        q,
        r,
        out_shape,
        batches,
    })
}

impl<'p, T: Real> Graph<'p, T> {
    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let pl = plan(self.shape(a), self.shape(b))?;
        let (p, q, r) = (pl.p, pl.q, pl.r);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); pl.batches.len() * p * r];
        for (n, &(ia, ib)) in pl.batches.iter().enumerate() {
            gemm_nn(
                &da[ia * p * q..(ia + 1) * p * q],
                &db[ib * q * r..(ib + 1) * q * r],
                &mut out[n * p * r..(n + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(pl.out_shape, out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    pub(super) fn bw_matmul(&self, a: Var, b: Var, _out: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let pl = plan(self.shape(a), self.shape(b)).expect("validated in forward");
        let (p, q, r) = (pl.p, pl.q, pl.r);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if let Some(ga) = adj.slot(a) {
            for (n, &(ia, ib)) in pl.batches.iter().enumerate() {
                gemm_nt(
                    &gout[n * p * r..(n + 1) * p * r],
                    &db[ib * q * r..(ib + 1) * q * r],
                    &mut ga[ia * p * q..(ia + 1) * p * q],
                    p,
                    q,
                    r,
                );
            }
        }
        if let Some(gb) = adj.slot(b) {
            for (n, &(ia, ib)) in pl.batches.iter().enumerate() {
                gemm_tn(
                    &da[ia * p * q..(ia + 1) * p * q],
                    &gout[n * p * r..(n + 1) * p * r],
                    &mut gb[ib * q * r..(ib + 1) * q * r],
                    p,
                    q,
                    r,
                );
            }
        }
    }

    /// `x W + b` applied over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) || sb != [sw[1]] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = if sx.len() == 2 { x } else { self.reshape(x, [rows, sw[0]])? };
        let y = self.matmul(flat, w)?;
        let y = self.add(y, b)?;
        if sx.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = sx[..sx.len() - 1].to_vec();
            out_shape.push(sw[1]);
            self.reshape(y, out_shape)
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
    fn two_by_two_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let a = g.constant(t(&[3, 4], &data));
        let i = g.constant(Tensor::eye(4));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &data[..]);
    }

    #[test]
    fn mismatched_inner_dims_report_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_broadcast_product() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.variable(t(&[2, 1], &[1., -1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[-1., -1.]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4., 6.]);
        assert_eq!(g.grad(a).unwrap().data(), &[1., -1., 1., -1.]);
    }

    #[test]
    fn linear_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1., 1.]));
        let w = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[1], &[3.]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.]);
        let bad = g.constant(Tensor::zeros([3, 1]));
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn linear_identity_on_higher_rank_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 2, 3], &data));
        let w = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::zeros([3]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 3]);
        assert_eq!(g.value(y).data(), &data[..]);
    }
}
