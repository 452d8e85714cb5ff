use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients which are
/// zero up to rounding compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|g_tape - g_fd| / max(REL_FLOOR, |g_tape| + |g_fd|)`.
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` where the max was attained.
    pub worst: Option<(usize, usize)>,
    /// Tape and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Checks the tape gradient of a scalar function of `params` against
/// central finite differences `(f(θ+eps) - f(θ-eps)) / 2eps`, coordinate by
/// coordinate. `f` receives the graph and one leaf per entry of `params`.
///
/// Runs in 64-bit precision. Inputs sitting exactly on a ReLU kink should be
/// moved off it first (see [`nudge_off_kinks`]).
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_limited(f, params, eps, usize::MAX)
}

/// Like [`finite_diff_check`] but checks at most `max_coords` evenly spaced
/// coordinates of each parameter.
pub fn finite_diff_check_limited<F>(f: F, params: &[Tensor<f64>], eps: f64, max_coords: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(None, params, |g, v| f(g, v), eps, max_coords)
}

/// Gradient check of a function of `inputs` and of every parameter in
/// `store`, which `f` binds through [`Graph::param`]. In the report,
/// indices below `inputs.len()` are inputs and the rest are parameters.
pub fn finite_diff_check_with_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &[Var]) -> Result<Var>,
{
    check(Some(store), inputs, f, eps, max_coords)
}

fn graph(s: Option<&ParamStore<f64>>) -> Graph<'_, f64> {
    match s {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    }
}

fn check<F>(store: Option<&ParamStore<f64>>, inputs: &[Tensor<f64>], f: F, eps: f64, max_coords: usize) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: Option<&ParamStore<f64>>, values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = graph(s);
        let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = graph(store);
    let leaves: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    g.backward(out)?;
    let mut tape: Vec<Tensor<f64>> = leaves.iter().map(|&v| g.grad(v).cloned().expect("leaf grad")).collect();
    if store.is_some() {
        tape.extend(g.param_grads().iter().cloned());
    }
    drop(g);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let mut work = inputs.to_vec();
    let mut work_store = store.cloned();
    let ids: Vec<ParamId> = store.map(|s| s.ids().collect()).unwrap_or_default();
    for (pi, grad) in tape.iter().enumerate() {
        let n = grad.numel();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for k in (0..n).step_by(step) {
            let mut fd_at = |delta: f64| -> Result<f64> {
                let slot = if pi < inputs.len() {
                    &mut work[pi].data_mut()[k]
                } else {
                    &mut work_store.as_mut().expect("params").value_mut(ids[pi - inputs.len()]).data_mut()[k]
                };
                let orig = *slot;
                *slot = orig + delta;
                let v = eval(work_store.as_ref(), &work);
                let slot = if pi < inputs.len() {
                    &mut work[pi].data_mut()[k]
                } else {
                    &mut work_store.as_mut().expect("params").value_mut(ids[pi - inputs.len()]).data_mut()[k]
                };
                *slot = orig;
                v
            };
            let up = fd_at(eps)?;
            let down = fd_at(-eps)?;
            let fd = (up - down) / (2.0 * eps);
            let gt = grad.data()[k];
            let rel = (gt - fd).abs() / (gt.abs() + fd.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, k));
                report.worst_values = (gt, fd);
            }
        }
    }
    Ok(report)
}

/// Moves entries closer than `margin` to zero out to `±margin`, so that
/// finite differences never straddle a ReLU kink at the input.
pub fn nudge_off_kinks(t: &mut Tensor<f64>, margin: f64) {
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin } else { margin };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_tiny_error() {
        let p = [Tensor::from_f64([1], &[3.0]).unwrap()];
        let r = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = [Tensor::from_f64([2], &[1.0, -1.0]).unwrap()];
        let r = finite_diff_check(|g, _| Ok(g.scalar(4.0)), &p, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = [Tensor::from_f64([1], &[0.0]).unwrap()];
        let r = finite_diff_check(
            |g, v| {
                let l = g.log(v[0])?;
                g.sum(l)
            },
            &p,
            1e-4,
        );
        assert!(r.is_err());
    }

    #[test]
    fn nudging_moves_values_off_zero() {
        let mut t = Tensor::from_f64([3], &[0.0, -1e-9, 0.5]).unwrap();
        nudge_off_kinks(&mut t, 1e-3);
        assert_eq!(t.data(), &[1e-3, -1e-3, 0.5]);
    }
}
