//! Minimum-cost one-to-one assignment of predictions to ground truths.

use crate::error::{Error, Result};

/// `cost[pred][gt]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n_pred: usize,
    n_gt: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_pred: usize, n_gt: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_pred * n_gt {
            return Err(Error::Shape(format!(
                "cost matrix {n_pred}x{n_gt} needs {} entries, got {}",
                n_pred * n_gt,
                data.len()
            )));
        }
        Ok(CostMatrix { n_pred, n_gt, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_gt = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_gt) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        Self::new(rows.len(), n_gt, rows.concat())
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    #[inline]
    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.data[pred * self.n_gt + gt]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check(&self) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("cost matrix contains a non-finite entry".into()));
        }
        if self.n_pred < self.n_gt {
            return Err(Error::Contract(format!(
                "{} predictions cannot cover {} ground truths",
                self.n_pred, self.n_gt
            )));
        }
        Ok(())
    }
}

/// One `(pred, gt)` pair per ground truth, ordered by gt index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Ground-truth index matched to each prediction, if any.
    pub fn pred_to_gt(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

fn tolerance(scale: f64) -> f64 {
    1e-9 * (1.0 + scale.abs())
}

/// Optimal cost of matching `gts` to distinct `preds` (rows are gts).
/// Shortest augmenting paths with potentials, `O(n^2 m)`.
fn solve(cost: &CostMatrix, gts: &[usize], preds: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (gts.len(), preds.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(preds[j - 1], gts[i - 1]);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost.get(preds[row_to_col[i]], gts[i])).sum();
    (total, row_to_col.iter().map(|&j| preds[j]).collect())
}

/// Minimum-cost assignment covering every ground truth. Among optimal
/// assignments the one whose pred sequence (in gt order) is
/// lexicographically smallest is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check()?;
    let all_gts: Vec<usize> = (0..cost.n_gt).collect();
    let all_preds: Vec<usize> = (0..cost.n_pred).collect();
    let (opt, first) = solve(cost, &all_gts, &all_preds);
    let tol = tolerance(opt);
    let mut fixed = Vec::with_capacity(cost.n_gt);
    let mut fixed_cost = 0.0;
    let mut free: Vec<usize> = all_preds;
    for gt in 0..cost.n_gt {
        let rest: Vec<usize> = (gt + 1..cost.n_gt).collect();
        let on_first = fixed[..] == first[..gt];
        let mut chosen = None;
        for (slot, &pred) in free.iter().enumerate() {
            if on_first && pred == first[gt] {
                chosen = Some(slot);
                break;
            }
            let others: Vec<usize> = free.iter().copied().filter(|&p| p != pred).collect();
            let (sub, _) = solve(cost, &rest, &others);
            if fixed_cost + cost.get(pred, gt) + sub <= opt + tol {
                chosen = Some(slot);
                break;
            }
        }
        let slot = match chosen {
            Some(s) => s,
            None => {
                let remaining: Vec<usize> = (gt..cost.n_gt).collect();
                let (_, preds) = solve(cost, &remaining, &free);
                free.iter().position(|&p| p == preds[0]).expect("solution uses free preds")
            }
        };
        let pred = free.remove(slot);
        fixed_cost += cost.get(pred, gt);
        fixed.push(pred);
    }
    let pairs: Vec<(usize, usize)> = fixed.iter().enumerate().map(|(g, &p)| (p, g)).collect();
    let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Exhaustive search over injections gt -> pred in lexicographic order;
/// keeps the first assignment unless a later one is cheaper by more than
/// the tolerance.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Assignment> {
    if cost.n_gt > 8 {
        return Err(Error::Size(format!(
            "brute force matching supports at most 8 ground truths, got {}",
            cost.n_gt
        )));
    }
    cost.check()?;
    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, gt: usize, acc: f64) {
            if gt == self.cost.n_gt {
                let better = match &self.best {
                    None => true,
                    Some((b, _)) => acc < *b - tolerance(*b),
                };
                if better {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            for pred in 0..self.cost.n_pred {
                if !self.used[pred] {
                    self.used[pred] = true;
                    self.current.push(pred);
                    self.go(gt + 1, acc + self.cost.get(pred, gt));
                    self.current.pop();
                    self.used[pred] = false;
                }
            }
        }
    }
    let mut s = Search {
        cost,
        used: vec![false; cost.n_pred],
        current: Vec::with_capacity(cost.n_gt),
        best: None,
    };
    s.go(0, 0.0);
    let (_, preds) = s.best.unwrap_or((0.0, Vec::new()));
    let pairs: Vec<(usize, usize)> = preds.iter().enumerate().map(|(g, &p)| (p, g)).collect();
    let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(a.total_cost, 3.0);
        assert_eq!(brute_force_match(&c).unwrap(), a);
    }

    #[test]
    fn ties_pick_lowest_pred_indices() {
        let c = CostMatrix::new(3, 3, vec![0.0; 9]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(brute_force_match(&c).unwrap(), a);
        let wide = CostMatrix::new(5, 2, vec![1.0; 10]).unwrap();
        assert_eq!(hungarian(&wide).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn diagonal_preference_gives_identity() {
        let n = 4;
        let data: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 5.0 }).collect();
        let a = hungarian(&CostMatrix::new(n, n, data).unwrap()).unwrap();
        assert_eq!(a.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn contract_errors() {
        let nan = CostMatrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(hungarian(&nan), Err(Error::Contract(_))));
        let short = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(hungarian(&short), Err(Error::Contract(_))));
        let big = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force_match(&big), Err(Error::Size(_))));
    }

    #[test]
    fn empty_gt_set() {
        let c = CostMatrix::new(4, 0, vec![]).unwrap();
        let a = hungarian(&c).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }
}
