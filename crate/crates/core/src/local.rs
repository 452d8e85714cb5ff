//! Local refinement: RoI features for every global box, query-guided
//! feature enhancing, self-attention, box-relative sampling/mixing and the
//! final per-class scores with refined boxes.

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::global::{bidirectional_sample, AdaptiveMixing, Frame, PointPredictor, QuerySet, PRIOR_BIAS};
use crate::layers::{Attention, Builder, Linear, Norm};
use crate::model::ModelConfig;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Sub-samples per bin along each axis.
pub const SAMPLING_RATIO: usize = 2;
/// Smallest box side after clipping, in normalized units.
pub const MIN_BOX_SIZE: f64 = 1e-4;
/// Bound on predicted log-scale deltas.
pub const MAX_LOG_DELTA: f64 = 4.0;

/// Pyramid level index (0 for P2 ... 3 for P5) read by RoIAlign for a box
/// of normalized size `w x h` on an image of `image_size` pixels.
pub fn roi_level(w: f64, h: f64, image_size: (usize, usize), canonical: f64) -> usize {
    let area = (w * h * image_size.0 as f64 * image_size.1 as f64).max(1e-12);
    let k = (4.0 + (area.sqrt() / canonical).log2()).floor();
    (k.clamp(2.0, 5.0) as usize) - 2
}

/// Box clipped to the unit square as corners `(x1, y1, x2, y2)` with sides
/// of at least [`MIN_BOX_SIZE`].
pub fn clip_box(b: [f64; 4]) -> [f64; 4] {
    let x1 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let x2 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y2 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    [x1, y1, x1 + (x2 - x1).max(MIN_BOX_SIZE), y1 + (y2 - y1).max(MIN_BOX_SIZE)]
}

/// Fractions of the box side at which sub-samples are read, `[S*S*r*r, 2]`
/// with the `r*r` samples of each bin contiguous and bins row-major.
fn roi_offsets(s: usize) -> Vec<f64> {
    let r = SAMPLING_RATIO;
    let mut out = Vec::with_capacity(s * s * r * r * 2);
    for by in 0..s {
        for bx in 0..s {
            for sy in 0..r {
                for sx in 0..r {
                    out.push((bx as f64 + (sx as f64 + 0.5) / r as f64) / s as f64);
                    out.push((by as f64 + (sy as f64 + 0.5) / r as f64) / s as f64);
                }
            }
        }
    }
    out
}

/// Pools `[n, S*S, C]` features from `boxes` (`[n, 4]`, normalized
/// `(cx, cy, w, h)`). Each bin averages a 2x2 grid of bilinear reads on the
/// level picked by [`roi_level`]. Differentiable in the box coordinates.
pub fn roi_align<T: Real>(
    g: &mut Graph<'_, T>,
    p: &FeaturePyramid,
    boxes: Var,
    s: usize,
    canonical: f64,
) -> Result<Var> {
    let bs = g.shape(boxes).to_vec();
    if bs.len() != 2 || bs[1] != 4 || s == 0 {
        return Err(Error::Shape(format!("roi_align needs [n, 4] boxes and S >= 1, got {bs:?}, S={s}")));
    }
    let n = bs[0];
    let ss = s * s;
    let per = ss * SAMPLING_RATIO * SAMPLING_RATIO;
    let vals = g.value(boxes).to_f64_vec();
    let mut levels = Vec::with_capacity(n);
    for i in 0..n {
        let b = [vals[4 * i], vals[4 * i + 1], vals[4 * i + 2], vals[4 * i + 3]];
        let raw_w = (b[0] + b[2] / 2.0).min(1.0) - (b[0] - b[2] / 2.0).max(0.0);
        let raw_h = (b[1] + b[3] / 2.0).min(1.0) - (b[1] - b[3] / 2.0).max(0.0);
        if raw_w < MIN_BOX_SIZE || raw_h < MIN_BOX_SIZE {
            log::debug!("degenerate roi {b:?} clamped to minimum size");
        }
        let c = clip_box(b);
        levels.push(roi_level(c[2] - c[0], c[3] - c[1], p.image_size, canonical));
    }

    let centre = g.narrow(boxes, 1, 0, 2)?;
    let size = g.narrow(boxes, 1, 2, 2)?;
    let half = g.scale(size, T::cast(0.5))?;
    let lo = g.sub(centre, half)?;
    let lo = g.clamp(lo, T::zero(), T::one())?;
    let hi = g.add(centre, half)?;
    let hi = g.clamp(hi, T::zero(), T::one())?;
    let extent = g.sub(hi, lo)?;
    let floor = g.scalar(T::cast(MIN_BOX_SIZE));
    let extent = g.maximum(extent, floor)?;
    let lo = g.reshape(lo, [n, 1, 2])?;
    let extent = g.reshape(extent, [n, 1, 2])?;
    let frac = g.constant(Tensor::from_f64([1, per, 2], &roi_offsets(s))?);
    let scaled = g.mul(extent, frac)?;
    let pts = g.add(lo, scaled)?;

    let mut pooled = Vec::with_capacity(n);
    for (i, &lvl) in levels.iter().enumerate() {
        let pi = g.narrow(pts, 0, i, 1)?;
        let pi = g.reshape(pi, [per, 2])?;
        pooled.push(g.bilinear_sample(p.levels[lvl], pi)?);
    }
    let c = p.channels;
    let all = g.stack(&pooled, 0)?;
    let all = g.reshape(all, [n, ss, SAMPLING_RATIO * SAMPLING_RATIO, c])?;
    g.mean_axis(all, 2)
}

/// Query-guided feature enhancing, batched over queries.
#[derive(Clone, Copy, Debug)]
pub struct Qgfe {
    pub linear1: Linear,
    pub linear2: Linear,
    pub norm1: Norm,
    pub norm2: Norm,
    pub linear3: Linear,
    pub c: usize,
    pub s: usize,
}

/// Per-query shapes observed while running [`Qgfe::forward`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QgfeTrace {
    pub kernel1: Vec<usize>,
    pub kernel2: Vec<usize>,
    pub after_first: Vec<usize>,
    pub after_second: Vec<usize>,
    pub output: Vec<usize>,
}

impl Qgfe {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, s: usize) -> Result<Self> {
        let ss = s * s;
        let mut sc = b.scope("qgfe");
        Ok(Qgfe {
            linear1: Linear::new(&mut sc, "linear1", c, c * ss)?,
            linear2: Linear::new(&mut sc, "linear2", c, c * ss)?,
            norm1: Norm::new(&mut sc, "norm1", ss)?,
            norm2: Norm::new(&mut sc, "norm2", ss)?,
            linear3: Linear::new(&mut sc, "linear3", c * ss, c)?,
            c,
            s,
        })
    }

    /// `q` is `[n, C]`, `roi` is `[n, S*S, C]`; returns `[n, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, roi: Var) -> Result<(Var, QgfeTrace)> {
        let n = g.shape(q)[0];
        let (c, ss) = (self.c, self.s * self.s);
        let rs = g.shape(roi).to_vec();
        if rs != [n, ss, c] {
            return Err(Error::Dimension {
                op: "qgfe",
                lhs: vec![n, c],
                rhs: rs,
            });
        }
        let k1 = self.linear1.forward(g, q)?;
        let k1 = g.reshape(k1, [n, c, ss])?;
        let k2 = self.linear2.forward(g, q)?;
        let k2 = g.reshape(k2, [n, c, ss])?;
        let x = g.matmul(roi, k1)?;
        let x = self.norm1.forward(g, x)?;
        let x = g.relu(x)?;
        let after_first = g.shape(x)[1..].to_vec();
        let x = g.matmul(k2, x)?;
        let x = self.norm2.forward(g, x)?;
        let x = g.relu(x)?;
        let after_second = g.shape(x)[1..].to_vec();
        let x = g.reshape(x, [n, c * ss])?;
        let out = self.linear3.forward(g, x)?;
        let trace = QgfeTrace {
            kernel1: g.shape(k1)[1..].to_vec(),
            kernel2: g.shape(k2)[1..].to_vec(),
            after_first,
            after_second,
            output: vec![1, g.shape(out)[1]],
        };
        Ok((out, trace))
    }
}

/// `q + d + r`, elementwise.
pub fn fuse_query<T: Real>(g: &mut Graph<'_, T>, q: Var, d: Var, r: Var) -> Result<Var> {
    let qd = g.add(q, d)?;
    g.add(qd, r)
}

/// Residual branch `W2(LN(ReLU(W1(mean roi))))`.
#[derive(Clone, Copy, Debug)]
pub struct RoiBranch {
    pub w1: Linear,
    pub norm: Norm,
    pub w2: Linear,
}

impl RoiBranch {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let mut s = b.scope("roi_branch");
        Ok(RoiBranch {
            w1: Linear::new(&mut s, "w1", c, c)?,
            norm: Norm::new(&mut s, "norm", c)?,
            w2: Linear::new(&mut s, "w2", c, c)?,
        })
    }

    /// `roi` is `[n, S*S, C]`; returns `[n, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, roi: Var) -> Result<Var> {
        let f = g.mean_axis(roi, 1)?;
        let f = self.w1.forward(g, f)?;
        let f = g.relu(f)?;
        let f = self.norm.forward(g, f)?;
        self.w2.forward(g, f)
    }
}

/// Shared trunk `c -> 4c -> 4c` with class and box-delta branches.
#[derive(Clone, Copy, Debug)]
pub struct LocalHeads {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub delta: Linear,
}

impl LocalHeads {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, num_classes: usize) -> Result<Self> {
        let hidden = 4 * c;
        let mut s = b.scope("local_heads");
        let fc1 = Linear::new(&mut s, "fc1", c, hidden)?;
        let fc2 = Linear::new(&mut s, "fc2", hidden, hidden)?;
        let cls = Linear::new(&mut s, "cls", hidden, num_classes)?;
        *s.store_value(cls.b) = Tensor::full([num_classes], T::cast(PRIOR_BIAS));
        let delta = Linear::new(&mut s, "delta", hidden, 4)?;
        *s.store_value(delta.w) = Tensor::zeros([hidden, 4]);
        Ok(LocalHeads { fc1, fc2, cls, delta })
    }

    fn trunk<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let h = self.fc1.forward(g, q)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.relu(h)
    }

    /// Class logits `[n, K]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let h = self.trunk(g, q)?;
        self.cls.forward(g, h)
    }

    /// Boxes `[n, 4]` decoded from predicted deltas around `base`.
    pub fn boxes<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, base: Var) -> Result<Var> {
        let h = self.trunk(g, q)?;
        let d = self.delta.forward(g, h)?;
        decode_boxes(g, base, d)
    }
}

/// Applies `(dx, dy, dlog w, dlog h)` deltas to `(cx, cy, w, h)` boxes, then
/// clips the result to the unit square.
pub fn decode_boxes<T: Real>(g: &mut Graph<'_, T>, base: Var, deltas: Var) -> Result<Var> {
    let centre = g.narrow(base, 1, 0, 2)?;
    let size = g.narrow(base, 1, 2, 2)?;
    let dxy = g.narrow(deltas, 1, 0, 2)?;
    let dwh = g.narrow(deltas, 1, 2, 2)?;
    let shift = g.mul(dxy, size)?;
    let centre = g.add(centre, shift)?;
    let lim = T::cast(MAX_LOG_DELTA);
    let dwh = g.clamp(dwh, -lim, lim)?;
    let grow = g.exp(dwh)?;
    let size = g.mul(size, grow)?;
    let half = g.scale(size, T::cast(0.5))?;
    let lo = g.sub(centre, half)?;
    let lo = g.clamp(lo, T::zero(), T::one())?;
    let hi = g.add(centre, half)?;
    let hi = g.clamp(hi, T::zero(), T::one())?;
    let sum = g.add(lo, hi)?;
    let centre = g.scale(sum, T::cast(0.5))?;
    let extent = g.sub(hi, lo)?;
    let floor = g.scalar(T::cast(MIN_BOX_SIZE));
    let extent = g.maximum(extent, floor)?;
    g.concat(&[centre, extent], 1)
}

#[derive(Clone, Copy, Debug)]
pub struct LocalOutput {
    /// `[n, num_classes]`
    pub logits: Var,
    pub boxes: Var,
    /// Boxes predicted right after feature enhancing and fusion.
    pub step1_boxes: Var,
    /// Logits predicted right after self-attention.
    pub step2_logits: Var,
}

#[derive(Clone, Debug)]
pub struct LocalStage {
    pub qgfe: Qgfe,
    pub roi_branch: RoiBranch,
    pub self_attn: Attention,
    pub sampler: PointPredictor,
    pub mixing: AdaptiveMixing,
    pub heads: LocalHeads,
    pub roi_size: usize,
    pub canonical: f64,
}

impl LocalStage {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("local");
        Ok(LocalStage {
            qgfe: Qgfe::new(&mut s, cfg.c, cfg.roi_size)?,
            roi_branch: RoiBranch::new(&mut s, cfg.c)?,
            self_attn: Attention::new(&mut s, "self_attn", cfg.c, cfg.heads)?,
            sampler: PointPredictor::new(&mut s, "sampler", cfg.c, cfg.n_pts, 0.0)?,
            mixing: AdaptiveMixing::new(&mut s, "mixing", cfg.c, cfg.n_pts)?,
            heads: LocalHeads::new(&mut s, cfg.c, cfg.num_classes)?,
            roi_size: cfg.roi_size,
            canonical: cfg.canonical_size,
        })
    }

    /// Global boxes enter as constants; the local losses do not move the
    /// global box head.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &FeaturePyramid, qs: &QuerySet) -> Result<LocalOutput> {
        let base = g.detach(qs.boxes);
        let base_f64: Tensor<f64> = g.value(base).cast();
        let roi = roi_align(g, p, base, self.roi_size, self.canonical)?;
        let (d, _) = self.qgfe.forward(g, qs.q, roi)?;
        let r = self.roi_branch.forward(g, roi)?;
        let q1 = fuse_query(g, qs.q, d, r)?;
        let step1_boxes = self.heads.boxes(g, q1, base)?;
        let q2 = self.self_attn.self_attend(g, q1)?;
        let step2_logits = self.heads.logits(g, q2)?;
        let frame = Frame::Boxes {
            boxes: &base_f64,
            image_size: p.image_size,
            canonical: self.canonical,
        };
        let spec = self.sampler.forward(g, q2, frame)?;
        let sampled = bidirectional_sample(g, p, &spec)?;
        let q3 = self.mixing.forward(g, q2, sampled)?;
        let logits = self.heads.logits(g, q3)?;
        let boxes = self.heads.boxes(g, q3, base)?;
        Ok(LocalOutput {
            logits,
            boxes,
            step1_boxes,
            step2_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_rule_uses_canonical_size() {
        assert_eq!(roi_level(56.0 / 64.0, 56.0 / 64.0, (64, 64), 56.0), 2);
        assert_eq!(roi_level(28.0 / 64.0, 28.0 / 64.0, (64, 64), 56.0), 1);
        assert_eq!(roi_level(0.01, 0.01, (64, 64), 56.0), 0);
        assert_eq!(roi_level(1.0, 1.0, (256, 256), 56.0), 3);
    }

    #[test]
    fn zero_delta_keeps_box_and_log_two_doubles_width() {
        let mut g = Graph::<f64>::new();
        let base = g.constant(Tensor::from_f64([1, 4], &[0.5, 0.5, 0.2, 0.3]).unwrap());
        let zero = g.constant(Tensor::zeros([1, 4]));
        let same = decode_boxes(&mut g, base, zero).unwrap();
        assert!(g.value(same).max_abs_diff(g.value(base)) < 1e-12);
        let d = g.constant(Tensor::from_f64([1, 4], &[0.0, 0.0, 2f64.ln(), 0.0]).unwrap());
        let wide = decode_boxes(&mut g, base, d).unwrap();
        assert!((g.value(wide).data()[2] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn offsets_are_bin_interior() {
        let o = roi_offsets(2);
        assert_eq!(o.len(), 2 * 2 * 4 * 2);
        assert_eq!(&o[..8], &[0.125, 0.125, 0.375, 0.125, 0.125, 0.375, 0.375, 0.375]);
    }
}
