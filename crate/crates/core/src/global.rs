//! Global localization: one pass of query initialization, multi-scale
//! fusion, cross-attention, self-attention and adaptive sampling/mixing,
//! ending in a class-agnostic foreground logit and a coarse box per query.

use crate::backbone::{FeaturePyramid, LEVEL_Z};
use crate::error::{Error, Result};
use crate::layers::{Attention, Builder, Ffn, Linear, Norm};
use crate::model::ModelConfig;
use crate::tensor::{Graph, ParamId, Real, Tensor, Var};

/// Number of entries gathered per P5 cell and channel: `1 + 4 + 16 + 64`.
pub const MFF_WIDTH: usize = 85;

/// Initial logit bias for a foreground prior of 0.01.
pub const PRIOR_BIAS: f64 = -4.59512;

/// Lower and upper bound of predicted z coordinates.
pub const Z_RANGE: (f64, f64) = (2.0, 5.0);

/// Learnable meta vectors `[m, c]` and combination weights `[n, m]`.
#[derive(Clone, Copy, Debug)]
pub struct MetaBank {
    pub meta: ParamId,
    pub alpha: ParamId,
}

impl MetaBank {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, n: usize, m: usize, c: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config("meta bank needs n >= 1 and m >= 1".into()));
        }
        let mut s = b.scope("meta_bank");
        Ok(MetaBank {
            meta: s.xavier("meta", &[m, c])?,
            alpha: s.xavier("alpha", &[n, m])?,
        })
    }
}

/// `q = alpha x meta`: every query is a linear combination of the meta vectors.
pub fn meta_query_init<T: Real>(g: &mut Graph<'_, T>, alpha: Var, meta: Var) -> Result<Var> {
    g.matmul(alpha, meta)
}

/// Where the initial queries come from.
#[derive(Clone, Copy, Debug)]
pub enum QueryInit {
    Meta(MetaBank),
    /// Free per-query embedding, used by the ablation without meta vectors.
    Embedding(ParamId),
}

impl QueryInit {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        match *self {
            QueryInit::Meta(bank) => {
                let alpha = g.param(bank.alpha);
                let meta = g.param(bank.meta);
                meta_query_init(g, alpha, meta)
            }
            QueryInit::Embedding(id) => Ok(g.param(id)),
        }
    }
}

/// Gathers, for every P5 cell, the aligned 2x2 block of P4, 4x4 of P3 and
/// 8x8 of P2 together with the cell itself: `[h_s, w_s, c, 85]`.
///
/// Entries are ordered P5, P4, P3, P2 and row-major within each block.
pub fn mff_gather<T: Real>(g: &mut Graph<'_, T>, p: &FeaturePyramid) -> Result<Var> {
    let (hs, ws) = p.sizes[3];
    let c = p.channels;
    let mut parts = Vec::with_capacity(4);
    for level in (0..4).rev() {
        let f = 1usize << (3 - level);
        let (h, w) = p.sizes[level];
        if h != hs * f || w != ws * f {
            return Err(Error::Shape(format!(
                "level P{} is {h}x{w}, not aligned with P5 {hs}x{ws}",
                level + 2
            )));
        }
        let x = g.reshape(p.levels[level], [c, hs, f, ws, f])?;
        let x = g.permute(x, &[1, 3, 0, 2, 4])?;
        parts.push(g.reshape(x, [hs, ws, c, f * f])?);
    }
    g.concat(&parts, 3)
}

/// Two linear layers over the gathered axis: `85 -> 2 k_mff -> k_mff`.
#[derive(Clone, Copy, Debug)]
pub struct Mff {
    pub expand: Linear,
    pub reduce: Linear,
    pub k: usize,
}

impl Mff {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, k: usize) -> Result<Self> {
        let mut s = b.scope("mff");
        Ok(Mff {
            expand: Linear::new(&mut s, "expand", MFF_WIDTH, 2 * k)?,
            reduce: Linear::new(&mut s, "reduce", 2 * k, k)?,
            k,
        })
    }

    /// `[h_s, w_s, c, k_mff]`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &FeaturePyramid) -> Result<Var> {
        let x = mff_gather(g, p)?;
        let x = self.expand.forward(g, x)?;
        let x = g.relu(x)?;
        self.reduce.forward(g, x)
    }
}

/// Linear `k_mff -> 2` whose two outputs become keys and values.
#[derive(Clone, Copy, Debug)]
pub struct KvProjection {
    pub lin: Linear,
}

impl KvProjection {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, k: usize) -> Result<Self> {
        Ok(KvProjection {
            lin: Linear::new(b, "mff_kv", k, 2)?,
        })
    }
}

/// Keys and values `[h_s w_s, c]` each, from `[h_s, w_s, c, k_mff]`.
pub fn mff_to_kv<T: Real>(g: &mut Graph<'_, T>, proj: &KvProjection, x_mff: Var) -> Result<(Var, Var)> {
    let s = g.shape(x_mff).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("fused features must be 4-d, got {s:?}")));
    }
    let (cells, c) = (s[0] * s[1], s[2]);
    let y = proj.lin.forward(g, x_mff)?;
    let k = g.narrow(y, 3, 0, 1)?;
    let k = g.reshape(k, [cells, c])?;
    let v = g.narrow(y, 3, 1, 1)?;
    let v = g.reshape(v, [cells, c])?;
    Ok((k, v))
}

/// Per-point sampling locations. `xy` is `[N, 2]` in normalized image
/// coordinates, `zw` and `zh` are `[N, 1]` in log2-stride units, with
/// `N = n * n_pts` and points of one query contiguous.
#[derive(Clone, Copy, Debug)]
pub struct SamplingSpec {
    pub xy: Var,
    pub zw: Var,
    pub zh: Var,
    pub queries: usize,
    pub points: usize,
}

/// Linear map from a query to `n_pts` points of `(x, y, z_w, z_h)`.
#[derive(Clone, Copy, Debug)]
pub struct PointPredictor {
    pub lin: Linear,
    pub points: usize,
}

/// Where predicted offsets are anchored.
#[derive(Clone, Copy, Debug)]
pub enum Frame<'a> {
    /// `x, y = sigmoid(raw)`, `z = clamp(raw)`.
    Image,
    /// Box-relative: `x = cx + raw * w / 2`, `z = level(w) + raw`, with
    /// `boxes` a constant `[n, 4]` in `(cx, cy, w, h)`.
    Boxes { boxes: &'a Tensor<f64>, image_size: (usize, usize), canonical: f64 },
}

impl PointPredictor {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, c: usize, points: usize, z_bias: f64) -> Result<Self> {
        let mut s = b.scope(name);
        let lin = Linear::new(&mut s, "lin", c, points * 4)?;
        let bias: Vec<f64> = (0..points).flat_map(|_| [0.0, 0.0, z_bias, z_bias]).collect();
        *s.store_value(lin.b) = Tensor::from_f64([points * 4], &bias)?;
        Ok(PointPredictor { lin, points })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, frame: Frame<'_>) -> Result<SamplingSpec> {
        let n = g.shape(q)[0];
        let np = n * self.points;
        let raw = self.lin.forward(g, q)?;
        let raw = g.reshape(raw, [np, 4])?;
        let rxy = g.narrow(raw, 1, 0, 2)?;
        let rzw = g.narrow(raw, 1, 2, 1)?;
        let rzh = g.narrow(raw, 1, 3, 1)?;
        let (lo, hi) = (T::cast(Z_RANGE.0), T::cast(Z_RANGE.1));
        let (xy, zw, zh) = match frame {
            Frame::Image => (g.sigmoid(rxy)?, g.clamp(rzw, lo, hi)?, g.clamp(rzh, lo, hi)?),
            Frame::Boxes {
                boxes,
                image_size,
                canonical,
            } => {
                let mut centre = Vec::with_capacity(np * 2);
                let mut half = Vec::with_capacity(np * 2);
                let mut base_w = Vec::with_capacity(np);
                let mut base_h = Vec::with_capacity(np);
                let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
                for i in 0..n {
                    let b = &boxes.data()[4 * i..4 * i + 4];
                    for _ in 0..self.points {
                        centre.extend_from_slice(&[b[0], b[1]]);
                        half.extend_from_slice(&[b[2] / 2.0, b[3] / 2.0]);
                        base_w.push(box_level(b[2] * iw, canonical));
                        base_h.push(box_level(b[3] * ih, canonical));
                    }
                }
                let centre = g.constant(Tensor::from_f64([np, 2], &centre)?);
                let half = g.constant(Tensor::from_f64([np, 2], &half)?);
                let base_w = g.constant(Tensor::from_f64([np, 1], &base_w)?);
                let base_h = g.constant(Tensor::from_f64([np, 1], &base_h)?);
                let off = g.mul(rxy, half)?;
                let xy = g.add(centre, off)?;
                let xy = g.clamp(xy, T::zero(), T::one())?;
                let zw = g.add(base_w, rzw)?;
                let zh = g.add(base_h, rzh)?;
                (xy, g.clamp(zw, lo, hi)?, g.clamp(zh, lo, hi)?)
            }
        };
        Ok(SamplingSpec {
            xy,
            zw,
            zh,
            queries: n,
            points: self.points,
        })
    }
}

/// Pyramid z at which a box side of `px` pixels would be read.
pub fn box_level(px: f64, canonical: f64) -> f64 {
    4.0 + (px.max(1e-6) / canonical).log2()
}

/// Sum of two softmaxes over levels of the negative squared z distance
/// halved, one for each box direction. The result sums to 2.
pub fn level_weights(z_w: f64, z_h: f64) -> [f64; 4] {
    let term = |z: f64| {
        let logits = LEVEL_Z.map(|lz| -(lz - z) * (lz - z) / 2.0);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|l| (l - max).exp());
        let s: f64 = e.iter().sum();
        e.map(|x| x / s)
    };
    let (a, b) = (term(z_h), term(z_w));
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

/// Graph form of [`level_weights`] for `[N, 1]` inputs, giving `[N, 4]`.
pub fn level_weights_graph<T: Real>(g: &mut Graph<'_, T>, zw: Var, zh: Var) -> Result<Var> {
    let levels = g.constant(Tensor::from_f64([1, 4], &LEVEL_Z)?);
    let mut terms = [zw; 2];
    for (slot, z) in terms.iter_mut().zip([zh, zw]) {
        let d = g.sub(levels, z)?;
        let d2 = g.mul(d, d)?;
        let logits = g.scale(d2, T::cast(-0.5))?;
        *slot = g.softmax(logits, 1)?;
    }
    g.add(terms[0], terms[1])
}

/// Level-weighted bilinear reads: `sum_j w_j f_j(x, y)`, `[n, n_pts, c]`.
pub fn bidirectional_sample<T: Real>(g: &mut Graph<'_, T>, p: &FeaturePyramid, spec: &SamplingSpec) -> Result<Var> {
    let w = level_weights_graph(g, spec.zw, spec.zh)?;
    let mut acc = None;
    for j in 0..4 {
        let f = g.bilinear_sample(p.levels[j], spec.xy)?;
        let wj = g.narrow(w, 1, j, 1)?;
        let term = g.mul(f, wj)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let out = acc.expect("four levels");
    g.reshape(out, [spec.queries, spec.points, p.channels])
}

/// Query-conditioned channel and spatial mixing of sampled features.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveMixing {
    pub channel_gen: Linear,
    pub spatial_gen: Linear,
    pub channel_norm: Norm,
    pub spatial_norm: Norm,
    pub out: Linear,
    pub c: usize,
    pub points: usize,
    pub p_out: usize,
}

impl AdaptiveMixing {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, c: usize, points: usize) -> Result<Self> {
        let p_out = points;
        let mut s = b.scope(name);
        Ok(AdaptiveMixing {
            channel_gen: Linear::new(&mut s, "channel_gen", c, c * c)?,
            spatial_gen: Linear::new(&mut s, "spatial_gen", c, points * p_out)?,
            channel_norm: Norm::new(&mut s, "channel_norm", c)?,
            spatial_norm: Norm::new(&mut s, "spatial_norm", p_out)?,
            out: Linear::new(&mut s, "out", c * p_out, c)?,
            c,
            points,
            p_out,
        })
    }

    /// `q` is `[n, c]`, `sampled` is `[n, n_pts, c]`; returns `[n, c]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, sampled: Var) -> Result<Var> {
        let n = g.shape(q)[0];
        let (c, np, po) = (self.c, self.points, self.p_out);
        let mc = self.channel_gen.forward(g, q)?;
        let mc = g.reshape(mc, [n, c, c])?;
        let s1 = g.matmul(sampled, mc)?;
        let s1 = self.channel_norm.forward(g, s1)?;
        let s1 = g.relu(s1)?;
        let ms = self.spatial_gen.forward(g, q)?;
        let ms = g.reshape(ms, [n, np, po])?;
        let s1t = g.transpose(s1)?;
        let s2 = g.matmul(s1t, ms)?;
        let s2 = self.spatial_norm.forward(g, s2)?;
        let s2 = g.relu(s2)?;
        let flat = g.reshape(s2, [n, c * po])?;
        let delta = self.out.forward(g, flat)?;
        g.add(q, delta)
    }
}

/// Box and foreground heads shared by the step-1, step-2 and final outputs.
#[derive(Clone, Copy, Debug)]
pub struct GlobalHeads {
    pub boxes: Ffn,
    pub cls: Ffn,
}

impl GlobalHeads {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let mut s = b.scope("global_heads");
        let boxes = Ffn::new(&mut s, "box", c, c, 4)?;
        let cls = Ffn::new(&mut s, "cls", c, c, 1)?;
        *s.store_value(cls.fc2.b) = Tensor::full([1], T::cast(PRIOR_BIAS));
        Ok(GlobalHeads { boxes, cls })
    }

    /// Normalized `(cx, cy, w, h)` boxes `[n, 4]` in `(0, 1)`.
    pub fn boxes<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let raw = self.boxes.forward(g, q)?;
        g.sigmoid(raw)
    }

    /// Foreground logits `[n, 1]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        self.cls.forward(g, q)
    }
}

/// Content vectors `[n, c]` and their current boxes `[n, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub q: Var,
    pub boxes: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalOutput {
    /// `[n, 1]`; the single foreground logit of each query.
    pub logits: Var,
    pub boxes: Var,
    /// Boxes predicted right after cross-attention.
    pub step1_boxes: Var,
    /// Logits predicted right after self-attention.
    pub step2_logits: Var,
}

#[derive(Clone, Debug)]
pub struct GlobalStage {
    pub init: QueryInit,
    pub mff: Option<Mff>,
    pub kv: KvProjection,
    pub cross: Attention,
    pub self_attn: Attention,
    pub sampler: PointPredictor,
    pub mixing: AdaptiveMixing,
    pub heads: GlobalHeads,
    pub k_mff: usize,
}

impl GlobalStage {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("global");
        let init = if cfg.meta_init {
            QueryInit::Meta(MetaBank::new(&mut s, cfg.n, cfg.m, cfg.c)?)
        } else {
            QueryInit::Embedding(s.uniform("query_embed", &[cfg.n, cfg.c], -1.0, 1.0)?)
        };
        let mff = if cfg.mff { Some(Mff::new(&mut s, cfg.k_mff)?) } else { None };
        Ok(GlobalStage {
            init,
            mff,
            kv: KvProjection::new(&mut s, cfg.k_mff)?,
            cross: Attention::new(&mut s, "cross_attn", cfg.c, cfg.heads)?,
            self_attn: Attention::new(&mut s, "self_attn", cfg.c, cfg.heads)?,
            sampler: PointPredictor::new(&mut s, "sampler", cfg.c, cfg.n_pts, 3.5)?,
            mixing: AdaptiveMixing::new(&mut s, "mixing", cfg.c, cfg.n_pts)?,
            heads: GlobalHeads::new(&mut s, cfg.c)?,
            k_mff: cfg.k_mff,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &FeaturePyramid) -> Result<(QuerySet, GlobalOutput)> {
        let q0 = self.init.forward(g)?;
        let x_mff = match &self.mff {
            Some(m) => m.forward(g, p)?,
            None => {
                let (hs, ws) = p.sizes[3];
                g.constant(Tensor::zeros([hs, ws, p.channels, self.k_mff]))
            }
        };
        let (k, v) = mff_to_kv(g, &self.kv, x_mff)?;
        let q1 = self.cross.forward(g, q0, k, v)?;
        let step1_boxes = self.heads.boxes(g, q1)?;
        let q2 = self.self_attn.self_attend(g, q1)?;
        let step2_logits = self.heads.logits(g, q2)?;
        let spec = self.sampler.forward(g, q2, Frame::Image)?;
        let sampled = bidirectional_sample(g, p, &spec)?;
        let q3 = self.mixing.forward(g, q2, sampled)?;
        let boxes = self.heads.boxes(g, q3)?;
        let logits = self.heads.logits(g, q3)?;
        Ok((
            QuerySet { q: q3, boxes },
            GlobalOutput {
                logits,
                boxes,
                step1_boxes,
                step2_logits,
            },
        ))
    }
}
