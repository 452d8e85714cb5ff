use super::graph::{Adjoints, Graph, Op, Var};
use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{split_at_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Corner offsets and weights of one bilinear read on an `h x w` plane.
/// Corners outside the plane are dropped (zero padding).
struct Bilerp<T> {
    taps: [(usize, T); 4],
    count: usize,
    /// `(x0, y0, fx, fy)` for the coordinate derivatives.
    cell: (isize, isize, T, T),
}

fn bilerp<T: Real>(x: T, y: T, h: usize, w: usize) -> Bilerp<T> {
    let px = x * T::cast(w as f64) - T::cast(0.5);
    let py = y * T::cast(h as f64) - T::cast(0.5);
    let fx0 = px.floor();
    let fy0 = py.floor();
    let (fx, fy) = (px - fx0, py - fy0);
    let (x0, y0) = (fx0.to_isize().unwrap_or(isize::MIN / 2), fy0.to_isize().unwrap_or(isize::MIN / 2));
    let mut out = Bilerp {
        taps: [(0, T::zero()); 4],
        count: 0,
        cell: (x0, y0, fx, fy),
    };
    let one = T::one();
    for (dx, dy, wgt) in [
        (0, 0, (one - fx) * (one - fy)),
        (1, 0, fx * (one - fy)),
        (0, 1, (one - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (xx, yy) = (x0 + dx, y0 + dy);
        if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
            out.taps[out.count] = (yy as usize * w + xx as usize, wgt);
            out.count += 1;
        }
    }
    out
}

#[inline]
fn texel<T: Real>(plane: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (outer, len, inner) = split_at_axis(&sa, axis)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(src[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(sa, out)?, Op::Softmax { a, axis }, rg, "softmax")
    }

    pub(super) fn bw_softmax(&self, a: Var, axis: usize, out: Var, gout: &[T], adj: &mut Adjoints<T>) -> Result<()> {
        let (outer, len, inner) = split_at_axis(self.shape(a), axis)?;
        let y = self.value(out).data();
        if let Some(ga) = adj.slot(a) {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gout[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        ga[at(l)] += y[at(l)] * (gout[at(l)] - dot);
                    }
                }
            }
        }
        Ok(())
    }

    /// Normalizes each slice along `axis` to zero mean and unit (population)
    /// variance, then applies `gain` and `bias` of length `shape[axis]`.
    /// A constant slice maps to zeros before the affine step.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (outer, len, inner) = split_at_axis(&sx, axis)?;
        if len == 0 {
            return Err(Error::Shape(format!("layer_norm over zero-length axis {axis} of {sx:?}")));
        }
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let n = T::cast(len as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[at(l)]).sum::<T>() / n;
                let var = (0..len)
                    .map(|l| {
                        let d = src[at(l)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    let xh = (src[at(l)] - mean) * r;
                    xhat[at(l)] = xh;
                    out[at(l)] = xh * gv[l] + bv[l];
                }
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn bw_layer_norm(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: &[T],
        rstd: &[T],
        gout: &[T],
        adj: &mut Adjoints<T>,
    ) -> Result<()> {
        let (outer, len, inner) = split_at_axis(self.shape(x), axis)?;
        let gv = self.value(gain).data();
        let n = T::cast(len as f64);
        if let Some(gx) = adj.slot(x) {
            let mut dxh = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for l in 0..len {
                        dxh[l] = gout[at(l)] * gv[l];
                        s1 += dxh[l];
                        s2 += dxh[l] * xhat[at(l)];
                    }
                    let r = rstd[o * inner + i] / n;
                    for l in 0..len {
                        gx[at(l)] += r * (n * dxh[l] - s1 - xhat[at(l)] * s2);
                    }
                }
            }
        }
        if let Some(gg) = adj.slot(gain) {
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let k = (o * len + l) * inner + i;
                        gg[l] += gout[k] * xhat[k];
                    }
                }
            }
        }
        if let Some(gb) = adj.slot(bias) {
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gb[l] += gout[(o * len + l) * inner + i];
                    }
                }
            }
        }
        Ok(())
    }

    /// 2-D convolution of a `[C_in, H, W]` map with `[C_out, C_in, kh, kw]`
    /// kernels (odd sizes), symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d needs odd kernel sizes and stride >= 1, got {kh}x{kw} stride {stride}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let cols = im2col(self.value(x).data(), cin, h, w, kh, kw, stride, pad, ho, wo);
        let ck = cin * kh * kw;
        let mut out = vec![T::zero(); cout * ho * wo];
        gemm_nn(self.value(k).data(), &cols, &mut out, cout, ck, ho * wo);
        let rg = self.any_grad(&[x, k]);
        let keep = if self.requires_grad(k) { cols } else { Vec::new() };
        self.push(
            Tensor::new([cout, ho, wo], out)?,
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                cols: keep,
            },
            rg,
            "conv2d",
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn bw_conv2d(
        &self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        cols: &[T],
        out: Var,
        gout: &[T],
        adj: &mut Adjoints<T>,
    ) {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let so = self.shape(out).to_vec();
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ho, wo) = (so[1], so[2]);
        let ck = cin * kh * kw;
        if let Some(gk) = adj.slot(k) {
            gemm_nt(gout, cols, gk, cout, ck, ho * wo);
        }
        if adj.slot(x).is_some() {
            let mut dcols = vec![T::zero(); ck * ho * wo];
            gemm_tn(self.value(k).data(), gout, &mut dcols, cout, ck, ho * wo);
            let gx = adj.slot(x).unwrap();
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = (c * kh + ky) * kw + kx;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                gx[(c * h + iy as usize) * w + ix as usize] += dcols[row * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(Error::Shape(format!("upsample2x expects [C, H, W], got {sa:?}")));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new([c, 2 * h, 2 * w], out)?, Op::Upsample2x { a }, rg, "upsample2x")
    }

    pub(super) fn bw_upsample2x(&self, a: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let sa = self.shape(a).to_vec();
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        if let Some(ga) = adj.slot(a) {
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        ga[(ch * h + y / 2) * w + x / 2] += gout[(ch * 2 * h + y) * 2 * w + x];
                    }
                }
            }
        }
    }

    /// Bilinear reads of a `[C, H, W]` map at `[N, 2]` normalized `(x, y)`
    /// points, giving `[N, C]`. Pixel centres sit at `(i + 0.5) / W`; reads
    /// outside the map see zeros. Differentiable in both the map and the
    /// point coordinates.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Result<Var> {
        let sf = self.shape(feat).to_vec();
        let sp = self.shape(points).to_vec();
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::Dimension {
                op: "bilinear_sample",
                lhs: sf,
                rhs: sp,
            });
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let n = sp[0];
        let f = self.value(feat).data();
        let pts = self.value(points).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let b = bilerp(pts[2 * i], pts[2 * i + 1], h, w);
            let row = &mut out[i * c..(i + 1) * c];
            for &(off, wgt) in &b.taps[..b.count] {
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += wgt * f[ch * h * w + off];
                }
            }
        }
        let rg = self.any_grad(&[feat, points]);
        self.push(Tensor::new([n, c], out)?, Op::Bilinear { feat, points }, rg, "bilinear_sample")
    }

    pub(super) fn bw_bilinear(&self, feat: Var, points: Var, gout: &[T], adj: &mut Adjoints<T>) {
        let sf = self.shape(feat).to_vec();
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let n = self.shape(points)[0];
        let f = self.value(feat).data();
        let pts = self.value(points).data();
        if let Some(gf) = adj.slot(feat) {
            for i in 0..n {
                let b = bilerp(pts[2 * i], pts[2 * i + 1], h, w);
                for &(off, wgt) in &b.taps[..b.count] {
                    for ch in 0..c {
                        gf[ch * h * w + off] += wgt * gout[i * c + ch];
                    }
                }
            }
        }
        if let Some(gp) = adj.slot(points) {
            let one = T::one();
            for i in 0..n {
                let b = bilerp(pts[2 * i], pts[2 * i + 1], h, w);
                let (x0, y0, fx, fy) = b.cell;
                let mut dpx = T::zero();
                let mut dpy = T::zero();
                for ch in 0..c {
                    let plane = &f[ch * h * w..(ch + 1) * h * w];
                    let v00 = texel(plane, h, w, x0, y0);
                    let v10 = texel(plane, h, w, x0 + 1, y0);
                    let v01 = texel(plane, h, w, x0, y0 + 1);
                    let v11 = texel(plane, h, w, x0 + 1, y0 + 1);
                    let g = gout[i * c + ch];
                    dpx += g * ((one - fy) * (v10 - v00) + fy * (v11 - v01));
                    dpy += g * ((one - fx) * (v01 - v00) + fx * (v11 - v10));
                }
                gp[2 * i] += dpx * T::cast(w as f64);
                gp[2 * i + 1] += dpy * T::cast(h as f64);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * kh * kw * ho * wo];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        cols[row * ho * wo + oy * wo + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}
