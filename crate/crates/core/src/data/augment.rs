use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Annotation, Scene};
use crate::error::{Error, Result};

/// Boxes keeping less than this fraction of their area after a crop are dropped.
pub const MIN_VISIBLE: f64 = 0.25;
/// Boxes narrower or shorter than this many pixels are dropped.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub multiscale: bool,
    pub min_short_side: usize,
    pub max_short_side: usize,
    pub max_long_side: usize,
    pub pad_to: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            crop_prob: 0.0,
            min_crop: 0.6,
            multiscale: false,
            min_short_side: 48,
            max_short_side: 80,
            max_long_side: 133,
            pad_to: 32,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.crop_prob) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::Config("augment.min_crop must lie in (0, 1]".into()));
        }
        if self.min_short_side == 0 || self.min_short_side > self.max_short_side || self.max_long_side < self.max_short_side {
            return Err(Error::Config("augment side limits must satisfy 1 <= min_short <= max_short <= max_long".into()));
        }
        if self.pad_to == 0 {
            return Err(Error::Config("augment.pad_to must be at least 1".into()));
        }
        Ok(())
    }
}

/// Applies the policy with randomness drawn only from `seed`. The output is
/// always padded to a multiple of `pad_to`.
pub fn augment(scene: &Scene, seed: u64, policy: &AugmentPolicy) -> Result<Scene> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    if rng.gen_bool(policy.flip_prob) {
        out = flip_horizontal(&out);
    }
    if rng.gen_bool(policy.crop_prob) {
        let cw = ((out.width as f64 * rng.gen_range(policy.min_crop..=1.0)).round() as usize).clamp(1, out.width);
        let ch = ((out.height as f64 * rng.gen_range(policy.min_crop..=1.0)).round() as usize).clamp(1, out.height);
        let x0 = rng.gen_range(0..=out.width - cw);
        let y0 = rng.gen_range(0..=out.height - ch);
        out = crop(&out, x0, y0, cw, ch)?;
    }
    if policy.multiscale {
        let short = rng.gen_range(policy.min_short_side..=policy.max_short_side) as f64;
        let (w, h) = (out.width as f64, out.height as f64);
        let mut scale = short / w.min(h);
        if w.max(h) * scale > policy.max_long_side as f64 {
            scale = policy.max_long_side as f64 / w.max(h);
        }
        let nw = ((w * scale).round() as usize).max(1);
        let nh = ((h * scale).round() as usize).max(1);
        out = resize(&out, nw, nh)?;
    }
    Ok(pad_to_multiple(&out, policy.pad_to))
}

/// Mirrors left-right; `x` becomes `W - x - w`.
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (w, h) = (scene.width, scene.height);
    let mut pixels = vec![0u8; scene.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * 3;
            let dst = (y * w + (w - 1 - x)) * 3;
            pixels[dst..dst + 3].copy_from_slice(&scene.pixels[src..src + 3]);
        }
    }
    let annotations = scene
        .annotations
        .iter()
        .map(|a| Annotation {
            bbox: [w as f64 - a.bbox[0] - a.bbox[2], a.bbox[1], a.bbox[2], a.bbox[3]],
            category_id: a.category_id,
        })
        .collect();
    Scene {
        width: w,
        height: h,
        pixels,
        annotations,
    }
}

/// Keeps the window `[x0, x0 + cw) x [y0, y0 + ch)`. Boxes are clipped to the
/// window; those left with under a quarter of their area are dropped.
pub fn crop(scene: &Scene, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<Scene> {
    if cw == 0 || ch == 0 || x0 + cw > scene.width || y0 + ch > scene.height {
        return Err(Error::Input(format!(
            "crop window ({x0}, {y0}, {cw}, {ch}) outside {}x{} image",
            scene.width, scene.height
        )));
    }
    let mut pixels = Vec::with_capacity(cw * ch * 3);
    for y in y0..y0 + ch {
        let row = (y * scene.width + x0) * 3;
        pixels.extend_from_slice(&scene.pixels[row..row + cw * 3]);
    }
    let (fx, fy) = (x0 as f64, y0 as f64);
    let annotations = scene
        .annotations
        .iter()
        .filter_map(|a| {
            let [x, y, w, h] = a.bbox;
            let lx = (x - fx).max(0.0);
            let ly = (y - fy).max(0.0);
            let hx = (x + w - fx).min(cw as f64);
            let hy = (y + h - fy).min(ch as f64);
            let (nw, nh) = (hx - lx, hy - ly);
            if nw <= 0.0 || nh <= 0.0 || nw * nh < MIN_VISIBLE * w * h || nw < MIN_BOX_SIDE || nh < MIN_BOX_SIDE {
                return None;
            }
            Some(Annotation {
                bbox: [lx, ly, nw, nh],
                category_id: a.category_id,
            })
        })
        .collect();
    Ok(Scene {
        width: cw,
        height: ch,
        pixels,
        annotations,
    })
}

/// Bilinear resampling to `nw x nh`; box coordinates scale by the per-axis
/// ratio.
pub fn resize(scene: &Scene, nw: usize, nh: usize) -> Result<Scene> {
    if nw == 0 || nh == 0 {
        return Err(Error::Input("resize target must be non-empty".into()));
    }
    let (w, h) = (scene.width, scene.height);
    let (sx, sy) = (w as f64 / nw as f64, h as f64 / nh as f64);
    let mut pixels = vec![0u8; nw * nh * 3];
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let p = |xx: usize, yy: usize| scene.pixels[(yy * w + xx) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                pixels[(y * nw + x) * 3 + c] = (top * (1.0 - ty) + bottom * ty).round() as u8;
            }
        }
    }
    let (rx, ry) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let annotations = scene
        .annotations
        .iter()
        .map(|a| Annotation {
            bbox: [a.bbox[0] * rx, a.bbox[1] * ry, a.bbox[2] * rx, a.bbox[3] * ry],
            category_id: a.category_id,
        })
        .filter(|a| a.bbox[2] >= MIN_BOX_SIDE && a.bbox[3] >= MIN_BOX_SIDE)
        .collect();
    Ok(Scene {
        width: nw,
        height: nh,
        pixels,
        annotations,
    })
}

/// Zero-pads the right and bottom edges up to the next multiple of `m`.
pub fn pad_to_multiple(scene: &Scene, m: usize) -> Scene {
    let nw = scene.width.div_ceil(m) * m;
    let nh = scene.height.div_ceil(m) * m;
    if nw == scene.width && nh == scene.height {
        return scene.clone();
    }
    let mut pixels = vec![0u8; nw * nh * 3];
    for y in 0..scene.height {
        let src = y * scene.width * 3;
        let dst = y * nw * 3;
        pixels[dst..dst + scene.width * 3].copy_from_slice(&scene.pixels[src..src + scene.width * 3]);
    }
    Scene {
        width: nw,
        height: nh,
        pixels,
        annotations: scene.annotations.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(bbox: [f64; 4]) -> Scene {
        Scene {
            width: 40,
            height: 30,
            pixels: (0..40 * 30 * 3).map(|i| (i % 251) as u8).collect(),
            annotations: vec![Annotation { bbox, category_id: 2 }],
        }
    }

    #[test]
    fn flip_mirrors_x() {
        let s = scene_with([3.0, 4.0, 10.0, 5.0]);
        let f = flip_horizontal(&s);
        assert_eq!(f.annotations[0].bbox, [27.0, 4.0, 10.0, 5.0]);
        assert_eq!(flip_horizontal(&f), s);
    }

    #[test]
    fn crop_drops_mostly_hidden_boxes() {
        let s = scene_with([0.0, 0.0, 10.0, 10.0]);
        let kept = crop(&s, 5, 5, 20, 20).unwrap();
        assert_eq!(kept.annotations[0].bbox, [0.0, 0.0, 5.0, 5.0]);
        let dropped = crop(&s, 6, 5, 20, 20).unwrap();
        assert!(dropped.annotations.is_empty());
    }

    #[test]
    fn doubling_doubles_boxes() {
        let s = scene_with([3.0, 4.0, 10.0, 5.0]);
        let r = resize(&s, 80, 60).unwrap();
        assert_eq!(r.annotations[0].bbox, [6.0, 8.0, 20.0, 10.0]);
    }

    #[test]
    fn padding_reaches_multiple() {
        let p = pad_to_multiple(&scene_with([0.0, 0.0, 4.0, 4.0]), 32);
        assert_eq!((p.width, p.height), (64, 32));
        assert_eq!(p.pixels.len(), 64 * 32 * 3);
    }

    #[test]
    fn multiscale_respects_limits() {
        let policy = AugmentPolicy {
            multiscale: true,
            ..AugmentPolicy::default()
        };
        let s = scene_with([3.0, 4.0, 10.0, 5.0]);
        for seed in 0..20 {
            let a = augment(&s, seed, &policy).unwrap();
            assert_eq!(a.width % 32, 0);
            assert_eq!(a.height % 32, 0);
        }
    }
}
