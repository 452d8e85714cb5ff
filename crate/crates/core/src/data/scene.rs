use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::loss::Targets;
use crate::tensor::Tensor;

/// Category names by id, starting at 1.
pub const CATEGORY_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_category(id: u32) -> Option<Shape> {
        match id {
            1 => Some(Shape::Circle),
            2 => Some(Shape::Square),
            3 => Some(Shape::Triangle),
            _ => None,
        }
    }

    pub fn category_id(self) -> u32 {
        match self {
            Shape::Circle => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
        }
    }

    /// Whether `(px, py)` lies inside the shape drawn in the square with
    /// top-left corner `(x, y)` and side `s`.
    fn contains(self, x: f64, y: f64, s: f64, px: f64, py: f64) -> bool {
        match self {
            Shape::Square => px >= x && px <= x + s && py >= y && py <= y + s,
            Shape::Circle => {
                let r = s / 2.0;
                let (dx, dy) = (px - x - r, py - y - r);
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle => {
                if py < y || py > y + s {
                    return false;
                }
                let half = (py - y) / s * s / 2.0;
                let cx = x + s / 2.0;
                px >= cx - half && px <= cx + half
            }
        }
    }
}

/// One object: `(x, y, w, h)` in pixels from the top-left corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: [f64; 4],
    pub category_id: u32,
}

/// An RGB image (row-major, interleaved, 8 bits per channel) with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0f32; 3 * w * h];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([3, h, w], data).expect("sized from scene")
    }

    pub fn to_image(&self) -> Result<Image<f32>> {
        Image::new(self.to_tensor())
    }

    /// Normalized `(cx, cy, w, h)` boxes and zero-based labels.
    pub fn targets(&self) -> Targets {
        let (w, h) = (self.width as f64, self.height as f64);
        Targets {
            boxes: self
                .annotations
                .iter()
                .map(|a| {
                    let b = a.bbox;
                    [(b[0] + b[2] / 2.0) / w, (b[1] + b[3] / 2.0) / h, b[2] / w, b[3] / h]
                })
                .collect(),
            labels: self.annotations.iter().map(|a| a.category_id as usize - 1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum gap in pixels between object boxes.
    pub min_separation: f64,
    /// Amplitude of the uniform background noise, in `[0, 1]` intensity.
    pub noise: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            min_objects: 0,
            max_objects: 3,
            min_size: 10,
            max_size: 28,
            min_separation: 2.0,
            noise: 0.1,
            max_attempts: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("scene min_objects exceeds max_objects".into()));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::Config("scene object size range must satisfy 2 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.min_separation >= 0.0) {
            return Err(Error::Config("scene noise must lie in [0, 1] and separation be >= 0".into()));
        }
        Ok(())
    }
}

/// Mixes a root seed with a path of indices into an independent seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut x = root;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SUPERSAMPLE: usize = 4;

/// Renders a scene fully determined by `seed`: filled, anti-aliased shapes
/// over a noisy background, with tight boxes.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    if spec.min_objects > 0 && (spec.min_size > w || spec.min_size > h) {
        return Err(Error::Generation {
            seed,
            reason: format!("objects of side {} do not fit a {w}x{h} image", spec.min_size),
        });
    }
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(Shape, [f64; 4], [f64; 3])> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..spec.max_attempts {
            let shape = Shape::from_category(rng.gen_range(1..=3)).expect("valid id");
            let s = rng.gen_range(spec.min_size..=spec.max_size.min(w).min(h));
            let x = rng.gen_range(0..=w - s) as f64;
            let y = rng.gen_range(0..=h - s) as f64;
            let s = s as f64;
            let sep = spec.min_separation;
            let clear = placed.iter().all(|(_, b, _)| {
                x + s + sep <= b[0] || b[0] + b[2] + sep <= x || y + s + sep <= b[1] || b[1] + b[3] + sep <= y
            });
            if clear {
                let colour = [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)];
                ok = Some((shape, [x, y, s, s], colour));
                break;
            }
        }
        match ok {
            Some(obj) => placed.push(obj),
            None => {
                return Err(Error::Generation {
                    seed,
                    reason: format!("could not place object {} of {count} after {} attempts", placed.len() + 1, spec.max_attempts),
                })
            }
        }
    }

    let base: f64 = rng.gen_range(0.05..0.35);
    let mut pixels = vec![0u8; w * h * 3];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..h {
        for px in 0..w {
            let mut rgb = [0.0; 3];
            for c in rgb.iter_mut() {
                *c = base + spec.noise * rng.gen_range(-0.5..0.5);
            }
            for (shape, b, colour) in &placed {
                if (px as f64) + 1.0 < b[0] || (px as f64) > b[0] + b[2] || (py as f64) + 1.0 < b[1] || (py as f64) > b[1] + b[3] {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let qx = px as f64 + (sx as f64 + 0.5) * step;
                        let qy = py as f64 + (sy as f64 + 0.5) * step;
                        if shape.contains(b[0], b[1], b[2], qx, qy) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cov) + colour[c] * cov;
                }
            }
            let o = (py * w + px) * 3;
            for c in 0..3 {
                pixels[o + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(Scene {
        width: w,
        height: h,
        pixels,
        annotations: placed
            .iter()
            .map(|(shape, b, _)| Annotation {
                bbox: *b,
                category_id: shape.category_id(),
            })
            .collect(),
    })
}

/// Settings for writing a dataset to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 100,
            scene: SceneSpec::default(),
        }
    }
}

/// Scene `i` uses seed `derive_seed(spec.seed, [i])`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    (0..spec.count)
        .map(|i| generate_scene(derive_seed(spec.seed, &[i as u64]), &spec.scene))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(9, &spec).unwrap(), generate_scene(9, &spec).unwrap());
        assert_ne!(generate_scene(9, &spec).unwrap(), generate_scene(10, &spec).unwrap());
    }

    #[test]
    fn empty_scenes_are_allowed() {
        let spec = SceneSpec {
            max_objects: 0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(1, &spec).unwrap().annotations.is_empty());
    }

    #[test]
    fn square_box_is_its_placement() {
        let (x, y, s) = (5.0, 7.0, 12.0);
        assert!(Shape::Square.contains(x, y, s, x, y));
        assert!(Shape::Square.contains(x, y, s, x + s, y + s));
        assert!(!Shape::Square.contains(x, y, s, x + s + 0.01, y));
        assert!(Shape::Triangle.contains(x, y, s, x + s / 2.0, y));
        assert!(Shape::Triangle.contains(x, y, s, x, y + s));
        assert!(Shape::Circle.contains(x, y, s, x + s / 2.0, y));
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..SceneSpec::default()
        };
        let scene = generate_scene(4, &spec).unwrap();
        let b = scene.annotations[0].bbox;
        assert_eq!(b[2], b[3]);
        assert_eq!(b[0].fract(), 0.0);
    }

    #[test]
    fn impossible_placement_reports_seed() {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            min_objects: 3,
            max_objects: 3,
            min_size: 30,
            max_size: 30,
            max_attempts: 5,
            ..SceneSpec::default()
        };
        let err = generate_scene(77, &spec).unwrap_err();
        assert!(err.to_string().contains("77"), "{err}");
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(3, &[4, 5]), derive_seed(3, &[4, 5]));
    }
}
