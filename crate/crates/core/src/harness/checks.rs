use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::{average_precision, iou_thresholds, GtBox, ScoredBox};
use crate::backbone::FeaturePyramid;
use crate::data::{augment, derive_seed, generate_scene, AugmentPolicy, SceneSpec};
use crate::error::{Error, Result};
use crate::global::{bidirectional_sample, level_weights, level_weights_graph, mff_gather, AdaptiveMixing, GlobalOutput, Mff, SamplingSpec, MFF_WIDTH};
use crate::layers::{Attention, Builder};
use crate::local::{decode_boxes, roi_align, LocalOutput, Qgfe, SAMPLING_RATIO};
use crate::loss::{focal_loss, giou, pairwise_cost, stage_loss, total_loss, LossWeights, Targets};
use crate::matching::{brute_force_match, hungarian, Assignment, CostMatrix};
use crate::oracle;
use crate::tensor::{finite_diff_check, finite_diff_check_with_params, Graph, Init, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gradcheck,
    Invariants,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "gradcheck" => Ok(Suite::Gradcheck),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite `{other}`, expected oracle, gradcheck, invariants or all"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest observed error, where the check measures one.
    pub max_error: Option<f64>,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, Option<f64>, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, max_error, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, None, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        max_error,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check of `suite`; the report passes only if all checks do.
pub fn run_checks(suite: Suite, seed: u64) -> CheckReport {
    let mut results = Vec::new();
    if matches!(suite, Suite::Oracle | Suite::All) {
        results.push(check_matching(seed, 200));
        results.push(check_bidirectional_sampling(seed, 100));
        results.push(check_roi_align(seed, 100));
        results.push(check_matching_cost(seed));
        results.push(check_ap_oracle(seed, 200));
    }
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        for m in GRADCHECK_MODULES {
            results.push(gradcheck_module(m, seed).expect("registered module"));
        }
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        results.push(check_level_weights(seed, 1000));
        results.push(check_mff_contract(seed));
        results.push(check_qgfe_shapes(seed));
        results.push(check_loss_hand_cases());
        results.push(check_scene_invariants(seed, 300));
        results.push(check_eval_ordering(seed, 200));
    }
    let name = match suite {
        Suite::Oracle => "oracle",
        Suite::Gradcheck => "gradcheck",
        Suite::Invariants => "invariants",
        Suite::All => "all",
    };
    CheckReport {
        suite: name.into(),
        seed,
        passed: results.iter().all(|r| r.passed),
        results,
    }
}

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc4ec, tag]))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized from shape")
}

/// Four random maps for an image of `(h, w)` pixels.
fn random_levels(rng: &mut ChaCha8Rng, c: usize, image: (usize, usize)) -> [Tensor<f64>; 4] {
    std::array::from_fn(|j| {
        let s = 4 << j;
        random_tensor(rng, &[c, image.0 / s, image.1 / s], -1.0, 1.0)
    })
}

fn pyramid<T: crate::tensor::Real>(g: &mut Graph<'_, T>, levels: [Var; 4], image: (usize, usize)) -> Result<FeaturePyramid> {
    FeaturePyramid::from_levels(g, levels, image)
}

fn constant_levels(g: &mut Graph<'_, f64>, levels: &[Tensor<f64>; 4]) -> [Var; 4] {
    std::array::from_fn(|j| g.constant(levels[j].clone()))
}

fn random_image_size(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (32 * rng.gen_range(1..=3), 32 * rng.gen_range(1..=3))
}

/// Hungarian against exhaustive search on `per_size` matrices for every
/// square size 2..7. A quarter of the matrices use small integer costs so
/// that ties are common.
pub fn check_matching(seed: u64, per_size: usize) -> CheckResult {
    timed("matching: hungarian == brute force", || {
        let mut rng = rng_for(seed, 1);
        let mut worst = 0.0f64;
        for size in 2..=7 {
            for k in 0..per_size {
                let data: Vec<f64> = if k % 4 == 0 {
                    (0..size * size).map(|_| rng.gen_range(0..3) as f64).collect()
                } else {
                    (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect()
                };
                let cost = CostMatrix::new(size, size, data)?;
                let fast = hungarian(&cost)?;
                let slow = brute_force_match(&cost)?;
                worst = worst.max((fast.total_cost - slow.total_cost).abs());
                if fast.pairs != slow.pairs {
                    return Ok((
                        false,
                        Some(worst),
                        format!("size {size} matrix {k}: {:?} vs {:?}", fast.pairs, slow.pairs),
                    ));
                }
            }
        }
        Ok((worst < 1e-9, Some(worst), format!("{} matrices per size 2..7", per_size)))
    })
}

/// Level-weighted sampling against dense bilinear reads.
pub fn check_bidirectional_sampling(seed: u64, cases: usize) -> CheckResult {
    timed("sampling: bidirectional_sample == oracle", || {
        let mut rng = rng_for(seed, 2);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = rng.gen_range(1..=4);
            let image = random_image_size(&mut rng);
            let levels = random_levels(&mut rng, c, image);
            let (queries, points) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let n = queries * points;
            let xy = random_tensor(&mut rng, &[n, 2], -0.1, 1.1);
            let zw = random_tensor(&mut rng, &[n, 1], 1.5, 5.5);
            let zh = random_tensor(&mut rng, &[n, 1], 1.5, 5.5);
            let mut g = Graph::<f64>::new();
            let lv = constant_levels(&mut g, &levels);
            let p = pyramid(&mut g, lv, image)?;
            let spec = SamplingSpec {
                xy: g.constant(xy.clone()),
                zw: g.constant(zw.clone()),
                zh: g.constant(zh.clone()),
                queries,
                points,
            };
            let out = bidirectional_sample(&mut g, &p, &spec)?;
            let got = g.value(out).data();
            for i in 0..n {
                let want = oracle::bidirectional(&levels, xy.data()[2 * i], xy.data()[2 * i + 1], zw.data()[i], zh.data()[i]);
                for ch in 0..c {
                    worst = worst.max((got[i * c + ch] - want[ch]).abs());
                }
            }
        }
        Ok((worst < 1e-5, Some(worst), format!("{cases} random pyramids")))
    })
}

/// RoIAlign against per-bin dense bilinear reads.
pub fn check_roi_align(seed: u64, cases: usize) -> CheckResult {
    timed("sampling: roi_align == oracle", || {
        let mut rng = rng_for(seed, 3);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = rng.gen_range(1..=4);
            let image = random_image_size(&mut rng);
            let levels = random_levels(&mut rng, c, image);
            let s = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=3);
            let canonical = rng.gen_range(8.0..64.0);
            let boxes: Vec<f64> = (0..n)
                .flat_map(|_| {
                    let w = rng.gen_range(0.02..1.2);
                    let h = rng.gen_range(0.02..1.2);
                    [rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1), w, h]
                })
                .collect();
            let mut g = Graph::<f64>::new();
            let lv = constant_levels(&mut g, &levels);
            let p = pyramid(&mut g, lv, image)?;
            let bv = g.constant(Tensor::new([n, 4], boxes.clone())?);
            let out = roi_align(&mut g, &p, bv, s, canonical)?;
            let got = g.value(out).data();
            for i in 0..n {
                let b = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
                let want = oracle::roi_align(&levels, image, b, s, SAMPLING_RATIO, canonical);
                for (bin, row) in want.iter().enumerate() {
                    for ch in 0..c {
                        worst = worst.max((got[(i * s * s + bin) * c + ch] - row[ch]).abs());
                    }
                }
            }
        }
        Ok((worst < 1e-5, Some(worst), format!("{cases} random pyramids and boxes")))
    })
}

/// Pairwise matching cost against the per-entry formula.
pub fn check_matching_cost(seed: u64) -> CheckResult {
    timed("matching cost == oracle", || {
        let mut rng = rng_for(seed, 4);
        let w = LossWeights::default();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (n, m, k) = (rng.gen_range(1..=6), rng.gen_range(0..=4), rng.gen_range(1..=3));
            let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let boxes: Vec<f64> = (0..n).flat_map(|_| random_box(&mut rng)).collect();
            let targets = Targets {
                boxes: (0..m).map(|_| random_box(&mut rng)).collect(),
                labels: (0..m).map(|_| rng.gen_range(0..k)).collect(),
            };
            let cost = pairwise_cost(&logits, &boxes, k, &targets, &w)?;
            for i in 0..n {
                let pb = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
                for j in 0..m {
                    let want = oracle::matching_cost(&logits[i * k..(i + 1) * k], pb, targets.labels[j], targets.boxes[j], &w);
                    worst = worst.max((cost.get(i, j) - want).abs());
                }
            }
        }
        Ok((worst < 1e-9, Some(worst), "50 random prediction/target sets".into()))
    })
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)]
}

fn random_pixel_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.gen_range(0..6) as f64 * 4.0,
        rng.gen_range(0..6) as f64 * 4.0,
        rng.gen_range(2..6) as f64 * 4.0,
        rng.gen_range(2..6) as f64 * 4.0,
    ]
}

/// The evaluator against a direct PR-curve construction on small cases.
pub fn check_ap_oracle(seed: u64, cases: usize) -> CheckResult {
    timed("evaluator AP == PR-curve oracle", || {
        let mut rng = rng_for(seed, 5);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let gts: Vec<[f64; 4]> = (0..rng.gen_range(1..=3)).map(|_| random_pixel_box(&mut rng)).collect();
            let preds: Vec<([f64; 4], f64)> = (0..rng.gen_range(0..=5))
                .map(|i| {
                    let b = if i < gts.len() && rng.gen_bool(0.6) {
                        let g = gts[i];
                        [g[0] + rng.gen_range(-2.0..2.0), g[1] + rng.gen_range(-2.0..2.0), g[2], g[3]]
                    } else {
                        random_pixel_box(&mut rng)
                    };
                    (b, rng.gen_range(0.0..1.0))
                })
                .collect();
            let scored: Vec<ScoredBox> = preds
                .iter()
                .map(|&(bbox, score)| ScoredBox { image: 0, bbox, class: 0, score })
                .collect();
            let gt_boxes: Vec<GtBox> = gts.iter().map(|&bbox| GtBox { image: 0, bbox, class: 0 }).collect();
            let r = average_precision(&scored, &gt_boxes, 1, 1, 0.0);
            let per: Vec<f64> = iou_thresholds().iter().map(|&t| oracle::average_precision(&preds, &gts, t)).collect();
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            for (got, want) in [(r.ap, mean), (r.ap50, per[0]), (r.ap75, per[5])] {
                worst = worst.max((got - want).abs());
            }
        }
        Ok((worst < 1e-12, Some(worst), format!("{cases} cases of at most 5 predictions")))
    })
}

/// Checks `Σ w = 2` on random `(z_w, z_h)` and the worked example at z = 2,
/// in both the scalar and the graph form.
pub fn check_level_weights(seed: u64, samples: usize) -> CheckResult {
    timed("level weights sum to 2", || {
        let mut rng = rng_for(seed, 6);
        let zw: Vec<f64> = (0..samples).map(|_| rng.gen_range(-1.0..8.0)).collect();
        let zh: Vec<f64> = (0..samples).map(|_| rng.gen_range(-1.0..8.0)).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([samples, 1], zw.clone())?);
        let b = g.constant(Tensor::new([samples, 1], zh.clone())?);
        let wg = level_weights_graph(&mut g, a, b)?;
        let wg = g.value(wg).data();
        let mut worst = 0.0f64;
        for i in 0..samples {
            let w = level_weights(zw[i], zh[i]);
            worst = worst.max((w.iter().sum::<f64>() - 2.0).abs());
            worst = worst.max((wg[4 * i..4 * i + 4].iter().sum::<f64>() - 2.0).abs());
        }
        let example = level_weights(2.0, 2.0);
        let expected = [1.1408, 0.6920, 0.1544, 0.0127];
        let example_err = example.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((
            worst < 1e-6 && example_err < 1e-3,
            Some(worst),
            format!("{samples} samples; example at z=2 off by {example_err:.2e}: {example:.4?}"),
        ))
    })
}

/// Gather width 85, fused shape `(h_s, w_s, c, k_mff)`, and the gathered
/// values of one cell against the maps they came from.
pub fn check_mff_contract(seed: u64) -> CheckResult {
    timed("multi-scale fusion shape contract", || {
        let mut rng = rng_for(seed, 7);
        let (c, k) = (3, 5);
        let image = (64, 96);
        let levels = random_levels(&mut rng, c, image);
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(seed);
        let mff = Mff::new(&mut Builder::new(&mut store, &mut init), k)?;
        let mut g = Graph::with_params(&store);
        let lv = constant_levels(&mut g, &levels);
        let p = pyramid(&mut g, lv, image)?;
        let gathered = mff_gather(&mut g, &p)?;
        let fused = mff.forward(&mut g, &p)?;
        let (hs, ws) = (image.0 / 32, image.1 / 32);
        let gs = g.shape(gathered).to_vec();
        let fs = g.shape(fused).to_vec();
        let gv = g.value(gathered);
        // Cell (1, 2), channel 1: P5 value, then the 2x2 block of P4.
        let (y, x, ch) = (1, 2, 1);
        let mut ok = gs == [hs, ws, c, MFF_WIDTH] && fs == [hs, ws, c, k] && MFF_WIDTH == 1 + 4 + 16 + 64;
        ok &= gv.at(&[y, x, ch, 0]) == levels[3].at(&[ch, y, x]);
        for dy in 0..2 {
            for dx in 0..2 {
                ok &= gv.at(&[y, x, ch, 1 + 2 * dy + dx]) == levels[2].at(&[ch, 2 * y + dy, 2 * x + dx]);
            }
        }
        ok &= gv.at(&[y, x, ch, 84]) == levels[0].at(&[ch, 8 * y + 7, 8 * x + 7]);
        Ok((ok, None, format!("gather {gs:?}, fused {fs:?}")))
    })
}

/// Per-query intermediate shapes for three `(S, C)` pairs.
pub fn check_qgfe_shapes(seed: u64) -> CheckResult {
    timed("qgfe shape contract", || {
        let mut ok = true;
        let mut detail = Vec::new();
        for (s, c) in [(3, 8), (5, 16), (7, 64)] {
            let ss = s * s;
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(seed);
            let q = Qgfe::new(&mut Builder::new(&mut store, &mut init), c, s)?;
            let mut g = Graph::with_params(&store);
            let mut rng = rng_for(seed, 8);
            let qv = g.constant(random_tensor(&mut rng, &[1, c], -1.0, 1.0).cast());
            let roi = g.constant(random_tensor(&mut rng, &[1, ss, c], -1.0, 1.0).cast());
            let (out, trace) = q.forward(&mut g, qv, roi)?;
            ok &= trace.after_first == [ss, ss] && trace.after_second == [c, ss] && trace.output == [1, c];
            ok &= g.shape(out) == [1, c];
            detail.push(format!("S={s} C={c}: {:?} {:?} {:?}", trace.after_first, trace.after_second, trace.output));
        }
        Ok((ok, None, detail.join("; ")))
    })
}

/// GIoU, focal and a single-pair stage loss against hand values.
pub fn check_loss_hand_cases() -> CheckResult {
    timed("loss hand cases", || {
        let w = LossWeights::default();
        let g_err = (giou([1.0, 1.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0])? + 5.0 / 63.0).abs();
        let f_err = (focal_loss(0.0, true, 0.25, 2.0) - 0.043321698784996576).abs();

        let logits = vec![vec![0.3, -1.2], vec![-2.0, 0.8], vec![1.1, 0.0]];
        let boxes = [[0.4, 0.5, 0.2, 0.3], [0.55, 0.45, 0.3, 0.25], [0.1, 0.9, 0.1, 0.1]];
        let target = [0.5, 0.5, 0.25, 0.3];
        let targets = Targets {
            boxes: vec![target],
            labels: vec![1],
        };
        let assign = Assignment {
            pairs: vec![(1, 0)],
            total_cost: 0.0,
        };
        let mut g = Graph::<f64>::new();
        let lv = g.constant(Tensor::from_f64([3, 2], &logits.concat())?);
        let bv = g.constant(Tensor::from_f64([3, 4], &boxes.concat())?);
        let s = stage_loss(&mut g, lv, bv, &targets, &assign, &w)?;
        let (cls, l1, gi) = oracle::single_pair_stage_loss(&logits, &boxes, 1, target, 1, &w);
        let s_err = [(s.cls, cls), (s.l1, l1), (s.giou, gi)]
            .iter()
            .map(|&(v, want)| (g.value(v).data()[0] - want).abs())
            .fold(0.0, f64::max);
        let worst = g_err.max(f_err).max(s_err);
        Ok((
            worst < 1e-6,
            Some(worst),
            format!("giou {g_err:.1e}, focal {f_err:.1e}, stage loss {s_err:.1e}"),
        ))
    })
}

/// Generated scenes keep boxes inside the image with sides of at least 2
/// pixels, also after augmentation, and draw classes uniformly (chi-square
/// with two degrees of freedom below the 0.1% critical value).
pub fn check_scene_invariants(seed: u64, scenes: usize) -> CheckResult {
    timed("scene invariants", || {
        let spec = SceneSpec::default();
        let policy = AugmentPolicy {
            crop_prob: 0.5,
            multiscale: true,
            ..AugmentPolicy::default()
        };
        let mut counts = [0usize; 3];
        for i in 0..scenes as u64 {
            let scene = generate_scene(derive_seed(seed, &[0x5c, i]), &spec)?;
            let aug = augment(&scene, derive_seed(seed, &[0xa5, i]), &policy)?;
            for (s, check_class) in [(&scene, true), (&aug, false)] {
                for a in &s.annotations {
                    let [x, y, w, h] = a.bbox;
                    if x < 0.0 || y < 0.0 || x + w > s.width as f64 + 1e-9 || y + h > s.height as f64 + 1e-9 || w < 2.0 || h < 2.0 {
                        return Ok((false, None, format!("scene {i}: box {:?} in {}x{}", a.bbox, s.width, s.height)));
                    }
                    if check_class {
                        counts[a.category_id as usize - 1] += 1;
                    }
                }
            }
            if aug.width % 32 != 0 || aug.height % 32 != 0 {
                return Ok((false, None, format!("scene {i}: augmented size {}x{}", aug.width, aug.height)));
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
        Ok((chi2 < 13.82, Some(chi2), format!("class counts {counts:?}, chi-square {chi2:.2}")))
    })
}

/// `0 <= AP <= AP50 <= 1` and `AP75 <= AP50` on random prediction sets.
pub fn check_eval_ordering(seed: u64, cases: usize) -> CheckResult {
    timed("evaluator ordering", || {
        let mut rng = rng_for(seed, 9);
        for k in 0..cases {
            let images = rng.gen_range(1..=3);
            let gts: Vec<GtBox> = (0..rng.gen_range(1..=6))
                .map(|_| GtBox {
                    image: rng.gen_range(0..images),
                    bbox: random_pixel_box(&mut rng),
                    class: rng.gen_range(0..2),
                })
                .collect();
            let preds: Vec<ScoredBox> = (0..rng.gen_range(0..=10))
                .map(|_| {
                    let base = gts[rng.gen_range(0..gts.len())];
                    let jitter = rng.gen_range(0.0..6.0);
                    ScoredBox {
                        image: base.image,
                        bbox: [base.bbox[0] + jitter, base.bbox[1], base.bbox[2], base.bbox[3]],
                        class: if rng.gen_bool(0.8) { base.class } else { 1 - base.class },
                        score: rng.gen_range(0.0..1.0),
                    }
                })
                .collect();
            let r = average_precision(&preds, &gts, 2, images, 0.0);
            let ok = 0.0 <= r.ap && r.ap <= r.ap50 + 1e-12 && r.ap50 <= 1.0 && r.ap75 <= r.ap50 + 1e-12;
            if !ok {
                return Ok((false, None, format!("case {k}: {r:?}")));
            }
        }
        Ok((true, None, format!("{cases} random prediction sets")))
    })
}

/// Modules accepted by [`gradcheck_module`].
pub const GRADCHECK_MODULES: [&str; 8] = ["ops", "attention", "sampling", "roi_align", "qgfe", "mixing", "decode", "loss"];

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Objective `sum(out * r)` with fixed random weights `r`, so that no
/// gradient coordinate cancels by symmetry.
fn probe(g: &mut Graph<'_, f64>, out: Var, tag: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(tag);
    let r = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

type OpFn = fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut t = |shape: &[usize], lo: f64, hi: f64| random_tensor(rng, shape, lo, hi);
    let off_zero = |mut x: Tensor<f64>| {
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        x
    };
    let a = t(&[2, 3], -1.0, 1.0);
    let b = t(&[2, 3], -1.0, 1.0);
    let mut separated = b.clone();
    for (s, x) in separated.data_mut().iter_mut().zip(a.data()) {
        if (*s - x).abs() < 0.05 {
            *s = x + 0.1;
        }
    }
    let row = t(&[1, 3], -1.0, 1.0);
    let pos = t(&[2, 3], 0.5, 2.0);
    vec![
        OpCase { name: "add (broadcast)", inputs: vec![a.clone(), row.clone()], f: |g, v| g.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: vec![a.clone(), b.clone()], f: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "mul (broadcast)", inputs: vec![a.clone(), row.clone()], f: |g, v| g.mul(v[0], v[1]) },
        OpCase { name: "div", inputs: vec![a.clone(), pos.clone()], f: |g, v| g.div(v[0], v[1]) },
        OpCase { name: "minimum", inputs: vec![a.clone(), separated.clone()], f: |g, v| g.minimum(v[0], v[1]) },
        OpCase { name: "maximum", inputs: vec![a.clone(), separated.clone()], f: |g, v| g.maximum(v[0], v[1]) },
        OpCase { name: "scale", inputs: vec![a.clone()], f: |g, v| g.scale(v[0], -1.7) },
        OpCase { name: "add_scalar", inputs: vec![a.clone()], f: |g, v| g.add_scalar(v[0], 0.3) },
        OpCase { name: "relu", inputs: vec![off_zero(a.clone())], f: |g, v| g.relu(v[0]) },
        OpCase { name: "sigmoid", inputs: vec![a.clone()], f: |g, v| g.sigmoid(v[0]) },
        OpCase { name: "exp", inputs: vec![a.clone()], f: |g, v| g.exp(v[0]) },
        OpCase { name: "log", inputs: vec![pos.clone()], f: |g, v| g.log(v[0]) },
        OpCase { name: "abs", inputs: vec![off_zero(a.clone())], f: |g, v| g.abs(v[0]) },
        OpCase { name: "sqrt", inputs: vec![pos.clone()], f: |g, v| g.sqrt(v[0]) },
        OpCase { name: "log_sigmoid", inputs: vec![t(&[2, 3], -6.0, 6.0)], f: |g, v| g.log_sigmoid(v[0]) },
        OpCase { name: "neg", inputs: vec![a.clone()], f: |g, v| g.neg(v[0]) },
        OpCase { name: "tanh", inputs: vec![a.clone()], f: |g, v| g.tanh(v[0]) },
        OpCase { name: "powf", inputs: vec![pos.clone()], f: |g, v| g.powf(v[0], 2.5) },
        OpCase {
            name: "clamp",
            inputs: vec![Tensor::from_f64([4], &[-0.9, -0.2, 0.35, 0.8]).expect("4")],
            f: |g, v| g.clamp(v[0], -0.5, 0.5),
        },
        OpCase {
            name: "matmul (batched)",
            inputs: vec![t(&[2, 2, 3], -1.0, 1.0), t(&[3, 4], -1.0, 1.0)],
            f: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "linear",
            inputs: vec![t(&[2, 3], -1.0, 1.0), t(&[3, 2], -1.0, 1.0), t(&[2], -1.0, 1.0)],
            f: |g, v| g.linear(v[0], v[1], v[2]),
        },
        OpCase { name: "softmax", inputs: vec![t(&[2, 3, 2], -2.0, 2.0)], f: |g, v| g.softmax(v[0], 1) },
        OpCase {
            name: "layer_norm",
            inputs: vec![t(&[3, 4], -2.0, 2.0), t(&[4], 0.5, 1.5), t(&[4], -0.5, 0.5)],
            f: |g, v| g.layer_norm(v[0], v[1], v[2], 1, 1e-5),
        },
        OpCase {
            name: "conv2d (stride 1)",
            inputs: vec![t(&[2, 5, 4], -1.0, 1.0), t(&[3, 2, 3, 3], -1.0, 1.0)],
            f: |g, v| g.conv2d(v[0], v[1], 1, 1),
        },
        OpCase {
            name: "conv2d (stride 2)",
            inputs: vec![t(&[2, 6, 6], -1.0, 1.0), t(&[2, 2, 3, 3], -1.0, 1.0)],
            f: |g, v| g.conv2d(v[0], v[1], 2, 1),
        },
        OpCase { name: "upsample2x", inputs: vec![t(&[2, 2, 3], -1.0, 1.0)], f: |g, v| g.upsample2x(v[0]) },
        OpCase {
            name: "bilinear_sample",
            inputs: vec![t(&[2, 4, 5], -1.0, 1.0), t(&[6, 2], 0.03, 0.97)],
            f: |g, v| g.bilinear_sample(v[0], v[1]),
        },
        OpCase { name: "reshape", inputs: vec![a.clone()], f: |g, v| g.reshape(v[0], [3, 2]) },
        OpCase { name: "flatten", inputs: vec![a.clone()], f: |g, v| g.flatten(v[0]) },
        OpCase { name: "permute", inputs: vec![t(&[2, 3, 4], -1.0, 1.0)], f: |g, v| g.permute(v[0], &[2, 0, 1]) },
        OpCase { name: "transpose", inputs: vec![t(&[2, 3, 4], -1.0, 1.0)], f: |g, v| g.transpose(v[0]) },
        OpCase { name: "sum", inputs: vec![a.clone()], f: |g, v| g.sum(v[0]) },
        OpCase { name: "mean", inputs: vec![a.clone()], f: |g, v| g.mean(v[0]) },
        OpCase { name: "sum_axis", inputs: vec![t(&[2, 3, 4], -1.0, 1.0)], f: |g, v| g.sum_axis(v[0], 1) },
        OpCase { name: "mean_axis", inputs: vec![t(&[2, 3, 4], -1.0, 1.0)], f: |g, v| g.mean_axis(v[0], 2) },
        OpCase {
            name: "concat",
            inputs: vec![t(&[2, 3], -1.0, 1.0), t(&[2, 1], -1.0, 1.0)],
            f: |g, v| g.concat(&[v[0], v[1]], 1),
        },
        OpCase {
            name: "stack",
            inputs: vec![a.clone(), b.clone()],
            f: |g, v| g.stack(&[v[0], v[1]], 1),
        },
        OpCase { name: "narrow", inputs: vec![t(&[3, 4], -1.0, 1.0)], f: |g, v| g.narrow(v[0], 1, 1, 2) },
        OpCase {
            name: "index_select",
            inputs: vec![t(&[4, 2], -1.0, 1.0)],
            f: |g, v| g.index_select(v[0], &[2, 0, 2]),
        },
    ]
}

fn gradcheck_ops(seed: u64) -> Result<(bool, Option<f64>, String)> {
    let mut rng = rng_for(seed, 20);
    let mut worst = (0.0, "");
    let mut coords = 0;
    for (i, case) in op_cases(&mut rng).into_iter().enumerate() {
        let f = case.f;
        let r = finite_diff_check(
            |g, v| {
                let out = f(g, v)?;
                probe(g, out, i as u64)
            },
            &case.inputs,
            EPS,
        )?;
        coords += r.coordinates;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, case.name);
        }
    }
    Ok((
        worst.0 < GRAD_TOL,
        Some(worst.0),
        format!("{coords} coordinates over every tensor op; worst `{}`", worst.1),
    ))
}

fn report(r: crate::tensor::GradCheck, what: &str) -> (bool, Option<f64>, String) {
    (
        r.max_rel_error < GRAD_TOL,
        Some(r.max_rel_error),
        format!(
            "{what}: {} coordinates, worst at {:?} (tape {:.6e}, numeric {:.6e})",
            r.coordinates, r.worst, r.worst_values.0, r.worst_values.1
        ),
    )
}

/// Builds a module and jitters every parameter, so that zero-initialized
/// biases do not leave activations exactly on a ReLU kink.
fn with_store<M>(seed: u64, build: impl FnOnce(&mut Builder<'_, f64>) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed);
    let m = build(&mut Builder::new(&mut store, &mut init))?;
    let mut rng = rng_for(seed, 22);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    Ok((store, m))
}

/// Checks one module's gradients in 64-bit mode against central finite
/// differences, with respect to its inputs and its parameters.
pub fn gradcheck_module(module: &str, seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 21);
    let name = format!("gradcheck: {module}");
    let result = match module {
        "ops" => timed(&name, || gradcheck_ops(seed)),
        "attention" => timed(&name, || {
            let (store, att) = with_store(seed, |b| Attention::new(b, "att", 4, 2))?;
            let inputs = [random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[5, 4], -1.0, 1.0)];
            let r = finite_diff_check_with_params(
                &store,
                &inputs,
                |g, v| {
                    let out = att.forward(g, v[0], v[1], v[1])?;
                    probe(g, out, 1)
                },
                EPS,
                usize::MAX,
            )?;
            Ok(report(r, "queries, keys and all projections"))
        }),
        "sampling" => timed(&name, || {
            let image = (64, 64);
            let levels = random_levels(&mut rng, 2, image);
            let mut inputs: Vec<Tensor<f64>> = levels.to_vec();
            inputs.push(random_tensor(&mut rng, &[4, 2], 0.05, 0.95));
            inputs.push(random_tensor(&mut rng, &[4, 1], 2.0, 5.0));
            inputs.push(random_tensor(&mut rng, &[4, 1], 2.0, 5.0));
            let r = finite_diff_check(
                |g, v| {
                    let p = pyramid(g, [v[0], v[1], v[2], v[3]], image)?;
                    let spec = SamplingSpec {
                        xy: v[4],
                        zw: v[5],
                        zh: v[6],
                        queries: 2,
                        points: 2,
                    };
                    let out = bidirectional_sample(g, &p, &spec)?;
                    probe(g, out, 2)
                },
                &inputs,
                EPS,
            )?;
            Ok(report(r, "pyramid maps, points and levels"))
        }),
        "roi_align" => timed(&name, || {
            let image = (64, 64);
            let levels = random_levels(&mut rng, 2, image);
            let mut inputs: Vec<Tensor<f64>> = levels.to_vec();
            inputs.push(Tensor::from_f64([2, 4], &[0.41, 0.46, 0.31, 0.33, 0.6, 0.55, 0.5, 0.42])?);
            let r = finite_diff_check(
                |g, v| {
                    let p = pyramid(g, [v[0], v[1], v[2], v[3]], image)?;
                    let out = roi_align(g, &p, v[4], 2, 32.0)?;
                    probe(g, out, 3)
                },
                &inputs,
                EPS,
            )?;
            Ok(report(r, "pyramid maps and boxes"))
        }),
        "qgfe" => timed(&name, || {
            let (store, q) = with_store(seed, |b| Qgfe::new(b, 4, 2))?;
            let inputs = [random_tensor(&mut rng, &[2, 4], -1.0, 1.0), random_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0)];
            let r = finite_diff_check_with_params(
                &store,
                &inputs,
                |g, v| {
                    let (out, _) = q.forward(g, v[0], v[1])?;
                    probe(g, out, 4)
                },
                EPS,
                usize::MAX,
            )?;
            Ok(report(r, "queries, RoI features and all weights"))
        }),
        "mixing" => timed(&name, || {
            let (store, m) = with_store(seed, |b| AdaptiveMixing::new(b, "mix", 4, 3))?;
            let inputs = [random_tensor(&mut rng, &[2, 4], -1.0, 1.0), random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)];
            let r = finite_diff_check_with_params(
                &store,
                &inputs,
                |g, v| {
                    let out = m.forward(g, v[0], v[1])?;
                    probe(g, out, 5)
                },
                EPS,
                usize::MAX,
            )?;
            Ok(report(r, "queries, sampled features and all weights"))
        }),
        "decode" => timed(&name, || {
            let inputs = [
                Tensor::from_f64([2, 4], &[0.4, 0.5, 0.2, 0.3, 0.6, 0.4, 0.3, 0.2])?,
                random_tensor(&mut rng, &[2, 4], -0.3, 0.3),
            ];
            let r = finite_diff_check(
                |g, v| {
                    let out = decode_boxes(g, v[0], v[1])?;
                    probe(g, out, 6)
                },
                &inputs,
                EPS,
            )?;
            Ok(report(r, "base boxes and deltas"))
        }),
        "loss" => timed(&name, || {
            let n = 5;
            let boxes = |rng: &mut ChaCha8Rng| Tensor::new([n, 4], (0..n).flat_map(|_| random_box(rng)).collect()).expect("n x 4");
            let inputs = [
                random_tensor(&mut rng, &[n, 1], -2.0, 2.0),
                boxes(&mut rng),
                boxes(&mut rng),
                random_tensor(&mut rng, &[n, 1], -2.0, 2.0),
                random_tensor(&mut rng, &[n, 3], -2.0, 2.0),
                boxes(&mut rng),
                boxes(&mut rng),
                random_tensor(&mut rng, &[n, 3], -2.0, 2.0),
            ];
            let targets = Targets {
                boxes: vec![random_box(&mut rng), random_box(&mut rng)],
                labels: vec![2, 0],
            };
            let w = LossWeights::default();
            let r = finite_diff_check(
                |g, v| {
                    let global = GlobalOutput {
                        logits: v[0],
                        boxes: v[1],
                        step1_boxes: v[2],
                        step2_logits: v[3],
                    };
                    let local = LocalOutput {
                        logits: v[4],
                        boxes: v[5],
                        step1_boxes: v[6],
                        step2_logits: v[7],
                    };
                    Ok(total_loss(g, &global, &local, &targets, &w)?.total)
                },
                &inputs,
                EPS,
            )?;
            Ok(report(r, "total loss w.r.t. logits and boxes of both stages"))
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck module `{other}`, expected one of {GRADCHECK_MODULES:?}"
            )))
        }
    };
    Ok(result)
}
