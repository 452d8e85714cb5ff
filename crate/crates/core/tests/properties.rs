use golo_core::data::{flip_horizontal, generate_scene, pad_to_multiple, resize, SceneSpec};
use golo_core::global::level_weights;
use golo_core::harness::{average_precision, load_checkpoint, save_checkpoint, Config, GtBox, ScoredBox, Trainer};
use golo_core::loss::{giou, iou};
use golo_core::matching::{brute_force_match, hungarian, CostMatrix};
use golo_core::{oracle, Detector, Graph, Image, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn cxcywh() -> impl Strategy<Value = [f64; 4]> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.6f64, 0.02..0.6f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(a in values(6), b in values(12), c in values(8)) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(tensor(&[2, 3], &a));
        let b = g.constant(tensor(&[3, 4], &b));
        let c = g.constant(tensor(&[4, 2], &c));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        prop_assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0..30.0f64, 12)) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(tensor(&[3, 4], &x));
        let s = g.softmax(v, 1).unwrap();
        let out = g.value(s).to_f64_vec();
        for row in out.chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(x in prop::collection::vec(-5.0..5.0f64, 16)) {
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.1);
        let mut g = Graph::<f64>::new();
        let v = g.constant(tensor(&[2, 8], &x));
        let gain = g.constant(Tensor::full(vec![8], 1.0));
        let bias = g.constant(Tensor::zeros(vec![8]));
        let y = g.layer_norm(v, gain, bias, 1, 1e-12).unwrap();
        for row in g.value(y).to_f64_vec().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_sample_matches_dense_oracle(
        map in values(2 * 5 * 6),
        pts in prop::collection::vec((-0.1..1.1f64, -0.1..1.1f64), 1..6),
    ) {
        let feat = tensor(&[2, 5, 6], &map);
        let flat: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        let mut g = Graph::<f64>::new();
        let f = g.constant(feat.clone());
        let p = g.constant(tensor(&[pts.len(), 2], &flat));
        let out = g.bilinear_sample(f, p).unwrap();
        let got = g.value(out).to_f64_vec();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let want = oracle::bilinear(&feat, x, y);
            for ch in 0..2 {
                prop_assert!((got[i * 2 + ch] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_weights_sum_to_two(z_w in 0.0..8.0f64, z_h in 0.0..8.0f64) {
        let w = level_weights(z_w, z_h);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-6);
        let swapped = level_weights(z_h, z_w);
        for j in 0..4 {
            prop_assert!((w[j] - swapped[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_agrees_with_brute_force(
        (n_pred, n_gt, data) in (1usize..=6).prop_flat_map(|p| (Just(p), 0..=p))
            .prop_flat_map(|(p, q)| (Just(p), Just(q), prop::collection::vec(0.0..10.0f64, p * q))),
    ) {
        let c = CostMatrix::new(n_pred, n_gt, data).unwrap();
        let fast = hungarian(&c).unwrap();
        let slow = brute_force_match(&c).unwrap();
        prop_assert_eq!(&fast.pairs, &slow.pairs);
        prop_assert!((fast.total_cost - slow.total_cost).abs() < 1e-9);
        let mut preds: Vec<usize> = fast.pairs.iter().map(|p| p.0).collect();
        preds.sort_unstable();
        preds.dedup();
        prop_assert_eq!(preds.len(), n_gt);
    }

    #[test]
    fn giou_bounds_and_symmetry(a in cxcywh(), b in cxcywh()) {
        let gab = giou(a, b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&gab));
        prop_assert!(gab <= iou(a, b) + 1e-12);
        prop_assert!((gab - giou(b, a).unwrap()).abs() < 1e-12);
        prop_assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((gab - oracle::giou(a, b)).abs() < 1e-12);
    }

    #[test]
    fn scenes_keep_boxes_inside_and_apart(seed in any::<u64>()) {
        let spec = SceneSpec::default();
        let scene = generate_scene(seed, &spec).unwrap();
        prop_assert_eq!(scene.pixels.len(), 3 * spec.width * spec.height);
        prop_assert!(scene.annotations.len() <= spec.max_objects);
        for a in &scene.annotations {
            let [x, y, w, h] = a.bbox;
            prop_assert!(x >= 0.0 && y >= 0.0);
            prop_assert!(x + w <= spec.width as f64 && y + h <= spec.height as f64);
            prop_assert!(w >= spec.min_size as f64 && w <= spec.max_size as f64);
            prop_assert!((1..=3).contains(&a.category_id));
        }
        for (i, a) in scene.annotations.iter().enumerate() {
            for b in &scene.annotations[i + 1..] {
                let gap_x = (b.bbox[0] - (a.bbox[0] + a.bbox[2])).max(a.bbox[0] - (b.bbox[0] + b.bbox[2]));
                let gap_y = (b.bbox[1] - (a.bbox[1] + a.bbox[3])).max(a.bbox[1] - (b.bbox[1] + b.bbox[3]));
                prop_assert!(gap_x.max(gap_y) >= spec.min_separation);
            }
        }
        prop_assert_eq!(generate_scene(seed, &spec).unwrap(), scene);
    }

    #[test]
    fn geometric_augmentations_keep_boxes_valid(seed in any::<u64>(), nw in 16usize..96, nh in 16usize..96) {
        let scene = generate_scene(seed, &SceneSpec::default()).unwrap();
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&scene)), &scene);
        let padded = pad_to_multiple(&scene, 32);
        prop_assert_eq!(padded.width % 32, 0);
        prop_assert_eq!(&padded.annotations, &scene.annotations);
        let r = resize(&scene, nw, nh).unwrap();
        prop_assert!(r.annotations.len() <= scene.annotations.len());
        for a in &r.annotations {
            let [x, y, w, h] = a.bbox;
            prop_assert!(x >= -1e-9 && y >= -1e-9 && w >= 2.0 && h >= 2.0);
            prop_assert!(x + w <= nw as f64 + 1e-9 && y + h <= nh as f64 + 1e-9);
        }
    }

    #[test]
    fn trailing_false_positive_leaves_ap_unchanged(
        scores in prop::collection::vec(0.1..1.0f64, 1..6),
        jitter in prop::collection::vec(0.0..8.0f64, 6),
    ) {
        let gts: Vec<GtBox> = (0..3)
            .map(|i| GtBox { image: 0, bbox: [10.0 + 30.0 * i as f64, 10.0, 20.0, 20.0], class: 0 })
            .collect();
        let preds: Vec<ScoredBox> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let gt = gts[i % 3].bbox;
                ScoredBox { image: 0, bbox: [gt[0] + jitter[i], gt[1], gt[2], gt[3]], class: 0, score: s }
            })
            .collect();
        let base = average_precision(&preds, &gts, 1, 1, 0.0);
        prop_assert!(0.0 <= base.ap && base.ap <= base.ap50 + 1e-12 && base.ap50 <= 1.0);
        let mut more = preds.clone();
        more.push(ScoredBox { image: 0, bbox: [0.0, 40.0, 5.0, 5.0], class: 0, score: 0.01 });
        let extended = average_precision(&more, &gts, 1, 1, 0.0);
        prop_assert!((extended.ap50 - base.ap50).abs() < 1e-12);
        prop_assert!((extended.ap - base.ap).abs() < 1e-12);
        let mut reversed = preds.clone();
        reversed.reverse();
        let r = average_precision(&reversed, &gts, 1, 1, 0.0);
        prop_assert!((r.ap50 - base.ap50).abs() < 1e-12);
    }

    #[test]
    fn evaluator_matches_pr_curve_oracle(
        preds in prop::collection::vec((0usize..3, 0.0..10.0f64, 0.05..1.0f64), 0..=5),
    ) {
        let gts: Vec<[f64; 4]> = (0..3).map(|i| [5.0 + 25.0 * i as f64, 5.0, 18.0, 18.0]).collect();
        let boxes: Vec<([f64; 4], f64)> = preds
            .iter()
            .map(|&(k, dx, s)| ([gts[k][0] + dx, gts[k][1], gts[k][2], gts[k][3]], s))
            .collect();
        let scored: Vec<ScoredBox> = boxes.iter().map(|&(b, s)| ScoredBox { image: 0, bbox: b, class: 0, score: s }).collect();
        let gt_boxes: Vec<GtBox> = gts.iter().map(|&b| GtBox { image: 0, bbox: b, class: 0 }).collect();
        let r = average_precision(&scored, &gt_boxes, 1, 1, 0.0);
        prop_assert!((r.ap50 - oracle::average_precision(&boxes, &gts, 0.5)).abs() < 1e-9);
        prop_assert!((r.ap75 - oracle::average_precision(&boxes, &gts, 0.75)).abs() < 1e-9);
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n: 4,
        c: 8,
        m: 4,
        k_mff: 4,
        n_pts: 2,
        heads: 2,
        roi_size: 2,
        backbone_width: 8,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pyramid_levels_halve(hk in 1usize..=3, wk in 1usize..=3, seed in any::<u64>()) {
        let (h, w) = (32 * hk, 32 * wk);
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&tiny_model(), &mut store, seed).unwrap();
        let image = Image::new(Tensor::full(vec![3, h, w], 0.5f32)).unwrap();
        let mut g = Graph::with_params(&store);
        let out = det.forward(&mut g, &image).unwrap();
        for (j, &(lh, lw)) in out.pyramid.sizes.iter().enumerate() {
            let stride = 4 << j;
            prop_assert_eq!((lh, lw), (h / stride, w / stride));
            prop_assert_eq!(g.shape(out.pyramid.levels[j]), &[8, lh, lw][..]);
        }
        prop_assert_eq!(out.pyramid.image_size, (h, w));
        for d in det.predict(&store, &image).unwrap() {
            prop_assert!((0.0..=1.0).contains(&d.score));
            prop_assert!(d.class < 3);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0..=i64::MAX as u64, noise in -1.0..1.0f32) {
        let config = Config { seed, model: tiny_model(), ..Config::default() };
        let mut trainer = Trainer::new(config).unwrap();
        let ids: Vec<_> = trainer.params().ids().collect();
        for id in ids {
            for (k, x) in trainer.params_mut().value_mut(id).data_mut().iter_mut().enumerate() {
                *x += noise * (k as f32).sin();
            }
        }
        let ckpt = trainer.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.golo");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&back.config, &ckpt.config);
        prop_assert_eq!(back.step, ckpt.step);
        for ((_, na, a), (_, nb, b)) in back.params.iter().zip(ckpt.params.iter()) {
            prop_assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}
