//! Fixtures shared by the criterion benches.

use golo_core::data::{generate_scene, SceneSpec};
use golo_core::matching::CostMatrix;
use golo_core::tensor::Init;
use golo_core::{Detector, Image, ModelConfig, ParamStore, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Init::new(seed).uniform(shape, -1.0, 1.0)
}

pub fn cost_matrix(n_pred: usize, n_gt: usize, seed: u64) -> CostMatrix {
    let t: Tensor<f64> = Init::new(seed).uniform(&[n_pred * n_gt], 0.0, 10.0);
    CostMatrix::new(n_pred, n_gt, t.into_data()).expect("sized to fit")
}

/// Default-sized detector and one synthetic 64x64 image.
pub fn detector(seed: u64) -> (Detector, ParamStore<f32>, Image<f32>) {
    let mut store = ParamStore::new();
    let det = Detector::new(&ModelConfig::default(), &mut store, seed).expect("default config is valid");
    let scene = generate_scene(seed, &SceneSpec::default()).expect("default scene");
    (det, store, scene.to_image().expect("rgb scene"))
}
