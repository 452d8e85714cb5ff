//! Model sizes and the assembled two-stage detector.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, Image};
use crate::error::{Error, Result};
use crate::global::{GlobalOutput, GlobalStage, QuerySet};
use crate::layers::Builder;
use crate::local::{LocalOutput, LocalStage};
use crate::tensor::{sigmoid, Graph, Init, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of queries.
    pub n: usize,
    /// Channel width shared by the pyramid and the queries.
    pub c: usize,
    /// Number of meta vectors.
    pub m: usize,
    pub k_mff: usize,
    /// Sampling points per query.
    pub n_pts: usize,
    pub heads: usize,
    /// RoIAlign output side S.
    pub roi_size: usize,
    pub num_classes: usize,
    pub backbone_width: usize,
    /// Box side in pixels that maps to P4 in level assignment.
    pub canonical_size: f64,
    pub meta_init: bool,
    pub mff: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 20,
            c: 64,
            m: 64,
            k_mff: 16,
            n_pts: 8,
            heads: 4,
            roi_size: 7,
            num_classes: 3,
            backbone_width: 32,
            canonical_size: 56.0,
            meta_init: true,
            mff: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n", self.n),
            ("c", self.c),
            ("m", self.m),
            ("k_mff", self.k_mff),
            ("n_pts", self.n_pts),
            ("heads", self.heads),
            ("roi_size", self.roi_size),
            ("num_classes", self.num_classes),
            ("backbone_width", self.backbone_width),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.c = {} is not divisible by model.heads = {}",
                self.c, self.heads
            )));
        }
        if !(self.canonical_size > 0.0) {
            return Err(Error::Config("model.canonical_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub global: GlobalStage,
    pub local: LocalStage,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    pub pyramid: FeaturePyramid,
    pub queries: QuerySet,
    pub global: GlobalOutput,
    pub local: LocalOutput,
}

/// One scored box in normalized `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    /// Zero-based class index.
    pub class: usize,
    pub score: f64,
}

impl Detector {
    /// Lays out every parameter in `store` in a fixed order, so the same
    /// seed always produces the same weights.
    pub fn new<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut b = Builder::new(store, &mut init);
        Ok(Detector {
            config: config.clone(),
            backbone: Backbone::new(&mut b, config.backbone_width, config.c)?,
            global: GlobalStage::new(&mut b, config)?,
            local: LocalStage::new(&mut b, config)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: &Image<T>) -> Result<DetectorOutput> {
        let pyramid = self.backbone.forward(g, image)?;
        let (queries, global) = self.global.forward(g, &pyramid)?;
        let local = self.local.forward(g, &pyramid, &queries)?;
        Ok(DetectorOutput {
            pyramid,
            queries,
            global,
            local,
        })
    }

    /// Every query-class pair of the final stage as a detection, without NMS.
    pub fn predict(&self, store: &ParamStore<f32>, image: &Image<f32>) -> Result<Vec<Detection>> {
        let mut g = Graph::with_params(store).frozen();
        let out = self.forward(&mut g, image)?;
        let logits = g.value(out.local.logits).to_f64_vec();
        let boxes = g.value(out.local.boxes).to_f64_vec();
        let k = self.config.num_classes;
        let mut dets = Vec::with_capacity(self.config.n * k);
        for i in 0..self.config.n {
            let bbox = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
            for class in 0..k {
                dets.push(Detection {
                    bbox,
                    class,
                    score: sigmoid(logits[i * k + class]),
                });
            }
        }
        Ok(dets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_sizes_are_config_errors() {
        let cfg = ModelConfig {
            n_pts: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn end_to_end_shapes() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&cfg, &mut store, 5).unwrap();
        let mut g = Graph::with_params(&store);
        let img = Image::new(Tensor::full([3, 64, 64], 0.3)).unwrap();
        let out = det.forward(&mut g, &img).unwrap();
        assert_eq!(g.shape(out.global.logits), &[20, 1]);
        assert_eq!(g.shape(out.global.boxes), &[20, 4]);
        assert_eq!(g.shape(out.local.logits), &[20, 3]);
        assert_eq!(g.shape(out.local.boxes), &[20, 4]);
        let b = g.value(out.local.boxes);
        assert!(b.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
