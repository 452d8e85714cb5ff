use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::Config;
use super::optim::{adamw_step, clip_grad_norm, lr_at, AdamHyper, AdamState};
use crate::data::{augment, derive_seed, generate_scene, Scene};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::model::Detector;
use crate::tensor::{Gradients, Graph, ParamStore};

const MODEL_STREAM: u64 = 0;
const SCENE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const HELD_OUT_STREAM: u64 = 3;
const GENERATION_RETRIES: u64 = 8;

pub const LOG_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.golo";

/// One line of the metric log. Loss fields are batch means of the
/// unweighted per-term sums over both stages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_aux_bbox: f64,
    pub l_aux_cls: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

fn scene_with_retries(cfg: &Config, path: &[u64]) -> Result<Scene> {
    let mut last = None;
    for attempt in 0..GENERATION_RETRIES {
        let mut p = path.to_vec();
        if attempt > 0 {
            p.push(attempt);
        }
        match generate_scene(derive_seed(cfg.seed, &p), &cfg.data) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Training image `index` of batch `step`; a pure function of the config.
pub fn training_scene(cfg: &Config, step: u64, index: u64) -> Result<Scene> {
    let scene = scene_with_retries(cfg, &[SCENE_STREAM, step, index])?;
    augment(&scene, derive_seed(cfg.seed, &[AUGMENT_STREAM, step, index]), &cfg.augment)
}

/// Evaluation scenes drawn from a stream disjoint from training, padded
/// but otherwise unaugmented.
pub fn held_out_scenes(cfg: &Config, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let s = scene_with_retries(cfg, &[HELD_OUT_STREAM, i])?;
            Ok(crate::data::pad_to_multiple(&s, cfg.augment.pad_to))
        })
        .collect()
}

pub struct Trainer {
    config: Config,
    detector: Detector,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let detector = Detector::new(&config.model, &mut params, derive_seed(config.seed, &[MODEL_STREAM]))?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            detector,
            params,
            adam,
            step: 0,
        })
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let detector = ckpt.detector()?;
        Ok(Trainer {
            config: ckpt.config,
            detector,
            params: ckpt.params,
            adam: ckpt.adam,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Number of completed optimizer steps.
    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.optim.total_steps as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
        }
    }

    fn abort(&self, reason: impl Into<String>) -> Error {
        Error::Aborted {
            step: self.step as usize,
            reason: reason.into(),
        }
    }

    /// One optimizer step over a batch. Non-finite losses or gradients abort
    /// without touching the parameters.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let batch = cfg.optim.batch_size;
        let scale = 1.0 / batch as f64;
        let mut grads = Gradients::zeros_like(&self.params);
        let mut sums = [0.0f64; 6];
        for i in 0..batch as u64 {
            let scene = training_scene(cfg, self.step, i)?;
            let image = scene.to_image()?;
            let targets = scene.targets();
            let mut g = Graph::with_params(&self.params);
            let loss = self
                .detector
                .forward(&mut g, &image)
                .and_then(|out| {
                    for v in [out.global.logits, out.global.boxes, out.local.logits, out.local.boxes] {
                        if !g.value(v).is_finite() {
                            return Err(Error::NonFinite("detector output"));
                        }
                    }
                    total_loss(&mut g, &out.global, &out.local, &targets, &cfg.loss)
                })
                .map_err(|e| match e {
                    Error::NonFinite(what) => self.abort(format!("non-finite value in {what}")),
                    other => other,
                })?;
            if !loss.total_value.is_finite() {
                return Err(self.abort(format!("loss is {}", loss.total_value)));
            }
            g.backward(loss.total)?;
            g.add_param_grads(&mut grads, scale as f32);
            for (s, v) in sums.iter_mut().zip([
                loss.total_value,
                loss.l_cls,
                loss.l_l1,
                loss.l_giou,
                loss.l_aux_bbox,
                loss.l_aux_cls,
            ]) {
                *s += v * scale;
            }
        }
        if !grads.is_finite() {
            return Err(self.abort("non-finite gradient"));
        }
        clip_grad_norm(&mut grads, &self.params, cfg.optim.grad_clip);
        let lr = lr_at(self.step as usize, &cfg.optim);
        adamw_step(&mut self.params, &grads, &mut self.adam, &AdamHyper::from_config(&cfg.optim, lr))?;
        let log = StepLog {
            step: self.step,
            total: sums[0],
            l_cls: sums[1],
            l_l1: sums[2],
            l_giou: sums[3],
            l_aux_bbox: sums[4],
            l_aux_cls: sums[5],
            lr,
        };
        self.step += 1;
        Ok(log)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub losses: Vec<f64>,
}

/// Trains to `optim.total_steps`, appending to `out/metrics.jsonl` and
/// writing `out/checkpoint.golo` every `run.checkpoint_every` steps and at
/// the end. On abort the last written checkpoint is left in place.
pub fn train(config: &Config, out: &Path, resume: Option<Checkpoint>) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt)?,
        None => Trainer::new(config.clone())?,
    };
    fs::create_dir_all(out)?;
    let log_path = out.join(LOG_FILE);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.current_step() > 0)
        .truncate(trainer.current_step() == 0)
        .open(&log_path)?;
    let every = trainer.config().run.checkpoint_every as u64;
    let mut losses = Vec::new();
    while !trainer.done() {
        let line = trainer.step()?;
        losses.push(line.total);
        writeln!(log, "{}", line.to_json())?;
        let step = trainer.current_step();
        if every > 0 && step % every == 0 && !trainer.done() {
            save_checkpoint(&checkpoint_path, &trainer.checkpoint())?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.4}", line.total);
        }
    }
    log.flush()?;
    save_checkpoint(&checkpoint_path, &trainer.checkpoint())?;
    Ok(TrainSummary {
        steps: trainer.current_step(),
        log_path,
        checkpoint_path,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.model = ModelConfig {
            n: 4,
            c: 8,
            m: 4,
            k_mff: 4,
            n_pts: 2,
            heads: 2,
            roi_size: 2,
            backbone_width: 8,
            ..ModelConfig::default()
        };
        c.data.min_objects = 1;
        c.optim.batch_size = 2;
        c.optim.total_steps = 3;
        c.run.checkpoint_every = 1;
        c
    }

    fn nonzero_fields(l: &StepLog) -> usize {
        [l.total, l.l_cls, l.l_l1, l.l_giou, l.l_aux_bbox, l.l_aux_cls]
            .iter()
            .filter(|&&x| x != 0.0)
            .count()
    }

    #[test]
    fn zero_aux_weights_zero_the_aux_fields() {
        let with = Trainer::new(tiny()).unwrap().step().unwrap();
        let mut cfg = tiny();
        cfg.loss.aux_bbox = 0.0;
        cfg.loss.aux_cls = 0.0;
        let without = Trainer::new(cfg).unwrap().step().unwrap();
        assert_eq!((without.l_aux_bbox, without.l_aux_cls), (0.0, 0.0));
        assert!(nonzero_fields(&without) < nonzero_fields(&with));
    }

    #[test]
    fn log_lines_carry_every_field() {
        let line = Trainer::new(tiny()).unwrap().step().unwrap().to_json();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["step", "total", "l_cls", "l_l1", "l_giou", "l_aux_bbox", "l_aux_cls", "lr"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["step"], 0);
    }

    #[test]
    fn divergence_aborts_and_keeps_last_checkpoint() {
        let mut cfg = tiny();
        cfg.optim.lr = 1e30;
        cfg.optim.grad_clip = 0.0;
        cfg.optim.total_steps = 50;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&cfg, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::Aborted { .. }), "{err}");
        let kept = crate::harness::load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert!(kept.step >= 1);
        assert!(kept.params.iter().all(|(_, _, t)| t.is_finite()));
    }
}
