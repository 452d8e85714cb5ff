//! Configuration, optimization, training, evaluation, checkpoints and the
//! self-check suites behind the command-line tool.

mod checkpoint;
mod checks;
mod config;
mod eval;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, read_entries, save_checkpoint, write_entries, Checkpoint, MAGIC, VERSION};
pub use checks::{
    check_ap_oracle, check_bidirectional_sampling, check_eval_ordering, check_level_weights, check_loss_hand_cases, check_matching,
    check_matching_cost, check_mff_contract, check_qgfe_shapes, check_roi_align, check_scene_invariants, gradcheck_module, run_checks,
    CheckReport, CheckResult, Suite, GRADCHECK_MODULES,
};
pub use config::{Config, OptimConfig, RunConfig};
pub use eval::{average_precision, evaluate_ap, interpolated_ap, iou_thresholds, EvalResult, GtBox, ScoredBox};
pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamHyper, AdamState};
pub use train::{held_out_scenes, train, training_scene, StepLog, TrainSummary, Trainer, CHECKPOINT_FILE, LOG_FILE};
