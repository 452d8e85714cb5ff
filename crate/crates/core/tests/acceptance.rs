//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use golo_core::harness::{
    check_bidirectional_sampling, check_level_weights, check_loss_hand_cases, check_matching, check_mff_contract,
    check_qgfe_shapes, check_roi_align, evaluate_ap, gradcheck_module, held_out_scenes, load_checkpoint,
    save_checkpoint, train, CheckResult, Config, Trainer, GRADCHECK_MODULES,
};

const SEED: u64 = 0;
const TOY_CONFIG: &str = include_str!("../../../configs/toy.toml");
const HELD_OUT: usize = 200;
/// Held-out AP50 of the reference run of `configs/toy.toml` (seed 0).
const REFERENCE_AP50: f64 = 0.6234;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    let line = if passed { "PASS" } else { "FAIL" };
    println!("{line} | {name} | {detail}");
    Outcome { name, passed, detail }
}

fn summary(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| match r.max_error {
            Some(e) => format!("{} [{}] err {e:.2e}", r.name, if r.passed { "ok" } else { "bad" }),
            None => format!("{} [{}]", r.name, if r.passed { "ok" } else { "bad" }),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn matching() -> Outcome {
    let (r, t) = timed(|| check_matching(SEED, 200));
    let ok = r.passed && t < Duration::from_secs(10);
    outcome(
        "oracle equivalence: matching",
        ok,
        format!("{} in {:.2}s (limit 10s)", r.detail, t.as_secs_f64()),
    )
}

fn sampling() -> Outcome {
    let (rs, t) = timed(|| vec![check_bidirectional_sampling(SEED, 100), check_roi_align(SEED, 100)]);
    let ok = rs.iter().all(|r| r.passed && r.max_error.is_some_and(|e| e < 1e-5)) && t < Duration::from_secs(30);
    outcome(
        "oracle equivalence: sampling",
        ok,
        format!("{} in {:.2}s (limit 30s)", summary(&rs), t.as_secs_f64()),
    )
}

fn gradients() -> Outcome {
    let (rs, t) = timed(|| {
        GRADCHECK_MODULES
            .iter()
            .map(|m| gradcheck_module(m, SEED).expect("known module"))
            .collect::<Vec<_>>()
    });
    let ok = rs.iter().all(|r| r.passed && r.max_error.is_some_and(|e| e < 1e-4)) && t < Duration::from_secs(120);
    outcome(
        "gradient integrity",
        ok,
        format!("{} in {:.2}s (limit 120s)", summary(&rs), t.as_secs_f64()),
    )
}

fn single(name: &'static str, r: CheckResult) -> Outcome {
    outcome(name, r.passed, format!("{}: {}", r.name, r.detail))
}

struct Run {
    losses: Vec<f64>,
    ap50: f64,
    elapsed: Duration,
}

fn toy_config() -> Config {
    Config::from_toml(TOY_CONFIG).expect("committed config parses")
}

fn run(config: &Config, dir: &Path) -> Result<Run, String> {
    let (summary, elapsed) = timed(|| train(config, dir, None));
    let summary = summary.map_err(|e| e.to_string())?;
    let ckpt = load_checkpoint(&summary.checkpoint_path).map_err(|e| e.to_string())?;
    let detector = ckpt.detector().map_err(|e| e.to_string())?;
    let scenes = held_out_scenes(config, HELD_OUT).map_err(|e| e.to_string())?;
    let result = evaluate_ap(&detector, &ckpt.params, &scenes, 0.0).map_err(|e| e.to_string())?;
    Ok(Run {
        losses: summary.losses,
        ap50: result.ap50,
        elapsed,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn toy(full: &Result<Run, String>) -> Outcome {
    let name = "toy end-to-end";
    let r = match full {
        Ok(r) => r,
        Err(e) => return outcome(name, false, format!("training failed: {e}")),
    };
    let early = mean(&r.losses[..50.min(r.losses.len())]);
    let late = mean(&r.losses[r.losses.len().saturating_sub(50)..]);
    let target = REFERENCE_AP50 - 0.05;
    let ok = late <= 0.5 * early && r.ap50 >= target && r.elapsed <= TOY_BUDGET;
    outcome(
        name,
        ok,
        format!(
            "{} steps in {:.0}s (limit {}s); loss {early:.3} -> {late:.3} (ratio {:.3}, limit 0.5); held-out AP50 {:.4} vs target {target:.4}",
            r.losses.len(),
            r.elapsed.as_secs_f64(),
            TOY_BUDGET.as_secs(),
            late / early,
            r.ap50
        ),
    )
}

fn short_config() -> Config {
    let mut c = toy_config();
    c.optim.total_steps = 20;
    c.run.checkpoint_every = 10;
    c
}

fn determinism() -> Outcome {
    let name = "determinism";
    let check = || -> Result<String, String> {
        let cfg = short_config();
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let sa = train(&cfg, a.path(), None).map_err(|e| e.to_string())?;
        let sb = train(&cfg, b.path(), None).map_err(|e| e.to_string())?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        if read(&sa.log_path)? != read(&sb.log_path)? {
            return Err("metric logs differ".into());
        }
        if read(&sa.checkpoint_path)? != read(&sb.checkpoint_path)? {
            return Err("checkpoints differ".into());
        }
        let mut whole = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut first = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut lines = Vec::new();
        for _ in 0..10 {
            first.step().map_err(|e| e.to_string())?;
        }
        let path = a.path().join("half.golo");
        save_checkpoint(&path, &first.checkpoint()).map_err(|e| e.to_string())?;
        let mut resumed = Trainer::resume(load_checkpoint(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for k in 0..cfg.optim.total_steps {
            let line = whole.step().map_err(|e| e.to_string())?.to_json();
            if k >= 10 {
                lines.push(line);
            }
        }
        for (k, expected) in lines.iter().enumerate() {
            let got = resumed.step().map_err(|e| e.to_string())?.to_json();
            if &got != expected {
                return Err(format!("resumed step {} differs", k + 10));
            }
        }
        let (pw, pr) = (a.path().join("whole.golo"), a.path().join("resumed.golo"));
        save_checkpoint(&pw, &whole.checkpoint()).map_err(|e| e.to_string())?;
        save_checkpoint(&pr, &resumed.checkpoint()).map_err(|e| e.to_string())?;
        if read(&pw)? != read(&pr)? {
            return Err("resumed run ends on a different checkpoint".into());
        }
        Ok(format!(
            "two {}-step runs give identical logs and checkpoints; resume at step 10 reproduces the remaining log lines and final checkpoint",
            cfg.optim.total_steps
        ))
    };
    match check() {
        Ok(d) => outcome(name, true, d),
        Err(e) => outcome(name, false, e),
    }
}

fn ablations(full: &Result<Run, String>) -> Outcome {
    let name = "ablation direction";
    let full_ap = match full {
        Ok(r) => r.ap50,
        Err(e) => return outcome(name, false, format!("full run failed: {e}")),
    };
    let mut details = Vec::new();
    let mut ok = true;
    for (label, edit) in [
        ("random query init", (|c: &mut Config| c.model.meta_init = false) as fn(&mut Config)),
        ("no fusion features", |c: &mut Config| c.model.mff = false),
    ] {
        let mut cfg = toy_config();
        edit(&mut cfg);
        let dir = tempfile::tempdir().expect("temp dir");
        match run(&cfg, dir.path()) {
            Ok(r) => {
                ok &= r.ap50 <= full_ap + 0.01;
                details.push(format!("{label}: AP50 {:.4}", r.ap50));
            }
            Err(e) => {
                ok = false;
                details.push(format!("{label}: {e}"));
            }
        }
    }
    outcome(name, ok, format!("full AP50 {full_ap:.4}; {} (limit full + 0.01)", details.join("; ")))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut outcomes = vec![
        matching(),
        sampling(),
        gradients(),
        single("level weight contract", check_level_weights(SEED, 1000)),
        single("fusion gather contract", check_mff_contract(SEED)),
        single("query-guided enhancing shapes", check_qgfe_shapes(SEED)),
        single("loss hand cases", check_loss_hand_cases()),
        determinism(),
    ];
    let dir = tempfile::tempdir().expect("temp dir");
    let full = run(&toy_config(), dir.path());
    outcomes.push(toy(&full));
    outcomes.push(ablations(&full));
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    for o in &failed {
        println!("failed: {} ({})", o.name, o.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
