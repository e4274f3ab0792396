//! End-to-end acceptance checks on MNIST. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use flnn::baseline::Optimizer;
use flnn::verify;
use flnn::data::Normalization;
use flnn::LossKind;
use flnn_cli::commands::{cmd_compare, cmd_train, TrainOutcome, METRICS_FILE};
use flnn_cli::config::DATA_DIR_ENV;
use flnn_cli::{Mode, RunConfig};

/// Competing lifted methods quoted for the MSE experiment.
const MSE_REFERENCES: [(&str, f64); 3] = [("admm-lifted", 0.834), ("proximal-bcd", 0.914), ("relu-lifted", 0.863)];

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn work_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn base(mode: Mode, loss: LossKind, name: &str) -> RunConfig {
    let mut cfg = RunConfig::defaults(mode);
    cfg.loss = loss;
    cfg.data_dir = data_dir();
    cfg.out_dir = work_dir(name);
    cfg
}

/// Training examples used for the non-batched MSE run.
const MSE_TRAIN_SUBSET: usize = 10_000;
/// Accuracy floor for the non-batched MSE run on the subset.
const MSE_FLOOR: f64 = 0.93;

/// Non-batched MSE run on a 10k training subset with raw pixel inputs.
fn mse_config() -> RunConfig {
    let mut cfg = base(Mode::LiftedFull, LossKind::Mse, "mse-lifted");
    cfg.train_subset = Some(MSE_TRAIN_SUBSET);
    cfg.normalize = Normalization::None;
    cfg.lambda = 1.0;
    cfg.rho = vec![10.0];
    cfg.w_steps = Some(10);
    cfg.outer_max_iters = 25;
    cfg
}

fn ce_lifted() -> RunConfig {
    let mut cfg = base(Mode::LiftedBatched, LossKind::CrossEntropy, "ce-lifted");
    cfg.lambda = 0.1;
    cfg.gamma = vec![10.0];
    cfg.w_steps = Some(5);
    cfg
}

fn ce_baseline(opt: Optimizer) -> RunConfig {
    let mut cfg = base(Mode::Baseline, LossKind::CrossEntropy, &format!("ce-{}", opt.name()));
    cfg.optimizer = opt;
    cfg
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Verdict { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn final_acc(o: &TrainOutcome) -> Result<f64, String> {
    o.final_test_acc().ok_or_else(|| "run produced no test accuracy".to_string())
}

/// Test accuracy recorded at the last batch of the first epoch.
fn first_epoch_acc(o: &TrainOutcome) -> Result<f64, String> {
    o.report
        .records
        .iter()
        .filter(|r| r.epoch == 0)
        .last()
        .and_then(|r| r.test_acc)
        .ok_or_else(|| "no test evaluation at the end of epoch 1".to_string())
}

fn mse_full() -> Verdict {
    timed("mse-784-300-10-lifted-10k", || {
        let cfg = mse_config();
        let outcome = cmd_train(&cfg).map_err(|e| e.to_string())?;
        let acc = final_acc(&outcome)?;
        let beaten = MSE_REFERENCES.iter().all(|(_, r)| acc > *r);
        let passed = acc >= MSE_FLOOR && beaten;
        let refs: Vec<String> = MSE_REFERENCES.iter().map(|(n, r)| format!("{n} {r}")).collect();
        Ok((
            passed,
            format!(
                "final test acc {acc:.4} after {} alternations on {MSE_TRAIN_SUBSET} examples (need >= {MSE_FLOOR} and above {}); lambda {}, rho {}",
                outcome.report.records.len(),
                refs.join(", "),
                cfg.lambda,
                cfg.rho[0]
            ),
        ))
    })
}

struct CeRuns {
    lifted: Result<TrainOutcome, String>,
    sgd: Result<TrainOutcome, String>,
    adam: Result<TrainOutcome, String>,
}

fn run_ce() -> (CeRuns, f64) {
    let start = Instant::now();
    let configs = [ce_lifted(), ce_baseline(Optimizer::Sgd), ce_baseline(Optimizer::Adam)];
    let merged = work_dir("ce-compare.csv");
    let runs = match cmd_compare(&configs, &merged) {
        Ok(out) => {
            let mut it = out.runs.into_iter().map(|(_, o)| Ok(o));
            CeRuns { lifted: it.next().unwrap(), sgd: it.next().unwrap(), adam: it.next().unwrap() }
        }
        Err(e) => {
            let e = e.to_string();
            CeRuns { lifted: Err(e.clone()), sgd: Err(e.clone()), adam: Err(e) }
        }
    };
    (runs, start.elapsed().as_secs_f64())
}

fn ce_batched(runs: &CeRuns, seconds: f64) -> Verdict {
    let mut v = timed("ce-784-300-10-batched", || {
        let lifted = final_acc(runs.lifted.as_ref()?)?;
        let sgd = final_acc(runs.sgd.as_ref()?)?;
        let adam = final_acc(runs.adam.as_ref()?)?;
        let passed = lifted >= 0.96 && (0.93..=0.955).contains(&sgd) && (0.965..=0.985).contains(&adam);
        Ok((
            passed,
            format!(
                "lifted {lifted:.4} (>= 0.96), sgd {sgd:.4} (0.93-0.955), adam {adam:.4} (0.965-0.985) after 10 epochs"
            ),
        ))
    });
    v.seconds = seconds;
    v
}

fn fast_start(runs: &CeRuns) -> Verdict {
    timed("fast-start-after-1-epoch", || {
        let lifted = first_epoch_acc(runs.lifted.as_ref()?)?;
        let adam = first_epoch_acc(runs.adam.as_ref()?)?;
        Ok((lifted >= adam - 0.01, format!("after epoch 1: lifted {lifted:.4}, adam {adam:.4} (need lifted >= adam - 0.01)")))
    })
}

fn property_suite() -> Verdict {
    timed("property-suite", || {
        let outcomes = verify::run_all();
        let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        let detail = if failed.is_empty() {
            format!("{} checks passed", outcomes.len())
        } else {
            format!("failed: {}", failed.join(", "))
        };
        Ok((failed.is_empty(), detail))
    })
}

fn determinism() -> Verdict {
    timed("deterministic-metrics", || {
        let data = data_dir();
        let mut notes = Vec::new();
        let mut passed = true;
        for (mode, extra) in [
            ("lifted-batched", vec!["--w-steps", "5", "--gamma", "10", "--lambda", "0.1"]),
            ("lifted-full", vec!["--loss", "mse", "--w-steps", "3", "--set", "outer_max_iters=2"]),
            ("baseline", vec!["--optimizer", "adam"]),
        ] {
            let mut csvs = Vec::new();
            for rep in 0..2 {
                let out = work_dir(&format!("determinism-{mode}-{rep}"));
                let mut args = vec![
                    "train",
                    "--mode",
                    mode,
                    "--epochs",
                    "1",
                    "--train-subset",
                    "2000",
                    "--test-subset",
                    "1000",
                    "--no-wall-clock",
                    "--data-dir",
                    data.to_str().unwrap(),
                ];
                args.extend(&extra);
                let out_s = out.to_str().unwrap().to_string();
                args.extend(["--out-dir", &out_s]);
                let o = Command::new(env!("CARGO_BIN_EXE_flnn")).args(&args).output().map_err(|e| e.to_string())?;
                if !o.status.success() {
                    return Err(format!("{mode}: {}", String::from_utf8_lossy(&o.stderr).trim()));
                }
                csvs.push(std::fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
            }
            let same = csvs[0] == csvs[1];
            passed &= same;
            notes.push(format!("{mode} {}", if same { "identical" } else { "DIFFERENT" }));
        }
        Ok((passed, notes.join(", ")))
    })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let property = property_suite();
    let deterministic = determinism();
    let (runs, seconds) = run_ce();
    let ce = ce_batched(&runs, seconds);
    let fast = fast_start(&runs);
    drop(runs);
    let verdicts = [mse_full(), ce, fast, property, deterministic];

    println!("acceptance criteria ({:.0}s total)", start.elapsed().as_secs_f64());
    for v in &verdicts {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<30} {:>7.1}s  {}", v.name, v.seconds, v.detail);
    }
    if verdicts.iter().all(|v| v.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
