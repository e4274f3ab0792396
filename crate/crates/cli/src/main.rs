use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flnn_cli::commands::{self, Fault};
use flnn_cli::config::{parse_override, RunConfig};
use flnn_cli::error::Result;

#[derive(Parser)]
#[command(name = "flnn", about = "Train and evaluate Fenchel lifted networks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write metrics, config and checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train several configs on the same data and merge their test curves.
    Compare {
        /// Config files, at least two.
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
        /// Overrides applied to every config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the property suite and print a pass/fail table.
    Verify {
        /// Deliberately break a component to show the suite catches it.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Alternations per batch.
    #[arg(long, short = 'K')]
    alternations: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    w_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    train_subset: Option<String>,
    #[arg(long)]
    test_subset: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    /// none, global or pixel.
    #[arg(long)]
    normalize: Option<String>,
    /// Write 0 in the seconds column.
    #[arg(long)]
    no_wall_clock: bool,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let named = [
            ("mode", &self.mode),
            ("method", &self.method),
            ("arch", &self.arch),
            ("activation", &self.activation),
            ("loss", &self.loss),
            ("lambda", &self.lambda),
            ("rho", &self.rho),
            ("gamma", &self.gamma),
            ("batch", &self.batch),
            ("alternations", &self.alternations),
            ("epochs", &self.epochs),
            ("w_steps", &self.w_steps),
            ("seed", &self.seed),
            ("optimizer", &self.optimizer),
            ("lr", &self.lr),
            ("data_dir", &self.data_dir),
            ("train_subset", &self.train_subset),
            ("test_subset", &self.test_subset),
            ("out_dir", &self.out_dir),
            ("eval_every", &self.eval_every),
            ("normalize", &self.normalize),
        ];
        let mut pairs: Vec<(String, String)> =
            named.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        if self.no_wall_clock {
            pairs.push(("wall_clock".into(), "false".into()));
        }
        for s in &self.set {
            pairs.push(parse_override(s)?);
        }
        Ok(pairs)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = commands::cmd_train(&cfg)?;
            for w in &outcome.report.warnings {
                eprintln!("warning: {w}");
            }
            match outcome.final_test_acc() {
                Some(acc) => println!("final test accuracy: {acc:.4}"),
                None => println!("final test accuracy: n/a"),
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, run } => {
            let cfg = run.resolve()?;
            let out = commands::cmd_eval(&checkpoint, &cfg)?;
            println!("test accuracy: {:.4}", out.accuracy);
            println!("mean loss: {:.6}", out.mean_loss);
            println!("samples: {}", out.samples);
        }
        Command::Compare { configs, out, set } => {
            let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
            let configs =
                configs.iter().map(|p| RunConfig::resolve(Some(p), &overrides)).collect::<Result<Vec<_>>>()?;
            let result = commands::cmd_compare(&configs, &out)?;
            for (cfg, outcome) in &result.runs {
                let acc = outcome.final_test_acc().map_or("n/a".to_string(), |a| format!("{a:.4}"));
                println!("{:<12} final test accuracy {acc}", cfg.method_label());
            }
            println!("wrote {} ({} rows)", out.display(), result.merged.len());
        }
        Command::Verify { inject_fault } => {
            let fault = inject_fault.map(|f| f.parse::<Fault>()).transpose()?;
            let outcomes = commands::cmd_verify(fault);
            print!("{}", commands::format_table(&outcomes));
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                println!("{failed} check(s) failed");
                return Ok(ExitCode::from(1));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
