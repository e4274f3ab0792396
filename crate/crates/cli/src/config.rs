//! Flat `key=value` run configuration.
//!
//! Files hold one pair per line; `#` starts a comment. Pairs given on the
//! command line are applied after the file, so flags win.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flnn::baseline::{Optimizer, SgdConfig};
use flnn::data::Normalization;
use flnn::{ActivationKind, Hyperparams, LossKind, NetworkSpec};

use crate::error::{CliError, Result};

pub const DATA_DIR_ENV: &str = "FLNN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LiftedFull,
    LiftedBatched,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LiftedFull => "lifted-full",
            Mode::LiftedBatched => "lifted-batched",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lifted-full" => Ok(Mode::LiftedFull),
            "lifted-batched" => Ok(Mode::LiftedBatched),
            "baseline" => Ok(Mode::Baseline),
            other => Err(CliError::Config(format!(
                "unknown mode '{other}' (expected lifted-full, lifted-batched or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Label written to the `method` column; derived from the mode when unset.
    pub method: Option<String>,
    pub arch: Vec<usize>,
    /// One entry per hidden layer, or a single entry used for all of them.
    pub activation: Vec<ActivationKind>,
    pub loss: LossKind,
    pub lambda: f64,
    /// One entry per weight matrix, or a single entry used for all of them.
    pub rho: Vec<f64>,
    pub gamma: Vec<f64>,
    pub batch: usize,
    pub alternations: usize,
    pub epochs: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub outer_max_iters: usize,
    pub outer_rel_tol: f64,
    pub w_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Learning rate; the optimizer default when unset.
    pub lr: Option<f64>,
    pub data_dir: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub normalize: Normalization,
    pub out_dir: PathBuf,
    /// Batches between test evaluations.
    pub eval_every: usize,
    pub wall_clock: bool,
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"))
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let (rho, gamma, epochs) = match mode {
            Mode::LiftedFull => (1e-4, 0.0, 1),
            Mode::LiftedBatched => (0.0, 1.0, 10),
            Mode::Baseline => (0.0, 0.0, 10),
        };
        Self {
            mode,
            method: None,
            arch: vec![784, 300, 10],
            activation: vec![ActivationKind::Relu],
            loss: LossKind::CrossEntropy,
            lambda: 10.0,
            rho: vec![rho],
            gamma: vec![gamma],
            batch: 500,
            alternations: 1,
            epochs,
            inner_tol: 1e-4,
            inner_max_iters: 200,
            outer_max_iters: 50,
            outer_rel_tol: 1e-6,
            w_steps: None,
            seed: 0,
            optimizer: Optimizer::Adam,
            lr: None,
            data_dir: default_data_dir(),
            train_subset: None,
            test_subset: None,
            normalize: Normalization::Global,
            out_dir: PathBuf::from("runs/latest"),
            eval_every: 10,
            wall_clock: true,
        }
    }

    /// Builds a config from ordered pairs. The mode is read first so that
    /// its defaults sit underneath every other key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mode = match pairs.iter().rev().find(|(k, _)| k == "mode") {
            Some((_, v)) => v.parse()?,
            None => Mode::LiftedBatched,
        };
        let mut cfg = Self::defaults(mode);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Reads `file` (if any) and applies `overrides` on top.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::MissingPath(path.to_path_buf()),
                    _ => CliError::Io(e),
                })?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "method" => self.method = optional(v).map(str::to_string),
            "arch" => self.arch = NetworkSpec::parse_arch(v).map_err(|e| bad(key, e))?,
            "activation" => self.activation = list(key, v)?,
            "loss" => self.loss = v.parse().map_err(|e| bad(key, e))?,
            "lambda" => self.lambda = number(key, v)?,
            "rho" => self.rho = list(key, v)?,
            "gamma" => self.gamma = list(key, v)?,
            "batch" => self.batch = number(key, v)?,
            "alternations" => self.alternations = number(key, v)?,
            "epochs" => self.epochs = number(key, v)?,
            "inner_tol" => self.inner_tol = number(key, v)?,
            "inner_max_iters" => self.inner_max_iters = number(key, v)?,
            "outer_max_iters" => self.outer_max_iters = number(key, v)?,
            "outer_rel_tol" => self.outer_rel_tol = number(key, v)?,
            "w_steps" => self.w_steps = optional(v).map(|s| number(key, s)).transpose()?,
            "seed" => self.seed = number(key, v)?,
            "optimizer" => self.optimizer = v.parse().map_err(|e| bad(key, e))?,
            "lr" => self.lr = optional(v).map(|s| number(key, s)).transpose()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_subset" => self.train_subset = optional(v).map(|s| number(key, s)).transpose()?,
            "test_subset" => self.test_subset = optional(v).map(|s| number(key, s)).transpose()?,
            "normalize" => self.normalize = v.parse().map_err(|e| bad(key, e))?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_every" => self.eval_every = number(key, v)?,
            "wall_clock" => self.wall_clock = number(key, v)?,
            other => return Err(CliError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn method_label(&self) -> String {
        match (&self.method, self.mode) {
            (Some(m), _) => m.clone(),
            (None, Mode::Baseline) => self.optimizer.name().to_string(),
            (None, _) => "lifted".to_string(),
        }
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        let hidden = self.arch.len().saturating_sub(2);
        let acts = broadcast("activation", &self.activation, hidden)?;
        Ok(NetworkSpec::new(self.arch.clone(), acts, self.loss)?)
    }

    pub fn hyperparams(&self, spec: &NetworkSpec) -> Result<Hyperparams> {
        let layers = spec.hidden_layers() + 1;
        let batch_size = match self.mode {
            Mode::LiftedFull => usize::MAX,
            _ => self.batch,
        };
        let h = Hyperparams {
            lambda: self.lambda,
            rho: broadcast("rho", &self.rho, layers)?,
            gamma: broadcast("gamma", &self.gamma, layers)?,
            batch_size,
            alternations: self.alternations,
            epochs: self.epochs,
            inner_tol: self.inner_tol,
            inner_max_iters: self.inner_max_iters,
            outer_max_iters: self.outer_max_iters,
            outer_rel_tol: self.outer_rel_tol,
            w_steps: self.w_steps,
            seed: self.seed,
        };
        h.check(spec)?;
        Ok(h)
    }

    pub fn sgd(&self, spec: &NetworkSpec) -> Result<SgdConfig> {
        let cfg = SgdConfig {
            optimizer: self.optimizer,
            learning_rate: self.lr.unwrap_or(self.optimizer.default_learning_rate()),
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            rho: broadcast("rho", &self.rho, spec.hidden_layers() + 1)?,
        };
        cfg.check(spec)?;
        Ok(cfg)
    }

    /// Checks that the config describes a runnable experiment.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        match self.mode {
            Mode::Baseline => drop(self.sgd(&spec)?),
            _ => drop(self.hyperparams(&spec)?),
        }
        if self.eval_every == 0 {
            return Err(CliError::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    /// The pairs that fully describe this config, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        vec![
            ("mode", self.mode.to_string()),
            ("method", opt(self.method.clone())),
            ("arch", join(&self.arch)),
            ("activation", join(&self.activation)),
            ("loss", self.loss.to_string()),
            ("lambda", self.lambda.to_string()),
            ("rho", join(&self.rho)),
            ("gamma", join(&self.gamma)),
            ("batch", self.batch.to_string()),
            ("alternations", self.alternations.to_string()),
            ("epochs", self.epochs.to_string()),
            ("inner_tol", self.inner_tol.to_string()),
            ("inner_max_iters", self.inner_max_iters.to_string()),
            ("outer_max_iters", self.outer_max_iters.to_string()),
            ("outer_rel_tol", self.outer_rel_tol.to_string()),
            ("w_steps", opt(self.w_steps.map(|s| s.to_string()))),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("lr", opt(self.lr.map(|s| s.to_string()))),
            ("data_dir", self.data_dir.display().to_string()),
            ("train_subset", opt(self.train_subset.map(|s| s.to_string()))),
            ("test_subset", opt(self.test_subset.map(|s| s.to_string()))),
            ("normalize", self.normalize.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ]
    }

    pub fn same_data(&self, other: &RunConfig) -> bool {
        let subset_seed = |c: &RunConfig| c.train_subset.map(|_| c.seed);
        self.data_dir == other.data_dir
            && self.train_subset == other.train_subset
            && self.test_subset == other.test_subset
            && self.normalize == other.normalize
            && subset_seed(self) == subset_seed(other)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses `key=value` from a `--set` flag.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("expected key=value, got '{s}'")))
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" => None,
        s => Some(s),
    }
}

fn bad(key: &str, e: impl fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {e}"))
}

fn number<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| bad(key, format!("cannot parse '{v}': {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items = v.split(',').map(|s| number(key, s.trim())).collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(bad(key, "empty list"));
    }
    Ok(items)
}

fn broadcast<T: Clone>(key: &str, items: &[T], n: usize) -> Result<Vec<T>> {
    match items.len() {
        1 => Ok(vec![items[0].clone(); n]),
        k if k == n => Ok(items.to_vec()),
        k => Err(bad(key, format!("expected 1 or {n} entries, got {k}"))),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults() {
        for mode in [Mode::LiftedFull, Mode::LiftedBatched, Mode::Baseline] {
            let cfg = RunConfig::defaults(mode);
            assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
        }
    }

    #[test]
    fn round_trip_every_field_set() {
        let text = "mode=lifted-full\nmethod=grid-a\narch=20-7-5-3\nactivation=relu,sigmoid\nloss=mse\n\
                    lambda=0.3\nrho=1e-4,0.5,2\ngamma=0\nbatch=17\nalternations=3\nepochs=2\ninner_tol=1e-9\n\
                    inner_max_iters=11\nouter_max_iters=7\nouter_rel_tol=0.001\nw_steps=4\nseed=99\n\
                    optimizer=sgd\nlr=0.125\ndata_dir=/tmp/a b\ntrain_subset=100\ntest_subset=50\n\
                    normalize=pixel\nout_dir=out/x\neval_every=3\nwall_clock=false\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.arch, vec![20, 7, 5, 3]);
        assert_eq!(cfg.activation, vec![ActivationKind::Relu, ActivationKind::Sigmoid]);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/a b"));
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
        let h = cfg.hyperparams(&cfg.spec().unwrap()).unwrap();
        assert_eq!(h.rho, vec![1e-4, 0.5, 2.0]);
        assert_eq!(h.gamma, vec![0.0; 3]);
        assert_eq!(h.batch_size, usize::MAX);
    }

    #[test]
    fn overrides_win_and_mode_sets_defaults() {
        let file = parse_pairs("mode=lifted-batched\nlambda=3 # comment\n\n# whole line\n").unwrap();
        let mut pairs = file.clone();
        pairs.push(("lambda".into(), "7".into()));
        pairs.push(("mode".into(), "lifted-full".into()));
        let cfg = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg.lambda, 7.0);
        assert_eq!(cfg.mode, Mode::LiftedFull);
        assert_eq!(cfg.rho, vec![1e-4]);
        assert_eq!(RunConfig::from_pairs(&file).unwrap().gamma, vec![1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("lambda").is_err());
        assert!(RunConfig::parse("colour=blue").is_err());
        assert!(RunConfig::parse("mode=other").is_err());
        assert!(RunConfig::parse("batch=-1").is_err());
        let cfg = RunConfig::parse("arch=4-3-3-2\nrho=1,2").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::parse("lambda=-1").unwrap().validate().is_err());
    }

    #[test]
    fn method_labels() {
        assert_eq!(RunConfig::defaults(Mode::LiftedFull).method_label(), "lifted");
        let mut b = RunConfig::defaults(Mode::Baseline);
        assert_eq!(b.method_label(), "adam");
        b.optimizer = Optimizer::Sgd;
        assert_eq!(b.method_label(), "sgd");
        assert_eq!(b.sgd(&b.spec().unwrap()).unwrap().learning_rate, 1e-2);
    }
}
