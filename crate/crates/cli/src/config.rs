//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! Every key is listed in [`KEYS`] with its default, and unknown keys are
//! rejected. Command-line flags override the path and count keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mnnh2::model::{Architecture, NetworkConfig, PlainCnnConfig};
use mnnh2::pde::{Problem, ProblemSpec};
use mnnh2::train::{NadamConfig, TrainConfig};

use crate::CliError;

/// A documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
    }
}

/// All accepted keys, grouped as they appear in [`RunConfig::template`].
pub const KEYS: &[Key] = &[
    key("problem", "nlse", "solution map to sample: nlse, rte or ks"),
    key("n", "80", "grid points per axis"),
    key(
        "n_g",
        "2",
        "Gaussian bumps per sample (electron count for ks)",
    ),
    key("beta", "10", "nlse cubic coefficient"),
    key("mu_a", "0.2", "rte absorption coefficient"),
    key("source", "1", "rte constant source term"),
    key("sigma", "0.05", "ks well width"),
    key("time_step", "0.01", "nlse gradient-flow time step"),
    key(
        "tol",
        "1e-10",
        "nlse stopping tolerance on successive iterates",
    ),
    key("max_steps", "200000", "nlse iteration cap"),
    key(
        "count",
        "2000",
        "samples written by gen when --count is absent",
    ),
    key("data_seed", "0", "generation seed when --seed is absent"),
    key("architecture", "mnn", "network family: mnn or plain_cnn"),
    key("dim", "1", "spatial dimension of the data (1 or 2)"),
    key("levels", "4", "mnn tree depth L; the leaf size is n / 2^L"),
    key("rank", "6", "mnn channel rank r"),
    key("k_layers", "5", "mnn kernel layers per level K"),
    key("sharing", "cnn", "mnn weight sharing: lc, cnn or mixed"),
    key("padding", "periodic", "mnn padding: periodic or zero"),
    key("adjacent_band", "1", "mnn near-field band"),
    key("coarse_band", "2", "mnn interaction band at level 2"),
    key("band", "3", "mnn interaction band above level 2"),
    key(
        "activation",
        "relu",
        "kernel-layer activation: relu or linear",
    ),
    key(
        "transfer_activation",
        "linear",
        "mnn restriction/interpolation activation",
    ),
    key("hidden_layers", "6", "plain_cnn hidden layers"),
    key("channels", "10", "plain_cnn channels"),
    key("window", "11", "plain_cnn window width"),
    key(
        "init_std",
        "0.1",
        "standard deviation of the initial weights",
    ),
    key("bias", "true", "whether layers carry biases"),
    key("init_seed", "0", "seed of the weight initialization"),
    key("epochs", "500", "total training epochs"),
    key(
        "batch_size",
        "auto",
        "minibatch size; auto means ceil(count / 100)",
    ),
    key("shuffle", "true", "reshuffle the training set every epoch"),
    key("train_seed", "0", "seed of the epoch shuffles"),
    key(
        "eval_every",
        "10",
        "epochs between metric rows (the last epoch is always logged)",
    ),
    key("lr", "0.001", "Nadam learning rate"),
    key("beta1", "0.9", "Nadam first-moment decay"),
    key("beta2", "0.999", "Nadam second-moment decay"),
    key("eps", "1e-8", "Nadam denominator offset"),
    key("schedule_decay", "0.004", "Nadam momentum schedule decay"),
    key("precision", "f64", "training precision: f32 or f64"),
    key("data", "", "training dataset path"),
    key("test_data", "", "test dataset path (optional)"),
    key(
        "out",
        "",
        "output path (dataset for gen, checkpoint for train)",
    ),
    key(
        "metrics",
        "",
        "metrics CSV path; empty means the checkpoint path with .csv",
    ),
    key(
        "resume",
        "",
        "checkpoint to resume training from (optional)",
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision '{other}'")),
        }
    }
}

impl Precision {
    pub fn bytes(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub count: usize,
    pub data_seed: u64,
    pub architecture: Architecture,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub nadam: NadamConfig,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("built-in defaults are valid")
    }
}

struct Values(BTreeMap<&'static str, String>);

impl Values {
    fn raw(&self, k: &str) -> &str {
        self.0.get(k).map(String::as_str).unwrap_or("")
    }

    fn get<V: FromStr>(&self, k: &str) -> Result<V, CliError> {
        let v = self.raw(k);
        v.parse()
            .map_err(|_| CliError::Usage(format!("bad value '{v}' for config key {k}")))
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        let v = self.raw(k);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

impl RunConfig {
    /// Parses configuration text on top of the defaults in [`KEYS`].
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = Values(
            KEYS.iter()
                .map(|k| (k.name, k.default.to_string()))
                .collect(),
        );
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line
                .split_once('#')
                .map_or(line, |(before, _)| before)
                .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let k = k.trim();
            let known = KEYS.iter().find(|key| key.name == k).ok_or_else(|| {
                CliError::Usage(format!("config line {}: unknown key '{k}'", lineno + 1))
            })?;
            if let Some(first) = seen.insert(known.name, lineno + 1) {
                return Err(CliError::Usage(format!(
                    "config line {}: key '{k}' already set on line {first}",
                    lineno + 1
                )));
            }
            values.0.insert(known.name, v.trim().to_string());
        }
        Self::from_values(&values)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_values(v: &Values) -> Result<Self, CliError> {
        let problem: Problem = v.get("problem")?;
        let problem = ProblemSpec {
            problem,
            n: v.get("n")?,
            n_g: v.get("n_g")?,
            beta: v.get("beta")?,
            mu_a: v.get("mu_a")?,
            source: v.get("source")?,
            sigma: v.get("sigma")?,
            time_step: v.get("time_step")?,
            tol: v.get("tol")?,
            max_steps: v.get("max_steps")?,
        };
        problem.validate()?;
        let n = problem.n;
        let dim: usize = v.get("dim")?;
        let architecture = match v.raw("architecture") {
            "mnn" => {
                let levels: usize = v.get("levels")?;
                let blocks = 1usize.checked_shl(levels as u32).unwrap_or(0);
                if blocks == 0 || !n.is_multiple_of(blocks) {
                    return Err(CliError::Usage(format!(
                        "n = {n} is not divisible by 2^levels with levels = {levels}"
                    )));
                }
                let cfg = NetworkConfig {
                    dim,
                    n,
                    levels,
                    leaf_size: n / blocks,
                    rank: v.get("rank")?,
                    k_layers: v.get("k_layers")?,
                    sharing: v.get("sharing")?,
                    padding: v.get("padding")?,
                    adjacent_band: v.get("adjacent_band")?,
                    coarse_band: v.get("coarse_band")?,
                    band: v.get("band")?,
                    activation: v.get("activation")?,
                    transfer_activation: v.get("transfer_activation")?,
                    init_std: v.get("init_std")?,
                    bias: v.get("bias")?,
                };
                cfg.validate()?;
                Architecture::Multiscale(cfg)
            }
            "plain_cnn" => Architecture::PlainCnn(PlainCnnConfig {
                dim,
                n,
                hidden_layers: v.get("hidden_layers")?,
                channels: v.get("channels")?,
                window: v.get("window")?,
                activation: v.get("activation")?,
                init_std: v.get("init_std")?,
                bias: v.get("bias")?,
            }),
            other => return Err(CliError::Usage(format!("unknown architecture '{other}'"))),
        };
        let batch_size = match v.raw("batch_size") {
            "auto" => None,
            _ => Some(v.get("batch_size")?),
        };
        let train = TrainConfig {
            epochs: v.get("epochs")?,
            batch_size,
            seed: v.get("train_seed")?,
            shuffle: v.get("shuffle")?,
            eval_every: v.get("eval_every")?,
        };
        if train.eval_every == 0 {
            return Err(CliError::Usage("eval_every must be positive".into()));
        }
        let nadam = NadamConfig {
            lr: v.get("lr")?,
            beta1: v.get("beta1")?,
            beta2: v.get("beta2")?,
            eps: v.get("eps")?,
            schedule_decay: v.get("schedule_decay")?,
        };
        let precision = v.raw("precision").parse().map_err(CliError::Usage)?;
        Ok(RunConfig {
            problem,
            count: v.get("count")?,
            data_seed: v.get("data_seed")?,
            architecture,
            init_seed: v.get("init_seed")?,
            train,
            nadam,
            precision,
            data: v.path("data"),
            test_data: v.path("test_data"),
            out: v.path("out"),
            metrics: v.path("metrics"),
            resume: v.path("resume"),
        })
    }

    /// The default configuration as a commented file.
    pub fn template() -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "# {}", k.help);
            let _ = writeln!(s, "{} = {}", k.name, k.default);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mnnh2::model::SharingMode;
    use mnnh2::Padding;

    #[test]
    fn empty_text_gives_documented_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.problem, ProblemSpec::nlse(80));
        assert_eq!(c.count, 2000);
        let Architecture::Multiscale(net) = &c.architecture else {
            panic!("default architecture is mnn")
        };
        assert_eq!(
            (net.levels, net.leaf_size, net.rank, net.k_layers),
            (4, 5, 6, 5)
        );
        assert_eq!(net.sharing, SharingMode::Cnn);
        assert_eq!(c.train.epochs, 500);
        assert_eq!(c.train.batch_size, None);
        assert_eq!(c.nadam, NadamConfig::default());
        assert_eq!(c.precision, Precision::F64);
        assert!(c.data.is_none() && c.resume.is_none());
    }

    #[test]
    fn template_parses_back_to_defaults() {
        assert_eq!(
            RunConfig::parse(&RunConfig::template()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# an rte run\nproblem = rte   # slab\nsharing=mixed\npadding = zero\nrank = 8\nbatch_size = 40\n\nprecision=f32\ndata = /tmp/x.bin\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.problem.problem, Problem::Rte);
        let Architecture::Multiscale(net) = &c.architecture else {
            panic!()
        };
        assert_eq!(
            (net.sharing, net.padding, net.rank),
            (SharingMode::Mixed, Padding::Zero, 8)
        );
        assert_eq!(c.train.batch_size, Some(40));
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.data.as_deref(), Some(Path::new("/tmp/x.bin")));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        for bad in [
            "colour = blue",
            "rank = 2\nrank = 3",
            "rank 4",
            "rank = four",
            "levels = 3\nn = 81",
            "architecture = rnn",
            "problem = heat",
            "precision = f16",
            "eval_every = 0",
        ] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn plain_cnn_architecture() {
        let c = RunConfig::parse("architecture = plain_cnn\nwindow = 7").unwrap();
        let Architecture::PlainCnn(p) = c.architecture else {
            panic!()
        };
        assert_eq!((p.n, p.hidden_layers, p.channels, p.window), (80, 6, 10, 7));
    }
}
