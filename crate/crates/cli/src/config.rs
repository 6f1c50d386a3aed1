//! Run flags and the flat `key = value` config file that mirrors them.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use basa::afl::{StopCondition, TrainConfig};
use basa::field::Modulus;
use basa::sim::geometric_steps;
use basa::staleness::StalenessFn;
use clap::{Args, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunMode {
    BasaAfl,
    NosaAfl,
    SyncFedavg,
    DemoTcp,
    BenchUserCost,
}

/// Every flag can also be written in a config file as `flag-name = value`;
/// boolean flags take `true` or `false`. Flags on the command line win.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key = value file with defaults for any flag below.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: RunMode,
    /// Total number of users N.
    #[arg(long)]
    pub users: Option<usize>,
    /// Users training at once.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Buffer size K; bench mode also accepts `a..b` (5 geometric steps) or `a,b,c`.
    #[arg(long)]
    pub buffer: Option<String>,
    /// Scale of the exponential straggler delay, seconds.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Fixed part of every local training run, seconds.
    #[arg(long)]
    pub base_train_time: Option<f64>,
    /// Model dimension d, bias included.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Prime field modulus q.
    #[arg(long)]
    pub modulus: Option<u32>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub server_lr: Option<f64>,
    #[arg(long)]
    pub local_steps: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `constant` or `poly:<exponent>`.
    #[arg(long)]
    pub staleness: Option<String>,
    /// Upload deadline after a grant, seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Probability that an admitted user drops out.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub samples_per_user: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target test accuracy in (0, 1].
    #[arg(long)]
    pub target: Option<f64>,
    /// Simulated time budget, seconds.
    #[arg(long)]
    pub max_time: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<u64>,
    /// Per-round protocol overhead charged to the synchronous baseline, seconds.
    #[arg(long)]
    pub sa_overhead: Option<f64>,
    /// Measure the cost model on this host instead of using fixed constants.
    #[arg(long)]
    pub calibrate_cost: bool,
    /// Charge nothing for protocol work.
    #[arg(long, conflicts_with = "calibrate_cost")]
    pub zero_cost: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Splices the entries of a `--config` file into `argv` right after the
/// `run` subcommand so that later command-line flags override them.
pub fn expand_config_file(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(run_at) = argv.iter().position(|a| a == "run") else {
        return Ok(argv);
    };
    let mut path = None;
    let mut i = run_at + 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::ConfigFile {
        path: path.clone(),
        source,
    })?;
    let mut out: Vec<OsString> = argv[..=run_at].to_vec();
    out.extend(config_file_args(&text, &path)?);
    out.extend(argv[run_at + 1..].iter().cloned());
    Ok(out)
}

const BOOL_KEYS: [&str; 2] = ["calibrate-cost", "zero-cost"];

fn config_file_args(text: &str, path: &Path) -> Result<Vec<OsString>, CliError> {
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| CliError::config(format!("{}:{}: {why}", path.display(), n + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(bad("invalid key"));
        }
        if BOOL_KEYS.contains(&key.as_str()) {
            match value {
                "true" => args.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(bad("expected true or false")),
            }
        } else {
            args.push(format!("--{key}").into());
            args.push(value.into());
        }
    }
    Ok(args)
}

/// Parses `a`, `a,b,c` or `a..b`; the last expands to five geometric steps.
pub fn parse_sweep(s: &str) -> Result<Vec<u64>, CliError> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|_| CliError::config(format!("invalid buffer size `{t}`")))
    };
    let values = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a == 0 || b < a {
            return Err(CliError::config(format!("invalid sweep `{s}`")));
        }
        geometric_steps(a, b, 5)
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.iter().any(|&k| k == 0 || k > u32::MAX as u64) {
        return Err(CliError::config("buffer sizes must be between 1 and 2^32 - 1"));
    }
    Ok(values)
}

pub fn parse_staleness(s: &str) -> Result<StalenessFn, CliError> {
    match s {
        "constant" => Ok(StalenessFn::Constant),
        "poly" | "polynomial" => Ok(StalenessFn::default()),
        _ => {
            let exponent = s
                .strip_prefix("poly:")
                .and_then(|e| e.parse::<f64>().ok())
                .filter(|e| e.is_finite() && *e >= 0.0)
                .ok_or_else(|| CliError::config(format!("invalid staleness `{s}`, expected constant or poly:<exponent>")))?;
            Ok(StalenessFn::Polynomial { exponent })
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(format!("--{name} must be positive")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<f64, CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(format!("--{name} must be non-negative")))
    }
}

impl RunArgs {
    pub fn single_buffer(&self, default: u32) -> Result<u32, CliError> {
        match &self.buffer {
            None => Ok(default),
            Some(s) => match parse_sweep(s)?.as_slice() {
                [k] => Ok(*k as u32),
                _ => Err(CliError::config("this mode takes a single --buffer value")),
            },
        }
    }

    pub fn modulus(&self) -> Result<Modulus, CliError> {
        match self.modulus {
            None => Ok(Modulus::default()),
            Some(q) => Modulus::new(q).map_err(|e| CliError::config(format!("--modulus: {e}"))),
        }
    }

    pub fn beta(&self) -> Result<f64, CliError> {
        non_negative("beta", self.beta.unwrap_or(0.0))
    }

    pub fn base_train_time(&self, default: f64) -> Result<f64, CliError> {
        non_negative("base-train-time", self.base_train_time.unwrap_or(default))
    }

    pub fn scale(&self, default: f64) -> Result<f64, CliError> {
        positive("scale", self.scale.unwrap_or(default))
    }

    pub fn clip(&self, default: f64) -> Result<f64, CliError> {
        positive("clip", self.clip.unwrap_or(default))
    }

    pub fn server_lr(&self) -> Result<f64, CliError> {
        positive("server-lr", self.server_lr.unwrap_or(1.0))
    }

    pub fn timeout(&self, default: f64) -> Result<f64, CliError> {
        positive("timeout", self.timeout.unwrap_or(default))
    }

    pub fn dropout(&self) -> Result<f64, CliError> {
        let p = self.dropout.unwrap_or(0.0);
        if (0.0..1.0).contains(&p) {
            Ok(p)
        } else {
            Err(CliError::config("--dropout must lie in [0, 1)"))
        }
    }

    pub fn sa_overhead(&self) -> Result<f64, CliError> {
        non_negative("sa-overhead", self.sa_overhead.unwrap_or(0.0))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: positive("lr", self.lr.unwrap_or(d.lr))?,
            local_steps: self.local_steps.unwrap_or(d.local_steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
        };
        if cfg.batch_size == 0 {
            return Err(CliError::config("--batch-size must be positive"));
        }
        Ok(cfg)
    }

    pub fn staleness(&self) -> Result<StalenessFn, CliError> {
        self.staleness.as_deref().map_or(Ok(StalenessFn::default()), parse_staleness)
    }

    pub fn stop(&self) -> Result<StopCondition, CliError> {
        let d = StopCondition::default();
        let target = self.target.or(d.target_accuracy);
        if let Some(t) = target {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CliError::config("--target must lie in (0, 1]"));
            }
        }
        Ok(StopCondition {
            target_accuracy: target,
            max_time_s: positive("max-time", self.max_time.unwrap_or(d.max_time_s))?,
            max_rounds: self.max_rounds.or(d.max_rounds),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_expand_geometrically() {
        assert_eq!(parse_sweep("10..1000").unwrap(), vec![10, 32, 100, 316, 1000]);
        assert_eq!(parse_sweep("3,5").unwrap(), vec![3, 5]);
        assert_eq!(parse_sweep("7").unwrap(), vec![7]);
        for bad in ["0", "10..5", "x", "0..10", ""] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn staleness_families_parse() {
        assert_eq!(parse_staleness("constant").unwrap(), StalenessFn::Constant);
        assert_eq!(parse_staleness("poly:1").unwrap(), StalenessFn::Polynomial { exponent: 1.0 });
        assert_eq!(parse_staleness("poly").unwrap(), StalenessFn::default());
        assert!(parse_staleness("poly:-1").is_err());
        assert!(parse_staleness("hinge").is_err());
    }

    #[test]
    fn config_entries_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nmode = basa-afl\nusers = 8 # trailing\nserver_lr = 0.5\ncalibrate-cost = false\nzero-cost = true\n").unwrap();
        let argv: Vec<OsString> = ["basa", "run", "--config", path.to_str().unwrap(), "--users", "4"]
            .iter()
            .map(OsString::from)
            .collect();
        let out = expand_config_file(argv).unwrap();
        let out: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(
            out[2..9],
            ["--mode", "basa-afl", "--users", "8", "--server-lr", "0.5", "--zero-cost"].map(String::from)
        );
        assert_eq!(out.last().unwrap(), "4");
    }

    #[test]
    fn malformed_config_lines_are_reported_with_position() {
        let err = config_file_args("mode = basa-afl\nusers 3\n", Path::new("x.conf")).unwrap_err();
        assert_eq!(err.to_string(), "x.conf:2: expected key = value");
        assert!(config_file_args("zero-cost = yes\n", Path::new("x")).is_err());
    }
}
