//! Simulated training runs: basa-afl, nosa-afl and sync-fedavg.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use basa::afl::{GlobalModel, MetricRow, Mode, SyntheticTask, TaskConfig};
use basa::sim::{run_simulation, CostModel, DelayModel, Observer, SimConfig, SimReport, TraceEvent};
use serde::Serialize;

use crate::config::{RunArgs, RunMode};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

const DEFAULT_DIM: usize = 50;

pub fn sim_config(args: &RunArgs) -> Result<(TaskConfig, SimConfig), CliError> {
    let mode = match args.mode {
        RunMode::BasaAfl => Mode::BasaAfl,
        RunMode::NosaAfl => Mode::NosaAfl,
        RunMode::SyncFedavg => Mode::SyncFedavg,
        _ => unreachable!("not a training mode"),
    };
    let users = args.users.ok_or_else(|| CliError::config("--users is required for training modes"))?;
    if users == 0 {
        return Err(CliError::config("--users must be positive"));
    }
    let dim = args.dim.unwrap_or(DEFAULT_DIM);
    if dim < 2 {
        return Err(CliError::config("--dim must be at least 2"));
    }
    let d = SimConfig::default();
    let buffer_size = args.single_buffer(d.buffer_size)?;
    if buffer_size as usize > users {
        return Err(CliError::config("--buffer must not exceed --users"));
    }
    let concurrency = args.concurrency.unwrap_or(d.concurrency.min(users));
    let cost = if args.zero_cost {
        CostModel::zero()
    } else if args.calibrate_cost {
        CostModel::calibrate()
    } else {
        CostModel::default()
    };
    let cfg = SimConfig {
        mode,
        concurrency,
        buffer_size,
        delay: DelayModel::new(args.beta()?, args.base_train_time(d.delay.base_train_time)?),
        cost,
        timeout_s: args.timeout(d.timeout_s)?,
        dropout: args.dropout()?,
        latency_s: d.latency_s,
        server_lr: args.server_lr()?,
        train: args.train()?,
        staleness: args.staleness()?,
        modulus: args.modulus()?,
        scale: args.scale(d.scale)?,
        clip: args.clip(d.clip)?,
        cohort: concurrency,
        sa_overhead_s: args.sa_overhead()?,
        seed: args.seed.unwrap_or(0),
        stop: args.stop()?,
    };
    let task = TaskConfig {
        features: dim - 1,
        users,
        samples_per_user: args.samples_per_user.unwrap_or(TaskConfig::default().samples_per_user),
        seed: cfg.seed,
        ..TaskConfig::default()
    };
    Ok((task, cfg))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

struct Writers {
    metrics: csv::Writer<BufWriter<File>>,
    trace: BufWriter<File>,
    error: Option<CliError>,
}

impl Writers {
    fn record(&mut self, r: Result<(), CliError>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl Observer<f64> for Writers {
    fn metric(&mut self, row: &MetricRow) {
        let r = self.metrics.serialize(row).map_err(CliError::from);
        self.record(r);
    }

    fn trace(&mut self, event: &TraceEvent) {
        let r = serde_json::to_writer(&mut self.trace, event)
            .map_err(CliError::from)
            .and_then(|()| Ok(self.trace.write_all(b"\n")?));
        self.record(r);
    }

    fn commit(&mut self, _model: &GlobalModel<f64>, _staleness_total: f64) {}
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    report: &'a SimReport,
    users: usize,
    config: &'a SimConfig,
}

pub struct TrainOutput {
    pub report: SimReport,
    pub summary_path: PathBuf,
}

pub fn run(args: &RunArgs) -> Result<TrainOutput, CliError> {
    let (task_cfg, cfg) = sim_config(args)?;
    let task = SyntheticTask::<f64>::generate(&task_cfg).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Output {
        path: args.out_dir.clone(),
        source,
    })?;
    let mut w = Writers {
        metrics: csv::Writer::from_writer(create(&args.out_dir.join(METRICS_FILE))?),
        trace: create(&args.out_dir.join(TRACE_FILE))?,
        error: None,
    };
    let report = run_simulation(&task, &cfg, &mut w)?;
    if let Some(e) = w.error {
        return Err(e);
    }
    w.metrics.flush()?;
    w.trace.flush()?;
    let summary_path = args.out_dir.join(SUMMARY_FILE);
    let mut out = create(&summary_path)?;
    serde_json::to_writer_pretty(
        &mut out,
        &Summary {
            report: &report,
            users: task_cfg.users,
            config: &cfg,
        },
    )?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(TrainOutput { report, summary_path })
}
