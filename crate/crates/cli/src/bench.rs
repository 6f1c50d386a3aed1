//! Per-user and per-round protocol cost sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use basa::sim::{aggregate_round_cost, measure_user_protocol_cost, polyfit, CostModel};
use serde::Serialize;

use crate::config::{parse_sweep, RunArgs};
use crate::error::CliError;

pub const COST_FILE: &str = "user_cost.csv";
pub const BENCH_SUMMARY_FILE: &str = "bench_summary.json";

const DEFAULT_SWEEP: &str = "10..1000";
const DEFAULT_DIM: usize = 100_000;
const DEFAULT_USERS: [usize; 3] = [100, 500, 1000];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub buffer_size: u32,
    pub dim: usize,
    pub users: usize,
    pub per_user_cost_s: f64,
    pub round_cost_s: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub cost_model: CostModel,
    pub dim: usize,
    pub buffer_sizes: Vec<u32>,
    pub users: Vec<usize>,
    /// Per-user cost is identical for every user count at each K.
    pub flat_in_users: bool,
    /// R² of a degree-1 fit of per-user cost against K.
    pub per_user_linear_r2: Option<f64>,
    /// R² of a degree-2 fit of round cost against K.
    pub round_quadratic_r2: Option<f64>,
}

pub fn sweep(buffers: &[u32], dim: usize, users: &[usize], cost: &CostModel) -> (Vec<CostRow>, BenchSummary) {
    let mut rows = Vec::new();
    for &k in buffers {
        for &n in users {
            rows.push(CostRow {
                buffer_size: k,
                dim,
                users: n,
                per_user_cost_s: measure_user_protocol_cost(k, dim, n, cost),
                round_cost_s: aggregate_round_cost(k, dim, cost),
            });
        }
    }
    let flat_in_users = buffers.iter().all(|&k| {
        let mut costs = rows.iter().filter(|r| r.buffer_size == k).map(|r| r.per_user_cost_s);
        let first = costs.next();
        costs.all(|c| Some(c) == first)
    });
    let xs: Vec<f64> = buffers.iter().map(|&k| k as f64).collect();
    let per_user: Vec<f64> = buffers.iter().map(|&k| measure_user_protocol_cost(k, dim, users[0], cost)).collect();
    let round: Vec<f64> = buffers.iter().map(|&k| aggregate_round_cost(k, dim, cost)).collect();
    let summary = BenchSummary {
        cost_model: *cost,
        dim,
        buffer_sizes: buffers.to_vec(),
        users: users.to_vec(),
        flat_in_users,
        per_user_linear_r2: (xs.len() > 2).then(|| polyfit(&xs, &per_user, 1)).flatten().map(|f| f.r_squared),
        round_quadratic_r2: (xs.len() > 3).then(|| polyfit(&xs, &round, 2)).flatten().map(|f| f.r_squared),
    };
    (rows, summary)
}

pub fn run(args: &RunArgs) -> Result<(BenchSummary, PathBuf), CliError> {
    let buffers: Vec<u32> = parse_sweep(args.buffer.as_deref().unwrap_or(DEFAULT_SWEEP))?
        .into_iter()
        .map(|k| k as u32)
        .collect();
    let dim = args.dim.unwrap_or(DEFAULT_DIM);
    if dim == 0 {
        return Err(CliError::config("--dim must be positive"));
    }
    let users = match args.users {
        Some(0) => return Err(CliError::config("--users must be positive")),
        Some(n) => vec![n],
        None => DEFAULT_USERS.to_vec(),
    };
    let cost = if args.zero_cost {
        CostModel::zero()
    } else if args.calibrate_cost {
        CostModel::calibrate()
    } else {
        CostModel::default()
    };
    let (rows, summary) = sweep(&buffers, dim, &users, &cost);
    std::fs::create_dir_all(&args.out_dir)?;
    let csv_path = args.out_dir.join(COST_FILE);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary_path = args.out_dir.join(BENCH_SUMMARY_FILE);
    let mut out = BufWriter::new(File::create(&summary_path)?);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok((summary, csv_path))
}
