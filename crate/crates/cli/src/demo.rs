//! demo-tcp: one live round with the authority, the server and every user in
//! separate processes on localhost, checked against an in-process loopback run.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use basa::demo::{demo_task, run_loopback, server_role, user_role, DemoConfig, DemoKeys, DemoOutcome};
use basa::field::QuantizerConfig;
use basa::protocol::{unmask_aggregate, RoundResult};
use basa::transport::channel::{TcpAcceptor, TcpConnector};
use basa::transport::net::{serve_authority, SessionOutcome};
use basa::vault::{setup, AttributeAuthority, LinkKey, PublicParams};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::RunArgs;
use crate::error::CliError;

pub const LINK_KEY_ENV: &str = "BASA_LINK_KEY";
pub const DEMO_SUMMARY_FILE: &str = "demo_summary.json";

const LOCALHOST: &str = "127.0.0.1:0";

#[derive(Debug, Clone, Args)]
pub struct AaArgs {
    #[arg(long, default_value = LOCALHOST)]
    pub listen: SocketAddr,
}

#[derive(Debug, Clone, Args)]
pub struct ServerArgs {
    #[arg(long, default_value = LOCALHOST)]
    pub listen: SocketAddr,
    #[arg(long)]
    pub aa: SocketAddr,
    #[arg(long)]
    pub demo_config: String,
}

#[derive(Debug, Clone, Args)]
pub struct UserArgs {
    #[arg(long)]
    pub id: u32,
    #[arg(long)]
    pub server: SocketAddr,
    #[arg(long)]
    pub aa: SocketAddr,
    /// Public parameters announced by the authority, as JSON.
    #[arg(long)]
    pub pp: String,
    #[arg(long)]
    pub demo_config: String,
}

/// One committed round as reported by the server process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u64,
    pub contributors: u32,
    pub staleness_total: f64,
    pub aggregate: Vec<u32>,
    /// Bit patterns of the unmasked mean update.
    pub mean_update_bits: Vec<u64>,
}

impl RoundReport {
    fn new(r: &RoundResult, qcfg: &QuantizerConfig<f64>) -> Result<Self, CliError> {
        let mean = unmask_aggregate(r, qcfg).map_err(|e| CliError::Role(e.to_string()))?;
        Ok(Self {
            round_id: r.round_id,
            contributors: r.contributors,
            staleness_total: r.staleness_total,
            aggregate: r.aggregate.elems().to_vec(),
            mean_update_bits: mean.iter().map(|x| x.to_bits()).collect(),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct DemoSummary {
    pub config: DemoConfig,
    pub tcp: Vec<RoundReport>,
    pub loopback: Vec<RoundReport>,
    pub matches: bool,
}

pub fn demo_config(args: &RunArgs) -> Result<DemoConfig, CliError> {
    let d = DemoConfig::default();
    let buffer_size = args.single_buffer(d.buffer_size)?;
    let users = args.users.map_or(Ok(buffer_size), |n| {
        u32::try_from(n).map_err(|_| CliError::config("--users out of range"))
    })?;
    if users != buffer_size {
        return Err(CliError::config("demo-tcp runs a single round, so --users must equal --buffer"));
    }
    let cfg = DemoConfig {
        buffer_size,
        dim: args.dim.unwrap_or(d.dim),
        users,
        rounds: 1,
        seed: args.seed.unwrap_or(d.seed),
        modulus: args.modulus()?,
        timeout_s: args.timeout(d.timeout_s)?,
        scale: args.scale(d.scale)?,
        clip: args.clip(d.clip)?,
        train: args.train()?,
        server_lr: args.server_lr()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_config(json: &str) -> Result<DemoConfig, CliError> {
    let cfg: DemoConfig = serde_json::from_str(json)?;
    cfg.validate()?;
    Ok(cfg)
}

fn link_from_env() -> Result<LinkKey, CliError> {
    let hex_key = std::env::var(LINK_KEY_ENV).map_err(|_| CliError::Role(format!("{LINK_KEY_ENV} is not set")))?;
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CliError::Role(format!("{LINK_KEY_ENV} must hold 32 hex-encoded bytes")))?;
    Ok(LinkKey::from_bytes(bytes))
}

fn announce(line: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

/// Serves key requests until standard input closes.
pub fn authority_main(args: &AaArgs) -> Result<(), CliError> {
    let link = link_from_env()?;
    let (pp, mk) = setup("demo");
    let acceptor = TcpAcceptor::bind(args.listen).map_err(|e| CliError::Role(e.to_string()))?;
    let addr = acceptor.local_addr().map_err(|e| CliError::Role(e.to_string()))?;
    announce(&format!("READY {addr} {}", serde_json::to_string(&pp)?))?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            let _ = std::io::copy(&mut std::io::stdin().lock(), &mut std::io::sink());
            stop.store(true, Ordering::Relaxed);
        });
    }
    let aa = Arc::new(AttributeAuthority::new(pp, mk, link));
    serve_authority(aa, acceptor, &stop).map_err(|e| CliError::Role(e.to_string()))
}

pub fn server_main(args: &ServerArgs) -> Result<(), CliError> {
    let cfg = parse_config(&args.demo_config)?;
    let link = link_from_env()?;
    let acceptor = TcpAcceptor::bind(args.listen).map_err(|e| CliError::Role(e.to_string()))?;
    let addr = acceptor.local_addr().map_err(|e| CliError::Role(e.to_string()))?;
    announce(&format!("READY {addr}"))?;
    let results = server_role(&cfg, link, acceptor, TcpConnector::new(args.aa), Duration::from_secs(120), |o| match o {
        SessionOutcome::Committed { slot, upload } => log::info!("slot {slot} committed {} bytes", upload.len()),
        other => log::warn!("session ended: {other:?}"),
    })?;
    let qcfg = cfg.quantizer().map_err(|e| CliError::Role(e.to_string()))?;
    let reports = results.iter().map(|r| RoundReport::new(r, &qcfg)).collect::<Result<Vec<_>, _>>()?;
    announce(&format!("RESULT {}", serde_json::to_string(&reports)?))
}

pub fn user_main(args: &UserArgs) -> Result<(), CliError> {
    let cfg = parse_config(&args.demo_config)?;
    let pp: PublicParams = serde_json::from_str(&args.pp)?;
    if args.id >= cfg.users {
        return Err(CliError::Role(format!("user id {} out of range", args.id)));
    }
    let task = demo_task(&cfg)?;
    let (grant, _) = user_role(&cfg, &task, args.id, &pp, &TcpConnector::new(args.server), TcpConnector::new(args.aa))?;
    log::info!("user {} uploaded into slot {}", args.id, grant.slot);
    Ok(())
}

/// Kills every child that has not been reaped when dropped.
struct Children(Vec<Child>);

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if matches!(c.try_wait(), Ok(None)) {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn read_tagged(out: &mut BufReader<ChildStdout>, tag: &str, who: &str) -> Result<String, CliError> {
    let mut line = String::new();
    loop {
        line.clear();
        if out.read_line(&mut line)? == 0 {
            return Err(CliError::Role(format!("{who} exited before reporting {tag}")));
        }
        if let Some(rest) = line.trim_end().strip_prefix(tag) {
            return Ok(rest.trim_start().to_string());
        }
    }
}

fn loopback_reports(cfg: &DemoConfig, out: &DemoOutcome) -> Result<Vec<RoundReport>, CliError> {
    let qcfg = cfg.quantizer().map_err(|e| CliError::Role(e.to_string()))?;
    out.results.iter().map(|r| RoundReport::new(r, &qcfg)).collect()
}

fn check_success(child: &mut Child, who: &str) -> Result<(), CliError> {
    let status = child.wait()?;
    if status.success() {
        Ok(())
    } else {
        Err(CliError::Role(format!("{who} failed with {status}")))
    }
}

pub fn run(args: &RunArgs) -> Result<(DemoSummary, PathBuf), CliError> {
    let cfg = demo_config(args)?;
    let exe = std::env::current_exe()?;
    let link = LinkKey::random(&mut rand::rng());
    let link_hex = hex::encode(link.as_bytes());
    let cfg_json = serde_json::to_string(&cfg)?;
    let mut children = Children(Vec::new());

    let mut aa = Command::new(&exe)
        .arg("aa")
        .env(LINK_KEY_ENV, &link_hex)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()?;
    let mut aa_out = BufReader::new(aa.stdout.take().expect("piped stdout"));
    let aa_stdin = aa.stdin.take();
    children.0.push(aa);
    let ready = read_tagged(&mut aa_out, "READY", "authority")?;
    let (aa_addr, pp_json) = ready
        .split_once(' ')
        .ok_or_else(|| CliError::Role("malformed authority announcement".into()))?;
    let aa_addr = aa_addr.to_string();

    let mut server = Command::new(&exe)
        .args(["server", "--aa", &aa_addr, "--demo-config", &cfg_json])
        .env(LINK_KEY_ENV, &link_hex)
        .stdout(Stdio::piped())
        .spawn()?;
    let mut server_out = BufReader::new(server.stdout.take().expect("piped stdout"));
    children.0.push(server);
    let server_addr = read_tagged(&mut server_out, "READY", "server")?;

    let first_user = children.0.len();
    for id in 0..cfg.users {
        let user = Command::new(&exe)
            .args(["user", "--id", &id.to_string(), "--server", &server_addr, "--aa", &aa_addr])
            .args(["--pp", pp_json, "--demo-config", &cfg_json])
            .stdout(Stdio::null())
            .spawn()?;
        children.0.push(user);
    }
    for (i, child) in children.0[first_user..].iter_mut().enumerate() {
        check_success(child, &format!("user {i}"))?;
    }
    let result = read_tagged(&mut server_out, "RESULT", "server")?;
    let mut rest = String::new();
    server_out.read_to_string(&mut rest)?;
    check_success(&mut children.0[1], "server")?;
    drop(aa_stdin);
    check_success(&mut children.0[0], "authority")?;

    let tcp: Vec<RoundReport> = serde_json::from_str(&result)?;
    let loopback = loopback_reports(&cfg, &run_loopback(&cfg, DemoKeys::from_seed(cfg.seed))?)?;
    let matches = !tcp.is_empty() && tcp == loopback;
    let summary = DemoSummary {
        config: cfg,
        tcp,
        loopback,
        matches,
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join(DEMO_SUMMARY_FILE);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok((summary, path))
}
