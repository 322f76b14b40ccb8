use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use lioncub::bench::{quant_bench, write_bench_csv, BenchConfig};
use lioncub::collectives::{SocketTransport, Topology, DEFAULT_TIMEOUT};
use lioncub::costmodel::{sweep, write_cost_csv, SweepGrid};
use lioncub::experiment::{run_inproc_with_timeout, run_worker, RunConfig};
use lioncub::selftest::{run_selftest, SelfTestOptions};
use lioncub::{Error, Result};

#[derive(Parser)]
#[command(name = "lioncub", version, about = "Distributed Lion experiments: training, quantizer bench, cost model, self-test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Inproc,
    Socket,
}

#[derive(Subcommand)]
enum Command {
    /// Run the teacher-student workload and write metrics.csv and report.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reseed the student, data, rounding and noise streams.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "inproc")]
        transport: TransportKind,
        /// Number of workers; overrides `clients` in the config.
        #[arg(long)]
        world: Option<usize>,
        /// This process's rank (socket transport only).
        #[arg(long, default_value_t = 0)]
        rank: usize,
        /// Base port; rank r listens on port + r.
        #[arg(long, default_value_t = 29500)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Collective timeout in seconds.
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// Compare quantizer sign fidelity on synthetic update vectors.
    QuantBench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for quant_bench.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep the alpha-beta cost model.
    Costmodel {
        /// JSON grid; individual flags override its axes.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for costmodel.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        workers: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        params: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        alpha_beta_ratios: Option<Vec<f64>>,
        #[arg(long)]
        word_bits: Option<u32>,
    },
    /// Check collectives, packing, rounding and gradients against oracles.
    Selftest {
        /// Corrupt packed payloads so the roundtrip check must fail.
        #[arg(long)]
        corrupt_pack: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn timeout_from(secs: Option<f64>) -> Result<Duration> {
    match secs {
        None => Ok(DEFAULT_TIMEOUT),
        Some(s) if s > 0.0 && s.is_finite() => Ok(Duration::from_secs_f64(s)),
        Some(s) => Err(Error::config(format!("timeout must be positive, got {s}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    transport: TransportKind,
    world: Option<usize>,
    rank: usize,
    port: u16,
    host: String,
    timeout: Option<f64>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.student_seed = s;
        cfg.data_seed = s.wrapping_add(1);
        cfg.quant_seed = s.wrapping_add(2);
        cfg.noise.per_client_seed = s.wrapping_add(3);
    }
    if let Some(p) = world {
        cfg.clients = p;
    }
    cfg.validate()?;
    let timeout = timeout_from(timeout)?;

    let report = match transport {
        TransportKind::Inproc => {
            if rank != 0 {
                return Err(Error::config("--rank only applies to the socket transport"));
            }
            Some(run_inproc_with_timeout(&cfg, timeout)?)
        }
        TransportKind::Socket => {
            if rank >= cfg.clients {
                return Err(Error::config(format!("rank {rank} is outside a world of {}", cfg.clients)));
            }
            let ep = SocketTransport::connect(rank, cfg.clients, &host, port, timeout)?;
            let mut topo = Topology::new(Box::new(ep)).with_timeout(timeout);
            run_worker(&cfg, &mut topo)?
        }
    };
    if let Some(report) = report {
        report.save(&out)?;
        println!(
            "final_loss={} mean_tie_rate={} mean_sign_match={} world={} transport={}",
            report.summary.final_loss,
            report.summary.mean_tie_rate,
            report.summary.mean_sign_match,
            report.environment.world_size,
            report.environment.transport
        );
    }
    Ok(())
}

fn write_csv_to(out: Option<PathBuf>, file: &str, write: impl FnOnce(&mut dyn io::Write) -> Result<()>) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let mut f = fs::File::create(dir.join(file))?;
            write(&mut f)
        }
        None => write(&mut io::stdout().lock()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            transport,
            world,
            rank,
            port,
            host,
            timeout,
        } => train(config, out, seed, transport, world, rank, port, host, timeout),
        Command::QuantBench { config, out, seed } => {
            let mut cfg: BenchConfig = match &config {
                Some(path) => read_json(path)?,
                None => BenchConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rows = quant_bench(&cfg)?;
            write_csv_to(out, "quant_bench.csv", |w| write_bench_csv(&rows, w))
        }
        Command::Costmodel {
            config,
            out,
            workers,
            params,
            betas,
            alpha_beta_ratios,
            word_bits,
        } => {
            let mut grid: SweepGrid = match &config {
                Some(path) => read_json(path)?,
                None => SweepGrid::default(),
            };
            if let Some(v) = workers {
                grid.workers = v;
            }
            if let Some(v) = params {
                grid.params = v;
            }
            if let Some(v) = betas {
                grid.betas = v;
            }
            if let Some(v) = alpha_beta_ratios {
                grid.alpha_beta_ratios = v;
            }
            if let Some(b) = word_bits {
                grid.word_bits = b;
            }
            let rows = sweep(&grid)?;
            write_csv_to(out, "costmodel.csv", |w| write_cost_csv(&rows, w))
        }
        Command::Selftest { corrupt_pack } => {
            let results = run_selftest(SelfTestOptions { corrupt_pack });
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                return Err(Error::Format(format!("{failed} self-test check(s) failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
