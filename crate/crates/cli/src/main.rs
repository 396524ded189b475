use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use clockwork::harness::{self, plot, telemetry, ExperimentConfig};
use clockwork::profiles::load_catalog;
use clockwork::time::{Clock, ClockMode, Nanos, SimClock, WallClock};
use clockwork::worker::{server, JitterSpec, Worker, WorkerConfig};
use clockwork::workload::{synthetic_maf, InvocationTrace, WorkloadSpec};
use clockwork::ModelCatalog;

#[derive(Parser)]
#[command(name = "clockwork", version, about = "Predictable DNN serving: controller, emulated workers and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its logs and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sim")]
        mode: ClockMode,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Replace the config's client groups with those in this file.
        #[arg(long)]
        workload: Option<PathBuf>,
        /// Multiply every open-loop rate and trace scale.
        #[arg(long)]
        scale: Option<f64>,
        /// Remote workers for wall-clock runs, in worker id order.
        #[arg(long = "worker", value_delimiter = ',')]
        workers: Vec<SocketAddr>,
        #[arg(long)]
        plots: bool,
    },
    /// Recompute a summary from logs written by `run`.
    Summarize {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        interval_s: f64,
        #[arg(long, default_value_t = 0.0)]
        warmup_s: f64,
    },
    /// Render SVG figures from a summary.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve one emulated worker over TCP.
    Worker {
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: SocketAddr,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        id: u32,
        #[arg(long, default_value_t = 1)]
        gpus: u32,
        #[arg(long, default_value_t = clockwork::worker::DEFAULT_PAGES_PER_GPU)]
        pages_per_gpu: u32,
        #[arg(long, default_value = "wall")]
        clock: ClockMode,
        #[arg(long, default_value = "none")]
        jitter: JitterSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the worker's action results here on exit.
        #[arg(long)]
        telemetry: Option<PathBuf>,
    },
    /// Write a synthetic invocation trace.
    GenTrace {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workloads: u32,
        #[arg(long)]
        minutes: u32,
        #[arg(long, default_value_t = 10.0)]
        mean_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            out,
            workload,
            scale,
            workers,
            plots,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(path) = workload {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let spec: WorkloadSpec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let dir = path.parent().unwrap_or(std::path::Path::new("."));
                cfg.groups = spec.groups;
                for g in &mut cfg.groups {
                    if let Some(t) = &mut g.trace {
                        *t = dir.join(&*t);
                    }
                }
            }
            if let Some(k) = scale {
                if !(k > 0.0) {
                    bail!("--scale must be > 0");
                }
                for g in &mut cfg.groups {
                    g.rate *= k;
                    g.scale *= k;
                }
            }
            let output = match mode {
                ClockMode::Simulated => harness::run_simulated(&cfg)?,
                ClockMode::WallClock => harness::run_wall(&cfg, (!workers.is_empty()).then_some(workers))?,
            };
            let report = output.summarize(&cfg);
            harness::write_outputs(&out, &output, &report)?;
            if plots {
                plot::plot_report(&report, &out)?;
            }
            let t = &report.totals;
            info!(
                "{} requests, goodput {:.1} r/s, satisfaction {:.4}, p99 {:.2} ms, max {:.2} ms, {} cold starts",
                t.requests, t.goodput_rps, t.satisfaction, t.p99_ms, t.max_ms, t.cold_starts
            );
            let violations = output.slo_violations();
            if violations > 0 {
                eprintln!("hard SLO invariant violated by {violations} responses");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Summarize {
            logs,
            interval_s,
            warmup_s,
        } => {
            let requests: Vec<harness::RequestRecord> = telemetry::read_csv(&logs.join("requests.csv"))?;
            let actions: Vec<harness::ActionRecord> = telemetry::read_csv(&logs.join("actions.csv"))?;
            let report = harness::summarize(
                &requests,
                &actions,
                Nanos::from_secs_f64(interval_s),
                Nanos::from_secs_f64(warmup_s),
            );
            std::fs::write(logs.join("summary.toml"), toml::to_string(&report)?)?;
            println!("{}", toml::to_string(&report.totals)?);
        }
        Command::Plot { report, out } => {
            let r = harness::read_report(&report).map_err(|e| anyhow::anyhow!("{e}"))?;
            let dir = out.unwrap_or_else(|| report.parent().unwrap_or(std::path::Path::new(".")).to_owned());
            for p in plot::plot_report(&r, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Worker {
            listen,
            catalog,
            id,
            gpus,
            pages_per_gpu,
            clock,
            jitter,
            seed,
            telemetry,
        } => {
            let catalog = Arc::new(match catalog {
                Some(p) => load_catalog(p)?,
                None => ModelCatalog::table1(),
            });
            let clock: Arc<dyn Clock> = match clock {
                ClockMode::WallClock => Arc::new(WallClock::new()),
                ClockMode::Simulated => Arc::new(SimClock::new()),
            };
            let cfg = WorkerConfig {
                worker_id: id,
                gpus,
                pages_per_gpu,
                jitter,
                seed,
                realtime: clock.mode() == ClockMode::WallClock,
                keep_log: telemetry.is_some(),
                ..WorkerConfig::default()
            };
            let listener = TcpListener::bind(listen)?;
            info!("worker {id} listening on {}", listener.local_addr()?);
            let (stream, peer) = listener.accept()?;
            info!("controller connected from {peer}");
            let worker = server::serve(stream, Worker::new(cfg, catalog), clock)?;
            if let Some(path) = telemetry {
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["action_id", "status", "start_ns", "end_ns", "device_duration_ns"])?;
                for r in worker.log() {
                    w.write_record([
                        r.action_id.to_string(),
                        r.status.as_str().to_string(),
                        r.start.0.to_string(),
                        r.end.0.to_string(),
                        r.device_duration.0.to_string(),
                    ])?;
                }
                w.flush()?;
            }
        }
        Command::GenTrace {
            out,
            workloads,
            minutes,
            mean_rate,
            seed,
        } => {
            let t: InvocationTrace = synthetic_maf(workloads, minutes, mean_rate, seed);
            t.save(&out)?;
            println!("{} invocations over {} minutes", t.total(), t.minutes());
        }
    }
    Ok(ExitCode::SUCCESS)
}
