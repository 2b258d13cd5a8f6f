use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sdrad::bench::{self, BenchConfig, DEFAULT_OVERSIZE};
use sdrad::protocol::{Payload, DEFAULT_BUF_LEN};
use sdrad::server::{self, Mode, ServerConfig};
use sdrad::{client, demo};

#[derive(Parser)]
#[command(name = "sdrad", version, about = "Rewindable parsing domains over emulated capabilities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the guard server until `SHUTDOWN /` or the last worker dies.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, default_value = "domains")]
        mode: Mode,
        #[arg(long, default_value = "0k")]
        payload: Payload,
        #[arg(long, default_value_t = DEFAULT_BUF_LEN)]
        buf_len: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1024)]
        max_connections: usize,
    },
    /// Closed-loop load against a running server.
    Bench {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = bench::DEFAULT_CONNECTIONS)]
        connections: usize,
        /// Seconds per repetition.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value = "0k")]
        payload: Payload,
        #[arg(long, default_value_t = 0.0)]
        malicious_ratio: f64,
        #[arg(long, default_value_t = bench::DEFAULT_REPETITIONS)]
        reps: usize,
        #[arg(long, default_value_t = DEFAULT_OVERSIZE)]
        oversize: usize,
        #[arg(long, default_value_t = 0x5d2a_d000)]
        seed: u64,
        /// Per-run CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Send one oversized request.
    Attack {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = DEFAULT_OVERSIZE)]
        oversize: usize,
    },
    /// Play the five-request scenario against each mode.
    Demo {
        /// Only this mode; all three otherwise.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Benchmark every mode at every payload on in-process servers.
    Compare {
        #[arg(long, default_value_t = bench::DEFAULT_CONNECTIONS)]
        connections: usize,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = bench::DEFAULT_REPETITIONS)]
        reps: usize,
        /// Payloads to run; all four by default.
        #[arg(long, value_delimiter = ',')]
        payloads: Vec<Payload>,
        /// Per-run CSV output.
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Overhead table CSV output.
        #[arg(long, default_value = "overhead.csv")]
        overhead_out: PathBuf,
    },
}

fn resolve(host: &str, port: u16) -> anyhow::Result<SocketAddr> {
    (host, port)
        .to_socket_addrs()
        .with_context(|| format!("resolving {host}:{port}"))?
        .next()
        .with_context(|| format!("{host}:{port} resolved to nothing"))
}

fn seconds(s: f64) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(s).with_context(|| format!("invalid duration {s}"))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Serve {
            port,
            host,
            mode,
            payload,
            buf_len,
            workers,
            max_connections,
        } => {
            let handle = server::start(ServerConfig {
                listen: resolve(&host, port)?,
                mode,
                payload,
                header_buf_len: buf_len,
                max_connections,
                workers,
            })?;
            println!("{mode} server listening on {}", handle.addr());
            let stats = handle.wait();
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Bench {
            host,
            port,
            connections,
            duration,
            payload,
            malicious_ratio,
            reps,
            oversize,
            seed,
            out,
        } => {
            let cfg = BenchConfig {
                addr: resolve(&host, port)?,
                connections,
                duration: seconds(duration)?,
                payload,
                malicious_ratio,
                repetitions: reps,
                oversize,
                seed,
            };
            let result = bench::run_workload_blocking(&cfg)?;
            match out {
                Some(path) => bench::write_csv(&path, &result.runs)?,
                None => print!("{}", bench::csv_string(&result.runs)?),
            }
            println!(
                "{} {}: {:.1} +/- {:.1} req/s over {} runs, served {}, rejected {}, malicious sent {}",
                result.mode,
                result.payload,
                result.rps_mean,
                result.rps_std,
                result.runs.len(),
                result.served,
                result.rejected,
                result.malicious_sent
            );
            if result.worker_death {
                println!("server lost a worker during the run (alive: {})", result.server_alive);
            }
        }
        Command::Attack { host, port, oversize } => {
            let addr = resolve(&host, port)?;
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            let report = rt.block_on(client::attack(addr, oversize))?;
            println!("reply: {:?}", report.reply);
            println!("server alive afterwards: {}", report.server_alive);
            if let Some(stats) = report.stats {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            }
        }
        Command::Demo { mode } => {
            let modes = mode.map_or(Mode::ALL.to_vec(), |m| vec![m]);
            for m in modes {
                println!("{}\n", demo::run_demo(m)?);
            }
        }
        Command::Compare {
            connections,
            duration,
            reps,
            payloads,
            out,
            overhead_out,
        } => {
            let payloads = if payloads.is_empty() { Payload::ALL.to_vec() } else { payloads };
            let template = BenchConfig {
                connections,
                duration: seconds(duration)?,
                repetitions: reps,
                ..BenchConfig::new(SocketAddr::from(([127, 0, 0, 1], 0)), Payload::K0)
            };
            let results = bench::run_matrix(&Mode::ALL, &payloads, &template)?;
            let runs: Vec<_> = results.iter().flat_map(|r| r.runs.iter().cloned()).collect();
            bench::write_csv(&out, &runs)?;
            let rows = bench::compare_modes(&results)?;
            bench::write_csv(&overhead_out, &rows)?;
            print!("{}", bench::csv_string(&rows)?);
            for p in &payloads {
                if let Some(ok) = bench::ordering_holds(&rows, *p) {
                    println!("{p}: baseline >= tlsf >= domains: {ok}");
                }
            }
        }
    }
    Ok(())
}
