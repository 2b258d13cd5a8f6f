//! Closed-loop load generator and mode comparison.
//!
//! Every connection sends a request, waits for the reply and sends the
//! next one until the run's deadline. A fraction of requests are oversized
//! lines; after one of those the client expects the server to hang up and
//! reconnects.

use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::client::{fetch_stats, Client, Reply};
use crate::protocol::{oversized_line, Payload};
use crate::server::{self, Mode, ServerConfig, ServerStats, Span};

pub const DEFAULT_CONNECTIONS: usize = 8;
pub const DEFAULT_DURATION: Duration = Duration::from_secs(10);
pub const DEFAULT_REPETITIONS: usize = 3;
/// Length of an attack line; anything above the 64-byte buffer faults.
pub const DEFAULT_OVERSIZE: usize = 256;

const BENIGN_LINE: &[u8] = b"GET /index\n";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub addr: SocketAddr,
    pub connections: usize,
    pub duration: Duration,
    pub payload: Payload,
    pub malicious_ratio: f64,
    pub repetitions: usize,
    pub oversize: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(addr: SocketAddr, payload: Payload) -> BenchConfig {
        BenchConfig {
            addr,
            connections: DEFAULT_CONNECTIONS,
            duration: DEFAULT_DURATION,
            payload,
            malicious_ratio: 0.0,
            repetitions: DEFAULT_REPETITIONS,
            oversize: DEFAULT_OVERSIZE,
            seed: 0x5d2a_d000,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.duration.is_zero() {
            bail!("duration must be positive");
        }
        if self.repetitions == 0 {
            bail!("at least one repetition is required");
        }
        if self.connections == 0 {
            bail!("at least one connection is required");
        }
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            bail!("malicious ratio {} outside [0, 1]", self.malicious_ratio);
        }
        Ok(())
    }
}

/// One CSV row per repetition.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunRow {
    pub mode: Mode,
    pub payload: Payload,
    pub run: usize,
    pub requests: u64,
    pub rps: f64,
    pub served: u64,
    pub rejected: u64,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub mode: Mode,
    pub payload: Payload,
    pub connections: usize,
    pub duration: Duration,
    pub malicious_ratio: f64,
    pub rps_mean: f64,
    pub rps_std: f64,
    /// Client-side totals over all runs.
    pub served: u64,
    pub rejected: u64,
    /// Oversized lines sent, answered or not.
    pub malicious_sent: u64,
    pub runs: Vec<RunRow>,
    /// The server lost a worker or stopped answering.
    pub worker_death: bool,
    /// Server-side counter deltas over all completed runs.
    pub server_served: u64,
    pub server_rejected: u64,
    pub server_alive: bool,
    pub final_stats: Option<ServerStats>,
}

#[derive(Default)]
struct ConnTally {
    served: u64,
    rejected: u64,
    malicious_sent: u64,
    lost: bool,
}

async fn drive(cfg: BenchConfig, deadline: Instant, seed: u64) -> anyhow::Result<ConnTally> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let attack = oversized_line(cfg.oversize);
    let expected = cfg.payload.bytes();
    let mut tally = ConnTally::default();
    let mut body = Vec::with_capacity(expected);
    let mut client = match Client::connect(cfg.addr).await {
        Ok(c) => c,
        Err(_) => {
            tally.lost = true;
            return Ok(tally);
        }
    };
    while Instant::now() < deadline {
        let malicious = cfg.malicious_ratio > 0.0 && rng.gen_bool(cfg.malicious_ratio);
        if malicious {
            tally.malicious_sent += 1;
            match client.request(&attack, &mut body).await? {
                Reply::Closed => tally.rejected += 1,
                other => bail!("oversized request was answered with {other:?}"),
            }
            client = match Client::connect(cfg.addr).await {
                Ok(c) => c,
                Err(_) => {
                    tally.lost = true;
                    break;
                }
            };
        } else {
            match client.request(BENIGN_LINE, &mut body).await? {
                Reply::Ok(len) if len == expected => tally.served += 1,
                Reply::Ok(len) => bail!("expected a {expected}-byte body, got {len}"),
                Reply::Malformed => bail!("benign request reported malformed"),
                Reply::Closed => {
                    tally.lost = true;
                    break;
                }
            }
        }
    }
    Ok(tally)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Runs the configured load against a live server.
pub async fn run_workload(cfg: &BenchConfig) -> anyhow::Result<BenchResult> {
    cfg.validate()?;
    let first = fetch_stats(cfg.addr)
        .await
        .with_context(|| format!("server at {} not reachable", cfg.addr))?;
    if first.payload != cfg.payload {
        bail!("server serves {} bodies, benchmark configured for {}", first.payload, cfg.payload);
    }
    let mode = first.mode;
    let mut result = BenchResult {
        mode,
        payload: cfg.payload,
        connections: cfg.connections,
        duration: cfg.duration,
        malicious_ratio: cfg.malicious_ratio,
        rps_mean: 0.0,
        rps_std: 0.0,
        served: 0,
        rejected: 0,
        malicious_sent: 0,
        runs: Vec::new(),
        worker_death: false,
        server_served: 0,
        server_rejected: 0,
        server_alive: true,
        final_stats: None,
    };
    let mut before = first;
    for run in 0..cfg.repetitions {
        let start = Instant::now();
        let deadline = start + cfg.duration;
        let mut handles = Vec::with_capacity(cfg.connections);
        for conn in 0..cfg.connections {
            let seed = cfg.seed ^ ((run as u64) << 32) ^ conn as u64;
            handles.push(tokio::spawn(drive(cfg.clone(), deadline, seed)));
        }
        let mut row = RunRow {
            mode,
            payload: cfg.payload,
            run,
            requests: 0,
            rps: 0.0,
            served: 0,
            rejected: 0,
        };
        let mut lost = false;
        for h in handles {
            let t = h.await.context("client task panicked")??;
            row.served += t.served;
            row.rejected += t.rejected;
            result.malicious_sent += t.malicious_sent;
            lost |= t.lost;
        }
        let elapsed = start.elapsed().as_secs_f64();
        row.requests = row.served + row.rejected;
        row.rps = row.requests as f64 / elapsed;
        result.served += row.served;
        result.rejected += row.rejected;
        log::info!(
            "{mode} {} run {run}: {} requests, {:.0} req/s",
            cfg.payload,
            row.requests,
            row.rps
        );
        result.runs.push(row);
        match fetch_stats(cfg.addr).await {
            Ok(after) if after.alive && after.worker_deaths == before.worker_deaths && !lost => {
                result.server_served += after.served - before.served;
                result.server_rejected += after.rejected_malicious - before.rejected_malicious;
                result.final_stats = Some(after.clone());
                before = after;
            }
            Ok(after) => {
                result.worker_death = true;
                result.server_alive = after.alive;
                result.final_stats = Some(after);
                break;
            }
            Err(_) => {
                result.worker_death = true;
                result.server_alive = false;
                break;
            }
        }
    }
    let rps: Vec<f64> = result.runs.iter().map(|r| r.rps).collect();
    (result.rps_mean, result.rps_std) = mean_std(&rps);
    Ok(result)
}

/// [`run_workload`] on a private current-thread runtime.
pub fn run_workload_blocking(cfg: &BenchConfig) -> anyhow::Result<BenchResult> {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?
        .block_on(run_workload(cfg))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OverheadRow {
    pub mode: Mode,
    pub payload: Payload,
    pub rps_mean: f64,
    pub rps_std: f64,
    /// Throughput loss relative to `baseline` at the same payload, percent.
    pub overhead_pct: f64,
}

/// Relative throughput of every result against the `baseline` result with
/// the same payload. All results must come from identical load settings.
pub fn compare_modes(results: &[BenchResult]) -> anyhow::Result<Vec<OverheadRow>> {
    let Some(first) = results.first() else {
        bail!("nothing to compare");
    };
    for r in results {
        if r.duration != first.duration
            || r.connections != first.connections
            || r.malicious_ratio != first.malicious_ratio
            || r.runs.len() != first.runs.len()
        {
            bail!(
                "mismatched configurations: {} {} ran {} x {:?} with {} connections, {} {} ran {} x {:?} with {}",
                first.mode,
                first.payload,
                first.runs.len(),
                first.duration,
                first.connections,
                r.mode,
                r.payload,
                r.runs.len(),
                r.duration,
                r.connections
            );
        }
    }
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let base = results
            .iter()
            .find(|b| b.mode == Mode::Baseline && b.payload == r.payload)
            .with_context(|| format!("no baseline result for payload {}", r.payload))?;
        if base.rps_mean <= 0.0 {
            bail!("baseline throughput for {} is zero", r.payload);
        }
        rows.push(OverheadRow {
            mode: r.mode,
            payload: r.payload,
            rps_mean: r.rps_mean,
            rps_std: r.rps_std,
            overhead_pct: (base.rps_mean - r.rps_mean) / base.rps_mean * 100.0,
        });
    }
    Ok(rows)
}

/// `true` if baseline ≥ tlsf ≥ domains at `payload`.
pub fn ordering_holds(rows: &[OverheadRow], payload: Payload) -> Option<bool> {
    let get = |m: Mode| rows.iter().find(|r| r.mode == m && r.payload == payload).map(|r| r.rps_mean);
    let (b, t, d) = (get(Mode::Baseline)?, get(Mode::Tlsf)?, get(Mode::Domains)?);
    Some(b >= t && t >= d)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Runs every mode at every payload against fresh in-process servers.
pub fn run_matrix(modes: &[Mode], payloads: &[Payload], template: &BenchConfig) -> anyhow::Result<Vec<BenchResult>> {
    let mut results = Vec::new();
    for &payload in payloads {
        for &mode in modes {
            let handle = server::start(ServerConfig::local(mode, payload))?;
            let cfg = BenchConfig {
                addr: handle.addr(),
                payload,
                ..template.clone()
            };
            let outcome = run_workload_blocking(&cfg);
            let _ = handle.shutdown();
            results.push(outcome?);
        }
    }
    Ok(results)
}

/// Reserved-bytes spans reported by the server after a run.
pub fn reserved_spans(result: &BenchResult) -> (Option<Span>, Option<Span>) {
    result
        .final_stats
        .as_ref()
        .map_or((None, None), |s| (s.reserved_after_abort, s.reserved_after_serve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_std(&[10.0, 12.0, 14.0]);
        assert_eq!(m, 12.0);
        assert!((s - 2.0).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn run_row_csv_shape() {
        let row = RunRow {
            mode: Mode::Domains,
            payload: Payload::K4,
            run: 2,
            requests: 10,
            rps: 1.5,
            served: 9,
            rejected: 1,
        };
        let text = csv_string(&[row]).unwrap();
        assert_eq!(text, "mode,payload,run,requests,rps,served,rejected\ndomains,4k,2,10,1.5,9,1\n");
        let over = OverheadRow {
            mode: Mode::Tlsf,
            payload: Payload::K0,
            rps_mean: 100.0,
            rps_std: 1.0,
            overhead_pct: 2.5,
        };
        assert!(csv_string(&[over]).unwrap().starts_with("mode,payload,rps_mean,rps_std,overhead_pct\ntlsf,0k,"));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = BenchConfig::new(SocketAddr::from(([127, 0, 0, 1], 1)), Payload::K0);
        cfg.validate().unwrap();
        cfg.malicious_ratio = 1.5;
        assert!(cfg.validate().is_err());
        cfg.malicious_ratio = 0.0;
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        cfg.repetitions = 1;
        cfg.duration = Duration::ZERO;
        assert!(cfg.validate().is_err());
    }
}
