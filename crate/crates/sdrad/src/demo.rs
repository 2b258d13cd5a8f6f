//! Five-request scenario: the third line is too long for the parse buffer.
//! In `domains` mode the server drops that request and keeps going; in the
//! other modes it goes down at the third request.

use std::fmt;
use std::net::SocketAddr;

use crate::client::{fetch_stats, Client, Reply};
use crate::protocol::oversized_line;
use crate::server::{self, Mode, ServerConfig, ServerStats};
use crate::protocol::Payload;

pub const DEMO_OVERSIZE: usize = 200;

pub fn demo_trace() -> Vec<Vec<u8>> {
    vec![
        b"GET /index\n".to_vec(),
        b"GET /about\n".to_vec(),
        oversized_line(DEMO_OVERSIZE),
        b"GET /news\n".to_vec(),
        b"GET /contact\n".to_vec(),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Served,
    /// The server closed this connection and kept running.
    Rejected,
    /// The server is gone.
    ServerGone,
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub mode: Mode,
    pub outcomes: Vec<StepOutcome>,
    pub served: usize,
    pub rejected: usize,
    /// 1-based index of the request the server died on.
    pub terminated_at: Option<usize>,
    pub server_alive: bool,
    pub stats: Option<ServerStats>,
}

impl fmt::Display for DemoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let trace = demo_trace();
        for (i, outcome) in self.outcomes.iter().enumerate() {
            let line = String::from_utf8_lossy(&trace[i]);
            let shown = if line.len() > 24 {
                format!("{}... ({} bytes)", &line[..12], trace[i].len())
            } else {
                line.trim_end().to_string()
            };
            let what = match outcome {
                StepOutcome::Served => "served",
                StepOutcome::Rejected => "rejected, domain discarded, server continues",
                StepOutcome::ServerGone => "connection lost, server terminated",
            };
            writeln!(f, "[{:>8}] request {} {:<28} {}", self.mode, i + 1, shown, what)?;
        }
        match self.terminated_at {
            Some(at) => write!(
                f,
                "[{:>8}] stopped at request {at}: {} served, {} never handled",
                self.mode,
                self.served,
                trace.len() - self.outcomes.len() + 1
            ),
            None => write!(
                f,
                "[{:>8}] completed all {} requests: {} served, {} rejected, server alive: {}",
                self.mode,
                trace.len(),
                self.served,
                self.rejected,
                self.server_alive
            ),
        }
    }
}

async fn gone_or_rejected(addr: SocketAddr) -> StepOutcome {
    match fetch_stats(addr).await {
        Ok(s) if s.alive && s.live_workers > 0 => StepOutcome::Rejected,
        _ => StepOutcome::ServerGone,
    }
}

/// Plays the trace against the server at `addr`, one connection at a time.
pub async fn play(addr: SocketAddr, mode: Mode) -> anyhow::Result<DemoReport> {
    let mut report = DemoReport {
        mode,
        outcomes: Vec::new(),
        served: 0,
        rejected: 0,
        terminated_at: None,
        server_alive: false,
        stats: None,
    };
    let mut client: Option<Client> = None;
    let mut body = Vec::new();
    for (i, line) in demo_trace().iter().enumerate() {
        if client.is_none() {
            client = Client::connect(addr).await.ok();
        }
        let outcome = match client.as_mut() {
            None => StepOutcome::ServerGone,
            Some(c) => match c.request(line, &mut body).await? {
                Reply::Ok(_) => StepOutcome::Served,
                Reply::Malformed => anyhow::bail!("demo request {} reported malformed", i + 1),
                Reply::Closed => {
                    client = None;
                    gone_or_rejected(addr).await
                }
            },
        };
        report.outcomes.push(outcome);
        match outcome {
            StepOutcome::Served => report.served += 1,
            StepOutcome::Rejected => report.rejected += 1,
            StepOutcome::ServerGone => {
                report.terminated_at = Some(i + 1);
                break;
            }
        }
    }
    report.stats = fetch_stats(addr).await.ok();
    report.server_alive = report.stats.as_ref().is_some_and(|s| s.alive);
    Ok(report)
}

/// Starts a one-worker server in `mode`, plays the trace and stops it.
pub fn run_demo(mode: Mode) -> anyhow::Result<DemoReport> {
    let handle = server::start(ServerConfig::local(mode, Payload::K0))?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let report = rt.block_on(play(handle.addr(), mode));
    let _ = handle.shutdown();
    report
}
