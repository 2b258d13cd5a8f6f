//! TCP guard server.
//!
//! Each worker is an OS thread with its own single-threaded runtime and its
//! own [`Engine`], so a domain manager never leaves the thread that created
//! it. The acceptor hands connections to workers round robin.
//!
//! In `domains` mode every request line is parsed inside a nested domain; a
//! fault discards that domain and closes only the offending connection. In
//! `baseline` and `tlsf` modes a fault takes the whole worker down, with all
//! of its connections, and the server stops once no worker is left.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::net::{SocketAddr, TcpListener as StdListener};
use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use anyhow::Context;
use sdrad_core::cap_mem::{FaultRecord, MemoryArena};
use sdrad_core::domains::{DomainError, DomainOutcome, Manager, Udi};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch, Notify};

use crate::env;
use crate::protocol::{self, parse_request_line, Payload, RequestLine, DEFAULT_BUF_LEN, MAX_LINE};

/// Domain the parser runs in.
pub const NESTED_UDI: Udi = Udi::new(1);

pub const STATS_REQUEST: &[u8] = b"STATS /\n";
pub const SHUTDOWN_REQUEST: &[u8] = b"SHUTDOWN /\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fresh system-allocated buffer per request, no domains.
    Baseline,
    /// Buffer from the main domain's TLSF heap, no nested domain.
    Tlsf,
    /// Buffer from a nested domain's heap, parse inside the domain.
    Domains,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Tlsf, Mode::Domains];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Tlsf => "tlsf",
            Mode::Domains => "domains",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown mode {s:?}, expected baseline, tlsf or domains"))
    }
}

/// What happened to one request line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Served(RequestLine),
    Malformed,
    /// The nested domain faulted and was discarded.
    Rejected(FaultRecord),
    /// A fault with nothing to rewind to. The engine is dead from now on.
    Fatal(FaultRecord),
    /// The engine died earlier.
    Down,
    Internal(String),
}

/// Per-worker request handler.
pub struct Engine {
    mode: Mode,
    buf_len: usize,
    manager: Option<Manager>,
    dead: bool,
}

impl Engine {
    pub fn new(mode: Mode, buf_len: usize) -> anyhow::Result<Engine> {
        anyhow::ensure!(buf_len > 0, "buffer length must be positive");
        let manager = match mode {
            Mode::Baseline => None,
            Mode::Tlsf => Some(Manager::new(env::manager_config(1))?),
            Mode::Domains => Some(Manager::new(env::manager_config(2))?),
        };
        Ok(Engine {
            mode,
            buf_len,
            manager,
            dead: false,
        })
    }

    /// Engine over a caller-supplied manager.
    pub fn with_manager(mode: Mode, buf_len: usize, manager: Manager) -> Engine {
        Engine {
            mode,
            buf_len,
            manager: (mode != Mode::Baseline).then_some(manager),
            dead: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn manager(&self) -> Option<&Manager> {
        self.manager.as_ref()
    }

    /// Bytes of the worker arena currently reserved by domain heaps.
    pub fn reserved_bytes(&self) -> usize {
        self.manager.as_ref().map_or(0, |m| m.arena_reserved_bytes())
    }

    pub fn handle(&mut self, line: &[u8]) -> Verdict {
        if self.dead {
            return Verdict::Down;
        }
        let verdict = match self.mode {
            Mode::Baseline => self.handle_baseline(line),
            Mode::Tlsf => self.handle_tlsf(line),
            Mode::Domains => self.handle_domains(line),
        };
        if matches!(verdict, Verdict::Fatal(_)) {
            self.dead = true;
        }
        verdict
    }

    fn handle_baseline(&mut self, line: &[u8]) -> Verdict {
        let (mut arena, buf) = match MemoryArena::create(self.buf_len) {
            Ok(pair) => pair,
            Err(e) => return Verdict::Internal(e.to_string()),
        };
        match parse_request_line(&mut arena, line, &buf) {
            Ok(Ok(req)) => Verdict::Served(req),
            Ok(Err(_)) => Verdict::Malformed,
            Err(fault) => Verdict::Fatal(fault),
        }
    }

    fn handle_tlsf(&mut self, line: &[u8]) -> Verdict {
        let buf_len = self.buf_len;
        let m = self.manager.as_mut().expect("tlsf mode has a manager");
        let run = |m: &mut Manager| -> Result<_, DomainError> {
            let buf = m.dalloc(buf_len)?;
            let parsed = parse_request_line(m, line, &buf)?;
            m.dfree(&buf)?;
            Ok(parsed)
        };
        match run(m) {
            Ok(Ok(req)) => Verdict::Served(req),
            Ok(Err(_)) => Verdict::Malformed,
            Err(DomainError::Trap(trap)) => Verdict::Fatal(trap.fault()),
            Err(e) => Verdict::Internal(e.to_string()),
        }
    }

    fn handle_domains(&mut self, line: &[u8]) -> Verdict {
        let buf_len = self.buf_len;
        let m = self.manager.as_mut().expect("domains mode has a manager");
        let out = m.domain_call(NESTED_UDI, |m| {
            let buf = m.dalloc(buf_len)?;
            let parsed = parse_request_line(m, line, &buf)?;
            m.dfree(&buf)?;
            Ok(parsed)
        });
        match out {
            Ok(DomainOutcome::Normal(Ok(req))) => Verdict::Served(req),
            Ok(DomainOutcome::Normal(Err(_))) => Verdict::Malformed,
            Ok(DomainOutcome::Aborted { fault, .. }) => Verdict::Rejected(fault),
            Err(DomainError::Trap(trap)) => Verdict::Fatal(trap.fault()),
            Err(e) => Verdict::Internal(e.to_string()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub mode: Mode,
    pub payload: Payload,
    pub header_buf_len: usize,
    pub max_connections: usize,
    pub workers: usize,
}

impl ServerConfig {
    pub fn local(mode: Mode, payload: Payload) -> ServerConfig {
        ServerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            mode,
            payload,
            header_buf_len: DEFAULT_BUF_LEN,
            max_connections: 1024,
            workers: 1,
        }
    }
}

/// Smallest and largest value seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    fn record(slot: &mut Option<Span>, v: usize) {
        *slot = Some(match *slot {
            None => Span { min: v, max: v },
            Some(s) => Span {
                min: s.min.min(v),
                max: s.max.max(v),
            },
        });
    }

    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }
}

/// Aggregate counters, served as JSON to `STATS /`. Control requests are
/// not counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub mode: Mode,
    pub payload: Payload,
    pub workers: usize,
    pub live_workers: usize,
    pub alive: bool,
    /// Requests answered with a frame, malformed ones included.
    pub served: u64,
    pub malformed: u64,
    pub rejected_malicious: u64,
    pub bytes_out: u64,
    pub connections: u64,
    pub worker_deaths: u64,
    /// Worker arena reservation right after a request was discarded.
    pub reserved_after_abort: Option<Span>,
    /// Worker arena reservation right after a request was served.
    pub reserved_after_serve: Option<Span>,
}

impl ServerStats {
    fn new(config: &ServerConfig) -> ServerStats {
        ServerStats {
            mode: config.mode,
            payload: config.payload,
            workers: config.workers,
            live_workers: config.workers,
            alive: true,
            served: 0,
            malformed: 0,
            rejected_malicious: 0,
            bytes_out: 0,
            connections: 0,
            worker_deaths: 0,
            reserved_after_abort: None,
            reserved_after_serve: None,
        }
    }

    pub fn requests(&self) -> u64 {
        self.served + self.rejected_malicious
    }
}

struct Shared {
    stats: Mutex<ServerStats>,
    live_workers: AtomicUsize,
    open_connections: AtomicUsize,
    worker_down: Notify,
    alive: AtomicBool,
}

impl Shared {
    fn stats(&self) -> std::sync::MutexGuard<'_, ServerStats> {
        self.stats.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A running server.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        self.shared.stats().clone()
    }

    /// `false` once the acceptor has stopped.
    pub fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst)
    }

    /// Stops accepting, lets connections finish their current request and
    /// returns the final counters.
    pub fn shutdown(self) -> ServerStats {
        let _ = self.shutdown.send(true);
        self.wait()
    }

    /// Blocks until the server stops on its own (a `SHUTDOWN /` request or
    /// the last worker dying).
    pub fn wait(self) -> ServerStats {
        for t in self.threads {
            if t.join().is_err() {
                log::error!("server thread panicked");
            }
        }
        self.shared.stats().clone()
    }
}

/// Binds and starts the acceptor and workers in background threads.
pub fn start(config: ServerConfig) -> anyhow::Result<ServerHandle> {
    anyhow::ensure!(config.workers >= 1, "at least one worker is required");
    let listener = StdListener::bind(config.listen).with_context(|| format!("binding {}", config.listen))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    // Engines are built up front so configuration errors surface here.
    let mut engines = Vec::with_capacity(config.workers);
    for _ in 0..config.workers {
        engines.push(Engine::new(config.mode, config.header_buf_len)?);
    }
    let shared = Arc::new(Shared {
        stats: Mutex::new(ServerStats::new(&config)),
        live_workers: AtomicUsize::new(config.workers),
        open_connections: AtomicUsize::new(0),
        worker_down: Notify::new(),
        alive: AtomicBool::new(true),
    });
    let (shutdown, shutdown_rx) = watch::channel(false);
    let frame: Arc<[u8]> = protocol::frame(&protocol::body(config.payload.bytes())).into();

    let mut threads = Vec::new();
    let mut senders = Vec::new();
    for (id, engine) in engines.into_iter().enumerate() {
        let (tx, rx) = mpsc::unbounded_channel();
        senders.push(Some(tx));
        let worker = Worker {
            id,
            engine,
            shared: shared.clone(),
            frame: frame.clone(),
            shutdown: shutdown.clone(),
            shutdown_rx: shutdown_rx.clone(),
        };
        threads.push(
            std::thread::Builder::new()
                .name(format!("worker-{id}"))
                .spawn(move || worker.run(rx))?,
        );
    }
    let acceptor = Acceptor {
        shared: shared.clone(),
        senders,
        max_connections: config.max_connections,
        shutdown: shutdown_rx,
    };
    threads.push(
        std::thread::Builder::new()
            .name("acceptor".into())
            .spawn(move || acceptor.run(listener))?,
    );
    log::info!("{} server listening on {addr}", config.mode);
    Ok(ServerHandle {
        addr,
        shared,
        shutdown,
        threads,
    })
}

/// Runs a server until it stops and returns the final counters.
pub fn serve(config: ServerConfig) -> anyhow::Result<ServerStats> {
    Ok(start(config)?.wait())
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("building a current-thread runtime")
}

struct Acceptor {
    shared: Arc<Shared>,
    senders: Vec<Option<mpsc::UnboundedSender<std::net::TcpStream>>>,
    max_connections: usize,
    shutdown: watch::Receiver<bool>,
}

impl Acceptor {
    fn run(mut self, listener: StdListener) {
        let rt = runtime();
        rt.block_on(async {
            let listener = match TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("listener setup failed: {e}");
                    return;
                }
            };
            let mut next = 0;
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        let stream = match accepted {
                            Ok((s, _)) => s,
                            Err(e) => {
                                log::warn!("accept failed: {e}");
                                continue;
                            }
                        };
                        if !self.dispatch(stream, &mut next) {
                            break;
                        }
                    }
                    _ = self.shared.worker_down.notified() => {
                        if self.shared.live_workers.load(Ordering::SeqCst) == 0 {
                            break;
                        }
                    }
                    _ = self.shutdown.changed() => break,
                }
            }
        });
        self.shared.alive.store(false, Ordering::SeqCst);
        self.shared.stats().alive = false;
        log::info!("acceptor stopped");
    }

    /// Hands `stream` to the next live worker. `false` when none is left.
    fn dispatch(&mut self, stream: TcpStream, next: &mut usize) -> bool {
        if self.shared.live_workers.load(Ordering::SeqCst) == 0 {
            return false;
        }
        if self.shared.open_connections.load(Ordering::SeqCst) >= self.max_connections {
            log::warn!("connection limit reached, dropping new connection");
            return true;
        }
        let _ = stream.set_nodelay(true);
        let mut stream = match stream.into_std() {
            Ok(s) => s,
            Err(e) => {
                log::warn!("could not detach stream: {e}");
                return true;
            }
        };
        let n = self.senders.len();
        for k in 0..n {
            let idx = (*next + k) % n;
            let Some(tx) = &self.senders[idx] else { continue };
            match tx.send(stream) {
                Ok(()) => {
                    *next = idx + 1;
                    self.shared.open_connections.fetch_add(1, Ordering::SeqCst);
                    self.shared.stats().connections += 1;
                    return true;
                }
                Err(back) => {
                    stream = back.0;
                    self.senders[idx] = None;
                }
            }
        }
        false
    }
}

struct Worker {
    id: usize,
    engine: Engine,
    shared: Arc<Shared>,
    frame: Arc<[u8]>,
    shutdown: watch::Sender<bool>,
    shutdown_rx: watch::Receiver<bool>,
}

struct WorkerCtx {
    engine: RefCell<Engine>,
    shared: Arc<Shared>,
    frame: Arc<[u8]>,
    shutdown: watch::Sender<bool>,
    died: Notify,
    dead: Cell<bool>,
}

impl Worker {
    fn run(self, mut rx: mpsc::UnboundedReceiver<std::net::TcpStream>) {
        let rt = runtime();
        let local = tokio::task::LocalSet::new();
        let id = self.id;
        let mut shutdown_rx = self.shutdown_rx;
        let ctx = Rc::new(WorkerCtx {
            engine: RefCell::new(self.engine),
            shared: self.shared,
            frame: self.frame,
            shutdown: self.shutdown,
            died: Notify::new(),
            dead: Cell::new(false),
        });
        let died = local.block_on(&rt, async {
            let mut tasks = Vec::new();
            loop {
                tokio::select! {
                    stream = rx.recv() => match stream {
                        Some(stream) => {
                            let ctx = ctx.clone();
                            let shutdown = shutdown_rx.clone();
                            tasks.push(tokio::task::spawn_local(async move {
                                let _guard = OpenGuard(ctx.shared.clone());
                                if let Err(e) = connection(stream, &ctx, shutdown).await {
                                    log::debug!("connection closed: {e}");
                                }
                            }));
                            tasks.retain(|t| !t.is_finished());
                        }
                        None => break,
                    },
                    _ = ctx.died.notified() => return true,
                    _ = shutdown_rx.changed() => break,
                }
            }
            // Drain: connections stop after their current request.
            for t in tasks {
                let _ = t.await;
            }
            false
        });
        drop(local);
        if died {
            log::error!("worker {id} terminated");
        }
    }
}

struct OpenGuard(Arc<Shared>);

impl Drop for OpenGuard {
    fn drop(&mut self) {
        self.0.open_connections.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn connection(
    stream: std::net::TcpStream,
    ctx: &WorkerCtx,
    mut shutdown: watch::Receiver<bool>,
) -> std::io::Result<()> {
    let stream = TcpStream::from_std(stream)?;
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut line = Vec::with_capacity(256);
    loop {
        if *shutdown.borrow() || ctx.dead.get() {
            return Ok(());
        }
        line.clear();
        let mut limited = AsyncReadExt::take(&mut reader, MAX_LINE as u64);
        let n = tokio::select! {
            n = limited.read_until(b'\n', &mut line) => n?,
            _ = shutdown.changed() => return Ok(()),
        };
        if n == 0 {
            return Ok(());
        }
        if line == STATS_REQUEST || line == SHUTDOWN_REQUEST {
            let json = serde_json::to_vec(&*ctx.shared.stats()).expect("stats serialize");
            write.write_all(&protocol::frame(&json)).await?;
            if line == SHUTDOWN_REQUEST {
                let _ = ctx.shutdown.send(true);
                return Ok(());
            }
            continue;
        }
        let verdict = ctx.engine.borrow_mut().handle(&line);
        let reserved = ctx.engine.borrow().reserved_bytes();
        let sample = ctx.engine.borrow().mode() != Mode::Baseline;
        match verdict {
            Verdict::Served(_) | Verdict::Malformed => {
                let malformed = matches!(verdict, Verdict::Malformed);
                let out: &[u8] = if malformed {
                    protocol::MALFORMED_RESPONSE
                } else {
                    &ctx.frame
                };
                {
                    let mut stats = ctx.shared.stats();
                    stats.served += 1;
                    stats.malformed += malformed as u64;
                    stats.bytes_out += out.len() as u64;
                    if sample {
                        Span::record(&mut stats.reserved_after_serve, reserved);
                    }
                }
                write.write_all(out).await?;
            }
            Verdict::Rejected(fault) => {
                {
                    let mut stats = ctx.shared.stats();
                    stats.rejected_malicious += 1;
                    Span::record(&mut stats.reserved_after_abort, reserved);
                }
                log::info!("request discarded: {fault}");
                return Ok(());
            }
            Verdict::Fatal(fault) => {
                log::error!("unrecoverable fault, worker going down: {fault}");
                ctx.dead.set(true);
                {
                    let mut stats = ctx.shared.stats();
                    stats.worker_deaths += 1;
                    stats.live_workers = stats.live_workers.saturating_sub(1);
                }
                ctx.shared.live_workers.fetch_sub(1, Ordering::SeqCst);
                ctx.shared.worker_down.notify_one();
                ctx.died.notify_one();
                return Ok(());
            }
            Verdict::Down => return Ok(()),
            Verdict::Internal(e) => {
                log::error!("request failed: {e}");
                return Ok(());
            }
        }
    }
}
