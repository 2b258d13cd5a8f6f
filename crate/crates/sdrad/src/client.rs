//! Minimal client for the guard server protocol.

use std::io;
use std::net::SocketAddr;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use crate::server::{ServerStats, SHUTDOWN_REQUEST, STATS_REQUEST};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reply {
    /// `OK` frame with a body of this many bytes.
    Ok(usize),
    Malformed,
    /// The server closed the connection instead of answering.
    Closed,
}

pub struct Client {
    reader: BufReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
    header: Vec<u8>,
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::UnexpectedEof
    )
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> io::Result<Client> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (read, writer) = stream.into_split();
        Ok(Client {
            reader: BufReader::new(read),
            writer,
            header: Vec::with_capacity(32),
        })
    }

    /// Sends one line and reads the reply, leaving the body in `body`.
    pub async fn request(&mut self, line: &[u8], body: &mut Vec<u8>) -> io::Result<Reply> {
        body.clear();
        match self.writer.write_all(line).await {
            Ok(()) => {}
            Err(e) if is_disconnect(&e) => return Ok(Reply::Closed),
            Err(e) => return Err(e),
        }
        self.header.clear();
        let n = match self.reader.read_until(b'\n', &mut self.header).await {
            Ok(n) => n,
            Err(e) if is_disconnect(&e) => return Ok(Reply::Closed),
            Err(e) => return Err(e),
        };
        if n == 0 {
            return Ok(Reply::Closed);
        }
        if self.header == crate::protocol::MALFORMED_RESPONSE {
            return Ok(Reply::Malformed);
        }
        let len = std::str::from_utf8(&self.header)
            .ok()
            .and_then(|h| h.strip_prefix("OK "))
            .and_then(|h| h.trim_end().parse::<usize>().ok())
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad response header"))?;
        body.resize(len, 0);
        match self.reader.read_exact(body).await {
            Ok(_) => Ok(Reply::Ok(len)),
            Err(e) if is_disconnect(&e) => Ok(Reply::Closed),
            Err(e) => Err(e),
        }
    }
}

async fn control(addr: SocketAddr, line: &[u8]) -> io::Result<ServerStats> {
    let mut client = Client::connect(addr).await?;
    let mut body = Vec::new();
    match client.request(line, &mut body).await? {
        Reply::Ok(_) => serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Reply::Malformed => Err(io::Error::new(io::ErrorKind::InvalidData, "stats refused")),
        Reply::Closed => Err(io::Error::new(io::ErrorKind::ConnectionAborted, "server closed the connection")),
    }
}

/// Server counters via `STATS /`.
pub async fn fetch_stats(addr: SocketAddr) -> io::Result<ServerStats> {
    control(addr, STATS_REQUEST).await
}

/// Asks the server to shut down; returns its counters at that point.
pub async fn request_shutdown(addr: SocketAddr) -> io::Result<ServerStats> {
    control(addr, SHUTDOWN_REQUEST).await
}

/// Outcome of a single oversized request.
#[derive(Clone, Debug)]
pub struct AttackReport {
    pub reply: Reply,
    pub server_alive: bool,
    pub stats: Option<ServerStats>,
}

/// Sends one oversized line of `oversize` bytes and checks whether the
/// server still answers afterwards.
pub async fn attack(addr: SocketAddr, oversize: usize) -> io::Result<AttackReport> {
    let mut client = Client::connect(addr).await?;
    let mut body = Vec::new();
    let reply = client.request(&crate::protocol::oversized_line(oversize), &mut body).await?;
    drop(client);
    let stats = fetch_stats(addr).await.ok();
    Ok(AttackReport {
        reply,
        server_alive: stats.as_ref().is_some_and(|s| s.alive),
        stats,
    })
}
