//! One-line request protocol and the deliberately unchecked parser.
//!
//! Request: `METHOD SP PATH LF`. Response: `OK SP <len> LF` followed by
//! `<len>` body bytes, or `ERR 0 LF` for a line that does not parse.

use std::fmt;
use std::str::FromStr;

use sdrad_core::cap_mem::{CapMemory, Capability};
use serde::{Deserialize, Serialize};

/// Size of the parse buffer each request gets.
pub const DEFAULT_BUF_LEN: usize = 64;
/// Longest line the server reads before handing it to the parser.
pub const MAX_LINE: usize = 64 << 10;

pub const MALFORMED_RESPONSE: &[u8] = b"ERR 0\n";

/// Response body sizes used by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Payload {
    #[serde(rename = "0k")]
    K0,
    #[serde(rename = "1k")]
    K1,
    #[serde(rename = "4k")]
    K4,
    #[serde(rename = "16k")]
    K16,
}

impl Payload {
    pub const ALL: [Payload; 4] = [Payload::K0, Payload::K1, Payload::K4, Payload::K16];

    pub fn bytes(self) -> usize {
        match self {
            Payload::K0 => 0,
            Payload::K1 => 1024,
            Payload::K4 => 4096,
            Payload::K16 => 16384,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Payload::K0 => "0k",
            Payload::K1 => "1k",
            Payload::K4 => "4k",
            Payload::K16 => "16k",
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for Payload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Payload::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| format!("unknown payload {s:?}, expected one of 0k, 1k, 4k, 16k"))
    }
}

/// Response body for a payload size. Identical in every server mode.
pub fn body(len: usize) -> Vec<u8> {
    (0..len).map(|i| b'a' + (i % 26) as u8).collect()
}

/// Full response frame for `body`.
pub fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = format!("OK {}\n", body.len()).into_bytes();
    out.extend_from_slice(body);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestLine {
    pub method: String,
    pub path: String,
    pub raw_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("malformed request line")]
pub struct ParseError;

/// Copies `input` into `buf` and tokenizes the copy.
///
/// The copy has no length check: a line longer than `buf` faults in the
/// capability layer before anything past `buf.top()` is written. The outer
/// result carries memory faults, the inner one the parse verdict.
pub fn parse_request_line<M: CapMemory>(
    mem: &mut M,
    input: &[u8],
    buf: &Capability,
) -> Result<Result<RequestLine, ParseError>, M::Error> {
    mem.cap_store(buf, 0, input)?;
    let mut line = vec![0u8; input.len()];
    mem.cap_load_into(buf, 0, &mut line)?;
    Ok(tokenize(&line))
}

fn tokenize(line: &[u8]) -> Result<RequestLine, ParseError> {
    let raw_len = line.len();
    let line = line.strip_suffix(b"\n").ok_or(ParseError)?;
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let sp = line.iter().position(|&b| b == b' ').ok_or(ParseError)?;
    let (method, path) = (&line[..sp], &line[sp + 1..]);
    if method.is_empty() || !method.iter().all(u8::is_ascii_uppercase) {
        return Err(ParseError);
    }
    if !path.starts_with(b"/") || !path.iter().all(|b| b.is_ascii_graphic()) {
        return Err(ParseError);
    }
    Ok(RequestLine {
        method: String::from_utf8_lossy(method).into_owned(),
        path: String::from_utf8_lossy(path).into_owned(),
        raw_len,
    })
}

/// An oversized request line of `len` bytes including the trailing LF.
pub fn oversized_line(len: usize) -> Vec<u8> {
    let mut line = b"GET /".to_vec();
    line.resize(len.max(7) - 1, b'A');
    line.push(b'\n');
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdrad_core::cap_mem::{FaultKind, MemoryArena};

    fn buffer(len: usize) -> (MemoryArena, Capability) {
        let (arena, root) = MemoryArena::create(256).unwrap();
        let buf = root.with_address(64).unwrap().with_bounds(len).unwrap();
        (arena, buf)
    }

    #[test]
    fn parses_simple_line() {
        let (mut arena, buf) = buffer(64);
        let req = parse_request_line(&mut arena, b"GET /index\n", &buf).unwrap().unwrap();
        assert_eq!(req.method, "GET");
        assert_eq!(req.path, "/index");
        assert_eq!(req.raw_len, 11);
    }

    #[test]
    fn oversized_line_faults_without_writing() {
        let (mut arena, buf) = buffer(64);
        let before = arena.raw_bytes().to_vec();
        let fault = parse_request_line(&mut arena, &oversized_line(200), &buf).unwrap_err();
        assert_eq!(fault.kind, FaultKind::BoundsViolation);
        assert_eq!(arena.raw_bytes(), &before[..]);
    }

    #[test]
    fn malformed_lines() {
        let (mut arena, buf) = buffer(64);
        for line in [&b"BLAH\n"[..], b"GET index\n", b"get /x\n", b"GET /x", b" /x\n", b"GET /a b\n"] {
            assert_eq!(parse_request_line(&mut arena, line, &buf).unwrap(), Err(ParseError), "{line:?}");
        }
    }

    #[test]
    fn payload_labels() {
        for p in Payload::ALL {
            assert_eq!(p.label().parse::<Payload>().unwrap(), p);
        }
        assert!("2k".parse::<Payload>().is_err());
        assert_eq!(frame(&body(3)), b"OK 3\nabc");
        assert_eq!(frame(&[]), b"OK 0\n");
        assert_eq!(oversized_line(200).len(), 200);
    }
}
