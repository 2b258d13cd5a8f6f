//! Guard server, load harness and command-line front end for the
//! `sdrad-core` domain runtime.
//!
//! The server parses one-line requests into a fixed 64-byte buffer without
//! checking the length. Depending on the [`server::Mode`], an oversized
//! line either kills the worker or is contained in a throwaway domain.

pub mod bench;
pub mod client;
pub mod demo;
pub mod env;
pub mod protocol;
pub mod server;

pub use sdrad_core;
