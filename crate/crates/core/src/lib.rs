//! In-process rewind-and-discard domains over an emulated capability memory.
//!
//! - [`cap_mem`]: capabilities (address, bounds, permissions, tag) and the
//!   arena they guard. Accesses are checked before any byte moves.
//! - [`tlsf`]: a two-level segregated fit allocator whose metadata lives in
//!   the arena and is reached only through derived capabilities.
//! - [`domains`]: the domain table, scoped checkpoints, fault dispatch and
//!   the per-domain heap facade.
//!
//! The crate is `no_std` and needs only `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cap_mem;
pub mod domains;
pub mod tlsf;
