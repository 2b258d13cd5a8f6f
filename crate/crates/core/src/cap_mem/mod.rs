//! Software model of CHERI capabilities over a flat arena.
//!
//! Every guarded access is checked against the capability's tag,
//! permissions and bounds, in that order, and a refused access leaves the
//! arena untouched. Faults come back as values; turning them into control
//! transfer is the job of [`crate::domains`].

mod arena;
mod capability;

pub use arena::{ArenaError, CapMemory, MemoryArena, Region, RegionId};
pub use capability::{
    round_representable_length, Access, Capability, FaultKind, FaultRecord, Permissions, CAP_ALIGN,
};
