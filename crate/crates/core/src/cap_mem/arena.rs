use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::capability::{Access, Capability, FaultRecord, CAP_ALIGN};

/// Errors from arena creation and region bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArenaError {
    /// Zero-sized arena, zero-length or misaligned reservation.
    InvalidArgument,
    /// No free gap large enough for the reservation.
    Exhausted { requested: usize },
    /// The authority capability cannot derive the region.
    Fault(FaultRecord),
    UnknownRegion(RegionId),
}

impl fmt::Display for ArenaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArenaError::InvalidArgument => f.write_str("invalid argument"),
            ArenaError::Exhausted { requested } => {
                write!(f, "arena exhausted ({requested} bytes requested)")
            }
            ArenaError::Fault(fault) => write!(f, "capability fault: {fault}"),
            ArenaError::UnknownRegion(id) => write!(f, "unknown region {}", id.0),
        }
    }
}

impl core::error::Error for ArenaError {}

impl From<FaultRecord> for ArenaError {
    fn from(fault: FaultRecord) -> Self {
        ArenaError::Fault(fault)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(pub u32);

/// A reserved, non-overlapping slice of the arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub base: usize,
    pub len: usize,
    pub id: RegionId,
}

/// Flat byte store holding every guarded object. The only way in is through
/// a [`Capability`].
///
/// Regions play the part of anonymous mappings: [`reserve`](Self::reserve)
/// hands out zeroed, 16-byte aligned windows and [`release`](Self::release)
/// scrubs them on the way back.
pub struct MemoryArena {
    bytes: Vec<u8>,
    // sorted by base
    regions: Vec<Region>,
    next_region: u32,
    reserved: usize,
}

impl fmt::Debug for MemoryArena {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryArena")
            .field("size", &self.bytes.len())
            .field("regions", &self.regions.len())
            .field("reserved", &self.reserved)
            .finish()
    }
}

impl MemoryArena {
    /// Zero-filled arena of `size` bytes and its root capability
    /// (`[0, size)`, load+store, address 0).
    pub fn create(size: usize) -> Result<(MemoryArena, Capability), ArenaError> {
        if size == 0 {
            return Err(ArenaError::InvalidArgument);
        }
        let arena = MemoryArena {
            bytes: vec![0; size],
            regions: Vec::new(),
            next_region: 0,
            reserved: 0,
        };
        Ok((arena, Capability::root(size)))
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    fn span(&self, cap: &Capability, offset: usize, len: usize, access: Access) -> Result<usize, FaultRecord> {
        let start = cap.check(offset, len, access)?;
        // A capability minted for a larger arena still cannot reach past this one.
        if start + len > self.bytes.len() {
            return Err(FaultRecord::new(
                super::FaultKind::BoundsViolation,
                start,
                len,
            ));
        }
        Ok(start)
    }

    /// Writes `data` at `cap.address() + offset`. All checks run before the
    /// first byte is written.
    pub fn store(&mut self, cap: &Capability, offset: usize, data: &[u8]) -> Result<(), FaultRecord> {
        let start = self.span(cap, offset, data.len(), Access::Store)?;
        self.bytes[start..start + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn load_into(&self, cap: &Capability, offset: usize, out: &mut [u8]) -> Result<(), FaultRecord> {
        let start = self.span(cap, offset, out.len(), Access::Load)?;
        out.copy_from_slice(&self.bytes[start..start + out.len()]);
        Ok(())
    }

    pub fn load(&self, cap: &Capability, offset: usize, len: usize) -> Result<Vec<u8>, FaultRecord> {
        let start = self.span(cap, offset, len, Access::Load)?;
        Ok(self.bytes[start..start + len].to_vec())
    }

    /// Fills `len` bytes with `value` through `cap`.
    pub fn fill(&mut self, cap: &Capability, offset: usize, len: usize, value: u8) -> Result<(), FaultRecord> {
        let start = self.span(cap, offset, len, Access::Store)?;
        self.bytes[start..start + len].fill(value);
        Ok(())
    }

    /// Copies `len` bytes between two capabilities, checking both first.
    pub fn copy(&mut self, src: &Capability, dst: &Capability, len: usize) -> Result<(), FaultRecord> {
        let from = self.span(src, 0, len, Access::Load)?;
        let to = self.span(dst, 0, len, Access::Store)?;
        self.bytes.copy_within(from..from + len, to);
        Ok(())
    }

    pub(crate) fn load_u64(&self, cap: &Capability, offset: usize) -> Result<u64, FaultRecord> {
        let mut raw = [0u8; 8];
        self.load_into(cap, offset, &mut raw)?;
        Ok(u64::from_le_bytes(raw))
    }

    pub(crate) fn store_u64(&mut self, cap: &Capability, offset: usize, value: u64) -> Result<(), FaultRecord> {
        self.store(cap, offset, &value.to_le_bytes())
    }

    pub(crate) fn load_u32(&self, cap: &Capability, offset: usize) -> Result<u32, FaultRecord> {
        let mut raw = [0u8; 4];
        self.load_into(cap, offset, &mut raw)?;
        Ok(u32::from_le_bytes(raw))
    }

    pub(crate) fn store_u32(&mut self, cap: &Capability, offset: usize, value: u32) -> Result<(), FaultRecord> {
        self.store(cap, offset, &value.to_le_bytes())
    }

    /// Unchecked view of the whole arena, for inspection and snapshots.
    pub fn raw_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Reserves a zeroed window of `len` bytes (first fit, 16-byte aligned)
    /// and derives its capability from `authority`.
    pub fn reserve(&mut self, authority: &Capability, len: usize) -> Result<(RegionId, Capability), ArenaError> {
        if len == 0 || len % CAP_ALIGN != 0 {
            return Err(ArenaError::InvalidArgument);
        }
        let lo = authority.base().next_multiple_of(CAP_ALIGN);
        let hi = authority.top().min(self.bytes.len());
        let mut cursor = lo;
        let mut slot = self.regions.len();
        for (i, region) in self.regions.iter().enumerate() {
            if region.base >= cursor && region.base - cursor >= len {
                slot = i;
                break;
            }
            cursor = cursor.max(region.base + region.len);
        }
        if slot == self.regions.len() && (cursor > hi || hi - cursor < len) {
            return Err(ArenaError::Exhausted { requested: len });
        }
        let cap = authority.with_address(cursor)?.with_bounds(len)?;
        let id = RegionId(self.next_region);
        self.next_region = self.next_region.wrapping_add(1);
        self.regions.insert(slot, Region { base: cursor, len, id });
        self.reserved += len;
        Ok((id, cap))
    }

    /// Returns a region to the free space, scrubbing its contents. Yields the
    /// region length.
    pub fn release(&mut self, id: RegionId) -> Result<usize, ArenaError> {
        let idx = self
            .regions
            .iter()
            .position(|r| r.id == id)
            .ok_or(ArenaError::UnknownRegion(id))?;
        let region = self.regions.remove(idx);
        self.bytes[region.base..region.base + region.len].fill(0);
        self.reserved -= region.len;
        Ok(region.len)
    }

    pub fn reserved_bytes(&self) -> usize {
        self.reserved
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
}

/// Memory reachable through capabilities. Implemented by the bare arena,
/// whose error is the raw [`FaultRecord`], and by the domain manager, which
/// dispatches faults before reporting them.
pub trait CapMemory {
    type Error;

    fn cap_store(&mut self, cap: &Capability, offset: usize, data: &[u8]) -> Result<(), Self::Error>;

    fn cap_load_into(&mut self, cap: &Capability, offset: usize, out: &mut [u8]) -> Result<(), Self::Error>;
}

impl CapMemory for MemoryArena {
    type Error = FaultRecord;

    fn cap_store(&mut self, cap: &Capability, offset: usize, data: &[u8]) -> Result<(), FaultRecord> {
        self.store(cap, offset, data)
    }

    fn cap_load_into(&mut self, cap: &Capability, offset: usize, out: &mut [u8]) -> Result<(), FaultRecord> {
        self.load_into(cap, offset, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cap_mem::{FaultKind, Permissions};

    #[test]
    fn create_gives_zeroed_root() {
        let (arena, root) = MemoryArena::create(1024).unwrap();
        assert_eq!((root.base(), root.top(), root.address()), (0, 1024, 0));
        assert!(root.is_tagged());
        assert_eq!(arena.load(&root, 0, 64).unwrap(), vec![0u8; 64]);
        assert_eq!(MemoryArena::create(0).unwrap_err(), ArenaError::InvalidArgument);
    }

    #[test]
    fn store_and_load() {
        let (mut arena, root) = MemoryArena::create(64).unwrap();
        let c = root.with_bounds(16).unwrap();
        arena.store(&c, 0, b"hello").unwrap();
        assert_eq!(arena.load(&c, 0, 5).unwrap(), b"hello");
        let before = arena.raw_bytes().to_vec();
        let err = arena.store(&c, 0, &[0xAA; 20]).unwrap_err();
        assert_eq!(err.kind, FaultKind::BoundsViolation);
        assert_eq!(arena.raw_bytes(), &before[..]);
        assert_eq!(arena.load(&c, 10, 8).unwrap_err().kind, FaultKind::BoundsViolation);
        assert_eq!(arena.load(&c.cleared(), 0, 1).unwrap_err().kind, FaultKind::TagViolation);
    }

    #[test]
    fn load_only_cap_cannot_store() {
        let (mut arena, root) = MemoryArena::create(64).unwrap();
        let ro = root.with_perms(Permissions::LOAD_ONLY).unwrap();
        assert_eq!(arena.store(&ro, 0, b"x").unwrap_err().kind, FaultKind::PermissionViolation);
        assert!(arena.load(&ro, 0, 1).is_ok());
    }

    #[test]
    fn foreign_cap_cannot_reach_past_arena() {
        let (_, big_root) = MemoryArena::create(4096).unwrap();
        let (mut small, _) = MemoryArena::create(64).unwrap();
        let err = small.store(&big_root, 100, b"x").unwrap_err();
        assert_eq!(err.kind, FaultKind::BoundsViolation);
    }

    #[test]
    fn regions_first_fit_and_scrub() {
        let (mut arena, root) = MemoryArena::create(256).unwrap();
        let (a, ca) = arena.reserve(&root, 64).unwrap();
        let (b, cb) = arena.reserve(&root, 64).unwrap();
        assert_eq!((ca.base(), cb.base()), (0, 64));
        assert_eq!(arena.reserved_bytes(), 128);
        arena.store(&ca, 0, b"secret").unwrap();
        assert_eq!(arena.release(a).unwrap(), 64);
        assert_eq!(arena.raw_bytes()[..6], [0u8; 6]);
        let (_, cc) = arena.reserve(&root, 32).unwrap();
        assert_eq!(cc.base(), 0);
        let (_, cd) = arena.reserve(&root, 128).unwrap();
        assert_eq!(cd.base(), 128);
        assert_eq!(
            arena.reserve(&root, 48).unwrap_err(),
            ArenaError::Exhausted { requested: 48 }
        );
        assert_eq!(arena.release(b).unwrap(), 64);
        assert_eq!(arena.release(b).unwrap_err(), ArenaError::UnknownRegion(b));
        assert_eq!(arena.reserve(&root, 10).unwrap_err(), ArenaError::InvalidArgument);
    }

    #[test]
    fn copy_checks_both_sides() {
        let (mut arena, root) = MemoryArena::create(128).unwrap();
        let a = root.with_bounds(32).unwrap();
        let b = root.with_address(64).unwrap().with_bounds(16).unwrap();
        arena.store(&a, 0, &[7u8; 32]).unwrap();
        let before = arena.raw_bytes().to_vec();
        assert!(arena.copy(&a, &b, 32).is_err());
        assert_eq!(arena.raw_bytes(), &before[..]);
        arena.copy(&a, &b, 16).unwrap();
        assert_eq!(arena.load(&b, 0, 16).unwrap(), vec![7u8; 16]);
    }
}
