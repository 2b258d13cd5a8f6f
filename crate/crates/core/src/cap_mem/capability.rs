use core::fmt;

/// Allocation granule for capability bounds. Every representable length is a
/// multiple of this.
pub const CAP_ALIGN: usize = 16;

/// Rounds `size` up to the smallest length whose bounds can be encoded.
///
/// The emulated encoding is exact for multiples of 16 bytes, with 16 bytes as
/// the smallest window.
pub const fn round_representable_length(size: usize) -> usize {
    let size = if size < CAP_ALIGN { CAP_ALIGN } else { size };
    match size.checked_add(CAP_ALIGN - 1) {
        Some(s) => s & !(CAP_ALIGN - 1),
        None => usize::MAX & !(CAP_ALIGN - 1),
    }
}

/// Access rights carried by a capability.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Permissions {
    bits: u8,
}

impl Permissions {
    const LOAD: u8 = 1 << 0;
    const STORE: u8 = 1 << 1;
    // Modelled for completeness; nothing in this crate grants it.
    const EXECUTE: u8 = 1 << 2;

    pub const NONE: Permissions = Permissions { bits: 0 };
    pub const LOAD_ONLY: Permissions = Permissions { bits: Self::LOAD };
    pub const STORE_ONLY: Permissions = Permissions { bits: Self::STORE };
    pub const LOAD_STORE: Permissions = Permissions {
        bits: Self::LOAD | Self::STORE,
    };

    pub const fn load(self) -> bool {
        self.bits & Self::LOAD != 0
    }

    pub const fn store(self) -> bool {
        self.bits & Self::STORE != 0
    }

    pub const fn execute(self) -> bool {
        self.bits & Self::EXECUTE != 0
    }

    /// Intersection of both masks. Derivation goes through this, so a
    /// derived capability can only lose rights.
    pub const fn intersect(self, other: Permissions) -> Permissions {
        Permissions {
            bits: self.bits & other.bits,
        }
    }

    /// `true` if every right in `self` is also in `other`.
    pub const fn is_subset_of(self, other: Permissions) -> bool {
        self.bits & !other.bits == 0
    }
}

impl fmt::Debug for Permissions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on: bool, c: char| if on { c } else { '-' };
        write!(
            f,
            "{}{}{}",
            flag(self.load(), 'r'),
            flag(self.store(), 'w'),
            flag(self.execute(), 'x')
        )
    }
}

/// Why a guarded access was refused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultKind {
    TagViolation,
    PermissionViolation,
    BoundsViolation,
}

/// A refused capability access. The access that produced it wrote nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FaultRecord {
    pub kind: FaultKind,
    /// First byte the access tried to touch.
    pub faulting_address: usize,
    pub access_len: usize,
    /// Domain that was active when the fault was dispatched. The capability
    /// layer does not know about domains and leaves this at 0.
    pub domain_udi: u32,
}

impl FaultRecord {
    pub(crate) const fn new(kind: FaultKind, faulting_address: usize, access_len: usize) -> Self {
        FaultRecord {
            kind,
            faulting_address,
            access_len,
            domain_udi: 0,
        }
    }

    pub const fn with_udi(mut self, udi: u32) -> Self {
        self.domain_udi = udi;
        self
    }
}

impl fmt::Display for FaultRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} at {:#x} ({} bytes, domain {})",
            self.kind, self.faulting_address, self.access_len, self.domain_udi
        )
    }
}

impl core::error::Error for FaultRecord {}

/// What a dereference needs from the capability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Load,
    Store,
}

/// Emulated CHERI capability: an arena offset plus the window and rights it
/// may be used with.
///
/// Fields are private. A capability is obtained either as the root of a
/// [`MemoryArena`](super::MemoryArena) or by deriving from another one, and
/// derivation never widens bounds or adds permissions.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Capability {
    address: usize,
    base: usize,
    top: usize,
    perms: Permissions,
    tag: bool,
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Cap {{ addr: {:#x}, [{:#x}, {:#x}), {:?}{} }}",
            self.address,
            self.base,
            self.top,
            self.perms,
            if self.tag { "" } else { ", untagged" }
        )
    }
}

impl Capability {
    pub(crate) const fn root(size: usize) -> Capability {
        Capability {
            address: 0,
            base: 0,
            top: size,
            perms: Permissions::LOAD_STORE,
            tag: true,
        }
    }

    /// Current address. Readable even when the tag is clear.
    pub const fn address(&self) -> usize {
        self.address
    }

    pub const fn base(&self) -> usize {
        self.base
    }

    /// Exclusive upper bound.
    pub const fn top(&self) -> usize {
        self.top
    }

    pub const fn length(&self) -> usize {
        self.top - self.base
    }

    pub const fn perms(&self) -> Permissions {
        self.perms
    }

    pub const fn is_tagged(&self) -> bool {
        self.tag
    }

    fn require_tag(&self, len: usize) -> Result<(), FaultRecord> {
        if self.tag {
            Ok(())
        } else {
            Err(FaultRecord::new(FaultKind::TagViolation, self.address, len))
        }
    }

    /// Same bounds and permissions, new address. The address may lie outside
    /// the bounds; only a dereference through it faults.
    pub fn with_address(&self, address: usize) -> Result<Capability, FaultRecord> {
        self.require_tag(0)?;
        Ok(Capability { address, ..*self })
    }

    /// Narrows the window to `[address, address + len)`.
    pub fn with_bounds(&self, len: usize) -> Result<Capability, FaultRecord> {
        self.require_tag(len)?;
        let fits = self.address >= self.base
            && self
                .address
                .checked_add(len)
                .map_or(false, |end| end <= self.top);
        if !fits {
            return Err(FaultRecord::new(
                FaultKind::BoundsViolation,
                self.address,
                len,
            ));
        }
        Ok(Capability {
            base: self.address,
            top: self.address + len,
            ..*self
        })
    }

    /// Drops every right not present in `mask`.
    pub fn with_perms(&self, mask: Permissions) -> Result<Capability, FaultRecord> {
        self.require_tag(0)?;
        Ok(Capability {
            perms: self.perms.intersect(mask),
            ..*self
        })
    }

    /// Copy with the validity tag cleared. Nothing can be dereferenced or
    /// derived through the result.
    pub const fn cleared(&self) -> Capability {
        Capability {
            tag: false,
            ..*self
        }
    }

    /// `true` if `other`'s window and rights are contained in this one's.
    pub fn covers(&self, other: &Capability) -> bool {
        self.base <= other.base && other.top <= self.top && other.perms.is_subset_of(self.perms)
    }

    /// Checks a dereference of `len` bytes at `address + offset`.
    ///
    /// Tag, then permission, then bounds. On success returns the absolute
    /// start offset of the access.
    pub fn check(&self, offset: usize, len: usize, access: Access) -> Result<usize, FaultRecord> {
        let start = self.address.wrapping_add(offset);
        if !self.tag {
            return Err(FaultRecord::new(FaultKind::TagViolation, start, len));
        }
        let permitted = match access {
            Access::Load => self.perms.load(),
            Access::Store => self.perms.store(),
        };
        if !permitted {
            return Err(FaultRecord::new(FaultKind::PermissionViolation, start, len));
        }
        let in_bounds = self
            .address
            .checked_add(offset)
            .and_then(|s| s.checked_add(len).map(|e| (s, e)))
            .map_or(false, |(s, e)| s >= self.base && e <= self.top);
        if !in_bounds {
            return Err(FaultRecord::new(FaultKind::BoundsViolation, start, len));
        }
        Ok(start)
    }
}
