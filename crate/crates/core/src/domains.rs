//! Domain table, scoped checkpoints and the per-domain heap facade.
//!
//! A domain is entered through [`Manager::domain_call`] (or the lower-level
//! [`Manager::domain_setup_scoped`]). The call boundary is the domain's
//! checkpoint. When a guarded access inside the domain faults, the manager
//! records a pending rewind to the innermost live checkpoint and from then on
//! refuses every guarded operation, so the routine can do nothing but return.
//! The boundary then discards the domain (and everything nested under it),
//! restores the caller's view of the table and reports
//! [`DomainOutcome::Aborted`].
//!
//! A fault while the main domain is active has no checkpoint to go back to
//! and becomes [`Trap::Terminate`].

use alloc::vec::Vec;
use core::fmt;

use crate::cap_mem::{
    round_representable_length, ArenaError, CapMemory, Capability, FaultRecord, MemoryArena, RegionId,
};
use crate::tlsf::{PoolDescriptor, TlsfControl, TlsfError, TlsfStats, DEFAULT_MAX_POOL_SIZE, MIN_POOL_SIZE};

/// Highest usable domain identifier. Slot 0 belongs to the main domain.
pub const NUMBER_MAX_DOMAIN: u32 = 15;
pub const DOMAIN_SLOTS: usize = NUMBER_MAX_DOMAIN as usize + 1;
/// Value carried by every rewind caused by a protection violation.
pub const REWIND_CODE: i32 = 14;
pub const APP_DEFAULT_HEAP_SIZE: usize = 4 << 20;

/// Unique domain identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Udi(u32);

impl Udi {
    pub const MAIN: Udi = Udi(0);

    pub const fn new(raw: u32) -> Udi {
        Udi(raw)
    }

    pub const fn get(self) -> u32 {
        self.0
    }

    /// `true` for 1..=15, the identifiers a caller may set up.
    pub const fn is_user(self) -> bool {
        self.0 >= 1 && self.0 <= NUMBER_MAX_DOMAIN
    }

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Udi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Result codes of the setup/enter/exit API. Positive means success.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum StatusCode {
    SuccessfulInitialize = 1,
    AlreadyInitialize = 2,
    /// Enter, exit or destroy went through.
    Success = 3,
    UdiOutOfBounds = -1,
    NotInitialized = -2,
    AbnormalExit = -3,
}

impl StatusCode {
    pub const fn value(self) -> i32 {
        self as i32
    }

    pub const fn is_success(self) -> bool {
        self.value() > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum State {
    #[default]
    Uninit,
    Init,
}

/// Opaque rewind token. Valid only while the scope that created it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CheckpointId(u64);

#[derive(Debug)]
struct DomainHeap {
    tlsf: TlsfControl,
    region: RegionId,
    region_cap: Capability,
}

#[derive(Debug, Default)]
pub struct DomainInfo {
    checkpoint: Option<CheckpointId>,
    parent_udi: Udi,
    heap: Option<DomainHeap>,
    domain_init: State,
    heap_init: State,
}

/// Comparable snapshot of a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotSummary {
    pub parent_udi: Udi,
    pub domain_init: State,
    pub heap_init: State,
    pub heap_stats: Option<TlsfStats>,
    pub heap_base: Option<usize>,
}

impl DomainInfo {
    pub fn parent_udi(&self) -> Udi {
        self.parent_udi
    }

    pub fn domain_init(&self) -> State {
        self.domain_init
    }

    pub fn heap_init(&self) -> State {
        self.heap_init
    }

    pub fn checkpoint(&self) -> Option<CheckpointId> {
        self.checkpoint
    }

    pub fn heap_stats(&self) -> Option<TlsfStats> {
        self.heap.as_ref().map(|h| h.tlsf.stats())
    }

    /// Capability over the whole heap reservation, if the heap exists.
    pub fn heap_region(&self) -> Option<Capability> {
        self.heap.as_ref().map(|h| h.region_cap)
    }

    pub fn heap_pools(&self) -> Vec<PoolDescriptor> {
        self.heap
            .as_ref()
            .map(|h| h.tlsf.pools().copied().collect())
            .unwrap_or_default()
    }

    pub fn summary(&self) -> SlotSummary {
        SlotSummary {
            parent_udi: self.parent_udi,
            domain_init: self.domain_init,
            heap_init: self.heap_init,
            heap_stats: self.heap_stats(),
            heap_base: self.heap_region().map(|c| c.base()),
        }
    }
}

/// How control leaves a domain after a protection fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trap {
    /// Unwinding towards the checkpoint of `udi`.
    Rewind { udi: Udi, fault: FaultRecord },
    /// No checkpoint to rewind to: the process-level termination path.
    Terminate(FaultRecord),
}

impl Trap {
    pub fn fault(&self) -> FaultRecord {
        match *self {
            Trap::Rewind { fault, .. } | Trap::Terminate(fault) => fault,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainError {
    Status(StatusCode),
    Alloc(TlsfError),
    /// The arena could not host the heap.
    HeapInit(ArenaError),
    /// The domain is already on the active chain.
    Reentrant(Udi),
    Trap(Trap),
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainError::Status(code) => write!(f, "domain API returned {code:?}"),
            DomainError::Alloc(e) => write!(f, "allocation failed: {e}"),
            DomainError::HeapInit(e) => write!(f, "heap initialisation failed: {e}"),
            DomainError::Reentrant(udi) => write!(f, "domain {udi} is already active"),
            DomainError::Trap(Trap::Rewind { udi, fault }) => {
                write!(f, "rewinding to domain {udi} after {fault}")
            }
            DomainError::Trap(Trap::Terminate(fault)) => write!(f, "terminated after {fault}"),
        }
    }
}

impl core::error::Error for DomainError {}

impl From<TlsfError> for DomainError {
    fn from(e: TlsfError) -> Self {
        DomainError::Alloc(e)
    }
}

impl From<Trap> for DomainError {
    fn from(t: Trap) -> Self {
        DomainError::Trap(t)
    }
}

/// Result of running a routine inside a domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainOutcome<R> {
    Normal(R),
    Aborted { fault: FaultRecord, rewind_code: i32 },
}

impl<R> DomainOutcome<R> {
    pub fn is_aborted(&self) -> bool {
        matches!(self, DomainOutcome::Aborted { .. })
    }
}

/// Result of [`Manager::domain_setup_scoped`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetupOutcome<R> {
    /// Setup succeeded with `status` and the body returned.
    Ran { status: StatusCode, value: R },
    /// Setup refused; the body did not run.
    Rejected(StatusCode),
    /// The body faulted and was rewound.
    Abnormal { fault: FaultRecord, rewind_code: i32 },
}

impl<R> SetupOutcome<R> {
    /// The code the setup call reports, [`StatusCode::AbnormalExit`] after a
    /// rewind.
    pub fn status(&self) -> StatusCode {
        match self {
            SetupOutcome::Ran { status, .. } => *status,
            SetupOutcome::Rejected(status) => *status,
            SetupOutcome::Abnormal { .. } => StatusCode::AbnormalExit,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ManagerConfig {
    pub arena_size: usize,
    /// Heap size when `heap_size_source` yields nothing.
    pub default_heap_size: usize,
    pub max_pool_size: usize,
    /// Consulted at every heap initialisation; the std layer plugs the
    /// `APP_HEAP_SIZE` lookup in here.
    pub heap_size_source: Option<fn() -> Option<usize>>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            arena_size: DOMAIN_SLOTS * APP_DEFAULT_HEAP_SIZE,
            default_heap_size: APP_DEFAULT_HEAP_SIZE,
            max_pool_size: DEFAULT_MAX_POOL_SIZE,
            heap_size_source: None,
        }
    }
}

/// Pool sizes for a heap of `heap_size` bytes: one pool up to `max_pool`,
/// then full pools while more than `max_pool` remains, then the remainder.
pub fn pool_sizes(heap_size: usize, max_pool: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    if heap_size <= max_pool {
        sizes.push(heap_size);
        return sizes;
    }
    sizes.push(max_pool);
    let mut remaining = heap_size - max_pool;
    while remaining > max_pool {
        sizes.push(max_pool);
        remaining -= max_pool;
    }
    sizes.push(remaining);
    sizes
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    checkpoint: CheckpointId,
    udi: Udi,
    fault: FaultRecord,
}

struct ScopeFrame {
    id: CheckpointId,
    udi: Udi,
    active: Udi,
    depth: usize,
    prev_checkpoint: Option<CheckpointId>,
}

/// The domain table plus the arena all heaps live in. One per execution
/// context; not shared.
pub struct Manager {
    arena: MemoryArena,
    root: Capability,
    config: ManagerConfig,
    active: Udi,
    slots: [DomainInfo; DOMAIN_SLOTS],
    // domains entered before the active one, innermost last
    enter_stack: Vec<Udi>,
    live: Vec<CheckpointId>,
    next_checkpoint: u64,
    pending: Option<Pending>,
    terminated: Option<FaultRecord>,
}

impl fmt::Debug for Manager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Manager")
            .field("active", &self.active)
            .field("arena", &self.arena)
            .field("pending", &self.pending)
            .field("terminated", &self.terminated)
            .finish()
    }
}

impl Manager {
    pub fn new(config: ManagerConfig) -> Result<Manager, ArenaError> {
        let (arena, root) = MemoryArena::create(config.arena_size)?;
        Ok(Manager {
            arena,
            root,
            config,
            active: Udi::MAIN,
            slots: core::array::from_fn(|_| DomainInfo::default()),
            enter_stack: Vec::new(),
            live: Vec::new(),
            next_checkpoint: 0,
            pending: None,
            terminated: None,
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn active_domain(&self) -> Udi {
        self.active
    }

    pub fn slot(&self, udi: Udi) -> Option<&DomainInfo> {
        self.slots.get(udi.index())
    }

    pub fn arena(&self) -> &MemoryArena {
        &self.arena
    }

    pub fn arena_reserved_bytes(&self) -> usize {
        self.arena.reserved_bytes()
    }

    /// Fault that ended the process-level path, if any.
    pub fn terminated(&self) -> Option<FaultRecord> {
        self.terminated
    }

    pub fn rewind_pending(&self) -> bool {
        self.pending.is_some()
    }

    fn ensure_running(&self) -> Result<(), DomainError> {
        if let Some(fault) = self.terminated {
            return Err(Trap::Terminate(fault).into());
        }
        if let Some(p) = self.pending {
            return Err(Trap::Rewind { udi: p.udi, fault: p.fault }.into());
        }
        Ok(())
    }

    fn on_active_chain(&self, udi: Udi) -> bool {
        self.active == udi || self.enter_stack.contains(&udi)
    }

    /// Initialises slot `udi` with the active domain as parent.
    ///
    /// This call alone establishes no rewind target; a fault in a domain set
    /// up this way rewinds to the nearest enclosing live checkpoint. Use
    /// [`domain_setup_scoped`](Self::domain_setup_scoped) or
    /// [`domain_call`](Self::domain_call) to make the domain itself
    /// rewindable.
    pub fn domain_setup(&mut self, udi: Udi) -> StatusCode {
        if self.ensure_running().is_err() {
            return StatusCode::AbnormalExit;
        }
        if !udi.is_user() {
            return StatusCode::UdiOutOfBounds;
        }
        let active = self.active;
        let slot = &mut self.slots[udi.index()];
        if slot.domain_init == State::Init {
            return StatusCode::AlreadyInitialize;
        }
        slot.domain_init = State::Init;
        slot.parent_udi = active;
        slot.checkpoint = None;
        StatusCode::SuccessfulInitialize
    }

    pub fn domain_enter(&mut self, udi: Udi) -> StatusCode {
        if self.ensure_running().is_err() {
            return StatusCode::AbnormalExit;
        }
        if !udi.is_user() {
            return StatusCode::UdiOutOfBounds;
        }
        if self.slots[udi.index()].domain_init != State::Init {
            return StatusCode::NotInitialized;
        }
        self.enter_stack.push(self.active);
        self.active = udi;
        StatusCode::Success
    }

    /// Leaves the active domain, which stays initialised for later use.
    /// Fails with [`StatusCode::UdiOutOfBounds`] in the main domain.
    pub fn domain_exit(&mut self) -> StatusCode {
        if self.ensure_running().is_err() {
            return StatusCode::AbnormalExit;
        }
        if self.active == Udi::MAIN {
            return StatusCode::UdiOutOfBounds;
        }
        let parent = self.slots[self.active.index()].parent_udi;
        self.active = self.enter_stack.pop().unwrap_or(parent);
        StatusCode::Success
    }

    /// Sets up `udi` with a checkpoint at this call and runs `body` if setup
    /// succeeded. The body is expected to enter the domain, do its work and
    /// exit.
    ///
    /// A fault that rewinds to this checkpoint ends the body early; the slot
    /// and its descendants are discarded and [`SetupOutcome::Abnormal`] is
    /// returned with the active domain restored.
    pub fn domain_setup_scoped<R>(
        &mut self,
        udi: Udi,
        body: impl FnOnce(&mut Manager) -> Result<R, DomainError>,
    ) -> Result<SetupOutcome<R>, DomainError> {
        self.ensure_running()?;
        if udi.is_user() && self.on_active_chain(udi) {
            return Err(DomainError::Reentrant(udi));
        }
        let status = self.domain_setup(udi);
        if !status.is_success() {
            return Ok(SetupOutcome::Rejected(status));
        }
        let id = CheckpointId(self.next_checkpoint);
        self.next_checkpoint += 1;
        let frame = ScopeFrame {
            id,
            udi,
            active: self.active,
            depth: self.enter_stack.len(),
            prev_checkpoint: self.slots[udi.index()].checkpoint.replace(id),
        };
        self.live.push(id);
        let result = body(self);
        Ok(match self.close_scope(frame, result)? {
            DomainOutcome::Normal(value) => SetupOutcome::Ran { status, value },
            DomainOutcome::Aborted { fault, rewind_code } => SetupOutcome::Abnormal { fault, rewind_code },
        })
    }

    fn close_scope<R>(&mut self, frame: ScopeFrame, result: Result<R, DomainError>) -> Result<DomainOutcome<R>, DomainError> {
        let top = self.live.pop();
        debug_assert_eq!(top, Some(frame.id), "checkpoint scopes closed out of order");
        if let Some(p) = self.pending.filter(|p| p.checkpoint == frame.id) {
            self.pending = None;
            self.destroy_subtree(frame.udi);
            self.active = frame.active;
            self.enter_stack.truncate(frame.depth);
            return Ok(DomainOutcome::Aborted {
                fault: p.fault,
                rewind_code: REWIND_CODE,
            });
        }
        // Terminating, or rewinding past this scope to an outer one.
        self.ensure_running()?;
        let slot = &mut self.slots[frame.udi.index()];
        if slot.domain_init == State::Init {
            slot.checkpoint = frame.prev_checkpoint;
        }
        self.active = frame.active;
        self.enter_stack.truncate(frame.depth);
        result.map(DomainOutcome::Normal)
    }

    /// Runs `routine` inside `udi`: setup if needed, enter, run, exit.
    ///
    /// Returns [`DomainOutcome::Aborted`] if a fault rewound to this call; in
    /// that case the domain and its descendants are destroyed and all other
    /// manager state is as before the call. Errors from the routine that are
    /// not faults pass through after a normal exit.
    pub fn domain_call<R>(
        &mut self,
        udi: Udi,
        routine: impl FnOnce(&mut Manager) -> Result<R, DomainError>,
    ) -> Result<DomainOutcome<R>, DomainError> {
        let outcome = self.domain_setup_scoped(udi, |m| {
            let entered = m.domain_enter(udi);
            if !entered.is_success() {
                return Err(DomainError::Status(entered));
            }
            routine(m)
        })?;
        match outcome {
            SetupOutcome::Ran { value, .. } => Ok(DomainOutcome::Normal(value)),
            SetupOutcome::Rejected(status) => Err(DomainError::Status(status)),
            SetupOutcome::Abnormal { fault, rewind_code } => Ok(DomainOutcome::Aborted { fault, rewind_code }),
        }
    }

    /// Destroys `udi` and every domain nested under it, releasing their
    /// heaps. An uninitialised slot is left alone.
    pub fn domain_destroy(&mut self, udi: Udi) -> StatusCode {
        if !udi.is_user() {
            return StatusCode::UdiOutOfBounds;
        }
        if self.slots[udi.index()].domain_init == State::Uninit {
            return StatusCode::Success;
        }
        let parent = self.slots[udi.index()].parent_udi;
        let removed = self.destroy_subtree(udi);
        if removed & (1 << self.active.index()) != 0 {
            self.active = parent;
        }
        self.enter_stack.retain(|u| removed & (1 << u.index()) == 0);
        StatusCode::Success
    }

    /// Post-order teardown. Returns the set of destroyed slots as a bitmask.
    fn destroy_subtree(&mut self, udi: Udi) -> u32 {
        let mut removed = 0u32;
        self.destroy_rec(udi, &mut removed);
        removed
    }

    fn destroy_rec(&mut self, udi: Udi, removed: &mut u32) {
        *removed |= 1 << udi.index();
        for child in 1..=NUMBER_MAX_DOMAIN {
            let c = Udi(child);
            let slot = &self.slots[c.index()];
            if *removed & (1 << child) == 0 && slot.domain_init == State::Init && slot.parent_udi == udi {
                self.destroy_rec(c, removed);
            }
        }
        let slot = core::mem::take(&mut self.slots[udi.index()]);
        if let Some(heap) = slot.heap {
            let _pools = heap.tlsf.destroy();
            // The region was reserved by heap_init and is only released here.
            let released = self.arena.release(heap.region);
            debug_assert!(released.is_ok());
        }
    }

    /// Routes a protection fault.
    ///
    /// In a domain, marks a rewind to the innermost live checkpoint on the
    /// active chain; guarded operations fail until that checkpoint's scope
    /// has closed. In the main domain, or with no live checkpoint, the
    /// manager enters the termination state for good.
    pub fn fault_dispatch(&mut self, fault: FaultRecord) -> Trap {
        let fault = fault.with_udi(self.active.get());
        if let Some(done) = self.terminated {
            return Trap::Terminate(done);
        }
        if let Some(p) = self.pending {
            return Trap::Rewind { udi: p.udi, fault: p.fault };
        }
        let chain = core::iter::once(self.active).chain(self.enter_stack.iter().rev().copied());
        let target = chain
            .take_while(|u| *u != Udi::MAIN)
            .find_map(|u| {
                self.slots[u.index()]
                    .checkpoint
                    .filter(|id| self.live.contains(id))
                    .map(|id| (u, id))
            });
        match target {
            Some((udi, checkpoint)) => {
                self.pending = Some(Pending { checkpoint, udi, fault });
                Trap::Rewind { udi, fault }
            }
            None => {
                self.terminated = Some(fault);
                Trap::Terminate(fault)
            }
        }
    }

    /// Creates the active domain's heap if it does not exist yet. The size
    /// comes from the configured source, else the default; the reservation is
    /// split into pools of at most `max_pool_size`.
    pub fn heap_init(&mut self) -> Result<(), DomainError> {
        self.ensure_running()?;
        let idx = self.active.index();
        if self.slots[idx].heap_init == State::Init {
            return Ok(());
        }
        let requested = self
            .config
            .heap_size_source
            .and_then(|source| source())
            .unwrap_or(self.config.default_heap_size);
        let size = requested
            .checked_next_multiple_of(crate::tlsf::ALIGN_SIZE)
            .ok_or(DomainError::HeapInit(ArenaError::InvalidArgument))?;
        let (region, region_cap) = self.arena.reserve(&self.root, size).map_err(DomainError::HeapInit)?;
        match self.build_heap(region_cap, size) {
            Ok(tlsf) => {
                let slot = &mut self.slots[idx];
                slot.heap = Some(DomainHeap { tlsf, region, region_cap });
                slot.heap_init = State::Init;
                Ok(())
            }
            Err(e) => {
                let _ = self.arena.release(region);
                Err(e.into())
            }
        }
    }

    fn build_heap(&mut self, region: Capability, size: usize) -> Result<TlsfControl, TlsfError> {
        let max = self.config.max_pool_size;
        let sizes = pool_sizes(size, max);
        let mut tlsf = TlsfControl::create_with_pool_limit(&mut self.arena, region, sizes[0], max)?;
        let mut offset = sizes[0];
        for &pool in &sizes[1..] {
            // a tail too small to hold a block stays unused
            if pool >= MIN_POOL_SIZE {
                let at = region.with_address(region.base() + offset)?;
                tlsf.add_pool(&mut self.arena, at, pool)?;
            }
            offset += pool;
        }
        Ok(tlsf)
    }

    fn active_heap(&mut self) -> Result<(&mut TlsfControl, &mut MemoryArena), DomainError> {
        match self.slots[self.active.index()].heap.as_mut() {
            Some(heap) => Ok((&mut heap.tlsf, &mut self.arena)),
            None => Err(DomainError::Alloc(TlsfError::InvalidFree)),
        }
    }

    /// `malloc` for the active domain: lazy heap creation, representable
    /// rounding, bounds set to the rounded size.
    pub fn dalloc(&mut self, size: usize) -> Result<Capability, DomainError> {
        self.heap_init()?;
        let rounded = round_representable_length(size);
        let (tlsf, arena) = self.active_heap()?;
        let cap = tlsf.malloc(arena, rounded)?;
        Ok(cap.with_bounds(rounded).map_err(TlsfError::from)?)
    }

    /// `free` for the active domain. The header is reached from the heap
    /// capability; a capability from another domain's heap is rejected.
    pub fn dfree(&mut self, cap: &Capability) -> Result<(), DomainError> {
        self.ensure_running()?;
        let (tlsf, arena) = self.active_heap()?;
        Ok(tlsf.free(arena, cap)?)
    }

    pub fn dcalloc(&mut self, count: usize, size: usize) -> Result<Capability, DomainError> {
        let total = count
            .checked_mul(size)
            .ok_or(DomainError::Alloc(TlsfError::OutOfMemory))?;
        let cap = self.dalloc(total)?;
        self.arena
            .fill(&cap, 0, cap.length(), 0)
            .map_err(TlsfError::from)?;
        Ok(cap)
    }

    /// Allocate, copy, free. `None` is a plain allocation.
    pub fn drealloc(&mut self, cap: Option<&Capability>, size: usize) -> Result<Capability, DomainError> {
        self.heap_init()?;
        let rounded = round_representable_length(size);
        let (tlsf, arena) = self.active_heap()?;
        Ok(tlsf.realloc(arena, cap, rounded)?)
    }

    /// Guarded store. A fault is dispatched before it is returned.
    pub fn store(&mut self, cap: &Capability, offset: usize, data: &[u8]) -> Result<(), DomainError> {
        self.ensure_running()?;
        match self.arena.store(cap, offset, data) {
            Ok(()) => Ok(()),
            Err(fault) => Err(self.fault_dispatch(fault).into()),
        }
    }

    pub fn load_into(&mut self, cap: &Capability, offset: usize, out: &mut [u8]) -> Result<(), DomainError> {
        self.ensure_running()?;
        match self.arena.load_into(cap, offset, out) {
            Ok(()) => Ok(()),
            Err(fault) => Err(self.fault_dispatch(fault).into()),
        }
    }

    pub fn load(&mut self, cap: &Capability, offset: usize, len: usize) -> Result<Vec<u8>, DomainError> {
        let mut out = alloc::vec![0u8; len];
        self.load_into(cap, offset, &mut out)?;
        Ok(out)
    }
}

impl CapMemory for Manager {
    type Error = DomainError;

    fn cap_store(&mut self, cap: &Capability, offset: usize, data: &[u8]) -> Result<(), DomainError> {
        self.store(cap, offset, data)
    }

    fn cap_load_into(&mut self, cap: &Capability, offset: usize, out: &mut [u8]) -> Result<(), DomainError> {
        self.load_into(cap, offset, out)
    }
}
