//! Two-Level Segregated Fit allocator living inside a [`MemoryArena`].
//!
//! Everything the allocator owns (control area, block headers, free-list
//! links) is stored in arena bytes and touched only through capabilities
//! derived from the heap capability handed over at creation. Pointer-sized
//! header fields take 16 bytes, the width of a capability, and payloads are
//! 16-byte aligned.
//!
//! Memory layout of a pool:
//!
//! ```text
//! [control area]? [hdr|payload] [hdr|payload] ... [hdr (sentinel, size 0)]
//!
//! hdr = prev_phys (16) | size + flags (16)
//! free payload starts with next_free (8) | prev_free (8)
//! ```
//!
//! Only the first pool carries the control area.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::cap_mem::{round_representable_length, Capability, FaultRecord, MemoryArena};

pub const ALIGN_SIZE_LOG2: u32 = 4;
pub const ALIGN_SIZE: usize = 1 << ALIGN_SIZE_LOG2;

pub const SL_INDEX_COUNT_LOG2: u32 = 5;
pub const SL_INDEX_COUNT: usize = 1 << SL_INDEX_COUNT_LOG2;
/// Sizes below this share first-level class 0, split linearly.
pub const SMALL_BLOCK_SIZE: usize = 256;
const FL_INDEX_SHIFT: u32 = 8;
pub const FL_INDEX_MAX: u32 = 32;
pub const FL_INDEX_COUNT: usize = (FL_INDEX_MAX - FL_INDEX_SHIFT + 1) as usize;

/// One pointer-sized field, sized for a capability.
const SLOT: usize = 16;
/// `prev_phys` and `size` fields that precede every payload.
pub const BLOCK_HEADER_SIZE: usize = 2 * SLOT;
pub const BLOCK_SIZE_MIN: usize = 16;
pub const BLOCK_SIZE_MAX: usize = 1 << FL_INDEX_MAX;

pub const DEFAULT_MAX_POOL_SIZE: usize = 16 << 20;

const CTRL_FL_BITMAP: usize = 0;
const CTRL_SL_BITMAPS: usize = SLOT;
const CTRL_HEADS: usize = (CTRL_SL_BITMAPS + 4 * FL_INDEX_COUNT).next_multiple_of(SLOT);
/// Bytes taken by the control area at the start of the first pool.
pub const CONTROL_SIZE: usize = CTRL_HEADS + FL_INDEX_COUNT * SL_INDEX_COUNT * SLOT;

/// Fixed cost of a pool: first header plus trailing sentinel header.
pub const POOL_OVERHEAD: usize = 2 * BLOCK_HEADER_SIZE;
pub const MIN_POOL_SIZE: usize = POOL_OVERHEAD + BLOCK_SIZE_MIN;
pub const MIN_FIRST_POOL_SIZE: usize = CONTROL_SIZE + MIN_POOL_SIZE;

const HDR_PREV_PHYS: usize = 0;
const HDR_SIZE: usize = SLOT;
const LINK_NEXT: usize = 0;
const LINK_PREV: usize = 8;

const FLAG_FREE: u64 = 1;
const FLAG_PREV_FREE: u64 = 2;
const FLAG_MASK: u64 = FLAG_FREE | FLAG_PREV_FREE;

const NULL: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TlsfError {
    InvalidArgument,
    OutOfMemory,
    /// Address outside every pool, or not the start of a live block.
    InvalidFree,
    DoubleFree,
    /// The allocator tripped over its own capability. Never expected on
    /// well-formed use.
    Fault(FaultRecord),
}

impl fmt::Display for TlsfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TlsfError::InvalidArgument => f.write_str("invalid argument"),
            TlsfError::OutOfMemory => f.write_str("out of memory"),
            TlsfError::InvalidFree => f.write_str("invalid free"),
            TlsfError::DoubleFree => f.write_str("double free"),
            TlsfError::Fault(fault) => write!(f, "internal capability fault: {fault}"),
        }
    }
}

impl core::error::Error for TlsfError {}

impl From<FaultRecord> for TlsfError {
    fn from(fault: FaultRecord) -> Self {
        TlsfError::Fault(fault)
    }
}

type Result<T> = core::result::Result<T, TlsfError>;

/// First/second level class of `size`.
pub fn mapping_insert(size: usize) -> (usize, usize) {
    if size < SMALL_BLOCK_SIZE {
        (0, size / (SMALL_BLOCK_SIZE / SL_INDEX_COUNT))
    } else {
        let log2 = usize::BITS - 1 - size.leading_zeros();
        let sl = (size >> (log2 - SL_INDEX_COUNT_LOG2)) ^ SL_INDEX_COUNT;
        ((log2 - (FL_INDEX_SHIFT - 1)) as usize, sl)
    }
}

/// Class at which a good-fit search for `size` starts: every block listed
/// there or above is large enough.
fn mapping_search(size: usize) -> (usize, usize) {
    let mut size = size;
    if size >= SMALL_BLOCK_SIZE {
        let log2 = usize::BITS - 1 - size.leading_zeros();
        size = size.saturating_add((1 << (log2 - SL_INDEX_COUNT_LOG2)) - 1);
    }
    mapping_insert(size)
}

/// Handle on a block header, derived from the heap capability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRef {
    cap: Capability,
}

impl BlockRef {
    /// Arena offset of the header.
    pub fn header(&self) -> usize {
        self.cap.address()
    }

    pub fn payload(&self) -> usize {
        self.cap.address() + BLOCK_HEADER_SIZE
    }

    /// Capability the allocator uses to reach this header. It carries the
    /// whole-heap bounds.
    pub fn capability(&self) -> &Capability {
        &self.cap
    }

    fn raw_size(&self, arena: &MemoryArena) -> Result<u64> {
        Ok(arena.load_u64(&self.cap, HDR_SIZE)?)
    }

    pub fn size(&self, arena: &MemoryArena) -> Result<usize> {
        Ok((self.raw_size(arena)? & !FLAG_MASK) as usize)
    }

    pub fn is_free(&self, arena: &MemoryArena) -> Result<bool> {
        Ok(self.raw_size(arena)? & FLAG_FREE != 0)
    }

    fn is_prev_free(&self, arena: &MemoryArena) -> Result<bool> {
        Ok(self.raw_size(arena)? & FLAG_PREV_FREE != 0)
    }

    fn set_size(&self, arena: &mut MemoryArena, size: usize) -> Result<()> {
        let flags = self.raw_size(arena)? & FLAG_MASK;
        Ok(arena.store_u64(&self.cap, HDR_SIZE, size as u64 | flags)?)
    }

    fn set_flag(&self, arena: &mut MemoryArena, flag: u64, on: bool) -> Result<()> {
        let raw = self.raw_size(arena)?;
        let raw = if on { raw | flag } else { raw & !flag };
        Ok(arena.store_u64(&self.cap, HDR_SIZE, raw)?)
    }

    fn prev_phys(&self, arena: &MemoryArena) -> Result<u64> {
        Ok(arena.load_u64(&self.cap, HDR_PREV_PHYS)?)
    }

    fn set_prev_phys(&self, arena: &mut MemoryArena, prev: u64) -> Result<()> {
        Ok(arena.store_u64(&self.cap, HDR_PREV_PHYS, prev)?)
    }

    fn next_free(&self, arena: &MemoryArena) -> Result<u64> {
        Ok(arena.load_u64(&self.cap, BLOCK_HEADER_SIZE + LINK_NEXT)?)
    }

    fn prev_free(&self, arena: &MemoryArena) -> Result<u64> {
        Ok(arena.load_u64(&self.cap, BLOCK_HEADER_SIZE + LINK_PREV)?)
    }

    fn set_links(&self, arena: &mut MemoryArena, next: u64, prev: u64) -> Result<()> {
        arena.store_u64(&self.cap, BLOCK_HEADER_SIZE + LINK_NEXT, next)?;
        Ok(arena.store_u64(&self.cap, BLOCK_HEADER_SIZE + LINK_PREV, prev)?)
    }
}

/// A contiguous region managed by one control.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolDescriptor {
    pub region: Capability,
    pub size: usize,
}

impl PoolDescriptor {
    pub fn start(&self) -> usize {
        self.region.address()
    }

    pub fn end(&self) -> usize {
        self.region.address() + self.size
    }
}

#[derive(Clone, Copy, Debug)]
struct Pool {
    desc: PoolDescriptor,
    blocks_start: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TlsfStats {
    /// Payload bytes held by live allocations (block sizes, not requests).
    pub bytes_allocated: usize,
    pub bytes_reserved: usize,
    pub live_allocations: usize,
}

/// One block seen by a physical walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub header: usize,
    pub size: usize,
    pub free: bool,
}

/// Allocator state. The bitmaps and free-list heads live in the control
/// area at the start of the first pool; this struct keeps the capabilities
/// that reach them and the pool list.
///
/// Every operation takes the arena by reference, so one control is never
/// used from two places at once.
#[derive(Debug)]
pub struct TlsfControl {
    heap_cap: Capability,
    control: Capability,
    pools: Vec<Pool>,
    max_pool_size: usize,
    stats: TlsfStats,
}

impl TlsfControl {
    /// Builds a control at `region.address()` and turns the rest of the first
    /// `size` bytes into one free block. `region`'s bounds become the heap
    /// authority; later pools must fall inside them.
    pub fn create_with_pool(arena: &mut MemoryArena, region: Capability, size: usize) -> Result<Self> {
        Self::create_with_pool_limit(arena, region, size, DEFAULT_MAX_POOL_SIZE)
    }

    pub fn create_with_pool_limit(
        arena: &mut MemoryArena,
        region: Capability,
        size: usize,
        max_pool_size: usize,
    ) -> Result<Self> {
        if max_pool_size > BLOCK_SIZE_MAX || max_pool_size < MIN_FIRST_POOL_SIZE {
            return Err(TlsfError::InvalidArgument);
        }
        if size < MIN_FIRST_POOL_SIZE || size > max_pool_size {
            return Err(TlsfError::InvalidArgument);
        }
        let pool_cap = Self::pool_window(&region, size)?;
        let control = pool_cap
            .with_bounds(CONTROL_SIZE)
            .map_err(|_| TlsfError::InvalidArgument)?;
        arena.fill(&control, 0, CONTROL_SIZE, 0)?;
        for fl in 0..FL_INDEX_COUNT {
            for sl in 0..SL_INDEX_COUNT {
                arena.store_u64(&control, Self::head_offset(fl, sl), NULL)?;
            }
        }
        let mut ctrl = TlsfControl {
            heap_cap: region,
            control,
            pools: Vec::new(),
            max_pool_size,
            stats: TlsfStats::default(),
        };
        ctrl.add_block_area(arena, pool_cap, size, CONTROL_SIZE)?;
        Ok(ctrl)
    }

    fn pool_window(region: &Capability, size: usize) -> Result<Capability> {
        if region.address() % ALIGN_SIZE != 0 || size % ALIGN_SIZE != 0 {
            return Err(TlsfError::InvalidArgument);
        }
        region.with_bounds(size).map_err(|_| TlsfError::InvalidArgument)
    }

    /// Adds another pool. It must sit inside the heap authority and not
    /// overlap an existing pool.
    pub fn add_pool(&mut self, arena: &mut MemoryArena, region: Capability, size: usize) -> Result<()> {
        if size < MIN_POOL_SIZE || size > self.max_pool_size {
            return Err(TlsfError::InvalidArgument);
        }
        let pool_cap = Self::pool_window(&region, size)?;
        if !self.heap_cap.covers(&pool_cap) {
            return Err(TlsfError::InvalidArgument);
        }
        let (start, end) = (pool_cap.base(), pool_cap.top());
        if self
            .pools
            .iter()
            .any(|p| start < p.desc.end() && p.desc.start() < end)
        {
            return Err(TlsfError::InvalidArgument);
        }
        self.add_block_area(arena, pool_cap, size, 0)
    }

    fn add_block_area(&mut self, arena: &mut MemoryArena, pool_cap: Capability, size: usize, skip: usize) -> Result<()> {
        let start = pool_cap.base() + skip;
        let end = pool_cap.base() + size;
        let block = self.block_at(start)?;
        block.set_prev_phys(arena, NULL)?;
        arena.store_u64(&block.cap, HDR_SIZE, (end - start - POOL_OVERHEAD) as u64 | FLAG_FREE)?;
        let sentinel = self.block_at(end - BLOCK_HEADER_SIZE)?;
        sentinel.set_prev_phys(arena, start as u64)?;
        arena.store_u64(&sentinel.cap, HDR_SIZE, FLAG_PREV_FREE)?;
        self.insert_free_block(arena, block)?;
        self.pools.push(Pool {
            desc: PoolDescriptor { region: pool_cap, size },
            blocks_start: start,
        });
        self.stats.bytes_reserved += size;
        Ok(())
    }

    pub fn heap_cap(&self) -> &Capability {
        &self.heap_cap
    }

    pub fn stats(&self) -> TlsfStats {
        self.stats
    }

    pub fn max_pool_size(&self) -> usize {
        self.max_pool_size
    }

    pub fn pools(&self) -> impl Iterator<Item = &PoolDescriptor> + '_ {
        self.pools.iter().map(|p| &p.desc)
    }

    /// Hands back every pool for reclamation, live allocations included.
    pub fn destroy(self) -> Vec<PoolDescriptor> {
        self.pools.into_iter().map(|p| p.desc).collect()
    }

    fn block_at(&self, header: usize) -> Result<BlockRef> {
        Ok(BlockRef {
            cap: self.heap_cap.with_address(header)?,
        })
    }

    fn block_at_link(&self, link: u64) -> Result<Option<BlockRef>> {
        if link == NULL {
            Ok(None)
        } else {
            self.block_at(link as usize).map(Some)
        }
    }

    fn next_phys(&self, arena: &MemoryArena, block: &BlockRef) -> Result<BlockRef> {
        self.block_at(block.payload() + block.size(arena)?)
    }

    const fn head_offset(fl: usize, sl: usize) -> usize {
        CTRL_HEADS + (fl * SL_INDEX_COUNT + sl) * SLOT
    }

    fn fl_bitmap(&self, arena: &MemoryArena) -> Result<u32> {
        Ok(arena.load_u32(&self.control, CTRL_FL_BITMAP)?)
    }

    fn sl_bitmap(&self, arena: &MemoryArena, fl: usize) -> Result<u32> {
        Ok(arena.load_u32(&self.control, CTRL_SL_BITMAPS + 4 * fl)?)
    }

    fn head(&self, arena: &MemoryArena, fl: usize, sl: usize) -> Result<u64> {
        Ok(arena.load_u64(&self.control, Self::head_offset(fl, sl))?)
    }

    fn set_head(&self, arena: &mut MemoryArena, fl: usize, sl: usize, link: u64) -> Result<()> {
        Ok(arena.store_u64(&self.control, Self::head_offset(fl, sl), link)?)
    }

    fn set_class_bits(&self, arena: &mut MemoryArena, fl: usize, sl: usize, on: bool) -> Result<()> {
        let mut sl_map = self.sl_bitmap(arena, fl)?;
        let mut fl_map = self.fl_bitmap(arena)?;
        if on {
            sl_map |= 1 << sl;
            fl_map |= 1 << fl;
        } else {
            sl_map &= !(1 << sl);
            if sl_map == 0 {
                fl_map &= !(1 << fl);
            }
        }
        arena.store_u32(&self.control, CTRL_SL_BITMAPS + 4 * fl, sl_map)?;
        arena.store_u32(&self.control, CTRL_FL_BITMAP, fl_map)?;
        Ok(())
    }

    fn insert_free_block(&mut self, arena: &mut MemoryArena, block: BlockRef) -> Result<()> {
        let (fl, sl) = mapping_insert(block.size(arena)?);
        let head = self.head(arena, fl, sl)?;
        block.set_links(arena, head, NULL)?;
        if let Some(old) = self.block_at_link(head)? {
            let next = old.next_free(arena)?;
            old.set_links(arena, next, block.header() as u64)?;
        }
        self.set_head(arena, fl, sl, block.header() as u64)?;
        self.set_class_bits(arena, fl, sl, true)?;
        #[cfg(debug_assertions)]
        self.debug_check_class(arena, fl, sl);
        Ok(())
    }

    fn remove_free_block(&mut self, arena: &mut MemoryArena, block: BlockRef) -> Result<()> {
        let (fl, sl) = mapping_insert(block.size(arena)?);
        let next = block.next_free(arena)?;
        let prev = block.prev_free(arena)?;
        if let Some(n) = self.block_at_link(next)? {
            let nn = n.next_free(arena)?;
            n.set_links(arena, nn, prev)?;
        }
        match self.block_at_link(prev)? {
            Some(p) => {
                let pp = p.prev_free(arena)?;
                p.set_links(arena, next, pp)?;
            }
            None => {
                self.set_head(arena, fl, sl, next)?;
                if next == NULL {
                    self.set_class_bits(arena, fl, sl, false)?;
                }
            }
        }
        #[cfg(debug_assertions)]
        self.debug_check_class(arena, fl, sl);
        Ok(())
    }

    /// Only the touched class changes on insert/remove, so checking it keeps
    /// the bitmap/list agreement for the whole table.
    #[cfg(debug_assertions)]
    fn debug_check_class(&self, arena: &MemoryArena, fl: usize, sl: usize) {
        let head = self.head(arena, fl, sl).expect("control area readable");
        let sl_map = self.sl_bitmap(arena, fl).expect("control area readable");
        let fl_map = self.fl_bitmap(arena).expect("control area readable");
        debug_assert_eq!(head != NULL, sl_map & (1 << sl) != 0, "bitmap/list mismatch at ({fl}, {sl})");
        debug_assert_eq!(sl_map != 0, fl_map & (1 << fl) != 0, "first-level bit mismatch at {fl}");
    }

    /// Finds a free block of at least `size` bytes without detaching it.
    ///
    /// Good fit first: the search starts at the class `size` rounds up to, so
    /// any block found fits. If that comes up empty, the list of `size`'s own
    /// class is scanned for a block that happens to be large enough, which
    /// lets a request for exactly the remaining space succeed.
    pub fn find_suitable_block(&self, arena: &MemoryArena, size: usize) -> Result<Option<BlockRef>> {
        let size = size.max(BLOCK_SIZE_MIN).next_multiple_of(ALIGN_SIZE);
        if size > BLOCK_SIZE_MAX {
            return Ok(None);
        }
        let (fl, sl) = mapping_search(size);
        if fl < FL_INDEX_COUNT {
            if let Some((fl, sl)) = self.search_from(arena, fl, sl)? {
                return self.block_at_link(self.head(arena, fl, sl)?);
            }
        }
        let (fl, sl) = mapping_insert(size);
        if fl >= FL_INDEX_COUNT {
            return Ok(None);
        }
        let mut link = self.head(arena, fl, sl)?;
        while let Some(block) = self.block_at_link(link)? {
            if block.size(arena)? >= size {
                return Ok(Some(block));
            }
            link = block.next_free(arena)?;
        }
        Ok(None)
    }

    fn search_from(&self, arena: &MemoryArena, fl: usize, sl: usize) -> Result<Option<(usize, usize)>> {
        let mut fl = fl;
        let mut sl_map = self.sl_bitmap(arena, fl)? & (u32::MAX << sl);
        if sl_map == 0 {
            let fl_map = if fl + 1 >= 32 {
                0
            } else {
                self.fl_bitmap(arena)? & (u32::MAX << (fl + 1))
            };
            if fl_map == 0 {
                return Ok(None);
            }
            fl = fl_map.trailing_zeros() as usize;
            sl_map = self.sl_bitmap(arena, fl)?;
        }
        Ok(Some((fl, sl_map.trailing_zeros() as usize)))
    }

    /// Carves `size` bytes off the front of a free, detached block. The rest,
    /// if it can hold a header and a minimum payload, becomes a new free
    /// block and is listed; otherwise the block is used whole.
    pub fn block_split(&mut self, arena: &mut MemoryArena, block: BlockRef, size: usize) -> Result<Option<BlockRef>> {
        let total = block.size(arena)?;
        if total < size {
            return Err(TlsfError::InvalidArgument);
        }
        if total - size < BLOCK_HEADER_SIZE + BLOCK_SIZE_MIN {
            return Ok(None);
        }
        let next = self.next_phys(arena, &block)?;
        block.set_size(arena, size)?;
        let rest = self.block_at(block.payload() + size)?;
        rest.set_prev_phys(arena, block.header() as u64)?;
        arena.store_u64(&rest.cap, HDR_SIZE, (total - size - BLOCK_HEADER_SIZE) as u64 | FLAG_FREE)?;
        next.set_prev_phys(arena, rest.header() as u64)?;
        next.set_flag(arena, FLAG_PREV_FREE, true)?;
        self.insert_free_block(arena, rest)?;
        Ok(Some(rest))
    }

    /// Coalesces a block being freed with free physical neighbours, marks
    /// the result free and lists it.
    pub fn block_merge(&mut self, arena: &mut MemoryArena, block: BlockRef) -> Result<BlockRef> {
        let mut block = block;
        if block.is_prev_free(arena)? {
            if let Some(prev) = self.block_at_link(block.prev_phys(arena)?)? {
                self.remove_free_block(arena, prev)?;
                let merged = prev.size(arena)? + BLOCK_HEADER_SIZE + block.size(arena)?;
                prev.set_size(arena, merged)?;
                block = prev;
            }
        }
        let next = self.next_phys(arena, &block)?;
        let next = if next.is_free(arena)? {
            self.remove_free_block(arena, next)?;
            let merged = block.size(arena)? + BLOCK_HEADER_SIZE + next.size(arena)?;
            block.set_size(arena, merged)?;
            self.next_phys(arena, &block)?
        } else {
            next
        };
        next.set_prev_phys(arena, block.header() as u64)?;
        next.set_flag(arena, FLAG_PREV_FREE, true)?;
        block.set_flag(arena, FLAG_FREE, true)?;
        self.insert_free_block(arena, block)?;
        Ok(block)
    }

    /// Allocates at least `size` bytes (rounded to a representable length).
    /// The capability is bounded to the rounded size.
    pub fn malloc(&mut self, arena: &mut MemoryArena, size: usize) -> Result<Capability> {
        let size = round_representable_length(size);
        let block = self
            .find_suitable_block(arena, size)?
            .ok_or(TlsfError::OutOfMemory)?;
        self.remove_free_block(arena, block)?;
        self.block_split(arena, block, size)?;
        let next = self.next_phys(arena, &block)?;
        next.set_flag(arena, FLAG_PREV_FREE, false)?;
        block.set_flag(arena, FLAG_FREE, false)?;
        self.stats.bytes_allocated += block.size(arena)?;
        self.stats.live_allocations += 1;
        Ok(self
            .heap_cap
            .with_address(block.payload())?
            .with_bounds(size)?)
    }

    /// Header of the block whose payload `payload_cap` points at. The
    /// reference is derived from the heap capability, since the payload
    /// capability's bounds exclude the header.
    pub fn offset_to_block(&self, payload_cap: &Capability) -> Result<BlockRef> {
        let addr = payload_cap.address();
        let inside = self.pools.iter().any(|p| {
            addr >= p.blocks_start + BLOCK_HEADER_SIZE
                && addr < p.desc.end() - BLOCK_HEADER_SIZE
                && (addr - p.blocks_start) % ALIGN_SIZE == 0
        });
        if !inside {
            return Err(TlsfError::InvalidFree);
        }
        self.block_at(addr - BLOCK_HEADER_SIZE)
    }

    /// Resolves `cap` to a live block, rejecting frees that do not match one.
    fn live_block(&self, arena: &MemoryArena, cap: &Capability) -> Result<BlockRef> {
        let block = self.offset_to_block(cap)?;
        let pool = self
            .pools
            .iter()
            .find(|p| block.header() >= p.blocks_start && block.header() < p.desc.end())
            .ok_or(TlsfError::InvalidFree)?;
        if block.is_free(arena)? {
            return Err(TlsfError::DoubleFree);
        }
        let size = block.size(arena)?;
        let end = block.payload().checked_add(size).ok_or(TlsfError::InvalidFree)?;
        if size < BLOCK_SIZE_MIN || size % ALIGN_SIZE != 0 || end > pool.desc.end() - BLOCK_HEADER_SIZE {
            return Err(TlsfError::InvalidFree);
        }
        // Physical neighbours must point back at this header.
        if self.block_at(end)?.prev_phys(arena)? != block.header() as u64 {
            return Err(TlsfError::InvalidFree);
        }
        match self.block_at_link(block.prev_phys(arena)?)? {
            None if block.header() == pool.blocks_start => {}
            Some(prev) if prev.header() >= pool.blocks_start
                && prev.payload() + prev.size(arena)? == block.header() => {}
            _ => return Err(TlsfError::InvalidFree),
        }
        Ok(block)
    }

    pub fn free(&mut self, arena: &mut MemoryArena, cap: &Capability) -> Result<()> {
        let block = self.live_block(arena, cap)?;
        let size = block.size(arena)?;
        self.block_merge(arena, block)?;
        self.stats.bytes_allocated -= size;
        self.stats.live_allocations -= 1;
        Ok(())
    }

    /// Copying reallocation: allocate, copy `min(old payload, new size)`,
    /// free. `None` behaves as [`malloc`](Self::malloc).
    pub fn realloc(&mut self, arena: &mut MemoryArena, cap: Option<&Capability>, size: usize) -> Result<Capability> {
        let Some(old) = cap else {
            return self.malloc(arena, size);
        };
        let block = self.live_block(arena, old)?;
        let old_len = block.size(arena)?;
        let new = self.malloc(arena, size)?;
        let len = old_len.min(new.length());
        let src = self.heap_cap.with_address(block.payload())?.with_bounds(len)?;
        arena.copy(&src, &new, len)?;
        self.free(arena, old)?;
        Ok(new)
    }

    /// Sum of free payload bytes across all free lists.
    pub fn free_bytes(&self, arena: &MemoryArena) -> Result<usize> {
        let mut total = 0;
        for fl in 0..FL_INDEX_COUNT {
            for sl in 0..SL_INDEX_COUNT {
                let mut link = self.head(arena, fl, sl)?;
                while let Some(block) = self.block_at_link(link)? {
                    total += block.size(arena)?;
                    link = block.next_free(arena)?;
                }
            }
        }
        Ok(total)
    }

    /// Physical walk over every pool, sentinels excluded.
    pub fn blocks(&self, arena: &MemoryArena) -> Result<Vec<BlockInfo>> {
        let mut out = Vec::new();
        for pool in &self.pools {
            let sentinel = pool.desc.end() - BLOCK_HEADER_SIZE;
            let mut header = pool.blocks_start;
            while header < sentinel {
                let block = self.block_at(header)?;
                let size = block.size(arena)?;
                if size == 0 {
                    break;
                }
                out.push(BlockInfo {
                    header,
                    size,
                    free: block.is_free(arena)?,
                });
                header = block.payload() + size;
            }
        }
        Ok(out)
    }

    /// `true` if every first/second-level bit agrees with its list head.
    pub fn bitmaps_consistent(&self, arena: &MemoryArena) -> Result<bool> {
        let fl_map = self.fl_bitmap(arena)?;
        for fl in 0..FL_INDEX_COUNT {
            let sl_map = self.sl_bitmap(arena, fl)?;
            if (sl_map != 0) != (fl_map & (1 << fl) != 0) {
                return Ok(false);
            }
            for sl in 0..SL_INDEX_COUNT {
                if (self.head(arena, fl, sl)? != NULL) != (sl_map & (1 << sl) != 0) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Full structural check: gapless physical layout ending at each pool's
    /// sentinel, correct back links and flags, no adjacent free blocks,
    /// every free block listed exactly once in its own class, and bitmaps
    /// matching the lists.
    pub fn check(&self, arena: &MemoryArena) -> core::result::Result<(), String> {
        let err = |e: TlsfError| format!("arena access failed: {e}");
        let mut physical_free = 0usize;
        for pool in &self.pools {
            let sentinel = pool.desc.end() - BLOCK_HEADER_SIZE;
            let mut header = pool.blocks_start;
            let mut prev: Option<(usize, bool)> = None;
            loop {
                let block = self.block_at(header).map_err(err)?;
                let size = block.size(arena).map_err(err)?;
                let free = block.is_free(arena).map_err(err)?;
                let expect_prev = prev.map_or(NULL, |(h, _)| h as u64);
                if block.prev_phys(arena).map_err(err)? != expect_prev {
                    return Err(format!("block {header:#x}: bad prev_phys"));
                }
                let prev_free = prev.map_or(false, |(_, f)| f);
                if block.is_prev_free(arena).map_err(err)? != prev_free {
                    return Err(format!("block {header:#x}: prev_free flag disagrees with neighbour"));
                }
                if header == sentinel {
                    if size != 0 || free {
                        return Err(format!("pool sentinel at {header:#x} corrupted"));
                    }
                    break;
                }
                if size < BLOCK_SIZE_MIN || size % ALIGN_SIZE != 0 {
                    return Err(format!("block {header:#x}: bad size {size}"));
                }
                if free && prev_free {
                    return Err(format!("block {header:#x}: adjacent free blocks"));
                }
                let next = header + BLOCK_HEADER_SIZE + size;
                if next > sentinel {
                    return Err(format!("block {header:#x}: runs past pool end"));
                }
                physical_free += free as usize;
                prev = Some((header, free));
                header = next;
            }
        }
        let mut listed = 0usize;
        let fl_map = self.fl_bitmap(arena).map_err(err)?;
        for fl in 0..FL_INDEX_COUNT {
            let sl_map = self.sl_bitmap(arena, fl).map_err(err)?;
            if (sl_map != 0) != (fl_map & (1 << fl) != 0) {
                return Err(format!("first-level bit {fl} disagrees with second-level map"));
            }
            for sl in 0..SL_INDEX_COUNT {
                let mut link = self.head(arena, fl, sl).map_err(err)?;
                if (link != NULL) != (sl_map & (1 << sl) != 0) {
                    return Err(format!("bit ({fl}, {sl}) disagrees with list head"));
                }
                let mut back = NULL;
                while let Some(block) = self.block_at_link(link).map_err(err)? {
                    listed += 1;
                    if listed > physical_free {
                        return Err(String::from("free lists hold more blocks than the pools"));
                    }
                    if !block.is_free(arena).map_err(err)? {
                        return Err(format!("listed block {:#x} is not free", block.header()));
                    }
                    if mapping_insert(block.size(arena).map_err(err)?) != (fl, sl) {
                        return Err(format!("block {:#x} listed in wrong class", block.header()));
                    }
                    if block.prev_free(arena).map_err(err)? != back {
                        return Err(format!("block {:#x}: broken prev link", block.header()));
                    }
                    back = link;
                    link = block.next_free(arena).map_err(err)?;
                }
            }
        }
        if listed != physical_free {
            return Err(format!("{physical_free} free blocks in pools, {listed} listed"));
        }
        Ok(())
    }
}
