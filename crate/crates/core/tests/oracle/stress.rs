//! Randomized malloc/free/realloc driver checked against [`Extents`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdrad_core::cap_mem::{Capability, MemoryArena};
use sdrad_core::tlsf::{TlsfControl, TlsfError};

use super::{fresh_pool_free, Extents};

pub const POOL: usize = 1 << 20;

#[derive(Debug, Default, Clone, Copy)]
pub struct StressReport {
    pub ops: usize,
    pub out_of_memory: usize,
    pub peak_live: usize,
}

fn request_size(rng: &mut ChaCha8Rng) -> usize {
    match rng.gen_range(0..100) {
        0..=59 => rng.gen_range(0..=256),
        60..=89 => rng.gen_range(257..=4096),
        90..=98 => rng.gen_range(4097..=32768),
        _ => rng.gen_range(32769..=200_000),
    }
}

fn rounded(size: usize) -> usize {
    size.max(16).div_ceil(16) * 16
}

fn verify_fill(arena: &MemoryArena, cap: &Capability, len: usize, fill: u8) -> Result<(), String> {
    let bytes = arena.load(cap, 0, len).map_err(|f| format!("load of live block faulted: {f}"))?;
    if let Some(i) = bytes.iter().position(|&b| b != fill) {
        return Err(format!("block at {:#x} corrupted at +{i}", cap.base()));
    }
    Ok(())
}

fn admit(
    arena: &mut MemoryArena,
    extents: &mut Extents,
    caps: &mut Vec<Capability>,
    pools: &[(usize, usize)],
    cap: Capability,
    size: usize,
    fill: u8,
) -> Result<(), String> {
    if cap.base() % 16 != 0 {
        return Err(format!("misaligned allocation at {:#x}", cap.base()));
    }
    if cap.length() != rounded(size) || cap.address() != cap.base() {
        return Err(format!("bad bounds {cap:?} for request {size}"));
    }
    if !pools.iter().any(|&(s, e)| cap.base() >= s && cap.top() <= e) {
        return Err(format!("allocation {cap:?} outside every pool"));
    }
    extents.insert(cap.base(), cap.length(), fill);
    arena
        .fill(&cap, 0, cap.length(), fill)
        .map_err(|f| format!("fresh allocation not writable: {f}"))?;
    caps.push(cap);
    Ok(())
}

/// Runs `ops` random operations on a two-pool heap. Bitmaps are checked
/// after every operation, the full structure every `full_check_every`.
/// Finishes by freeing everything and comparing with a fresh heap.
pub fn allocator_run(seed: u64, ops: usize, full_check_every: usize) -> Result<StressReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut arena, root) = MemoryArena::create(2 * POOL + 4096).map_err(|e| e.to_string())?;
    let region = root.with_address(4096).unwrap().with_bounds(2 * POOL).unwrap();
    let mut tlsf = TlsfControl::create_with_pool_limit(&mut arena, region, POOL, POOL).map_err(|e| e.to_string())?;
    tlsf.add_pool(&mut arena, region.with_address(4096 + POOL).unwrap(), POOL)
        .map_err(|e| e.to_string())?;
    let pools = [(4096, 4096 + POOL), (4096 + POOL, 4096 + 2 * POOL)];

    let mut extents = Extents::default();
    let mut caps: Vec<Capability> = Vec::new();
    let mut report = StressReport::default();
    for op in 0..ops {
        let choice = rng.gen_range(0..100);
        if caps.is_empty() || choice < 45 {
            let size = request_size(&mut rng);
            let fill = rng.gen();
            match tlsf.malloc(&mut arena, size) {
                Ok(cap) => admit(&mut arena, &mut extents, &mut caps, &pools, cap, size, fill)?,
                Err(TlsfError::OutOfMemory) => report.out_of_memory += 1,
                Err(e) => return Err(format!("op {op}: malloc({size}) failed: {e}")),
            }
        } else if choice < 80 {
            let cap = caps.swap_remove(rng.gen_range(0..caps.len()));
            let (len, fill) = extents.remove(cap.base());
            verify_fill(&arena, &cap, len, fill)?;
            tlsf.free(&mut arena, &cap).map_err(|e| format!("op {op}: free failed: {e}"))?;
        } else {
            let i = rng.gen_range(0..caps.len());
            let old = caps[i];
            let size = request_size(&mut rng);
            let (old_len, fill) = extents.get(old.base()).unwrap();
            match tlsf.realloc(&mut arena, Some(&old), size) {
                Ok(new) => {
                    caps.swap_remove(i);
                    extents.remove(old.base());
                    let kept = old_len.min(new.length());
                    verify_fill(&arena, &new, kept, fill)?;
                    admit(&mut arena, &mut extents, &mut caps, &pools, new, size, fill)?;
                }
                Err(TlsfError::OutOfMemory) => {
                    report.out_of_memory += 1;
                    verify_fill(&arena, &old, old_len, fill)?;
                }
                Err(e) => return Err(format!("op {op}: realloc failed: {e}")),
            }
        }
        report.ops += 1;
        report.peak_live = report.peak_live.max(caps.len());
        if !tlsf.bitmaps_consistent(&arena).map_err(|e| e.to_string())? {
            return Err(format!("op {op}: bitmaps disagree with free lists"));
        }
        if full_check_every > 0 && op % full_check_every == 0 {
            tlsf.check(&arena).map_err(|e| format!("op {op}: {e}"))?;
        }
        let stats = tlsf.stats();
        if stats.live_allocations != caps.len() {
            return Err(format!("op {op}: live count {} vs oracle {}", stats.live_allocations, caps.len()));
        }
    }

    while !caps.is_empty() {
        let cap = caps.swap_remove(rng.gen_range(0..caps.len()));
        extents.remove(cap.base());
        tlsf.free(&mut arena, &cap).map_err(|e| format!("final free failed: {e}"))?;
    }
    tlsf.check(&arena)?;
    let stats = tlsf.stats();
    if stats.bytes_allocated != 0 || stats.live_allocations != 0 {
        return Err(format!("leaked after final frees: {stats:?}"));
    }
    let fresh = fresh_pool_free(POOL, true) + fresh_pool_free(POOL, false);
    let free = tlsf.free_bytes(&arena).map_err(|e| e.to_string())?;
    if free != fresh {
        return Err(format!("free bytes {free} after final frees, fresh heap has {fresh}"));
    }
    let blocks = tlsf.blocks(&arena).map_err(|e| e.to_string())?;
    if blocks.len() != 2 || blocks.iter().any(|b| !b.free) {
        return Err(format!("expected one free block per pool, found {blocks:?}"));
    }
    Ok(report)
}
