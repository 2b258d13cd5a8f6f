mod oracle;

use oracle::{fresh_pool_free, stress, ClassTable, Extents};
use proptest::prelude::*;
use sdrad_core::cap_mem::{Capability, MemoryArena};
use sdrad_core::tlsf::{mapping_insert, TlsfControl, TlsfError, CONTROL_SIZE, POOL_OVERHEAD};

fn heap(size: usize) -> (MemoryArena, Capability, TlsfControl) {
    let (mut arena, root) = MemoryArena::create(size + 4096).unwrap();
    let region = root.with_address(0).unwrap().with_bounds(size + 4096).unwrap();
    let tlsf = TlsfControl::create_with_pool(&mut arena, region, size).unwrap();
    (arena, region, tlsf)
}

#[test]
fn mapping_matches_class_table() {
    let table = ClassTable::up_to(65536);
    for (size, fl, sl) in table.enumerate(16, 65536) {
        assert_eq!(mapping_insert(size), (fl, sl), "size {size}");
    }
    assert_eq!(table.class_of(100), Some((0, 12)));
    assert_eq!(table.class_of(460), Some((1, 25)));
    assert_eq!(table.class_of(256), Some((1, 0)));
}

#[test]
fn control_layout_matches_model() {
    assert_eq!(CONTROL_SIZE, oracle::control_bytes());
    assert_eq!(POOL_OVERHEAD, 2 * oracle::HEADER);
}

#[test]
fn fresh_pool_is_one_free_block() {
    let (arena, _, tlsf) = heap(64 << 10);
    let blocks = tlsf.blocks(&arena).unwrap();
    assert_eq!(blocks.len(), 1);
    assert!(blocks[0].free);
    assert_eq!(blocks[0].size, fresh_pool_free(64 << 10, true));
    assert_eq!(tlsf.stats().bytes_reserved, 64 << 10);
    assert!(tlsf.bitmaps_consistent(&arena).unwrap());
}

#[test]
fn whole_remaining_space_then_oom() {
    let (mut arena, _, mut tlsf) = heap(64 << 10);
    let all = fresh_pool_free(64 << 10, true);
    let cap = tlsf.malloc(&mut arena, all).unwrap();
    assert_eq!(cap.length(), all);
    assert_eq!(tlsf.malloc(&mut arena, 16).unwrap_err(), TlsfError::OutOfMemory);
}

#[test]
fn added_pool_capacity() {
    let (mut arena, region, mut tlsf) = heap(64 << 10);
    let before = tlsf.free_bytes(&arena).unwrap();
    let (mut big, root) = MemoryArena::create((1 << 20) + (64 << 10)).unwrap();
    let region2 = root.with_bounds((1 << 20) + (64 << 10)).unwrap();
    let mut t2 = TlsfControl::create_with_pool(&mut big, region2, 64 << 10).unwrap();
    t2.add_pool(&mut big, region2.with_address(64 << 10).unwrap(), 1 << 20).unwrap();
    assert_eq!(
        t2.free_bytes(&big).unwrap(),
        before + fresh_pool_free(1 << 20, false)
    );
    assert_eq!(t2.stats().bytes_reserved, (64 << 10) + (1 << 20));
    assert_eq!(t2.pools().count(), 2);
    // overlap with the first pool
    let overlap = region.with_address(4096).unwrap();
    assert_eq!(tlsf.add_pool(&mut arena, overlap, 1024).unwrap_err(), TlsfError::InvalidArgument);
}

#[test]
fn exhausting_first_pool_spills_to_second() {
    let size = 64 << 10;
    let (mut arena, root) = MemoryArena::create(2 * size).unwrap();
    let region = root.with_bounds(2 * size).unwrap();
    let mut tlsf = TlsfControl::create_with_pool(&mut arena, region, size).unwrap();
    let first = tlsf.malloc(&mut arena, fresh_pool_free(size, true)).unwrap();
    assert!(first.top() <= size);
    assert_eq!(tlsf.malloc(&mut arena, 64).unwrap_err(), TlsfError::OutOfMemory);
    tlsf.add_pool(&mut arena, region.with_address(size).unwrap(), size).unwrap();
    let next = tlsf.malloc(&mut arena, 64).unwrap();
    assert!(next.base() >= size);
    // an exact fill of the second pool leaves nothing anywhere
    let rest = tlsf.free_bytes(&arena).unwrap();
    tlsf.malloc(&mut arena, rest).unwrap();
    assert_eq!(tlsf.malloc(&mut arena, 16).unwrap_err(), TlsfError::OutOfMemory);
}

#[test]
fn good_fit_skips_too_small_class() {
    let (mut arena, _, mut tlsf) = heap(64 << 10);
    // carve free blocks of 64 and 512 separated by live guards
    let a = tlsf.malloc(&mut arena, 64).unwrap();
    let _g1 = tlsf.malloc(&mut arena, 16).unwrap();
    let b = tlsf.malloc(&mut arena, 512).unwrap();
    let _g2 = tlsf.malloc(&mut arena, 16).unwrap();
    let rest = tlsf.free_bytes(&arena).unwrap();
    let _fill = tlsf.malloc(&mut arena, rest).unwrap();
    tlsf.free(&mut arena, &a).unwrap();
    tlsf.free(&mut arena, &b).unwrap();
    let found = tlsf.find_suitable_block(&arena, 112).unwrap().unwrap();
    assert_eq!(found.payload(), b.base());
    assert!(tlsf.find_suitable_block(&arena, 1024).unwrap().is_none());
}

#[test]
fn adjacent_frees_coalesce() {
    let (mut arena, _, mut tlsf) = heap(64 << 10);
    let a = tlsf.malloc(&mut arena, 64).unwrap();
    let b = tlsf.malloc(&mut arena, 128).unwrap();
    let c = tlsf.malloc(&mut arena, 32).unwrap();
    let _d = tlsf.malloc(&mut arena, 32).unwrap();
    tlsf.free(&mut arena, &b).unwrap();
    // middle of three allocated: nothing to merge with
    assert!(tlsf.blocks(&arena).unwrap().iter().any(|x| x.free && x.size == 128));
    tlsf.free(&mut arena, &a).unwrap();
    let blocks = tlsf.blocks(&arena).unwrap();
    assert_eq!(blocks[0].size, 64 + 128 + oracle::HEADER);
    assert!(blocks[0].free);
    tlsf.free(&mut arena, &c).unwrap();
    assert_eq!(tlsf.blocks(&arena).unwrap()[0].size, 64 + 128 + 32 + 2 * oracle::HEADER);
    tlsf.check(&arena).unwrap();
}

#[test]
fn header_records_rounded_size() {
    let (mut arena, _, mut tlsf) = heap(64 << 10);
    for req in [0, 5, 16, 17, 100, 460, 4000] {
        let cap = tlsf.malloc(&mut arena, req).unwrap();
        let block = tlsf.offset_to_block(&cap).unwrap();
        assert_eq!(block.size(&arena).unwrap(), req.max(16).div_ceil(16) * 16);
        assert_eq!(block.header() + oracle::HEADER, cap.base());
        // the header reference carries whole-heap authority
        assert_eq!(block.capability().base(), tlsf.heap_cap().base());
    }
}

#[test]
fn destroy_returns_every_pool() {
    let (mut arena, root) = MemoryArena::create(3 << 16).unwrap();
    let region = root.with_bounds(3 << 16).unwrap();
    let mut tlsf = TlsfControl::create_with_pool(&mut arena, region, 1 << 16).unwrap();
    tlsf.add_pool(&mut arena, region.with_address(1 << 16).unwrap(), 1 << 16).unwrap();
    tlsf.add_pool(&mut arena, region.with_address(2 << 16).unwrap(), 1 << 16).unwrap();
    tlsf.malloc(&mut arena, 100).unwrap();
    let reserved = tlsf.stats().bytes_reserved;
    let pools = tlsf.destroy();
    assert_eq!(pools.len(), 3);
    assert_eq!(pools.iter().map(|p| p.size).sum::<usize>(), reserved);
}

#[test]
fn random_stress_short() {
    for seed in 0..3 {
        let report = stress::allocator_run(seed, 10_000, 500).unwrap();
        assert_eq!(report.ops, 10_000);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn free_all_in_any_order_restores_fresh(
        sizes in prop::collection::vec(0usize..3000, 1..60),
        order in any::<u64>(),
    ) {
        let (mut arena, _, mut tlsf) = heap(256 << 10);
        let fresh = tlsf.free_bytes(&arena).unwrap();
        let mut extents = Extents::default();
        let mut caps = Vec::new();
        for s in sizes {
            let cap = tlsf.malloc(&mut arena, s).unwrap();
            prop_assert_eq!(cap.base() % 16, 0);
            extents.insert(cap.base(), cap.length(), 0);
            caps.push(cap);
        }
        let mut k = order;
        while !caps.is_empty() {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let cap = caps.swap_remove((k >> 33) as usize % caps.len());
            tlsf.free(&mut arena, &cap).unwrap();
            prop_assert!(tlsf.bitmaps_consistent(&arena).unwrap());
        }
        prop_assert_eq!(tlsf.free_bytes(&arena).unwrap(), fresh);
        prop_assert_eq!(tlsf.blocks(&arena).unwrap().len(), 1);
        prop_assert_eq!(tlsf.stats().live_allocations, 0);
    }

    #[test]
    fn double_and_foreign_frees_rejected(size in 0usize..2000, skew in 1usize..16) {
        let (mut arena, _, mut tlsf) = heap(64 << 10);
        let cap = tlsf.malloc(&mut arena, size).unwrap();
        let shifted = cap.with_address(cap.address() + skew).unwrap();
        prop_assert_eq!(tlsf.free(&mut arena, &shifted).unwrap_err(), TlsfError::InvalidFree);
        tlsf.free(&mut arena, &cap).unwrap();
        prop_assert_eq!(tlsf.free(&mut arena, &cap).unwrap_err(), TlsfError::DoubleFree);
        tlsf.check(&arena).unwrap();
    }
}
