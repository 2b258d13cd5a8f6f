//! Reference models written without looking at the allocator internals.
//! Shared by the core tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;

pub mod stress;

/// Size classes as explicit `[start, end)` ranges.
///
/// Below 256 there are 32 classes of 8 bytes each. From 256 up, every power
/// of two range `[2^k, 2^(k+1))` is cut into 32 equal slices and belongs to
/// first level `k - 7`.
pub struct ClassTable {
    classes: Vec<(usize, usize, usize, usize)>,
}

impl ClassTable {
    pub fn up_to(limit: usize) -> ClassTable {
        let mut classes = Vec::new();
        for sl in 0..32 {
            classes.push((sl * 8, sl * 8 + 8, 0, sl));
        }
        let mut k = 8;
        while (1usize << k) <= limit {
            let lo = 1usize << k;
            let width = lo / 32;
            for sl in 0..32 {
                classes.push((lo + sl * width, lo + (sl + 1) * width, k - 7, sl));
            }
            k += 1;
        }
        ClassTable { classes }
    }

    /// Class containing `size`, found by scanning the ranges.
    pub fn class_of(&self, size: usize) -> Option<(usize, usize)> {
        self.classes
            .iter()
            .find(|(lo, hi, _, _)| *lo <= size && size < *hi)
            .map(|&(_, _, fl, sl)| (fl, sl))
    }

    /// Walks all sizes in `range` and yields `(size, fl, sl)` in one pass.
    pub fn enumerate(&self, from: usize, to: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(to - from + 1);
        let mut idx = 0;
        for size in from..=to {
            while self.classes[idx].1 <= size {
                idx += 1;
            }
            let (lo, _, fl, sl) = self.classes[idx];
            assert!(lo <= size);
            out.push((size, fl, sl));
        }
        out
    }
}

/// Bytes needed by the in-arena control area: a 16-byte slot for the first
/// level bitmap, 25 four-byte second-level bitmaps padded to 16, and a
/// 16-byte list head per (fl, sl) class.
pub fn control_bytes() -> usize {
    let fl_count = 25;
    let bitmaps = (16 + 4 * fl_count + 15) / 16 * 16;
    bitmaps + fl_count * 32 * 16
}

/// Per-block header: previous-physical link and size word, 16 bytes each.
pub const HEADER: usize = 32;

/// Free payload bytes in a fresh pool: one header for the block, one for the
/// end sentinel, and the control area when the pool is the first one.
pub fn fresh_pool_free(size: usize, first: bool) -> usize {
    size - 2 * HEADER - if first { control_bytes() } else { 0 }
}

/// The set of live allocations as byte extents, each tagged with a fill
/// byte so content corruption is visible.
#[derive(Default)]
pub struct Extents {
    live: BTreeMap<usize, (usize, u8)>,
}

impl Extents {
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Records `[start, start + len)`. Panics on overlap with any live extent.
    pub fn insert(&mut self, start: usize, len: usize, fill: u8) {
        assert!(len > 0);
        if let Some((&s, &(l, _))) = self.live.range(..=start).next_back() {
            assert!(s + l <= start, "[{start:#x}, +{len}) overlaps [{s:#x}, +{l})");
        }
        if let Some((&s, &(l, _))) = self.live.range(start..).next() {
            assert!(start + len <= s, "[{start:#x}, +{len}) overlaps [{s:#x}, +{l})");
        }
        self.live.insert(start, (len, fill));
    }

    pub fn remove(&mut self, start: usize) -> (usize, u8) {
        self.live.remove(&start).expect("extent not live")
    }

    pub fn get(&self, start: usize) -> Option<(usize, u8)> {
        self.live.get(&start).copied()
    }

    pub fn nth(&self, n: usize) -> Option<(usize, usize, u8)> {
        self.live.iter().nth(n).map(|(&s, &(l, f))| (s, l, f))
    }

    pub fn total_bytes(&self) -> usize {
        self.live.values().map(|(l, _)| l).sum()
    }

    /// `true` if no extent of `self` intersects one of `other`.
    pub fn disjoint_from(&self, other: &Extents) -> bool {
        self.live.iter().all(|(&s, &(l, _))| {
            other.live.iter().all(|(&os, &(ol, _))| s + l <= os || os + ol <= s)
        })
    }
}

/// Pool sizes produced by reserving `heap` bytes in chunks of at most `max`:
/// a first pool, then whole chunks while more than `max` is left, then the
/// rest. Written as the straightforward loop over the remaining byte count.
pub fn pool_plan(heap: usize, max: usize) -> Vec<usize> {
    let first = heap.min(max);
    let mut plan = vec![first];
    let mut left = heap - first;
    loop {
        if left == 0 {
            break;
        }
        if left > max {
            plan.push(max);
            left -= max;
        } else {
            plan.push(left);
            left = 0;
        }
    }
    plan
}
