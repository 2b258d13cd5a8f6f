//! Process environment hooks for the domain runtime.

use sdrad_core::domains::{ManagerConfig, APP_DEFAULT_HEAP_SIZE};

pub const APP_HEAP_SIZE: &str = "APP_HEAP_SIZE";

/// Parses an `APP_HEAP_SIZE` value: decimal bytes, surrounding whitespace
/// ignored. Anything else, zero included, is rejected.
pub fn parse_heap_size(raw: &str) -> Option<usize> {
    match raw.trim().parse::<usize>() {
        Ok(0) | Err(_) => None,
        Ok(n) => Some(n),
    }
}

/// Heap size from the environment, `None` if unset or unusable.
pub fn app_heap_size() -> Option<usize> {
    let raw = std::env::var(APP_HEAP_SIZE).ok()?;
    let size = parse_heap_size(&raw);
    if size.is_none() {
        log::warn!("ignoring {APP_HEAP_SIZE}={raw:?}, using the default heap size");
    }
    size
}

/// Manager configuration that reads `APP_HEAP_SIZE` at every heap
/// initialisation, with an arena large enough for `heaps` such heaps.
pub fn manager_config(heaps: usize) -> ManagerConfig {
    let heap = app_heap_size().unwrap_or(APP_DEFAULT_HEAP_SIZE);
    let heap = heap.next_multiple_of(16);
    ManagerConfig {
        arena_size: heap.saturating_mul(heaps.max(1)),
        heap_size_source: Some(app_heap_size),
        ..ManagerConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heap_size_values() {
        assert_eq!(parse_heap_size("1048576"), Some(1 << 20));
        assert_eq!(parse_heap_size(" 4096\n"), Some(4096));
        assert_eq!(parse_heap_size("0"), None);
        assert_eq!(parse_heap_size("4M"), None);
        assert_eq!(parse_heap_size("-1"), None);
        assert_eq!(parse_heap_size(""), None);
    }
}
