//! Live/peak accounting of forward-cache bytes.

use serde::{Deserialize, Serialize};

/// Tracks bytes held by forward caches. Callers register a cache when it is
/// created and release it when it is dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeter {
    live: usize,
    peak: usize,
}

impl CacheMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.live, "freeing more cache bytes than are live");
        self.live -= bytes;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Peak cache usage of one training step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Bytes of the extractor cache shared by all modules.
    pub extractor_bytes: usize,
    /// Peak module-cache bytes on each worker.
    pub worker_peaks: Vec<usize>,
    /// Peak bytes including the extractor cache, over the whole step.
    pub total_peak: usize,
}

impl CacheStats {
    /// Largest per-worker peak plus the shared extractor cache.
    pub fn per_worker_peak(&self) -> usize {
        self.worker_peaks.iter().copied().max().unwrap_or(0) + self.extractor_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_maximum_live() {
        let mut m = CacheMeter::new();
        m.alloc(10);
        m.alloc(5);
        m.free(10);
        m.alloc(3);
        assert_eq!(m.live(), 8);
        assert_eq!(m.peak(), 15);
    }
}
