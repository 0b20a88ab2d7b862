//! Deterministic byte meter standing in for device-memory counters.
//!
//! Every code path that touches KV bytes adds exactly what it touched. Counters
//! are atomics so concurrent readers of distinct head groups never lose counts.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Traffic {
    /// Page header, tag and protect-bitmap reads.
    HeaderRead,
    /// Packed angle and radius code reads.
    KCodesRead,
    ValuesRead,
    /// Full-precision key reads of the uncompressed baseline.
    DenseBaselineKRead,
    /// Densification tax: dense keys written out by reconstruct-then-dot.
    DenseKWrite,
    /// Densification tax: the same dense keys read back for the dot product.
    DenseKRead,
    HeaderWrite,
    KCodesWrite,
    ValuesWrite,
    DenseBaselineKWrite,
}

impl Traffic {
    pub const ALL: [Traffic; 10] = [
        Traffic::HeaderRead,
        Traffic::KCodesRead,
        Traffic::ValuesRead,
        Traffic::DenseBaselineKRead,
        Traffic::DenseKWrite,
        Traffic::DenseKRead,
        Traffic::HeaderWrite,
        Traffic::KCodesWrite,
        Traffic::ValuesWrite,
        Traffic::DenseBaselineKWrite,
    ];

    pub fn is_write(self) -> bool {
        matches!(
            self,
            Traffic::DenseKWrite
                | Traffic::HeaderWrite
                | Traffic::KCodesWrite
                | Traffic::ValuesWrite
                | Traffic::DenseBaselineKWrite
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Traffic::HeaderRead => "header_read",
            Traffic::KCodesRead => "k_codes_read",
            Traffic::ValuesRead => "values_read",
            Traffic::DenseBaselineKRead => "baseline_k_read",
            Traffic::DenseKWrite => "dense_k_write",
            Traffic::DenseKRead => "dense_k_read",
            Traffic::HeaderWrite => "header_write",
            Traffic::KCodesWrite => "k_codes_write",
            Traffic::ValuesWrite => "values_write",
            Traffic::DenseBaselineKWrite => "baseline_k_write",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Default)]
pub struct TrafficMeter {
    counters: [AtomicU64; 10],
    decode_tokens: AtomicU64,
}

impl TrafficMeter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, category: Traffic, bytes: u64) {
        self.counters[category.index()].fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn get(&self, category: Traffic) -> u64 {
        self.counters[category.index()].load(Ordering::Relaxed)
    }

    pub fn add_decode_token(&self) {
        self.decode_tokens.fetch_add(1, Ordering::Relaxed);
    }

    pub fn decode_tokens(&self) -> u64 {
        self.decode_tokens.load(Ordering::Relaxed)
    }

    pub fn read_bytes(&self) -> u64 {
        Traffic::ALL.iter().filter(|c| !c.is_write()).map(|&c| self.get(c)).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        Traffic::ALL.iter().filter(|c| c.is_write()).map(|&c| self.get(c)).sum()
    }

    /// Starts a new accounting window (e.g. at the warm-up/measurement boundary).
    pub fn reset(&self) {
        for c in &self.counters {
            c.store(0, Ordering::Relaxed);
        }
        self.decode_tokens.store(0, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let mut bytes = [0u64; 10];
        for c in Traffic::ALL {
            bytes[c.index()] = self.get(c);
        }
        MeterSnapshot { bytes, decode_tokens: self.decode_tokens() }
    }
}

/// Frozen copy of a meter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeterSnapshot {
    bytes: [u64; 10],
    pub decode_tokens: u64,
}

impl MeterSnapshot {
    pub fn get(&self, category: Traffic) -> u64 {
        self.bytes[category.index()]
    }

    pub fn read_bytes(&self) -> u64 {
        Traffic::ALL.iter().filter(|c| !c.is_write()).map(|&c| self.get(c)).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        Traffic::ALL.iter().filter(|c| c.is_write()).map(|&c| self.get(c)).sum()
    }

    /// `(read + write) / decode_tokens`; `None` before any token is decoded.
    pub fn b_hbm(&self) -> Option<f64> {
        (self.decode_tokens > 0)
            .then(|| (self.read_bytes() + self.write_bytes()) as f64 / self.decode_tokens as f64)
    }

    pub fn since(&self, earlier: &MeterSnapshot) -> MeterSnapshot {
        let mut bytes = [0u64; 10];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.bytes[i] - earlier.bytes[i];
        }
        MeterSnapshot { bytes, decode_tokens: self.decode_tokens - earlier.decode_tokens }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn read_write_split_and_b_hbm() {
        let m = TrafficMeter::new();
        m.add(Traffic::KCodesRead, 100);
        m.add(Traffic::HeaderRead, 16);
        m.add(Traffic::ValuesWrite, 4);
        assert_eq!(m.read_bytes(), 116);
        assert_eq!(m.write_bytes(), 4);
        assert_eq!(m.snapshot().b_hbm(), None);
        m.add_decode_token();
        m.add_decode_token();
        assert_eq!(m.snapshot().b_hbm(), Some(60.0));
        m.reset();
        assert_eq!(m.read_bytes() + m.write_bytes() + m.decode_tokens(), 0);
    }

    #[test]
    fn concurrent_adds_are_not_lost() {
        let m = Arc::new(TrafficMeter::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let m = Arc::clone(&m);
                std::thread::spawn(move || {
                    for _ in 0..10_000 {
                        m.add(Traffic::ValuesRead, 3);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(m.get(Traffic::ValuesRead), 120_000);
    }
}
