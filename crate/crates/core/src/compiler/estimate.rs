//! Asymptotic delay/throughput classes for vector and systolic accelerators
//! built from `m` computing units each, `n` accelerators in total. The
//! constant factors are 1; the values are for comparison between
//! configurations, never for scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Reduction tree over `m` units: `log2(m/2)` levels.
    Vector,
    /// `sqrt(m) x sqrt(m)` array.
    Systolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate {
    pub arch: Architecture,
    pub m: u32,
    pub n: u32,
}

impl PerfEstimate {
    pub fn new(arch: Architecture, m: u32, n: u32) -> Self {
        assert!(m >= 1 && n >= 1, "m and n must be at least 1");
        PerfEstimate { arch, m, n }
    }

    pub fn delay(&self) -> f64 {
        let (m, n) = (f64::from(self.m), f64::from(self.n));
        match self.arch {
            Architecture::Vector => (m / 2.0).log2() / n,
            Architecture::Systolic => m.sqrt() / n,
        }
    }

    pub fn throughput(&self) -> f64 {
        let (m, n) = (f64::from(self.m), f64::from(self.n));
        match self.arch {
            Architecture::Vector => n / (m / 2.0).log2(),
            Architecture::Systolic => n,
        }
    }
}
