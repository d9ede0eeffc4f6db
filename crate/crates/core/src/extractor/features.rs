//! Flow-level statistical features expressed as ALU accumulators.
//!
//! Feature numbers follow the whole-feature-set table: 6 flow size, 9 flow
//! duration, 11/12 max/min packet length, 13 mean packet length, 19/20 max/min
//! interval, 21 mean interval, 36 packet count. Means are divided at readout.

use super::alu::{meta, AluOp, MicroOp, MicroOpProgram, Operand, LANES};
use super::ExtractorError;
use crate::fabric::Word;
use serde::{Deserialize, Serialize};

pub const SUPPORTED_FEATURES: [u8; 9] = [6, 9, 11, 12, 13, 19, 20, 21, 36];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulator {
    SizeSum,
    Count,
    IntvSum,
    MaxLen,
    MinLen,
    MaxIntv,
    MinIntv,
}

impl Accumulator {
    pub fn width(self) -> usize {
        match self {
            Accumulator::SizeSum => 4,
            _ => 2,
        }
    }

    fn op(self, dst: usize) -> MicroOp {
        let w = self.width();
        let h = Operand::hist(dst);
        match self {
            Accumulator::SizeSum => MicroOp::new(AluOp::Add, h, Operand::meta(meta::PKT_SIZE), dst, w),
            Accumulator::Count => MicroOp::new(AluOp::Add, h, Operand::meta(meta::ONE), dst, w),
            Accumulator::IntvSum => MicroOp::new(AluOp::Add, h, Operand::meta(meta::INTERVAL), dst, w),
            Accumulator::MaxLen => MicroOp::new(AluOp::Max, h, Operand::meta(meta::PKT_SIZE), dst, w),
            Accumulator::MinLen => MicroOp::new(AluOp::Min, h, Operand::meta(meta::PKT_SIZE), dst, w),
            Accumulator::MaxIntv => MicroOp::new(AluOp::Max, h, Operand::meta(meta::INTERVAL), dst, w),
            Accumulator::MinIntv => MicroOp::new(AluOp::Min, h, Operand::meta(meta::INTERVAL), dst, w),
        }
    }
}

fn accumulators_for(feature: u8) -> Result<&'static [Accumulator], ExtractorError> {
    use Accumulator::*;
    Ok(match feature {
        6 => &[SizeSum],
        9 => &[IntvSum],
        11 => &[MaxLen],
        12 => &[MinLen],
        13 => &[SizeSum, Count],
        19 => &[MaxIntv],
        20 => &[MinIntv],
        21 => &[IntvSum, Count],
        36 => &[Count],
        other => return Err(ExtractorError::UnsupportedFeature(other)),
    })
}

/// Packs lanes into the 16-byte output word in request order.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    ops: Vec<MicroOp>,
    next: usize,
}

impl ProgramBuilder {
    pub fn push(&mut self, make: impl FnOnce(usize) -> MicroOp, width: usize) -> Result<usize, ExtractorError> {
        if self.next + width > LANES {
            return Err(ExtractorError::CapacityExceeded { needed: self.next + width });
        }
        let dst = self.next;
        self.ops.push(make(dst));
        self.next += width;
        Ok(dst)
    }

    pub fn build(self) -> Result<MicroOpProgram, ExtractorError> {
        MicroOpProgram::new(self.ops)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureProgram {
    pub features: Vec<u8>,
    pub program: MicroOpProgram,
    /// Accumulator placement: (kind, byte offset).
    pub layout: Vec<(Accumulator, usize)>,
}

pub fn feature_program(features: &[u8]) -> Result<FeatureProgram, ExtractorError> {
    let mut builder = ProgramBuilder::default();
    let mut layout: Vec<(Accumulator, usize)> = Vec::new();
    for &f in features {
        for &acc in accumulators_for(f)? {
            if layout.iter().any(|(a, _)| *a == acc) {
                continue;
            }
            let dst = builder.push(|d| acc.op(d), acc.width())?;
            layout.push((acc, dst));
        }
    }
    Ok(FeatureProgram { features: features.to_vec(), program: builder.build()?, layout })
}

fn div_round_half_up(n: u64, d: u64) -> u64 {
    if d == 0 {
        0
    } else {
        (2 * n + d) / (2 * d)
    }
}

impl FeatureProgram {
    pub fn accumulator(&self, word: &Word, acc: Accumulator) -> Option<u64> {
        let &(_, at) = self.layout.iter().find(|(a, _)| *a == acc)?;
        Some(word[at..at + acc.width()].iter().rev().fold(0u64, |v, &b| (v << 8) | u64::from(b)))
    }

    /// Requested features in request order. Interval features are in µs; the
    /// first packet contributes an interval of zero, so the mean interval
    /// divides by `count - 1`.
    pub fn readout(&self, word: &Word) -> Vec<(u8, u64)> {
        let get = |a| self.accumulator(word, a).unwrap_or(0);
        self.features
            .iter()
            .map(|&f| {
                let v = match f {
                    6 => get(Accumulator::SizeSum),
                    9 => get(Accumulator::IntvSum),
                    11 => get(Accumulator::MaxLen),
                    12 => get(Accumulator::MinLen),
                    13 => div_round_half_up(get(Accumulator::SizeSum), get(Accumulator::Count)),
                    19 => get(Accumulator::MaxIntv),
                    20 => get(Accumulator::MinIntv),
                    21 => div_round_half_up(get(Accumulator::IntvSum), get(Accumulator::Count).saturating_sub(1)),
                    _ => get(Accumulator::Count),
                };
                (f, v)
            })
            .collect()
    }
}

/// Per-packet copy of meta fields for packet-level inference: size (2 bytes),
/// flags, direction, protocol and the low interval byte in bytes 0..6.
pub fn packet_copy_program() -> MicroOpProgram {
    MicroOpProgram::new(vec![
        MicroOp::wr(Operand::meta(meta::PKT_SIZE), 0, 2),
        MicroOp::wr(Operand::meta(meta::FLAGS), 2, 1),
        MicroOp::wr(Operand::meta(meta::DIR), 3, 1),
        MicroOp::wr(Operand::meta(meta::PROTO), 4, 1),
        MicroOp::wr(Operand::meta(meta::INTERVAL), 5, 1),
    ])
    .expect("static program is valid")
}
