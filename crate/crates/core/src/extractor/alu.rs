//! Byte-lane ALU cluster. Sixteen lanes, one per output byte; adjacent lanes
//! may fuse into a 2-4 byte little-endian accumulator.

use super::ExtractorError;
use crate::fabric::Word;
use serde::{Deserialize, Serialize};

pub const META_BYTES: usize = 13;
pub const LANES: usize = 16;

/// Meta register layout (byte offsets).
pub mod meta {
    /// u32 LE, saturating.
    pub const PKT_SIZE: usize = 0;
    pub const FLAGS: usize = 4;
    pub const DIR: usize = 5;
    pub const PROTO: usize = 6;
    /// u16 LE microseconds since the previous packet of the flow, saturating.
    pub const INTERVAL: usize = 7;
    /// u16 LE constant 1, the increment for packet counters.
    pub const ONE: usize = 9;
    /// Two bytes of the tuple hash.
    pub const DIGEST: usize = 11;
}

pub type MetaRegister = [u8; META_BYTES];
pub type HistoryRegister = Word;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AluOp {
    Add,
    Sub,
    Max,
    Min,
    /// Copy operand a.
    Wr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrcBank {
    Meta,
    History,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Operand {
    pub bank: SrcBank,
    pub byte: u8,
}

impl Operand {
    pub fn meta(byte: usize) -> Self {
        Operand { bank: SrcBank::Meta, byte: byte as u8 }
    }
    pub fn hist(byte: usize) -> Self {
        Operand { bank: SrcBank::History, byte: byte as u8 }
    }
}

/// Config row form: `(op, src_bank, src_byte, src2_bank, src2_byte, dst_byte, width)`.
type MicroOpRow = (AluOp, SrcBank, u8, SrcBank, u8, u8, u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "MicroOpRow", into = "MicroOpRow")]
pub struct MicroOp {
    pub op: AluOp,
    pub a: Operand,
    pub b: Operand,
    pub dst: u8,
    pub width: u8,
}

impl From<MicroOpRow> for MicroOp {
    fn from(r: MicroOpRow) -> Self {
        MicroOp {
            op: r.0,
            a: Operand { bank: r.1, byte: r.2 },
            b: Operand { bank: r.3, byte: r.4 },
            dst: r.5,
            width: r.6,
        }
    }
}

impl From<MicroOp> for MicroOpRow {
    fn from(m: MicroOp) -> Self {
        (m.op, m.a.bank, m.a.byte, m.b.bank, m.b.byte, m.dst, m.width)
    }
}

impl MicroOp {
    pub fn new(op: AluOp, a: Operand, b: Operand, dst: usize, width: usize) -> Self {
        MicroOp { op, a, b, dst: dst as u8, width: width as u8 }
    }

    /// `wr` ignores its second operand.
    pub fn wr(a: Operand, dst: usize, width: usize) -> Self {
        MicroOp::new(AluOp::Wr, a, a, dst, width)
    }

    fn read(src: Operand, width: usize, meta: &MetaRegister, hist: &HistoryRegister) -> u64 {
        let bytes: &[u8] = match src.bank {
            SrcBank::Meta => meta,
            SrcBank::History => hist,
        };
        let at = src.byte as usize;
        (0..width).fold(0u64, |acc, i| acc | u64::from(bytes[at + i]) << (8 * i))
    }

    fn eval(&self, meta: &MetaRegister, hist: &HistoryRegister) -> u64 {
        let w = self.width as usize;
        let max = (1u64 << (8 * w)) - 1;
        let a = Self::read(self.a, w, meta, hist);
        let b = Self::read(self.b, w, meta, hist);
        match self.op {
            AluOp::Add => (a + b).min(max),
            AluOp::Sub => a.saturating_sub(b),
            AluOp::Max => a.max(b),
            AluOp::Min => a.min(b),
            AluOp::Wr => a,
        }
    }
}

/// A validated set of micro-ops with disjoint destination bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<MicroOp>", into = "Vec<MicroOp>")]
pub struct MicroOpProgram {
    ops: Vec<MicroOp>,
}

impl TryFrom<Vec<MicroOp>> for MicroOpProgram {
    type Error = ExtractorError;
    fn try_from(ops: Vec<MicroOp>) -> Result<Self, Self::Error> {
        MicroOpProgram::new(ops)
    }
}

impl From<MicroOpProgram> for Vec<MicroOp> {
    fn from(p: MicroOpProgram) -> Self {
        p.ops
    }
}

impl MicroOpProgram {
    pub fn new(ops: Vec<MicroOp>) -> Result<Self, ExtractorError> {
        let mut used = [false; LANES];
        for (i, op) in ops.iter().enumerate() {
            let w = op.width as usize;
            let bad = |why: &str| ExtractorError::InvalidProgram(format!("op {i}: {why}"));
            if !(1..=4).contains(&w) {
                return Err(bad("width must be 1..=4"));
            }
            if op.dst as usize + w > LANES {
                return Err(bad("destination past byte 15"));
            }
            for src in [op.a, op.b] {
                let limit = match src.bank {
                    SrcBank::Meta => META_BYTES,
                    SrcBank::History => LANES,
                };
                if src.byte as usize + w > limit {
                    return Err(bad("source past end of register"));
                }
            }
            for lane in &mut used[op.dst as usize..op.dst as usize + w] {
                if *lane {
                    return Err(bad("destination lanes overlap"));
                }
                *lane = true;
            }
        }
        Ok(MicroOpProgram { ops })
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.ops
    }

    /// Lanes consumed, counting fused lanes individually.
    pub fn lanes_used(&self) -> usize {
        self.ops.iter().map(|o| o.width as usize).sum()
    }

    /// History word for a fresh flow: zero except `min` accumulators, which
    /// start at their maximum so the first packet sets them.
    pub fn init_word(&self) -> Word {
        let mut w = [0u8; LANES];
        for op in &self.ops {
            if op.op == AluOp::Min {
                w[op.dst as usize..(op.dst + op.width) as usize].fill(0xff);
            }
        }
        w
    }

    /// One pass of the cluster. Bytes no lane writes pass through from history.
    pub fn step(&self, meta: &MetaRegister, hist: &HistoryRegister) -> Word {
        let mut out = *hist;
        for op in &self.ops {
            let v = op.eval(meta, hist);
            for i in 0..op.width as usize {
                out[op.dst as usize + i] = (v >> (8 * i)) as u8;
            }
        }
        out
    }
}
