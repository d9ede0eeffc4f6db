//! Vector processing element: SIMDU (8 lanes x 2 sub-lanes), VU, Mif and the
//! dRf/adRf register files, stepped in the 222 MHz compute domain.
//!
//! Words issue in order, one per cycle. An instruction stalls until its source
//! registers are ready (scoreboard on result latency); write-after-write
//! hazards that would land out of order are compile errors, reported as
//! `RegisterConflict`. `fin` drains the pipeline.

pub mod isa;
pub mod jobs;

use crate::fabric::{Address, BankId, Fabric, FabricError, Port, Word, WORD_BYTES};
use crate::quant::{saturate_i8, PostOp};
use isa::{Dst, MifOp, ParamEntry, SimdKind, Store, VliwWord, VpeProgram, VuKind, ADRF_SIZE, DRF_SIZE, LANES};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

pub use isa::{assemble, SimdOp, VuOp};

/// Multiply, 3-level adder tree, activation.
pub const SIMD_LATENCY: u64 = 5;
pub const VU_LATENCY: u64 = 1;
pub const LD_LATENCY: u64 = 2;
pub const FA_LATENCY: u64 = 1;
/// Multiply-accumulates per SIMDU issue (8 lanes x 8 elements).
pub const SIMD_MACS: u64 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum VpeError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("index out of range: {0}")]
    BadIndex(String),
    #[error("register conflict on {reg} at word {word}")]
    RegisterConflict { reg: String, word: usize },
    #[error("address register a{0} used before fa/initialization")]
    UnsetAddress(u8),
    #[error("channel {channel} cannot reach {bank:?}")]
    BadChannel { channel: u8, bank: BankId },
    #[error("no ready record for fa")]
    NoReady,
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Supplies record addresses for `fa`.
pub trait ReadySource {
    fn fetch(&mut self, cycle: u64) -> Option<Address>;
}

impl ReadySource for VecDeque<Address> {
    fn fetch(&mut self, _cycle: u64) -> Option<Address> {
        self.pop_front()
    }
}

/// Source for programs that never execute `fa`.
pub struct NoReady;

impl ReadySource for NoReady {
    fn fetch(&mut self, _cycle: u64) -> Option<Address> {
        None
    }
}

pub fn sat8(v: i32) -> i32 {
    i32::from(saturate_i8(i64::from(v)))
}

pub fn simd_prd(x: &[i32; LANES], w: &ParamEntry) -> [i32; LANES] {
    std::array::from_fn(|lane| (0..LANES).map(|i| sat8(x[i]) * i32::from(w[lane][i])).sum())
}

/// Sub-lane A takes elements 0..4, sub-lane B elements 4..8.
pub fn simd_prds(x: &[i32; LANES], w: &ParamEntry) -> ([i32; LANES], [i32; LANES]) {
    let half = |lo: usize| -> [i32; LANES] {
        std::array::from_fn(|lane| (lo..lo + 4).map(|i| sat8(x[i]) * i32::from(w[lane][i])).sum())
    };
    (half(0), half(4))
}

pub fn vu_exec(kind: VuKind, a: &[i32; LANES], b: &[i32; LANES]) -> [i32; LANES] {
    std::array::from_fn(|i| match kind {
        VuKind::Vadd => a[i].saturating_add(b[i]),
        VuKind::Vem => sat8(a[i]) * sat8(b[i]),
        VuKind::Vmax => a[i].max(b[i]),
    })
}

pub fn apply_store(v: i32, store: Store, posts: &[PostOp]) -> Result<i32, VpeError> {
    Ok(match store {
        Store::Raw => v,
        Store::Sat => sat8(v),
        Store::Post(i) => {
            let p = posts.get(i as usize).ok_or_else(|| VpeError::BadIndex(format!("post-op p{i}")))?;
            i32::from(p.apply(v))
        }
    })
}

/// Memory image of a result vector: int8 results pack into one word, raw
/// int32 results are little-endian across consecutive words.
fn result_words(values: &[i32], store: Store) -> Vec<Word> {
    if store == Store::Raw {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        bytes.chunks(WORD_BYTES).map(|c| c.try_into().expect("multiple of 16 bytes")).collect()
    } else {
        let mut w = [0u8; WORD_BYTES];
        for (slot, v) in w.iter_mut().zip(values) {
            *slot = *v as i8 as u8;
        }
        vec![w]
    }
}

fn channel_reaches(channel: u8, bank: BankId) -> bool {
    match bank {
        BankId::Feature => true,
        BankId::Compute0 => channel == 0,
        BankId::Compute1 => channel == 1,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpeStats {
    pub words: u64,
    pub simd_issues: u64,
    pub vu_issues: u64,
    pub mif_issues: u64,
    pub stall_cycles: u64,
    pub macs: u64,
}

impl std::ops::AddAssign for VpeStats {
    fn add_assign(&mut self, o: Self) {
        self.words += o.words;
        self.simd_issues += o.simd_issues;
        self.vu_issues += o.vu_issues;
        self.mif_issues += o.mif_issues;
        self.stall_cycles += o.stall_cycles;
        self.macs += o.macs;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunResult {
    pub start_cycle: u64,
    /// Cycle after the last result lands.
    pub end_cycle: u64,
    /// Cycle at which FIN reaches the controller, if the program raised it.
    pub fin_cycle: Option<u64>,
    pub stats: VpeStats,
}

impl RunResult {
    pub fn cycles(&self) -> u64 {
        self.end_cycle - self.start_cycle
    }
}

#[derive(Debug, Clone)]
pub struct Vpe {
    pub drf: [[i32; LANES]; DRF_SIZE],
    pub adrf: [Option<Address>; ADRF_SIZE],
    d_ready: [u64; DRF_SIZE],
    a_ready: [u64; ADRF_SIZE],
    pending: Vec<(u64, Address, Word)>,
    pub totals: VpeStats,
}

impl Default for Vpe {
    fn default() -> Self {
        Vpe {
            drf: [[0; LANES]; DRF_SIZE],
            adrf: [None; ADRF_SIZE],
            d_ready: [0; DRF_SIZE],
            a_ready: [0; ADRF_SIZE],
            pending: Vec::new(),
            totals: VpeStats::default(),
        }
    }
}

struct Writes {
    regs: Vec<(u8, u64)>,
}

impl Vpe {
    pub fn new() -> Self {
        Self::default()
    }

    fn flush_before(&mut self, fabric: &mut Fabric, cycle: u64) -> Result<(), VpeError> {
        self.pending.sort_by_key(|p| p.0);
        let n = self.pending.iter().take_while(|p| p.0 < cycle).count();
        for (c, addr, word) in self.pending.drain(..n) {
            fabric.write(addr, word, Port::P0, c)?;
        }
        Ok(())
    }

    fn mem_addr(&self, areg: u8, offset: u16) -> Result<Address, VpeError> {
        let base = self.adrf[areg as usize].ok_or(VpeError::UnsetAddress(areg))?;
        Ok(Address::new(base.bank, base.word_index + offset as usize))
    }

    fn dreg(r: usize) -> Result<usize, VpeError> {
        if r < DRF_SIZE {
            Ok(r)
        } else {
            Err(VpeError::BadIndex(format!("d{r}")))
        }
    }

    /// Runs `prog` from its first word, issuing the first word no earlier than
    /// `start_cycle`. Stops after `fin` or at the end of the program.
    pub fn run(
        &mut self,
        prog: &VpeProgram,
        fabric: &mut Fabric,
        ready: &mut dyn ReadySource,
        start_cycle: u64,
    ) -> Result<RunResult, VpeError> {
        let mut stats = VpeStats::default();
        let mut pc_param = 0usize;
        let mut next_issue = start_cycle;
        let mut end = start_cycle;
        let mut fin_cycle = None;

        for (wi, word) in prog.words.iter().enumerate() {
            let t = next_issue.max(self.operands_ready(word)?);
            stats.stall_cycles += t - next_issue;
            stats.words += 1;
            next_issue = t + 1;
            end = end.max(t + 1);

            // All fields read their operands at issue, before any field writes.
            let vu_in = word.vu.map(|v| (self.drf[v.a as usize], self.drf[v.b as usize]));
            let mut w = Writes { regs: Vec::new() };
            if let Some(s) = word.simd {
                stats.simd_issues += 1;
                stats.macs += SIMD_MACS;
                let entry = prog
                    .pcache
                    .get(pc_param)
                    .ok_or_else(|| VpeError::BadIndex(format!("pCache entry {pc_param}")))?;
                pc_param += 1;
                let x = self.drf[s.src as usize];
                let values: Vec<i32> = match s.kind {
                    SimdKind::Prd => simd_prd(&x, entry).to_vec(),
                    SimdKind::Prds => {
                        let (a, b) = simd_prds(&x, entry);
                        a.iter().chain(b.iter()).copied().collect()
                    }
                };
                let values = values.into_iter().map(|v| apply_store(v, s.store, &prog.posts)).collect::<Result<Vec<_>, _>>()?;
                end = end.max(self.emit(s.dst, s.store, &values, t, SIMD_LATENCY, &mut w)?);
            }
            if let (Some(v), Some((a, b))) = (word.vu, vu_in) {
                stats.vu_issues += 1;
                let r = vu_exec(v.kind, &a, &b);
                let values = r.iter().map(|&x| apply_store(x, v.store, &prog.posts)).collect::<Result<Vec<_>, _>>()?;
                end = end.max(self.emit(v.dst, v.store, &values, t, VU_LATENCY, &mut w)?);
            }
            match word.mif {
                Some(MifOp::Fa { areg }) => {
                    stats.mif_issues += 1;
                    let addr = ready.fetch(t).ok_or(VpeError::NoReady)?;
                    self.adrf[areg as usize] = Some(addr);
                    self.a_ready[areg as usize] = t + FA_LATENCY;
                    end = end.max(t + FA_LATENCY);
                }
                Some(MifOp::Ld { areg, offset, dreg, channel }) => {
                    stats.mif_issues += 1;
                    let addr = self.mem_addr(areg, offset)?;
                    if !channel_reaches(channel, addr.bank) {
                        return Err(VpeError::BadChannel { channel, bank: addr.bank });
                    }
                    let d = Self::dreg(dreg as usize + 1)? - 1;
                    self.flush_before(fabric, t)?;
                    let bytes = fabric.read(addr, Port::P0, t)?;
                    self.drf[d] = std::array::from_fn(|i| i32::from(bytes[i] as i8));
                    self.drf[d + 1] = std::array::from_fn(|i| i32::from(bytes[LANES + i] as i8));
                    w.regs.push((d as u8, t + LD_LATENCY));
                    w.regs.push((d as u8 + 1, t + LD_LATENCY));
                    end = end.max(t + LD_LATENCY);
                }
                None => {}
            }
            self.commit_scoreboard(&w, t, wi)?;
            if word.fin {
                fin_cycle = Some(end.max(t + 1));
                break;
            }
        }
        self.flush_before(fabric, u64::MAX)?;
        if let Some(f) = fin_cycle.as_mut() {
            *f = (*f).max(end);
        }
        self.totals += stats;
        Ok(RunResult { start_cycle, end_cycle: end, fin_cycle, stats })
    }

    fn operands_ready(&self, word: &VliwWord) -> Result<u64, VpeError> {
        let mut t = 0;
        let mut need_d = |r: u8| t = t.max(self.d_ready[r as usize]);
        if let Some(s) = word.simd {
            need_d(s.src);
        }
        if let Some(v) = word.vu {
            need_d(v.a);
            need_d(v.b);
        }
        let mut need_a = |a: u8| t = t.max(self.a_ready[a as usize]);
        if let Some(Dst::Mem { areg, .. }) = word.simd.map(|s| s.dst) {
            need_a(areg);
        }
        if let Some(Dst::Mem { areg, .. }) = word.vu.map(|v| v.dst) {
            need_a(areg);
        }
        if let Some(MifOp::Ld { areg, .. }) = word.mif {
            need_a(areg);
        }
        Ok(t)
    }

    /// Writes a result to registers (visible at `t + latency`) or schedules it
    /// to memory starting in the unit's last pipeline stage. Returns the
    /// completion cycle.
    fn emit(&mut self, dst: Dst, store: Store, values: &[i32], t: u64, latency: u64, w: &mut Writes) -> Result<u64, VpeError> {
        match dst {
            Dst::Reg(r) => {
                let regs = values.len() / LANES;
                let r = r as usize;
                Self::dreg(r + regs - 1)?;
                for (k, chunk) in values.chunks(LANES).enumerate() {
                    self.drf[r + k] = chunk.try_into().expect("8 lanes");
                    w.regs.push(((r + k) as u8, t + latency));
                }
                Ok(t + latency)
            }
            Dst::Mem { areg, offset } => {
                // Stores leave through whichever channel serves the bank.
                let addr = self.mem_addr(areg, offset)?;
                let words = result_words(values, store);
                let first = t + latency - 1;
                for (i, word) in words.iter().enumerate() {
                    let a = Address::new(addr.bank, addr.word_index + i);
                    self.pending.push((first + i as u64, a, *word));
                }
                Ok(first + words.len() as u64)
            }
        }
    }

    fn commit_scoreboard(&mut self, w: &Writes, t: u64, word: usize) -> Result<(), VpeError> {
        for (i, &(r, c)) in w.regs.iter().enumerate() {
            let conflict = w.regs[..i].iter().any(|&(q, _)| q == r)
                || (self.d_ready[r as usize] > t && c <= self.d_ready[r as usize]);
            if conflict {
                return Err(VpeError::RegisterConflict { reg: format!("d{r}"), word });
            }
        }
        for &(r, c) in &w.regs {
            self.d_ready[r as usize] = c;
        }
        Ok(())
    }

    /// Forgets pending-result timing, e.g. between independent batches.
    pub fn reset_timing(&mut self) {
        self.d_ready = [0; DRF_SIZE];
        self.a_ready = [0; ADRF_SIZE];
    }

    pub fn set_address(&mut self, areg: usize, addr: Address) {
        self.adrf[areg] = Some(addr);
    }
}

#[cfg(test)]
mod tests;
