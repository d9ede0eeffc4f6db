//! On-chip memory fabric: one feature bank and two computing banks, each a
//! true-dual-port SRAM of 128-bit words.
//!
//! Timed accesses carry the cycle they happen in, counted in the clock of the
//! port used. A bank allows one access per port per cycle. A write becomes
//! visible to accesses strictly later in time, so a read racing a write to the
//! same word in the same cycle observes the old value (read-first). Callers
//! must issue accesses in global time order; the simulation driver does.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const WORD_BYTES: usize = 16;
pub const FEATURE_DEPTH: usize = 8192;
pub const COMPUTE_DEPTH: usize = 16384;
pub const ACCESS_CYCLES: u64 = 1;

pub type Word = [u8; WORD_BYTES];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("address {index} out of range for {bank:?} (depth {depth})")]
    OutOfRange { bank: BankId, index: usize, depth: usize },
    #[error("port {port} of {bank:?} already used in cycle {cycle}")]
    PortConflict { bank: BankId, port: u8, cycle: u64 },
    #[error("access at cycle {cycle} precedes bank time {now} on {bank:?}")]
    TimeReversal { bank: BankId, cycle: u64, now: u64 },
    #[error("region '{name}' of {words} words does not fit in {bank:?}")]
    OutOfMemory { bank: BankId, name: String, words: usize },
    #[error("region '{name}' overlaps '{other}'")]
    Overlap { name: String, other: String },
    #[error("unknown region '{0}'")]
    UnknownRegion(String),
    #[error("image error: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankId {
    Feature,
    Compute0,
    Compute1,
}

impl BankId {
    pub const ALL: [BankId; 3] = [BankId::Feature, BankId::Compute0, BankId::Compute1];

    pub fn compute(i: usize) -> BankId {
        if i.is_multiple_of(2) {
            BankId::Compute0
        } else {
            BankId::Compute1
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            BankId::Feature => "feature",
            BankId::Compute0 => "compute0",
            BankId::Compute1 => "compute1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Address {
    pub bank: BankId,
    pub word_index: usize,
}

impl Address {
    pub fn new(bank: BankId, word_index: usize) -> Self {
        Address { bank, word_index }
    }
}

/// Port 0 is the VPE channel, port 1 the AryPE channel on computing banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Port {
    P0,
    P1,
}

impl Port {
    fn idx(self) -> usize {
        match self {
            Port::P0 => 0,
            Port::P1 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub bank: BankId,
    pub base: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.base + self.len
    }

    pub fn addr(&self, offset: usize) -> Address {
        Address::new(self.bank, self.base + offset)
    }
}

/// Clock period of the 222 MHz computing domain, picoseconds.
pub const COMPUTE_PERIOD_PS: u64 = 4505;
/// Clock period of the 125 MHz feature-extracting domain, picoseconds.
pub const EXTRACTOR_PERIOD_PS: u64 = 8000;

pub fn period_ps(hz: f64) -> u64 {
    (1e12 / hz).round() as u64
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    id: BankId,
    words: Vec<Word>,
    period_ps: [u64; 2],
    last_cycle: [Option<u64>; 2],
    // (time_ps, index, word); visible to accesses strictly later in time
    pending: Vec<(u64, usize, Word)>,
    accesses: u64,
}

impl MemoryBank {
    pub fn new(id: BankId, depth: usize, period_ps: [u64; 2]) -> Self {
        MemoryBank { id, words: vec![[0; WORD_BYTES]; depth], period_ps, last_cycle: [None; 2], pending: Vec::new(), accesses: 0 }
    }

    pub fn depth(&self) -> usize {
        self.words.len()
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    fn check(&self, index: usize) -> Result<(), FabricError> {
        if index < self.words.len() {
            Ok(())
        } else {
            Err(FabricError::OutOfRange { bank: self.id, index, depth: self.words.len() })
        }
    }

    /// Claims `port` for `cycle` (in that port's clock) and returns the access time.
    fn claim(&mut self, port: Port, cycle: u64) -> Result<u64, FabricError> {
        let p = port.idx();
        match self.last_cycle[p] {
            Some(last) if cycle < last => {
                return Err(FabricError::TimeReversal { bank: self.id, cycle, now: last });
            }
            Some(last) if cycle == last => {
                return Err(FabricError::PortConflict { bank: self.id, port: p as u8, cycle });
            }
            _ => {}
        }
        self.last_cycle[p] = Some(cycle);
        self.accesses += 1;
        let t = cycle * self.period_ps[p];
        self.commit_before(t);
        Ok(t)
    }

    fn commit_before(&mut self, t: u64) {
        if self.pending.iter().all(|(wt, _, _)| *wt >= t) {
            return;
        }
        self.pending.sort_by_key(|(wt, _, _)| *wt);
        let split = self.pending.partition_point(|(wt, _, _)| *wt < t);
        for (_, i, w) in self.pending.drain(..split) {
            self.words[i] = w;
        }
    }

    pub fn read(&mut self, index: usize, port: Port, cycle: u64) -> Result<Word, FabricError> {
        self.check(index)?;
        self.claim(port, cycle)?;
        Ok(self.words[index])
    }

    pub fn write(&mut self, index: usize, word: Word, port: Port, cycle: u64) -> Result<(), FabricError> {
        self.check(index)?;
        let t = self.claim(port, cycle)?;
        self.pending.push((t, index, word));
        Ok(())
    }

    /// Untimed access for initialization and readout by the control domain.
    /// Sees the latest value, including writes still in flight.
    pub fn peek(&self, index: usize) -> Result<Word, FabricError> {
        self.check(index)?;
        let newest = self.pending.iter().filter(|(_, i, _)| *i == index).max_by_key(|(t, _, _)| *t);
        Ok(newest.map_or(self.words[index], |(_, _, w)| *w))
    }

    pub fn poke(&mut self, index: usize, word: Word) -> Result<(), FabricError> {
        self.check(index)?;
        self.pending.retain(|(_, i, _)| *i != index);
        self.words[index] = word;
        Ok(())
    }

    /// Restarts port timing, e.g. when a new simulation reuses the bank.
    pub fn reset_timing(&mut self) {
        self.commit_before(u64::MAX);
        self.last_cycle = [None; 2];
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = [0; WORD_BYTES]);
        self.pending.clear();
        self.last_cycle = [None; 2];
        self.accesses = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.pending.is_empty() && self.words.iter().all(|w| w.iter().all(|&b| b == 0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageManifest {
    pub banks: Vec<(BankId, usize)>,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    banks: [MemoryBank; 3],
    regions: Vec<Region>,
}

impl Default for Fabric {
    fn default() -> Self {
        Fabric::new(FEATURE_DEPTH, COMPUTE_DEPTH)
    }
}

impl Fabric {
    pub fn new(feature_depth: usize, compute_depth: usize) -> Self {
        Fabric::with_clocks(feature_depth, compute_depth, EXTRACTOR_PERIOD_PS, COMPUTE_PERIOD_PS)
    }

    /// Feature bank: port 0 runs in the computing clock, port 1 in the
    /// extractor clock. Computing banks run both ports in the computing clock.
    pub fn with_clocks(feature_depth: usize, compute_depth: usize, extractor_ps: u64, compute_ps: u64) -> Self {
        Fabric {
            banks: [
                MemoryBank::new(BankId::Feature, feature_depth, [compute_ps, extractor_ps]),
                MemoryBank::new(BankId::Compute0, compute_depth, [compute_ps; 2]),
                MemoryBank::new(BankId::Compute1, compute_depth, [compute_ps; 2]),
            ],
            regions: Vec::new(),
        }
    }

    pub fn bank(&self, id: BankId) -> &MemoryBank {
        &self.banks[id as usize]
    }

    pub fn bank_mut(&mut self, id: BankId) -> &mut MemoryBank {
        &mut self.banks[id as usize]
    }

    pub fn total_bytes(&self, id: BankId) -> usize {
        self.bank(id).depth() * WORD_BYTES
    }

    pub fn read(&mut self, addr: Address, port: Port, cycle: u64) -> Result<Word, FabricError> {
        self.bank_mut(addr.bank).read(addr.word_index, port, cycle)
    }

    pub fn write(&mut self, addr: Address, word: Word, port: Port, cycle: u64) -> Result<(), FabricError> {
        self.bank_mut(addr.bank).write(addr.word_index, word, port, cycle)
    }

    pub fn peek(&self, addr: Address) -> Result<Word, FabricError> {
        self.bank(addr.bank).peek(addr.word_index)
    }

    pub fn poke(&mut self, addr: Address, word: Word) -> Result<(), FabricError> {
        self.bank_mut(addr.bank).poke(addr.word_index, word)
    }

    /// Writes bytes starting at a word boundary, zero-filling the tail word.
    pub fn poke_bytes(&mut self, start: Address, bytes: &[u8]) -> Result<usize, FabricError> {
        let words = bytes.len().div_ceil(WORD_BYTES);
        for (i, chunk) in bytes.chunks(WORD_BYTES).enumerate() {
            let mut w = [0u8; WORD_BYTES];
            w[..chunk.len()].copy_from_slice(chunk);
            self.poke(Address::new(start.bank, start.word_index + i), w)?;
        }
        Ok(words)
    }

    pub fn peek_bytes(&self, start: Address, len: usize) -> Result<Vec<u8>, FabricError> {
        let mut out = Vec::with_capacity(len);
        let mut i = 0;
        while out.len() < len {
            let w = self.peek(Address::new(start.bank, start.word_index + i))?;
            let take = (len - out.len()).min(WORD_BYTES);
            out.extend_from_slice(&w[..take]);
            i += 1;
        }
        Ok(out)
    }

    /// First-fit allocation of `words` words in `bank`.
    pub fn allocate(&mut self, bank: BankId, name: &str, words: usize) -> Result<Region, FabricError> {
        let depth = self.bank(bank).depth();
        let mut taken: Vec<&Region> = self.regions.iter().filter(|r| r.bank == bank).collect();
        taken.sort_by_key(|r| r.base);
        let mut base = 0;
        for r in taken {
            if base + words <= r.base {
                break;
            }
            base = base.max(r.end());
        }
        if base + words > depth {
            return Err(FabricError::OutOfMemory { bank, name: name.into(), words });
        }
        self.allocate_at(bank, name, base, words)
    }

    pub fn allocate_at(&mut self, bank: BankId, name: &str, base: usize, words: usize) -> Result<Region, FabricError> {
        if base + words > self.bank(bank).depth() {
            return Err(FabricError::OutOfMemory { bank, name: name.into(), words });
        }
        let region = Region { name: name.into(), bank, base, len: words };
        if let Some(other) = self
            .regions
            .iter()
            .find(|r| r.name == name || (r.bank == bank && r.base < region.end() && region.base < r.end()))
        {
            return Err(FabricError::Overlap { name: name.into(), other: other.name.clone() });
        }
        self.regions.push(region.clone());
        Ok(region)
    }

    pub fn region(&self, name: &str) -> Result<&Region, FabricError> {
        self.regions.iter().find(|r| r.name == name).ok_or_else(|| FabricError::UnknownRegion(name.into()))
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Zeroes every bank and drops the layout.
    pub fn reset(&mut self) {
        self.banks.iter_mut().for_each(MemoryBank::clear);
        self.regions.clear();
    }

    pub fn reset_timing(&mut self) {
        self.banks.iter_mut().for_each(MemoryBank::reset_timing);
    }

    pub fn is_zero(&self) -> bool {
        self.banks.iter().all(MemoryBank::is_zero)
    }

    pub fn manifest(&self) -> ImageManifest {
        ImageManifest {
            banks: BankId::ALL.iter().map(|&b| (b, self.bank(b).depth())).collect(),
            regions: self.regions.clone(),
        }
    }

    /// Dumps `<bank>.bin` raw images plus `manifest.json` into `dir`.
    pub fn dump_image(&self, dir: &Path) -> Result<(), FabricError> {
        let io = |e: std::io::Error| FabricError::Image(e.to_string());
        fs::create_dir_all(dir).map_err(io)?;
        for b in BankId::ALL {
            let bank = self.bank(b);
            let bytes: Vec<u8> = (0..bank.depth()).flat_map(|i| bank.peek(i).unwrap()).collect();
            fs::write(dir.join(format!("{}.bin", b.file_stem())), bytes).map_err(io)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| FabricError::Image(e.to_string()))?;
        fs::write(dir.join("manifest.json"), manifest).map_err(io)
    }

    pub fn load_image(dir: &Path) -> Result<Fabric, FabricError> {
        let io = |e: std::io::Error| FabricError::Image(e.to_string());
        let manifest: ImageManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json")).map_err(io)?)
                .map_err(|e| FabricError::Image(e.to_string()))?;
        let depth = |id| manifest.banks.iter().find(|(b, _)| *b == id).map(|(_, d)| *d);
        let (Some(fd), Some(cd)) = (depth(BankId::Feature), depth(BankId::Compute0)) else {
            return Err(FabricError::Image("manifest lacks bank geometry".into()));
        };
        let mut fabric = Fabric::new(fd, cd);
        for b in BankId::ALL {
            let bytes = fs::read(dir.join(format!("{}.bin", b.file_stem()))).map_err(io)?;
            if bytes.len() != fabric.bank(b).depth() * WORD_BYTES {
                return Err(FabricError::Image(format!("{b:?} image has {} bytes", bytes.len())));
            }
            fabric.poke_bytes(Address::new(b, 0), &bytes)?;
        }
        for r in manifest.regions {
            fabric.allocate_at(r.bank, &r.name, r.base, r.len)?;
        }
        Ok(fabric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: u8) -> Word {
        [v; WORD_BYTES]
    }

    #[test]
    fn geometry() {
        let f = Fabric::default();
        assert_eq!(f.total_bytes(BankId::Feature), 128 * 1024);
        assert_eq!(f.total_bytes(BankId::Compute0) + f.total_bytes(BankId::Compute1), 512 * 1024);
    }

    #[test]
    fn write_then_read() {
        let mut f = Fabric::default();
        let a = Address::new(BankId::Compute0, 10);
        f.write(a, w(7), Port::P0, 0).unwrap();
        assert_eq!(f.read(a, Port::P0, 1).unwrap(), w(7));
        assert_eq!(f.read(Address::new(BankId::Compute1, 3), Port::P0, 0).unwrap(), w(0));
    }

    #[test]
    fn dual_port_same_cycle() {
        let mut f = Fabric::default();
        let a = Address::new(BankId::Feature, 0);
        f.read(a, Port::P0, 4).unwrap();
        f.read(Address::new(BankId::Feature, 1), Port::P1, 4).unwrap();
        let err = f.read(a, Port::P1, 4).unwrap_err();
        assert!(matches!(err, FabricError::PortConflict { port: 1, cycle: 4, .. }));
    }

    #[test]
    fn read_first_on_race() {
        let mut f = Fabric::default();
        let a = Address::new(BankId::Compute0, 5);
        f.poke(a, w(1)).unwrap();
        f.write(a, w(2), Port::P1, 3).unwrap();
        assert_eq!(f.read(a, Port::P0, 3).unwrap(), w(1));
        assert_eq!(f.read(a, Port::P0, 4).unwrap(), w(2));
    }

    #[test]
    fn read_first_regardless_of_call_order() {
        let mut f = Fabric::default();
        let a = Address::new(BankId::Compute1, 2);
        f.read(a, Port::P0, 7).unwrap();
        f.write(a, w(9), Port::P1, 7).unwrap();
        assert_eq!(f.peek(a).unwrap(), w(9));
        assert_eq!(f.read(a, Port::P0, 8).unwrap(), w(9));
    }

    #[test]
    fn feature_bank_ports_run_in_their_own_clocks() {
        let mut f = Fabric::default();
        let a = Address::new(BankId::Feature, 0);
        // extractor cycle 10 = 80 ns; computing cycle 17 = 76.6 ns, 18 = 81.1 ns
        f.write(a, w(4), Port::P1, 10).unwrap();
        assert_eq!(f.read(a, Port::P0, 17).unwrap(), w(0));
        assert_eq!(f.read(a, Port::P0, 18).unwrap(), w(4));
    }

    #[test]
    fn out_of_range_and_time_reversal() {
        let mut f = Fabric::default();
        let bad = Address::new(BankId::Compute0, COMPUTE_DEPTH);
        assert!(matches!(f.write(bad, w(0), Port::P0, 0), Err(FabricError::OutOfRange { .. })));
        f.read(Address::new(BankId::Feature, 0), Port::P0, 9).unwrap();
        assert!(matches!(
            f.read(Address::new(BankId::Feature, 0), Port::P0, 8),
            Err(FabricError::TimeReversal { .. })
        ));
    }

    #[test]
    fn ping_pong_schedule_has_no_conflicts() {
        // AryPE writes bank (c % 2) on port 1 while VU reads the other bank on port 0.
        let mut f = Fabric::default();
        for c in 0..1000u64 {
            let wb = BankId::compute(c as usize);
            let rb = BankId::compute(c as usize + 1);
            let i = (c / 2) as usize % COMPUTE_DEPTH;
            f.write(Address::new(wb, i), w(c as u8), Port::P1, c).unwrap();
            f.read(Address::new(rb, i), Port::P0, c).unwrap();
        }
        assert_eq!(f.bank(BankId::Compute0).accesses() + f.bank(BankId::Compute1).accesses(), 2000);
    }

    #[test]
    fn allocation() {
        let mut f = Fabric::default();
        let a = f.allocate(BankId::Compute0, "a", 100).unwrap();
        assert_eq!(a.base, 0);
        let b = f.allocate(BankId::Compute0, "b", 50).unwrap();
        assert_eq!(b.base, 100);
        assert!(a.end() <= b.base);
        assert!(matches!(
            f.allocate(BankId::Compute1, "big", COMPUTE_DEPTH + 1),
            Err(FabricError::OutOfMemory { .. })
        ));
        assert!(matches!(f.allocate_at(BankId::Compute0, "c", 120, 4), Err(FabricError::Overlap { .. })));
        assert!(matches!(f.allocate(BankId::Compute0, "a", 1), Err(FabricError::Overlap { .. })));
    }

    #[test]
    fn image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Fabric::new(16, 32);
        let r = f.allocate(BankId::Compute1, "params", 3).unwrap();
        f.poke_bytes(r.addr(0), &[1, 2, 3, 4, 5]).unwrap();
        f.dump_image(dir.path()).unwrap();
        let g = Fabric::load_image(dir.path()).unwrap();
        assert_eq!(g.peek_bytes(r.addr(0), 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(g.regions(), f.regions());
    }
}
