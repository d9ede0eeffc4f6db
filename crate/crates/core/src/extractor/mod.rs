//! Flow tracker and feature extraction in the 125 MHz packet domain.
//!
//! Each packet is hashed to a direct-mapped flow slot, a meta register is
//! built from its header, and the capture mode decides what reaches feature
//! memory: ALU-accumulated flow statistics, a per-packet word, or per-packet
//! interval/payload vectors. Once a flow reaches its packet threshold its
//! record is frozen and announced through the ready FIFO; it is released when
//! the compute side reports FIN for it.

pub mod alu;
pub mod features;

use crate::fabric::{Address, BankId, FabricError, Port, Word, EXTRACTOR_PERIOD_PS, WORD_BYTES};
use crate::traffic::{FiveTuple, ParsedHeader};
use alu::{meta, MetaRegister, MicroOpProgram, META_BYTES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

pub use alu::{AluOp, MicroOp, Operand, SrcBank};
pub use features::{feature_program, packet_copy_program, Accumulator, FeatureProgram, ProgramBuilder};

pub const DEFAULT_TABLE_DEPTH: usize = 8192;
/// Pipeline stages: hash, slot read, ALU, writeback.
pub const PIPELINE_STAGES: u64 = 4;
/// Interval bytes in interval-vector capture are clamped to the int8 range.
pub const INTERVAL_BYTE_MAX: u64 = 127;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractorError {
    #[error("invalid micro-op program: {0}")]
    InvalidProgram(String),
    #[error("feature program needs {needed} bytes, word has 16")]
    CapacityExceeded { needed: usize },
    #[error("feature {0} is not supported by the ALU cluster")]
    UnsupportedFeature(u8),
    #[error("invalid extractor config: {0}")]
    InvalidConfig(String),
    #[error("ready FIFO full")]
    FifoFull,
    #[error("FIN for record {got} but in-flight head is {expected:?}")]
    OutOfOrderFin { expected: Option<u32>, got: u32 },
    #[error("frozen record {0} changed between freeze and FIN")]
    FrozenModified(u32),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// FNV-1a over the canonical tuple bytes followed by a 64-bit finalizer
/// (murmur3 fmix64), masked to the table depth.
pub fn tuple_hash(tuple: &FiveTuple) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tuple.canonical().to_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

pub fn hash_tuple(tuple: &FiveTuple, table_depth: usize) -> usize {
    debug_assert!(table_depth.is_power_of_two());
    (tuple_hash(tuple) as usize) & (table_depth - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptureMode {
    /// ALU-accumulated statistics, one word per flow, ready after `threshold` packets.
    Accumulate { program: MicroOpProgram, threshold: u32 },
    /// One word per packet, written to a ring of `ring_words` entries and
    /// announced immediately. Flow slots only track orientation and timing.
    Packet { program: MicroOpProgram, ring_words: usize },
    /// One byte per packet: `min(127, interval µs)`, 16 per word.
    Intervals { packets: u32 },
    /// First 16 payload bytes of each packet, one word per packet.
    Payload { packets: u32 },
}

impl CaptureMode {
    pub fn words_per_record(&self) -> usize {
        match *self {
            CaptureMode::Accumulate { .. } | CaptureMode::Packet { .. } => 1,
            CaptureMode::Intervals { packets } => (packets as usize).div_ceil(WORD_BYTES),
            CaptureMode::Payload { packets } => packets as usize,
        }
    }

    fn threshold(&self) -> u32 {
        match *self {
            CaptureMode::Accumulate { threshold, .. } => threshold,
            CaptureMode::Packet { .. } => 1,
            CaptureMode::Intervals { packets } | CaptureMode::Payload { packets } => packets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    #[serde(default = "default_depth")]
    pub table_depth: usize,
    pub mode: CaptureMode,
    /// First feature-memory word of the record area.
    #[serde(default)]
    pub feature_base: usize,
    /// Ready/in-flight FIFO capacity; defaults to the number of records.
    #[serde(default)]
    pub fifo_capacity: Option<usize>,
    #[serde(default = "default_period")]
    pub period_ps: u64,
}

fn default_depth() -> usize {
    DEFAULT_TABLE_DEPTH
}

fn default_period() -> u64 {
    EXTRACTOR_PERIOD_PS
}

impl ExtractorConfig {
    pub fn new(mode: CaptureMode) -> Self {
        ExtractorConfig { table_depth: DEFAULT_TABLE_DEPTH, mode, feature_base: 0, fifo_capacity: None, period_ps: EXTRACTOR_PERIOD_PS }
    }

    pub fn records(&self) -> usize {
        match self.mode {
            CaptureMode::Packet { ring_words, .. } => ring_words,
            _ => self.table_depth,
        }
    }

    /// Words of feature memory the record area spans.
    pub fn record_area_words(&self) -> usize {
        self.records() * self.mode.words_per_record()
    }

    pub fn validate(&self) -> Result<(), ExtractorError> {
        let bad = |m: &str| Err(ExtractorError::InvalidConfig(m.into()));
        if !self.table_depth.is_power_of_two() {
            return bad("table_depth must be a power of two");
        }
        if self.mode.threshold() == 0 {
            return bad("flow threshold must be positive");
        }
        if self.period_ps == 0 {
            return bad("clock period must be positive");
        }
        if self.records() == 0 || self.fifo_capacity == Some(0) {
            return bad("record count and FIFO capacity must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowSlot {
    pub pkt_count: u32,
    pub last_ts_ns: u64,
    /// Whether the first packet of the flow was in canonical orientation.
    pub orientation: bool,
    pub frozen: bool,
    pub tuple_tag: FiveTuple,
}

const FREE_SLOT: FlowSlot = FlowSlot {
    pkt_count: 0,
    last_ts_ns: 0,
    orientation: true,
    frozen: false,
    tuple_tag: FiveTuple { src_ip: 0, dst_ip: 0, src_port: 0, dst_port: 0, protocol: 0 },
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    NewFlow,
    Hit,
    Ready,
    Collision,
    Recycled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorEvent {
    pub kind: EventKind,
    pub slot: u32,
    pub tuple: FiveTuple,
}

/// Result of pushing one packet through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ingest {
    pub event: ExtractorEvent,
    /// The packet opened a new flow (also set when the first packet is already ready).
    pub new_flow: bool,
    pub issue_cycle: u64,
    pub done_cycle: u64,
}

/// A record handed to the compute domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadyFlow {
    /// Flow slot in flow modes, ring index in packet mode.
    pub record: u32,
    pub slot: u32,
    pub base: Address,
    pub words: usize,
    /// First-seen orientation of the flow.
    pub tuple: FiveTuple,
    pub packets: u32,
    /// Time the record becomes visible in feature memory.
    pub ready_ps: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorStats {
    pub packets: u64,
    pub new_flows: u64,
    pub hits: u64,
    pub frozen_hits: u64,
    pub collisions: u64,
    pub ready: u64,
    pub recycled: u64,
    pub first_issue: Option<u64>,
    pub last_issue: Option<u64>,
    pub period_ps: u64,
}

impl ExtractorStats {
    /// Packets per second over the busy window of the pipeline.
    pub fn throughput_pps(&self) -> f64 {
        match (self.first_issue, self.last_issue) {
            (Some(a), Some(b)) => self.packets as f64 * 1e12 / ((b - a + 1) * self.period_ps) as f64,
            _ => 0.0,
        }
    }
}

#[derive(Debug)]
pub struct Extractor {
    cfg: ExtractorConfig,
    slots: Vec<FlowSlot>,
    slot_last_issue: Vec<Option<u64>>,
    last_issue: Option<u64>,
    ready: VecDeque<ReadyFlow>,
    inflight: VecDeque<u32>,
    ring_owner: Vec<Option<(u32, FiveTuple)>>,
    ring_next: usize,
    frozen_digest: HashMap<u32, [u8; 32]>,
    occupancy: usize,
    stats: ExtractorStats,
}

impl Extractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self, ExtractorError> {
        cfg.validate()?;
        let ring = match cfg.mode {
            CaptureMode::Packet { ring_words, .. } => ring_words,
            _ => 0,
        };
        Ok(Extractor {
            slots: vec![FREE_SLOT; cfg.table_depth],
            slot_last_issue: vec![None; cfg.table_depth],
            last_issue: None,
            ready: VecDeque::new(),
            inflight: VecDeque::new(),
            ring_owner: vec![None; ring],
            ring_next: 0,
            frozen_digest: HashMap::new(),
            occupancy: 0,
            stats: ExtractorStats { period_ps: cfg.period_ps, ..Default::default() },
            cfg,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ExtractorStats {
        &self.stats
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn slot(&self, index: usize) -> &FlowSlot {
        &self.slots[index]
    }

    pub fn slots(&self) -> &[FlowSlot] {
        &self.slots
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len()
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    pub fn peek_ready(&self) -> Option<&ReadyFlow> {
        self.ready.front()
    }

    /// Ready FIFO contents, head first.
    pub fn ready_flows(&self) -> impl Iterator<Item = &ReadyFlow> {
        self.ready.iter()
    }

    pub fn pop_ready(&mut self) -> Option<ReadyFlow> {
        self.ready.pop_front()
    }

    fn fifo_capacity(&self) -> usize {
        self.cfg.fifo_capacity.unwrap_or_else(|| self.cfg.records())
    }

    fn record_base(&self, record: usize) -> Address {
        Address::new(BankId::Feature, self.cfg.feature_base + record * self.cfg.mode.words_per_record())
    }

    fn record_digest(&self, record: u32, fabric: &crate::fabric::Fabric) -> Result<[u8; 32], ExtractorError> {
        let base = self.record_base(record as usize);
        let bytes = fabric.peek_bytes(base, self.cfg.mode.words_per_record() * WORD_BYTES)?;
        Ok(Sha256::digest(&bytes).into())
    }

    /// Cycle in which a packet arriving at `arrival_ns` enters the pipeline.
    fn issue_cycle(&self, arrival_ns: u64, slot: usize) -> u64 {
        let arrival = (arrival_ns * 1000).div_ceil(self.cfg.period_ps);
        let mut c = arrival;
        if let Some(l) = self.last_issue {
            c = c.max(l + 1);
        }
        if let Some(l) = self.slot_last_issue[slot] {
            c = c.max(l + PIPELINE_STAGES);
        }
        c
    }

    pub fn ingest(&mut self, h: &ParsedHeader, fabric: &mut crate::fabric::Fabric) -> Result<Ingest, ExtractorError> {
        let canonical = h.tuple.canonical();
        let digest = tuple_hash(&canonical);
        let slot_idx = (digest as usize) & (self.cfg.table_depth - 1);
        let issue = self.issue_cycle(h.arrival_ns, slot_idx);
        let writeback = issue + PIPELINE_STAGES - 1;
        let done = issue + PIPELINE_STAGES;
        let ready_ps = done * self.cfg.period_ps;

        if let CaptureMode::Packet { .. } = self.cfg.mode {
            if self.ring_owner[self.ring_next].is_some() || self.ready.len() >= self.fifo_capacity() {
                return Err(ExtractorError::FifoFull);
            }
        }

        self.last_issue = Some(issue);
        self.slot_last_issue[slot_idx] = Some(issue);
        self.stats.packets += 1;
        self.stats.first_issue.get_or_insert(issue);
        self.stats.last_issue = Some(issue);

        let event = |kind| ExtractorEvent { kind, slot: slot_idx as u32, tuple: canonical };
        let mut out = Ingest { event: event(EventKind::Hit), new_flow: false, issue_cycle: issue, done_cycle: done };

        let slot = &mut self.slots[slot_idx];
        let interval_ns;
        if slot.pkt_count == 0 {
            *slot = FlowSlot {
                pkt_count: 1,
                last_ts_ns: h.arrival_ns,
                orientation: h.tuple.is_canonical(),
                frozen: false,
                tuple_tag: canonical,
            };
            interval_ns = 0;
            self.occupancy += 1;
            self.stats.new_flows += 1;
            out.new_flow = true;
            out.event = event(EventKind::NewFlow);
        } else if slot.tuple_tag != canonical {
            self.stats.collisions += 1;
            out.event = event(EventKind::Collision);
            return Ok(out);
        } else {
            slot.pkt_count = slot.pkt_count.saturating_add(1);
            interval_ns = h.arrival_ns.saturating_sub(slot.last_ts_ns);
            slot.last_ts_ns = h.arrival_ns;
            self.stats.hits += 1;
            if slot.frozen {
                self.stats.frozen_hits += 1;
                return Ok(out);
            }
        }
        let slot = *slot;
        let backward = h.tuple.is_canonical() != slot.orientation;
        let first_seen = if slot.orientation { canonical } else { canonical.reversed() };

        let mut m: MetaRegister = [0; META_BYTES];
        m[meta::PKT_SIZE..meta::PKT_SIZE + 4].copy_from_slice(&h.pkt_size.to_le_bytes());
        m[meta::FLAGS] = h.flags;
        m[meta::DIR] = u8::from(backward);
        m[meta::PROTO] = canonical.protocol;
        let interval_us = interval_ns / 1000;
        m[meta::INTERVAL..meta::INTERVAL + 2].copy_from_slice(&(interval_us.min(0xffff) as u16).to_le_bytes());
        m[meta::ONE] = 1;
        m[meta::DIGEST..meta::DIGEST + 2].copy_from_slice(&(digest as u16).to_le_bytes());

        let n = slot.pkt_count;
        let idx = (n - 1) as usize;
        let record = match &self.cfg.mode {
            CaptureMode::Accumulate { program, .. } => {
                let addr = self.record_base(slot_idx);
                let hist = if out.new_flow { program.init_word() } else { fabric.peek(addr)? };
                fabric.write(addr, program.step(&m, &hist), Port::P1, writeback)?;
                slot_idx
            }
            CaptureMode::Packet { program, .. } => {
                let r = self.ring_next;
                fabric.write(self.record_base(r), program.step(&m, &[0; WORD_BYTES]), Port::P1, writeback)?;
                r
            }
            CaptureMode::Intervals { packets } => {
                if idx < *packets as usize {
                    let mut addr = self.record_base(slot_idx);
                    addr.word_index += idx / WORD_BYTES;
                    let mut w: Word = if idx.is_multiple_of(WORD_BYTES) { [0; WORD_BYTES] } else { fabric.peek(addr)? };
                    w[idx % WORD_BYTES] = interval_us.min(INTERVAL_BYTE_MAX) as u8;
                    fabric.write(addr, w, Port::P1, writeback)?;
                }
                slot_idx
            }
            CaptureMode::Payload { packets } => {
                if idx < *packets as usize {
                    let mut addr = self.record_base(slot_idx);
                    addr.word_index += idx;
                    let mut w: Word = [0; WORD_BYTES];
                    let k = h.payload_prefix.len().min(WORD_BYTES);
                    w[..k].copy_from_slice(&h.payload_prefix[..k]);
                    fabric.write(addr, w, Port::P1, writeback)?;
                }
                slot_idx
            }
        };

        let is_packet_mode = matches!(self.cfg.mode, CaptureMode::Packet { .. });
        if is_packet_mode || n == self.cfg.mode.threshold() {
            if self.ready.len() >= self.fifo_capacity() {
                return Err(ExtractorError::FifoFull);
            }
            if is_packet_mode {
                self.ring_owner[record] = Some((slot_idx as u32, first_seen));
                self.ring_next = (self.ring_next + 1) % self.ring_owner.len();
            } else {
                self.slots[slot_idx].frozen = true;
                let d = self.record_digest(record as u32, fabric)?;
                self.frozen_digest.insert(record as u32, d);
            }
            self.ready.push_back(ReadyFlow {
                record: record as u32,
                slot: slot_idx as u32,
                base: self.record_base(record),
                words: self.cfg.mode.words_per_record(),
                tuple: first_seen,
                packets: n,
                ready_ps,
            });
            self.inflight.push_back(record as u32);
            self.stats.ready += 1;
            out.event = event(EventKind::Ready);
        }
        Ok(out)
    }

    /// Releases the record at the head of the in-flight FIFO. In flow modes the
    /// slot becomes free for a new tuple.
    pub fn recycle(&mut self, record: u32, fabric: &crate::fabric::Fabric) -> Result<ExtractorEvent, ExtractorError> {
        let head = self.inflight.front().copied();
        if head != Some(record) {
            return Err(ExtractorError::OutOfOrderFin { expected: head, got: record });
        }
        self.inflight.pop_front();
        if let CaptureMode::Packet { .. } = self.cfg.mode {
            let (slot, tuple) = self.ring_owner[record as usize].take().expect("in-flight ring entry has an owner");
            return Ok(ExtractorEvent { kind: EventKind::Recycled, slot, tuple });
        }
        let frozen = self.frozen_digest.remove(&record);
        if frozen != Some(self.record_digest(record, fabric)?) {
            return Err(ExtractorError::FrozenModified(record));
        }
        let slot = &mut self.slots[record as usize];
        let tuple = slot.tuple_tag;
        *slot = FREE_SLOT;
        self.occupancy -= 1;
        self.stats.recycled += 1;
        Ok(ExtractorEvent { kind: EventKind::Recycled, slot: record, tuple })
    }
}

#[cfg(test)]
mod tests;
