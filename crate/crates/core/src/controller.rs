//! Control domain: loads programs and the extractor configuration, hands
//! result slots to the engines, and turns FIN handshakes into decision
//! records and flow-slot recycling.

use crate::compiler::kernel::{OutBlock, PacketKernel};
use crate::compiler::schedule::{Schedule, ARY_ICACHE_DEPTH, RESULT_SLOTS};
use crate::extractor::{Extractor, ExtractorConfig, ExtractorError, ReadyFlow};
use crate::fabric::{Address, BankId, Fabric, FabricError, Region, WORD_BYTES};
use crate::traffic::FiveTuple;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VPE_ICACHE_DEPTH: usize = 256;
pub const PCACHE_DEPTH: usize = 256;
pub const POST_TABLE_DEPTH: usize = 256;
/// Fixed-point one for softmax outputs (Q15).
pub const PROB_ONE: i32 = 1 << 15;
/// Byte pattern written over a result slot before an engine is started on it.
const POISON: u8 = 0xA5;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("{what} needs {need} entries, capacity {have}")]
    Capacity { what: String, need: usize, have: usize },
    #[error("FIN for slot {0} whose result region was never written")]
    StaleResult(usize),
    #[error("FIN without a start")]
    UnexpectedFin,
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
}

/// Start/FIN handshake between the controller and one engine.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtrlRegisterFile {
    pub start: bool,
    pub fin: bool,
    pub result: Option<Address>,
    pub config: Vec<u32>,
    pub fins: u64,
}

impl CtrlRegisterFile {
    pub fn set_start(&mut self, result: Address) {
        self.start = true;
        self.fin = false;
        self.result = Some(result);
    }

    /// Engine side: consume the start flag.
    pub fn take_start(&mut self) -> Option<Address> {
        if self.start {
            self.start = false;
            self.result
        } else {
            None
        }
    }

    /// Engine side: completion of the inference started last.
    pub fn raise_fin(&mut self) -> Result<(), ControllerError> {
        if self.fin || self.result.is_none() {
            return Err(ControllerError::UnexpectedFin);
        }
        self.fin = true;
        self.fins += 1;
        Ok(())
    }

    /// Controller side: acknowledge FIN and get the result address.
    pub fn take_fin(&mut self) -> Option<Address> {
        if self.fin {
            self.fin = false;
            self.result.take()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tuple: FiveTuple,
    pub verdict: usize,
    pub scores: Vec<i32>,
    pub timestamp_ns: u64,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[i32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `exp(-d * scale)` in Q16 for distances `d = max - x` in `0..256`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftmaxLut {
    table: Vec<u32>,
}

impl SoftmaxLut {
    pub fn new(scale: f64) -> Self {
        let table = (0..256).map(|d| (f64::from(d) * -scale).exp().mul_add(65536.0, 0.5).floor() as u32).collect();
        SoftmaxLut { table }
    }

    /// Q15 probabilities summing to exactly [`PROB_ONE`]. Flooring leaves a
    /// remainder that goes one unit at a time to the largest fractional parts,
    /// lowest index first on ties.
    pub fn apply(&self, v: &[i32]) -> Vec<i32> {
        assert!(!v.is_empty(), "softmax of an empty vector");
        let max = *v.iter().max().expect("non-empty");
        let e: Vec<u64> = v
            .iter()
            .map(|&x| {
                let d = i64::from(max) - i64::from(x);
                self.table.get(d as usize).map_or(0, |&t| u64::from(t))
            })
            .collect();
        let sum: u64 = e.iter().sum();
        let one = PROB_ONE as u64;
        let mut p: Vec<i32> = e.iter().map(|&x| (x * one / sum) as i32).collect();
        let mut left = PROB_ONE - p.iter().sum::<i32>();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(e[i] * one % sum), i));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            p[i] += 1;
            left -= 1;
        }
        p
    }
}

/// Softmax of int values on a grid of step `scale`, in Q15.
pub fn softmax_fixedpoint(v: &[i32], scale: f64) -> Vec<i32> {
    SoftmaxLut::new(scale).apply(v)
}

/// Q15 probability to the int8 grid of step 1/127 (round half up).
pub fn prob_to_i8(p: i32) -> i8 {
    ((i64::from(p) * 127 + i64::from(PROB_ONE / 2)) >> 15) as i8
}

/// Post-processing from the stored result to the score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Readout {
    /// The stored vector is the score vector.
    Direct,
    /// Sum a `rows x cols` output over rows.
    ColumnSum { rows: usize, cols: usize },
}

impl Readout {
    pub fn apply(&self, out: &[i32]) -> Vec<i32> {
        match *self {
            Readout::Direct => out.to_vec(),
            Readout::ColumnSum { rows, cols } => {
                (0..cols).map(|c| (0..rows).map(|r| out[r * cols + c]).fold(0i32, i32::wrapping_add)).collect()
            }
        }
    }
}

/// Programs and result format for one model.
#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Packet(PacketKernel),
    Flow { schedule: Schedule, out_elems: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlEventKind {
    Init,
    Start,
    Fin,
    Recycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub kind: ControlEventKind,
    pub t_ns: u64,
    pub slot: Option<usize>,
}

#[derive(Debug)]
pub struct Controller {
    pub bundle: Bundle,
    pub readout: Readout,
    pub vpe_ctrl: CtrlRegisterFile,
    pub ary_ctrl: CtrlRegisterFile,
    results: Region,
    slot_words: usize,
    outputs: Vec<OutBlock>,
    next_slot: usize,
    pub log: Vec<ControlEvent>,
    pub records: Vec<DecisionRecord>,
}

impl Controller {
    /// Clears the fabric, checks that every image fits its cache, lays out the
    /// extractor's record area and the result slots, and raises both start
    /// flags.
    pub fn initialize(
        bundle: Bundle,
        readout: Readout,
        ext_cfg: ExtractorConfig,
        fabric: &mut Fabric,
    ) -> Result<(Controller, Extractor), ControllerError> {
        let cap = |what: &str, need: usize, have: usize| {
            if need > have {
                Err(ControllerError::Capacity { what: what.into(), need, have })
            } else {
                Ok(())
            }
        };
        let (outputs, slot_words) = match &bundle {
            Bundle::Packet(k) => {
                cap("VPE iCache", k.program.words.len(), VPE_ICACHE_DEPTH)?;
                cap("VPE pCache", k.program.pcache.len(), PCACHE_DEPTH)?;
                cap("post-op table", k.program.posts.len(), POST_TABLE_DEPTH)?;
                (k.outputs.clone(), k.slot_words.max(1))
            }
            Bundle::Flow { schedule, out_elems } => {
                cap("AryPE iCache", schedule.ary_program.len(), ARY_ICACHE_DEPTH)?;
                let words = (out_elems * 4).div_ceil(WORD_BYTES).max(1);
                (vec![OutBlock { word_offset: 0, count: *out_elems, raw: true }], words)
            }
        };
        fabric.reset();
        fabric.reset_timing();
        let extractor = Extractor::new(ext_cfg.clone())?;
        fabric.allocate_at(BankId::Feature, "records", ext_cfg.feature_base, ext_cfg.record_area_words())?;
        let results = match &bundle {
            Bundle::Packet(_) => fabric.allocate(BankId::Compute0, "results", RESULT_SLOTS * slot_words)?,
            Bundle::Flow { schedule, .. } => {
                let mut results = None;
                for r in &schedule.layout {
                    let region = fabric.allocate_at(r.bank, &r.name, r.base, r.words)?;
                    if r.name == "results" {
                        results = Some(region);
                    }
                }
                results.expect("schedule layout has a results ring")
            }
        };
        let mut c = Controller {
            bundle,
            readout,
            vpe_ctrl: CtrlRegisterFile::default(),
            ary_ctrl: CtrlRegisterFile::default(),
            results,
            slot_words,
            outputs,
            next_slot: 0,
            log: vec![ControlEvent { kind: ControlEventKind::Init, t_ns: 0, slot: None }],
            records: Vec::new(),
        };
        c.vpe_ctrl.start = true;
        c.ary_ctrl.start = matches!(c.bundle, Bundle::Flow { .. });
        Ok((c, extractor))
    }

    pub fn slot_words(&self) -> usize {
        self.slot_words
    }

    pub fn slot_addr(&self, slot: usize) -> Address {
        self.results.addr(slot * self.slot_words)
    }

    fn slot_of(&self, addr: Address) -> usize {
        (addr.word_index - self.results.base) / self.slot_words
    }

    /// Register file of the engine that produces results for this bundle.
    pub fn engine_ctrl(&mut self) -> &mut CtrlRegisterFile {
        match self.bundle {
            Bundle::Packet(_) => &mut self.vpe_ctrl,
            Bundle::Flow { .. } => &mut self.ary_ctrl,
        }
    }

    /// Picks the next result slot, poisons it and starts the engine on it.
    pub fn start(&mut self, fabric: &mut Fabric, t_ns: u64) -> Result<Address, ControllerError> {
        let slot = self.next_slot;
        self.next_slot = (self.next_slot + 1) % RESULT_SLOTS;
        let addr = self.slot_addr(slot);
        fabric.poke_bytes(addr, &vec![POISON; self.slot_words * WORD_BYTES])?;
        self.engine_ctrl().set_start(addr);
        self.log.push(ControlEvent { kind: ControlEventKind::Start, t_ns, slot: Some(slot) });
        Ok(addr)
    }

    /// Reads the stored outputs of a result slot.
    pub fn read_slot(&self, fabric: &Fabric, addr: Address) -> Result<Vec<i32>, ControllerError> {
        let bytes = fabric.peek_bytes(addr, self.slot_words * WORD_BYTES)?;
        if bytes.iter().all(|&b| b == POISON) {
            return Err(ControllerError::StaleResult(self.slot_of(addr)));
        }
        let mut out = Vec::new();
        for b in &self.outputs {
            let at = b.word_offset * WORD_BYTES;
            if b.raw {
                out.extend(bytes[at..at + 4 * b.count].chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))));
            } else {
                out.extend(bytes[at..at + b.count].iter().map(|&v| i32::from(v as i8)));
            }
        }
        Ok(out)
    }

    /// Handles a FIN: reads the result, applies the readout, records the
    /// decision and recycles the flow's record.
    pub fn on_fin(
        &mut self,
        ready: &ReadyFlow,
        result: Address,
        extractor: &mut Extractor,
        fabric: &Fabric,
        t_ns: u64,
    ) -> Result<DecisionRecord, ControllerError> {
        let slot = self.slot_of(result);
        self.log.push(ControlEvent { kind: ControlEventKind::Fin, t_ns, slot: Some(slot) });
        let out = self.read_slot(fabric, result)?;
        let scores = self.readout.apply(&out);
        let rec = DecisionRecord { tuple: ready.tuple, verdict: argmax(&scores), scores, timestamp_ns: t_ns };
        extractor.recycle(ready.record, fabric)?;
        self.log.push(ControlEvent { kind: ControlEventKind::Recycle, t_ns, slot: Some(ready.record as usize) });
        self.records.push(rec.clone());
        Ok(rec)
    }
}

/// Newline-delimited JSON, one record per line.
pub fn records_to_jsonl(records: &[DecisionRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[3, -7]), 0);
        assert_eq!(argmax(&[5, 5]), 0);
        assert_eq!(argmax(&[-1, 4, 4, 2]), 1);
    }

    #[test]
    fn uniform_and_dominant() {
        let p = softmax_fixedpoint(&[7; 5], 0.1);
        assert_eq!(p.iter().sum::<i32>(), PROB_ONE);
        assert!(p.iter().all(|&x| (x - PROB_ONE / 5).abs() <= 1));
        let mut v = vec![-128; 15];
        v[4] = 127;
        let p = softmax_fixedpoint(&v, 1.0 / 16.0);
        assert!(f64::from(p[4]) / f64::from(PROB_ONE) >= 0.99);
        assert_eq!(prob_to_i8(PROB_ONE), 127);
        assert_eq!(prob_to_i8(0), 0);
    }

    #[test]
    fn column_sum_readout() {
        let r = Readout::ColumnSum { rows: 2, cols: 3 };
        assert_eq!(r.apply(&[1, 2, 3, 10, 20, 30]), vec![11, 22, 33]);
        assert_eq!(Readout::Direct.apply(&[4, 5]), vec![4, 5]);
    }

    #[test]
    fn handshake() {
        let mut c = CtrlRegisterFile::default();
        assert!(c.raise_fin().is_err());
        let a = Address::new(BankId::Compute0, 3);
        c.set_start(a);
        assert_eq!(c.take_start(), Some(a));
        assert_eq!(c.take_start(), None);
        c.raise_fin().unwrap();
        assert!(c.raise_fin().is_err());
        assert_eq!(c.take_fin(), Some(a));
        assert_eq!(c.fins, 1);
    }

    fn packet_setup(fabric: &mut Fabric) -> (Controller, Extractor) {
        use crate::compiler::kernel::emit_packet_kernel;
        use crate::compiler::lower::Graph;
        use crate::compiler::quantize::quantize_model;
        use crate::extractor::features::packet_copy_program;
        use crate::extractor::CaptureMode;
        let g = Graph::from_ir(&crate::compiler::ir::usecase1(5)).unwrap();
        let q = quantize_model(&g, &[vec![3, -9, 40, 7, 0, 1]], 1.0).unwrap();
        let k = emit_packet_kernel(&q).unwrap();
        let ext = ExtractorConfig::new(CaptureMode::Packet { program: packet_copy_program(), ring_words: 64 });
        Controller::initialize(Bundle::Packet(k), Readout::Direct, ext, fabric).unwrap()
    }

    #[test]
    fn oversized_image_is_rejected() {
        let mut fabric = Fabric::default();
        let (c, _) = packet_setup(&mut fabric);
        let Bundle::Packet(mut k) = c.bundle else { unreachable!() };
        let filler = k.program.words[2];
        k.program.words.resize(VPE_ICACHE_DEPTH + 1, filler);
        let ext = ExtractorConfig::new(crate::extractor::CaptureMode::Intervals { packets: 20 });
        let err = Controller::initialize(Bundle::Packet(k), Readout::Direct, ext, &mut fabric).unwrap_err();
        assert!(matches!(err, ControllerError::Capacity { need, have, .. } if need == VPE_ICACHE_DEPTH + 1 && have == VPE_ICACHE_DEPTH));
    }

    #[test]
    fn reinitialize_clears_previous_state() {
        let fresh_dir = tempfile::tempdir().unwrap();
        let used_dir = tempfile::tempdir().unwrap();
        let mut fresh = Fabric::default();
        packet_setup(&mut fresh);
        fresh.dump_image(fresh_dir.path()).unwrap();

        let mut used = Fabric::default();
        let (mut c, _) = packet_setup(&mut used);
        c.start(&mut used, 0).unwrap();
        used.poke(Address::new(BankId::Feature, 17), [9; 16]).unwrap();
        used.poke(Address::new(BankId::Compute1, 4000), [1; 16]).unwrap();
        // a different model's layout first, then the original bundle again
        let sched = crate::compiler::schedule::schedule(
            &crate::compiler::lower::Graph::from_ir(&crate::compiler::ir::usecase3(1)).unwrap(),
            &crate::compiler::schedule::ScheduleConfig { flows: 4, ..Default::default() },
        )
        .unwrap();
        let ext = ExtractorConfig::new(crate::extractor::CaptureMode::Payload { packets: 15 });
        let ext = ExtractorConfig { table_depth: 512, ..ext };
        Controller::initialize(Bundle::Flow { schedule: sched, out_elems: 960 }, Readout::Direct, ext, &mut used).unwrap();
        assert!(used.regions().iter().any(|r| r.name == "pingpong1"));
        packet_setup(&mut used);
        used.dump_image(used_dir.path()).unwrap();
        let files: Vec<_> = std::fs::read_dir(fresh_dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files.len(), 4);
        for name in files {
            let a = std::fs::read(fresh_dir.path().join(&name)).unwrap();
            let b = std::fs::read(used_dir.path().join(&name)).unwrap();
            assert!(a == b, "{name:?} differs");
        }
    }

    #[test]
    fn fin_without_result_is_stale() {
        let mut fabric = Fabric::default();
        let (mut c, mut ext) = packet_setup(&mut fabric);
        let addr = c.start(&mut fabric, 0).unwrap();
        assert!(matches!(c.read_slot(&fabric, addr), Err(ControllerError::StaleResult(0))));
        fabric.poke_bytes(addr, &[1, 0, 0, 0, 2, 0, 0, 0]).unwrap();
        assert_eq!(c.read_slot(&fabric, addr).unwrap(), vec![1, 2]);
        // recycling needs the record at the in-flight head
        let ready = ReadyFlow {
            record: 0,
            slot: 0,
            base: Address::new(BankId::Feature, 0),
            words: 1,
            tuple: FiveTuple { src_ip: 1, dst_ip: 2, src_port: 3, dst_port: 4, protocol: 6 },
            packets: 1,
            ready_ps: 0,
        };
        assert!(matches!(c.on_fin(&ready, addr, &mut ext, &fabric, 5), Err(ControllerError::Extractor(_))));
    }

    proptest! {
        #[test]
        fn softmax_tracks_reference(v in prop::collection::vec(-128i32..128, 1..40), scale in 0.005f64..0.2) {
            let p = softmax_fixedpoint(&v, scale);
            prop_assert_eq!(p.iter().sum::<i32>(), PROB_ONE);
            let max = v.iter().copied().max().unwrap();
            let e: Vec<f64> = v.iter().map(|&x| (f64::from(x - max) * scale).exp()).collect();
            let s: f64 = e.iter().sum();
            for (pi, ei) in p.iter().zip(&e) {
                prop_assert!((f64::from(*pi) / f64::from(PROB_ONE) - ei / s).abs() <= 1.0 / 64.0);
            }
        }

        // scaling all scores by a positive constant keeps the verdict
        #[test]
        fn argmax_scale_invariant(v in prop::collection::vec(-1000i32..1000, 1..20), c in 1i32..50) {
            let scaled: Vec<i32> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(argmax(&v), argmax(&scaled));
        }
    }
}
