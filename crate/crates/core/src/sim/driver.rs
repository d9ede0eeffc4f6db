//! Dual-clock event loop. The extractor advances packet by packet in its own
//! cycles; the compute domain advances per inference (packet tasks) or per
//! batch of flows (flow tasks) in compute cycles. Cross-domain hand-offs carry
//! picosecond timestamps and the loop always takes the earliest next event,
//! the extractor first on ties.

use super::config::{Capture, ConfigError, Granularity, UseCaseConfig};
use super::exec::Executor;
use super::metrics::{ComputeMetrics, EndToEndMetrics, ExtractorMetrics, Metrics, OracleMetrics, VpeMetrics};
use super::oracle::{golden_record, infer, infer_all, GoldenMode};
use super::{calibration_set, compile, Compiled};
use crate::arype::AryError;
use crate::compiler::kernel::OUT_AREG;
use crate::compiler::schedule::schedule;
use crate::compiler::timing::timing;
use crate::compiler::CompileError;
use crate::controller::{Bundle, ControlEvent, Controller, ControllerError, DecisionRecord, Readout};
use crate::extractor::features::feature_program;
use crate::extractor::{EventKind, Extractor, ExtractorError, ReadyFlow};
use crate::fabric::{period_ps, Address, Fabric, FabricError, COMPUTE_DEPTH, FEATURE_DEPTH, WORD_BYTES};
use crate::traffic::{generate_trace, parse_packet, read_pcap, FiveTuple, ParseConfig, ParsedHeader, RawPacket, TrafficError};
use crate::vpe::{Vpe, VpeError};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

/// Salt separating the calibration stream from the weight stream.
const CALIB_SALT: u64 = 0x5eed_ca1b;
/// Driver iterations without progress before the watchdog fires.
const WATCHDOG_LIMIT: u32 = 4;
/// Inputs per executor call when re-checking packet tasks layer by layer.
const CHECK_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Vpe(#[from] VpeError),
    #[error(transparent)]
    Array(#[from] AryError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("watchdog: no progress at {0} ns")]
    Watchdog(u64),
}

#[derive(Debug)]
pub struct SimOutput {
    pub metrics: Metrics,
    pub records: Vec<DecisionRecord>,
    pub control_log: Vec<ControlEvent>,
    pub compiled: Compiled,
}

pub fn load_packets(cfg: &UseCaseConfig) -> Result<Vec<RawPacket>, SimError> {
    match (&cfg.traffic.pcap, &cfg.traffic.synthetic) {
        (Some(path), _) => Ok(read_pcap(path)?),
        (_, Some(spec)) => Ok(generate_trace(spec)?),
        _ => unreachable!("validated"),
    }
}

pub fn compile_config(cfg: &UseCaseConfig) -> Result<Compiled, SimError> {
    let ir = cfg.model_ir()?;
    let c = cfg.calibration;
    let calib = calibration_set(ir.input.len(), c.count, c.lo, c.hi, cfg.seed ^ CALIB_SALT);
    Ok(compile(&ir, &cfg.schedule_config(), &calib)?)
}

pub fn run(cfg: &UseCaseConfig) -> Result<SimOutput, SimError> {
    let raw = load_packets(cfg)?;
    run_with_packets(cfg, &raw)
}

/// Information kept for a ready record until its decision.
struct Pending {
    arrival_ns: u64,
    golden: Vec<u8>,
}

struct Sim<'a> {
    cfg: &'a UseCaseConfig,
    compiled: &'a Compiled,
    fabric: Fabric,
    ctrl: Controller,
    ext: Extractor,
    vpe: Vpe,
    exec: Executor<'a>,
    golden_mode: GoldenMode,
    in_len: usize,
    comp_ps: u64,
    history: HashMap<FiveTuple, Vec<ParsedHeader>>,
    pending: VecDeque<Pending>,
    /// First compute cycle the engine can take new work.
    engine_free: u64,
    batches: u64,
    vpe_m: VpeMetrics,
    latencies: Vec<u64>,
    oracle: OracleMetrics,
    checked_inputs: Vec<Vec<i8>>,
    occupancy_peak: usize,
    stalls: u64,
}

impl Sim<'_> {
    fn packet_task(&self) -> bool {
        self.cfg.granularity == Granularity::Packet
    }

    fn diverge(&mut self, what: String) {
        if self.oracle.first_divergence.is_none() {
            self.oracle.first_divergence = Some(what);
        }
    }

    fn ingest(&mut self, h: &ParsedHeader) -> Result<bool, SimError> {
        let r = match self.ext.ingest(h, &mut self.fabric) {
            Err(ExtractorError::FifoFull) => return Ok(false),
            other => other?,
        };
        let canon = h.tuple.canonical();
        if r.new_flow {
            self.history.insert(canon, vec![h.clone()]);
        } else if r.event.kind != EventKind::Collision {
            self.history.entry(canon).or_default().push(h.clone());
        }
        if r.event.kind == EventKind::Ready {
            let golden = golden_record(&self.golden_mode, &self.history[&canon]);
            self.pending.push_back(Pending { arrival_ns: h.arrival_ns, golden });
        }
        self.occupancy_peak = self.occupancy_peak.max(self.ext.occupancy());
        Ok(true)
    }

    /// Flows the next compute event takes and the cycle it starts.
    fn next_compute(&self, flush: bool) -> Option<(usize, u64)> {
        let avail = self.ext.ready_len();
        let take = if self.packet_task() {
            avail.min(1)
        } else if avail >= self.cfg.flows {
            self.cfg.flows
        } else if flush {
            avail
        } else {
            0
        };
        if take == 0 {
            return None;
        }
        let ready_ps = self.ext.ready_flows().take(take).map(|r| r.ready_ps).max().unwrap_or(0);
        Some((take, self.engine_free.max(ready_ps.div_ceil(self.comp_ps))))
    }

    fn ns(&self, cycle: u64) -> u64 {
        cycle * self.comp_ps / 1000
    }

    fn record_input(&mut self, ready: &ReadyFlow, golden: &[u8]) -> Result<Vec<i8>, SimError> {
        let bytes = self.fabric.peek_bytes(ready.base, ready.words * WORD_BYTES)?;
        if self.cfg.oracle {
            self.oracle.records_checked += 1;
            if bytes[..] != golden[..] {
                self.diverge(format!("record {} of {:?}: stored {:02x?}, golden {:02x?}", ready.record, ready.tuple, bytes, golden));
            }
        }
        Ok(bytes[..self.in_len].iter().map(|&b| b as i8).collect())
    }

    fn decide(&mut self, ready: &ReadyFlow, addr: Address, fin_ns: u64, arrival_ns: u64) -> Result<(), SimError> {
        self.ctrl.engine_ctrl().raise_fin()?;
        let fin_addr = self.ctrl.engine_ctrl().take_fin().expect("fin was raised");
        debug_assert_eq!(fin_addr, addr);
        self.ctrl.on_fin(ready, fin_addr, &mut self.ext, &self.fabric, fin_ns)?;
        if !self.packet_task() {
            self.history.remove(&ready.tuple.canonical());
        }
        self.latencies.push(fin_ns.saturating_sub(arrival_ns));
        Ok(())
    }

    fn packet_step(&mut self, start: u64) -> Result<(), SimError> {
        let ready = self.ext.pop_ready().expect("a record is ready");
        let p = self.pending.pop_front().expect("pending entry per ready record");
        let input = self.record_input(&ready, &p.golden)?;
        let kernel = self.compiled.kernel.as_ref().expect("packet tasks carry a kernel");
        let start_ns = self.ns(start);
        let addr = self.ctrl.start(&mut self.fabric, start_ns)?;
        let out = self.ctrl.engine_ctrl().take_start().expect("engine was started");
        self.vpe.set_address(usize::from(OUT_AREG), out);
        let mut q = VecDeque::from([ready.base]);
        let r = self.vpe.run(&kernel.program, &mut self.fabric, &mut q, start)?;
        self.engine_free = r.end_cycle;
        let s = &r.stats;
        let v = &mut self.vpe_m;
        v.runs += 1;
        v.cycles += r.cycles();
        v.words += s.words;
        v.simd_issues += s.simd_issues;
        v.vu_issues += s.vu_issues;
        v.mif_issues += s.mif_issues;
        v.stall_cycles += s.stall_cycles;
        v.macs += s.macs;
        if self.cfg.oracle {
            let got = self.ctrl.read_slot(&self.fabric, addr)?;
            let want = infer(&self.compiled.model, &input);
            self.oracle.inferences_checked += 1;
            if got != want {
                self.diverge(format!("packet {:?}: kernel output {got:?}, oracle {want:?}", ready.tuple));
            }
            self.checked_inputs.push(input);
        }
        let fin_ns = self.ns(r.fin_cycle.unwrap_or(r.end_cycle));
        self.decide(&ready, addr, fin_ns, p.arrival_ns)
    }

    fn flow_step(&mut self, take: usize, start: u64) -> Result<(), SimError> {
        let mut batch = Vec::with_capacity(take);
        let mut inputs = Vec::with_capacity(take);
        for _ in 0..take {
            let ready = self.ext.pop_ready().expect("records are ready");
            let p = self.pending.pop_front().expect("pending entry per ready record");
            inputs.push(self.record_input(&ready, &p.golden)?);
            batch.push((ready, p.arrival_ns));
        }
        let tensors = self.exec.run(&inputs)?;
        let t = &self.compiled.timing;
        self.engine_free = start + t.period();
        self.batches += 1;
        let start_ns = self.ns(start);
        let fin_ns = self.ns(start + t.latency());
        let out_id = self.compiled.model.graph.output;
        for ((ready, arrival), (x, flow)) in batch.iter().zip(inputs.iter().zip(&tensors)) {
            if self.cfg.oracle {
                self.oracle.inferences_checked += 1;
                self.compare(&format!("{:?}", ready.tuple), x, flow);
            }
            let addr = self.ctrl.start(&mut self.fabric, start_ns)?;
            self.ctrl.engine_ctrl().take_start().expect("engine was started");
            let bytes: Vec<u8> = flow[out_id].iter().flat_map(|v| v.to_le_bytes()).collect();
            self.fabric.poke_bytes(addr, &bytes)?;
            self.decide(ready, addr, fin_ns, *arrival)?;
        }
        Ok(())
    }

    /// Engine tensors of one inference against the reference, every tensor.
    fn compare(&mut self, label: &str, x: &[i8], got: &[Vec<i32>]) {
        let want = infer_all(&self.compiled.model, x);
        self.oracle.tensors_checked += want.len() as u64;
        if let Some((id, (g, w))) = got.iter().zip(&want).enumerate().find(|(_, (g, w))| g != w) {
            let at = g.iter().zip(w).position(|(a, b)| a != b).unwrap_or(g.len().min(w.len()));
            self.diverge(format!(
                "{label} tensor {id} element {at}: engine {:?}, oracle {:?}",
                g.get(at),
                w.get(at)
            ));
        }
    }

    /// Re-runs the packet inputs through the engine executor and checks every
    /// tensor against the reference.
    fn check_packet_layers(&mut self) -> Result<(), SimError> {
        let inputs = std::mem::take(&mut self.checked_inputs);
        for chunk in inputs.chunks(CHECK_CHUNK) {
            let tensors = self.exec.run(chunk)?;
            for (x, t) in chunk.iter().zip(&tensors) {
                self.compare(&format!("packet input {x:?}"), x, t);
            }
        }
        Ok(())
    }
}

pub fn run_with_packets(cfg: &UseCaseConfig, raw: &[RawPacket]) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let compiled = compile_config(cfg)?;
    let invalid = |m: String| SimError::Config(ConfigError::Invalid(m));
    let ext_cfg = cfg.extractor_config()?;
    let in_len = compiled.model.input_shape().len();
    let record_bytes = ext_cfg.mode.words_per_record() * WORD_BYTES;
    if in_len > record_bytes {
        return Err(invalid(format!("model input of {in_len} bytes exceeds the {record_bytes}-byte record")));
    }
    let out_elems = compiled.model.output_shape().len();
    if let Readout::ColumnSum { rows, cols } = cfg.readout {
        if rows * cols != out_elems {
            return Err(invalid(format!("column-sum readout {rows}x{cols} for {out_elems} outputs")));
        }
    }
    let bundle = match cfg.granularity {
        Granularity::Packet => Bundle::Packet(
            compiled.kernel.clone().ok_or_else(|| invalid("model does not fit a single VPE program".into()))?,
        ),
        Granularity::Flow => Bundle::Flow { schedule: compiled.schedule.clone(), out_elems },
    };
    let golden_mode = match &cfg.capture {
        Capture::Features { features } => GoldenMode::Features(feature_program(features)?),
        Capture::PacketCopy { .. } => GoldenMode::PacketCopy,
        Capture::Intervals => GoldenMode::Intervals { packets: cfg.threshold as usize, words: ext_cfg.mode.words_per_record() },
        Capture::Payload => GoldenMode::Payload { packets: cfg.threshold as usize },
    };
    let comp_ps = period_ps(cfg.clocks.compute_hz);
    let mut fabric = Fabric::with_clocks(FEATURE_DEPTH, COMPUTE_DEPTH, ext_cfg.period_ps, comp_ps);
    let (ctrl, ext) = Controller::initialize(bundle, cfg.readout, ext_cfg, &mut fabric)?;

    let parse_cfg = ParseConfig { truncation: cfg.traffic.truncation };
    let mut packets = Vec::with_capacity(raw.len());
    let mut parse_errors = 0u64;
    for p in raw {
        match parse_packet(p, &parse_cfg) {
            Ok(h) => packets.push(h),
            Err(_) => parse_errors += 1,
        }
    }

    let mut sim = Sim {
        cfg,
        compiled: &compiled,
        fabric,
        ctrl,
        ext,
        vpe: Vpe::new(),
        exec: Executor::new(&compiled.model, &compiled.schedule)?,
        golden_mode,
        in_len,
        comp_ps,
        history: HashMap::new(),
        pending: VecDeque::new(),
        engine_free: 0,
        batches: 0,
        vpe_m: VpeMetrics::default(),
        latencies: Vec::new(),
        oracle: OracleMetrics { enabled: cfg.oracle, ..Default::default() },
        checked_inputs: Vec::new(),
        occupancy_peak: 0,
        stalls: 0,
    };

    let mut next = 0usize;
    let mut retry_ns: Option<u64> = None;
    let mut blocked = false;
    let mut idle = 0u32;
    let mut now_ns = 0u64;
    loop {
        let progress = (next, sim.ctrl.records.len());
        let ext_t = packets.get(next).map(|h| retry_ns.unwrap_or(h.arrival_ns));
        let comp = sim.next_compute(blocked || next >= packets.len());
        let comp_t = comp.map(|(_, c)| sim.ns(c));
        let take_ext = match (ext_t, comp_t) {
            (None, None) => break,
            (Some(a), Some(c)) => a <= c,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        if let (true, Some(a)) = (take_ext, ext_t) {
            now_ns = now_ns.max(a);
            let mut h = packets[next].clone();
            h.arrival_ns = a;
            if sim.ingest(&h)? {
                next += 1;
                retry_ns = None;
                blocked = false;
            } else {
                // hold the packet until the compute domain frees a record
                sim.stalls += 1;
                blocked = true;
                let flush = sim.next_compute(true).map(|(_, c)| sim.ns(c));
                retry_ns = Some(a.max(flush.ok_or(SimError::Watchdog(a))?));
            }
        } else if let Some((take, start)) = comp {
            now_ns = now_ns.max(sim.ns(start));
            if sim.packet_task() {
                sim.packet_step(start)?;
            } else {
                sim.flow_step(take, start)?;
            }
        }
        if (next, sim.ctrl.records.len()) == progress {
            idle += 1;
            if idle > WATCHDOG_LIMIT {
                return Err(SimError::Watchdog(now_ns));
            }
        } else {
            idle = 0;
        }
    }
    if sim.packet_task() && cfg.oracle {
        sim.check_packet_layers()?;
    }

    let st = *sim.ext.stats();
    let extractor = ExtractorMetrics {
        extractor_hz: cfg.clocks.extractor_hz,
        packets: st.packets,
        parse_errors,
        cycles: match (st.first_issue, st.last_issue) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        },
        new_flows: st.new_flows,
        collisions: st.collisions,
        ready: st.ready,
        recycled: st.recycled,
        occupancy_peak: sim.occupancy_peak,
        occupancy_final: sim.ext.occupancy(),
        backpressure_stalls: sim.stalls,
    };
    let mut lat = sim.latencies.clone();
    lat.sort_unstable();
    let records = sim.ctrl.records.clone();
    let end_to_end = EndToEndMetrics {
        decisions: records.len() as u64,
        latency_ns_min: lat.first().copied().unwrap_or(0),
        latency_ns_max: lat.last().copied().unwrap_or(0),
        latency_ns_sum: lat.iter().sum(),
        latency_ns_median: lat.get(lat.len() / 2).copied().unwrap_or(0),
        first_decision_ns: records.iter().map(|r| r.timestamp_ns).min().unwrap_or(0),
        last_decision_ns: records.iter().map(|r| r.timestamp_ns).max().unwrap_or(0),
    };
    let counterpart = if cfg.granularity == Granularity::Flow {
        let mut other = cfg.schedule_config();
        other.collab = !other.collab;
        let g = &compiled.model.graph;
        Some(timing(&schedule(g, &other)?, &g.ops, &g.shapes))
    } else {
        None
    };
    let metrics = Metrics {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        extractor,
        compute: ComputeMetrics {
            compute_hz: cfg.clocks.compute_hz,
            collab: cfg.collab,
            batches: sim.batches,
            batch: compiled.timing.clone(),
            ary_instructions: compiled.schedule.ary_program.len(),
            vpe_jobs: compiled.schedule.vpe_jobs.len(),
            vpe: sim.vpe_m.clone(),
        },
        end_to_end,
        oracle: sim.oracle.clone(),
        counterpart,
    };
    let control_log = std::mem::take(&mut sim.ctrl.log);
    drop(sim);
    Ok(SimOutput { metrics, records, control_log, compiled })
}
