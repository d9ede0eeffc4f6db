use super::*;
use crate::fabric::Fabric;
use crate::traffic::{Direction, PROTO_TCP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tuple(n: u32) -> FiveTuple {
    FiveTuple {
        src_ip: 0x0a00_0000 + n,
        dst_ip: 0xc0a8_0001,
        src_port: 1024 + (n % 50_000) as u16,
        dst_port: 443,
        protocol: PROTO_TCP,
    }
}

fn pkt(t: FiveTuple, size: u32, at: u64) -> ParsedHeader {
    ParsedHeader {
        tuple: t,
        pkt_size: size,
        flags: 0x10,
        direction: if t.is_canonical() { Direction::Forward } else { Direction::Backward },
        arrival_ns: at,
        payload_prefix: vec![size as u8; 16],
    }
}

fn accumulate(features: &[u8], threshold: u32) -> Extractor {
    let fp = feature_program(features).unwrap();
    Extractor::new(ExtractorConfig::new(CaptureMode::Accumulate { program: fp.program, threshold })).unwrap()
}

/// Tuples that land in pairwise distinct slots, covering `count` slots.
fn distinct_slot_tuples(count: usize, depth: usize) -> Vec<FiveTuple> {
    let mut seen = vec![false; depth];
    let mut out = Vec::new();
    let mut n = 0;
    while out.len() < count {
        let t = tuple(n);
        let s = hash_tuple(&t, depth);
        if !seen[s] {
            seen[s] = true;
            out.push(t);
        }
        n += 1;
    }
    out
}

#[test]
fn hash_is_deterministic_and_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1_000_000 {
        let t = FiveTuple {
            src_ip: rng.gen(),
            dst_ip: rng.gen(),
            src_port: rng.gen(),
            dst_port: rng.gen(),
            protocol: rng.gen(),
        };
        let h = hash_tuple(&t, DEFAULT_TABLE_DEPTH);
        assert!(h < DEFAULT_TABLE_DEPTH);
        assert_eq!(h, hash_tuple(&t.reversed(), DEFAULT_TABLE_DEPTH));
    }
}

#[test]
fn hash_uniformity_chi_square() {
    // 10^6 random tuples into 8192 buckets: chi-square has 8191 degrees of
    // freedom, mean 8191 and standard deviation sqrt(2 * 8191) ~ 128. Accept
    // within 5 sigma.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 1_000_000usize;
    let mut buckets = vec![0u32; DEFAULT_TABLE_DEPTH];
    for _ in 0..n {
        let t = FiveTuple {
            src_ip: rng.gen(),
            dst_ip: rng.gen(),
            src_port: rng.gen(),
            dst_port: rng.gen(),
            protocol: [6u8, 17][rng.gen_range(0..2)],
        };
        buckets[hash_tuple(&t, DEFAULT_TABLE_DEPTH)] += 1;
    }
    let expect = n as f64 / DEFAULT_TABLE_DEPTH as f64;
    let chi2: f64 = buckets.iter().map(|&o| (f64::from(o) - expect).powi(2) / expect).sum();
    let dof = (DEFAULT_TABLE_DEPTH - 1) as f64;
    assert!((chi2 - dof).abs() < 5.0 * (2.0 * dof).sqrt(), "chi2 = {chi2}");
}

#[test]
fn new_flow_has_zero_interval_and_count_one() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[9, 36], 20);
    let t = tuple(1);
    let r = ex.ingest(&pkt(t, 100, 5_000_000), &mut fabric).unwrap();
    assert!(r.new_flow);
    assert_eq!(r.event.kind, EventKind::NewFlow);
    let slot = ex.slot(r.event.slot as usize);
    assert_eq!(slot.pkt_count, 1);
    let word = fabric.peek(Address::new(BankId::Feature, r.event.slot as usize)).unwrap();
    assert_eq!(&word[0..4], &[0, 0, 1, 0]); // duration 0, count 1
}

#[test]
fn threshold_freezes_and_later_packets_do_not_write() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[6, 36], 20);
    let t = tuple(7);
    for i in 0..20u64 {
        let r = ex.ingest(&pkt(t, 100, i * 10_000), &mut fabric).unwrap();
        assert_eq!(r.event.kind == EventKind::Ready, i == 19);
    }
    let slot = hash_tuple(&t, DEFAULT_TABLE_DEPTH);
    assert!(ex.slot(slot).frozen);
    let addr = Address::new(BankId::Feature, slot);
    let before = fabric.peek(addr).unwrap();
    assert_eq!(u32::from_le_bytes(before[0..4].try_into().unwrap()), 2000);
    let r = ex.ingest(&pkt(t, 1400, 300_000), &mut fabric).unwrap();
    assert_eq!(r.event.kind, EventKind::Hit);
    assert_eq!(ex.slot(slot).pkt_count, 21);
    assert_eq!(fabric.peek(addr).unwrap(), before);
    assert_eq!(ex.stats().frozen_hits, 1);
    let ready = ex.pop_ready().unwrap();
    assert_eq!((ready.record as usize, ready.packets), (slot, 20));
    ex.recycle(ready.record, &fabric).unwrap();
    assert_eq!(ex.occupancy(), 0);
}

#[test]
fn tampering_with_frozen_record_is_detected() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[36], 1);
    let r = ex.ingest(&pkt(tuple(3), 64, 0), &mut fabric).unwrap();
    fabric.poke(Address::new(BankId::Feature, r.event.slot as usize), [9; 16]).unwrap();
    assert_eq!(ex.recycle(r.event.slot, &fabric), Err(ExtractorError::FrozenModified(r.event.slot)));
}

#[test]
fn collision_drops_new_flow() {
    let mut fabric = Fabric::default();
    let cfg = ExtractorConfig {
        table_depth: 1,
        ..ExtractorConfig::new(CaptureMode::Accumulate { program: feature_program(&[36]).unwrap().program, threshold: 5 })
    };
    let mut ex = Extractor::new(cfg).unwrap();
    ex.ingest(&pkt(tuple(1), 64, 0), &mut fabric).unwrap();
    let r = ex.ingest(&pkt(tuple(2), 64, 100), &mut fabric).unwrap();
    assert_eq!(r.event.kind, EventKind::Collision);
    assert_eq!(ex.stats().collisions, 1);
    assert_eq!(ex.slot(0).tuple_tag, tuple(1).canonical());
}

#[test]
fn fifo_order_and_empty() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[36], 1);
    assert!(ex.pop_ready().is_none());
    let ts = distinct_slot_tuples(2, DEFAULT_TABLE_DEPTH);
    let a = ex.ingest(&pkt(ts[0], 64, 0), &mut fabric).unwrap().event.slot;
    let b = ex.ingest(&pkt(ts[1], 64, 0), &mut fabric).unwrap().event.slot;
    assert_eq!(ex.pop_ready().unwrap().record, a);
    assert_eq!(ex.pop_ready().unwrap().record, b);
    assert!(ex.pop_ready().is_none());
    assert_eq!(
        ex.recycle(b, &fabric),
        Err(ExtractorError::OutOfOrderFin { expected: Some(a), got: b })
    );
    ex.recycle(a, &fabric).unwrap();
    ex.recycle(b, &fabric).unwrap();
}

#[test]
fn full_table_lifecycle() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[11, 36], 1);
    let ts = distinct_slot_tuples(DEFAULT_TABLE_DEPTH, DEFAULT_TABLE_DEPTH);
    let mut order = Vec::new();
    for (i, t) in ts.iter().enumerate() {
        let r = ex.ingest(&pkt(*t, 64, i as u64), &mut fabric).unwrap();
        order.push(r.event.slot);
    }
    assert_eq!(ex.occupancy(), DEFAULT_TABLE_DEPTH);
    assert_eq!(ex.ready_len(), DEFAULT_TABLE_DEPTH);
    for expect in &order {
        let r = ex.pop_ready().unwrap();
        assert_eq!(r.record, *expect);
        ex.recycle(r.record, &fabric).unwrap();
    }
    assert_eq!(ex.occupancy(), 0);
    assert!(ex.slots().iter().all(|s| s.pkt_count == 0 && !s.frozen));
    // recycled slots accept new tuples
    let r = ex.ingest(&pkt(ts[5], 64, 1_000_000), &mut fabric).unwrap();
    assert!(r.new_flow);
}

#[test]
fn pipeline_timing() {
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[36], 1000);
    let t = tuple(1);
    let a = ex.ingest(&pkt(t, 64, 0), &mut fabric).unwrap();
    let b = ex.ingest(&pkt(t, 64, 0), &mut fabric).unwrap();
    assert_eq!((a.issue_cycle, b.issue_cycle), (0, 4));
    let other = distinct_slot_tuples(2, DEFAULT_TABLE_DEPTH)
        .into_iter()
        .find(|x| hash_tuple(x, DEFAULT_TABLE_DEPTH) != b.event.slot as usize)
        .unwrap();
    let c = ex.ingest(&pkt(other, 64, 0), &mut fabric).unwrap();
    assert_eq!(c.issue_cycle, 5);
    // arrival at 80 ns is cycle 10
    let d = ex.ingest(&pkt(other, 64, 80), &mut fabric).unwrap();
    assert_eq!(d.issue_cycle, 10);
}

#[test]
fn worst_case_rate_meets_line_rate() {
    // A single flow back-to-back is the slowest pattern: one packet every 4 cycles.
    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[6, 9, 11, 12, 19, 20, 36], u32::MAX);
    for _ in 0..10_000 {
        ex.ingest(&pkt(tuple(1), 64, 0), &mut fabric).unwrap();
    }
    let worst = ex.stats().throughput_pps();
    assert!(worst >= 31.25e6 - 1e4, "{worst}");

    let mut fabric = Fabric::default();
    let mut ex = accumulate(&[36], u32::MAX);
    let ts = distinct_slot_tuples(64, DEFAULT_TABLE_DEPTH);
    for i in 0..10_000 {
        ex.ingest(&pkt(ts[i % 64], 64, 0), &mut fabric).unwrap();
    }
    assert!((ex.stats().throughput_pps() - 125e6).abs() < 1.0);
}

#[test]
fn direction_relative_to_first_packet() {
    let mut fabric = Fabric::default();
    let prog = MicroOpProgram::new(vec![MicroOp::wr(Operand::meta(meta::DIR), 0, 1)]).unwrap();
    let mut ex = Extractor::new(ExtractorConfig::new(CaptureMode::Packet { program: prog, ring_words: 8 })).unwrap();
    let t = tuple(9).reversed(); // first packet in non-canonical orientation
    assert!(!t.is_canonical());
    let mut dirs = Vec::new();
    for (i, tt) in [t, t.reversed(), t].iter().enumerate() {
        let r = ex.ingest(&pkt(*tt, 64, i as u64 * 1000), &mut fabric).unwrap();
        assert_eq!(r.event.kind, EventKind::Ready);
        let ready = ex.pop_ready().unwrap();
        assert_eq!(ready.tuple, t);
        dirs.push(fabric.peek(ready.base).unwrap()[0]);
        ex.recycle(ready.record, &fabric).unwrap();
    }
    assert_eq!(dirs, vec![0, 1, 0]);
}

#[test]
fn packet_ring_backpressure() {
    let mut fabric = Fabric::default();
    let mut ex = Extractor::new(ExtractorConfig::new(CaptureMode::Packet { program: packet_copy_program(), ring_words: 2 })).unwrap();
    ex.ingest(&pkt(tuple(1), 300, 0), &mut fabric).unwrap();
    ex.ingest(&pkt(tuple(1), 301, 1000), &mut fabric).unwrap();
    assert_eq!(ex.ingest(&pkt(tuple(1), 302, 2000), &mut fabric), Err(ExtractorError::FifoFull));
    let r = ex.pop_ready().unwrap();
    let w = fabric.peek(r.base).unwrap();
    assert_eq!(&w[..6], &[44, 1, 0x10, 0, PROTO_TCP, 0]);
    ex.recycle(r.record, &fabric).unwrap();
    let ok = ex.ingest(&pkt(tuple(1), 302, 2000), &mut fabric).unwrap();
    assert_eq!(ok.event.kind, EventKind::Ready);
}

#[test]
fn interval_vector_capture() {
    let mut fabric = Fabric::default();
    let cfg = ExtractorConfig { table_depth: 4096, ..ExtractorConfig::new(CaptureMode::Intervals { packets: 20 }) };
    let mut ex = Extractor::new(cfg).unwrap();
    let t = tuple(4);
    let mut ts = 0u64;
    let mut expect = vec![0u8; 32];
    for i in 0..20u64 {
        let gap = (i * 37_000) % 300_000; // some gaps exceed 127 µs
        if i > 0 {
            ts += gap.max(1);
            expect[i as usize] = ((gap.max(1)) / 1000).min(127) as u8;
        }
        ex.ingest(&pkt(t, 64, ts), &mut fabric).unwrap();
    }
    let r = ex.pop_ready().unwrap();
    assert_eq!(r.words, 2);
    assert_eq!(r.base.word_index, hash_tuple(&t, 4096) * 2);
    assert_eq!(fabric.peek_bytes(r.base, 32).unwrap(), expect);
}

#[test]
fn payload_vector_capture() {
    let mut fabric = Fabric::default();
    let cfg = ExtractorConfig { table_depth: 512, ..ExtractorConfig::new(CaptureMode::Payload { packets: 15 }) };
    let mut ex = Extractor::new(cfg).unwrap();
    let t = tuple(5);
    for i in 0..15u64 {
        let mut p = pkt(t, 100 + i as u32, i * 1000);
        p.payload_prefix = (0..16).map(|j| (i * 16 + j) as u8).collect();
        if i == 3 {
            p.payload_prefix.truncate(5);
        }
        ex.ingest(&p, &mut fabric).unwrap();
    }
    let r = ex.pop_ready().unwrap();
    let bytes = fabric.peek_bytes(r.base, 15 * 16).unwrap();
    for i in 0..15usize {
        for j in 0..16usize {
            let want = if i == 3 && j >= 5 { 0 } else { (i * 16 + j) as u8 };
            assert_eq!(bytes[i * 16 + j], want);
        }
    }
}

#[test]
fn config_validation() {
    let mode = CaptureMode::Intervals { packets: 20 };
    assert!(Extractor::new(ExtractorConfig { table_depth: 3000, ..ExtractorConfig::new(mode.clone()) }).is_err());
    assert!(Extractor::new(ExtractorConfig::new(CaptureMode::Intervals { packets: 0 })).is_err());
    let toml_cfg = r#"
        table_depth = 1024
        [mode]
        kind = "accumulate"
        threshold = 8
        program = [["add", "history", 0, "meta", 0, 0, 4]]
    "#;
    let cfg: ExtractorConfig = toml::from_str(toml_cfg).unwrap();
    assert_eq!(cfg.table_depth, 1024);
    assert_eq!(cfg.record_area_words(), 1024);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn occupancy_equals_new_minus_recycled(
        ops in prop::collection::vec((0u32..40, any::<bool>()), 1..300),
    ) {
        let mut fabric = Fabric::default();
        let cfg = ExtractorConfig {
            table_depth: 64,
            ..ExtractorConfig::new(CaptureMode::Accumulate { program: feature_program(&[36]).unwrap().program, threshold: 3 })
        };
        let mut ex = Extractor::new(cfg).unwrap();
        let mut recycled = 0u64;
        for (i, (flow, fin)) in ops.into_iter().enumerate() {
            ex.ingest(&pkt(tuple(flow), 64, i as u64 * 100), &mut fabric).unwrap();
            if fin {
                if let Some(r) = ex.pop_ready() {
                    ex.recycle(r.record, &fabric).unwrap();
                    recycled += 1;
                }
            }
            prop_assert_eq!(ex.occupancy() as u64, ex.stats().new_flows - recycled);
            let busy = ex.slots().iter().filter(|s| s.pkt_count != 0).count();
            prop_assert_eq!(busy, ex.occupancy());
        }
    }
}
