use super::isa::*;
use super::*;
use crate::quant::{Activation, Requant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ones_by_index() -> ParamEntry {
    // every lane: weights 1..=8
    [[1, 2, 3, 4, 5, 6, 7, 8]; LANES]
}

fn run(text: &str, pcache: Vec<ParamEntry>, posts: Vec<PostOp>, vpe: &mut Vpe, fabric: &mut Fabric) -> RunResult {
    let prog = VpeProgram { words: assemble(text).unwrap(), pcache, posts };
    vpe.run(&prog, fabric, &mut NoReady, 0).unwrap()
}

#[test]
fn prd_examples() {
    let w = ones_by_index();
    assert_eq!(simd_prd(&[0; 8], &[[0; 8]; 8]), [0; 8]);
    assert_eq!(simd_prd(&[1; 8], &w), [36; 8]);
    let relu = PostOp { requant: Requant::IDENTITY, activation: Activation::Relu };
    assert_eq!(apply_store(36, Store::Post(0), std::slice::from_ref(&relu)).unwrap(), 36);
    let neg = simd_prd(&[-1, 0, 0, 0, 0, 1, 0, 0], &[[5, 0, 0, 0, 0, 0, 0, 0]; 8]);
    assert_eq!(neg[0], -5);
    assert_eq!(apply_store(neg[0], Store::Post(0), &[relu]).unwrap(), 0);
}

#[test]
fn prds_examples() {
    let x = [0, 0, 0, 0, 1, 2, 3, 4];
    let w = [[1; 8]; 8];
    let (a, b) = simd_prds(&x, &w);
    assert_eq!((a[0], b[0]), (0, 10));
    let same = [3, -2, 7, 1, 3, -2, 7, 1];
    let (a, b) = simd_prds(&same, &w);
    assert_eq!(a, b);
}

#[test]
fn vu_examples() {
    let x = [1, -2, 300, -400, 5, 6, 7, 8];
    assert_eq!(vu_exec(VuKind::Vadd, &x, &[0; 8]), x);
    assert_eq!(vu_exec(VuKind::Vem, &[2; 8], &[3; 8]), [6; 8]);
    assert_eq!(vu_exec(VuKind::Vmax, &x, &[0; 8]), [1, 0, 300, 0, 5, 6, 7, 8]);
    assert_eq!(apply_store(300, Store::Sat, &[]).unwrap(), 127);
    assert_eq!(apply_store(-400, Store::Sat, &[]).unwrap(), -128);
}

#[test]
fn bit_exact_against_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100_000 {
        let x: [i32; 8] = std::array::from_fn(|_| rng.gen_range(-300..300));
        let y: [i32; 8] = std::array::from_fn(|_| rng.gen_range(-300..300));
        let w: ParamEntry = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen()));
        let clamp = |v: i32| v.clamp(-128, 127);
        let prd = simd_prd(&x, &w);
        let (a, b) = simd_prds(&x, &w);
        for lane in 0..8 {
            let mut full = 0i64;
            let mut lo = 0i64;
            for i in 0..8 {
                let p = i64::from(clamp(x[i])) * i64::from(w[lane][i]);
                full += p;
                if i < 4 {
                    lo += p;
                }
            }
            assert_eq!(i64::from(prd[lane]), full);
            assert_eq!(i64::from(a[lane]), lo);
            assert_eq!(i64::from(b[lane]), full - lo);
        }
        let add = vu_exec(VuKind::Vadd, &x, &y);
        let em = vu_exec(VuKind::Vem, &x, &y);
        let mx = vu_exec(VuKind::Vmax, &x, &y);
        for i in 0..8 {
            assert_eq!(add[i], x[i] + y[i]);
            assert_eq!(em[i], clamp(x[i]) * clamp(y[i]));
            assert_eq!(mx[i], if x[i] > y[i] { x[i] } else { y[i] });
            assert_eq!(apply_store(add[i], Store::Sat, &[]).unwrap(), clamp(add[i]));
        }
    }
}

proptest! {
    #[test]
    fn prd_is_sum_of_prds_halves(x in prop::array::uniform8(-128i32..128), w in prop::array::uniform8(prop::array::uniform8(any::<i8>()))) {
        let prd = simd_prd(&x, &w);
        let (a, b) = simd_prds(&x, &w);
        for lane in 0..8 {
            prop_assert_eq!(prd[lane], a[lane] + b[lane]);
        }
    }
}

#[test]
fn latency_model() {
    let mut f = Fabric::default();
    let r = run("[prd d0,d1] [fin]", vec![[[0; 8]; 8]], vec![], &mut Vpe::new(), &mut f);
    assert_eq!(r.cycles(), 5);
    assert_eq!(r.fin_cycle, Some(5));

    let ten: String = (0..10).map(|i| format!("[prd d0,d{}]\n", 2 + i)).collect::<String>() + "[fin]";
    let r = run(&ten, vec![[[0; 8]; 8]; 10], vec![], &mut Vpe::new(), &mut f);
    assert_eq!(r.cycles(), 14);
    assert_eq!(r.stats.stall_cycles, 0);

    // dependent chain: second prd waits for the first
    let r = run("[prd d0,d1]\n[prd d1,d2]\n[fin]", vec![[[0; 8]; 8]; 2], vec![], &mut Vpe::new(), &mut f);
    assert_eq!(r.cycles(), 10);
    assert_eq!(r.stats.stall_cycles, 4);

    // empty word is a one-cycle bubble
    let r = run("[nop]\n[nop]\n[fin]", vec![], vec![], &mut Vpe::new(), &mut f);
    assert_eq!(r.cycles(), 3);
    assert_eq!(r.stats.simd_issues, 0);
}

#[test]
fn ld_and_prd_issue_together() {
    let mut f = Fabric::default();
    let addr = Address::new(BankId::Compute0, 10);
    f.poke(addr, std::array::from_fn(|i| i as u8 + 1)).unwrap();
    let mut vpe = Vpe::new();
    vpe.set_address(0, addr);
    let text = "[prd d4,d6] [ld a0,d0]\n[prd d0,d8]\n[fin]";
    let r = run(text, vec![ones_by_index(), [[1; 8]; 8]], vec![], &mut vpe, &mut f);
    // ld at cycle 0 lands at 2; dependent prd issues at 2, result at 7
    assert_eq!(r.stats.stall_cycles, 1);
    assert_eq!(r.cycles(), 7);
    assert_eq!(vpe.drf[0], [1, 2, 3, 4, 5, 6, 7, 8]);
    assert_eq!(vpe.drf[1], [9, 10, 11, 12, 13, 14, 15, 16]);
    assert_eq!(vpe.drf[8], [36; 8]);
}

#[test]
fn vu_reads_pre_issue_values() {
    let mut vpe = Vpe::new();
    vpe.drf[1] = [5; 8];
    vpe.drf[2] = [1; 8];
    let mut f = Fabric::default();
    run("[prd d2,d1] [vadd d1,d2,d3]\n[fin]", vec![[[1; 8]; 8]], vec![], &mut vpe, &mut f);
    assert_eq!(vpe.drf[3], [6; 8]);
    assert_eq!(vpe.drf[1], [8; 8]);
}

#[test]
fn register_conflicts() {
    let mut f = Fabric::default();
    let prog = VpeProgram { words: assemble("[prd d0,d4] [vadd d1,d2,d4]").unwrap(), pcache: vec![[[0; 8]; 8]], posts: vec![] };
    assert!(matches!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::RegisterConflict { .. })));
    // prds writes d3 and d4; ld writes d4 and d5
    let prog = VpeProgram { words: assemble("[prds d0,d3] [ld a0,d4]").unwrap(), pcache: vec![[[0; 8]; 8]], posts: vec![] };
    let mut vpe = Vpe::new();
    vpe.set_address(0, Address::new(BankId::Compute0, 0));
    assert!(matches!(vpe.run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::RegisterConflict { .. })));
    // a later VU write would land before the earlier SIMDU write
    let prog = VpeProgram { words: assemble("[prd d0,d4]\n[vadd d1,d2,d4]").unwrap(), pcache: vec![[[0; 8]; 8]], posts: vec![] };
    assert!(matches!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::RegisterConflict { .. })));
}

#[test]
fn bad_indices() {
    let mut f = Fabric::default();
    let prog = VpeProgram { words: assemble("[prd d0,d1]").unwrap(), ..Default::default() };
    assert!(matches!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::BadIndex(_))));
    let prog = VpeProgram { words: assemble("[prds d0,d31]").unwrap(), pcache: vec![[[0; 8]; 8]], posts: vec![] };
    assert!(matches!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::BadIndex(_))));
    let prog = VpeProgram { words: assemble("[vadd.p3 d0,d1,d2]").unwrap(), ..Default::default() };
    assert!(matches!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::BadIndex(_))));
    let prog = VpeProgram { words: assemble("[ld a2,d0]").unwrap(), ..Default::default() };
    assert_eq!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::UnsetAddress(2)));
    let prog = VpeProgram { words: assemble("[fa a0]").unwrap(), ..Default::default() };
    assert_eq!(Vpe::new().run(&prog, &mut f, &mut NoReady, 0), Err(VpeError::NoReady));
}

#[test]
fn memory_stores_and_channels() {
    let mut f = Fabric::default();
    let mut vpe = Vpe::new();
    vpe.drf[0] = [1, 1, 1, 1, 2, 2, 2, 2];
    vpe.set_address(1, Address::new(BankId::Compute0, 100));
    vpe.set_address(2, Address::new(BankId::Compute1, 200));
    let w: ParamEntry = std::array::from_fn(|lane| [lane as i8 * 15; 8]);
    let text = "[prd d0,@a1]\n[prds d0,@a2]\n[prd.sat d0,@a1+2]\n[fin]";
    let r = run(text, vec![w; 3], vec![], &mut vpe, &mut f);
    // prd raw: 8 x int32 = 2 words
    let raw: Vec<i32> = f
        .peek_bytes(Address::new(BankId::Compute0, 100), 32)
        .unwrap()
        .chunks(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(raw, (0..8).map(|l| l * 15 * 12).collect::<Vec<i32>>());
    // prds raw: 16 x int32 = 4 words, A then B
    let raw: Vec<i32> = f
        .peek_bytes(Address::new(BankId::Compute1, 200), 64)
        .unwrap()
        .chunks(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(&raw[..8], &(0..8).map(|l| l * 15 * 4).collect::<Vec<i32>>()[..]);
    assert_eq!(&raw[8..], &(0..8).map(|l| l * 15 * 8).collect::<Vec<i32>>()[..]);
    // saturated int8: one word
    let w8 = f.peek(Address::new(BankId::Compute0, 102)).unwrap();
    assert_eq!(&w8[..8], &[0, 127, 127, 127, 127, 127, 127, 127]);
    assert_eq!(&w8[8..], &[0; 8]);
    // prds issued at 1 writes its four words in cycles 5..=8
    assert_eq!(r.cycles(), 9);

    let prog = VpeProgram { words: assemble("[ld a1,d0,c1]").unwrap(), ..Default::default() };
    assert_eq!(
        vpe.run(&prog, &mut f, &mut NoReady, 100),
        Err(VpeError::BadChannel { channel: 1, bank: BankId::Compute0 })
    );
}

#[test]
fn store_then_load_roundtrip_through_memory() {
    let mut f = Fabric::default();
    let mut vpe = Vpe::new();
    vpe.drf[0] = [1, 2, 3, 4, 5, 6, 7, 8];
    let mut q = VecDeque::from([Address::new(BankId::Feature, 7)]);
    let text = "[fa a0]\n[vadd.sat d0,d0,@a0]\n[nop]\n[ld a0,d10]\n[fin]";
    let prog = VpeProgram { words: assemble(text).unwrap(), ..Default::default() };
    let r = vpe.run(&prog, &mut f, &mut q, 0).unwrap();
    assert_eq!(vpe.drf[10], [2, 4, 6, 8, 10, 12, 14, 16]);
    assert_eq!(vpe.drf[11], [0; 8]);
    assert_eq!(r.fin_cycle, Some(r.end_cycle));
}
