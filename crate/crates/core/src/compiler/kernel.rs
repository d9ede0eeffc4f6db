//! Packet-level kernel emission: a chain of dense layers no wider than two
//! lanes becomes one VLIW program that fetches a ready feature word, runs every
//! layer on the SIMDU/VU and stores the scores to the address in `a1`.
//!
//! Per output block of 8 columns, a one-chunk reduction uses `prd`, or `prds`
//! when it is at most 4 wide. A two-chunk reduction computes both halves raw
//! (the tail on a sub-lane when it fits) and folds them with one `vadd` that
//! applies the layer's post-op.

use super::lower::{Op, Rhs};
use super::quantize::{QWeight, QuantizedModel};
use super::CompileError;
use crate::fabric::{Address, Fabric, FabricError, WORD_BYTES};
use crate::quant::PostOp;
use crate::vpe::isa::{Dst, MifOp, ParamEntry, SimdKind, SimdOp, Store, VliwWord, VpeProgram, VuKind, VuOp, DRF_SIZE, LANES};
use serde::{Deserialize, Serialize};

/// Register holding the fetched record address.
pub const REC_AREG: u8 = 0;
/// Register the controller sets to the result slot.
pub const OUT_AREG: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutBlock {
    pub word_offset: usize,
    pub count: usize,
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketKernel {
    pub program: VpeProgram,
    pub outputs: Vec<OutBlock>,
    /// Words the program writes into its result slot.
    pub slot_words: usize,
}

impl PacketKernel {
    /// Reads the score vector from a result slot.
    pub fn read_result(&self, fabric: &Fabric, base: Address) -> Result<Vec<i32>, FabricError> {
        let mut out = Vec::new();
        for b in &self.outputs {
            let at = Address::new(base.bank, base.word_index + b.word_offset);
            if b.raw {
                let bytes = fabric.peek_bytes(at, 4 * b.count)?;
                out.extend(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))));
            } else {
                out.extend(fabric.peek_bytes(at, b.count)?.into_iter().map(|v| i32::from(v as i8)));
            }
        }
        Ok(out)
    }
}

struct Emitter {
    words: Vec<VliwWord>,
    pcache: Vec<ParamEntry>,
    posts: Vec<PostOp>,
    next_reg: usize,
    next_word: usize,
}

impl Emitter {
    fn alloc(&mut self, n: usize) -> Result<u8, CompileError> {
        let r = self.next_reg;
        if r + n > DRF_SIZE {
            return Err(CompileError::Capacity { what: "VPE data registers".into(), need: r + n, have: DRF_SIZE });
        }
        self.next_reg += n;
        Ok(r as u8)
    }

    fn simd(&mut self, kind: SimdKind, src: u8, dst: Dst, store: Store, param: ParamEntry) {
        self.pcache.push(param);
        self.words.push(VliwWord { simd: Some(SimdOp { kind, src, dst, store }), ..Default::default() });
    }

    /// Destination for a block result: a fresh register, or the next words of
    /// the result slot.
    fn dst(&mut self, last: bool, regs: usize, words: usize) -> Result<Dst, CompileError> {
        if last {
            let offset = self.next_word;
            self.next_word += words;
            Ok(Dst::Mem { areg: OUT_AREG, offset: offset as u16 })
        } else {
            Ok(Dst::Reg(self.alloc(regs)?))
        }
    }
}

/// Weights for output columns `c0..c0+8` and reduction rows `k0..k0+width`,
/// placed on elements `0..width`.
fn param(w: &QWeight, k0: usize, width: usize, c0: usize) -> ParamEntry {
    std::array::from_fn(|lane| {
        std::array::from_fn(|e| {
            let (r, c) = (k0 + e, c0 + lane);
            if e < width && r < w.rows && c < w.cols {
                w.data[r * w.cols + c]
            } else {
                0
            }
        })
    })
}

fn words_for(store: Store, kind: SimdKind) -> usize {
    match (store, kind) {
        (Store::Raw, SimdKind::Prd) => 2,
        (Store::Raw, SimdKind::Prds) => 4,
        _ => 1,
    }
}

pub fn emit_packet_kernel(q: &QuantizedModel) -> Result<PacketKernel, CompileError> {
    let g = &q.graph;
    let input = g.shapes[g.input];
    if input.rows != 1 || input.cols > 2 * LANES {
        return Err(CompileError::UnsupportedLayer(format!("packet kernels take one row of at most 16 features, got {input:?}")));
    }
    let mut layers = Vec::new();
    for (i, op) in g.ops.iter().enumerate() {
        match *op {
            Op::Matmul { rhs: Rhs::Weight(w), im2col: None, .. } => layers.push((&q.weights[w], q.posts[i].clone())),
            other => return Err(CompileError::UnsupportedLayer(format!("packet kernels take dense layers only, got {other:?}"))),
        }
    }
    if let Some((w, _)) = layers.iter().find(|(w, _)| w.rows > 2 * LANES || w.cols > 2 * LANES) {
        return Err(CompileError::UnsupportedLayer(format!("dense {}x{} is wider than two lanes", w.rows, w.cols)));
    }

    let mut e = Emitter { words: Vec::new(), pcache: Vec::new(), posts: Vec::new(), next_reg: 2, next_word: 0 };
    e.words.push(VliwWord { mif: Some(MifOp::Fa { areg: REC_AREG }), ..Default::default() });
    e.words.push(VliwWord { mif: Some(MifOp::Ld { areg: REC_AREG, offset: 0, dreg: 0, channel: 0 }), ..Default::default() });
    // registers holding the current vector, 8 elements each
    let mut cur: Vec<u8> = vec![0, 1];
    let mut outputs = Vec::new();

    for (li, (w, post)) in layers.iter().enumerate() {
        let last = li + 1 == layers.len();
        let store = match post {
            Some(p) => {
                e.posts.push(p.clone());
                Store::Post((e.posts.len() - 1) as u8)
            }
            None => Store::Raw,
        };
        let mut next = Vec::new();
        for c0 in (0..w.cols).step_by(LANES) {
            let count = LANES.min(w.cols - c0);
            let word_offset = e.next_word;
            let out_reg = if w.rows <= LANES {
                let kind = if w.rows <= 4 { SimdKind::Prds } else { SimdKind::Prd };
                let regs = if kind == SimdKind::Prds { 2 } else { 1 };
                let dst = e.dst(last, regs, words_for(store, kind))?;
                e.simd(kind, cur[0], dst, store, param(w, 0, w.rows, c0));
                dst
            } else {
                let head = e.alloc(1)?;
                e.simd(SimdKind::Prd, cur[0], Dst::Reg(head), Store::Raw, param(w, 0, LANES, c0));
                let tail_w = w.rows - LANES;
                let (kind, regs) = if tail_w <= 4 { (SimdKind::Prds, 2) } else { (SimdKind::Prd, 1) };
                let tail = e.alloc(regs)?;
                e.simd(kind, cur[1], Dst::Reg(tail), Store::Raw, param(w, LANES, tail_w, c0));
                let dst = e.dst(last, 1, if store == Store::Raw { 2 } else { 1 })?;
                e.words.push(VliwWord {
                    vu: Some(VuOp { kind: VuKind::Vadd, a: head, b: tail, dst, store }),
                    ..Default::default()
                });
                dst
            };
            match out_reg {
                Dst::Reg(r) => next.push(r),
                Dst::Mem { .. } => outputs.push(OutBlock { word_offset, count, raw: store == Store::Raw }),
            }
        }
        cur = next;
    }
    if let Some(w) = e.words.last_mut() {
        w.fin = true;
    }
    if e.next_word * WORD_BYTES > u16::MAX as usize {
        return Err(CompileError::Layout("result slot too large".into()));
    }
    Ok(PacketKernel { program: VpeProgram { words: e.words, pcache: e.pcache, posts: e.posts }, outputs, slot_words: e.next_word })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::ir::usecase1;
    use crate::compiler::lower::Graph;
    use crate::compiler::quantize::quantize_model;
    use crate::fabric::BankId;
    use crate::vpe::Vpe;
    use std::collections::VecDeque;

    fn model() -> QuantizedModel {
        let g = Graph::from_ir(&usecase1(3)).unwrap();
        let calib: Vec<Vec<i8>> = (0..32).map(|i| (0..6).map(|j| ((i * 37 + j * 11) % 128) as i8).collect()).collect();
        quantize_model(&g, &calib, 1.0).unwrap()
    }

    /// Straight-line evaluation of the dense chain.
    fn reference(q: &QuantizedModel, x: &[i8]) -> Vec<i32> {
        let mut v: Vec<i32> = x.iter().map(|&b| i32::from(b)).collect();
        for (i, op) in q.graph.ops.iter().enumerate() {
            let Op::Matmul { rhs: Rhs::Weight(wi), .. } = *op else { unreachable!() };
            let w = &q.weights[wi];
            let acc: Vec<i32> =
                (0..w.cols).map(|c| (0..w.rows).map(|r| v[r] * i32::from(w.data[r * w.cols + c])).sum()).collect();
            v = match &q.posts[i] {
                Some(p) => acc.iter().map(|&a| i32::from(p.apply(a))).collect(),
                None => acc,
            };
        }
        v
    }

    #[test]
    fn mlp_instruction_mix() {
        let k = emit_packet_kernel(&model()).unwrap();
        assert_eq!(k.program.count_simd(SimdKind::Prd), 4);
        assert_eq!(k.program.count_simd(SimdKind::Prds), 2);
        assert_eq!(k.program.count_vu(), 1);
        assert_eq!(k.program.pcache.len(), 6);
        assert_eq!(k.outputs, vec![OutBlock { word_offset: 0, count: 2, raw: true }]);
        assert_eq!(k.slot_words, 4);
        // the listing reassembles to the same words
        assert_eq!(crate::vpe::isa::assemble(&k.program.listing()).unwrap(), k.program.words);
    }

    #[test]
    fn kernel_matches_reference_and_latency() {
        let q = model();
        let k = emit_packet_kernel(&q).unwrap();
        let mut fabric = Fabric::default();
        let rec = Address::new(BankId::Feature, 40);
        let out = Address::new(BankId::Compute0, 0);
        let mut vpe = Vpe::new();
        let mut t = 0;
        for i in 0..50u8 {
            let x: Vec<i8> = (0..6).map(|j| (i.wrapping_mul(29).wrapping_add(j * 41)) as i8).collect();
            let mut word = [0u8; 16];
            for (d, &s) in word.iter_mut().zip(&x) {
                *d = s as u8;
            }
            fabric.poke(rec, word).unwrap();
            vpe.set_address(OUT_AREG as usize, out);
            let mut ready = VecDeque::from([rec]);
            let r = vpe.run(&k.program, &mut fabric, &mut ready, t).unwrap();
            assert_eq!(k.read_result(&fabric, out).unwrap(), reference(&q, &x));
            let cycles = r.fin_cycle.unwrap() - r.start_cycle;
            assert!((20..=40).contains(&cycles), "{cycles}");
            t = r.fin_cycle.unwrap();
        }
    }

    #[test]
    fn rejects_wide_or_non_dense_models() {
        let g = Graph::from_ir(&crate::compiler::ir::usecase2(0)).unwrap();
        let q = quantize_model(&g, &[vec![1; 20]], 1.0).unwrap();
        assert!(matches!(emit_packet_kernel(&q), Err(CompileError::UnsupportedLayer(_))));
    }
}
