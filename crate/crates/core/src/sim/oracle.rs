//! Straight-line reference models. Inference walks the IR layer by layer
//! with direct loops (no unrolling, no tiling) and feature words are rebuilt
//! from whole-flow aggregates in wide integers.

use crate::compiler::ir::conv_windows;
use crate::compiler::lower::{Op, Rhs};
use crate::compiler::quantize::QuantizedModel;
use crate::controller::PROB_ONE;
use crate::extractor::features::{Accumulator, FeatureProgram};
use crate::fabric::Word;
use crate::quant::PostOp;
use crate::traffic::ParsedHeader;

fn post(p: &Option<PostOp>, acc: i64) -> i32 {
    let acc = acc as i32;
    match p {
        Some(p) => i32::from(p.apply(acc)),
        None => acc,
    }
}

/// `x (m x k) * w (k x n)` with `w` addressed as `w[i][c]`.
fn dense(x: &[i32], m: usize, k: usize, n: usize, w: impl Fn(usize, usize) -> i64) -> Vec<i64> {
    let mut y = vec![0i64; m * n];
    for r in 0..m {
        for c in 0..n {
            y[r * n + c] = (0..k).map(|i| i64::from(x[r * k + i]) * w(i, c)).sum();
        }
    }
    y
}

fn softmax_row(row: &[i32], scale: f64) -> Vec<i32> {
    let max = row.iter().copied().max().unwrap_or(0);
    let e: Vec<u64> = row
        .iter()
        .map(|&x| {
            let d = i64::from(max) - i64::from(x);
            if d < 256 {
                ((d as f64 * -scale).exp() * 65536.0 + 0.5).floor() as u64
            } else {
                0
            }
        })
        .collect();
    let sum: u64 = e.iter().sum();
    let one = PROB_ONE as u64;
    let mut p: Vec<u64> = e.iter().map(|&v| v * one / sum).collect();
    let short = one - p.iter().sum::<u64>();
    // hand out the shortfall by descending remainder, stable on index
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| (e[b] * one % sum).cmp(&(e[a] * one % sum)).then(a.cmp(&b)));
    for i in 0..short as usize {
        p[idx[i % idx.len()]] += 1;
    }
    p.into_iter().map(|v| ((v * 127 + one / 2) / one) as i32).collect()
}

/// Int8 inference of one input through `q`, returning the output tensor.
pub fn infer(q: &QuantizedModel, input: &[i8]) -> Vec<i32> {
    let mut t = infer_all(q, input);
    t.swap_remove(q.graph.output)
}

/// Every tensor of the graph for one input; int8 tensors widened to i32.
pub fn infer_all(q: &QuantizedModel, input: &[i8]) -> Vec<Vec<i32>> {
    let g = &q.graph;
    let mut t: Vec<Vec<i32>> = vec![Vec::new(); g.shapes.len()];
    t[g.input] = input.iter().map(|&v| i32::from(v)).collect();
    for (i, op) in g.ops.iter().enumerate() {
        let v = match *op {
            Op::Matmul { lhs, im2col: Some(c), rhs: Rhs::Weight(wi), out, .. } => {
                let (kernel, stride, padding) = (c.kernel, c.stride, c.padding);
                let w = &q.weights[wi];
                let (in_ch, out_ch) = (g.shapes[lhs].cols, w.cols);
                let len = g.shapes[lhs].rows;
                let windows = conv_windows(len, kernel, stride, padding).expect("shapes were checked at lowering");
                let x = &t[lhs];
                let mut y = Vec::with_capacity(windows * out_ch);
                for o in 0..windows {
                    for c in 0..out_ch {
                        let mut acc = 0i64;
                        for kk in 0..kernel {
                            let pos = (o * stride + kk) as isize - padding as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            for ci in 0..in_ch {
                                acc += i64::from(x[pos as usize * in_ch + ci])
                                    * i64::from(w.data[(kk * in_ch + ci) * w.cols + c]);
                            }
                        }
                        y.push(post(&q.posts[i], acc));
                    }
                }
                debug_assert_eq!(y.len(), g.shapes[out].len());
                y
            }
            Op::Matmul { lhs, rhs, .. } => {
                let s = g.shapes[lhs];
                let x = &t[lhs];
                let acc = match rhs {
                    Rhs::Weight(wi) => {
                        let w = &q.weights[wi];
                        dense(x, s.rows, s.cols, w.cols, |r, c| i64::from(w.data[r * w.cols + c]))
                    }
                    Rhs::Act(id) => {
                        let b = &t[id];
                        let n = g.shapes[id].cols;
                        dense(x, s.rows, s.cols, n, |r, c| i64::from(b[r * n + c]))
                    }
                    Rhs::ActT(id) => {
                        // x * b^T, reading b row-wise
                        let b = &t[id];
                        let bs = g.shapes[id];
                        dense(x, s.rows, s.cols, bs.rows, |r, c| i64::from(b[c * bs.cols + r]))
                    }
                };
                acc.into_iter().map(|a| post(&q.posts[i], a)).collect()
            }
            Op::MaxPool { input, stride, .. } => {
                let s = g.shapes[input];
                let x = &t[input];
                let mut y = Vec::new();
                for o in 0..s.rows.div_ceil(stride) {
                    for c in 0..s.cols {
                        let rows = o * stride..((o + 1) * stride).min(s.rows);
                        y.push(rows.map(|r| x[r * s.cols + c]).max().expect("window is non-empty"));
                    }
                }
                y
            }
            Op::Reshape { input, .. } => t[input].clone(),
            Op::Softmax { input, .. } => {
                let cols = g.shapes[input].cols;
                t[input].chunks(cols).flat_map(|row| softmax_row(row, q.scales[input])).collect()
            }
        };
        t[op.out()] = v;
    }
    t
}

/// Feature word a flow should freeze with after `pkts`, its packets in
/// arrival order up to the threshold.
pub fn golden_feature_word(fp: &FeatureProgram, pkts: &[ParsedHeader]) -> Word {
    let us: Vec<u64> = pkts
        .iter()
        .enumerate()
        .map(|(i, p)| if i == 0 { 0 } else { (p.arrival_ns.saturating_sub(pkts[i - 1].arrival_ns) / 1000).min(0xffff) })
        .collect();
    let lens: Vec<u64> = pkts.iter().map(|p| u64::from(p.pkt_size)).collect();
    let mut w = [0u8; 16];
    for &(acc, at) in &fp.layout {
        let width = acc.width();
        let cap = (1u64 << (8 * width)) - 1;
        let lo = |v: u64| v & 0xffff;
        let v = match acc {
            Accumulator::SizeSum => lens.iter().sum::<u64>().min(cap),
            Accumulator::Count => (pkts.len() as u64).min(cap),
            Accumulator::IntvSum => us.iter().sum::<u64>().min(cap),
            Accumulator::MaxLen => lens.iter().map(|&l| lo(l)).max().unwrap_or(0),
            Accumulator::MinLen => lens.iter().map(|&l| lo(l)).min().unwrap_or(cap),
            Accumulator::MaxIntv => us.iter().copied().max().unwrap_or(0),
            Accumulator::MinIntv => us.iter().copied().min().unwrap_or(cap),
        };
        w[at..at + width].copy_from_slice(&v.to_le_bytes()[..width]);
    }
    w
}

/// Record layout a capture mode should produce.
#[derive(Debug, Clone)]
pub enum GoldenMode {
    Features(FeatureProgram),
    PacketCopy,
    Intervals { packets: usize, words: usize },
    Payload { packets: usize },
}

fn intervals_us(pkts: &[ParsedHeader]) -> Vec<u64> {
    (0..pkts.len())
        .map(|i| if i == 0 { 0 } else { pkts[i].arrival_ns.saturating_sub(pkts[i - 1].arrival_ns) / 1000 })
        .collect()
}

/// Bytes of the record that becomes ready on the last packet of `flow`,
/// given every packet of the flow so far in arrival order.
pub fn golden_record(mode: &GoldenMode, flow: &[ParsedHeader]) -> Vec<u8> {
    match mode {
        GoldenMode::Features(fp) => golden_feature_word(fp, flow).to_vec(),
        GoldenMode::PacketCopy => {
            let last = flow.last().expect("record of at least one packet");
            let us = intervals_us(flow).last().copied().unwrap_or(0).min(0xffff);
            let backward = last.tuple.is_canonical() != flow[0].tuple.is_canonical();
            let mut w = vec![0u8; 16];
            w[..2].copy_from_slice(&last.pkt_size.min(0xffff).to_le_bytes()[..2]);
            w[2] = last.flags;
            w[3] = u8::from(backward);
            w[4] = last.tuple.protocol;
            w[5] = us as u8;
            w
        }
        GoldenMode::Intervals { packets, words } => {
            let mut w = vec![0u8; words * 16];
            for (i, us) in intervals_us(flow).into_iter().take(*packets).enumerate() {
                w[i] = us.min(127) as u8;
            }
            w
        }
        GoldenMode::Payload { packets } => {
            let mut w = vec![0u8; packets * 16];
            for (i, p) in flow.iter().take(*packets).enumerate() {
                let n = p.payload_prefix.len().min(16);
                w[i * 16..i * 16 + n].copy_from_slice(&p.payload_prefix[..n]);
            }
            w
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_row_extremes() {
        assert_eq!(softmax_row(&[3, 3], 0.5), vec![64, 64]);
        assert_eq!(softmax_row(&[100, -100], 0.5), vec![127, 0]);
    }
}
