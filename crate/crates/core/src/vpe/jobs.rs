//! Flow-level work the VPE takes on in collaboration with the AryPE: small
//! matmuls on the SIMDU, partial-tile aggregation and max-pooling on the VU.
//!
//! Each job has a functional form built from the lane primitives and a cycle
//! cost. Jobs are issued as dense streams, so costs are throughput-based plus
//! one pipeline fill.

use super::isa::{ParamEntry, LANES};
use super::{simd_prd, simd_prds, vu_exec, SIMD_LATENCY};
use crate::vpe::isa::VuKind;

/// Partial rows the VU folds per cycle when aggregating AryPE tiles.
pub const AGG_ROWS_PER_CYCLE: u64 = 1;
/// Elements per cycle for VU sweeps (pooling, SIMDU chunk sums).
pub const VU_SWEEP_ELEMS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JobCost {
    pub simd_cycles: u64,
    pub vu_cycles: u64,
    pub macs: u64,
}

/// `rows x k` int8 activations times `k x n` int8 weights. With `k <= 4` two
/// rows share one prds (one per sub-lane); otherwise each row is split into
/// 8-element chunks, one prd per chunk and 8-column block, and chunk partials
/// are summed on the VU.
pub fn simd_matmul_cost(rows: usize, k: usize, n: usize) -> JobCost {
    let (rows, k, n) = (rows as u64, k as u64, n as u64);
    if rows * k * n == 0 {
        return JobCost::default();
    }
    let col_blocks = n.div_ceil(LANES as u64);
    let macs = rows * k * n;
    if k <= 4 {
        return JobCost { simd_cycles: rows.div_ceil(2) * col_blocks + SIMD_LATENCY - 1, vu_cycles: 0, macs };
    }
    let chunks = k.div_ceil(LANES as u64);
    JobCost {
        simd_cycles: rows * col_blocks * chunks + SIMD_LATENCY - 1,
        vu_cycles: (chunks - 1) * (rows * n).div_ceil(VU_SWEEP_ELEMS),
        macs,
    }
}

/// pCache entry for an 8-column block at `c0` and reduction offset `k0`. With
/// `width == 4` both sub-lanes get the same 4-row weight slice.
fn param(w: &[i8], k: usize, n: usize, k0: usize, c0: usize, width: usize) -> ParamEntry {
    std::array::from_fn(|lane| {
        std::array::from_fn(|e| {
            let (kk, cc) = (k0 + e % width, c0 + lane);
            if kk < k && cc < n {
                w[kk * n + cc]
            } else {
                0
            }
        })
    })
}

/// Functional form of [`simd_matmul_cost`]'s schedule. Returns `rows x n` int32.
pub fn simd_matmul(a: &[i8], w: &[i8], rows: usize, k: usize, n: usize) -> Vec<i32> {
    assert_eq!(a.len(), rows * k);
    assert_eq!(w.len(), k * n);
    let mut out = vec![0i32; rows * n];
    let row_vec = |r: usize, k0: usize, width: usize| -> [i32; LANES] {
        std::array::from_fn(|e| if e < width && k0 + e < k { i32::from(a[r * k + k0 + e]) } else { 0 })
    };
    for c0 in (0..n).step_by(LANES) {
        if k <= 4 {
            let p = param(w, k, n, 0, c0, 4);
            for r in (0..rows).step_by(2) {
                let lo = row_vec(r, 0, 4);
                let hi = if r + 1 < rows { row_vec(r + 1, 0, 4) } else { [0; LANES] };
                let x: [i32; LANES] = std::array::from_fn(|e| if e < 4 { lo[e] } else { hi[e - 4] });
                let (ra, rb) = simd_prds(&x, &p);
                for lane in 0..LANES.min(n - c0) {
                    out[r * n + c0 + lane] = ra[lane];
                    if r + 1 < rows {
                        out[(r + 1) * n + c0 + lane] = rb[lane];
                    }
                }
            }
        } else {
            for r in 0..rows {
                let mut acc = [0i32; LANES];
                for k0 in (0..k).step_by(LANES) {
                    let part = simd_prd(&row_vec(r, k0, LANES), &param(w, k, n, k0, c0, LANES));
                    acc = vu_exec(VuKind::Vadd, &acc, &part);
                }
                for lane in 0..LANES.min(n - c0) {
                    out[r * n + c0 + lane] = acc[lane];
                }
            }
        }
    }
    out
}

/// Cycles to fold `partial_rows` partial-result rows into their accumulators.
pub fn aggregate_cost(partial_rows: u64) -> u64 {
    partial_rows.div_ceil(AGG_ROWS_PER_CYCLE)
}

/// Element-wise sum of equally shaped partial tiles via `vadd`.
pub fn aggregate(partials: &[Vec<i32>]) -> Vec<i32> {
    let len = partials.first().map_or(0, Vec::len);
    let mut out = vec![0i32; len];
    for p in partials {
        assert_eq!(p.len(), len);
        for (o, chunk) in out.chunks_mut(LANES).zip(p.chunks(LANES)) {
            let mut a = [0i32; LANES];
            let mut b = [0i32; LANES];
            a[..o.len()].copy_from_slice(o);
            b[..chunk.len()].copy_from_slice(chunk);
            let s = vu_exec(VuKind::Vadd, &a, &b);
            let n = o.len();
            o.copy_from_slice(&s[..n]);
        }
    }
    out
}

/// Cycles for a vmax sweep over `input_elems` elements.
pub fn maxpool_cost(input_elems: u64) -> u64 {
    input_elems.div_ceil(VU_SWEEP_ELEMS)
}

/// 1-D max pooling over rows of a `len x ch` int8 map, window = stride, ceil
/// mode (a short last window pools what remains).
pub fn maxpool(x: &[i8], len: usize, ch: usize, stride: usize) -> Vec<i8> {
    assert_eq!(x.len(), len * ch);
    let out_len = len.div_ceil(stride);
    let mut out = vec![i8::MIN; out_len * ch];
    for o in 0..out_len {
        for r in o * stride..((o + 1) * stride).min(len) {
            for c0 in (0..ch).step_by(LANES) {
                let width = LANES.min(ch - c0);
                let cur: [i32; LANES] = std::array::from_fn(|i| if i < width { i32::from(out[o * ch + c0 + i]) } else { 0 });
                let nxt: [i32; LANES] = std::array::from_fn(|i| if i < width { i32::from(x[r * ch + c0 + i]) } else { 0 });
                let m = vu_exec(VuKind::Vmax, &cur, &nxt);
                for i in 0..width {
                    out[o * ch + c0 + i] = m[i] as i8;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(a: &[i8], w: &[i8], rows: usize, k: usize, n: usize) -> Vec<i32> {
        let mut out = vec![0; rows * n];
        for r in 0..rows {
            for c in 0..n {
                out[r * n + c] = (0..k).map(|i| i32::from(a[r * k + i]) * i32::from(w[i * n + c])).sum();
            }
        }
        out
    }

    #[test]
    fn costs() {
        // 15x16 by 16x15: 15 rows, 2 column blocks, 2 chunks
        let c = simd_matmul_cost(15, 16, 15);
        assert_eq!(c.simd_cycles, 15 * 2 * 2 + 4);
        assert_eq!(c.vu_cycles, (15 * 15_u64).div_ceil(16));
        // k = 3 uses sub-lanes: 20 rows -> 10 issues per block
        assert_eq!(simd_matmul_cost(20, 3, 32).simd_cycles, 10 * 4 + 4);
        assert_eq!(simd_matmul_cost(0, 3, 32), JobCost::default());
        assert_eq!(maxpool_cost(20 * 32), 40);
        assert_eq!(aggregate_cost(7), 7);
    }

    #[test]
    fn maxpool_ceil_mode() {
        let x: Vec<i8> = vec![1, -1, 5, -7, 3, 2]; // 3 rows x 2 channels
        assert_eq!(maxpool(&x, 3, 2, 2), vec![5, -1, 3, 2]);
    }

    #[test]
    fn aggregate_two_tiles_equals_unblocked() {
        // rows x 16 by 16 x 5, split along k into two 8-wide tiles
        let a: Vec<i8> = (0..3 * 16).map(|i| (i * 7 % 23) as i8 - 11).collect();
        let w: Vec<i8> = (0..16 * 5).map(|i| (i * 5 % 19) as i8 - 9).collect();
        let lo_a: Vec<i8> = (0..3).flat_map(|r| a[r * 16..r * 16 + 8].to_vec()).collect();
        let hi_a: Vec<i8> = (0..3).flat_map(|r| a[r * 16 + 8..r * 16 + 16].to_vec()).collect();
        let p0 = reference(&lo_a, &w[..40], 3, 8, 5);
        let p1 = reference(&hi_a, &w[40..], 3, 8, 5);
        assert_eq!(aggregate(&[p0, p1]), reference(&a, &w, 3, 16, 5));
    }

    proptest! {
        #[test]
        fn simd_matmul_matches_reference(
            rows in 1usize..9, k in 1usize..20, n in 1usize..20, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = |len: usize| -> Vec<i8> { (0..len).map(|_| rng.gen()).collect() };
            let a = gen(rows * k);
            let w = gen(k * n);
            prop_assert_eq!(simd_matmul(&a, &w, rows, k, n), reference(&a, &w, rows, k, n));
        }
    }
}
