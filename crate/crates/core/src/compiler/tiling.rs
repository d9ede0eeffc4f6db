//! K-dimension blocking of a matmul onto a `k x k` array. The reduction is
//! split into `ceil(k_dim / k)` chunks and the output columns into
//! `ceil(n / k)` tiles; every (column tile, chunk) pair is one sub-operation
//! streaming all `m` rows. The first chunk of a column tile seeds its
//! accumulator and each later chunk's partial is folded in by one VU
//! aggregation, through ping-pong buffers in alternating compute banks.

use crate::arype::{AryError, Arype, WeightTile};
use crate::fabric::BankId;
use crate::vpe::jobs::aggregate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubOp {
    /// Reduction rows `k0 .. k0 + a`.
    pub k0: usize,
    pub a: usize,
    /// Output columns `n0 .. n0 + b`.
    pub n0: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Aggregation {
    /// Sub-op whose output is the accumulator.
    pub into: usize,
    /// Sub-op whose partial gets added.
    pub from: usize,
    pub buffer: BankId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TilingPlan {
    pub m: usize,
    pub k_dim: usize,
    pub n: usize,
    pub k: usize,
    pub sub_ops: Vec<SubOp>,
    pub aggregations: Vec<Aggregation>,
}

impl TilingPlan {
    pub fn k_splits(&self) -> usize {
        self.k_dim.div_ceil(self.k)
    }

    pub fn n_tiles(&self) -> usize {
        self.n.div_ceil(self.k)
    }
}

pub fn tile(m: usize, k_dim: usize, n: usize, k: usize) -> TilingPlan {
    assert!(m >= 1 && k_dim >= 1 && n >= 1 && k >= 1, "task dims must be at least 1");
    let mut sub_ops = Vec::new();
    let mut aggregations = Vec::new();
    for n0 in (0..n).step_by(k) {
        let seed = sub_ops.len();
        for k0 in (0..k_dim).step_by(k) {
            if k0 > 0 {
                let buffer = if aggregations.len() % 2 == 0 { BankId::Compute0 } else { BankId::Compute1 };
                aggregations.push(Aggregation { into: seed, from: sub_ops.len(), buffer });
            }
            sub_ops.push(SubOp { k0, a: k.min(k_dim - k0), n0, b: k.min(n - n0) });
        }
    }
    TilingPlan { m, k_dim, n, k, sub_ops, aggregations }
}

/// Runs `plan` on `array`: `x` is `m x k_dim` int8, `w` is `k_dim x n` int8.
/// Returns the `m x n` int32 product.
pub fn execute(plan: &TilingPlan, array: &mut Arype, x: &[i8], w: &[i8]) -> Result<Vec<i32>, AryError> {
    let (m, kd, n) = (plan.m, plan.k_dim, plan.n);
    if x.len() != m * kd || w.len() != kd * n {
        return Err(AryError::Shape(format!("operands {} and {} for a {m}x{kd}x{n} plan", x.len(), w.len())));
    }
    let mut partials = Vec::with_capacity(plan.sub_ops.len());
    for s in &plan.sub_ops {
        let data = (s.k0..s.k0 + s.a).flat_map(|r| w[r * n + s.n0..r * n + s.n0 + s.b].iter().copied()).collect();
        array.ld_weights(&WeightTile::new(s.a, s.b, data)?)?;
        let xs: Vec<i8> = (0..m).flat_map(|r| x[r * kd + s.k0..r * kd + s.k0 + s.a].iter().copied()).collect();
        partials.push(array.mm(&xs, s.a)?.0);
    }
    let mut out = vec![0i32; m * n];
    for (i, s) in plan.sub_ops.iter().enumerate() {
        if plan.aggregations.iter().any(|g| g.from == i) {
            continue;
        }
        let terms: Vec<Vec<i32>> = std::iter::once(i)
            .chain(plan.aggregations.iter().filter(|g| g.into == i).map(|g| g.from))
            .map(|j| partials[j].clone())
            .collect();
        let acc = aggregate(&terms);
        for r in 0..m {
            out[r * n + s.n0..r * n + s.n0 + s.b].copy_from_slice(&acc[r * s.b..(r + 1) * s.b]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arype::ArrayConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn oracle(x: &[i8], w: &[i8], m: usize, kd: usize, n: usize) -> Vec<i32> {
        let mut out = vec![0i32; m * n];
        for r in 0..m {
            for c in 0..n {
                let mut acc = 0i64;
                for i in 0..kd {
                    acc += i64::from(x[r * kd + i]) * i64::from(w[i * n + c]);
                }
                out[r * n + c] = acc as i32;
            }
        }
        out
    }

    #[test]
    fn plan_counts() {
        let p = tile(10, 96, 32, 32);
        assert_eq!((p.sub_ops.len(), p.aggregations.len()), (3, 2));
        let p = tile(15, 128, 64, 16);
        assert_eq!((p.sub_ops.len(), p.aggregations.len()), (32, 28));
        let p = tile(4, 16, 16, 16);
        assert_eq!((p.sub_ops.len(), p.aggregations.len()), (1, 0));
        // linear head: 162 columns leave a 2-wide last tile
        let p = tile(1, 128, 162, 16);
        assert_eq!(p.n_tiles(), 11);
        assert_eq!(p.sub_ops.last().unwrap().b, 2);
    }

    #[test]
    fn ping_pong_alternates() {
        let p = tile(3, 64, 16, 16);
        let banks: Vec<BankId> = p.aggregations.iter().map(|g| g.buffer).collect();
        assert_eq!(banks, vec![BankId::Compute0, BankId::Compute1, BankId::Compute0]);
        assert!(p.aggregations.iter().all(|g| g.into == 0));
    }

    #[test]
    fn mlp_block_reconstructs_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<i8> = (0..15 * 128).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..128 * 64).map(|_| rng.gen()).collect();
        let mut array = Arype::new(ArrayConfig { k: 16 }).unwrap();
        let plan = tile(15, 128, 64, 16);
        assert_eq!(execute(&plan, &mut array, &x, &w).unwrap(), oracle(&x, &w, 15, 128, 64));
        assert_eq!(array.util.per_instr.len(), 32);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tiled_equals_oracle(
            m in 1usize..40, kd in 1usize..100, n in 1usize..100, ki in 0usize..3, seed in any::<u64>()
        ) {
            let k = [8, 16, 32][ki];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<i8> = (0..m * kd).map(|_| rng.gen()).collect();
            let w: Vec<i8> = (0..kd * n).map(|_| rng.gen()).collect();
            let plan = tile(m, kd, n, k);
            prop_assert_eq!(plan.sub_ops.len(), kd.div_ceil(k) * n.div_ceil(k));
            prop_assert_eq!(plan.aggregations.len(), (kd.div_ceil(k) - 1) * n.div_ceil(k));
            let mut array = Arype::new(ArrayConfig { k }).unwrap();
            prop_assert_eq!(execute(&plan, &mut array, &x, &w).unwrap(), oracle(&x, &w, m, kd, n));
        }
    }
}
