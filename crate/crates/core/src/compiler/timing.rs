//! Cycle model of one batch of `f` flows through a [`Schedule`].
//!
//! Engines overlap across batches, so the steady-state period is the busiest
//! engine's cycle count. AryPE time is LD + MM per sub-op plus stalls: with
//! collaboration off the array folds its own partials at one row per cycle;
//! with it on, the array only waits when both ping-pong sides are still being
//! drained by the VU. Softmax on the controller is not timed.

use super::lower::Op;
use super::schedule::{Engine, Schedule};
use super::tiling::TilingPlan;
use crate::arype::{ld_cycles, mm_cycles};
use crate::vpe::jobs::{aggregate_cost, maxpool_cost, simd_matmul_cost};
use crate::vpe::SIMD_MACS;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTiming {
    pub op: usize,
    pub arype_cycles: u64,
    pub arype_stall: u64,
    pub vu_cycles: u64,
    pub simdu_cycles: u64,
    /// Single-batch span of this op.
    pub span: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub k: usize,
    pub flows: usize,
    pub arype_cycles: u64,
    pub arype_stall: u64,
    pub arype_macs: u64,
    pub vu_cycles: u64,
    pub simdu_cycles: u64,
    pub simdu_macs: u64,
    pub per_op: Vec<OpTiming>,
}

impl TimingReport {
    pub fn arype_busy(&self) -> u64 {
        self.arype_cycles + self.arype_stall
    }

    /// Steady-state cycles per batch.
    pub fn period(&self) -> u64 {
        self.arype_busy().max(self.vu_cycles).max(self.simdu_cycles)
    }

    /// Cycles for one batch when nothing overlaps across batches.
    pub fn latency(&self) -> u64 {
        self.per_op.iter().map(|o| o.span).sum()
    }

    pub fn throughput(&self, compute_hz: f64) -> f64 {
        match self.period() {
            0 => 0.0,
            p => self.flows as f64 * compute_hz / p as f64,
        }
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn arype_eff(&self) -> f64 {
        Self::ratio(self.arype_macs, (self.k * self.k) as u64 * self.period())
    }

    pub fn vu_eff(&self) -> f64 {
        Self::ratio(self.vu_cycles, self.period())
    }

    pub fn simdu_eff(&self) -> f64 {
        Self::ratio(self.simdu_macs, SIMD_MACS * self.period())
    }
}

/// AryPE cycles, stall cycles and VU cycles of one instance of `plan`.
fn arype_instance(plan: &TilingPlan, collab: bool) -> (u64, u64, u64, u64) {
    let l = plan.m as u64;
    let sub = ld_cycles(plan.k) + mm_cycles(l, plan.k);
    let busy = sub * plan.sub_ops.len() as u64;
    if !collab {
        let stall = aggregate_cost(l) * plan.aggregations.len() as u64;
        return (busy, stall, 0, busy + stall);
    }
    let mut t = 0u64;
    let mut stall = 0u64;
    let mut vu_free = 0u64;
    let mut side_free = [0u64; 2];
    let mut vu = 0u64;
    for (j, _) in plan.sub_ops.iter().enumerate() {
        match plan.aggregations.iter().position(|g| g.from == j) {
            Some(gi) => {
                let side = gi % 2;
                let start = t.max(side_free[side]);
                stall += start - t;
                let end = start + sub;
                let agg_start = end.max(vu_free);
                vu_free = agg_start + aggregate_cost(l);
                vu += aggregate_cost(l);
                side_free[side] = vu_free;
                t = end;
            }
            None => t += sub,
        }
    }
    (busy, stall, vu, t.max(vu_free))
}

pub fn timing(sched: &Schedule, ops: &[Op], shapes: &[super::ir::Shape]) -> TimingReport {
    let cfg = &sched.config;
    let mut r = TimingReport { k: cfg.k, flows: cfg.flows, ..Default::default() };
    for (i, op) in ops.iter().enumerate() {
        let mut o = OpTiming { op: i, ..Default::default() };
        match *op {
            Op::Matmul { .. } => {
                let p = sched.placement(i).expect("every matmul is placed");
                let inst = p.task.instances() as u64;
                match p.engine {
                    Engine::Simdu => {
                        let c = simd_matmul_cost(p.task.stream_rows(), p.task.k_dim, p.task.n);
                        o.simdu_cycles = c.simd_cycles * inst;
                        o.vu_cycles = c.vu_cycles * inst;
                        o.span = (c.simd_cycles + c.vu_cycles) * inst;
                        r.simdu_macs += c.macs * inst;
                    }
                    Engine::Arype => {
                        let (busy, stall, vu, span) = arype_instance(&p.plan, cfg.collab);
                        o.arype_cycles = busy * inst;
                        o.arype_stall = stall * inst;
                        o.vu_cycles = vu * inst;
                        o.span = span * inst;
                        r.arype_macs += p.task.macs();
                    }
                }
            }
            Op::MaxPool { input, .. } => {
                o.vu_cycles = maxpool_cost((shapes[input].len() * cfg.flows) as u64);
                o.span = o.vu_cycles;
            }
            Op::Reshape { .. } | Op::Softmax { .. } => {}
        }
        r.arype_cycles += o.arype_cycles;
        r.arype_stall += o.arype_stall;
        r.vu_cycles += o.vu_cycles;
        r.simdu_cycles += o.simdu_cycles;
        r.per_op.push(o);
    }
    r
}
