//! Engine placement and program emission.
//!
//! With collaboration on, a matmul goes to the SIMDU when its reduction fits
//! one lane and it would leave most of the array idle, or when its stream is
//! shorter than the array's fill-plus-drain (per-flow activation products such
//! as attention scores). Everything else runs on the AryPE, and block
//! aggregations run on the VU. With collaboration off, every matmul and its
//! aggregations stay on the AryPE. Max-pooling always runs on the VU and
//! softmax on the controller.

use super::lower::{Graph, MatmulTask, Op};
use super::tiling::{tile, TilingPlan};
use super::CompileError;
use crate::arype::{disassemble, AryInstr};
use crate::fabric::{BankId, COMPUTE_DEPTH, WORD_BYTES};
use crate::vpe::isa::LANES;
use serde::{Deserialize, Serialize};

/// AryPE instruction cache depth.
pub const ARY_ICACHE_DEPTH: usize = 4096;
/// Rows per side of each ping-pong ring; the VU drains partial rows as the
/// array produces them, so a side holds a window rather than a full tile.
pub const PINGPONG_ROWS: usize = 256;
/// Result slots the controller cycles through.
pub const RESULT_SLOTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub k: usize,
    pub flows: usize,
    pub collab: bool,
    pub offload_threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { k: 16, flows: 1, collab: true, offload_threshold: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    Simdu,
    Arype,
}

/// Fraction of the array's cells a single tile of the task keeps busy.
pub fn occupancy(k_dim: usize, n: usize, k: usize) -> f64 {
    (k_dim.min(k) * n.min(k)) as f64 / (k * k) as f64
}

pub fn place(task: &MatmulTask, cfg: &ScheduleConfig) -> Engine {
    if !cfg.collab {
        return Engine::Arype;
    }
    let narrow = task.k_dim <= LANES && occupancy(task.k_dim, task.n, cfg.k) < cfg.offload_threshold;
    let short = task.stream_rows() < 2 * cfg.k - 1;
    if narrow || short {
        Engine::Simdu
    } else {
        Engine::Arype
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub task: MatmulTask,
    pub engine: Engine,
    pub occupancy: f64,
    pub plan: TilingPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "job", rename_all = "snake_case")]
pub enum VpeJob {
    SimdMatmul { op: usize, rows: usize, k_dim: usize, n: usize, instances: usize },
    /// `count` folds of `rows`-row partials into accumulators, per instance.
    Aggregate { op: usize, rows: usize, count: usize, instances: usize },
    MaxPool { op: usize, input_elems: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub bank: BankId,
    pub base: usize,
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub config: ScheduleConfig,
    pub placements: Vec<Placement>,
    /// One pass over the model; per-flow tasks repeat their segment per flow.
    pub ary_program: Vec<AryInstr>,
    /// `(a, b)` of the tile each LD loads.
    pub ary_tiles: Vec<(usize, usize)>,
    pub vpe_jobs: Vec<VpeJob>,
    /// Softmax ops handled by the controller.
    pub controller_ops: Vec<usize>,
    pub layout: Vec<Region>,
}

impl Schedule {
    pub fn placement(&self, op: usize) -> Option<&Placement> {
        self.placements.iter().find(|p| p.task.op == op)
    }

    pub fn ary_image(&self) -> String {
        disassemble(&self.ary_program)
    }

    pub fn vpe_image(&self) -> String {
        self.vpe_jobs
            .iter()
            .map(|j| match *j {
                VpeJob::SimdMatmul { op, rows, k_dim, n, instances } => {
                    format!("simd_matmul op{op} ({rows},{k_dim})x({k_dim},{n}) x{instances}\n")
                }
                VpeJob::Aggregate { op, rows, count, instances } => format!("aggregate op{op} rows={rows} count={count} x{instances}\n"),
                VpeJob::MaxPool { op, input_elems } => format!("vmax op{op} elems={input_elems}\n"),
            })
            .collect()
    }

    /// Canonical serialized form; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    /// Human-readable placement table.
    pub fn report(&self) -> String {
        let mut s = format!(
            "k={} flows={} collab={}\n{:<4} {:<6} {:>18} {:>7} {:>6} {:>5}\n",
            self.config.k, self.config.flows, self.config.collab, "op", "engine", "task (m,k,n)", "occ%", "subops", "aggs"
        );
        for p in &self.placements {
            let (m, kd, n) = p.task.dims();
            s += &format!(
                "{:<4} {:<6} {:>18} {:>7.3} {:>6} {:>5}\n",
                p.task.op,
                format!("{:?}", p.engine),
                format!("({m},{kd},{n})"),
                100.0 * p.occupancy,
                p.plan.sub_ops.len(),
                p.plan.aggregations.len()
            );
        }
        s
    }
}

pub fn schedule(graph: &Graph, cfg: &ScheduleConfig) -> Result<Schedule, CompileError> {
    if cfg.k == 0 || cfg.flows == 0 {
        return Err(CompileError::Layout("k and flows must be at least 1".into()));
    }
    let tasks = graph.tasks(cfg.flows);
    let mut placements = Vec::new();
    let mut ary_program = Vec::new();
    let mut ary_tiles = Vec::new();
    let mut vpe_jobs = Vec::new();
    let mut controller_ops = Vec::new();
    let mut agg_rows = 0;
    for (i, op) in graph.ops.iter().enumerate() {
        match *op {
            Op::Matmul { .. } => {
                let task = *tasks.iter().find(|t| t.op == i).expect("one task per matmul");
                let engine = place(&task, cfg);
                let plan = tile(task.stream_rows(), task.k_dim, task.n, cfg.k);
                match engine {
                    Engine::Simdu => vpe_jobs.push(VpeJob::SimdMatmul {
                        op: i,
                        rows: task.stream_rows(),
                        k_dim: task.k_dim,
                        n: task.n,
                        instances: task.instances(),
                    }),
                    Engine::Arype => {
                        for s in &plan.sub_ops {
                            ary_program.push(AryInstr::Ld { p: 2 });
                            ary_program.push(AryInstr::Mm { l: task.stream_rows() as u32, src: 0, dst: 1 });
                            ary_tiles.push((s.a, s.b));
                        }
                        if cfg.collab && !plan.aggregations.is_empty() {
                            agg_rows = agg_rows.max(task.stream_rows());
                            vpe_jobs.push(VpeJob::Aggregate {
                                op: i,
                                rows: task.stream_rows(),
                                count: plan.aggregations.len(),
                                instances: task.instances(),
                            });
                        }
                    }
                }
                placements.push(Placement { task, engine, occupancy: occupancy(task.k_dim, task.n, cfg.k), plan });
            }
            Op::MaxPool { input, .. } => {
                vpe_jobs.push(VpeJob::MaxPool { op: i, input_elems: graph.shapes[input].len() * cfg.flows })
            }
            Op::Softmax { .. } => controller_ops.push(i),
            Op::Reshape { .. } => {}
        }
    }
    if ary_program.len() > ARY_ICACHE_DEPTH {
        return Err(CompileError::Capacity { what: "AryPE iCache".into(), need: ary_program.len(), have: ARY_ICACHE_DEPTH });
    }
    let layout = layout(cfg.k, agg_rows > 0, graph.shapes[graph.output].len())?;
    Ok(Schedule { config: cfg.clone(), placements, ary_program, ary_tiles, vpe_jobs, controller_ops, layout })
}

/// Ping-pong rings in both compute banks (when aggregations run on the VU)
/// and a ring of int32 result slots in compute bank 0.
fn layout(k: usize, pingpong: bool, out_elems: usize) -> Result<Vec<Region>, CompileError> {
    let mut regions = Vec::new();
    let mut next = [0usize; 2];
    let mut put = |name: &str, bank: BankId, words: usize| -> Result<(), CompileError> {
        let side = usize::from(bank == BankId::Compute1);
        if next[side] + words > COMPUTE_DEPTH {
            return Err(CompileError::Layout(format!("{name} needs {words} words, {} free in {bank:?}", COMPUTE_DEPTH - next[side])));
        }
        regions.push(Region { name: name.into(), bank, base: next[side], words });
        next[side] += words;
        Ok(())
    };
    if pingpong {
        let words = (PINGPONG_ROWS * k * 4).div_ceil(WORD_BYTES);
        put("pingpong0", BankId::Compute0, words)?;
        put("pingpong1", BankId::Compute1, words)?;
    }
    put("results", BankId::Compute0, RESULT_SLOTS * (out_elems * 4).div_ceil(WORD_BYTES))?;
    Ok(regions)
}
