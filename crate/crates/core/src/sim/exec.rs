//! Functional execution of a scheduled model on the engine models: AryPE tasks
//! go through the tiling plan on the array, SIMDU tasks through the VPE job
//! kernels, pooling on the VU and softmax on the controller's table.

use crate::arype::{AryError, ArrayConfig, Arype};
use crate::compiler::lower::{img2col, transpose, Op, Rhs};
use crate::compiler::quantize::QuantizedModel;
use crate::compiler::schedule::{Engine, Schedule};
use crate::compiler::tiling;
use crate::controller::{prob_to_i8, SoftmaxLut};
use crate::vpe::jobs::{maxpool, simd_matmul};

fn as_i8(v: &[i32]) -> Vec<i8> {
    v.iter().map(|&x| x as i8).collect()
}

pub struct Executor<'a> {
    pub model: &'a QuantizedModel,
    pub schedule: &'a Schedule,
    pub array: Arype,
}

impl<'a> Executor<'a> {
    pub fn new(model: &'a QuantizedModel, schedule: &'a Schedule) -> Result<Self, AryError> {
        let array = Arype::new(ArrayConfig { k: schedule.config.k })?;
        Ok(Executor { model, schedule, array })
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul(&mut self, engine: Engine, op: usize, x: &[i8], w: &[i8], m: usize, k: usize, n: usize) -> Result<Vec<i32>, AryError> {
        match engine {
            Engine::Simdu => Ok(simd_matmul(x, w, m, k, n)),
            Engine::Arype => {
                let p = self.schedule.placement(op).expect("matmul is placed");
                let plan = if p.plan.m == m { p.plan.clone() } else { tiling::tile(m, k, n, p.plan.k) };
                tiling::execute(&plan, &mut self.array, x, w)
            }
        }
    }

    /// Runs up to `config.flows` inputs as one batch. Returns every tensor of
    /// every flow; int8 tensors hold their values widened to i32.
    pub fn run(&mut self, inputs: &[Vec<i8>]) -> Result<Vec<Vec<Vec<i32>>>, AryError> {
        let q = self.model;
        let g = &q.graph;
        let f = inputs.len();
        let mut t: Vec<Vec<Vec<i32>>> = vec![vec![Vec::new(); g.shapes.len()]; f];
        for (flow, x) in inputs.iter().enumerate() {
            t[flow][g.input] = x.iter().map(|&v| i32::from(v)).collect();
        }
        for (i, op) in g.ops.iter().enumerate() {
            match *op {
                Op::Matmul { lhs, im2col, rhs, out, .. } => {
                    let engine = self.schedule.placement(i).expect("matmul is placed").engine;
                    let (m, k) = g.lhs_dims(lhs, im2col);
                    let n = g.rhs_dims(rhs).1;
                    let lhs_of = |flow: &Vec<Vec<i32>>| {
                        let a = as_i8(&flow[lhs]);
                        match im2col {
                            Some(c) => img2col(&a, g.shapes[lhs], c),
                            None => a,
                        }
                    };
                    let results: Vec<Vec<i32>> = match rhs {
                        Rhs::Weight(w) => {
                            let stacked: Vec<i8> = t.iter().flat_map(lhs_of).collect();
                            let acc = self.matmul(engine, i, &stacked, &q.weights[w].data, m * f, k, n)?;
                            acc.chunks(m * n).map(<[i32]>::to_vec).collect()
                        }
                        Rhs::Act(id) | Rhs::ActT(id) => {
                            let mut res = Vec::with_capacity(f);
                            for flow in &t {
                                let b = as_i8(&flow[id]);
                                let b = if matches!(rhs, Rhs::ActT(_)) { transpose(&b, g.shapes[id]) } else { b };
                                res.push(self.matmul(engine, i, &lhs_of(flow), &b, m, k, n)?);
                            }
                            res
                        }
                    };
                    for (flow, acc) in t.iter_mut().zip(results) {
                        flow[out] = match &q.posts[i] {
                            Some(p) => acc.iter().map(|&a| i32::from(p.apply(a))).collect(),
                            None => acc,
                        };
                    }
                }
                Op::MaxPool { input, stride, out, .. } => {
                    let s = g.shapes[input];
                    for flow in &mut t {
                        flow[out] = maxpool(&as_i8(&flow[input]), s.rows, s.cols, stride).into_iter().map(i32::from).collect();
                    }
                }
                Op::Reshape { input, out, .. } => {
                    for flow in &mut t {
                        flow[out] = flow[input].clone();
                    }
                }
                Op::Softmax { input, out, .. } => {
                    let lut = SoftmaxLut::new(q.scales[input]);
                    let cols = g.shapes[input].cols;
                    for flow in &mut t {
                        flow[out] =
                            flow[input].chunks(cols).flat_map(|row| lut.apply(row)).map(|p| i32::from(prob_to_i8(p))).collect();
                    }
                }
            }
        }
        Ok(t)
    }
}
