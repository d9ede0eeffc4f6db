//! Post-training int8 quantization of a lowered graph.
//!
//! Weights get per-tensor symmetric scales. Every activation tensor gets a
//! scale calibrated from float forward passes (`max|x| / 127`). Each matmul
//! then carries a [`PostOp`] mapping its int32 accumulator to the int8 grid
//! of its output; the graph output stays raw int32 when no activation
//! follows the last matmul.

use super::ir::Shape;
use super::lower::{Fused, Graph, Op, Rhs};
use super::CompileError;
use crate::quant::{quantize, Activation, Lut, PostOp, Requant};
use serde::{Deserialize, Serialize};

/// Scale of softmax probabilities on the int8 grid.
pub const PROB_SCALE: f64 = 1.0 / 127.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QWeight {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: Graph,
    pub weights: Vec<QWeight>,
    /// Real value of one int8 step per tensor; for a raw int32 output, the
    /// accumulator's scale.
    pub scales: Vec<f64>,
    /// Store-path transform per op; `None` for non-matmuls and raw outputs.
    pub posts: Vec<Option<PostOp>>,
}

impl QuantizedModel {
    pub fn output_is_raw(&self) -> bool {
        self.graph
            .ops
            .iter()
            .zip(&self.posts)
            .any(|(op, p)| matches!(op, Op::Matmul { out, .. } if *out == self.graph.output) && p.is_none())
    }

    pub fn input_shape(&self) -> Shape {
        self.graph.shapes[self.graph.input]
    }

    pub fn output_shape(&self) -> Shape {
        self.graph.shapes[self.graph.output]
    }
}

fn scale_of(max: f64) -> f64 {
    if max > 0.0 {
        max / 127.0
    } else {
        1.0
    }
}

/// Quantizes `graph` using int8 calibration inputs whose real value is
/// `q * input_scale`.
pub fn quantize_model(graph: &Graph, calib: &[Vec<i8>], input_scale: f64) -> Result<QuantizedModel, CompileError> {
    let n = graph.shapes.len();
    let mut max = vec![0f64; n];
    let mut pre_max = vec![0f64; n];
    for x in calib {
        if x.len() != graph.shapes[graph.input].len() {
            return Err(CompileError::Shape(format!("calibration input of {} values", x.len())));
        }
        let input: Vec<f32> = x.iter().map(|&q| (f64::from(q) * input_scale) as f32).collect();
        let (t, pre) = graph.forward_f32_traced(&input);
        for id in 0..n {
            max[id] = t[id].iter().fold(max[id], |m, &v| m.max(f64::from(v).abs()));
            pre_max[id] = pre[id].iter().fold(pre_max[id], |m, &v| m.max(f64::from(v).abs()));
        }
    }

    let weights = graph
        .weights
        .iter()
        .map(|w| {
            let (data, spec) = quantize(&w.data)?;
            Ok(QWeight { rows: w.rows, cols: w.cols, data, scale: spec.scale })
        })
        .collect::<Result<Vec<_>, CompileError>>()?;

    let mut scales = vec![1.0f64; n];
    scales[graph.input] = input_scale;
    let mut posts = vec![None; graph.ops.len()];
    for (i, op) in graph.ops.iter().enumerate() {
        match *op {
            Op::Matmul { lhs, rhs, scale, act, out, .. } => {
                let rhs_scale = match rhs {
                    Rhs::Weight(w) => weights[w].scale,
                    Rhs::Act(t) | Rhs::ActT(t) => scales[t],
                };
                let acc = scales[lhs] * rhs_scale * f64::from(scale);
                if out == graph.output && act == Fused::None {
                    scales[out] = acc;
                    continue;
                }
                let s_out = scale_of(max[out]);
                scales[out] = s_out;
                posts[i] = Some(match act {
                    Fused::None => PostOp { requant: Requant::from_real(acc / s_out)?, activation: Activation::None },
                    Fused::Relu => PostOp { requant: Requant::from_real(acc / s_out)?, activation: Activation::Relu },
                    Fused::Gelu => {
                        let s_pre = scale_of(pre_max[out]);
                        PostOp { requant: Requant::from_real(acc / s_pre)?, activation: Activation::Gelu(Lut::gelu(s_pre, s_out)) }
                    }
                });
            }
            Op::MaxPool { input, out, .. } | Op::Reshape { input, out, .. } => scales[out] = scales[input],
            Op::Softmax { out, .. } => scales[out] = PROB_SCALE,
        }
    }
    Ok(QuantizedModel { graph: graph.clone(), weights, scales, posts })
}
