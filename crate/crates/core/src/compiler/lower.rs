//! Lowering a [`ModelIR`] to a per-flow tensor graph of matmuls and
//! element-wise ops, plus the float forward pass used for calibration.

use super::ir::{conv_windows, ActFn, Layer, ModelIR, Shape, Tensor};
use super::CompileError;
use serde::{Deserialize, Serialize};

pub type TensorId = usize;

/// Sliding-window unrolling applied to a matmul's left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Im2col {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rhs {
    /// Index into [`Graph::weights`].
    Weight(usize),
    /// Another per-flow tensor, as stored.
    Act(TensorId),
    /// Another per-flow tensor, transposed.
    ActT(TensorId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fused {
    None,
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Matmul {
        layer: usize,
        lhs: TensorId,
        im2col: Option<Im2col>,
        rhs: Rhs,
        /// Real factor folded into the product (1/sqrt(d) for attention scores).
        scale: f32,
        act: Fused,
        out: TensorId,
    },
    MaxPool { layer: usize, input: TensorId, stride: usize, out: TensorId },
    /// Row-major reshape; no data movement.
    Reshape { layer: usize, input: TensorId, out: TensorId },
    /// Row-wise softmax.
    Softmax { layer: usize, input: TensorId, out: TensorId },
}

impl Op {
    pub fn out(&self) -> TensorId {
        match *self {
            Op::Matmul { out, .. } | Op::MaxPool { out, .. } | Op::Reshape { out, .. } | Op::Softmax { out, .. } => out,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            Op::Matmul { layer, .. } | Op::MaxPool { layer, .. } | Op::Reshape { layer, .. } | Op::Softmax { layer, .. } => layer,
        }
    }
}

/// One matrix multiplication `(m, k_dim) x (k_dim, n)` per flow.
/// `batched` tasks share their right operand across flows, so the rows of all
/// flows stream as one `(m * f, k_dim)` matrix; the others run once per flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatmulTask {
    pub op: usize,
    pub layer: usize,
    pub m: usize,
    pub k_dim: usize,
    pub n: usize,
    pub batched: bool,
    pub flows: usize,
}

impl MatmulTask {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.k_dim, self.n)
    }

    /// Rows per instance: `m * f` when batched, `m` otherwise.
    pub fn stream_rows(&self) -> usize {
        if self.batched {
            self.m * self.flows
        } else {
            self.m
        }
    }

    pub fn instances(&self) -> usize {
        if self.batched {
            1
        } else {
            self.flows
        }
    }

    pub fn macs(&self) -> u64 {
        (self.m * self.k_dim * self.n * self.flows) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub shapes: Vec<Shape>,
    pub ops: Vec<Op>,
    pub weights: Vec<Tensor>,
    pub input: TensorId,
    pub output: TensorId,
}

impl Graph {
    pub fn from_ir(ir: &ModelIR) -> Result<Graph, CompileError> {
        let layer_shapes = ir.shapes()?;
        let mut g = Graph { shapes: vec![ir.input], ops: Vec::new(), weights: Vec::new(), input: 0, output: 0 };
        let mut cur = 0;
        for (li, layer) in ir.layers.iter().enumerate() {
            let out_shape = layer_shapes[li];
            match *layer {
                Layer::Dense { .. } => {
                    let w = g.push_weight(&ir.params[li][0]);
                    cur = g.matmul(li, cur, None, Rhs::Weight(w), 1.0, out_shape);
                }
                Layer::Conv1d { kernel, stride, padding, .. } => {
                    let w = g.push_weight(&ir.params[li][0]);
                    cur = g.matmul(li, cur, Some(Im2col { kernel, stride, padding }), Rhs::Weight(w), 1.0, out_shape);
                }
                Layer::MaxPool1d { stride } => {
                    let out = g.tensor(out_shape);
                    g.ops.push(Op::MaxPool { layer: li, input: cur, stride, out });
                    cur = out;
                }
                Layer::Flatten => {
                    let out = g.tensor(out_shape);
                    g.ops.push(Op::Reshape { layer: li, input: cur, out });
                    cur = out;
                }
                Layer::Activation { func: ActFn::Softmax } => {
                    let out = g.tensor(out_shape);
                    g.ops.push(Op::Softmax { layer: li, input: cur, out });
                    cur = out;
                }
                Layer::Activation { func } => {
                    let fused = if func == ActFn::Relu { Fused::Relu } else { Fused::Gelu };
                    match g.ops.last_mut() {
                        Some(Op::Matmul { act: act @ Fused::None, out, .. }) if *out == cur => *act = fused,
                        _ => return Err(CompileError::UnsupportedLayer(format!("layer {li}: activation must follow a matmul"))),
                    }
                }
                Layer::Attention { seq_len, d_head, .. } => {
                    let proj = Shape::new(seq_len, d_head);
                    let [q, k, v] = [0, 1, 2].map(|i| {
                        let w = g.push_weight(&ir.params[li][i]);
                        g.matmul(li, cur, None, Rhs::Weight(w), 1.0, proj)
                    });
                    let s = g.matmul(li, q, None, Rhs::ActT(k), 1.0 / (d_head as f32).sqrt(), Shape::new(seq_len, seq_len));
                    let p = g.tensor(Shape::new(seq_len, seq_len));
                    g.ops.push(Op::Softmax { layer: li, input: s, out: p });
                    cur = g.matmul(li, p, None, Rhs::Act(v), 1.0, proj);
                }
            }
        }
        g.output = cur;
        Ok(g)
    }

    fn tensor(&mut self, s: Shape) -> TensorId {
        self.shapes.push(s);
        self.shapes.len() - 1
    }

    fn push_weight(&mut self, t: &Tensor) -> usize {
        self.weights.push(t.clone());
        self.weights.len() - 1
    }

    fn matmul(&mut self, layer: usize, lhs: TensorId, im2col: Option<Im2col>, rhs: Rhs, scale: f32, out: Shape) -> TensorId {
        let out = self.tensor(out);
        self.ops.push(Op::Matmul { layer, lhs, im2col, rhs, scale, act: Fused::None, out });
        out
    }

    /// `(rows, k_dim)` of a matmul's left operand after unrolling.
    pub fn lhs_dims(&self, lhs: TensorId, im2col: Option<Im2col>) -> (usize, usize) {
        let s = self.shapes[lhs];
        match im2col {
            Some(c) => (conv_windows(s.rows, c.kernel, c.stride, c.padding).expect("validated"), c.kernel * s.cols),
            None => (s.rows, s.cols),
        }
    }

    pub fn rhs_dims(&self, rhs: Rhs) -> (usize, usize) {
        match rhs {
            Rhs::Weight(w) => (self.weights[w].rows, self.weights[w].cols),
            Rhs::Act(t) => (self.shapes[t].rows, self.shapes[t].cols),
            Rhs::ActT(t) => (self.shapes[t].cols, self.shapes[t].rows),
        }
    }

    pub fn tasks(&self, flows: usize) -> Vec<MatmulTask> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match *op {
                Op::Matmul { layer, lhs, im2col, rhs, .. } => {
                    let (m, k_dim) = self.lhs_dims(lhs, im2col);
                    let n = self.rhs_dims(rhs).1;
                    Some(MatmulTask { op: i, layer, m, k_dim, n, batched: matches!(rhs, Rhs::Weight(_)), flows })
                }
                _ => None,
            })
            .collect()
    }

    /// Float forward pass; returns every tensor.
    pub fn forward_f32(&self, input: &[f32]) -> Vec<Vec<f32>> {
        self.forward_f32_traced(input).0
    }

    /// Float forward pass; also returns each fused-activation matmul's
    /// pre-activation values, indexed by output tensor (empty otherwise).
    pub fn forward_f32_traced(&self, input: &[f32]) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut t: Vec<Vec<f32>> = vec![Vec::new(); self.shapes.len()];
        let mut pre: Vec<Vec<f32>> = vec![Vec::new(); self.shapes.len()];
        t[self.input] = input.to_vec();
        for op in &self.ops {
            let v = match *op {
                Op::Matmul { lhs, im2col, rhs, scale, act, .. } => {
                    let a = match im2col {
                        Some(c) => img2col(&t[lhs], self.shapes[lhs], c),
                        None => t[lhs].clone(),
                    };
                    let (m, k) = self.lhs_dims(lhs, im2col);
                    let n = self.rhs_dims(rhs).1;
                    let b = match rhs {
                        Rhs::Weight(w) => self.weights[w].data.clone(),
                        Rhs::Act(id) => t[id].clone(),
                        Rhs::ActT(id) => transpose(&t[id], self.shapes[id]),
                    };
                    let mut y = vec![0f32; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            y[r * n + c] = (0..k).map(|i| a[r * k + i] * b[i * n + c]).sum::<f32>() * scale;
                        }
                    }
                    if act == Fused::None {
                        y
                    } else {
                        let out = y.iter().map(|&v| apply_f32(v, act)).collect();
                        pre[op.out()] = y;
                        out
                    }
                }
                Op::MaxPool { input, stride, .. } => {
                    let s = self.shapes[input];
                    let mut y = vec![f32::NEG_INFINITY; s.rows.div_ceil(stride) * s.cols];
                    for r in 0..s.rows {
                        for c in 0..s.cols {
                            let o = &mut y[(r / stride) * s.cols + c];
                            *o = o.max(t[input][r * s.cols + c]);
                        }
                    }
                    y
                }
                Op::Reshape { input, .. } => t[input].clone(),
                Op::Softmax { input, .. } => {
                    let s = self.shapes[input];
                    t[input]
                        .chunks(s.cols)
                        .flat_map(|row| {
                            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                            let e: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
                            let sum: f32 = e.iter().sum();
                            e.into_iter().map(move |v| v / sum)
                        })
                        .collect()
                }
            };
            t[op.out()] = v;
        }
        (t, pre)
    }
}

fn apply_f32(v: f32, act: Fused) -> f32 {
    match act {
        Fused::None => v,
        Fused::Relu => v.max(0.0),
        Fused::Gelu => {
            let x = f64::from(v);
            (0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())) as f32
        }
    }
}

pub fn transpose<T: Copy>(x: &[T], s: Shape) -> Vec<T> {
    (0..s.cols).flat_map(|c| (0..s.rows).map(move |r| x[r * s.cols + c])).collect()
}

/// Unrolls a `len x ic` map into `w x (s * ic)` window rows. Row `t` holds
/// input rows `t*stride - padding ..` in order, channels innermost; rows
/// outside the input read as zero.
pub fn img2col<T: Copy + Default>(x: &[T], s: Shape, c: Im2col) -> Vec<T> {
    let w = conv_windows(s.rows, c.kernel, c.stride, c.padding).expect("validated");
    let mut out = Vec::with_capacity(w * c.kernel * s.cols);
    for t in 0..w {
        for j in 0..c.kernel {
            let pos = (t * c.stride + j) as isize - c.padding as isize;
            if pos >= 0 && (pos as usize) < s.rows {
                out.extend_from_slice(&x[pos as usize * s.cols..(pos as usize + 1) * s.cols]);
            } else {
                out.extend(std::iter::repeat_n(T::default(), s.cols));
            }
        }
    }
    out
}

/// The matmul task of a Conv1D layer over `input_length` positions for `f`
/// flows: `(w * f, ic * s) x (ic * s, oc)`.
pub fn img2col_1d(layer: &Layer, input_length: usize, f: usize) -> Result<MatmulTask, CompileError> {
    match *layer {
        Layer::Conv1d { kernel, in_ch, out_ch, stride, padding } => {
            let w = conv_windows(input_length, kernel, stride, padding)?;
            Ok(MatmulTask { op: 0, layer: 0, m: w, k_dim: in_ch * kernel, n: out_ch, batched: true, flows: f })
        }
        other => Err(CompileError::UnsupportedLayer(format!("img2col of {other:?}"))),
    }
}

/// Matmul tasks of a model for `f` flows, in execution order.
pub fn lower_model(ir: &ModelIR, f: usize) -> Result<Vec<MatmulTask>, CompileError> {
    Ok(Graph::from_ir(ir)?.tasks(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::ir::{usecase1, usecase2, usecase3};
    use proptest::prelude::*;

    fn conv(in_ch: usize, out_ch: usize, padding: usize) -> Layer {
        Layer::Conv1d { kernel: 3, in_ch, out_ch, stride: 1, padding }
    }

    #[test]
    fn img2col_shapes() {
        let t = img2col_1d(&conv(2, 4, 0), 10, 1).unwrap();
        assert_eq!((t.stream_rows(), t.k_dim), (8, 6));
        // no-padding form of the first CNN layer
        assert_eq!(img2col_1d(&conv(1, 32, 0), 20, 1).unwrap().dims(), (18, 3, 32));
        assert_eq!(img2col_1d(&conv(1, 32, 1), 20, 1000).unwrap().stream_rows(), 20_000);
        assert!(img2col_1d(&conv(1, 32, 0), 2, 1).is_err());
        assert!(img2col_1d(&Layer::Flatten, 2, 1).is_err());
    }

    #[test]
    fn img2col_unit_kernel_is_identity() {
        let x: Vec<i32> = (0..7).collect();
        let c = Im2col { kernel: 1, stride: 1, padding: 0 };
        assert_eq!(img2col(&x, Shape::new(7, 1), c), x);
    }

    #[test]
    fn usecase_task_shapes() {
        let dims = |ir| lower_model(&ir, 1).unwrap().iter().map(MatmulTask::dims).collect::<Vec<_>>();
        assert_eq!(dims(usecase1(0)), vec![(1, 6, 12), (1, 12, 6), (1, 6, 3), (1, 3, 2)]);
        assert_eq!(dims(usecase2(0)), vec![(20, 3, 32), (10, 96, 32), (5, 96, 32), (1, 96, 128), (1, 128, 162)]);
        assert_eq!(
            dims(usecase3(0)),
            vec![(15, 16, 64), (15, 16, 64), (15, 16, 64), (15, 64, 15), (15, 15, 64), (15, 64, 128), (15, 128, 64)]
        );
        let empty = ModelIR { name: "e".into(), input: Shape::new(1, 3), layers: vec![], params: vec![] };
        assert!(lower_model(&empty, 1).unwrap().is_empty());
    }

    #[test]
    fn activation_without_matmul_is_rejected() {
        let ir = ModelIR::with_random_weights(
            "bad",
            Shape::new(4, 2),
            vec![Layer::MaxPool1d { stride: 2 }, Layer::Activation { func: ActFn::Relu }],
            0,
        );
        assert!(matches!(Graph::from_ir(&ir), Err(CompileError::UnsupportedLayer(_))));
    }

    proptest! {
        // img2col followed by a matmul equals a direct sliding-window convolution
        #[test]
        fn conv_as_matmul(
            len in 1usize..24, ic in 1usize..4, oc in 1usize..5, kernel in 1usize..5,
            stride in 1usize..3, padding in 0usize..2, seed in any::<u64>()
        ) {
            prop_assume!(len + 2 * padding >= kernel);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<i32> = (0..len * ic).map(|_| rng.gen_range(-128..128)).collect();
            let w: Vec<i32> = (0..kernel * ic * oc).map(|_| rng.gen_range(-128..128)).collect();
            let c = Im2col { kernel, stride, padding };
            let rows = conv_windows(len, kernel, stride, padding).unwrap();
            let a = img2col(&x, Shape::new(len, ic), c);
            for t in 0..rows {
                for o in 0..oc {
                    let via_matmul: i32 = (0..kernel * ic).map(|i| a[t * kernel * ic + i] * w[i * oc + o]).sum();
                    let mut direct = 0;
                    for j in 0..kernel {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos < 0 || pos as usize >= len {
                            continue;
                        }
                        for ch in 0..ic {
                            direct += x[pos as usize * ic + ch] * w[(j * ic + ch) * oc + o];
                        }
                    }
                    prop_assert_eq!(via_matmul, direct);
                }
            }
        }
    }
}
