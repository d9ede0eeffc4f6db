//! Model description: an ordered layer list with real-valued parameters, the
//! manifest + weight-blob file format, and the three shipped presets.
//!
//! Activations are `rows x cols` matrices per flow (positions x channels).
//!
//! Manifest (TOML):
//!
//! ```text
//! name = "usecase1"
//! blob = "usecase1.bin"
//! [input]
//! rows = 1
//! cols = 6
//! [[layers]]
//! kind = "dense"
//! input = 6
//! output = 12
//! [[params]]
//! layer = 0
//! rows = 6
//! cols = 12
//! offset = 0        # bytes into the blob
//! ```
//!
//! The blob is the parameters' row-major values as little-endian `f32`.

use super::CompileError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActFn {
    Relu,
    Gelu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { input: usize, output: usize },
    Conv1d {
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool1d { stride: usize },
    Activation { func: ActFn },
    /// Single-head self-attention with WQ, WK, WV of `d_model x d_head`.
    Attention { seq_len: usize, d_model: usize, d_head: usize },
    Flatten,
}

impl Layer {
    /// Shapes of the parameter matrices this layer owns, in blob order.
    pub fn param_shapes(&self) -> Vec<Shape> {
        match *self {
            Layer::Dense { input, output } => vec![Shape::new(input, output)],
            Layer::Conv1d { kernel, in_ch, out_ch, .. } => vec![Shape::new(kernel * in_ch, out_ch)],
            Layer::Attention { d_model, d_head, .. } => vec![Shape::new(d_model, d_head); 3],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape, CompileError> {
        let bad = |msg: String| Err(CompileError::Shape(msg));
        match *self {
            Layer::Dense { input, output } => {
                if x.cols != input {
                    return bad(format!("dense expects {input} columns, got {}", x.cols));
                }
                Ok(Shape::new(x.rows, output))
            }
            Layer::Conv1d { kernel, in_ch, out_ch, stride, padding } => {
                if x.cols != in_ch {
                    return bad(format!("conv1d expects {in_ch} channels, got {}", x.cols));
                }
                Ok(Shape::new(conv_windows(x.rows, kernel, stride, padding)?, out_ch))
            }
            Layer::MaxPool1d { stride } => {
                if stride == 0 {
                    return bad("pool stride must be at least 1".into());
                }
                Ok(Shape::new(x.rows.div_ceil(stride), x.cols))
            }
            Layer::Activation { .. } => Ok(x),
            Layer::Attention { seq_len, d_model, d_head } => {
                if x != Shape::new(seq_len, d_model) {
                    return bad(format!("attention expects {seq_len}x{d_model}, got {}x{}", x.rows, x.cols));
                }
                Ok(Shape::new(seq_len, d_head))
            }
            Layer::Flatten => Ok(Shape::new(1, x.len())),
        }
    }
}

/// Sliding-window count `floor((len + 2p - s) / stride) + 1`.
pub fn conv_windows(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, CompileError> {
    if stride == 0 || kernel == 0 {
        return Err(CompileError::Shape("kernel and stride must be at least 1".into()));
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(CompileError::Shape(format!("input length {len} (padding {padding}) shorter than kernel {kernel}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        Shape::new(self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelIR {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<Layer>,
    /// One entry per layer, matching [`Layer::param_shapes`].
    pub params: Vec<Vec<Tensor>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    layer: usize,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    #[serde(default)]
    blob: Option<String>,
    input: Shape,
    #[serde(default)]
    layers: Vec<Layer>,
    #[serde(default)]
    params: Vec<ManifestParam>,
}

impl ModelIR {
    /// Output shape after every layer; checks that consecutive layers compose
    /// and that parameters match their layers.
    pub fn shapes(&self) -> Result<Vec<Shape>, CompileError> {
        if self.params.len() != self.layers.len() {
            return Err(CompileError::Shape(format!("{} parameter groups for {} layers", self.params.len(), self.layers.len())));
        }
        let mut x = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (layer, params)) in self.layers.iter().zip(&self.params).enumerate() {
            let want = layer.param_shapes();
            let got: Vec<Shape> = params.iter().map(Tensor::shape).collect();
            if want != got {
                return Err(CompileError::Shape(format!("layer {i}: parameters {got:?}, expected {want:?}")));
            }
            if let Some(p) = params.iter().find(|p| p.data.len() != p.rows * p.cols) {
                return Err(CompileError::Shape(format!("layer {i}: {} values for {}x{}", p.data.len(), p.rows, p.cols)));
            }
            x = layer.output_shape(x).map_err(|e| CompileError::Shape(format!("layer {i}: {e}")))?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape, CompileError> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input))
    }

    /// Manifest text plus weight blob. `blob_name` is recorded in the manifest.
    pub fn to_manifest(&self, blob_name: &str) -> Result<(String, Vec<u8>), CompileError> {
        self.shapes()?;
        let mut blob = Vec::new();
        let mut params = Vec::new();
        for (layer, group) in self.params.iter().enumerate() {
            for t in group {
                params.push(ManifestParam { layer, rows: t.rows, cols: t.cols, offset: blob.len() });
                blob.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let m = Manifest {
            name: self.name.clone(),
            blob: Some(blob_name.to_string()),
            input: self.input,
            layers: self.layers.clone(),
            params,
        };
        let text = toml::to_string(&m).map_err(|e| CompileError::Manifest(e.to_string()))?;
        Ok((text, blob))
    }

    pub fn from_manifest(text: &str, blob: &[u8]) -> Result<Self, CompileError> {
        let m: Manifest = toml::from_str(text).map_err(|e| CompileError::Manifest(e.to_string()))?;
        let mut params: Vec<Vec<Tensor>> = vec![Vec::new(); m.layers.len()];
        for p in &m.params {
            let group = params
                .get_mut(p.layer)
                .ok_or_else(|| CompileError::Manifest(format!("parameter for missing layer {}", p.layer)))?;
            let bytes = blob
                .get(p.offset..p.offset + 4 * p.rows * p.cols)
                .ok_or_else(|| CompileError::Manifest(format!("parameter at offset {} runs past the blob", p.offset)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            group.push(Tensor { rows: p.rows, cols: p.cols, data });
        }
        let ir = ModelIR { name: m.name, input: m.input, layers: m.layers, params };
        ir.shapes()?;
        Ok(ir)
    }

    /// Writes `<dir>/<name>.toml` and `<dir>/<name>.bin`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf, CompileError> {
        let blob_name = format!("{}.bin", self.name);
        let (text, blob) = self.to_manifest(&blob_name)?;
        let path = dir.join(format!("{}.toml", self.name));
        std::fs::write(&path, text)?;
        std::fs::write(dir.join(&blob_name), blob)?;
        Ok(path)
    }

    /// Reads a manifest and the blob it names (relative to the manifest).
    pub fn load(manifest: &Path) -> Result<Self, CompileError> {
        let text = std::fs::read_to_string(manifest)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| CompileError::Manifest(e.to_string()))?;
        let blob = match m.blob {
            Some(name) => std::fs::read(manifest.parent().unwrap_or(Path::new(".")).join(name))?,
            None => Vec::new(),
        };
        Self::from_manifest(&text, &blob)
    }

    /// Fills every parameter with seeded uniform values in `+-1/sqrt(fan_in)`.
    pub fn with_random_weights(name: &str, input: Shape, layers: Vec<Layer>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| {
                l.param_shapes()
                    .into_iter()
                    .map(|s| {
                        let bound = 1.0 / (s.rows as f32).sqrt();
                        let data = (0..s.len()).map(|_| rng.gen_range(-bound..=bound)).collect();
                        Tensor { rows: s.rows, cols: s.cols, data }
                    })
                    .collect()
            })
            .collect();
        ModelIR { name: name.to_string(), input, layers, params }
    }
}

/// Per-packet MLP over a 6-byte feature vector, binary output.
pub fn usecase1(seed: u64) -> ModelIR {
    let relu = Layer::Activation { func: ActFn::Relu };
    let layers = vec![
        Layer::Dense { input: 6, output: 12 },
        relu,
        Layer::Dense { input: 12, output: 6 },
        relu,
        Layer::Dense { input: 6, output: 3 },
        relu,
        Layer::Dense { input: 3, output: 2 },
    ];
    ModelIR::with_random_weights("usecase1", Shape::new(1, 6), layers, seed)
}

/// 1-D CNN over the first 20 inter-arrival times of a flow, 162 classes.
/// Padding 1 and ceil-mode pooling give task shapes (20,3), (10,96), (5,96),
/// (1,96), (1,128).
pub fn usecase2(seed: u64) -> ModelIR {
    let relu = Layer::Activation { func: ActFn::Relu };
    let conv = |in_ch| Layer::Conv1d { kernel: 3, in_ch, out_ch: 32, stride: 1, padding: 1 };
    let pool = Layer::MaxPool1d { stride: 2 };
    let layers = vec![
        conv(1),
        relu,
        pool,
        conv(32),
        relu,
        pool,
        conv(32),
        relu,
        pool,
        Layer::Flatten,
        Layer::Dense { input: 96, output: 128 },
        relu,
        Layer::Dense { input: 128, output: 162 },
    ];
    ModelIR::with_random_weights("usecase2", Shape::new(20, 1), layers, seed)
}

/// Attention block over 16 payload bytes of the first 15 packets, followed by
/// a 64-128-64 MLP.
pub fn usecase3(seed: u64) -> ModelIR {
    let layers = vec![
        Layer::Attention { seq_len: 15, d_model: 16, d_head: 64 },
        Layer::Dense { input: 64, output: 128 },
        Layer::Activation { func: ActFn::Gelu },
        Layer::Dense { input: 128, output: 64 },
    ];
    ModelIR::with_random_weights("usecase3", Shape::new(15, 16), layers, seed)
}

pub fn preset(name: &str, seed: u64) -> Option<ModelIR> {
    match name {
        "usecase1" => Some(usecase1(seed)),
        "usecase2" => Some(usecase2(seed)),
        "usecase3" => Some(usecase3(seed)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let s = usecase2(1).shapes().unwrap();
        assert_eq!(s[0], Shape::new(20, 32));
        assert_eq!(s[2], Shape::new(10, 32));
        assert_eq!(s[8], Shape::new(3, 32));
        assert_eq!(s[9], Shape::new(1, 96));
        assert_eq!(*s.last().unwrap(), Shape::new(1, 162));
        assert_eq!(usecase1(1).output_shape().unwrap(), Shape::new(1, 2));
        assert_eq!(usecase3(1).output_shape().unwrap(), Shape::new(15, 64));
    }

    #[test]
    fn manifest_round_trip() {
        let ir = usecase3(7);
        let (text, blob) = ir.to_manifest("m.bin").unwrap();
        assert_eq!(ModelIR::from_manifest(&text, &blob).unwrap(), ir);
        let dir = tempfile::tempdir().unwrap();
        let path = usecase2(3).save(dir.path()).unwrap();
        assert_eq!(ModelIR::load(&path).unwrap(), usecase2(3));
    }

    #[test]
    fn shape_errors() {
        let mut ir = usecase1(0);
        ir.layers[2] = Layer::Dense { input: 11, output: 6 };
        assert!(matches!(ir.shapes(), Err(CompileError::Shape(_))));
        assert!(conv_windows(2, 3, 1, 0).is_err());
        assert_eq!(conv_windows(2, 3, 1, 1).unwrap(), 2);
        let truncated = usecase1(0).to_manifest("b").unwrap();
        assert!(ModelIR::from_manifest(&truncated.0, &truncated.1[..10]).is_err());
    }

    #[test]
    fn empty_model() {
        let ir = ModelIR { name: "empty".into(), input: Shape::new(1, 4), layers: vec![], params: vec![] };
        assert_eq!(ir.output_shape().unwrap(), Shape::new(1, 4));
        let (text, blob) = ir.to_manifest("e.bin").unwrap();
        assert_eq!(ModelIR::from_manifest(&text, &blob).unwrap(), ir);
    }
}
