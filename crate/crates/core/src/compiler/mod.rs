//! Model compiler: lowering, int8 quantization, K-dimension tiling, engine
//! placement, program emission and the analytic timing model.

pub mod estimate;
pub mod ir;
pub mod kernel;
pub mod lower;
pub mod quantize;
pub mod schedule;
pub mod tiling;
pub mod timing;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("{what} needs {need} entries but only {have} fit")]
    Capacity { what: String, need: usize, have: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
