pub mod arype;
pub mod compiler;
pub mod controller;
pub mod extractor;
pub mod fabric;
pub mod quant;
pub mod sim;
pub mod traffic;
pub mod vpe;
