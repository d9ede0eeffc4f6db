//! Whole-system simulation: compilation of a use case, the engine-backed
//! executor, the reference models and the event-driven driver.

pub mod config;
pub mod driver;
pub mod exec;
pub mod metrics;
pub mod oracle;

use crate::compiler::ir::ModelIR;
use crate::compiler::kernel::{emit_packet_kernel, PacketKernel};
use crate::compiler::lower::Graph;
use crate::compiler::quantize::{quantize_model, QuantizedModel};
use crate::compiler::schedule::{schedule, Schedule, ScheduleConfig};
use crate::compiler::timing::{timing, TimingReport};
use crate::compiler::CompileError;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct Compiled {
    pub model: QuantizedModel,
    pub schedule: Schedule,
    pub timing: TimingReport,
    /// Present when the model fits a single VLIW program.
    pub kernel: Option<PacketKernel>,
}

pub fn compile(ir: &ModelIR, cfg: &ScheduleConfig, calib: &[Vec<i8>]) -> Result<Compiled, CompileError> {
    let graph = Graph::from_ir(ir)?;
    let model = quantize_model(&graph, calib, 1.0)?;
    let sched = schedule(&graph, cfg)?;
    let timing = timing(&sched, &graph.ops, &graph.shapes);
    let kernel = emit_packet_kernel(&model).ok();
    Ok(Compiled { model, schedule: sched, timing, kernel })
}

/// Random int8 calibration vectors of `len` values in `lo..=hi`.
pub fn calibration_set(len: usize, count: usize, lo: i8, hi: i8, seed: u64) -> Vec<Vec<i8>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.gen_range(lo..=hi)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::ir::{usecase1, usecase2, usecase3};

    fn check(ir: &ModelIR, lo: i8, k: usize, collab: bool, threshold: f64) {
        let len = ir.input.len();
        let calib = calibration_set(len, 64, lo, 127, 1);
        let cfg = ScheduleConfig { k, flows: 8, collab, offload_threshold: threshold };
        let c = compile(ir, &cfg, &calib).unwrap();
        let inputs = calibration_set(len, 8, lo, 127, 2);
        let mut ex = exec::Executor::new(&c.model, &c.schedule).unwrap();
        let t = ex.run(&inputs).unwrap();
        for (x, flow) in inputs.iter().zip(&t) {
            assert_eq!(flow[c.model.graph.output], oracle::infer(&c.model, x), "{}", ir.name);
        }
    }

    #[test]
    fn preset_runs_pass_oracle() {
        for (name, text) in [
            ("usecase1", include_str!("../../../../configs/usecase1.toml")),
            ("usecase2", include_str!("../../../../configs/usecase2.toml")),
            ("usecase3", include_str!("../../../../configs/usecase3.toml")),
        ] {
            let mut cfg = config::UseCaseConfig::parse(text).unwrap();
            if let Some(s) = cfg.traffic.synthetic.as_mut() {
                s.flow_count = s.flow_count.min(40);
            }
            cfg.flows = cfg.flows.min(16);
            let out = driver::run(&cfg).unwrap();
            let m = &out.metrics;
            eprintln!("{}", m.report(cfg.granularity == config::Granularity::Packet));
            assert!(m.oracle.passed(), "{name}: {:?}", m.oracle.first_divergence);
            assert!(m.end_to_end.decisions > 0, "{name}");
            assert_eq!(m.extractor.ready, m.end_to_end.decisions, "{name}");
        }
    }

    #[test]
    fn engines_match_reference() {
        for collab in [true, false] {
            check(&usecase1(1), -128, 16, collab, 0.15);
            check(&usecase2(1), 0, 16, collab, 0.25);
            check(&usecase3(1), -128, 16, collab, 0.15);
            check(&usecase2(2), 0, 32, collab, 0.15);
        }
    }
}
