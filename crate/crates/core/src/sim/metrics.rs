//! Run metrics. Only counts and clocks are stored; every rate is derived from
//! them on demand.

use crate::compiler::estimate::{Architecture, PerfEstimate};
use crate::compiler::timing::TimingReport;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractorMetrics {
    pub extractor_hz: f64,
    pub packets: u64,
    pub parse_errors: u64,
    /// Cycles from the first to the last packet issue, inclusive.
    pub cycles: u64,
    pub new_flows: u64,
    pub collisions: u64,
    pub ready: u64,
    pub recycled: u64,
    pub occupancy_peak: usize,
    pub occupancy_final: usize,
    pub backpressure_stalls: u64,
}

impl ExtractorMetrics {
    pub fn mpps(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.packets as f64 * self.extractor_hz / self.cycles as f64 / 1e6
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VpeMetrics {
    pub runs: u64,
    pub cycles: u64,
    pub words: u64,
    pub simd_issues: u64,
    pub vu_issues: u64,
    pub mif_issues: u64,
    pub stall_cycles: u64,
    pub macs: u64,
}

/// Cycle model of one batch plus the engine activity of the whole run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeMetrics {
    pub compute_hz: f64,
    pub collab: bool,
    pub batches: u64,
    pub batch: TimingReport,
    pub ary_instructions: usize,
    pub vpe_jobs: usize,
    pub vpe: VpeMetrics,
}

impl ComputeMetrics {
    /// Modeled steady-state flows per second.
    pub fn flows_per_s(&self) -> f64 {
        self.batch.throughput(self.compute_hz)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EndToEndMetrics {
    pub decisions: u64,
    /// Arrival of the packet that completed the record to its decision.
    pub latency_ns_min: u64,
    pub latency_ns_max: u64,
    pub latency_ns_sum: u64,
    pub latency_ns_median: u64,
    pub first_decision_ns: u64,
    pub last_decision_ns: u64,
}

impl EndToEndMetrics {
    pub fn latency_ns_mean(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            self.latency_ns_sum as f64 / self.decisions as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub enabled: bool,
    pub inferences_checked: u64,
    pub tensors_checked: u64,
    pub records_checked: u64,
    pub first_divergence: Option<String>,
}

impl OracleMetrics {
    pub fn passed(&self) -> bool {
        self.first_divergence.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub config_hash: String,
    pub extractor: ExtractorMetrics,
    pub compute: ComputeMetrics,
    pub end_to_end: EndToEndMetrics,
    pub oracle: OracleMetrics,
    /// The same batch with collaboration toggled, for the comparison table.
    pub counterpart: Option<TimingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
enum Line {
    Run { name: String, config_hash: String },
    Extractor(ExtractorMetrics),
    Compute(ComputeMetrics),
    EndToEnd(EndToEndMetrics),
    Oracle(OracleMetrics),
    Counterpart { batch: TimingReport },
}

impl Metrics {
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![
            Line::Run { name: self.name.clone(), config_hash: self.config_hash.clone() },
            Line::Extractor(self.extractor.clone()),
            Line::Compute(self.compute.clone()),
            Line::EndToEnd(self.end_to_end.clone()),
            Line::Oracle(self.oracle.clone()),
        ];
        if let Some(c) = &self.counterpart {
            lines.push(Line::Counterpart { batch: c.clone() });
        }
        lines.iter().map(|l| serde_json::to_string(l).expect("metrics serialize") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Metrics, serde_json::Error> {
        let mut m = Metrics::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                Line::Run { name, config_hash } => {
                    m.name = name;
                    m.config_hash = config_hash;
                }
                Line::Extractor(e) => m.extractor = e,
                Line::Compute(c) => m.compute = c,
                Line::EndToEnd(e) => m.end_to_end = e,
                Line::Oracle(o) => m.oracle = o,
                Line::Counterpart { batch } => m.counterpart = Some(batch),
            }
        }
        Ok(m)
    }

    /// Human-readable summary.
    pub fn report(&self, packet_task: bool) -> String {
        let mut s = String::new();
        let e = &self.extractor;
        let c = &self.compute;
        let d = &self.end_to_end;
        let _ = writeln!(s, "run {}  config {}", self.name, self.config_hash);
        let _ = writeln!(
            s,
            "extractor: {} packets in {} cycles @ {:.0} MHz = {:.2} Mpkt/s; {} flows, {} collisions, peak occupancy {}, {} parse errors",
            e.packets,
            e.cycles,
            e.extractor_hz / 1e6,
            e.mpps(),
            e.new_flows,
            e.collisions,
            e.occupancy_peak,
            e.parse_errors
        );
        let _ = writeln!(s, "decisions: {}", d.decisions);
        if packet_task {
            let v = &c.vpe;
            let _ = writeln!(
                s,
                "vpe: {} runs, {} words ({} simd, {} vu, {} mif), {} stall cycles",
                v.runs, v.words, v.simd_issues, v.vu_issues, v.mif_issues, v.stall_cycles
            );
            let _ = writeln!(
                s,
                "latency ns: min {} median {} mean {:.1} max {}",
                d.latency_ns_min,
                d.latency_ns_median,
                d.latency_ns_mean(),
                d.latency_ns_max
            );
            let _ = writeln!(s, "\n{:<14}{:>14}{:>12}", "architecture", "delay", "scale");
            for arch in [Architecture::Vector, Architecture::Systolic] {
                let p = PerfEstimate::new(arch, 64, 8);
                let _ = writeln!(s, "{:<14}{:>14.3}{:>12}", format!("{arch:?}"), p.delay(), "m=64 n=8");
            }
        } else {
            let _ = writeln!(s, "\n{:<18}{:>10}{:>10}{:>10}{:>16}", "method", "AryPE", "VU", "SIMDU", "throughput");
            let mut rows = vec![(&c.batch, c.collab, true)];
            if let Some(other) = &self.counterpart {
                rows.push((other, !c.collab, false));
            }
            rows.sort_by_key(|&(_, collab, _)| collab);
            for &(r, collab, active) in &rows {
                let _ = writeln!(
                    s,
                    "{:<18}{:>9.1}%{:>9.1}%{:>9.1}%{:>10.1} kflow/s{}",
                    if collab { "w/ collaborating" } else { "wo/ collaborating" },
                    100.0 * r.arype_eff(),
                    100.0 * r.vu_eff(),
                    100.0 * r.simdu_eff(),
                    r.throughput(c.compute_hz) / 1e3,
                    if active { "  *" } else { "" }
                );
            }
            if let [(off, false, _), (on, true, _)] = rows[..] {
                let _ = writeln!(s, "collaboration speedup {:.2}x", on.throughput(c.compute_hz) / off.throughput(c.compute_hz));
            }
            let _ = writeln!(
                s,
                "batch of {}: period {} cycles, latency {} cycles; batches run: {}",
                c.batch.flows,
                c.batch.period(),
                c.batch.latency(),
                c.batches
            );
        }
        let o = &self.oracle;
        let status = match (&o.enabled, &o.first_divergence) {
            (false, _) => "off".to_string(),
            (true, None) => format!(
                "pass ({} inferences, {} tensors, {} records)",
                o.inferences_checked, o.tensors_checked, o.records_checked
            ),
            (true, Some(d)) => format!("FAIL: {d}"),
        };
        let _ = writeln!(s, "oracle: {status}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let m = Metrics {
            name: "x".into(),
            config_hash: "ab".into(),
            extractor: ExtractorMetrics { extractor_hz: 125e6, packets: 20_000, cycles: 20_000, ..Default::default() },
            compute: ComputeMetrics {
                compute_hz: 222e6,
                batch: TimingReport { k: 16, flows: 3, arype_cycles: 1234, arype_macs: 99, ..Default::default() },
                ..Default::default()
            },
            oracle: OracleMetrics { enabled: true, first_divergence: Some("op 3".into()), ..Default::default() },
            counterpart: Some(TimingReport { k: 16, flows: 3, arype_stall: 7, ..Default::default() }),
            ..Default::default()
        };
        let text = m.to_jsonl();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(Metrics::from_jsonl(&text).unwrap(), m);
        assert!((m.extractor.mpps() - 125.0).abs() < 1e-9);
    }
}
