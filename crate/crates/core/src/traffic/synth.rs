use super::{craft_frame, FiveTuple, RawPacket, TrafficError, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_FIN, TCP_SYN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

const MIN_FRAME: u64 = 64;
const MAX_FRAME: u64 = 1514;

/// Integer-valued sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Constant { value: u64 },
    Uniform { lo: u64, hi: u64 },
    Exponential { mean: f64 },
}

impl Distribution {
    fn validate(&self, what: &str) -> Result<(), TrafficError> {
        let ok = match *self {
            Distribution::Constant { .. } => true,
            Distribution::Uniform { lo, hi } => lo <= hi,
            Distribution::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TrafficError::InvalidSpec(format!("{what}: {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            Distribution::Exponential { mean } => {
                let u: f64 = rng.gen();
                (-mean * (1.0 - u).ln()).round() as u64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFlowSpec {
    pub flow_count: usize,
    pub packets_per_flow: usize,
    #[serde(default = "default_sizes")]
    pub size_distribution: Distribution,
    /// Inter-arrival time in nanoseconds; samples below 1 ns are raised to 1.
    #[serde(default = "default_intervals")]
    pub interval_distribution: Distribution,
    /// Window over which flow start times are spread, ns.
    #[serde(default = "default_start_window")]
    pub start_window_ns: u64,
    /// Probability that a non-initial packet travels in the reverse direction.
    #[serde(default)]
    pub backward_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sizes() -> Distribution {
    Distribution::Uniform { lo: 64, hi: 1500 }
}

fn default_intervals() -> Distribution {
    Distribution::Exponential { mean: 50_000.0 }
}

fn default_start_window() -> u64 {
    1_000_000
}

impl SyntheticFlowSpec {
    pub fn new(flow_count: usize, packets_per_flow: usize, seed: u64) -> Self {
        SyntheticFlowSpec {
            flow_count,
            packets_per_flow,
            size_distribution: default_sizes(),
            interval_distribution: default_intervals(),
            start_window_ns: default_start_window(),
            backward_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.flow_count == 0 || self.packets_per_flow == 0 {
            return Err(TrafficError::InvalidSpec("flow_count and packets_per_flow must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.backward_fraction) {
            return Err(TrafficError::InvalidSpec("backward_fraction outside [0, 1]".into()));
        }
        self.size_distribution.validate("size_distribution")?;
        self.interval_distribution.validate("interval_distribution")
    }
}

/// Generates `flow_count` interleaved flows of exactly `packets_per_flow`
/// packets each. Output is sorted by arrival time and is a pure function of
/// the spec (including its seed).
pub fn generate_trace(spec: &SyntheticFlowSpec) -> Result<Vec<RawPacket>, TrafficError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut seen = HashSet::with_capacity(spec.flow_count);
    let mut tuples = Vec::with_capacity(spec.flow_count);
    while tuples.len() < spec.flow_count {
        let t = FiveTuple {
            src_ip: 0x0a00_0000 | rng.gen_range(1..0x00ff_ffff),
            dst_ip: 0xc0a8_0000 | rng.gen_range(1..0xffff),
            src_port: rng.gen_range(1024..=65535),
            dst_port: [80u16, 443, 53, 22, 8080][rng.gen_range(0..5)],
            protocol: if rng.gen_bool(0.8) { PROTO_TCP } else { PROTO_UDP },
        };
        if seen.insert(t.canonical()) {
            tuples.push(t);
        }
    }

    // (arrival, flow, seq, frame)
    let mut events: Vec<(u64, usize, usize, Vec<u8>)> =
        Vec::with_capacity(spec.flow_count * spec.packets_per_flow);
    for (flow, tuple) in tuples.iter().enumerate() {
        let mut ts = rng.gen_range(0..=spec.start_window_ns);
        for seq in 0..spec.packets_per_flow {
            if seq > 0 {
                ts += spec.interval_distribution.sample(&mut rng).max(1);
            }
            let size = spec.size_distribution.sample(&mut rng).clamp(MIN_FRAME, MAX_FRAME) as usize;
            let backward = seq > 0 && rng.gen_bool(spec.backward_fraction);
            let t = if backward { tuple.reversed() } else { *tuple };
            let flags = if seq == 0 {
                TCP_SYN
            } else if seq + 1 == spec.packets_per_flow {
                TCP_FIN | TCP_ACK
            } else {
                TCP_ACK
            };
            let header_len = if t.protocol == PROTO_TCP { 54 } else { 42 };
            let payload: Vec<u8> = (0..size.saturating_sub(header_len)).map(|_| rng.gen()).collect();
            events.push((ts, flow, seq, craft_frame(&t, flags, &payload, size)));
        }
    }
    events.sort_by_key(|e| (e.0, e.1, e.2));
    Ok(events.into_iter().map(|(arrival_ns, _, _, bytes)| RawPacket { bytes, arrival_ns }).collect())
}
