//! Packet ingestion: Ethernet/IPv4 header parsing, libpcap file I/O and a
//! seeded synthetic flow generator.

mod pcap;
mod synth;

pub use pcap::{read_pcap, write_pcap};
pub use synth::{generate_trace, Distribution, SyntheticFlowSpec};

use serde::{Deserialize, Serialize};
use std::net::Ipv4Addr;
use thiserror::Error;

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const DEFAULT_TRUNCATION: usize = 16;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_ACK: u8 = 0x10;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unsupported protocol: {0}")]
    UnsupportedProtocol(String),
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub bytes: Vec<u8>,
    pub arrival_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FiveTuple {
    /// True when the source endpoint is the lower `ip:port` of the pair.
    pub fn is_canonical(&self) -> bool {
        (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port)
    }

    /// Orientation-independent form: lower endpoint first.
    pub fn canonical(&self) -> FiveTuple {
        if self.is_canonical() {
            *self
        } else {
            self.reversed()
        }
    }

    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    /// 13 bytes, big-endian fields in declaration order.
    pub fn to_bytes(&self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0..4].copy_from_slice(&self.src_ip.to_be_bytes());
        out[4..8].copy_from_slice(&self.dst_ip.to_be_bytes());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.protocol;
        out
    }
}

impl std::fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} /{}",
            Ipv4Addr::from(self.src_ip),
            self.src_port,
            Ipv4Addr::from(self.dst_ip),
            self.dst_port,
            self.protocol
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn bit(self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedHeader {
    pub tuple: FiveTuple,
    pub pkt_size: u32,
    pub flags: u8,
    /// Orientation relative to the canonical tuple. The extractor re-maps
    /// this against the first-seen orientation stored in the flow slot.
    pub direction: Direction,
    pub arrival_ns: u64,
    pub payload_prefix: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseConfig {
    pub truncation: usize,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig { truncation: DEFAULT_TRUNCATION }
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an Ethernet II / IPv4 frame carrying TCP, UDP or ICMP.
pub fn parse_packet(pkt: &RawPacket, cfg: &ParseConfig) -> Result<ParsedHeader, TrafficError> {
    let b = &pkt.bytes;
    if b.len() < ETH_HEADER_LEN + IPV4_MIN_HEADER_LEN {
        return Err(TrafficError::MalformedFrame(format!(
            "{} bytes is too short for an IPv4 header",
            b.len()
        )));
    }
    let ethertype = be16(b, 12);
    if ethertype != 0x0800 {
        return Err(TrafficError::UnsupportedProtocol(format!("ethertype {ethertype:#06x}")));
    }
    let ip = &b[ETH_HEADER_LEN..];
    if ip[0] >> 4 != 4 {
        return Err(TrafficError::UnsupportedProtocol(format!("ip version {}", ip[0] >> 4)));
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < IPV4_MIN_HEADER_LEN || ip.len() < ihl {
        return Err(TrafficError::MalformedFrame(format!("bad ihl {ihl}")));
    }
    let total_len = usize::from(be16(ip, 2)).clamp(ihl, ip.len());
    let protocol = ip[9];
    let src_ip = be32(ip, 12);
    let dst_ip = be32(ip, 16);
    let l4 = &ip[ihl..total_len];

    let (src_port, dst_port, flags, l4_header_len) = match protocol {
        PROTO_TCP => {
            if l4.len() < 20 {
                return Err(TrafficError::MalformedFrame("truncated tcp header".into()));
            }
            let data_off = usize::from(l4[12] >> 4) * 4;
            (be16(l4, 0), be16(l4, 2), l4[13], data_off.clamp(20, l4.len()))
        }
        PROTO_UDP => {
            if l4.len() < 8 {
                return Err(TrafficError::MalformedFrame("truncated udp header".into()));
            }
            (be16(l4, 0), be16(l4, 2), 0, 8)
        }
        PROTO_ICMP => {
            if l4.len() < 8 {
                return Err(TrafficError::MalformedFrame("truncated icmp header".into()));
            }
            // ICMP has no ports; the type byte stands in for the flag field.
            (0, 0, l4[0], 8)
        }
        other => return Err(TrafficError::UnsupportedProtocol(format!("ip protocol {other}"))),
    };

    let tuple = FiveTuple { src_ip, dst_ip, src_port, dst_port, protocol };
    let payload = &l4[l4_header_len..];
    let mut payload_prefix = vec![0u8; cfg.truncation];
    let n = payload.len().min(cfg.truncation);
    payload_prefix[..n].copy_from_slice(&payload[..n]);

    Ok(ParsedHeader {
        tuple,
        pkt_size: b.len() as u32,
        flags,
        direction: if tuple.is_canonical() { Direction::Forward } else { Direction::Backward },
        arrival_ns: pkt.arrival_ns,
        payload_prefix,
    })
}

/// Builds a minimal Ethernet/IPv4 frame. `frame_len` pads the payload with
/// zeros when it is larger than headers + payload.
pub fn craft_frame(tuple: &FiveTuple, flags: u8, payload: &[u8], frame_len: usize) -> Vec<u8> {
    let l4_len = match tuple.protocol {
        PROTO_TCP => 20,
        _ => 8,
    };
    let min_len = ETH_HEADER_LEN + IPV4_MIN_HEADER_LEN + l4_len + payload.len();
    let len = frame_len.max(min_len);
    let mut f = vec![0u8; len];
    f[0..6].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
    f[6..12].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    f[12..14].copy_from_slice(&0x0800u16.to_be_bytes());
    let ip_len = (len - ETH_HEADER_LEN) as u16;
    {
        let ip = &mut f[ETH_HEADER_LEN..];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&ip_len.to_be_bytes());
        ip[8] = 64;
        ip[9] = tuple.protocol;
        ip[12..16].copy_from_slice(&tuple.src_ip.to_be_bytes());
        ip[16..20].copy_from_slice(&tuple.dst_ip.to_be_bytes());
    }
    let l4_at = ETH_HEADER_LEN + IPV4_MIN_HEADER_LEN;
    {
        let l4 = &mut f[l4_at..];
        match tuple.protocol {
            PROTO_TCP => {
                l4[0..2].copy_from_slice(&tuple.src_port.to_be_bytes());
                l4[2..4].copy_from_slice(&tuple.dst_port.to_be_bytes());
                l4[12] = 5 << 4;
                l4[13] = flags;
                l4[14..16].copy_from_slice(&64240u16.to_be_bytes());
            }
            PROTO_UDP => {
                l4[0..2].copy_from_slice(&tuple.src_port.to_be_bytes());
                l4[2..4].copy_from_slice(&tuple.dst_port.to_be_bytes());
                let udp_len = (len - l4_at) as u16;
                l4[4..6].copy_from_slice(&udp_len.to_be_bytes());
            }
            _ => {
                l4[0] = flags;
            }
        }
    }
    let p_at = l4_at + l4_len;
    f[p_at..p_at + payload.len()].copy_from_slice(payload);
    f
}
