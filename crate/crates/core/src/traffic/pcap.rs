use super::{RawPacket, TrafficError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC_USEC: u32 = 0xa1b2_c3d4;
const MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;

/// Reads a classic libpcap file. Both microsecond and nanosecond variants
/// are accepted in either byte order; timestamps come out in nanoseconds.
pub fn read_pcap(path: impl AsRef<Path>) -> Result<Vec<RawPacket>, TrafficError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    parse_pcap_bytes(&buf)
}

pub(crate) fn parse_pcap_bytes(buf: &[u8]) -> Result<Vec<RawPacket>, TrafficError> {
    if buf.len() < 24 {
        let mut m = [0u8; 4];
        let n = buf.len().min(4);
        m[..n].copy_from_slice(&buf[..n]);
        return Err(TrafficError::BadMagic(u32::from_le_bytes(m)));
    }
    let raw_magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let (swapped, nanos) = match raw_magic {
        MAGIC_USEC => (false, false),
        MAGIC_NSEC => (false, true),
        m if m.swap_bytes() == MAGIC_USEC => (true, false),
        m if m.swap_bytes() == MAGIC_NSEC => (true, true),
        m => return Err(TrafficError::BadMagic(m)),
    };
    let rd = |at: usize| -> u32 {
        let v = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        if swapped {
            v.swap_bytes()
        } else {
            v
        }
    };

    let mut out = Vec::new();
    let mut at = 24;
    while at < buf.len() {
        if buf.len() - at < 16 {
            return Err(truncated("record header"));
        }
        let sec = u64::from(rd(at));
        let frac = u64::from(rd(at + 4));
        let incl = rd(at + 8) as usize;
        at += 16;
        if buf.len() - at < incl {
            return Err(truncated("record body"));
        }
        let arrival_ns = sec * 1_000_000_000 + if nanos { frac } else { frac * 1000 };
        out.push(RawPacket { bytes: buf[at..at + incl].to_vec(), arrival_ns });
        at += incl;
    }
    Ok(out)
}

fn truncated(what: &str) -> TrafficError {
    TrafficError::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("pcap truncated in {what}"),
    ))
}

/// Writes a nanosecond-resolution little-endian pcap.
pub fn write_pcap(path: impl AsRef<Path>, packets: &[RawPacket]) -> Result<(), TrafficError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC_NSEC.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&4u16.to_le_bytes())?;
    w.write_all(&0i32.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&65535u32.to_le_bytes())?;
    w.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
    for p in packets {
        let sec = (p.arrival_ns / 1_000_000_000) as u32;
        let ns = (p.arrival_ns % 1_000_000_000) as u32;
        w.write_all(&sec.to_le_bytes())?;
        w.write_all(&ns.to_le_bytes())?;
        w.write_all(&(p.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&(p.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&p.bytes)?;
    }
    w.flush()?;
    Ok(())
}
