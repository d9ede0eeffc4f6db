//! VLIW instruction set and its textual assembly.
//!
//! One word per line, each field in brackets, fields in any order:
//!
//! ```text
//! [prd d3,@a1] [vadd d1,d2,d4] [ld a0,d0] [fin]
//! ```
//!
//! Operands: `dN` data register, `aN` address register, `@aN` or `@aN+K`
//! memory at the address in `aN` plus `K` words. Store modifiers follow the
//! mnemonic: no suffix keeps raw int32, `.sat` clamps to int8, `.pN` applies
//! post-op N (requantize then activate). `ld` takes an optional channel
//! (`ld a0,d0,c1`). `#` starts a comment; blank lines are skipped.

use super::VpeError;
use crate::quant::PostOp;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const DRF_SIZE: usize = 32;
pub const ADRF_SIZE: usize = 16;
pub const LANES: usize = 8;

/// Weights for one prd/prds: `w[lane][element]`. For prds, elements 0..4 feed
/// sub-lane A and 4..8 sub-lane B.
pub type ParamEntry = [[i8; LANES]; LANES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Store {
    Raw,
    Sat,
    Post(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dst {
    Reg(u8),
    Mem { areg: u8, offset: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimdKind {
    Prd,
    Prds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimdOp {
    pub kind: SimdKind,
    pub src: u8,
    pub dst: Dst,
    pub store: Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VuKind {
    Vadd,
    /// Element-wise product of the int8-saturated operands.
    Vem,
    Vmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VuOp {
    pub kind: VuKind,
    pub a: u8,
    pub b: u8,
    pub dst: Dst,
    pub store: Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MifOp {
    /// Pop the next ready record address into an address register.
    Fa { areg: u8 },
    /// Load one word as 16 int8 elements into `dreg` (0..8) and `dreg+1` (8..16).
    Ld { areg: u8, offset: u16, dreg: u8, channel: u8 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VliwWord {
    pub simd: Option<SimdOp>,
    pub vu: Option<VuOp>,
    pub mif: Option<MifOp>,
    pub fin: bool,
}

impl VliwWord {
    pub fn is_empty(&self) -> bool {
        self.simd.is_none() && self.vu.is_none() && self.mif.is_none() && !self.fin
    }
}

/// Instruction words plus the pCache parameter stream and post-op table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpeProgram {
    pub words: Vec<VliwWord>,
    /// Consumed in order, one entry per prd/prds.
    pub pcache: Vec<ParamEntry>,
    pub posts: Vec<PostOp>,
}

impl VpeProgram {
    pub fn assemble(text: &str) -> Result<Self, VpeError> {
        Ok(VpeProgram { words: assemble(text)?, ..Default::default() })
    }

    pub fn count_simd(&self, kind: SimdKind) -> usize {
        self.words.iter().filter(|w| w.simd.is_some_and(|s| s.kind == kind)).count()
    }

    pub fn count_vu(&self) -> usize {
        self.words.iter().filter(|w| w.vu.is_some()).count()
    }

    pub fn listing(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> VpeError {
    VpeError::Syntax { line, msg: msg.into() }
}

fn parse_index(tok: &str, prefix: char, limit: usize, line: usize) -> Result<u8, VpeError> {
    let rest = tok.strip_prefix(prefix).ok_or_else(|| syntax(line, format!("expected {prefix}N, got '{tok}'")))?;
    let n: usize = rest.parse().map_err(|_| syntax(line, format!("bad register '{tok}'")))?;
    if n >= limit {
        return Err(VpeError::BadIndex(format!("{tok} (limit {limit})")));
    }
    Ok(n as u8)
}

fn parse_areg_offset(tok: &str, line: usize) -> Result<(u8, u16), VpeError> {
    let (reg, off) = match tok.split_once('+') {
        Some((r, o)) => (r, o.parse().map_err(|_| syntax(line, format!("bad offset in '{tok}'")))?),
        None => (tok, 0),
    };
    Ok((parse_index(reg, 'a', ADRF_SIZE, line)?, off))
}

fn parse_dst(tok: &str, line: usize) -> Result<Dst, VpeError> {
    match tok.strip_prefix('@') {
        Some(m) => {
            let (areg, offset) = parse_areg_offset(m, line)?;
            Ok(Dst::Mem { areg, offset })
        }
        None => Ok(Dst::Reg(parse_index(tok, 'd', DRF_SIZE, line)?)),
    }
}

fn parse_store(suffix: Option<&str>, line: usize) -> Result<Store, VpeError> {
    match suffix {
        None => Ok(Store::Raw),
        Some("sat") => Ok(Store::Sat),
        Some(p) => p
            .strip_prefix('p')
            .and_then(|n| n.parse().ok())
            .map(Store::Post)
            .ok_or_else(|| syntax(line, format!("unknown modifier '.{p}'"))),
    }
}

fn parse_field(field: &str, word: &mut VliwWord, line: usize) -> Result<(), VpeError> {
    let field = field.trim();
    let (head, args) = field.split_once(char::is_whitespace).unwrap_or((field, ""));
    let args: Vec<&str> = if args.trim().is_empty() { vec![] } else { args.split(',').map(str::trim).collect() };
    let (mnemonic, suffix) = match head.split_once('.') {
        Some((m, s)) => (m, Some(s)),
        None => (head, None),
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("'{mnemonic}' takes {n} operands")))
        }
    };
    let dup = |what: &str| syntax(line, format!("two {what} fields in one word"));
    match mnemonic {
        "prd" | "prds" => {
            arity(2)?;
            if word.simd.is_some() {
                return Err(dup("SIMDU"));
            }
            word.simd = Some(SimdOp {
                kind: if mnemonic == "prd" { SimdKind::Prd } else { SimdKind::Prds },
                src: parse_index(args[0], 'd', DRF_SIZE, line)?,
                dst: parse_dst(args[1], line)?,
                store: parse_store(suffix, line)?,
            });
        }
        "vadd" | "vem" | "vmax" => {
            arity(3)?;
            if word.vu.is_some() {
                return Err(dup("VU"));
            }
            word.vu = Some(VuOp {
                kind: match mnemonic {
                    "vadd" => VuKind::Vadd,
                    "vem" => VuKind::Vem,
                    _ => VuKind::Vmax,
                },
                a: parse_index(args[0], 'd', DRF_SIZE, line)?,
                b: parse_index(args[1], 'd', DRF_SIZE, line)?,
                dst: parse_dst(args[2], line)?,
                store: parse_store(suffix, line)?,
            });
        }
        "fa" | "ld" => {
            if word.mif.is_some() {
                return Err(dup("Mif"));
            }
            if suffix.is_some() {
                return Err(syntax(line, "Mif ops take no modifier"));
            }
            word.mif = Some(if mnemonic == "fa" {
                arity(1)?;
                MifOp::Fa { areg: parse_index(args[0], 'a', ADRF_SIZE, line)? }
            } else {
                if !(2..=3).contains(&args.len()) {
                    return Err(syntax(line, "'ld' takes 2 or 3 operands"));
                }
                let (areg, offset) = parse_areg_offset(args[0], line)?;
                let channel = match args.get(2) {
                    None => 0,
                    Some(&"c0") => 0,
                    Some(&"c1") => 1,
                    Some(c) => return Err(syntax(line, format!("bad channel '{c}'"))),
                };
                MifOp::Ld { areg, offset, dreg: parse_index(args[1], 'd', DRF_SIZE, line)?, channel }
            });
        }
        "fin" => {
            arity(0)?;
            if word.fin {
                return Err(dup("ctrl"));
            }
            word.fin = true;
        }
        "nop" => arity(0)?,
        other => return Err(syntax(line, format!("unknown mnemonic '{other}'"))),
    }
    Ok(())
}

pub fn assemble(text: &str) -> Result<Vec<VliwWord>, VpeError> {
    let mut words = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let src = raw.split('#').next().unwrap_or("").trim();
        if src.is_empty() {
            continue;
        }
        let mut word = VliwWord::default();
        let mut rest = src;
        while !rest.is_empty() {
            let inner = rest.strip_prefix('[').ok_or_else(|| syntax(line, format!("expected '[' at '{rest}'")))?;
            let close = inner.find(']').ok_or_else(|| syntax(line, "unclosed '['"))?;
            parse_field(&inner[..close], &mut word, line)?;
            rest = inner[close + 1..].trim_start();
        }
        words.push(word);
    }
    Ok(words)
}

impl fmt::Display for Dst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Dst::Reg(r) => write!(f, "d{r}"),
            Dst::Mem { areg, offset: 0 } => write!(f, "@a{areg}"),
            Dst::Mem { areg, offset } => write!(f, "@a{areg}+{offset}"),
        }
    }
}

impl fmt::Display for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Store::Raw => Ok(()),
            Store::Sat => write!(f, ".sat"),
            Store::Post(i) => write!(f, ".p{i}"),
        }
    }
}

impl fmt::Display for VliwWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut fields = Vec::new();
        if let Some(s) = self.simd {
            let m = if s.kind == SimdKind::Prd { "prd" } else { "prds" };
            fields.push(format!("[{m}{} d{},{}]", s.store, s.src, s.dst));
        }
        if let Some(v) = self.vu {
            let m = match v.kind {
                VuKind::Vadd => "vadd",
                VuKind::Vem => "vem",
                VuKind::Vmax => "vmax",
            };
            fields.push(format!("[{m}{} d{},d{},{}]", v.store, v.a, v.b, v.dst));
        }
        match self.mif {
            Some(MifOp::Fa { areg }) => fields.push(format!("[fa a{areg}]")),
            Some(MifOp::Ld { areg, offset, dreg, channel }) => {
                let off = if offset == 0 { String::new() } else { format!("+{offset}") };
                let ch = if channel == 0 { String::new() } else { format!(",c{channel}") };
                fields.push(format!("[ld a{areg}{off},d{dreg}{ch}]"));
            }
            None => {}
        }
        if self.fin {
            fields.push("[fin]".into());
        }
        if fields.is_empty() {
            fields.push("[nop]".into());
        }
        write!(f, "{}", fields.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_line() {
        let w = assemble("[prd d3,@a1] [vadd d1,d2,d4] [ld a0,d0] [fin]").unwrap();
        assert_eq!(w.len(), 1);
        let w = w[0];
        assert_eq!(
            w.simd,
            Some(SimdOp { kind: SimdKind::Prd, src: 3, dst: Dst::Mem { areg: 1, offset: 0 }, store: Store::Raw })
        );
        assert_eq!(w.vu, Some(VuOp { kind: VuKind::Vadd, a: 1, b: 2, dst: Dst::Reg(4), store: Store::Raw }));
        assert_eq!(w.mif, Some(MifOp::Ld { areg: 0, offset: 0, dreg: 0, channel: 0 }));
        assert!(w.fin);
    }

    #[test]
    fn modifiers_offsets_comments() {
        let text = "# header\n\n[prds.p2 d0,@a3+4]   # tail\n[vmax.sat d1,d2,d3] [ld a1+7,d6,c1]\n[nop]\n";
        let w = assemble(text).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].simd.unwrap().store, Store::Post(2));
        assert_eq!(w[0].simd.unwrap().dst, Dst::Mem { areg: 3, offset: 4 });
        assert_eq!(w[1].mif, Some(MifOp::Ld { areg: 1, offset: 7, dreg: 6, channel: 1 }));
        assert!(w[2].is_empty());
    }

    #[test]
    fn listing_roundtrips() {
        let text = "[prds.p2 d0,@a3+4] [vem.sat d1,d2,d3] [fa a5]\n[prd d31,d0] [ld a1+7,d6,c1] [fin]\n[nop]\n";
        let p = VpeProgram::assemble(text).unwrap();
        assert_eq!(p.listing(), text);
        assert_eq!(VpeProgram::assemble(&p.listing()).unwrap(), p);
    }

    #[test]
    fn errors() {
        assert!(matches!(assemble("[prd d32,d0]"), Err(VpeError::BadIndex(_))));
        assert!(matches!(assemble("[ld a16,d0]"), Err(VpeError::BadIndex(_))));
        assert!(matches!(assemble("[prd d0,d1] [prds d2,d3]"), Err(VpeError::Syntax { line: 1, .. })));
        assert!(matches!(assemble("\n[jmp d0]"), Err(VpeError::Syntax { line: 2, .. })));
        assert!(matches!(assemble("[prd d0,d1"), Err(VpeError::Syntax { .. })));
        assert!(matches!(assemble("prd d0,d1"), Err(VpeError::Syntax { .. })));
        assert!(matches!(assemble("[prd.x d0,d1]"), Err(VpeError::Syntax { .. })));
        assert!(matches!(assemble("[vadd d0,d1]"), Err(VpeError::Syntax { .. })));
    }
}
