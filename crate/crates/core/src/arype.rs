//! Weight-stationary k x k systolic array.
//!
//! `LD` shifts a weight tile in column by column (k cycles). `MM` streams `l`
//! activation rows through the loaded tile; with skewed inputs the last result
//! leaves the array after `l + 2k - 1` cycles. Tiles smaller than k x k occupy
//! the top-left corner and the remaining cells hold zero and count as idle.

use crate::fabric::{Address, Fabric, FabricError, WORD_BYTES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K: usize = 16;
pub const ADRF_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum AryError {
    #[error("bad address: {0}")]
    BadAddress(String),
    #[error("stream width {a} exceeds array dimension {k}")]
    StreamTooWide { a: usize, k: usize },
    #[error("tile {rows}x{cols} does not fit a {k}x{k} array")]
    TileTooLarge { rows: usize, cols: usize, k: usize },
    #[error("MM before any LD")]
    NoWeights,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub k: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig { k: DEFAULT_K }
    }
}

/// `rows x cols` int8 weights, row-major. Rows index the reduction dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl WeightTile {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self, AryError> {
        if data.len() != rows * cols {
            return Err(AryError::Shape(format!("{} values for a {rows}x{cols} tile", data.len())));
        }
        Ok(WeightTile { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let data = (0..n * n).map(|i| i8::from(i / n == i % n)).collect();
        WeightTile { rows: n, cols: n, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AryInstr {
    Ld { p: u8 },
    Mm { l: u32, src: u8, dst: u8 },
}

/// Cost model for one LD.
pub fn ld_cycles(k: usize) -> u64 {
    k as u64
}

/// Cost model for one MM streaming `l` rows.
pub fn mm_cycles(l: u64, k: usize) -> u64 {
    l + 2 * k as u64 - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrUtil {
    pub instr: AryInstr,
    pub cycles: u64,
    pub active_mac_cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationRecord {
    pub active_mac_cycles: u64,
    pub total_mac_cycles: u64,
    pub cycles: u64,
    pub per_instr: Vec<InstrUtil>,
}

impl UtilizationRecord {
    pub fn utilization(&self) -> f64 {
        if self.total_mac_cycles == 0 {
            0.0
        } else {
            self.active_mac_cycles as f64 / self.total_mac_cycles as f64
        }
    }

    fn push(&mut self, k: usize, u: InstrUtil) {
        self.cycles += u.cycles;
        self.active_mac_cycles += u.active_mac_cycles;
        self.total_mac_cycles += (k * k) as u64 * u.cycles;
        self.per_instr.push(u);
    }
}

/// Values an AryPE address register can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AryReg {
    /// Index of a weight tile in the parameter cache.
    Tile(usize),
    /// Row-major operand in the fabric: int8 source rows or int32 result rows,
    /// each row starting on a word boundary.
    Mem(Address),
}

#[derive(Debug, Clone)]
pub struct Arype {
    cfg: ArrayConfig,
    /// k x k cells, row-major; dead cells are zero.
    cells: Vec<i8>,
    loaded: Option<(usize, usize)>,
    pub adrf: [Option<AryReg>; ADRF_SIZE],
    pub util: UtilizationRecord,
}

impl Arype {
    pub fn new(cfg: ArrayConfig) -> Result<Self, AryError> {
        if cfg.k == 0 {
            return Err(AryError::Shape("k must be at least 1".into()));
        }
        Ok(Arype {
            cells: vec![0; cfg.k * cfg.k],
            cfg,
            loaded: None,
            adrf: [None; ADRF_SIZE],
            util: UtilizationRecord::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn cells(&self) -> &[i8] {
        &self.cells
    }

    /// Number of cells holding live weights.
    pub fn active_cells(&self) -> usize {
        self.loaded.map_or(0, |(r, c)| r * c)
    }

    pub fn ld_weights(&mut self, tile: &WeightTile) -> Result<u64, AryError> {
        let k = self.cfg.k;
        if tile.rows > k || tile.cols > k {
            return Err(AryError::TileTooLarge { rows: tile.rows, cols: tile.cols, k });
        }
        self.cells.fill(0);
        for r in 0..tile.rows {
            self.cells[r * k..r * k + tile.cols].copy_from_slice(&tile.data[r * tile.cols..(r + 1) * tile.cols]);
        }
        self.loaded = Some((tile.rows, tile.cols));
        Ok(ld_cycles(k))
    }

    fn check_stream(&self, x: &[i8], a: usize) -> Result<(usize, usize, usize), AryError> {
        let k = self.cfg.k;
        if a > k {
            return Err(AryError::StreamTooWide { a, k });
        }
        let (rows, cols) = self.loaded.ok_or(AryError::NoWeights)?;
        if a != rows {
            return Err(AryError::Shape(format!("stream width {a} but tile has {rows} rows")));
        }
        if a == 0 || !x.len().is_multiple_of(a) {
            return Err(AryError::Shape(format!("{} values are not rows of width {a}", x.len())));
        }
        Ok((x.len() / a, rows, cols))
    }

    fn product(&self, x: &[i8], a: usize) -> Result<(Vec<i32>, InstrUtil), AryError> {
        let (l, rows, cols) = self.check_stream(x, a)?;
        let k = self.cfg.k;
        let mut out = vec![0i32; l * cols];
        for r in 0..l {
            for i in 0..rows {
                let xv = i32::from(x[r * a + i]);
                if xv == 0 {
                    continue;
                }
                for j in 0..cols {
                    out[r * cols + j] += xv * i32::from(self.cells[i * k + j]);
                }
            }
        }
        let util = InstrUtil {
            instr: AryInstr::Mm { l: l as u32, src: 0, dst: 0 },
            cycles: mm_cycles(l as u64, k),
            active_mac_cycles: (rows * cols * l) as u64,
        };
        Ok((out, util))
    }

    /// Streams `x` (`l x a` int8, row-major) through the array. Returns the
    /// `l x b` int32 products and the cycle cost, and records utilization.
    pub fn mm(&mut self, x: &[i8], a: usize) -> Result<(Vec<i32>, u64), AryError> {
        let (out, u) = self.product(x, a)?;
        self.util.push(self.cfg.k, u);
        Ok((out, u.cycles))
    }

    /// Register-level simulation of the same stream: activations move right,
    /// partial sums move down, input row `r` enters array row `i` at cycle
    /// `r + i`. Returns the products, the cycle count and the number of
    /// (cell, cycle) pairs that performed a MAC with a live weight.
    pub fn mm_systolic(&self, x: &[i8], a: usize) -> Result<(Vec<i32>, u64, u64), AryError> {
        let (l, rows, cols) = self.check_stream(x, a)?;
        let k = self.cfg.k;
        let mut act: Vec<Option<(usize, i32)>> = vec![None; k * k];
        let mut psum: Vec<Option<(usize, i32)>> = vec![None; k * k];
        let mut out = vec![0i32; l * cols];
        let mut active = 0u64;
        let mut cycle = 0u64;
        let mut emitted = 0usize;
        while emitted < l * k {
            let mut next_act = vec![None; k * k];
            let mut next_psum = vec![None; k * k];
            for i in 0..k {
                for j in 0..k {
                    let incoming = if j == 0 {
                        let r = cycle as i64 - i as i64;
                        (0..l as i64).contains(&r).then(|| {
                            let r = r as usize;
                            (r, if i < a { i32::from(x[r * a + i]) } else { 0 })
                        })
                    } else {
                        act[i * k + j - 1]
                    };
                    let Some((r, xv)) = incoming else { continue };
                    let above = if i == 0 { 0 } else { psum[(i - 1) * k + j].map_or(0, |p| p.1) };
                    let w = i32::from(self.cells[i * k + j]);
                    if i < rows && j < cols {
                        active += 1;
                    }
                    next_act[i * k + j] = Some((r, xv));
                    next_psum[i * k + j] = Some((r, above + xv * w));
                }
            }
            for j in 0..k {
                if let Some((r, v)) = next_psum[(k - 1) * k + j] {
                    if j < cols {
                        out[r * cols + j] = v;
                    }
                    emitted += 1;
                }
            }
            act = next_act;
            psum = next_psum;
            cycle += 1;
        }
        // One more cycle latches the bottom-edge sums into the output buffer.
        Ok((out, cycle + 1, active))
    }

    /// Executes an instruction stream, serializing LD and MM.
    pub fn run(&mut self, prog: &[AryInstr], tiles: &[WeightTile], fabric: &mut Fabric) -> Result<UtilizationRecord, AryError> {
        let k = self.cfg.k;
        let mut rec = UtilizationRecord::default();
        for &ins in prog {
            match ins {
                AryInstr::Ld { p } => {
                    let idx = match self.reg(p)? {
                        AryReg::Tile(i) => i,
                        AryReg::Mem(_) => return Err(AryError::BadAddress(format!("a{p} does not name a tile"))),
                    };
                    let tile = tiles.get(idx).ok_or_else(|| AryError::BadAddress(format!("tile {idx}")))?;
                    let cycles = self.ld_weights(tile)?;
                    rec.push(k, InstrUtil { instr: ins, cycles, active_mac_cycles: 0 });
                }
                AryInstr::Mm { l, src, dst } => {
                    let (rows, _) = self.loaded.ok_or(AryError::NoWeights)?;
                    let src = self.mem(src)?;
                    let dst = self.mem(dst)?;
                    let in_stride = rows.div_ceil(WORD_BYTES).max(1);
                    let mut x = Vec::with_capacity(l as usize * rows);
                    for r in 0..l as usize {
                        let at = Address::new(src.bank, src.word_index + r * in_stride);
                        x.extend(fabric.peek_bytes(at, rows)?.into_iter().map(|b| b as i8));
                    }
                    let (y, u) = self.product(&x, rows)?;
                    let cols = y.len() / l.max(1) as usize;
                    let out_stride = (cols * 4).div_ceil(WORD_BYTES).max(1);
                    for r in 0..l as usize {
                        let bytes: Vec<u8> = y[r * cols..(r + 1) * cols].iter().flat_map(|v| v.to_le_bytes()).collect();
                        fabric.poke_bytes(Address::new(dst.bank, dst.word_index + r * out_stride), &bytes)?;
                    }
                    rec.push(k, InstrUtil { instr: ins, ..u });
                }
            }
        }
        for u in &rec.per_instr {
            self.util.push(k, *u);
        }
        Ok(rec)
    }

    fn reg(&self, r: u8) -> Result<AryReg, AryError> {
        self.adrf
            .get(r as usize)
            .copied()
            .flatten()
            .ok_or_else(|| AryError::BadAddress(format!("a{r} unset")))
    }

    fn mem(&self, r: u8) -> Result<Address, AryError> {
        match self.reg(r)? {
            AryReg::Mem(a) => Ok(a),
            AryReg::Tile(_) => Err(AryError::BadAddress(format!("a{r} is not a memory operand"))),
        }
    }
}

/// Cycle count and MAC utilization of a serialized schedule, without data.
/// `shapes` gives `(a, b)` of the tile loaded by each LD, in order.
pub fn schedule_latency(prog: &[AryInstr], shapes: &[(usize, usize)], k: usize) -> Result<UtilizationRecord, AryError> {
    let mut rec = UtilizationRecord::default();
    let mut tiles = shapes.iter();
    let mut loaded = None;
    for &ins in prog {
        match ins {
            AryInstr::Ld { .. } => {
                let &(a, b) = tiles.next().ok_or_else(|| AryError::BadAddress("no shape for LD".into()))?;
                loaded = Some((a, b));
                rec.push(k, InstrUtil { instr: ins, cycles: ld_cycles(k), active_mac_cycles: 0 });
            }
            AryInstr::Mm { l, .. } => {
                let (a, b) = loaded.ok_or(AryError::NoWeights)?;
                let active = (a.min(k) * b.min(k)) as u64 * u64::from(l);
                rec.push(k, InstrUtil { instr: ins, cycles: mm_cycles(u64::from(l), k), active_mac_cycles: active });
            }
        }
    }
    Ok(rec)
}

fn parse_reg(tok: &str, line: usize) -> Result<u8, AryError> {
    let n: usize = tok
        .trim()
        .strip_prefix('a')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| AryError::Syntax { line, msg: format!("expected aN, got '{tok}'") })?;
    if n >= ADRF_SIZE {
        return Err(AryError::BadAddress(format!("a{n}")));
    }
    Ok(n as u8)
}

/// Parses `LD a2` / `MM 10, a0, a1`, one instruction per line; `#` comments.
pub fn assemble(text: &str) -> Result<Vec<AryInstr>, AryError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let src = raw.split('#').next().unwrap_or("").trim();
        if src.is_empty() {
            continue;
        }
        let (op, rest) = src.split_once(char::is_whitespace).unwrap_or((src, ""));
        let args: Vec<&str> = rest.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let syntax = |msg: &str| AryError::Syntax { line, msg: msg.into() };
        match (op.to_ascii_uppercase().as_str(), args.as_slice()) {
            ("LD", [p]) => out.push(AryInstr::Ld { p: parse_reg(p, line)? }),
            ("MM", [l, src, dst]) => {
                let l: u32 = l.parse().map_err(|_| syntax("MM stream length must be an integer"))?;
                if l == 0 {
                    return Err(syntax("MM stream length must be at least 1"));
                }
                out.push(AryInstr::Mm { l, src: parse_reg(src, line)?, dst: parse_reg(dst, line)? });
            }
            ("LD", _) | ("MM", _) => return Err(syntax("wrong operand count")),
            (other, _) => return Err(syntax(&format!("unknown instruction '{other}'"))),
        }
    }
    Ok(out)
}

pub fn disassemble(prog: &[AryInstr]) -> String {
    prog.iter()
        .map(|i| match *i {
            AryInstr::Ld { p } => format!("LD a{p}\n"),
            AryInstr::Mm { l, src, dst } => format!("MM {l}, a{src}, a{dst}\n"),
        })
        .collect()
}
