//! Binary checkpoint: an 8-byte magic, a little-endian header and the flat
//! parameter vector as little-endian `f64`.
//!
//! ```text
//! "RSDPOLCY" | u32 version | u32 kind | u32 flags | u64 K | u64 d_model | u64 n_heads
//!            | u64 T_max | u64 ff_dim | u64 n_params | f64 x n_params
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PolicyConfig, PolicyKind, PolicyParams};
use crate::error::{Result, RsdError};

const MAGIC: &[u8; 8] = b"RSDPOLCY";
const VERSION: u32 = 2;
const FLAG_FOCUS_PRIOR: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    let cfg = params.config();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let kind: u32 = match cfg.kind {
        PolicyKind::Transformer => 0,
        PolicyKind::Mlp => 1,
    };
    out.write_all(&kind.to_le_bytes())?;
    let flags = if cfg.focus_prior { FLAG_FOCUS_PRIOR } else { 0 };
    out.write_all(&flags.to_le_bytes())?;
    for v in [cfg.k, cfg.d_model, cfg.n_heads, cfg.max_rounds, cfg.ff_dim, params.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<PolicyParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RsdError::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(RsdError::Checkpoint(format!("unsupported version {version}")));
    }
    input.read_exact(&mut word)?;
    let kind = match u32::from_le_bytes(word) {
        0 => PolicyKind::Transformer,
        1 => PolicyKind::Mlp,
        other => return Err(RsdError::Checkpoint(format!("unknown policy kind {other}"))),
    };
    input.read_exact(&mut word)?;
    let flags = u32::from_le_bytes(word);
    if flags & !FLAG_FOCUS_PRIOR != 0 {
        return Err(RsdError::Checkpoint(format!("unknown flags {flags:#x}")));
    }
    let mut header = [0usize; 6];
    let mut long = [0u8; 8];
    for slot in header.iter_mut() {
        input.read_exact(&mut long)?;
        *slot = u64::from_le_bytes(long) as usize;
    }
    let [k, d_model, n_heads, max_rounds, ff_dim, n] = header;
    let config = PolicyConfig {
        kind,
        k,
        d_model,
        n_heads,
        ff_dim,
        max_rounds,
        focus_prior: flags & FLAG_FOCUS_PRIOR != 0,
    };
    config.validate()?;
    if config.layout().len() != n {
        return Err(RsdError::Checkpoint(format!(
            "header declares {n} parameters, shape needs {}",
            config.layout().len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut long)?;
        values.push(f64::from_le_bytes(long));
    }
    PolicyParams::from_values(config, values)
}

pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
