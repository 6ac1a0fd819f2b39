//! Checkpoint file format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic            4 bytes  "MVDN"
//! version          u32
//! image_size       u32
//! n_views          u32
//! hidden_width     u32
//! hidden_layers    u32
//! time_embed_dim   u32
//! pose_embed_dim   u32
//! cond_dim         u32
//! t_max            u32
//! beta_start       f64
//! beta_end         f64
//! n_blocks         u32
//! per block:       len u64, then len f32 values
//! ```
//!
//! Blocks appear in the fixed order `w_ref, w_mv, layer0.w, layer0.b, ...`.
//! Parameters are stored as f32 regardless of the in-memory scalar type.

use super::{DenoiserConfig, DenoiserParams, Dense};
use crate::num::Scalar;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVDN";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn save_checkpoint<T: Scalar>(
    params: &DenoiserParams<T>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, params.version)?;
    let c = &params.config;
    for v in [
        c.image_size,
        c.n_views,
        c.hidden_width,
        c.hidden_layers,
        c.time_embed_dim,
        c.pose_embed_dim,
        c.cond_dim,
        c.t_max,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_f64(&mut w, c.beta_start)?;
    write_f64(&mut w, c.beta_end)?;
    let blocks = params.block_slices();
    write_u32(&mut w, blocks.len() as u32)?;
    for block in blocks {
        write_u64(&mut w, block.len() as u64)?;
        for &v in block {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DenoiserParams<T>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Malformed(format!(
            "magic {magic:?} is not {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != super::CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = DenoiserConfig {
        image_size: read_u32(&mut r)? as usize,
        n_views: read_u32(&mut r)? as usize,
        hidden_width: read_u32(&mut r)? as usize,
        hidden_layers: read_u32(&mut r)? as usize,
        time_embed_dim: read_u32(&mut r)? as usize,
        pose_embed_dim: read_u32(&mut r)? as usize,
        cond_dim: read_u32(&mut r)? as usize,
        t_max: read_u32(&mut r)? as usize,
        beta_start: read_f64(&mut r)?,
        beta_end: read_f64(&mut r)?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let n_blocks = read_u32(&mut r)? as usize;
    let layer_dims = config.layer_dims();
    let expected_blocks = 2 + 2 * layer_dims.len();
    if n_blocks != expected_blocks {
        return Err(CheckpointError::Malformed(format!(
            "expected {expected_blocks} parameter blocks, found {n_blocks}"
        )));
    }
    let mut read_block = |expected_len: usize| -> Result<Vec<T>, CheckpointError> {
        let len = read_u64(&mut r)? as usize;
        if len != expected_len {
            return Err(CheckpointError::Malformed(format!(
                "block of {len} values where {expected_len} expected"
            )));
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                T::from_f64_lossy(v as f64)
            })
            .collect())
    };
    let pathway_len = config.cond_dim * config.view_dim();
    let w_ref = read_block(pathway_len)?;
    let w_mv = read_block(pathway_len)?;
    let mut layers = Vec::with_capacity(layer_dims.len());
    for (in_dim, out_dim) in layer_dims {
        let w = read_block(in_dim * out_dim)?;
        let b = read_block(out_dim)?;
        layers.push(Dense {
            w,
            b,
            in_dim,
            out_dim,
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after parameter blocks".into(),
        ));
    }
    Ok(DenoiserParams {
        config,
        version,
        w_ref,
        w_mv,
        layers,
    })
}
