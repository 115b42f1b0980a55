//! Compact binary dumps for test fixtures, little-endian throughout.
//!
//! Index dump (`KPIX` version 1): layer count, then per layer the length
//! list, the neighbor table, an optional pooling table and optional
//! upsampling indices. A neighborhood table is stored as
//! `n_queries, n_max, n_support, radius` followed by `n_queries * n_max`
//! u32 indices. Correlation dump (`KPHT` version 1): `n_queries, n_max, k`
//! followed by the f64 block.

use crate::error::{KpError, Result};
use crate::geometry::{Batch, NeighborhoodMatrix};
use std::io::{Read, Write};

const INDEX_MAGIC: &[u8; 4] = b"KPIX";
const H_MAGIC: &[u8; 4] = b"KPHT";
const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_table<W: Write>(w: &mut W, nm: &NeighborhoodMatrix) -> Result<()> {
    write_u64(w, nm.n_queries as u64)?;
    write_u64(w, nm.n_max as u64)?;
    write_u64(w, nm.n_support as u64)?;
    w.write_all(&nm.radius.to_le_bytes())?;
    for &i in nm.flat() {
        write_u32(w, i)?;
    }
    Ok(())
}

fn read_table<R: Read>(r: &mut R) -> Result<NeighborhoodMatrix> {
    let n_queries = read_u64(r)? as usize;
    let n_max = read_u64(r)? as usize;
    let n_support = read_u64(r)? as usize;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let radius = f64::from_le_bytes(b);
    let mut rows = Vec::with_capacity(n_queries);
    let sentinel = n_support as u32;
    for _ in 0..n_queries {
        let mut row = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            let v = read_u32(r)?;
            if v != sentinel {
                row.push(v);
            }
        }
        rows.push(row);
    }
    let mut nm = NeighborhoodMatrix::from_rows(rows, n_support, radius);
    if nm.n_max < n_max {
        nm = nm.repad(n_max);
    }
    Ok(nm)
}

/// The index tables of a batch: per-layer lengths, neighborhoods, pooling
/// rows and upsampling assignments (points and features are not included).
pub fn write_batch_indices<W: Write>(batch: &Batch, w: &mut W) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u64(w, batch.layers.len() as u64)?;
    for layer in &batch.layers {
        write_u64(w, layer.lengths.len() as u64)?;
        for &l in &layer.lengths {
            write_u64(w, l as u64)?;
        }
        write_table(w, &layer.neighbors)?;
        match &layer.pool {
            Some(pool) => {
                w.write_all(&[1])?;
                write_table(w, pool)?;
            }
            None => w.write_all(&[0])?,
        }
        match &layer.upsample {
            Some(up) => {
                w.write_all(&[1])?;
                write_u64(w, up.len() as u64)?;
                for &i in up {
                    write_u32(w, i)?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIndices {
    pub lengths: Vec<usize>,
    pub neighbors: NeighborhoodMatrix,
    pub pool: Option<NeighborhoodMatrix>,
    pub upsample: Option<Vec<u32>>,
}

pub fn read_batch_indices<R: Read>(r: &mut R) -> Result<Vec<LayerIndices>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(KpError::Format("not an index dump".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(KpError::Format(format!("unsupported index version {version}")));
    }
    let n_layers = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_lengths = read_u64(r)? as usize;
        let mut lengths = Vec::with_capacity(n_lengths);
        for _ in 0..n_lengths {
            lengths.push(read_u64(r)? as usize);
        }
        let neighbors = read_table(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let pool = if flag[0] == 1 { Some(read_table(r)?) } else { None };
        r.read_exact(&mut flag)?;
        let upsample = if flag[0] == 1 {
            let len = read_u64(r)? as usize;
            let mut up = Vec::with_capacity(len);
            for _ in 0..len {
                up.push(read_u32(r)?);
            }
            Some(up)
        } else {
            None
        };
        out.push(LayerIndices {
            lengths,
            neighbors,
            pool,
            upsample,
        });
    }
    Ok(out)
}

const NEIGHBOR_MAGIC: &[u8; 4] = b"KPNB";

/// A single neighborhood table, for the `neighbors` command.
pub fn write_neighbors<W: Write>(w: &mut W, nm: &NeighborhoodMatrix) -> Result<()> {
    w.write_all(NEIGHBOR_MAGIC)?;
    write_u32(w, VERSION)?;
    write_table(w, nm)
}

pub fn read_neighbors<R: Read>(r: &mut R) -> Result<NeighborhoodMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NEIGHBOR_MAGIC {
        return Err(KpError::Format("not a neighbor table dump".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(KpError::Format(format!(
            "unsupported neighbor dump version {version}"
        )));
    }
    read_table(r)
}

/// Correlation block dump for oracle comparison.
pub fn write_h_block<W: Write>(
    w: &mut W,
    n_queries: usize,
    n_max: usize,
    k: usize,
    block: &[f64],
) -> Result<()> {
    if block.len() != n_queries * n_max * k {
        return Err(KpError::ShapeMismatch {
            context: "h block size",
            expected: n_queries * n_max * k,
            got: block.len(),
        });
    }
    w.write_all(H_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u64(w, n_queries as u64)?;
    write_u64(w, n_max as u64)?;
    write_u64(w, k as u64)?;
    for &v in block {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_h_block<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != H_MAGIC {
        return Err(KpError::Format("not a correlation dump".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(KpError::Format(format!("unsupported dump version {version}")));
    }
    let n_queries = read_u64(r)? as usize;
    let n_max = read_u64(r)? as usize;
    let k = read_u64(r)? as usize;
    let mut block = Vec::with_capacity(n_queries * n_max * k);
    let mut b = [0u8; 8];
    for _ in 0..n_queries * n_max * k {
        r.read_exact(&mut b)?;
        block.push(f64::from_le_bytes(b));
    }
    Ok((n_queries, n_max, k, block))
}
