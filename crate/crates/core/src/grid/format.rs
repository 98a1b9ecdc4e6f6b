//! `DWGRID01` binary grid files.
//!
//! Little-endian layout: 8-byte magic, `u32` nx, ny, nz, channels, `f32`
//! origin xyz, `f32` voxel size, then `nx * ny * nz * channels` `f32`
//! values in x-fastest voxel order with channels interleaved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Grid3, GridHeader, Voxel};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 8] = b"DWGRID01";
const HEADER_LEN: usize = 8 + 16 + 16;

pub fn write_grid_to<V: Voxel, W: Write>(grid: &Grid3<V>, mut out: W) -> std::io::Result<()> {
    let hd = grid.header();
    let mut head = Vec::with_capacity(HEADER_LEN);
    head.extend_from_slice(GRID_MAGIC);
    for d in hd.dims {
        head.extend_from_slice(&(d as u32).to_le_bytes());
    }
    head.extend_from_slice(&(V::CHANNELS as u32).to_le_bytes());
    for o in hd.origin {
        head.extend_from_slice(&o.to_le_bytes());
    }
    head.extend_from_slice(&hd.voxel_size.to_le_bytes());
    out.write_all(&head)?;

    let mut channels = vec![0.0f32; V::CHANNELS];
    let mut buf = Vec::with_capacity(64 * 1024);
    for v in grid.data() {
        v.write_channels(&mut channels);
        for c in &channels {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        if buf.len() >= 60 * 1024 {
            out.write_all(&buf)?;
            buf.clear();
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn write_grid<V: Voxel>(grid: &Grid3<V>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_grid_to(grid, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_grid_from<V: Voxel, R: Read>(mut input: R) -> Result<Grid3<V>> {
    let mut head = [0u8; HEADER_LEN];
    read_exact_or_truncated(&mut input, &mut head, "header")?;
    if &head[..8] != GRID_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..8]),
            std::str::from_utf8(GRID_MAGIC).unwrap()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let channels = u32_at(20) as usize;
    let origin = [f32_at(24), f32_at(28), f32_at(32)];
    let voxel_size = f32_at(36);

    if origin.iter().any(|o| !o.is_finite()) || !voxel_size.is_finite() {
        return Err(Error::Format("non-finite origin or voxel size".into()));
    }
    if channels != V::CHANNELS {
        return Err(Error::Format(format!(
            "file has {channels} channels, expected {}",
            V::CHANNELS
        )));
    }
    let header = GridHeader {
        dims,
        origin,
        voxel_size,
    };
    header
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

    let count = header
        .len()
        .checked_mul(channels * 4)
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let mut payload = Vec::new();
    input
        .by_ref()
        .take(count as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    if payload.len() != count {
        return Err(Error::Format(format!(
            "truncated payload: expected {count} bytes, found {}",
            payload.len()
        )));
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra).unwrap_or(0) != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }

    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let data = floats
        .chunks_exact(channels)
        .map(V::read_channels)
        .collect();
    Grid3::from_vec(header, data)
}

pub fn read_grid<V: Voxel>(path: impl AsRef<Path>) -> Result<Grid3<V>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid_from(BufReader::new(file))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Format(format!("read failed: {e}")),
    })
}
