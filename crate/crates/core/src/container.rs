//! Binary containers for echo profiles (`AEPF`) and flow windows (`AEFW`).
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! AEPF: magic "AEPF" | u32 version=1 | u32 dims[3] = [channels, lags, frames]
//!       | u64 config_hash | f64 frame_rate | f32 data (row-major)
//! AEFW: magic "AEFW" | u32 version=1 | u32 dims[3] = [channels, lags, frames]
//!       | u32 n_windows | u64 config_hash | f64 frame_rate
//!       | n_windows × (f64 start_time | f32 data (row-major))
//! ```
//!
//! The config hash ties every artifact to the run configuration that
//! produced it; mixing artifacts from different configurations is refused
//! downstream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use thiserror::Error;

use crate::echo::{EchoProfile, FlowWindow};

pub const PROFILE_MAGIC: &[u8; 4] = b"AEPF";
pub const WINDOWS_MAGIC: &[u8; 4] = b"AEFW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("inconsistent dimensions in file: {0}")]
    BadDims(String),
    #[error("config hash mismatch: file {file:#018x}, expected {expected:#018x}")]
    HashMismatch { file: u64, expected: u64 },
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_f32_slice(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32_vec(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write an echo profile (or acoustic flow, which shares the layout).
pub fn write_profile(path: &Path, profile: &EchoProfile, config_hash: u64) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROFILE_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    for d in profile.data.shape() {
        write_u32(&mut w, *d as u32)?;
    }
    write_u64(&mut w, config_hash)?;
    write_f64(&mut w, profile.frame_rate)?;
    let data = profile.data.as_standard_layout();
    write_f32_slice(&mut w, data.as_slice().expect("standard layout"))?;
    w.flush()?;
    Ok(())
}

/// Read an echo profile, returning it with the embedded config hash.
pub fn read_profile(path: &Path) -> Result<(EchoProfile, u64), ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PROFILE_MAGIC {
        return Err(ContainerError::BadMagic { expected: "AEPF".into() });
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
    let config_hash = read_u64(&mut r)?;
    let frame_rate = read_f64(&mut r)?;
    let count = dims[0] * dims[1] * dims[2];
    let data = read_f32_vec(&mut r, count)?;
    let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .map_err(|e| ContainerError::BadDims(e.to_string()))?;
    Ok((EchoProfile { data, frame_rate }, config_hash))
}

/// Write a batch of flow windows sharing one shape.
pub fn write_windows(
    path: &Path,
    windows: &[FlowWindow],
    frame_rate: f64,
    config_hash: u64,
) -> Result<(), ContainerError> {
    let dims = match windows.first() {
        Some(w) => w.shape(),
        None => (crate::echo::N_CHANNELS, crate::echo::WINDOW_LAGS, crate::echo::WINDOW_FRAMES),
    };
    if let Some(bad) = windows.iter().find(|w| w.shape() != dims) {
        return Err(ContainerError::BadDims(format!(
            "window shapes differ: {:?} vs {:?}",
            bad.shape(),
            dims
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WINDOWS_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, dims.0 as u32)?;
    write_u32(&mut w, dims.1 as u32)?;
    write_u32(&mut w, dims.2 as u32)?;
    write_u32(&mut w, windows.len() as u32)?;
    write_u64(&mut w, config_hash)?;
    write_f64(&mut w, frame_rate)?;
    for window in windows {
        write_f64(&mut w, window.start_time)?;
        let data = window.data.as_standard_layout();
        write_f32_slice(&mut w, data.as_slice().expect("standard layout"))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a flow-window container: (windows, frame_rate, config_hash).
pub fn read_windows(path: &Path) -> Result<(Vec<FlowWindow>, f64, u64), ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WINDOWS_MAGIC {
        return Err(ContainerError::BadMagic { expected: "AEFW".into() });
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
    let n_windows = read_u32(&mut r)? as usize;
    let config_hash = read_u64(&mut r)?;
    let frame_rate = read_f64(&mut r)?;
    let count = dims[0] * dims[1] * dims[2];
    let mut windows = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let start_time = read_f64(&mut r)?;
        let data = read_f32_vec(&mut r, count)?;
        let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
            .map_err(|e| ContainerError::BadDims(e.to_string()))?;
        windows.push(FlowWindow { data, start_time });
    }
    Ok((windows, frame_rate, config_hash))
}
