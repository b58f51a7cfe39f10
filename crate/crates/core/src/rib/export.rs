//! RIBM map files: `"RIBM"`, `H`, `W`, `K + 1` as big-endian `u32`, the CAM
//! stack and then `M` as big-endian `f64`, trailing CRC32. A JSON sidecar with
//! the same stem carries the class, config and fallback count.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LocalizationMap, RibConfig};
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAP_MAGIC: &[u8; 4] = b"RIBM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub sample: usize,
    pub class: usize,
    pub k: usize,
    pub loss: String,
    pub fallback_count: usize,
    pub logits: Vec<f64>,
    pub gap_logits: Vec<f64>,
    pub config: RibConfig,
}

pub fn encode_map(lm: &LocalizationMap) -> Vec<u8> {
    let mut w = Writer::unversioned(MAP_MAGIC);
    w.u32(lm.height as u32);
    w.u32(lm.width as u32);
    w.u32(lm.stack.len() as u32);
    for cam in &lm.stack {
        cam.iter().for_each(|&v| w.f64(v));
    }
    lm.map.iter().for_each(|&v| w.f64(v));
    w.finish()
}

/// Decodes the binary part; `class` and `fallback_count` come from the sidecar.
pub fn decode_map(bytes: &[u8], class: usize, fallback_count: usize) -> Result<LocalizationMap> {
    let mut r = Reader::open_unversioned(bytes, MAP_MAGIC, "RIBM map")?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let layers = r.u32()? as usize;
    if layers == 0 {
        return Err(Error::Format("RIBM map holds an empty CAM stack".into()));
    }
    let hw = height * width;
    let read_plane = |r: &mut Reader| -> Result<Vec<f64>> { (0..hw).map(|_| r.f64()).collect() };
    let mut stack = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        stack.push(read_plane(&mut r)?);
    }
    let map = read_plane(&mut r)?;
    r.finish()?;
    Ok(LocalizationMap {
        map,
        stack,
        class,
        height,
        width,
        fallback_count,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_sidecar(sidecar: &MapSidecar) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    v.push(b'\n');
    v
}

pub fn write_map(lm: &LocalizationMap, sidecar: &MapSidecar, path: &Path) -> Result<()> {
    codec::write_file(path, &encode_map(lm))?;
    codec::write_file(&sidecar_path(path), &encode_sidecar(sidecar))
}

/// Decodes a map and its sidecar; `path` only labels diagnostics.
pub fn parse_map(map_bytes: &[u8], sidecar_bytes: &[u8], path: &Path) -> Result<(LocalizationMap, MapSidecar)> {
    let sidecar: MapSidecar = serde_json::from_slice(sidecar_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar_path(path).display())))?;
    let lm = decode_map(map_bytes, sidecar.class, sidecar.fallback_count)?;
    if lm.k() != sidecar.k {
        return Err(Error::Consistency(format!(
            "{} holds {} CAMs but its sidecar says K={}",
            path.display(),
            lm.stack.len(),
            sidecar.k
        )));
    }
    Ok((lm, sidecar))
}

pub fn read_map(path: &Path) -> Result<(LocalizationMap, MapSidecar)> {
    let side = codec::read_file(&sidecar_path(path))?;
    parse_map(&codec::read_file(path)?, &side, path)
}
