//! `RIBW` parameter checkpoints: magic, `u32` version, `u64` seed, then per
//! tensor `rank u8`, `dims u32[rank]`, big-endian `f64` values; trailing CRC32.

use std::path::Path;

use super::ModelParams;
use crate::codec::{self, Reader, Writer};
use crate::error::Result;
use crate::gradcore::Tensor;

const MAGIC: &[u8; 4] = b"RIBW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, CHECKPOINT_VERSION);
    w.u64(params.seed);
    for t in params.tensors() {
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::open(bytes, MAGIC, CHECKPOINT_VERSION, "RIBW checkpoint")?;
    let seed = r.u64()?;
    let mut params = ModelParams::init(0);
    params.seed = seed;
    for slot in params.tensors_mut() {
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| r.f64()).collect::<Result<_>>()?;
        *slot = Tensor::new(shape, data)?;
    }
    r.finish()?;
    params.validate()?;
    Ok(params)
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    codec::write_file(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&codec::read_file(path)?)
}
