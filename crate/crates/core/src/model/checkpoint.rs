//! Versioned, little-endian checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "SQDCKPT\0"
//! version          u32      currently 1
//! seed             u64
//! manifest digest  32 bytes raw SHA-256 (zeros when absent)
//! config length    u32
//! config           UTF-8 JSON of ModelConfig
//! tensor count     u32
//! per tensor:      name length u32, name UTF-8, rows u32, cols u32,
//!                  rows * cols f64 values, row-major
//! ```

use std::io::{Read, Write};

use super::{ModelConfig, ModelError, SeqRecModel};
use crate::autograd::Matrix;

pub const MAGIC: &[u8; 8] = b"SQDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SeqRecModel,
    pub seed: u64,
    /// Hex SHA-256 of the run manifest that produced this checkpoint.
    pub manifest_digest: Option<String>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| err("invalid UTF-8"))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut digest = [0u8; 32];
        if let Some(hex_digest) = &self.manifest_digest {
            let raw = hex::decode(hex_digest).map_err(|_| err("manifest digest is not hex"))?;
            if raw.len() != 32 {
                return Err(err("manifest digest must be 32 bytes"));
            }
            digest.copy_from_slice(&raw);
        }
        w.write_all(&digest)?;
        let config = serde_json::to_vec(self.model.config()).map_err(|e| err(e.to_string()))?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        let names = self.model.param_names();
        w.write_all(&(names.len() as u32).to_le_bytes())?;
        for (name, p) in names.iter().zip(self.model.params()) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(p.nrows() as u32).to_le_bytes())?;
            w.write_all(&(p.ncols() as u32).to_le_bytes())?;
            for x in p.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let seed = read_u64(&mut r)?;
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        let manifest_digest = (digest != [0u8; 32]).then(|| hex::encode(digest));
        let config: ModelConfig =
            serde_json::from_str(&read_string(&mut r)?).map_err(|e| err(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let expected = config_names(&config);
        if count != expected.len() {
            return Err(err(format!(
                "expected {} tensors, found {count}",
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for want in expected {
            let name = read_string(&mut r)?;
            if name != want {
                return Err(err(format!("expected tensor `{want}`, found `{name}`")));
            }
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params
                .push(Matrix::from_shape_vec((rows, cols), data).map_err(|e| err(e.to_string()))?);
        }
        Ok(Self {
            model: SeqRecModel::from_parts(config, params)?,
            seed,
            manifest_digest,
        })
    }
}

fn config_names(config: &ModelConfig) -> Vec<String> {
    super::parameter_layout(config)
        .into_iter()
        .map(|(n, _)| n)
        .collect()
}
