//! Model checkpoint persistence.
//!
//! # File format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes  b"FPCK"
//! version      u32      1
//! n_layers, d_model, d_ffn, n_heads, n_kv_heads,
//! vocab_size, max_seq_len                      u32 each
//! dropout_rate f64
//! scaled_embed u8       0 or 1
//! init_seed    u64
//! step         u64      training steps completed
//! tensors      raw f32, canonical order (see LMParams::tensors)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{hex, LMConfig, LMParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub init_seed: u64,
    /// Training steps completed when the snapshot was taken.
    pub step: u64,
}

/// A weight snapshot plus the metadata needed to reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: LMParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = &self.params.config;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for dim in [
            cfg.n_layers,
            cfg.d_model,
            cfg.d_ffn,
            cfg.n_heads,
            cfg.n_kv_heads,
            cfg.vocab_size,
            cfg.max_seq_len,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&cfg.dropout_rate.to_le_bytes())?;
        w.write_all(&[cfg.scaled_embed as u8])?;
        w.write_all(&self.meta.init_seed.to_le_bytes())?;
        w.write_all(&self.meta.step.to_le_bytes())?;
        for (_, tensor) in self.params.tensors() {
            for &v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        if read_u32(r)? != FORMAT_VERSION {
            return Err(Error::format("unsupported checkpoint version"));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = read_u32(r)? as usize;
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let dropout_rate = f64::from_le_bytes(buf8);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let config = LMConfig {
            n_layers: dims[0],
            d_model: dims[1],
            d_ffn: dims[2],
            n_heads: dims[3],
            n_kv_heads: dims[4],
            vocab_size: dims[5],
            max_seq_len: dims[6],
            dropout_rate,
            scaled_embed: flag[0] != 0,
        };
        config.validate().map_err(|e| {
            Error::format(format!("checkpoint header holds invalid config: {e}"))
        })?;
        r.read_exact(&mut buf8)?;
        let init_seed = u64::from_le_bytes(buf8);
        r.read_exact(&mut buf8)?;
        let step = u64::from_le_bytes(buf8);

        let mut params = LMParams::<f32>::zeros(&config);
        for (_, tensor) in params.tensors_mut() {
            let mut bytes = vec![0u8; tensor.len() * 4];
            r.read_exact(&mut bytes)?;
            for (v, chunk) in tensor.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            }
        }
        if !params.all_finite() {
            return Err(Error::format("checkpoint contains non-finite weights"));
        }
        Ok(Checkpoint {
            params,
            meta: CheckpointMeta { init_seed, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::labctl::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Hash of the serialized snapshot; equal checksums mean bit-identical
    /// checkpoints.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        let mut hasher = Sha256::new();
        hasher.update(&buf);
        hex(&hasher.finalize())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, tiny_config};

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let params = init_params::<f32>(&tiny_config(), 77).unwrap();
        let ck = Checkpoint {
            params,
            meta: CheckpointMeta {
                init_seed: 77,
                step: 123,
            },
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let loaded = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.meta, ck.meta);
        assert_eq!(loaded.checksum(), ck.checksum());
        assert_eq!(loaded.params.checksum(), ck.params.checksum());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let params = init_params::<f32>(&tiny_config(), 1).unwrap();
        let ck = Checkpoint {
            params,
            meta: CheckpointMeta {
                init_seed: 1,
                step: 0,
            },
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'!';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() / 2];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
    }
}
