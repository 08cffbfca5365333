//! Binary parameter checkpoints.
//!
//! Layout (little-endian): the magic bytes `WNODE1`, then one record per
//! parameter: u32 name length, utf-8 name, u32 rank, u64 dims, then the
//! raw f64 buffer. Records run to end of file; a file that ends inside a
//! record is rejected, which is the total-byte-count validation.
//!
//! Velocity-net checkpoints carry one extra leading record, `meta/arch`,
//! holding (depth, base width, image channels) so the network can be
//! rebuilt without outside information.

use crate::nn::{ParamSet, VelocityNet};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"WNODE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let mut params = ParamSet::default();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated { offset: *pos });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Invalid(format!(
                "implausible name length {name_len}"
            )));
        }
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::Invalid("parameter name is not utf-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(CheckpointError::Invalid(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut pos, count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(
            name,
            Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Invalid(e.to_string()))?,
        );
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_params(params);
    let mut f = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_params(&bytes)
}

const ARCH_KEY: &str = "meta/arch";

pub fn velocity_net_to_params(net: &VelocityNet) -> ParamSet {
    let mut out = ParamSet::default();
    out.push(
        ARCH_KEY,
        Tensor::new(
            &[3],
            vec![
                net.depth() as f64,
                net.base_width() as f64,
                net.img_channels() as f64,
            ],
        )
        .unwrap(),
    );
    for p in net.params().iter() {
        out.push(p.name.clone(), p.value.clone());
    }
    out
}

pub fn velocity_net_from_params(stored: &ParamSet) -> Result<VelocityNet> {
    let arch = stored
        .get(ARCH_KEY)
        .ok_or_else(|| CheckpointError::Invalid(format!("missing {ARCH_KEY} record")))?;
    if arch.len() != 3 {
        return Err(CheckpointError::Invalid(format!("malformed {ARCH_KEY}")));
    }
    let depth = arch.data()[0] as usize;
    let base = arch.data()[1] as usize;
    let img_channels = arch.data()[2] as usize;
    // fresh net gives the expected parameter inventory to validate against
    let template = VelocityNet::with_arch(img_channels, depth, base, 0);
    let mut params = ParamSet::default();
    for p in template.params().iter() {
        let value = stored.get(&p.name).ok_or_else(|| {
            CheckpointError::Invalid(format!("missing parameter {}", p.name))
        })?;
        if value.shape() != p.value.shape() {
            return Err(CheckpointError::Invalid(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        params.push(p.name.clone(), value.clone());
    }
    Ok(VelocityNet::from_params(img_channels, depth, base, params))
}

pub fn save_velocity_net(path: impl AsRef<Path>, net: &VelocityNet) -> Result<()> {
    save_params(path, &velocity_net_to_params(net))
}

pub fn load_velocity_net(path: impl AsRef<Path>) -> Result<VelocityNet> {
    velocity_net_from_params(&load_params(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let net = VelocityNet::with_arch(1, 2, 4, 11);
        let encoded = encode_params(&velocity_net_to_params(&net));
        let back = velocity_net_from_params(&decode_params(&encoded).unwrap()).unwrap();
        assert_eq!(back.depth(), 2);
        assert_eq!(back.base_width(), 4);
        assert_eq!(back.img_channels(), 1);
        for (a, b) in net.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            decode_params(b"NOTMAGIC..."),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_rejected_with_offset() {
        let net = VelocityNet::with_arch(1, 1, 2, 0);
        let bytes = encode_params(&velocity_net_to_params(&net));
        let err = decode_params(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }));
    }

    #[test]
    fn file_roundtrip() {
        let dir = std::env::temp_dir().join("warpode_ckpt_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.wnode");
        let net = VelocityNet::with_arch(3, 1, 2, 5);
        save_velocity_net(&path, &net).unwrap();
        let back = load_velocity_net(&path).unwrap();
        assert_eq!(back.img_channels(), 3);
        for (a, b) in net.params().iter().zip(back.params().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}
