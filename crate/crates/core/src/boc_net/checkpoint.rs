//! Binary model file.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "CQAMODEL" | version | config_len | config JSON | sha256(config JSON)
//! | n_groups | { name_len | name | start | end }*
//! | n_layers | { w_ndim | w_dims* | b_ndim | b_dims* }*
//! | f32 payload, layer by layer, weight then bias
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::network::Network;
use super::params::{LayerGroup, ModelParameters, ParamLayer, Tensor};
use super::NetworkConfig;
use crate::error::{QaError, Result};

const MAGIC: &[u8; 8] = b"CQAMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.config.clone())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| QaError::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_shape(buf: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    put_u32(buf, shape.len())?;
    for &d in shape {
        put_u32(buf, d)?;
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = ckpt.network()?;
    net.check_params(&ckpt.params)?;
    let config = serde_json::to_vec(&ckpt.config).map_err(|e| QaError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, config.len())?;
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&Sha256::digest(&config));
    put_u32(&mut buf, ckpt.params.groups.len())?;
    for g in &ckpt.params.groups {
        put_u32(&mut buf, g.name.len())?;
        buf.extend_from_slice(g.name.as_bytes());
        put_u32(&mut buf, g.layers.start)?;
        put_u32(&mut buf, g.layers.end)?;
    }
    put_u32(&mut buf, ckpt.params.layers.len())?;
    for l in &ckpt.params.layers {
        put_shape(&mut buf, &l.weight.shape)?;
        put_shape(&mut buf, &l.bias.shape)?;
    }
    for (layer, is_bias, t) in ckpt.params.tensors() {
        for &v in &t.data {
            let f = v as f32;
            if f as f64 != v && v.is_finite() {
                log::debug!("layer {layer} (bias: {is_bias}) value {v} rounded to f32");
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| QaError::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 8 {
            return Err(QaError::Checkpoint(format!("implausible tensor rank {n}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(QaError::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(QaError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let config_bytes = r.take(len)?;
    let hash = r.take(32)?;
    if Sha256::digest(config_bytes).as_slice() != hash {
        return Err(QaError::Checkpoint("config hash mismatch".into()));
    }
    let config: NetworkConfig =
        serde_json::from_slice(config_bytes).map_err(|e| QaError::Checkpoint(format!("config: {e}")))?;

    let n_groups = r.u32()?;
    let mut groups = Vec::new();
    for _ in 0..n_groups {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| QaError::Checkpoint("group name is not UTF-8".into()))?
            .to_string();
        let start = r.u32()?;
        let end = r.u32()?;
        groups.push(LayerGroup { name, layers: start..end });
    }
    let n_layers = r.u32()?;
    let mut shapes = Vec::new();
    for _ in 0..n_layers {
        shapes.push((r.shape()?, r.shape()?));
    }
    let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| QaError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data })
    };
    let mut layers = Vec::new();
    for (ws, bs) in shapes {
        let weight = read_tensor(ws)?;
        let bias = read_tensor(bs)?;
        layers.push(ParamLayer { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(QaError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let ckpt = Checkpoint {
        config,
        params: ModelParameters { layers, groups },
    };
    ckpt.network()?
        .check_params(&ckpt.params)
        .map_err(|e| QaError::Checkpoint(format!("parameters do not match config: {e}")))?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = NetworkConfig {
            input_size: 16,
            ..NetworkConfig::small_cnn()
        };
        let params = Network::new(config.clone()).unwrap().init_params(3);
        Checkpoint { config, params }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
