//! Flat binary checkpoint format.
//!
//! Layout: magic `OFA1`, a u32-LE length-prefixed UTF-8 JSON config, then
//! every parameter in declaration order as a u32-LE length-prefixed name, a
//! u32-LE rank, u32-LE dims, and the payload as little-endian f64. Round
//! trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{Layout, ModelParams, VitConfig};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"OFA1";

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let config_json = serde_json::to_string(&params.cfg)?;
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("checkpoint truncated: needed {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let json_len = r.u32()? as usize;
    let cfg: VitConfig = serde_json::from_slice(r.take(json_len)?)?;
    let layout = Layout::new(&cfg)?;

    let mut values = Vec::with_capacity(layout.n_params());
    let mut names = Vec::with_capacity(layout.n_params());
    for _ in 0..layout.n_params() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Parse { offset: r.pos, msg: "parameter name not UTF-8".into() })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        names.push(name);
        values.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, msg: "trailing bytes after parameters".into() });
    }
    for (got, want) in names.iter().zip(layout.names()) {
        if got != want {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("parameter order mismatch: got {got}, expected {want}"),
            });
        }
    }
    ModelParams::from_values(&cfg, values)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    crate::netpbm::atomic_write(path, &encode(params)?)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = VitConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            patch_size: 8,
            scales: vec![32, 16],
            n_classes: 3,
            mlp_ratio: 2,
            ..VitConfig::default()
        };
        let cfg = VitConfig {
            ofa: crate::ofa::OfaConfig { alpha: 0.7, ofa_layers: vec![1, 2], decay: 0.9 },
            ..cfg
        };
        let params = init_params(&cfg, 1234).unwrap();
        let bytes = encode(&params).unwrap();
        let restored = decode(&bytes).unwrap();
        assert_eq!(restored.cfg, params.cfg);
        for (a, b) in params.params.iter().zip(&restored.params) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }
        // Re-encoding reproduces the same bytes.
        assert_eq!(encode(&restored).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = VitConfig {
            depth: 1,
            dim: 8,
            heads: 1,
            scales: vec![16],
            ofa: crate::ofa::OfaConfig { alpha: 0.7, ofa_layers: vec![1], decay: 0.9 },
            ..VitConfig::default()
        };
        let params = init_params(&cfg, 0).unwrap();
        let mut bytes = encode(&params).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
