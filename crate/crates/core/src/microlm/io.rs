//! Binary model file: `MLM1`, then little-endian u32 version, mode, V, d, L,
//! then every tensor as little-endian f32 in [`Tensor::ALL`] order.

use std::fs;
use std::path::Path;

use super::{MicroLmParams, ModelMode, ModelShape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLM1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

pub fn write_params(params: &MicroLmParams) -> Vec<u8> {
    let s = params.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * params.num_params());
    buf.extend_from_slice(MAGIC);
    let mode = match s.mode {
        ModelMode::Causal => 0u32,
        ModelMode::Masked => 1,
    };
    for v in [
        FORMAT_VERSION,
        mode,
        s.vocab_size as u32,
        s.dim as u32,
        s.max_len as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &w in params.as_slice() {
        buf.extend_from_slice(&(w as f32).to_le_bytes());
    }
    buf
}

pub fn read_params(bytes: &[u8]) -> Result<MicroLmParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::ModelFormat(format!(
            "truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::ModelFormat(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version} (reader supports {FORMAT_VERSION})"
        )));
    }
    let mode = match word(1) {
        0 => ModelMode::Causal,
        1 => ModelMode::Masked,
        m => return Err(Error::ModelFormat(format!("unknown mode {m}"))),
    };
    let shape = ModelShape::new(mode, word(2) as usize, word(3) as usize, word(4) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() % 4 != 0 {
        return Err(Error::ModelFormat("truncated tensor data".into()));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if data.iter().any(|w| !w.is_finite()) {
        return Err(Error::ModelFormat("non-finite parameter".into()));
    }
    MicroLmParams::from_raw(shape, data)
}

pub fn save(params: &MicroLmParams, path: &Path) -> Result<()> {
    fs::write(path, write_params(params))
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<MicroLmParams> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    read_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MicroLmParams {
        MicroLmParams::init(ModelShape::new(ModelMode::Masked, 9, 4, 6), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params();
        let back = read_params(&write_params(&p)).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
    }

    #[test]
    fn header_layout() {
        let bytes = write_params(&params());
        assert_eq!(&bytes[..4], b"MLM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 9);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * params().num_params());
    }

    #[test]
    fn corrupt_files_rejected() {
        let good = write_params(&params());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(&bad), Err(Error::ModelFormat(m)) if m.contains("magic")));

        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_params(&v2), Err(Error::ModelFormat(m)) if m.contains("version")));

        assert!(read_params(&good[..good.len() - 4]).is_err());
        assert!(read_params(&good[..10]).is_err());

        let mut wrong_shape = good;
        wrong_shape[16..20].copy_from_slice(&5u32.to_le_bytes());
        assert!(read_params(&wrong_shape).is_err());
    }
}
