//! `HPCM` model files.
//!
//! ```text
//! "HPCM" | version=1 | input_side | K | F | conv stride | pool_size | pool_stride
//!        | N_in | N_out | class count | { name len | utf-8 bytes }*
//!        | conv filters | conv biases | dense weights | dense biases   (f32, row-major)
//!        | crc32 of all preceding bytes
//! ```
//!
//! Integers are little-endian `u32`. Weights are stored at single precision;
//! models produced by [`crate::train::train`] are already rounded to it, so a
//! save/load cycle is lossless for them.

use std::fs;
use std::path::Path;

use crate::cnn::{Architecture, CnnError, CnnModel};
use crate::wire::{Reader, WireError, Writer};

pub use crate::wire::WireError as ModelFileError;

pub const MODEL_MAGIC: &[u8; 4] = b"HPCM";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes(model: &CnnModel) -> Vec<u8> {
    let a = model.architecture();
    let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
    for v in [
        a.input_side,
        a.num_filters,
        a.filter_size,
        a.conv_stride,
        a.pool_size,
        a.pool_stride,
        model.dense.inputs,
        a.num_classes,
    ] {
        w.u32(v as u32);
    }
    w.strings(&model.class_names);
    for params in model.parameters() {
        w.f32s(params);
    }
    w.finish()
}

fn shape_error(e: CnnError) -> WireError {
    WireError::ShapeInconsistent(e.to_string())
}

pub fn model_from_bytes(data: &[u8]) -> Result<CnnModel, WireError> {
    let mut r = Reader::open(data, MODEL_MAGIC, MODEL_VERSION)?;
    let mut next = || r.u32().map(|v| v as usize);
    let arch = Architecture {
        input_side: next()?,
        num_filters: next()?,
        filter_size: next()?,
        conv_stride: next()?,
        pool_size: next()?,
        pool_stride: next()?,
        num_classes: 0,
    };
    let n_in = next()?;
    let arch = Architecture {
        num_classes: next()?,
        ..arch
    };
    arch.validate().map_err(shape_error)?;
    if arch.dense_inputs() != Some(n_in) {
        return Err(WireError::ShapeInconsistent(format!(
            "dense input width {n_in} does not follow from {arch:?}"
        )));
    }
    let class_names = r.strings()?;
    let mut model = CnnModel::zeros(arch, class_names).map_err(shape_error)?;
    let payload: usize = model.parameters().iter().map(|p| p.len() * 4).sum();
    r.expect_remaining(payload)?;
    for params in model.parameters_mut() {
        let values = r.f32s(params.len())?;
        params.copy_from_slice(&values);
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &CnnModel, path: impl AsRef<Path>) -> Result<(), WireError> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| WireError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel, WireError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| WireError::io(path, e))?;
    model_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{init_model, round_to_storage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CnnModel {
        let arch = Architecture::packet_classifier(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_model(arch, vec!["chat".into(), "video".into(), "ßpecial".into()], &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = model_to_bytes(&m);
        assert_eq!(&bytes[..4], b"HPCM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 20);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn storage_is_single_precision() {
        let mut m = model();
        m.dense.biases[0] = 0.1;
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        assert_ne!(back, m);
        round_to_storage(&mut m);
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_magic_version_crc_and_truncation() {
        let bytes = model_to_bytes(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(WireError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            model_from_bytes(&bad),
            Err(WireError::UnsupportedVersion { found: 2, .. })
        ));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0x40;
        assert!(matches!(model_from_bytes(&bad), Err(WireError::ChecksumMismatch { .. })));
        let mut bad = bytes.clone();
        bad[n - 20] ^= 0x01;
        assert!(matches!(model_from_bytes(&bad), Err(WireError::ChecksumMismatch { .. })));
        assert!(matches!(
            model_from_bytes(&bytes[..n - 100]),
            Err(WireError::ShapeInconsistent(_))
        ));
    }

    #[test]
    fn rejects_header_payload_disagreement() {
        let mut bytes = model_to_bytes(&model());
        // N_in field.
        bytes[32..36].copy_from_slice(&123u32.to_le_bytes());
        assert!(matches!(model_from_bytes(&bytes), Err(WireError::ShapeInconsistent(_))));
    }
}
