//! Model checkpoints: a JSON manifest describing the parameter layout plus
//! one little-endian float64 blob. Round-trips are bit-exact.

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's values within the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub params: Vec<ParamDescriptor>,
}

/// Serialize a model to (manifest JSON, parameter blob).
pub fn encode(model: &EncoderModel) -> Result<(String, Vec<u8>)> {
    let mut descriptors = Vec::new();
    let mut blob = Vec::new();
    for (name, tensor) in model.parameters() {
        descriptors.push(ParamDescriptor {
            name,
            shape: tensor.shape(),
            offset: blob.len() as u64,
        });
        for v in tensor.data().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        params: descriptors,
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

/// Rebuild a model from manifest bytes and a parameter blob. All layout
/// claims in the manifest are validated against the config's parameter
/// geometry before any value is read.
pub fn decode(manifest_json: &[u8], blob: &[u8]) -> Result<EncoderModel> {
    let manifest: CheckpointManifest = serde_json::from_slice(manifest_json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let model = EncoderModel::init(&manifest.config, 0)?;
    let expected = model.parameters();
    if manifest.params.len() != expected.len() {
        return Err(Error::Input(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let by_name: HashMap<&str, &ParamDescriptor> =
        manifest.params.iter().map(|d| (d.name.as_str(), d)).collect();
    if by_name.len() != manifest.params.len() {
        return Err(Error::Input("duplicate parameter name in manifest".into()));
    }
    for (name, tensor) in &expected {
        let desc = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Input(format!("manifest is missing parameter {name}")))?;
        if desc.shape != tensor.shape() {
            return Err(Error::Input(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                desc.shape,
                tensor.shape()
            )));
        }
        let numel: usize = desc.shape.iter().product();
        let start = usize::try_from(desc.offset)
            .map_err(|_| Error::Input(format!("offset of {name} overflows")))?;
        let end = start
            .checked_add(numel * 8)
            .ok_or_else(|| Error::Input(format!("extent of {name} overflows")))?;
        if end > blob.len() {
            return Err(Error::Input(format!(
                "parameter {name} extends to byte {end} but the blob has {}",
                blob.len()
            )));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensor.data_mut(|d| d.copy_from_slice(&values));
    }
    let total: usize = expected.iter().map(|(_, t)| t.numel() * 8).sum();
    if blob.len() != total {
        return Err(Error::Input(format!(
            "blob holds {} bytes, parameters need {total}",
            blob.len()
        )));
    }
    Ok(model)
}

/// Write `manifest.json` and `params.bin` into a checkpoint directory.
pub fn save(dir: &Path, model: &EncoderModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(model)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

/// Load a model from a checkpoint directory.
pub fn load(dir: &Path) -> Result<EncoderModel> {
    let manifest = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display()))
    })?;
    let blob = fs::read(dir.join(PARAMS_FILE)).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", dir.join(PARAMS_FILE).display()))
    })?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> EncoderModel {
        EncoderModel::init(
            &EncoderConfig {
                vocab_size: 8,
                max_len: 5,
                num_layers: 2,
                hidden_size: 8,
                num_heads: 2,
                ffn_size: 12,
                num_classes: 2,
            },
            99,
        )
        .unwrap()
    }

    fn param_bits(m: &EncoderModel) -> Vec<(String, Vec<u64>)> {
        m.parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.value().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let (manifest, blob) = encode(&m).unwrap();
        let back = decode(manifest.as_bytes(), &blob).unwrap();
        assert_eq!(param_bits(&m), param_bits(&back));
        assert_eq!(m.config(), back.config());
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(dir.path(), &m).unwrap();
        let first_manifest = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let first_blob = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        let back = load(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save(dir2.path(), &back).unwrap();
        assert_eq!(first_manifest, fs::read(dir2.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(first_blob, fs::read(dir2.path().join(PARAMS_FILE)).unwrap());
    }

    #[test]
    fn decode_rejects_truncated_blob() {
        let m = model();
        let (manifest, blob) = encode(&m).unwrap();
        let err = decode(manifest.as_bytes(), &blob[..blob.len() - 8]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn decode_rejects_wrong_version_and_bad_json() {
        let m = model();
        let (manifest, blob) = encode(&m).unwrap();
        let tampered = manifest.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(decode(tampered.as_bytes(), &blob).is_err());
        assert!(decode(b"{not json", &blob).is_err());
    }

    #[test]
    fn decode_rejects_shape_mismatch() {
        let m = model();
        let (manifest, blob) = encode(&m).unwrap();
        let mut parsed: CheckpointManifest = serde_json::from_str(&manifest).unwrap();
        parsed.params[0].shape = vec![1, 1];
        let tampered = serde_json::to_string(&parsed).unwrap();
        assert!(decode(tampered.as_bytes(), &blob).is_err());
    }

    #[test]
    fn nan_payloads_survive_roundtrip() {
        let m = model();
        let weird = f64::from_bits(0x7ff8_dead_beef_0001);
        m.parameters()[0].1.data_mut(|d| d[0] = weird);
        let (manifest, blob) = encode(&m).unwrap();
        let back = decode(manifest.as_bytes(), &blob).unwrap();
        assert_eq!(back.parameters()[0].1.value()[0].to_bits(), weird.to_bits());
    }
}
