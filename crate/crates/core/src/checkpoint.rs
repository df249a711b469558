//! Checkpoint serialization: a UTF-8 JSON manifest (format version, config,
//! vocabularies, ordered parameter names and shapes), a single NUL byte,
//! then the parameter arrays concatenated in manifest order as 32-bit
//! IEEE-754 little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::corpus::Vocabularies;
use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocabularies: Vocabularies,
    params: Vec<ParamInfo>,
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<S: Scalar, W: Write>(model: &Model<S>, mut writer: W) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        vocabularies: model.vocabs().clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.param_tensors())
            .map(|(name, tensor)| ParamInfo {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    writer.write_all(&manifest_bytes)?;
    writer.write_all(&[0u8])?;
    for tensor in model.param_tensors() {
        for &v in tensor.data() {
            writer.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<S: Scalar, R: Read>(mut reader: R) -> Result<Model<S>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nul])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }

    // The manifest must agree exactly with the parameter inventory implied
    // by its own config and vocabularies.
    let specs = param_specs(&manifest.config, &manifest.vocabularies);
    if manifest.params.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            specs.len()
        )));
    }
    for (info, (want_name, want_shape)) in manifest.params.iter().zip(&specs) {
        if &info.name != want_name || &info.shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} disagrees with config ({want_name} {want_shape:?})",
                info.name, info.shape
            )));
        }
    }

    let mut offset = nul + 1;
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for info in &manifest.params {
        let numel: usize = info.shape.iter().product();
        let end = offset + 4 * numel;
        if end > bytes.len() {
            return Err(Error::Checkpoint("truncated parameter data".into()));
        }
        let data: Vec<S> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        offset = end;
        names.push(info.name.clone());
        tensors.push(Tensor::new(info.shape.clone(), data)?);
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - offset
        )));
    }
    Model::from_parts(manifest.config, manifest.vocabularies, names, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabularies, Corpus, Utterance};
    use crate::model::Variant;

    fn tiny_model(variant: Variant) -> Model<f32> {
        let corpus = Corpus {
            name: "t".into(),
            utterances: vec![Utterance {
                id: 0,
                tokens: vec!["show".into(), "flights".into()],
                tags: vec!["O".into(), "B-x".into()],
                intent: "flight".into(),
            }],
        };
        let vocabs = build_vocabularies(&corpus);
        let mut config = ModelConfig::new(variant, 8);
        config.hidden = 5;
        config.char_emb_dim = 4;
        config.char_filters = 3;
        config.max_char_len = 6;
        Model::build(config, vocabs).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters_bitwise() {
        for variant in [Variant::Recurrent, Variant::TimeDistributed] {
            let model = tiny_model(variant);
            let mut buf = Vec::new();
            save_checkpoint(&model, &mut buf).unwrap();
            let loaded: Model<f32> = load_checkpoint(&buf[..]).unwrap();
            assert_eq!(model.param_names(), loaded.param_names());
            for (a, b) in model.param_tensors().iter().zip(loaded.param_tensors()) {
                assert_eq!(a.shape(), b.shape());
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(model.config(), loaded.config());
            assert_eq!(model.vocabs(), loaded.vocabs());
        }
    }

    #[test]
    fn truncated_file_fails_to_load() {
        let model = tiny_model(Variant::Recurrent);
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(load_checkpoint::<f32, _>(&buf[..]).is_err());
        assert!(load_checkpoint::<f32, _>(&buf[..10]).is_err());
    }

    #[test]
    fn trailing_garbage_fails_to_load() {
        let model = tiny_model(Variant::Recurrent);
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).unwrap();
        buf.extend_from_slice(&[1, 2, 3]);
        assert!(load_checkpoint::<f32, _>(&buf[..]).is_err());
    }

    #[test]
    fn variant_mismatch_is_detected() {
        // tamper with the manifest's variant without touching the params
        let model = tiny_model(Variant::Recurrent);
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).unwrap();
        let nul = buf.iter().position(|&b| b == 0).unwrap();
        let manifest = String::from_utf8(buf[..nul].to_vec()).unwrap();
        let tampered = manifest.replace("\"recurrent\"", "\"time_distributed\"");
        let mut out = tampered.into_bytes();
        out.extend_from_slice(&buf[nul..]);
        let err = load_checkpoint::<f32, _>(&out[..]).unwrap_err();
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }
}
