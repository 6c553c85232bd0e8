//! Model checkpoints.
//!
//! ```text
//! b"HCNCKPT\0" | header length u64 LE | TOML header | parameters as f64 LE
//! ```
//!
//! The header records the format version, view widths, architecture,
//! parameter count and optionally the training config. Parameters follow in
//! the model's visiting order (view by view, encoder then decoder, weight
//! then bias per layer).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HcnError, Result};
use crate::model::{Architecture, HcnModel, ViewAutoencoder};
use crate::nn::{LinearLayer, Mlp, Parameterized};
use crate::trainer::TrainingConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HCNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub view_dims: Vec<usize>,
    pub param_count: usize,
    pub architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainingConfig>,
}

pub fn save_checkpoint(model: &HcnModel, path: &Path, config: Option<&TrainingConfig>) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        view_dims: model.view_dims(),
        param_count: model.param_count(),
        architecture: model.architecture().clone(),
        config: config.cloned(),
    };
    let text = toml::to_string(&header).map_err(|e| HcnError::Config(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + text.len() + 8 * header.param_count);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    model.visit_params(&mut |p, _| {
        for x in p {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HcnError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HcnError::io(path, e))
}

fn version_error(found: Option<String>) -> HcnError {
    HcnError::CheckpointVersion {
        found,
        expected: CHECKPOINT_VERSION,
    }
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(version_error(None));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| version_error(None))?;
    let text = std::str::from_utf8(&bytes[16..end]).map_err(|_| version_error(None))?;
    let table: toml::Table = text.parse().map_err(|_| version_error(None))?;
    match table.get("format_version") {
        Some(toml::Value::Integer(v)) if *v == i64::from(CHECKPOINT_VERSION) => {}
        Some(other) => return Err(version_error(Some(other.to_string()))),
        None => return Err(version_error(None)),
    }
    let header: CheckpointHeader = table
        .try_into()
        .map_err(|e: toml::de::Error| HcnError::CheckpointShape(format!("unreadable header: {e}")))?;
    Ok((header, &bytes[end..]))
}

fn zero_model(view_dims: &[usize], arch: &Architecture) -> Result<HcnModel> {
    let mlp = |dims: Vec<usize>| {
        let layers = dims.windows(2).map(|w| LinearLayer::zeros(w[0], w[1])).collect();
        Mlp::from_layers(layers, arch.activation)
    };
    let views = view_dims
        .iter()
        .map(|&d| ViewAutoencoder::from_parts(mlp(arch.encoder_dims(d))?, mlp(arch.decoder_dims(d))?))
        .collect::<Result<Vec<_>>>()?;
    HcnModel::from_views(views, arch.clone())
}

/// Loads a checkpoint together with the config echoed in its header.
pub fn read_checkpoint(path: &Path) -> Result<(HcnModel, Option<TrainingConfig>)> {
    if !path.exists() {
        return Err(HcnError::MissingFile {
            what: "checkpoint".into(),
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(|e| HcnError::io(path, e))?;
    let (header, body) = parse_header(&bytes)?;
    let mut model = zero_model(&header.view_dims, &header.architecture)?;
    if model.param_count() != header.param_count {
        return Err(HcnError::CheckpointShape(format!(
            "header declares {} parameters, architecture implies {}",
            header.param_count,
            model.param_count()
        )));
    }
    let expected = 8 * header.param_count;
    if body.len() < expected {
        return Err(HcnError::CheckpointTruncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(HcnError::CheckpointShape(format!(
            "{} trailing bytes after the parameters",
            body.len() - expected
        )));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    model.set_flat_params(&values)?;
    Ok((model, header.config))
}

pub fn load_checkpoint(path: &Path) -> Result<HcnModel> {
    read_checkpoint(path).map(|(m, _)| m)
}

/// Loads a checkpoint and checks it was trained on views of the given widths.
pub fn load_checkpoint_for(path: &Path, view_dims: &[usize]) -> Result<HcnModel> {
    let model = load_checkpoint(path)?;
    if model.view_dims() != view_dims {
        return Err(HcnError::CheckpointShape(format!(
            "checkpoint has view widths {:?}, data has {:?}",
            model.view_dims(),
            view_dims
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseMatrix;

    fn tiny() -> HcnModel {
        let arch = Architecture {
            hidden: vec![5, 4],
            d_out: 3,
            ..Architecture::default()
        };
        HcnModel::new(&[4, 6], &arch, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny();
        let config = TrainingConfig::default();
        save_checkpoint(&model, &path, Some(&config)).unwrap();
        let (back, echoed) = read_checkpoint(&path).unwrap();
        assert_eq!(echoed, Some(config));
        let a: Vec<u64> = model.flat_params().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.flat_params().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        let x = DenseMatrix::filled(3, 4, 0.3);
        assert_eq!(model.view(0).encode(&x).unwrap(), back.view(0).encode(&x).unwrap());
    }

    #[test]
    fn corruption_is_classified() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path, None).unwrap();
        let good = fs::read(&path).unwrap();

        let mut versioned = good.clone();
        let pos = versioned.windows(18).position(|w| w == b"format_version = 1").unwrap();
        versioned[pos + 17] = b'7';
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(HcnError::CheckpointVersion { found: Some(_), .. })
        ));

        let mut garbled = good.clone();
        garbled[0] = b'X';
        fs::write(&path, &garbled).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HcnError::CheckpointVersion { found: None, .. })));

        fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HcnError::CheckpointTruncated { .. })));

        fs::write(&path, &good).unwrap();
        assert!(matches!(load_checkpoint_for(&path, &[4, 7]), Err(HcnError::CheckpointShape(_))));
        assert!(load_checkpoint_for(&path, &[4, 6]).is_ok());
    }
}
