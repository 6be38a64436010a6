//! Checkpoint archives: safetensors files whose tensors are keyed by module
//! path (`g.res0.conv1.weight`, `u.head.bias`, ...) and whose metadata carries
//! the model configuration and training epoch.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::models::{build_segmenter, ModelBundle, ModelConfig, Segmenter};
use crate::nn::ParamStore;

const FORMAT_TAG: &str = "sp-cyclegan-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub config: ModelConfig,
    pub epoch: usize,
    pub networks: Vec<String>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes the given networks atomically (temporary file, then rename).
pub fn save(
    path: &Path,
    config: &ModelConfig,
    epoch: usize,
    networks: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (prefix, params) in networks {
        for (name, param) in params.named() {
            tensors.insert(format!("{prefix}.{name}"), param.var.as_tensor().clone());
        }
    }
    let names: Vec<&str> = networks.iter().map(|(n, _)| *n).collect();
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("model_config".to_string(), serde_json::to_string(config)?),
        ("epoch".to_string(), epoch.to_string()),
        ("networks".to_string(), names.join(",")),
    ]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = tmp_path(path);
    safetensors::serialize_to_file(tensors.iter(), Some(metadata), &tmp)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn read_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path)?;
    info_from_bytes(path, &bytes)
}

fn info_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointInfo> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata"))?;
    let get = |key: &str| {
        meta.get(key)
            .cloned()
            .ok_or_else(|| ckpt_err(path, format!("metadata lacks {key}")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(ckpt_err(path, "unrecognized archive format"));
    }
    let config: ModelConfig = serde_json::from_str(&get("model_config")?)?;
    let epoch = get("epoch")?
        .parse()
        .map_err(|_| ckpt_err(path, "epoch is not an integer"))?;
    let networks = get("networks")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    Ok(CheckpointInfo {
        config,
        epoch,
        networks,
    })
}

/// Loads parameters into `networks`, refusing archives built from a
/// different model configuration. Returns the stored epoch.
pub fn load_into(
    path: &Path,
    expected: &ModelConfig,
    networks: &[(&str, &ParamStore)],
    device: &Device,
) -> Result<usize> {
    let bytes = fs::read(path)?;
    let info = info_from_bytes(path, &bytes)?;
    if &info.config != expected {
        return Err(ckpt_err(
            path,
            format!(
                "model config mismatch: archive has {:?}, expected {:?}",
                info.config, expected
            ),
        ));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    for (prefix, params) in networks {
        let values: BTreeMap<String, Tensor> = params
            .named()
            .into_iter()
            .map(|(name, _)| {
                let key = format!("{prefix}.{name}");
                tensors
                    .get(&key)
                    .cloned()
                    .map(|t| (name, t))
                    .ok_or_else(|| ckpt_err(path, format!("missing tensor {key}")))
            })
            .collect::<Result<_>>()?;
        params.restore(&values)?;
    }
    Ok(info.epoch)
}

impl ModelBundle {
    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        save(path, &self.config, epoch, &self.networks())
    }

    /// Rebuilds a bundle from an archive. The segmenter is restored when the
    /// archive holds one.
    pub fn load(path: &Path, expected: &ModelConfig, device: &Device) -> Result<(Self, usize)> {
        let info = read_info(path)?;
        let bundle = if info.networks.iter().any(|n| n == "u") {
            ModelBundle::new(expected, device)?
        } else {
            ModelBundle::without_segmenter(expected, device)?
        };
        let epoch = load_into(path, expected, &bundle.networks(), device)?;
        Ok((bundle, epoch))
    }
}

pub fn save_segmenter(path: &Path, config: &ModelConfig, seg: &Segmenter, epoch: usize) -> Result<()> {
    save(path, config, epoch, &[("u", seg.params())])
}

pub fn load_segmenter(path: &Path, expected: &ModelConfig, device: &Device) -> Result<(Segmenter, usize)> {
    let seg = build_segmenter(expected, device)?;
    let epoch = load_into(path, expected, &[("u", seg.params())], device)?;
    Ok((seg, epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SegmenterKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_channels: 1,
            num_classes: 3,
            segmenter_kind: SegmenterKind::NestedUnet,
            base_width: 4,
            generator_blocks: 1,
            init_seed: 11,
        }
    }

    #[test]
    fn bundle_round_trips_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/bundle.safetensors");
        let original = ModelBundle::new(&cfg(), &Device::Cpu).unwrap();
        original.save(&path, 7).unwrap();
        assert!(!tmp_path(&path).exists());

        let other = ModelConfig {
            init_seed: 12,
            ..cfg()
        };
        let (loaded, epoch) = ModelBundle::load(&path, &cfg(), &Device::Cpu).unwrap();
        assert_eq!(epoch, 7);
        for ((_, a), (_, b)) in original.networks().iter().zip(loaded.networks()) {
            for ((na, pa), (nb, pb)) in a.named().iter().zip(b.named()) {
                assert_eq!(na, &nb);
                let va = pa.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let vb = pb.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert_eq!(va, vb);
            }
        }
        assert!(matches!(
            ModelBundle::load(&path, &other, &Device::Cpu),
            Err(Error::Checkpoint { .. })
        ));
        let info = read_info(&path).unwrap();
        assert_eq!(info.networks, ["g", "f", "d_x", "d_y", "u"]);
    }
}
