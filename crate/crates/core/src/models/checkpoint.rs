//! Two-file checkpoints: `<name>.json` manifest plus `<name>.bin` holding the
//! parameters as little-endian `f64` in layout order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Params};
use crate::tasks::RunningMoments;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub param_layout: Vec<ParamSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<RunningMoments>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Params,
    pub moments: Option<RunningMoments>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: Params) -> Self {
        Checkpoint {
            spec,
            params,
            moments: None,
            meta: Default::default(),
        }
    }

    pub fn with_moments(mut self, moments: RunningMoments) -> Self {
        self.moments = Some(moments);
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn network(&self) -> crate::models::Network {
        crate::models::Network {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }
}

/// The manifest file of the checkpoint named by `path`.
pub fn manifest_path(path: &Path) -> PathBuf {
    paths(path).0
}

/// `foo`, `foo.json` and `foo.bin` all name the same checkpoint.
fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (json_path, bin_path) = paths(path);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        param_layout: ckpt.spec.layout(),
        moments: ckpt.moments.clone(),
        meta: ckpt.meta.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut blob = Vec::with_capacity(ckpt.params.len() * 8);
    for v in ckpt.params.to_flat() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (json_path, bin_path) = paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CheckpointManifest {
            path: json_path.clone(),
            msg: e.to_string(),
        })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CheckpointManifest {
            path: json_path.clone(),
            msg: "missing format_version".into(),
        })?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::CheckpointVersion(version as u32));
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::CheckpointManifest {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    manifest.spec.validate()?;
    if manifest.param_layout != manifest.spec.layout() {
        return Err(Error::CheckpointManifest {
            path: json_path,
            msg: "param_layout does not match spec".into(),
        });
    }
    let expected = manifest.spec.num_params();
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() != expected * 8 {
        return Err(Error::CheckpointLength {
            expected,
            actual: blob.len() / 8,
        });
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = Params::from_flat(&manifest.spec, &flat)?;
    Ok(Checkpoint {
        spec: manifest.spec,
        params,
        moments: manifest.moments,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Activation, Head};
    use crate::numcore::{Rng, Tensor};

    fn sample() -> Checkpoint {
        let spec = ModelSpec::new(4, &[8], Activation::Tanh, Head::DiagGaussian { dim: 2 });
        let mut rng = Rng::new(12);
        let mut params = init_params(&spec, &mut rng);
        params.log_std = Some(Tensor::row(&[-0.3, 0.1]));
        Checkpoint::new(spec, params).with_meta("env_id", "mountaincar")
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut moments = RunningMoments::new(4);
        moments
            .update(&Rng::new(1).normal_tensor([7, 4], 3.0))
            .unwrap();
        let ckpt = sample().with_moments(moments);
        let path = dir.path().join("teacher");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path.with_extension("json")).unwrap();
        assert_eq!(back, ckpt);
        let (a, b) = (ckpt.params.to_flat(), back.params.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let m = back.moments.unwrap();
        let orig = ckpt.moments.as_ref().unwrap();
        assert_eq!(m.count, orig.count);
        assert!(m.mean.iter().zip(&orig.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(m.m2.iter().zip(&orig.m2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        save_checkpoint(&path, &sample()).unwrap();
        let bin = dir.path().join("t.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointLength { .. })));
    }

    #[test]
    fn unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        save_checkpoint(&path, &sample()).unwrap();
        let json = dir.path().join("t.json");
        let text = fs::read_to_string(&json).unwrap();
        fs::write(&json, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion(7))));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        save_checkpoint(&path, &sample()).unwrap();
        fs::write(dir.path().join("t.json"), "{\"format_version\": 1, \"spec\": 3}").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointManifest { .. })
        ));
    }
}
