//! Layer bundles: named (weight, calibration) pairs loaded from a JSON
//! manifest. Tensor paths in the manifest resolve relative to the manifest
//! file itself, so a bundle directory can be moved around freely.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, ErrorKind};
use std::path::{Path, PathBuf};

use fastobq_core::Mat;
use serde::{Deserialize, Serialize};

use crate::tensor::read_tensor;
use crate::HarnessError;

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct Manifest {
    pub layers: Vec<ManifestLayer>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ManifestLayer {
    pub name: String,
    pub weight: PathBuf,
    pub calib: PathBuf,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// A layer ready to quantize: `weight` is d_row x d_col, `calib` is
/// d_col x n_samples. The column/row agreement is checked at load time.
#[derive(Clone, Debug)]
pub struct LayerBundle {
    pub name: String,
    pub weight: Mat,
    pub calib: Mat,
    pub metadata: BTreeMap<String, String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest, HarnessError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => HarnessError::MissingFile(path.to_path_buf()),
        _ => HarnessError::Io(e),
    })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Loads every layer listed in the manifest. An empty manifest is legal and
/// yields an empty vec.
pub fn load_bundle(manifest_path: &Path) -> Result<Vec<LayerBundle>, HarnessError> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(load_layer(base, entry)?);
    }
    Ok(layers)
}

fn load_layer(base: &Path, entry: &ManifestLayer) -> Result<LayerBundle, HarnessError> {
    let weight = read_tensor(&base.join(&entry.weight))?.to_mat()?;
    let calib = read_tensor(&base.join(&entry.calib))?.to_mat()?;
    if weight.cols() != calib.rows() {
        return Err(HarnessError::ShapeMismatch {
            context: format!(
                "layer '{}': weight is {}x{} but calibration has {} feature rows",
                entry.name,
                weight.rows(),
                weight.cols(),
                calib.rows()
            ),
        });
    }
    if !weight.is_finite() || !calib.is_finite() {
        return Err(HarnessError::Core(fastobq_core::Error::NonFinite));
    }
    Ok(LayerBundle {
        name: entry.name.clone(),
        weight,
        calib,
        metadata: entry.metadata.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{write_tensor, TensorFile};

    fn write_mat(dir: &Path, name: &str, m: &Mat) -> PathBuf {
        let path = dir.join(name);
        write_tensor(&TensorFile::from_mat(m), &path).unwrap();
        PathBuf::from(name)
    }

    fn write_manifest(dir: &Path, manifest: &Manifest) -> PathBuf {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(manifest).unwrap()).unwrap();
        path
    }

    #[test]
    fn loads_layers_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = Mat::from_vec(3, 4, (0..12).map(f64::from).collect());
        let manifest = Manifest {
            layers: vec![ManifestLayer {
                name: "l0".into(),
                weight: write_mat(dir.path(), "w.ftns", &w),
                calib: {
                    write_mat(&dir.path().join("sub"), "x.ftns", &x);
                    PathBuf::from("sub/x.ftns")
                },
                metadata: BTreeMap::new(),
            }],
        };
        let path = write_manifest(dir.path(), &manifest);
        let layers = load_bundle(&path).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].name, "l0");
        assert_eq!(layers[0].weight.max_abs_diff(&w), 0.0);
        assert_eq!(layers[0].calib.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn empty_manifest_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &Manifest { layers: vec![] });
        assert!(load_bundle(&path).unwrap().is_empty());
    }

    #[test]
    fn shape_disagreement_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            layers: vec![ManifestLayer {
                name: "bad".into(),
                weight: write_mat(dir.path(), "w.ftns", &Mat::zeros(2, 3)),
                calib: write_mat(dir.path(), "x.ftns", &Mat::zeros(4, 5)),
                metadata: BTreeMap::new(),
            }],
        };
        let path = write_manifest(dir.path(), &manifest);
        let err = load_bundle(&path).unwrap_err();
        assert!(matches!(err, HarnessError::ShapeMismatch { .. }));
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn missing_tensor_file_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            layers: vec![ManifestLayer {
                name: "l".into(),
                weight: PathBuf::from("nope.ftns"),
                calib: PathBuf::from("also_nope.ftns"),
                metadata: BTreeMap::new(),
            }],
        };
        let path = write_manifest(dir.path(), &manifest);
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            HarnessError::MissingFile(_)
        ));
    }

    #[test]
    fn missing_manifest_is_missing_file() {
        assert!(matches!(
            load_bundle(Path::new("/nonexistent/manifest.json")).unwrap_err(),
            HarnessError::MissingFile(_)
        ));
    }

    #[test]
    fn garbage_manifest_is_a_json_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            HarnessError::Json(_)
        ));
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Mat::zeros(2, 2);
        w.set(0, 0, f64::NAN);
        let manifest = Manifest {
            layers: vec![ManifestLayer {
                name: "nan".into(),
                weight: write_mat(dir.path(), "w.ftns", &w),
                calib: write_mat(dir.path(), "x.ftns", &Mat::zeros(2, 3)),
                metadata: BTreeMap::new(),
            }],
        };
        let path = write_manifest(dir.path(), &manifest);
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            HarnessError::Core(fastobq_core::Error::NonFinite)
        ));
    }
}
