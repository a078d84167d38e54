//! Model serialization: a JSON manifest describing geometry, grids, config,
//! and parameter shapes, next to one raw little-endian f32 blob per named
//! parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::GridSet;
use crate::error::{Error, Result};
use crate::geometry::ImageGeometry;
use crate::grid::{Axis, DiscretizationGrid};
use crate::net::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GridSpec {
    axis: Axis,
    thresholds: Vec<f64>,
    upper_bound: f64,
}

impl GridSpec {
    fn of(g: &DiscretizationGrid) -> Self {
        GridSpec {
            axis: g.axis(),
            thresholds: g.thresholds().to_vec(),
            upper_bound: g.upper_bound(),
        }
    }

    fn build(self) -> Result<DiscretizationGrid> {
        DiscretizationGrid::from_parts(self.axis, self.thresholds, self.upper_bound)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    geometry: ImageGeometry,
    grid_x: GridSpec,
    grid_y: GridSpec,
    grid_z: GridSpec,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

fn blob_name(param: &str) -> String {
    format!("params/{param}.f32")
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut entries = Vec::new();
    for (name, tensor) in model.named_params() {
        let file = blob_name(&name);
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ParamEntry { name, shape: tensor.shape().to_vec(), file });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        geometry: model.geometry().clone(),
        grid_x: GridSpec::of(&model.grids().x),
        grid_y: GridSpec::of(&model.grids().y),
        grid_z: GridSpec::of(&model.grids().z),
        config: model.config().clone(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let grids = GridSet::new(
        manifest.grid_x.build()?,
        manifest.grid_y.build()?,
        manifest.grid_z.build()?,
    )?;
    let mut model = Model::new(manifest.geometry, grids, manifest.config)?;

    let listed: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
    let expected: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    if listed != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Config(format!(
            "checkpoint parameters {listed:?} do not match model parameters {expected:?}"
        )));
    }

    for (entry, (name, tensor)) in manifest.params.iter().zip(model.named_params_mut()) {
        debug_assert_eq!(entry.name, name);
        if entry.shape != tensor.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let expected_len = tensor.numel() as u64 * 4;
        if bytes.len() as u64 != expected_len {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                expected: expected_len,
                found: bytes.len() as u64,
            });
        }
        for (slot, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{normal_grid, uniform_grid};
    use crate::net::model::HeadKind;
    use crate::net::tape::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn test_model(head: HeadKind) -> Model {
        let geom = ImageGeometry::with_stride(16, 16, 16.0, 4).unwrap();
        let grids = GridSet::new(
            uniform_grid(Axis::X, 16.0, 8).unwrap(),
            uniform_grid(Axis::Y, 16.0, 8).unwrap(),
            normal_grid(Axis::Z, 16.0, 2).unwrap(),
        )
        .unwrap();
        let cfg = ModelConfig {
            joints: 2,
            widths: vec![6, 12],
            kernels: vec![3, 3],
            feature_channels: 16,
            head,
            ..ModelConfig::default()
        };
        Model::new(geom, grids, cfg).unwrap()
    }

    fn random_input(seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn save_load_roundtrip_preserves_behavior() {
        for head in [HeadKind::Ordinal, HeadKind::Offset] {
            let model = test_model(head);
            let dir = tempfile::tempdir().unwrap();
            save(&model, dir.path()).unwrap();
            let loaded = load(dir.path()).unwrap();
            assert_eq!(loaded.param_count(), model.param_count());

            let input = random_input(21);
            let mut t1 = Tape::new();
            let p1 = model.forward(&mut t1, input.clone()).unwrap();
            let mut t2 = Tape::new();
            let p2 = loaded.forward(&mut t2, input).unwrap();
            // parameters pass through f32, so outputs agree to f32 precision
            let diff = t1
                .value(p1.coord_x)
                .max_abs_diff(t2.value(p2.coord_x));
            assert!(diff < 1e-4, "coord drift {diff}");
        }
    }

    #[test]
    fn second_save_is_byte_identical() {
        let model = test_model(HeadKind::Ordinal);
        let d1 = tempfile::tempdir().unwrap();
        save(&model, d1.path()).unwrap();
        let loaded = load(d1.path()).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save(&loaded, d2.path()).unwrap();
        for (name, _) in model.named_params() {
            let b1 = std::fs::read(d1.path().join(blob_name(&name))).unwrap();
            let b2 = std::fs::read(d2.path().join(blob_name(&name))).unwrap();
            assert_eq!(b1, b2, "{name} blob changed across save/load/save");
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let model = test_model(HeadKind::Ordinal);
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        match load(dir.path()) {
            Err(Error::FormatVersion { found: 9, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = test_model(HeadKind::Ordinal);
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let blob = dir.path().join(blob_name("stage0.weight"));
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        match load(dir.path()) {
            Err(Error::Truncated { expected, found, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(found, bytes.len() as u64 - 4);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
