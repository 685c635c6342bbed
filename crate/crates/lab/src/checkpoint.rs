//! Checkpoints: a JSON manifest next to a raw little-endian `f64` blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vard_core::autodiff::ParamStore;
use vard_core::ddpm::{Denoiser, DenoiserArch};
use vard_core::prm::{TargetScale, ValueArch, ValueNet};
use vard_core::rng::seeded;
use vard_core::so3::{VectorFieldArch, VectorFieldNet};

use crate::config::ScheduleConfig;
use crate::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Manifest {
    Denoiser {
        arch: DenoiserArch,
        schedule: ScheduleConfig,
        params: usize,
        blob: String,
    },
    Value {
        arch: ValueArch,
        target: TargetScale,
        params: usize,
        blob: String,
    },
    VectorField {
        arch: VectorFieldArch,
        params: usize,
        blob: String,
    },
}

impl Manifest {
    fn blob(&self) -> &str {
        match self {
            Manifest::Denoiser { blob, .. }
            | Manifest::Value { blob, .. }
            | Manifest::VectorField { blob, .. } => blob,
        }
    }

    fn params(&self) -> usize {
        match self {
            Manifest::Denoiser { params, .. }
            | Manifest::Value { params, .. }
            | Manifest::VectorField { params, .. } => *params,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> LabError {
    LabError::Io(format!("{}: {e}", path.display()))
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn write(path: &Path, manifest: &Manifest, store: &ParamStore) -> Result<(), LabError> {
    let bytes: Vec<u8> = store
        .flatten()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let blob = blob_path(path);
    std::fs::write(&blob, bytes).map_err(|e| io_err(&blob, e))?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<(Manifest, Vec<f64>), LabError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        LabError::Config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let blob = path.with_file_name(manifest.blob());
    let bytes = std::fs::read(&blob).map_err(|e| io_err(&blob, e))?;
    if bytes.len() != 8 * manifest.params() {
        return Err(LabError::Config(format!(
            "{}: expected {} parameters, blob holds {} bytes",
            blob.display(),
            manifest.params(),
            bytes.len()
        )));
    }
    let flat = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((manifest, flat))
}

fn blob_name(path: &Path) -> String {
    blob_path(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn save_denoiser(
    path: &Path,
    model: &Denoiser,
    schedule: &ScheduleConfig,
) -> Result<(), LabError> {
    let manifest = Manifest::Denoiser {
        arch: model.arch().clone(),
        schedule: schedule.clone(),
        params: model.store().num_scalars(),
        blob: blob_name(path),
    };
    write(path, &manifest, model.store())
}

/// Loads a denoiser and checks that it was trained under `schedule`.
pub fn load_denoiser(path: &Path, schedule: &ScheduleConfig) -> Result<Denoiser, LabError> {
    let (manifest, flat) = read(path)?;
    let Manifest::Denoiser {
        arch, schedule: s, ..
    } = manifest
    else {
        return Err(LabError::Config(format!(
            "{} is not a denoiser checkpoint",
            path.display()
        )));
    };
    if &s != schedule {
        return Err(LabError::Config(format!(
            "{} was trained with a different noise schedule",
            path.display()
        )));
    }
    let mut model = Denoiser::new(arch, &mut seeded(0))?;
    model.store_mut().load_flat(&flat)?;
    Ok(model)
}

pub fn save_value(path: &Path, vnet: &ValueNet) -> Result<(), LabError> {
    let manifest = Manifest::Value {
        arch: vnet.arch().clone(),
        target: vnet.target,
        params: vnet.store().num_scalars(),
        blob: blob_name(path),
    };
    write(path, &manifest, vnet.store())
}

pub fn load_value(path: &Path) -> Result<ValueNet, LabError> {
    let (manifest, flat) = read(path)?;
    let Manifest::Value { arch, target, .. } = manifest else {
        return Err(LabError::Config(format!(
            "{} is not a value checkpoint",
            path.display()
        )));
    };
    let mut vnet = ValueNet::new(arch, &mut seeded(0))?;
    vnet.store_mut().load_flat(&flat)?;
    vnet.target = target;
    Ok(vnet)
}

pub fn save_vector_field(path: &Path, net: &VectorFieldNet) -> Result<(), LabError> {
    let manifest = Manifest::VectorField {
        arch: net.arch().clone(),
        params: net.store().num_scalars(),
        blob: blob_name(path),
    };
    write(path, &manifest, net.store())
}

pub fn load_vector_field(path: &Path) -> Result<VectorFieldNet, LabError> {
    let (manifest, flat) = read(path)?;
    let Manifest::VectorField { arch, .. } = manifest else {
        return Err(LabError::Config(format!(
            "{} is not a vector-field checkpoint",
            path.display()
        )));
    };
    let mut net = VectorFieldNet::new(arch, &mut seeded(0))?;
    net.store_mut().load_flat(&flat)?;
    Ok(net)
}
