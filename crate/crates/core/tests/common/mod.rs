//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tilefuse::phantom::{Misalignment, PhantomSpec};
use tilefuse::pipeline::{cmd_phantom, fit_model, AtlasInput, PhantomFiles};
use tilefuse::registration::RegistrationConfig;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_tilefuse"))
}

/// The reference-plugin command for the in-process `rule`.
pub fn plugin_cmd(rule: &str) -> String {
    format!("{} plugin {rule}", bin().display())
}

/// Small grids cannot hold the default six shells, so they get three.
pub fn spec(dims: usize, seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [dims; 3],
        label_count: if dims < 32 { 3 } else { 6 },
        seed,
        texture_amplitude: 0.8,
        ..Default::default()
    }
}

pub fn misaligned(dims: usize, seed: u64) -> PhantomSpec {
    PhantomSpec {
        misalignment: Misalignment {
            rotation_deg: [4.0, -3.0, 5.0],
            translation_mm: [3.0, -4.0, 2.0],
            scale: [1.04, 0.97, 1.0],
        },
        ..spec(dims, seed)
    }
}

pub fn write_phantom(dir: &Path, name: &str, spec: &PhantomSpec) -> PhantomFiles {
    cmd_phantom(spec, dir, name).unwrap()
}

/// Fits a model on unmisaligned phantoms with seeds `0..n` and returns the
/// atlas files (atlas `i` is named `atlas{i}`).
pub fn fit_phantom_model(root: &Path, dims: usize, n: u64) -> (PathBuf, Vec<PhantomFiles>) {
    let data = root.join("atlases");
    let files: Vec<PhantomFiles> = (0..n)
        .map(|s| write_phantom(&data, &format!("atlas{s}"), &spec(dims, s)))
        .collect();
    let inputs: Vec<AtlasInput> = files
        .iter()
        .map(|f| AtlasInput::from_paths(&f.intensity, &f.labels))
        .collect();
    let model = root.join("model");
    fit_model(&inputs, None, None, &RegistrationConfig::default(), &model).unwrap();
    (model, files)
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
