//! Model directories: everything segmentation needs from the atlas set.
//!
//! ```text
//! model.json            manifest with SHA-256 checksums of every file
//! template.nii          canonical template (defines the canonical grid)
//! mask.nii              brain mask (uint8 0/1)
//! harmonization.bin     mask + mean sorted intensity vector
//! manifold.bin          PCA atlas manifold
//! atlases/<id>_intensity.nii, atlases/<id>_labels.nii
//! ```
//!
//! Atlas intensities are stored harmonised against the model, so that they
//! are directly comparable with harmonised test scans. All files are written
//! deterministically: refitting identical inputs reproduces them byte for
//! byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas_select::{build_manifold, PcaManifold};
use crate::error::{Error, Result};
use crate::harmonize::{build_mask, build_model, harmonize, BrainMask, HarmonizationModel};
use crate::registration::{estimate_affine, RegistrationConfig};
use crate::segmenter::Atlas;
use crate::volume::{load_labels, load_volume, resample, store_nifti, Interp, LabelVolume, Volume};

pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub id: String,
    pub intensity: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub label_count: usize,
    pub canonical_dims: [usize; 3],
    pub template: String,
    pub mask: String,
    pub harmonization: String,
    pub manifold: String,
    pub atlases: Vec<AtlasEntry>,
    /// Relative path → lowercase hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

/// One atlas given to `fit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasInput {
    pub id: String,
    pub intensity: PathBuf,
    pub labels: PathBuf,
}

impl AtlasInput {
    /// Atlas whose id is the intensity file name without its NIfTI
    /// extension.
    pub fn from_paths(intensity: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        let intensity = intensity.into();
        Self {
            id: file_stem(&intensity),
            intensity,
            labels: labels.into(),
        }
    }
}

/// File name without `.nii` / `.nii.gz`.
pub fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
        return Err(Error::Config(format!(
            "atlas id {id:?} must be non-empty and use only letters, digits, '.', '_' or '-'"
        )));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical-grid atlas data produced during fitting, before it is written.
struct FittedAtlas {
    id: String,
    intensity: Volume,
    labels: LabelVolume,
}

/// Fits a model from labelled atlases and writes it to `model_dir`.
///
/// Atlases already on the template grid are used as they are; any other
/// atlas is affinely registered to the template and resampled (trilinear
/// for intensity, nearest neighbour for labels).
pub fn fit_model(
    atlases: &[AtlasInput],
    template: Option<&Path>,
    label_count: Option<usize>,
    registration: &RegistrationConfig,
    model_dir: &Path,
) -> Result<ModelManifest> {
    if atlases.is_empty() {
        return Err(Error::InsufficientData("fit needs at least one atlas".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in atlases {
        check_id(&a.id)?;
        if !seen.insert(a.id.as_str()) {
            return Err(Error::Config(format!("duplicate atlas id {:?}", a.id)));
        }
    }
    if let Some(l) = label_count {
        if l < 2 {
            return Err(Error::Config(format!("label_count must be at least 2, got {l}")));
        }
    }
    let template = load_volume(template.unwrap_or(&atlases[0].intensity))?;
    let canonical = template.grid().clone();

    let mut fitted = Vec::with_capacity(atlases.len());
    for a in atlases {
        let name = |e: Error| match e {
            Error::GeometryMismatch(m) => Error::GeometryMismatch(format!("atlas {}: {m}", a.id)),
            other => other,
        };
        let intensity = load_volume(&a.intensity)?;
        let labels = load_labels(&a.labels, label_count)?;
        intensity
            .grid()
            .ensure_same(labels.grid(), "intensity vs labels")
            .map_err(name)?;
        let (intensity, labels) = if intensity.grid().same_as(&canonical) {
            // keep the template's exact affine so every canonical volume
            // shares one grid
            (
                Volume::new(canonical.clone(), intensity.into_data())?,
                LabelVolume::new(canonical.clone(), labels.data().to_vec(), labels.label_count())?,
            )
        } else {
            log::info!("registering atlas {} to the template", a.id);
            let reg = estimate_affine(&intensity, &template, registration)?;
            (
                resample(&intensity, &reg.transform, &canonical, Interp::Trilinear)?,
                resample(&labels, &reg.transform, &canonical, Interp::Nearest)?,
            )
        };
        fitted.push(FittedAtlas {
            id: a.id.clone(),
            intensity,
            labels,
        });
    }

    let l = match label_count {
        Some(l) => l,
        None => fitted.iter().map(|a| a.labels.label_count()).max().unwrap_or(0).max(2),
    };
    let label_maps: Vec<LabelVolume> = fitted.iter().map(|a| a.labels.clone()).collect();
    let mask = build_mask(&label_maps)?;
    let intensities: Vec<Volume> = fitted.iter().map(|a| a.intensity.clone()).collect();
    let harmonization = build_model(&intensities, &mask)?;
    let named: Vec<(String, Volume)> = fitted.iter().map(|a| (a.id.clone(), a.intensity.clone())).collect();
    let manifold = build_manifold(&named, &mask)?;

    std::fs::create_dir_all(model_dir.join("atlases")).map_err(|e| Error::io(model_dir, e))?;
    let mut checksums = BTreeMap::new();
    let mut record = |rel: &str| -> Result<()> {
        let path = model_dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        checksums.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    };

    store_nifti(&template, &model_dir.join("template.nii"))?;
    record("template.nii")?;
    store_nifti(&mask.to_labels(), &model_dir.join("mask.nii"))?;
    record("mask.nii")?;
    harmonization.save(&model_dir.join("harmonization.bin"))?;
    record("harmonization.bin")?;
    manifold.save(&model_dir.join("manifold.bin"))?;
    record("manifold.bin")?;

    let mut entries = Vec::with_capacity(fitted.len());
    for a in &fitted {
        let (harmonized, fit) = harmonize(&harmonization, &a.intensity)?;
        if !fit.converged {
            log::warn!("harmonisation of atlas {} did not converge", a.id);
        }
        let entry = AtlasEntry {
            id: a.id.clone(),
            intensity: format!("atlases/{}_intensity.nii", a.id),
            labels: format!("atlases/{}_labels.nii", a.id),
        };
        store_nifti(&harmonized, &model_dir.join(&entry.intensity))?;
        record(&entry.intensity)?;
        let labels = LabelVolume::new(a.labels.grid().clone(), a.labels.data().to_vec(), l)?;
        store_nifti(&labels, &model_dir.join(&entry.labels))?;
        record(&entry.labels)?;
        entries.push(entry);
    }

    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        label_count: l,
        canonical_dims: canonical.dims,
        template: "template.nii".into(),
        mask: "mask.nii".into(),
        harmonization: "harmonization.bin".into(),
        manifold: "manifold.bin".into(),
        atlases: entries,
        checksums,
    };
    let path = model_dir.join(MODEL_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A loaded, checksum-verified model.
#[derive(Debug, Clone)]
pub struct Model {
    pub dir: PathBuf,
    pub manifest: ModelManifest,
    pub template: Volume,
    pub mask: BrainMask,
    pub harmonization: HarmonizationModel,
    pub manifold: PcaManifold,
    pub atlases: Vec<Atlas>,
}

impl Model {
    /// Loads `dir`. A missing directory or manifest is a configuration
    /// error; checksum or content problems are model errors.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("model directory {} does not exist", dir.display())));
        }
        let manifest_path = dir.join(MODEL_MANIFEST);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format version {}",
                manifest.format_version
            )));
        }
        let mut referenced = vec![
            manifest.template.as_str(),
            manifest.mask.as_str(),
            manifest.harmonization.as_str(),
            manifest.manifold.as_str(),
        ];
        for a in &manifest.atlases {
            referenced.push(&a.intensity);
            referenced.push(&a.labels);
        }
        for rel in &referenced {
            let expected = manifest
                .checksums
                .get(*rel)
                .ok_or_else(|| Error::Model(format!("no checksum recorded for {rel}")))?;
            let path = dir.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Model(format!("checksum mismatch for {rel}")));
            }
        }

        let template = load_volume(&dir.join(&manifest.template))?;
        let canonical = template.grid().clone();
        if canonical.dims != manifest.canonical_dims {
            return Err(Error::Model("template dims differ from the manifest".into()));
        }
        let mask = BrainMask::from_labels(&load_labels(&dir.join(&manifest.mask), None)?)?;
        let harmonization = HarmonizationModel::load(&dir.join(&manifest.harmonization))?;
        let manifold = PcaManifold::load(&dir.join(&manifest.manifold))?;
        if harmonization.mask.data() != mask.data() || manifold.mask.data() != mask.data() {
            return Err(Error::Model("mask differs between model files".into()));
        }
        let mut atlases = Vec::with_capacity(manifest.atlases.len());
        for a in &manifest.atlases {
            let intensity = load_volume(&dir.join(&a.intensity))?;
            let labels = load_labels(&dir.join(&a.labels), Some(manifest.label_count))?;
            if !intensity.grid().same_as(&canonical) || !labels.grid().same_as(&canonical) {
                return Err(Error::Model(format!("atlas {} is not on the template grid", a.id)));
            }
            atlases.push(Atlas {
                id: a.id.clone(),
                intensity: Volume::new(canonical.clone(), intensity.into_data())?,
                labels: LabelVolume::new(canonical.clone(), labels.into_data(), manifest.label_count)?,
            });
        }
        if manifold.atlas_ids != manifest.atlases.iter().map(|a| a.id.clone()).collect::<Vec<_>>() {
            return Err(Error::Model("manifold atlas ids differ from the manifest".into()));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            template: Volume::new(canonical, template.into_data())?,
            mask,
            harmonization,
            manifold,
            atlases,
        })
    }

    pub fn label_count(&self) -> usize {
        self.manifest.label_count
    }
}
