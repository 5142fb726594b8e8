//! End-to-end commands: fitting a model directory, segmenting scans (one or
//! a batch), generating phantoms and evaluating segmentations.

mod config;
mod model;
mod report;
mod segment;

use std::path::{Path, PathBuf};

pub use config::PipelineConfig;
pub use model::{fit_model, file_stem, sha256_hex, AtlasEntry, AtlasInput, Model, ModelManifest, MODEL_MANIFEST};
pub use report::{emit_report, mid_slices, summary_text, RunSummary, Slice, SLICE_FILES, SUMMARY_FILE};
pub use segment::{
    cmd_batch, cmd_segment, segment_with_model, BatchRow, Evaluation, SegmentResult, StageTimes, BATCH_SUMMARY,
    CONFIDENCE_FILE, CONFIG_FILE, INTERMEDIATES_DIR, LABELS_FILE, TRANSFORM_FILE,
};

use crate::error::{Error, Result};
use crate::metrics::{best_within_delta, evaluate_labels, LabelNames, LabelReport};
use crate::phantom::PhantomSpec;
use crate::registration::AffineTransform;
use crate::volume::{load_labels, resample, store_nifti, Interp};

/// Fits a model from `atlases` into the configured model directory.
pub fn cmd_fit(atlases: &[AtlasInput], config: &PipelineConfig) -> Result<ModelManifest> {
    let dir = config
        .model_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no model directory given".into()))?;
    fit_model(
        atlases,
        config.template.as_deref(),
        config.label_count,
        &config.registration,
        dir,
    )
}

/// Paths written by [`cmd_phantom`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhantomFiles {
    pub intensity: PathBuf,
    pub labels: PathBuf,
}

/// Writes `<dir>/<name>.nii` (intensity) and `<dir>/<name>_labels.nii`.
pub fn cmd_phantom(spec: &PhantomSpec, dir: &Path, name: &str) -> Result<PhantomFiles> {
    let p = spec.generate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = PhantomFiles {
        intensity: dir.join(format!("{name}.nii")),
        labels: dir.join(format!("{name}_labels.nii")),
    };
    store_nifti(&p.intensity, &files.intensity)?;
    store_nifti(&p.labels, &files.labels)?;
    Ok(files)
}

/// Tolerances of the best-within-Δ table.
pub const DELTAS: [f64; 6] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05];

/// Evaluates each prediction against `truth`, writing `<stem>.csv` and
/// `<stem>_summary.json` per prediction and, for several predictions,
/// `best_within_delta.tsv` over the labels evaluated in all of them.
///
/// With `transform` (prediction world → truth world) predictions are first
/// resampled onto the truth grid by nearest neighbour; without it a grid
/// mismatch is an error.
pub fn cmd_evaluate(
    predictions: &[PathBuf],
    truth: &Path,
    names: &LabelNames,
    transform: Option<&AffineTransform>,
    output_dir: &Path,
) -> Result<Vec<LabelReport>> {
    if predictions.is_empty() {
        return Err(Error::Config("evaluate needs at least one prediction".into()));
    }
    let truth = load_labels(truth, None)?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut reports = Vec::with_capacity(predictions.len());
    let mut stems = Vec::with_capacity(predictions.len());
    for (i, path) in predictions.iter().enumerate() {
        let mut pred = load_labels(path, None)?;
        if let Some(t) = transform {
            pred = resample(&pred, t, truth.grid(), Interp::Nearest)?;
        }
        let report = evaluate_labels(&pred, &truth, names)?;
        let mut stem = file_stem(path);
        if stems.contains(&stem) {
            stem = format!("{stem}_{}", i + 1);
        }
        let csv = output_dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = output_dir.join(format!("{stem}_summary.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&report.summary())? + "\n")
            .map_err(|e| Error::io(&json, e))?;
        stems.push(stem);
        reports.push(report);
    }

    if reports.len() > 1 {
        let common: Vec<u16> = reports[0]
            .rows
            .iter()
            .filter(|r| !r.is_missing())
            .map(|r| r.label)
            .filter(|l| reports.iter().all(|rep| rep.rows.iter().any(|r| r.label == *l && !r.is_missing())))
            .collect();
        if common.is_empty() {
            log::warn!("no label is evaluated in every prediction; skipping best-within-delta table");
        } else {
            let dsc: Vec<Vec<f64>> = reports
                .iter()
                .map(|rep| {
                    common
                        .iter()
                        .map(|l| rep.rows.iter().find(|r| r.label == *l).and_then(|r| r.dsc).unwrap_or(0.0))
                        .collect()
                })
                .collect();
            let counts = best_within_delta(&dsc, &DELTAS)?;
            let mut tsv = String::from("prediction");
            for d in DELTAS {
                tsv.push_str(&format!("\tdelta_{d:.2}"));
            }
            tsv.push('\n');
            for (stem, row) in stems.iter().zip(&counts) {
                tsv.push_str(stem);
                for c in row {
                    tsv.push_str(&format!("\t{c}"));
                }
                tsv.push('\n');
            }
            let path = output_dir.join("best_within_delta.tsv");
            std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(reports)
}
