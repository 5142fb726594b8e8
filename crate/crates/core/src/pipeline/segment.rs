//! Single-scan segmentation: pre-hook, registration to the template,
//! harmonisation, tiled segmentation, fusion and mapping back to the scan.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use super::model::{file_stem, Model};
use super::report::{emit_report, RunSummary};
use crate::atlas_select::select_indices;
use crate::error::{Error, Result};
use crate::fusion::fuse_detailed;
use crate::harmonize::{harmonize, HarmonizationFit};
use crate::metrics::{evaluate_labels, LabelNames, LabelReport};
use crate::registration::{estimate_affine, AffineTransform};
use crate::segmenter::{segment_tile, Atlas, TileTask};
use crate::tiling::{extract_tile, SubSpace, TileLattice};
use crate::volume::{load_labels, load_volume, resample, store_nifti, Interp, LabelVolume, Volume};

pub const LABELS_FILE: &str = "labels.nii";
pub const CONFIDENCE_FILE: &str = "confidence.nii";
pub const TRANSFORM_FILE: &str = "transform.txt";
pub const CONFIG_FILE: &str = "config.json";
pub const INTERMEDIATES_DIR: &str = "intermediates";

/// Optional evaluation against a reference segmentation of the input.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub truth: Option<PathBuf>,
    pub names: LabelNames,
}

/// Wall time of each stage, in execution order.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimes(pub Vec<(String, f64)>);

impl StageTimes {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => e.in_stage(stage),
        });
        self.0.push((stage.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SegmentResult {
    /// Native-grid labels.
    pub labels: LabelVolume,
    /// Native-grid fraction of covering tiles that voted for the winner.
    pub confidence: Volume,
    /// Scan world → template world.
    pub transform: AffineTransform,
    pub similarity: f64,
    pub harmonization: HarmonizationFit,
    pub lattice: TileLattice,
    pub selected_atlases: Vec<String>,
    /// Number of per-tile segmenter invocations.
    pub tile_invocations: usize,
    pub uncovered_voxels: usize,
    pub warnings: Vec<String>,
    pub stages: StageTimes,
    pub wall_seconds: f64,
    pub metrics: Option<LabelReport>,
}

/// Runs `<hook> <input> <output>` and loads its output.
fn run_pre_hook(hook: &str, input: &Path, output: &Path) -> Result<Volume> {
    let argv = shlex::split(hook)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("cannot parse pre-hook command {hook:?}")))?;
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let out = Command::new(&argv[0])
        .args(&argv[1..])
        .arg(abs(input)?)
        .arg(abs(output)?)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .output()
        .map_err(|e| Error::HookFailure {
            exit_code: None,
            stderr: format!("cannot start {:?}: {e}", argv[0]),
        })?;
    if !out.status.success() {
        return Err(Error::HookFailure {
            exit_code: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    load_volume(output)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Segments the scan at `input` with a loaded model, writing every output
/// under `output_dir`.
///
/// Outputs: `labels.nii`, `confidence.nii`, `transform.txt`,
/// `config.json`, `report/` and (unless purged) `intermediates/`. On error
/// whatever was written so far is left in place.
pub fn segment_with_model(
    input: &Path,
    model: &Model,
    config: &PipelineConfig,
    output_dir: &Path,
    evaluation: &Evaluation,
) -> Result<SegmentResult> {
    config.validate()?;
    let label_count = config.label_count.unwrap_or(model.label_count());
    if label_count < model.label_count() {
        return Err(Error::Config(format!(
            "label_count {label_count} is smaller than the model's {}",
            model.label_count()
        )));
    }
    let canonical = model.template.grid().clone();
    let lattice = config
        .lattice
        .build(canonical.dims)
        .map_err(|e| Error::Config(format!("lattice: {e}")))?;
    create_dir(output_dir)?;
    let inter = output_dir.join(INTERMEDIATES_DIR);
    create_dir(&inter)?;
    let path = output_dir.join(CONFIG_FILE);
    std::fs::write(&path, config.to_json() + "\n").map_err(|e| Error::io(&path, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let mut result = pool.install(|| run_stages(input, model, config, &lattice, label_count, output_dir, &inter))?;

    if let Some(truth) = &evaluation.truth {
        let report = result.stages.time("evaluate", || {
            let truth = load_labels(truth, None)?;
            let report = evaluate_labels(&result.labels, &truth, &evaluation.names)?;
            let path = output_dir.join("metrics.csv");
            std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
            Ok(report)
        })?;
        result.metrics = Some(report);
    }
    result.wall_seconds = start.elapsed().as_secs_f64();

    let scan_id = file_stem(input);
    let summary = RunSummary {
        scan_id: &scan_id,
        lattice_desc: describe_lattice(config, &result.lattice),
        segmenter: config.segmenter.name(),
        result: &result,
    };
    let scan = load_volume(input).ok();
    let report_warnings = emit_report(&output_dir.join("report"), &summary, scan.as_ref());
    result.warnings.extend(report_warnings);

    if !config.keep_intermediates {
        std::fs::remove_dir_all(&inter).map_err(|e| Error::io(&inter, e))?;
    }
    Ok(result)
}

fn describe_lattice(config: &PipelineConfig, lat: &TileLattice) -> String {
    let [cx, cy, cz] = lat.counts;
    let [sx, sy, sz] = lat.tile_size();
    let name = match config.lattice {
        crate::tiling::LatticeSpec::Preset(p) => p.to_string(),
        crate::tiling::LatticeSpec::Custom { .. } => "custom".into(),
    };
    format!("{name}: {} tiles ({cx}x{cy}x{cz}) of {sx}x{sy}x{sz}", lat.len())
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    input: &Path,
    model: &Model,
    config: &PipelineConfig,
    lattice: &TileLattice,
    label_count: usize,
    output_dir: &Path,
    inter: &Path,
) -> Result<SegmentResult> {
    let mut stages = StageTimes::default();
    let mut warnings = Vec::new();
    let canonical = model.template.grid().clone();

    let mut scan = stages.time("load", || load_volume(input))?;
    if let Some(hook) = &config.pre_hook {
        let hooked = stages.time("pre_hook", || {
            let out = run_pre_hook(hook, input, &inter.join("pre_hook.nii"))?;
            scan.grid().ensure_same(out.grid(), "pre-hook output vs input")?;
            Ok(out)
        })?;
        scan = hooked;
    }

    let reg = stages.time("register", || estimate_affine(&scan, &model.template, &config.registration))?;
    let canonical_scan = stages.time("resample", || {
        let v = resample(&scan, &reg.transform, &canonical, Interp::Trilinear)?;
        store_nifti(&v, &inter.join("canonical.nii"))?;
        Ok(v)
    })?;

    let (harmonized, fit) = stages.time("harmonize", || {
        let out = harmonize(&model.harmonization, &canonical_scan)?;
        store_nifti(&out.0, &inter.join("harmonized.nii"))?;
        Ok(out)
    })?;
    if !fit.converged {
        warnings.push(format!(
            "intensity harmonisation did not converge (beta0 {:.4}, beta1 {:.4})",
            fit.beta0, fit.beta1
        ));
    }

    let selected: Vec<&Atlas> = stages.time("select", || {
        let Some(wanted) = config.segmenter.n_atlases() else {
            return Ok(Vec::new());
        };
        let available = model.atlases.len();
        let n = wanted.min(available);
        if n < wanted {
            warnings.push(format!("{wanted} atlases requested but the model has {available}; using all"));
        }
        if model.manifold.is_degenerate() {
            warnings.push("atlas manifold is degenerate; atlases selected in model order".into());
        }
        let idx = select_indices(&model.manifold, &canonical_scan, n)?;
        Ok(idx.into_iter().map(|i| &model.atlases[i]).collect())
    })?;

    let tiles_dir = inter.join("tiles");
    let plugin_dir = inter.join("plugin");
    let invocations = AtomicUsize::new(0);
    let tile_segs = stages.time("segment", || {
        create_dir(&tiles_dir)?;
        let outcomes: Vec<Result<(SubSpace, LabelVolume)>> = lattice
            .tiles
            .par_iter()
            .map(|tile| {
                let run = || -> Result<(SubSpace, LabelVolume)> {
                    let crop = extract_tile(&harmonized, tile)?;
                    let task = TileTask::new(tile.clone(), crop, label_count, canonical.dims)?;
                    invocations.fetch_add(1, Ordering::Relaxed);
                    let seg = segment_tile(&config.segmenter, &task, &selected, &plugin_dir)?;
                    store_nifti(&seg, &tiles_dir.join(format!("tile_{:03}.nii", tile.index)))?;
                    Ok((tile.clone(), seg))
                };
                run().map_err(|e| e.in_tile("segment", tile.index))
            })
            .collect();
        // report the lowest-numbered failing tile, whatever finished first
        outcomes.into_iter().collect::<Result<Vec<_>>>()
    })?;

    let fused = stages.time("fuse", || {
        let f = fuse_detailed(&tile_segs, lattice, label_count, &canonical)?;
        store_nifti(&f.labels, &inter.join("canonical_labels.nii"))?;
        Ok(f)
    })?;
    drop(tile_segs);
    if fused.uncovered_voxels > 0 {
        warnings.push(format!(
            "{} canonical voxels are outside every tile and were set to background",
            fused.uncovered_voxels
        ));
    }

    let (labels, confidence) = stages.time("inverse_map", || {
        let back = reg.transform.invert()?;
        Ok((
            resample(&fused.labels, &back, scan.grid(), Interp::Nearest)?,
            resample(&fused.confidence, &back, scan.grid(), Interp::Nearest)?,
        ))
    })?;

    stages.time("write", || {
        store_nifti(&labels, &output_dir.join(LABELS_FILE))?;
        store_nifti(&confidence, &output_dir.join(CONFIDENCE_FILE))?;
        reg.transform.save(&output_dir.join(TRANSFORM_FILE))
    })?;

    Ok(SegmentResult {
        labels,
        confidence,
        transform: reg.transform,
        similarity: reg.similarity,
        harmonization: fit,
        lattice: lattice.clone(),
        selected_atlases: selected.iter().map(|a| a.id.clone()).collect(),
        tile_invocations: invocations.load(Ordering::Relaxed),
        uncovered_voxels: fused.uncovered_voxels,
        warnings,
        stages,
        wall_seconds: 0.0,
        metrics: None,
    })
}

/// Loads the model named in the configuration and segments one scan.
/// Missing model or output directories are configuration errors raised
/// before any computation.
pub fn cmd_segment(input: &Path, config: &PipelineConfig, evaluation: &Evaluation) -> Result<SegmentResult> {
    config.validate()?;
    let model_dir = config
        .model_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no model directory given".into()))?;
    let output_dir = config
        .output_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    if !input.is_file() {
        return Err(Error::Config(format!("input scan {} does not exist", input.display())));
    }
    let model = Model::load(model_dir)?;
    segment_with_model(input, &model, config, output_dir, evaluation)
}

/// Outcome of one scan in a batch.
#[derive(Debug, Clone, Serialize)]
pub struct BatchRow {
    pub scan: PathBuf,
    pub output_dir: PathBuf,
    pub ok: bool,
    pub wall_seconds: f64,
    pub message: String,
}

pub const BATCH_SUMMARY: &str = "summary.tsv";

/// Segments each scan into `output_dir/<scan name>/`, continuing past
/// failures, and writes `summary.tsv`. The model is loaded once; problems
/// with it abort the whole batch.
pub fn cmd_batch(scans: &[PathBuf], config: &PipelineConfig) -> Result<Vec<BatchRow>> {
    config.validate()?;
    let model_dir = config
        .model_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no model directory given".into()))?;
    let output_dir = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    if scans.is_empty() {
        return Err(Error::Config("batch needs at least one scan".into()));
    }
    let model = Model::load(model_dir)?;
    create_dir(&output_dir)?;

    let mut used = std::collections::BTreeMap::<String, usize>::new();
    let mut rows = Vec::with_capacity(scans.len());
    for scan in scans {
        let stem = file_stem(scan);
        let n = used.entry(stem.clone()).or_insert(0);
        *n += 1;
        let name = if *n == 1 { stem } else { format!("{stem}_{n}") };
        let dir = output_dir.join(&name);
        let t = Instant::now();
        let outcome = segment_with_model(scan, &model, config, &dir, &Evaluation::default());
        let wall_seconds = t.elapsed().as_secs_f64();
        let (ok, message) = match outcome {
            Ok(r) if r.warnings.is_empty() => (true, String::new()),
            Ok(r) => (true, r.warnings.join("; ")),
            Err(e) => {
                log::error!("{}: {e}", scan.display());
                (false, e.to_string())
            }
        };
        rows.push(BatchRow {
            scan: scan.clone(),
            output_dir: dir,
            ok,
            wall_seconds,
            message,
        });
    }

    let mut tsv = String::from("scan\tstatus\twall_seconds\tmessage\n");
    for r in &rows {
        let msg: String = r.message.chars().map(|c| if c == '\t' || c == '\n' { ' ' } else { c }).collect();
        tsv.push_str(&format!(
            "{}\t{}\t{:.3}\t{}\n",
            r.scan.display(),
            if r.ok { "ok" } else { "failed" },
            r.wall_seconds,
            msg
        ));
    }
    let path = output_dir.join(BATCH_SUMMARY);
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
