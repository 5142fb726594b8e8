//! Per-tile segmentation backends.
//!
//! * `prior` — per-voxel label vote over the selected atlases.
//! * `knn` — non-local patch matching against the selected atlases.
//! * `external` — any program speaking the file-based tile protocol: it
//!   receives the path of a JSON manifest describing one tile, reads the
//!   tile intensity NIfTI next to it and writes a label NIfTI of the same
//!   size.
//!
//! All backends are deterministic for fixed inputs.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::SubSpace;
use crate::volume::{load_labels, load_volume, store_nifti, LabelVolume, Volume};

fn default_n_atlases() -> usize {
    crate::atlas_select::DEFAULT_SELECTED
}

fn default_patch_edge() -> usize {
    3
}

fn default_search_edge() -> usize {
    5
}

fn default_timeout() -> f64 {
    600.0
}

/// Backend choice and its parameters, as it appears in the pipeline
/// configuration (`{"kind": "knn", "patch_edge": 3, ...}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SegmenterSpec {
    Prior {
        #[serde(default = "default_n_atlases")]
        n_atlases: usize,
    },
    Knn {
        /// Patch cube edge in voxels (odd).
        #[serde(default = "default_patch_edge")]
        patch_edge: usize,
        /// Search cube edge in voxels (odd, ≥ patch_edge).
        #[serde(default = "default_search_edge")]
        search_edge: usize,
        #[serde(default = "default_n_atlases")]
        n_atlases: usize,
    },
    External {
        /// Command line; the manifest path is appended as the last argument.
        command: String,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        SegmenterSpec::Prior {
            n_atlases: default_n_atlases(),
        }
    }
}

impl SegmenterSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SegmenterSpec::Prior { n_atlases } if *n_atlases == 0 => {
                Err(Error::Config("prior segmenter needs n_atlases ≥ 1".into()))
            }
            SegmenterSpec::Knn {
                patch_edge,
                search_edge,
                n_atlases,
            } => KnnParams::new(*patch_edge, *search_edge)
                .and_then(|_| {
                    if *n_atlases == 0 {
                        Err(Error::Config("knn segmenter needs n_atlases ≥ 1".into()))
                    } else {
                        Ok(())
                    }
                }),
            SegmenterSpec::External {
                command,
                timeout_seconds,
            } => {
                if shlex::split(command).is_none_or(|v| v.is_empty()) {
                    return Err(Error::Config(format!("cannot parse plugin command {command:?}")));
                }
                if !(*timeout_seconds > 0.0) {
                    return Err(Error::Config("plugin timeout must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Number of atlases the backend wants selected; `None` for external.
    pub fn n_atlases(&self) -> Option<usize> {
        match self {
            SegmenterSpec::Prior { n_atlases } | SegmenterSpec::Knn { n_atlases, .. } => Some(*n_atlases),
            SegmenterSpec::External { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmenterSpec::Prior { .. } => "prior",
            SegmenterSpec::Knn { .. } => "knn",
            SegmenterSpec::External { .. } => "external",
        }
    }
}

/// One tile's worth of work.
#[derive(Debug, Clone)]
pub struct TileTask {
    pub tile: SubSpace,
    /// Harmonised intensities of the tile crop.
    pub intensity: Volume,
    pub label_count: usize,
    pub canonical_dims: [usize; 3],
}

impl TileTask {
    pub fn new(tile: SubSpace, intensity: Volume, label_count: usize, canonical_dims: [usize; 3]) -> Result<Self> {
        if intensity.dims() != tile.size {
            return Err(Error::GeometryMismatch(format!(
                "tile {} intensity has dims {:?}, expected {:?}",
                tile.index,
                intensity.dims(),
                tile.size
            )));
        }
        tile.check_within(canonical_dims)?;
        Ok(Self {
            tile,
            intensity,
            label_count,
            canonical_dims,
        })
    }

    fn output(&self, data: Vec<u16>) -> Result<LabelVolume> {
        LabelVolume::new(self.intensity.grid().clone(), data, self.label_count)
    }
}

/// A labelled atlas on the canonical grid.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub id: String,
    pub intensity: Volume,
    pub labels: LabelVolume,
}

fn check_atlases(task: &TileTask, atlases: &[&Atlas]) -> Result<()> {
    if atlases.is_empty() {
        return Err(Error::InsufficientData("no atlases given to the segmenter".into()));
    }
    for a in atlases {
        if a.labels.dims() != task.canonical_dims || a.intensity.dims() != task.canonical_dims {
            return Err(Error::GeometryMismatch(format!(
                "atlas {} is not on the canonical grid {:?}",
                a.id, task.canonical_dims
            )));
        }
        if a.labels.label_count() > task.label_count {
            if let Some(&bad) = a.labels.data().iter().find(|l| **l as usize >= task.label_count) {
                return Err(Error::LabelRange {
                    label: bad as u32,
                    label_count: task.label_count,
                });
            }
        }
    }
    Ok(())
}

/// Most frequent atlas label at each tile voxel; ties go to the smaller
/// label.
pub fn segment_prior(task: &TileTask, atlases: &[&Atlas]) -> Result<LabelVolume> {
    check_atlases(task, atlases)?;
    let [sx, sy, sz] = task.tile.size;
    let [cx, cy, cz] = task.tile.corner;
    let [nx, ny, _] = task.canonical_dims;
    let mut out = vec![0u16; sx * sy * sz];
    out.par_chunks_mut(sx * sy).enumerate().for_each(|(z, slab)| {
        let mut hist = vec![0u32; task.label_count];
        for y in 0..sy {
            for x in 0..sx {
                let ci = (cx + x) + nx * ((cy + y) + ny * (cz + z));
                hist.iter_mut().for_each(|h| *h = 0);
                for a in atlases {
                    hist[a.labels.data()[ci] as usize] += 1;
                }
                let mut best = 0;
                for (l, h) in hist.iter().enumerate() {
                    if *h > hist[best] {
                        best = l;
                    }
                }
                slab[x + sx * y] = best as u16;
            }
        }
    });
    task.output(out)
}

/// Patch and search window edges, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnParams {
    pub patch_edge: usize,
    pub search_edge: usize,
}

impl KnnParams {
    pub fn new(patch_edge: usize, search_edge: usize) -> Result<Self> {
        if patch_edge % 2 == 0 || search_edge % 2 == 0 || search_edge < patch_edge {
            return Err(Error::Config(format!(
                "knn windows must be odd with search ≥ patch; got patch {patch_edge}, search {search_edge}"
            )));
        }
        Ok(Self {
            patch_edge,
            search_edge,
        })
    }

    /// Converts millimetre windows at the finest grid spacing into voxel
    /// edges: `round(mm / spacing)`, bumped to the next odd number.
    pub fn from_mm(patch_mm: f64, search_mm: f64, spacing: [f64; 3]) -> Result<Self> {
        let s = spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let edge = |mm: f64| {
            let e = ((mm / s).round() as usize).max(1);
            if e % 2 == 0 {
                e + 1
            } else {
                e
            }
        };
        Self::new(edge(patch_mm), edge(search_mm))
    }
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            patch_edge: default_patch_edge(),
            search_edge: default_search_edge(),
        }
    }
}

/// Non-local patch matching.
///
/// For a tile voxel `p` (canonical position `P`) the target patch samples
/// the tile at `p + o` for every offset `o` of the patch cube, clamped to the
/// tile. Each candidate centre `P + s` (for `s` in the search cube, centres
/// outside the canonical grid skipped) is scored against an atlas patch read
/// at the same effective offsets, i.e. at `P + s + (clamp(p + o) − p)`,
/// clamped to the canonical grid. The label at the best centre (smallest sum
/// of squared differences) is returned; ties keep the first candidate in
/// (atlas index, x, y, z offset) order.
pub fn segment_knn(task: &TileTask, atlases: &[&Atlas], params: KnnParams) -> Result<LabelVolume> {
    check_atlases(task, atlases)?;
    KnnParams::new(params.patch_edge, params.search_edge)?;
    let size = task.tile.size;
    let corner = task.tile.corner;
    let dims = task.canonical_dims;
    let [sx, sy, sz] = size;
    let ph = (params.patch_edge / 2) as isize;
    let sh = (params.search_edge / 2) as isize;
    let tile = task.intensity.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut out = vec![0u16; sx * sy * sz];
    out.par_chunks_mut(sx * sy).enumerate().for_each(|(z, slab)| {
        let mut eff: Vec<[isize; 3]> = Vec::new();
        let mut target: Vec<f64> = Vec::new();
        let mut lin: Vec<isize> = Vec::new();
        for y in 0..sy {
            for x in 0..sx {
                let p = [x, y, z];
                eff.clear();
                target.clear();
                for oz in -ph..=ph {
                    for oy in -ph..=ph {
                        for ox in -ph..=ph {
                            let q = [0, 1, 2].map(|k| clamp(p[k] as isize + [ox, oy, oz][k], size[k]));
                            eff.push([0, 1, 2].map(|k| q[k] as isize - p[k] as isize));
                            target.push(tile[q[0] + sx * (q[1] + sy * q[2])] as f64);
                        }
                    }
                }
                lin.clear();
                lin.extend(eff.iter().map(|e| e[0] + dims[0] as isize * (e[1] + dims[1] as isize * e[2])));
                let pc = [0, 1, 2].map(|k| (corner[k] + p[k]) as isize);
                let mut best: Option<(f64, u16)> = None;
                for a in atlases {
                    let img = a.intensity.data();
                    for dx in -sh..=sh {
                        for dy in -sh..=sh {
                            for dz in -sh..=sh {
                                let c = [pc[0] + dx, pc[1] + dy, pc[2] + dz];
                                if (0..3).any(|k| c[k] < 0 || c[k] >= dims[k] as isize) {
                                    continue;
                                }
                                let bound = best.map_or(f64::INFINITY, |(b, _)| b);
                                // partial sums only grow, so stopping once one
                                // reaches the best cannot change the winner
                                let mut ssd = 0.0;
                                if (0..3).all(|k| c[k] - ph >= 0 && c[k] + ph < dims[k] as isize) {
                                    let ci = c[0] + dims[0] as isize * (c[1] + dims[1] as isize * c[2]);
                                    for (o, t) in lin.iter().zip(&target) {
                                        let d = img[(ci + o) as usize] as f64 - t;
                                        ssd += d * d;
                                        if ssd >= bound {
                                            break;
                                        }
                                    }
                                } else {
                                    for (e, t) in eff.iter().zip(&target) {
                                        let q = [0, 1, 2].map(|k| clamp(c[k] + e[k], dims[k]));
                                        let d = img[q[0] + dims[0] * (q[1] + dims[1] * q[2])] as f64 - t;
                                        ssd += d * d;
                                        if ssd >= bound {
                                            break;
                                        }
                                    }
                                }
                                if ssd < bound {
                                    let ci = c[0] as usize + dims[0] * (c[1] as usize + dims[1] * c[2] as usize);
                                    best = Some((ssd, a.labels.data()[ci]));
                                }
                            }
                        }
                    }
                }
                slab[x + sx * y] = best.map_or(0, |(_, l)| l);
            }
        }
    });
    task.output(out)
}

pub const PROTOCOL_VERSION: u32 = 1;

/// The JSON document handed to an external plugin. Paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub protocol_version: u32,
    pub tile_index: usize,
    pub corner: [usize; 3],
    pub size: [usize; 3],
    pub label_count: usize,
    pub input_volume: String,
    pub output_volume: String,
    pub canonical_dims: [usize; 3],
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Runs an external plugin on one tile inside a fresh directory
/// `work_root/tile_NNN`.
pub fn segment_external(task: &TileTask, command: &str, timeout: Duration, work_root: &Path) -> Result<LabelVolume> {
    let idx = task.tile.index;
    let dir = work_root.join(format!("tile_{idx:03}"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = PluginManifest {
        protocol_version: PROTOCOL_VERSION,
        tile_index: idx,
        corner: task.tile.corner,
        size: task.tile.size,
        label_count: task.label_count,
        input_volume: "input.nii".into(),
        output_volume: "output.nii".into(),
        canonical_dims: task.canonical_dims,
    };
    store_nifti(&task.intensity, &dir.join(&manifest.input_volume))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;

    let argv = shlex::split(command)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("cannot parse plugin command {command:?}")))?;
    let manifest_abs = std::path::absolute(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    log::debug!("tile {idx}: running {argv:?} {}", manifest_abs.display());
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .arg(&manifest_abs)
        .current_dir(&dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::PluginFailure {
            tile_index: idx,
            exit_code: None,
            stderr: format!("cannot start {:?}: {e}", argv[0]),
        })?;
    // drain both pipes so a chatty plugin cannot block on a full buffer
    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_end(&mut buf);
            }
            String::from_utf8_lossy(&buf).into_owned()
        })
    };
    let out_thread = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err_thread = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

    let start = Instant::now();
    let status = loop {
        match child.try_wait().map_err(|e| Error::io(&dir, e))? {
            Some(s) => break s,
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::PluginTimeout {
                    tile_index: idx,
                    seconds: timeout.as_secs_f64(),
                });
            }
            None => std::thread::sleep(Duration::from_millis(5)),
        }
    };
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();
    if !stdout.trim().is_empty() {
        log::debug!("tile {idx} plugin stdout: {}", stdout.trim_end());
    }
    if !status.success() {
        return Err(Error::PluginFailure {
            tile_index: idx,
            exit_code: status.code(),
            stderr,
        });
    }
    read_plugin_output(task, &dir.join(&manifest.output_volume))
}

fn read_plugin_output(task: &TileTask, path: &Path) -> Result<LabelVolume> {
    let idx = task.tile.index;
    let violation = |reason: String| Error::ProtocolViolation {
        tile_index: idx,
        reason,
    };
    if !path.exists() {
        return Err(violation(format!("output {} was not written", path.display())));
    }
    let labels = load_labels(path, Some(task.label_count)).map_err(|e| violation(e.to_string()))?;
    if labels.dims() != task.tile.size {
        return Err(violation(format!(
            "output dims {:?} differ from tile size {:?}",
            labels.dims(),
            task.tile.size
        )));
    }
    // geometry always comes from the tile, not from the plugin's header
    task.output(labels.into_data())
}

/// Dispatches a tile to the configured backend.
pub fn segment_tile(spec: &SegmenterSpec, task: &TileTask, atlases: &[&Atlas], work_root: &Path) -> Result<LabelVolume> {
    match spec {
        SegmenterSpec::Prior { .. } => segment_prior(task, atlases),
        SegmenterSpec::Knn {
            patch_edge,
            search_edge,
            ..
        } => segment_knn(task, atlases, KnnParams::new(*patch_edge, *search_edge)?),
        SegmenterSpec::External {
            command,
            timeout_seconds,
        } => segment_external(task, command, Duration::from_secs_f64(*timeout_seconds), work_root),
    }
}

/// Simple intensity rules usable both in-process and as a plugin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileRule {
    /// Label 1 where intensity > 0, else 0.
    Threshold,
    /// Rank-based: `min(L − 1, ⌊L · #{u < v} / N⌋)` over the tile's values.
    Quantile,
}

impl std::str::FromStr for TileRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(TileRule::Threshold),
            "quantile" => Ok(TileRule::Quantile),
            other => Err(Error::Config(format!("unknown tile rule {other:?}"))),
        }
    }
}

pub fn apply_rule(rule: TileRule, intensity: &Volume, label_count: usize) -> Result<LabelVolume> {
    if label_count < 2 {
        return Err(Error::InvalidArgument("tile rules need at least 2 labels".into()));
    }
    let data = match rule {
        TileRule::Threshold => intensity.data().iter().map(|v| (*v > 0.0) as u16).collect(),
        TileRule::Quantile => {
            let mut sorted = intensity.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            let n = sorted.len();
            intensity
                .data()
                .iter()
                .map(|v| {
                    let below = sorted.partition_point(|u| u.total_cmp(v).is_lt());
                    ((label_count * below / n).min(label_count - 1)) as u16
                })
                .collect()
        }
    };
    LabelVolume::new(intensity.grid().clone(), data, label_count)
}

/// Plugin side of the protocol: reads the manifest, applies `rule` to the
/// input volume and writes the output volume.
pub fn run_plugin(rule: TileRule, manifest_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: PluginManifest = serde_json::from_str(&text)?;
    if m.protocol_version != PROTOCOL_VERSION {
        return Err(Error::Config(format!("unsupported protocol version {}", m.protocol_version)));
    }
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let input = load_volume(&dir.join(&m.input_volume))?;
    if input.dims() != m.size {
        return Err(Error::GeometryMismatch(format!(
            "input dims {:?} differ from manifest size {:?}",
            input.dims(),
            m.size
        )));
    }
    let out = apply_rule(rule, &input, m.label_count)?;
    store_nifti(&out, &dir.join(&m.output_volume))
}
