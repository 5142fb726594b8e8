//! Quality-assurance report: a plain-text summary plus three mid-plane
//! slices (axial, coronal, sagittal) as binary PGM images with the label
//! boundaries drawn at maximum intensity.

use std::fmt::Write as _;
use std::path::Path;

use super::segment::SegmentResult;
use crate::volume::{LabelVolume, Volume};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const SLICE_FILES: [&str; 3] = ["axial.pgm", "coronal.pgm", "sagittal.pgm"];

pub struct RunSummary<'a> {
    pub scan_id: &'a str,
    pub lattice_desc: String,
    pub segmenter: &'a str,
    pub result: &'a SegmentResult,
}

/// A grayscale image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Slice {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Axis of the plane normal for each view: axial ⟂ z, coronal ⟂ y,
/// sagittal ⟂ x.
const VIEWS: [(usize, usize, usize); 3] = [(2, 0, 1), (1, 0, 2), (0, 1, 2)];

/// Intensity window: the 1st and 99th percentiles of the volume.
fn window(v: &Volume) -> (f32, f32) {
    let mut s: Vec<f32> = v.data().iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return (0.0, 1.0);
    }
    s.sort_by(f32::total_cmp);
    let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (at(0.01), at(0.99));
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Mid-plane slices of `intensity` with the boundaries of `labels`
/// overlaid. Intensity maps to 0–254; boundary pixels are 255.
pub fn mid_slices(intensity: &Volume, labels: &LabelVolume) -> [Slice; 3] {
    let d = labels.dims();
    let (lo, hi) = window(intensity);
    VIEWS.map(|(normal, u_axis, v_axis)| {
        let (w, h) = (d[u_axis], d[v_axis]);
        let fixed = d[normal] / 2;
        let voxel = |u: usize, v: usize| {
            let mut p = [0usize; 3];
            p[normal] = fixed;
            p[u_axis] = u;
            p[v_axis] = v;
            p
        };
        let label = |u: usize, v: usize| {
            let p = voxel(u, v);
            labels.get(p[0], p[1], p[2])
        };
        let mut pixels = Vec::with_capacity(w * h);
        // top row shows the highest coordinate along the vertical axis
        for row in 0..h {
            let v = h - 1 - row;
            for u in 0..w {
                let l = label(u, v);
                let edge = (u > 0 && label(u - 1, v) != l)
                    || (u + 1 < w && label(u + 1, v) != l)
                    || (v > 0 && label(u, v - 1) != l)
                    || (v + 1 < h && label(u, v + 1) != l);
                pixels.push(if edge && l > 0 {
                    255
                } else {
                    let p = voxel(u, v);
                    let x = intensity.get(p[0], p[1], p[2]);
                    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                    if t.is_finite() {
                        (t * 254.0).round() as u8
                    } else {
                        0
                    }
                });
            }
        }
        Slice {
            width: w,
            height: h,
            pixels,
        }
    })
}

/// Text body of `summary.txt`.
pub fn summary_text(s: &RunSummary<'_>, extra_warnings: &[String]) -> String {
    let r = s.result;
    let mut t = String::new();
    let _ = writeln!(t, "scan: {}", s.scan_id);
    let _ = writeln!(t, "lattice: {}", s.lattice_desc);
    let _ = writeln!(t, "segmenter: {}", s.segmenter);
    let _ = writeln!(t, "tile invocations: {}", r.tile_invocations);
    if !r.selected_atlases.is_empty() {
        let _ = writeln!(t, "selected atlases: {}", r.selected_atlases.join(", "));
    }
    let _ = writeln!(t, "registration similarity (NCC): {:.6}", r.similarity);
    let h = &r.harmonization;
    let _ = writeln!(
        t,
        "harmonization: beta0 {:.6}, beta1 {:.6}, {} iterations, converged {}",
        h.beta0, h.beta1, h.iterations, h.converged
    );
    let _ = writeln!(t, "uncovered canonical voxels: {}", r.uncovered_voxels);

    let _ = writeln!(t, "\n[stage wall times (s)]");
    for (name, secs) in &r.stages.0 {
        let _ = writeln!(t, "{name:<12} {secs:>10.3}");
    }
    let _ = writeln!(t, "{:<12} {:>10.3}", "total", r.wall_seconds);

    let _ = writeln!(t, "\n[label volumes]");
    let _ = writeln!(t, "{:>6} {:>10} {:>12}", "label", "voxels", "volume_mm3");
    let voxel_mm3: f64 = r.labels.grid().voxel_to_world.det3().abs();
    for (l, n) in r.labels.histogram().iter().enumerate() {
        if *n > 0 {
            let _ = writeln!(t, "{l:>6} {n:>10} {:>12.1}", *n as f64 * voxel_mm3);
        }
    }

    if let Some(m) = &r.metrics {
        let sm = m.summary();
        let _ = writeln!(t, "\n[evaluation]");
        let show = |name: &str, st: Option<crate::metrics::Stats>| match st {
            Some(st) => format!("{name}: mean {:.4} median {:.4} std {:.4}\n", st.mean, st.median, st.std),
            None => format!("{name}: n/a\n"),
        };
        t.push_str(&show("dsc", sm.dsc));
        t.push_str(&show("msd", sm.msd));
        t.push_str(&show("hd", sm.hd));
        if !sm.missing_labels.is_empty() {
            let _ = writeln!(t, "missing labels: {:?}", sm.missing_labels);
        }
    }

    let _ = writeln!(t, "\n[warnings]");
    let all: Vec<&String> = r.warnings.iter().chain(extra_warnings).collect();
    if all.is_empty() {
        let _ = writeln!(t, "none");
    }
    for w in all {
        let _ = writeln!(t, "- {w}");
    }
    t
}

/// Writes the report into `dir`. Failures never abort the run; they are
/// returned (and listed in the summary when it can still be written).
pub fn emit_report(dir: &Path, summary: &RunSummary<'_>, intensity: Option<&Volume>) -> Vec<String> {
    let mut warnings = Vec::new();
    if let Err(e) = std::fs::create_dir_all(dir) {
        let w = format!("cannot create report directory {}: {e}", dir.display());
        log::warn!("{w}");
        return vec![w];
    }
    let labels = &summary.result.labels;
    let fallback;
    let intensity = match intensity {
        Some(v) if v.dims() == labels.dims() => v,
        _ => {
            warnings.push("scan intensity unavailable for the report; slices show labels only".into());
            fallback = Volume::new(
                labels.grid().clone(),
                labels.data().iter().map(|l| *l as f32).collect(),
            )
            .expect("label grid is valid");
            &fallback
        }
    };
    for (slice, name) in mid_slices(intensity, labels).iter().zip(SLICE_FILES) {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, slice.to_pgm()) {
            warnings.push(format!("cannot write {}: {e}", path.display()));
        }
    }
    let path = dir.join(SUMMARY_FILE);
    if let Err(e) = std::fs::write(&path, summary_text(summary, &warnings)) {
        warnings.push(format!("cannot write {}: {e}", path.display()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    warnings
}
