//! Segmentation evaluation: overlap, surface distances, paired significance
//! testing, method ranking and ROI ordering.
//!
//! Surfaces are the voxel centres of a mask that have at least one of their
//! six face neighbours outside the mask (or outside the grid). Surface
//! distances use an exact Euclidean distance transform over the joint
//! bounding box of the two masks, so they agree with an all-pairs search.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume};

/// A binary mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume("mask length does not match grid".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn from_label(v: &LabelVolume, label: u16) -> Self {
        Self {
            grid: v.grid().clone(),
            data: v.mask_of(label),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

fn check_grids(a: &Mask, m: &Mask) -> Result<()> {
    if a.grid.dims != m.grid.dims || !a.grid.same_as(&m.grid) {
        return Err(Error::GeometryMismatch("masks are on different grids".into()));
    }
    Ok(())
}

/// Dice overlap `2|A ∩ M| / (|A| + |M|)`; 1 when both masks are empty.
pub fn dsc(a: &Mask, m: &Mask) -> Result<f64> {
    check_grids(a, m)?;
    let (mut na, mut nm, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.data.iter().zip(&m.data) {
        na += *x as usize;
        nm += *y as usize;
        both += (*x && *y) as usize;
    }
    Ok(if na + nm == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nm) as f64
    })
}

/// Inclusive voxel bounding box `(lo, hi)` of the set voxels.
fn bounding_box(m: &Mask) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, b) in m.data.iter().enumerate() {
        if *b {
            any = true;
            let c = m.grid.coords(i);
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
    }
    any.then_some((lo, hi))
}

/// Surface voxels of the mask (6-connectivity boundary), in index order.
pub fn surface_voxels(m: &Mask) -> Vec<[usize; 3]> {
    let d = m.grid.dims;
    let at = |x: usize, y: usize, z: usize| m.data[x + d[0] * (y + d[1] * z)];
    let mut out = Vec::new();
    let Some((lo, hi)) = bounding_box(m) else {
        return out;
    };
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if !at(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == d[0]
                    || y + 1 == d[1]
                    || z + 1 == d[2]
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Squared distance between voxel centres `a` and `b` in mm, summed x, y, z.
fn sq_dist(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * spacing[k];
        s += d * d;
    }
    s
}

/// One pass of the separable exact distance transform (lower envelope of
/// parabolas). `f` holds squared distances (∞ where no feature) along a
/// line; on return it holds `min_p f[p] + ((q − p)·s)²`.
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    let key = |q: usize, f: &[f64]| f[q] + (q as f64 * s) * (q as f64 * s);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let inter = (key(q, f) - key(p, f)) / (2.0 * s * s * (q as f64 - p as f64));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        out.push(f[v[k]] + d * d);
    }
    f.copy_from_slice(out);
}

/// Squared distance (mm²) from every voxel of the box `[lo, hi]` to the
/// nearest feature voxel, all features lying inside the box.
struct BoxEdt {
    lo: [usize; 3],
    size: [usize; 3],
    d2: Vec<f64>,
}

impl BoxEdt {
    fn new(features: &[[usize; 3]], lo: [usize; 3], hi: [usize; 3], spacing: [f64; 3]) -> Self {
        let size = [0, 1, 2].map(|k| hi[k] - lo[k] + 1);
        let [sx, sy, sz] = size;
        let mut d2 = vec![f64::INFINITY; sx * sy * sz];
        for p in features {
            d2[(p[0] - lo[0]) + sx * ((p[1] - lo[1]) + sy * (p[2] - lo[2]))] = 0.0;
        }
        let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
        let mut line = Vec::new();
        // x, then y, then z: matches the summation order of `sq_dist`
        for axis in 0..3 {
            let n = size[axis];
            let stride = [1, sx, sx * sy][axis];
            let others: Vec<usize> = (0..sx * sy * sz).filter(|i| (i / stride) % n == 0).collect();
            for start in others {
                line.clear();
                line.extend((0..n).map(|t| d2[start + t * stride]));
                edt_1d(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (t, val) in line.iter().enumerate() {
                    d2[start + t * stride] = *val;
                }
            }
        }
        Self { lo, size, d2 }
    }

    fn at(&self, p: [usize; 3]) -> f64 {
        let [sx, sy, _] = self.size;
        self.d2[(p[0] - self.lo[0]) + sx * ((p[1] - self.lo[1]) + sy * (p[2] - self.lo[2]))]
    }
}

/// Physical length of each voxel axis, or `None` when the axes are not
/// mutually orthogonal (sheared grids), where a per-axis metric is wrong.
fn axis_lengths(grid: &Grid) -> Option<[f64; 3]> {
    let l = grid.voxel_to_world.linear();
    let col = |k: usize| [l[0][k], l[1][k], l[2][k]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let len = [0, 1, 2].map(|k| dot(col(k), col(k)).sqrt());
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if dot(col(i), col(j)).abs() > 1e-9 * len[i] * len[j] {
            return None;
        }
    }
    Some(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// Mean distance from A's surface to M's surface (mm).
    pub msd_directed: f64,
    /// Mean of the two directed mean surface distances (mm).
    pub msd_symmetric: f64,
    pub hausdorff: f64,
}

/// Directed and symmetric mean surface distance plus Hausdorff distance
/// between masks `a` (automatic) and `m` (manual), in mm.
pub fn surface_distance(a: &Mask, m: &Mask) -> Result<SurfaceDistances> {
    check_grids(a, m)?;
    let sa = surface_voxels(a);
    let sm = surface_voxels(m);
    if sa.is_empty() || sm.is_empty() {
        return Err(Error::UndefinedDistance("surface distance of an empty mask".into()));
    }
    let Some(spacing) = axis_lengths(&a.grid) else {
        return world_brute_force(&a.grid, &sa, &sm);
    };
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for p in sa.iter().chain(&sm) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> (f64, f64) {
        let edt = BoxEdt::new(to, lo, hi, spacing);
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for p in from {
            let d = edt.at(*p).sqrt();
            sum += d;
            max = max.max(d);
        }
        (sum / from.len() as f64, max)
    };
    let (am, am_max) = directed(&sa, &sm);
    let (ma, ma_max) = directed(&sm, &sa);
    Ok(SurfaceDistances {
        msd_directed: am,
        msd_symmetric: 0.5 * (am + ma),
        hausdorff: am_max.max(ma_max),
    })
}

/// All-pairs reference implementation of [`surface_distance`]; quadratic in
/// the number of surface voxels.
pub fn surface_distance_brute_force(a: &Mask, m: &Mask) -> Result<SurfaceDistances> {
    check_grids(a, m)?;
    let sa = surface_voxels(a);
    let sm = surface_voxels(m);
    if sa.is_empty() || sm.is_empty() {
        return Err(Error::UndefinedDistance("surface distance of an empty mask".into()));
    }
    let Some(spacing) = axis_lengths(&a.grid) else {
        return world_brute_force(&a.grid, &sa, &sm);
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for p in from {
            let d = to.iter().map(|q| sq_dist(*p, *q, spacing)).fold(f64::INFINITY, f64::min).sqrt();
            sum += d;
            max = max.max(d);
        }
        (sum / from.len() as f64, max)
    };
    let (am, am_max) = directed(&sa, &sm);
    let (ma, ma_max) = directed(&sm, &sa);
    Ok(SurfaceDistances {
        msd_directed: am,
        msd_symmetric: 0.5 * (am + ma),
        hausdorff: am_max.max(ma_max),
    })
}

/// All-pairs distances between world coordinates of the surface voxels.
fn world_brute_force(grid: &Grid, sa: &[[usize; 3]], sm: &[[usize; 3]]) -> Result<SurfaceDistances> {
    let world = |pts: &[[usize; 3]]| -> Vec<[f64; 3]> {
        pts.iter()
            .map(|p| grid.voxel_world([p[0] as f64, p[1] as f64, p[2] as f64]))
            .collect()
    };
    let (wa, wm) = (world(sa), world(sm));
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for p in from {
            let d = to
                .iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            sum += d;
            max = max.max(d);
        }
        (sum / from.len() as f64, max)
    };
    let (am, am_max) = directed(&wa, &wm);
    let (ma, ma_max) = directed(&wm, &wa);
    Ok(SurfaceDistances {
        msd_directed: am,
        msd_symmetric: 0.5 * (am + ma),
        hausdorff: am_max.max(ma_max),
    })
}

/// Largest number of non-zero differences handled by the exact null
/// distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    pub p_value: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped and tied magnitudes share their average
/// rank. Up to [`WILCOXON_EXACT_MAX`] non-zero pairs the p-value comes from
/// the exact permutation distribution of the (possibly tied) ranks;
/// beyond that a normal approximation with tie-corrected variance and
/// continuity correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "signed-rank test needs at least 5 pairs, got {}",
            x.len()
        )));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(Wilcoxon {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // average ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        return Ok(Wilcoxon {
            p_value: (2.0 * lower.min(upper)).min(1.0),
            w_plus,
            n,
            exact: true,
            degenerate: false,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(Wilcoxon {
        p_value,
        w_plus,
        n,
        exact: false,
        degenerate: false,
    })
}

/// For each method and tolerance, the number of ROIs where the method's
/// median is within `delta` of the best median. `medians[method][roi]`;
/// result `[method][delta]`.
pub fn best_within_delta(medians: &[Vec<f64>], deltas: &[f64]) -> Result<Vec<Vec<usize>>> {
    let rois = medians.first().map_or(0, Vec::len);
    if rois == 0 || medians.iter().any(|r| r.len() != rois) {
        return Err(Error::InvalidArgument(
            "median matrix must be non-empty and rectangular".into(),
        ));
    }
    let mut counts = vec![vec![0usize; deltas.len()]; medians.len()];
    for roi in 0..rois {
        let best = medians.iter().map(|r| r[roi]).fold(f64::NEG_INFINITY, f64::max);
        for (di, delta) in deltas.iter().enumerate() {
            for (mi, row) in medians.iter().enumerate() {
                if row[roi] >= best - delta {
                    counts[mi][di] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Orders ROIs (rows of `stats`) by their coordinate on the first axis of
/// classical multidimensional scaling. The axis sign is chosen so the first
/// ROI's coordinate does not exceed the last's; ties keep input order.
pub fn mds_order(stats: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = stats.len();
    if n < 2 {
        return Err(Error::InsufficientData("MDS ordering needs at least 2 ROIs".into()));
    }
    let width = stats[0].len();
    if stats.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("ROI feature rows differ in length".into()));
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        stats[i].iter().zip(&stats[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    });
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand));
    let scale = d2.iter().fold(0.0f64, |m, v| m.max(*v));
    let eig = SymmetricEigen::new(b);
    let top = (0..n)
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(b.cmp(&a)))
        .unwrap();
    let lambda = eig.eigenvalues[top];
    if scale == 0.0 || lambda <= 1e-12 * scale {
        log::warn!("all ROI feature rows are identical; keeping input order");
        return Ok((0..n).collect());
    }
    let mut coord: Vec<f64> = eig.eigenvectors.column(top).iter().map(|v| v * lambda.sqrt()).collect();
    let flip = if coord[0] != coord[n - 1] {
        coord[0] > coord[n - 1]
    } else {
        coord.iter().find(|c| **c != 0.0).is_some_and(|c| *c > 0.0)
    };
    if flip {
        coord.iter_mut().for_each(|c| *c = -*c);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| coord[a].total_cmp(&coord[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Label id → display name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelNames(pub BTreeMap<u16, String>);

impl LabelNames {
    /// Parses lines of `<id> <name>` (whitespace, comma or tab separated);
    /// blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, name) = line
                .split_once(|c: char| c == ',' || c.is_whitespace())
                .unwrap_or((line, ""));
            let id: u16 = id
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("label names line {}: bad id {id:?}", no + 1)))?;
            map.insert(id, name.trim().trim_matches('"').to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn name(&self, id: u16) -> String {
        self.0
            .get(&id)
            .filter(|n| !n.is_empty())
            .cloned()
            .unwrap_or_else(|| format!("label_{id}"))
    }
}

/// Metrics of one label; the optional fields are `None` when the label is
/// empty in either volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: u16,
    pub name: String,
    pub dsc: Option<f64>,
    pub msd: Option<f64>,
    pub msd_sym: Option<f64>,
    pub hd: Option<f64>,
    pub n_pred: usize,
    pub n_truth: usize,
}

impl LabelRow {
    pub fn is_missing(&self) -> bool {
        self.dsc.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, median, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dsc: Option<Stats>,
    pub msd: Option<Stats>,
    pub msd_sym: Option<Stats>,
    pub hd: Option<Stats>,
    pub evaluated_labels: usize,
    pub missing_labels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub rows: Vec<LabelRow>,
}

/// Evaluates every non-background label present in either volume.
pub fn evaluate_labels(pred: &LabelVolume, truth: &LabelVolume, names: &LabelNames) -> Result<LabelReport> {
    if pred.dims() != truth.dims() || !pred.grid().same_as(truth.grid()) {
        return Err(Error::GeometryMismatch(
            "prediction and truth are on different grids".into(),
        ));
    }
    let hp = pred.histogram();
    let ht = truth.histogram();
    let labels: Vec<u16> = (1..hp.len().max(ht.len()))
        .filter(|&l| hp.get(l).copied().unwrap_or(0) > 0 || ht.get(l).copied().unwrap_or(0) > 0)
        .map(|l| l as u16)
        .collect();
    let rows = labels
        .par_iter()
        .map(|&l| {
            let a = Mask::from_label(pred, l);
            let m = Mask::from_label(truth, l);
            let (n_pred, n_truth) = (hp.get(l as usize).copied().unwrap_or(0), ht.get(l as usize).copied().unwrap_or(0));
            let mut row = LabelRow {
                label: l,
                name: names.name(l),
                dsc: None,
                msd: None,
                msd_sym: None,
                hd: None,
                n_pred,
                n_truth,
            };
            if n_pred > 0 && n_truth > 0 {
                let sd = surface_distance(&a, &m)?;
                row.dsc = Some(dsc(&a, &m)?);
                row.msd = Some(sd.msd_directed);
                row.msd_sym = Some(sd.msd_symmetric);
                row.hd = Some(sd.hausdorff);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelReport { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl LabelReport {
    pub fn summary(&self) -> Summary {
        let pick = |f: fn(&LabelRow) -> Option<f64>| -> Option<Stats> {
            Stats::of(&self.rows.iter().filter_map(f).collect::<Vec<_>>())
        };
        Summary {
            dsc: pick(|r| r.dsc),
            msd: pick(|r| r.msd),
            msd_sym: pick(|r| r.msd_sym),
            hd: pick(|r| r.hd),
            evaluated_labels: self.rows.iter().filter(|r| !r.is_missing()).count(),
            missing_labels: self.rows.iter().filter(|r| r.is_missing()).map(|r| r.label).collect(),
        }
    }

    /// One row per label: `id,name,dsc,msd,msd_sym,hd,n_pred,n_truth`;
    /// numbers use shortest round-trip formatting; missing values are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,name,dsc,msd,msd_sym,hd,n_pred,n_truth\n");
        for r in &self.rows {
            let name = if r.name.contains(',') || r.name.contains('"') {
                format!("\"{}\"", r.name.replace('"', "\"\""))
            } else {
                r.name.clone()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.label,
                name,
                fmt_opt(r.dsc),
                fmt_opt(r.msd),
                fmt_opt(r.msd_sym),
                fmt_opt(r.hd),
                r.n_pred,
                r.n_truth
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::with_spacing(dims, [1.0; 3]).unwrap()
    }

    fn boxed(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Mask {
        let g = grid(dims);
        let data = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                (0..3).all(|k| c[k] >= lo[k] && c[k] <= hi[k])
            })
            .collect();
        Mask::new(g, data).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = boxed([10, 10, 10], [0; 3], [4, 4, 3]); // 100 voxels
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let far = boxed([10, 10, 10], [6, 6, 6], [9, 9, 9]);
        assert_eq!(dsc(&a, &far).unwrap(), 0.0);
        let half = boxed([10, 10, 10], [0, 0, 2], [4, 4, 5]); // 100 voxels, 50 shared
        assert_eq!((a.count(), half.count()), (100, 100));
        assert_eq!(dsc(&a, &half).unwrap(), 0.5);
        let empty = Mask::new(grid([10, 10, 10]), vec![false; 1000]).unwrap();
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        let other = boxed([5, 5, 5], [0; 3], [1; 3]);
        assert!(matches!(dsc(&a, &other), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn surface_examples() {
        let a = boxed([8, 8, 8], [2; 3], [4; 3]);
        let sd = surface_distance(&a, &a).unwrap();
        assert_eq!((sd.msd_directed, sd.msd_symmetric, sd.hausdorff), (0.0, 0.0, 0.0));
        // a 3³ cube has 26 surface voxels (all but the centre)
        assert_eq!(surface_voxels(&a).len(), 26);
        let b = boxed([8, 8, 8], [3, 2, 2], [5, 4, 4]);
        assert_eq!(surface_distance(&a, &b).unwrap(), surface_distance_brute_force(&a, &b).unwrap());
        let p = boxed([12, 3, 3], [1, 1, 1], [1, 1, 1]);
        let q = boxed([12, 3, 3], [6, 1, 1], [6, 1, 1]);
        let sd = surface_distance(&p, &q).unwrap();
        assert_eq!((sd.msd_directed, sd.msd_symmetric, sd.hausdorff), (5.0, 5.0, 5.0));
        let empty = Mask::new(grid([8, 8, 8]), vec![false; 512]).unwrap();
        assert!(matches!(surface_distance(&a, &empty), Err(Error::UndefinedDistance(_))));
    }

    #[test]
    fn anisotropic_spacing_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid::with_spacing([9, 7, 6], [0.7, 1.3, 2.1]).unwrap();
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| Mask::new(g.clone(), (0..g.len()).map(|_| rng.random_bool(0.15)).collect()).unwrap();
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let fast = surface_distance(&a, &b).unwrap();
            let slow = surface_distance_brute_force(&a, &b).unwrap();
            for (x, y) in [
                (fast.msd_directed, slow.msd_directed),
                (fast.msd_symmetric, slow.msd_symmetric),
                (fast.hausdorff, slow.hausdorff),
            ] {
                assert!((x - y).abs() <= 1e-12 * y.max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn oblique_grids_use_world_distances() {
        use crate::registration::AffineTransform;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, s) = (0.6, 0.8);
        let rotated = AffineTransform::from_linear([[0.9 * c, -1.1 * s, 0.0], [0.9 * s, 1.1 * c, 0.0], [0.0, 0.0, 1.7]], [3.0, -2.0, 1.0]).unwrap();
        let sheared = AffineTransform::from_linear([[1.0, 0.4, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.2]], [0.0; 3]).unwrap();
        for v2w in [rotated, sheared] {
            let g = Grid::new([7, 6, 5], [1.0; 3], v2w).unwrap();
            let mk = |rng: &mut ChaCha8Rng| Mask::new(g.clone(), (0..g.len()).map(|_| rng.random_bool(0.2)).collect()).unwrap();
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let fast = surface_distance(&a, &b).unwrap();
            let world = world_brute_force(&g, &surface_voxels(&a), &surface_voxels(&b)).unwrap();
            assert!((fast.msd_directed - world.msd_directed).abs() < 1e-12);
            assert!((fast.hausdorff - world.hausdorff).abs() < 1e-12);
        }
    }

    /// p-value by enumerating every sign assignment of the ranks.
    fn wilcoxon_enumerated(x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
        let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = d.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0..(1u64 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            le += (s <= w + 1e-9) as u64;
            ge += (s >= w - 1e-9) as u64;
        }
        let all = (1u64 << n) as f64;
        (2.0 * (le as f64 / all).min(ge as f64 / all)).min(1.0)
    }

    #[test]
    fn wilcoxon_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = wilcoxon_signed_rank(&x, &x).unwrap();
        assert!(w.degenerate && w.p_value == 1.0);
        let y: Vec<f64> = x.iter().map(|v| v - 0.5 - v * 0.1).collect();
        let w = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(w.exact);
        assert_eq!(w.p_value, 0.03125);
        assert!(wilcoxon_signed_rank(&x[..4], &y[..4]).is_err());
        assert!(wilcoxon_signed_rank(&x, &y[..5]).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in 5..=12 {
            for _ in 0..20 {
                // coarse values produce ties and zero differences
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
                let w = wilcoxon_signed_rank(&x, &y).unwrap();
                if w.degenerate {
                    continue;
                }
                assert!((w.p_value - wilcoxon_enumerated(&x, &y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wilcoxon_normal_approximation() {
        // 30 positive distinct differences: W+ = 465, mean 232.5, var 2363.75
        let x: Vec<f64> = (1..=30).map(|v| v as f64).collect();
        let y = vec![0.0; 30];
        let w = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(!w.exact);
        let z = (465.0 - 232.5 - 0.5) / 2363.75f64.sqrt();
        let expect = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z));
        assert!((w.p_value - expect).abs() < 1e-15);
        assert!(w.p_value < 1e-5);
    }

    #[test]
    fn best_within_delta_examples() {
        let m = vec![vec![0.9, 0.5, 0.7], vec![0.8, 0.6, 0.7], vec![0.1, 0.2, 0.3]];
        let c = best_within_delta(&m, &[0.0, 0.15, 1.0]).unwrap();
        assert_eq!(c, vec![vec![2, 3, 3], vec![2, 3, 3], vec![0, 0, 3]]);
        let unique = vec![vec![0.9, 0.1], vec![0.5, 0.6]];
        let c = best_within_delta(&unique, &[0.0]).unwrap();
        assert_eq!(c[0][0] + c[1][0], 2);
        assert!(best_within_delta(&[], &[0.0]).is_err());
    }

    #[test]
    fn mds_examples() {
        assert_eq!(mds_order(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap(), vec![0, 1]);
        // one varying feature: order equals sorting by it
        let rows: Vec<Vec<f64>> = [0.2, 0.9, 0.1, 0.5, 0.95].iter().map(|v| vec![1.0, *v, 3.0]).collect();
        assert_eq!(mds_order(&rows).unwrap(), vec![2, 0, 3, 1, 4]);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + 10.0).collect()).collect();
        assert_eq!(mds_order(&shifted).unwrap(), mds_order(&rows).unwrap());
        assert_eq!(mds_order(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(), vec![0, 1, 2]);
        assert!(mds_order(&[vec![1.0]]).is_err());
    }

    #[test]
    fn report_rows_and_missing_labels() {
        let g = grid([6, 6, 6]);
        let mut t = vec![0u16; 216];
        let mut p = vec![0u16; 216];
        for i in 0..216 {
            let c = g.coords(i);
            if c[0] < 3 {
                t[i] = 1;
                p[i] = 1;
            } else if c[1] < 2 {
                t[i] = 2;
            }
        }
        let truth = LabelVolume::new(g.clone(), t, 4).unwrap();
        let pred = LabelVolume::new(g, p, 4).unwrap();
        let names = LabelNames::parse("1 Left thing\n2,Right thing\n").unwrap();
        let r = evaluate_labels(&pred, &truth, &names).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].dsc, Some(1.0));
        assert_eq!(r.rows[0].name, "Left thing");
        assert!(r.rows[1].is_missing());
        let s = r.summary();
        assert_eq!(s.missing_labels, vec![2]);
        assert_eq!(s.dsc.unwrap().n, 1);
        let csv = r.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("2,Right thing,NA,NA,NA,NA,0,"));
    }

    #[test]
    fn stats_definition() {
        let s = Stats::of(&[1.0, 2.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.median), (3.0, 3.0));
        assert!((s.std - (10.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(Stats::of(&[]).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn surface_distance_matches_brute_force(seed in 0u64..10_000, p in 0.05f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid([7, 6, 5]);
            let a = Mask::new(g.clone(), (0..g.len()).map(|_| rng.random_bool(p)).collect()).unwrap();
            let b = Mask::new(g.clone(), (0..g.len()).map(|_| rng.random_bool(p)).collect()).unwrap();
            if a.count() > 0 && b.count() > 0 {
                let fast = surface_distance(&a, &b).unwrap();
                prop_assert_eq!(fast, surface_distance_brute_force(&a, &b).unwrap());
                prop_assert!(fast.hausdorff >= fast.msd_symmetric && fast.msd_symmetric >= 0.0);
            }
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        }

        #[test]
        fn best_within_delta_is_monotone(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let deltas = [0.0, 0.01, 0.05, 0.1, 0.3, 1.0];
            let c = best_within_delta(&m, &deltas).unwrap();
            for row in &c {
                prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(row[5], 6);
            }
        }
    }
}
