//! Intensity harmonisation on the canonical grid.
//!
//! A scan is z-normalised, its brain-masked intensities are sorted from
//! largest to smallest, and a Huber-weighted robust line is fitted that maps
//! the scan's sorted vector onto the atlas-averaged sorted vector. The fitted
//! line is then applied to every voxel of the z-normalised scan.
//!
//! The regression takes the atlas mean as the response and the scan as the
//! predictor: `mean_sorted ≈ beta1 · scan_sorted + beta0`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::volume::{Grid, LabelVolume, Volume};

/// Huber tuning constant (95% Gaussian efficiency).
pub const HUBER_C: f64 = 1.345;
/// Converts a median absolute residual into a Gaussian sigma estimate.
pub const MAD_TO_SIGMA: f64 = 0.6745;
pub const MAX_ITERATIONS: usize = 50;
pub const COEF_TOL: f64 = 1e-6;

/// Binary brain mask on the canonical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    grid: Grid,
    data: Vec<bool>,
    voxel_count: usize,
}

impl BrainMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume("mask length does not match grid".into()));
        }
        let voxel_count = data.iter().filter(|b| **b).count();
        if voxel_count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            grid,
            data,
            voxel_count,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    /// Values of `v` inside the mask, in voxel order.
    pub fn gather(&self, v: &Volume) -> Result<Vec<f64>> {
        self.grid.ensure_same(v.grid(), "volume vs brain mask")?;
        Ok(v.data()
            .iter()
            .zip(&self.data)
            .filter(|(_, m)| **m)
            .map(|(x, _)| *x as f64)
            .collect())
    }

    pub fn to_labels(&self) -> LabelVolume {
        LabelVolume::new(
            self.grid.clone(),
            self.data.iter().map(|b| *b as u16).collect(),
            2,
        )
        .expect("binary mask is a valid label volume")
    }

    pub fn from_labels(l: &LabelVolume) -> Result<Self> {
        Self::new(l.grid().clone(), l.data().iter().map(|v| *v > 0).collect())
    }

    /// Appends the little-endian mask block: dims (3 x u32), spacing
    /// (3 x f64), voxel-to-world top rows (12 x f64), voxel count (u64),
    /// x-fastest bit-packed mask (LSB first).
    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        let g = &self.grid;
        for d in g.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in g.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for row in &g.voxel_to_world.matrix()[..3] {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.voxel_count as u64).to_le_bytes());
        let mut packed = vec![0u8; g.len().div_ceil(8)];
        for (i, b) in self.data.iter().enumerate() {
            if *b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }

    pub(crate) fn read_bytes(r: &mut ByteReader) -> Result<Self> {
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let spacing = [r.f64()?, r.f64()?, r.f64()?];
        let mut rows = [[0.0; 4]; 3];
        for row in rows.iter_mut() {
            for v in row.iter_mut() {
                *v = r.f64()?;
            }
        }
        let grid = Grid::new(dims, spacing, AffineTransform::from_rows(rows)?)?;
        let count = r.u64()? as usize;
        let packed = r.take(grid.len().div_ceil(8))?;
        let data: Vec<bool> = (0..grid.len()).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let mask = BrainMask::new(grid, data)?;
        if mask.voxel_count() != count {
            return Err(Error::Model("mask block: voxel count mismatch".into()));
        }
        Ok(mask)
    }
}

/// Population z-normalisation: zero mean, unit standard deviation.
pub fn znormalize(v: &Volume) -> Result<Volume> {
    let (mean, std) = v.mean_std();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok(v.map(|x| ((x as f64 - mean) / std) as f32))
}

/// Voxel set iff at least half of the maps mark it (any non-zero label
/// counts as set).
pub fn build_mask(prob_maps: &[LabelVolume]) -> Result<BrainMask> {
    let first = prob_maps
        .first()
        .ok_or_else(|| Error::InsufficientData("build_mask needs at least one map".into()))?;
    for (i, m) in prob_maps.iter().enumerate().skip(1) {
        first
            .grid()
            .ensure_same(m.grid(), &format!("probability map {i} vs map 0"))?;
    }
    let n = prob_maps.len();
    let mut counts = vec![0usize; first.grid().len()];
    for m in prob_maps {
        for (c, l) in counts.iter_mut().zip(m.data()) {
            *c += (*l > 0) as usize;
        }
    }
    // mean >= 0.5  <=>  2 * count >= n
    let data = counts.into_iter().map(|c| 2 * c >= n).collect();
    BrainMask::new(first.grid().clone(), data)
}

/// Masked intensities sorted from largest to smallest.
pub fn sorted_vector(v: &Volume, mask: &BrainMask) -> Result<Vec<f64>> {
    let mut vals = mask.gather(v)?;
    vals.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Atlas-averaged sorted intensity vector and the mask it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizationModel {
    pub mask: BrainMask,
    pub mean_sorted: Vec<f64>,
}

pub fn build_model(atlas_volumes: &[Volume], mask: &BrainMask) -> Result<HarmonizationModel> {
    if atlas_volumes.is_empty() {
        return Err(Error::InsufficientData("harmonization model needs at least one atlas".into()));
    }
    let mut acc = vec![0.0f64; mask.voxel_count()];
    for (i, v) in atlas_volumes.iter().enumerate() {
        mask.grid()
            .ensure_same(v.grid(), &format!("atlas {i} vs brain mask"))?;
        let s = sorted_vector(&znormalize(v)?, mask)?;
        for (a, x) in acc.iter_mut().zip(&s) {
            *a += x;
        }
    }
    let n = atlas_volumes.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(HarmonizationModel {
        mask: mask.clone(),
        mean_sorted: acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonizationFit {
    pub beta0: f64,
    pub beta1: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits `response ≈ beta1 · predictor + beta0` by iteratively reweighted
/// least squares with Huber weights.
///
/// Residuals are leverage-adjusted, the scale is `median(|r|) / 0.6745`
/// recomputed each iteration, and iteration stops when neither coefficient
/// moves by more than `COEF_TOL` or after `MAX_ITERATIONS` reweightings.
pub fn huber_regression(predictor: &[f64], response: &[f64]) -> Result<HarmonizationFit> {
    let n = predictor.len();
    if n != response.len() {
        return Err(Error::InvalidArgument(format!(
            "predictor has {n} entries, response {}",
            response.len()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateFit("need at least two points".into()));
    }
    let nf = n as f64;
    let x_mean = predictor.iter().sum::<f64>() / nf;
    let sxx: f64 = predictor.iter().map(|x| (x - x_mean).powi(2)).sum();
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(Error::DegenerateFit("predictor has zero variance".into()));
    }
    let adjust: Vec<f64> = predictor
        .iter()
        .map(|x| {
            let h = 1.0 / nf + (x - x_mean).powi(2) / sxx;
            1.0 / (1.0 - h.min(0.9999)).sqrt()
        })
        .collect();
    let y_scale = response.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1.0);
    let scale_floor = f64::EPSILON * y_scale;

    let mut weights = vec![1.0f64; n];
    let (mut b0, mut b1) = weighted_line(predictor, response, &weights)?;
    let mut residual_abs = vec![0.0f64; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for i in 0..n {
            residual_abs[i] = ((response[i] - b0 - b1 * predictor[i]) * adjust[i]).abs();
        }
        let mut sorted = residual_abs.clone();
        let s = (median_in_place(&mut sorted) / MAD_TO_SIGMA).max(scale_floor);
        for (w, r) in weights.iter_mut().zip(&residual_abs) {
            let u = r / (HUBER_C * s);
            *w = if u <= 1.0 { 1.0 } else { 1.0 / u };
        }
        let (n0, n1) = weighted_line(predictor, response, &weights)?;
        let delta = (n0 - b0).abs().max((n1 - b1).abs());
        b0 = n0;
        b1 = n1;
        if delta < COEF_TOL {
            converged = true;
            break;
        }
    }
    if !(b0.is_finite() && b1.is_finite()) {
        return Err(Error::DegenerateFit("non-finite coefficients".into()));
    }
    if b1 <= 0.0 {
        log::warn!("harmonization gain beta1 = {b1} is not positive; fit marked non-converged");
        converged = false;
    }
    Ok(HarmonizationFit {
        beta0: b0,
        beta1: b1,
        iterations,
        converged,
    })
}

/// Weighted least-squares line through the points; returns (intercept, slope).
fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - xm;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (y[i] - ym);
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFit("weighted predictor variance vanished".into()));
    }
    let b1 = sxy / sxx;
    Ok((ym - b1 * xm, b1))
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Fits the scan's sorted vector against the model's mean sorted vector.
pub fn fit(model: &HarmonizationModel, test_sorted: &[f64]) -> Result<HarmonizationFit> {
    if test_sorted.len() != model.mean_sorted.len() {
        return Err(Error::InvalidArgument(format!(
            "sorted vector has {} entries, model expects {}",
            test_sorted.len(),
            model.mean_sorted.len()
        )));
    }
    huber_regression(test_sorted, &model.mean_sorted)
}

/// Maps every voxel through `beta1 · v + beta0`.
pub fn apply(fit: &HarmonizationFit, v: &Volume) -> Volume {
    let (b0, b1) = (fit.beta0, fit.beta1);
    v.map(|x| (b1 * x as f64 + b0) as f32)
}

/// Full harmonisation of a canonical-grid scan: z-normalise, sort, fit,
/// apply.
pub fn harmonize(model: &HarmonizationModel, v: &Volume) -> Result<(Volume, HarmonizationFit)> {
    let z = znormalize(v)?;
    let sorted = sorted_vector(&z, &model.mask)?;
    let f = fit(model, &sorted)?;
    Ok((apply(&f, &z), f))
}

const MODEL_MAGIC: &[u8; 8] = b"TFHARM\x00\x01";

impl HarmonizationModel {
    /// Binary layout (little-endian): magic, mask block (see
    /// [`BrainMask::write_bytes`]), mean sorted vector (f64 per mask voxel).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        self.mask.write_bytes(&mut out);
        for v in &self.mean_sorted {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Model("harmonization model: bad magic".into()));
        }
        let mask = BrainMask::read_bytes(&mut r)?;
        let mean_sorted = (0..mask.voxel_count()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { mask, mean_sorted })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Model("binary model file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Model("binary model file has trailing bytes".into()));
        }
        Ok(())
    }
}
