//! Affine transform algebra and intensity-based affine registration.
//!
//! [`estimate_affine`] maximises normalised cross-correlation between a
//! fixed (template) volume and a moving scan with a Nelder–Mead simplex over
//! a three-level image pyramid, starting from a centre-of-mass alignment.

mod simplex;
mod transform;

pub use simplex::{nelder_mead, SimplexResult};
pub use transform::AffineTransform;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{sample_trilinear, Grid, Volume};

/// Degrees of freedom of the estimated affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dof {
    /// translation, rotation, scale
    Nine,
    /// nine plus three shears
    Twelve,
}

impl TryFrom<u8> for Dof {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            9 => Ok(Dof::Nine),
            12 => Ok(Dof::Twelve),
            other => Err(format!("dof must be 9 or 12, got {other}")),
        }
    }
}

impl From<Dof> for u8 {
    fn from(d: Dof) -> u8 {
        match d {
            Dof::Nine => 9,
            Dof::Twelve => 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub dof: Dof,
    /// Pyramid levels, finest last: 3 means downsampling factors 4, 2, 1.
    pub levels: usize,
    /// Simplex iteration budget per pyramid level.
    pub max_iters: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            dof: Dof::Twelve,
            levels: 3,
            max_iters: 400,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Registration {
    /// Maps moving-world coordinates to fixed-world coordinates.
    pub transform: AffineTransform,
    /// Final normalised cross-correlation in [-1, 1].
    pub similarity: f64,
}

const SIMPLEX_TOL: f64 = 1e-4;
const RESTARTS: usize = 2;

/// Parameter vector layout: translation (mm), Euler XYZ rotation (rad),
/// scale factors, shears (xy, xz, yz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

/// Rotation `Rz · Ry · Rx` (x applied first).
pub fn euler_xyz(r: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = r[0].sin_cos();
    let (sy, cy) = r[1].sin_cos();
    let (sz, cz) = r[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

impl AffineParams {
    fn to_vec(self, dof: Dof) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .translation
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .copied()
            .collect();
        if dof == Dof::Twelve {
            v.extend_from_slice(&self.shear);
        }
        v
    }

    fn from_slice(v: &[f64]) -> Self {
        let mut p = Self {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
            scale: [v[6], v[7], v[8]],
            shear: [0.0; 3],
        };
        if v.len() == 12 {
            p.shear = [v[9], v[10], v[11]];
        }
        p
    }

    /// `x ↦ A·(x − c) + c + t` with `A = R · S · Sh`.
    pub fn to_transform(&self, center: [f64; 3]) -> Result<AffineTransform> {
        let s = [
            [self.scale[0], 0.0, 0.0],
            [0.0, self.scale[1], 0.0],
            [0.0, 0.0, self.scale[2]],
        ];
        let sh = [
            [1.0, self.shear[0], self.shear[1]],
            [0.0, 1.0, self.shear[2]],
            [0.0, 0.0, 1.0],
        ];
        let a = matmul3(&euler_xyz(self.rotation), &matmul3(&s, &sh));
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = center[i] + self.translation[i] - (0..3).map(|k| a[i][k] * center[k]).sum::<f64>();
        }
        AffineTransform::from_linear(a, t)
    }
}

/// Block-mean downsampling by an integer factor; the voxel-to-world map is
/// adjusted so block centres keep their world positions.
pub(crate) fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor <= 1 {
        return Ok(v.clone());
    }
    let d = v.dims();
    let nd = d.map(|n| (n / factor).max(1));
    let f = factor as f64;
    let half = (f - 1.0) / 2.0;
    let v2w = v
        .grid()
        .voxel_to_world
        .compose(&AffineTransform::translation([half; 3]))
        .compose(&AffineTransform::scaling([f; 3]));
    let grid = Grid::new(nd, v.grid().spacing.map(|s| s * f), v2w)?;
    let mut out = vec![0.0f32; grid.len()];
    out.par_chunks_mut(nd[0] * nd[1]).enumerate().for_each(|(z, slab)| {
        for y in 0..nd[1] {
            for x in 0..nd[0] {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let (sx, sy, sz) = (x * factor + dx, y * factor + dy, z * factor + dz);
                            if sx < d[0] && sy < d[1] && sz < d[2] {
                                sum += v.get(sx, sy, sz) as f64;
                                n += 1;
                            }
                        }
                    }
                }
                slab[x + nd[0] * y] = (sum / n.max(1) as f64) as f32;
            }
        }
    });
    Volume::new(grid, out)
}

/// Centre of mass in world coordinates, weighting voxels brighter than the
/// mean by their excess intensity.
pub(crate) fn center_of_mass(v: &Volume) -> [f64; 3] {
    let (mean, _) = v.mean_std();
    let g = v.grid();
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for (i, val) in v.data().iter().enumerate() {
        let w = *val as f64 - mean;
        if w > 0.0 {
            let [x, y, z] = g.coords(i);
            acc[0] += w * x as f64;
            acc[1] += w * y as f64;
            acc[2] += w * z as f64;
            total += w;
        }
    }
    if total == 0.0 {
        return g.center_world();
    }
    g.voxel_world([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Upper bound on fixed-volume voxels visited per similarity evaluation.
const MAX_SAMPLES: usize = 20_000;
/// Reduction block size; fixed so sums do not depend on the thread count.
const SAMPLE_CHUNK: usize = 4096;

/// Fixed-volume voxels on a regular stride lattice, with their intensities.
struct SampleSet {
    voxels: Vec<[f64; 3]>,
    values: Vec<f64>,
}

impl SampleSet {
    /// Uses the smallest isotropic stride whose lattice has at most
    /// `max_samples` points; stride 1 keeps every voxel.
    fn new(fixed: &Volume, max_samples: usize) -> Self {
        let d = fixed.dims();
        let count = |s: usize| d.iter().map(|n| n.div_ceil(s)).product::<usize>();
        let mut stride = 1;
        while count(stride) > max_samples {
            stride += 1;
        }
        let start = d.map(|n| ((stride - 1) / 2).min(n - 1));
        let mut voxels = Vec::with_capacity(count(stride));
        let mut values = Vec::with_capacity(count(stride));
        for z in (start[2]..d[2]).step_by(stride) {
            for y in (start[1]..d[1]).step_by(stride) {
                for x in (start[0]..d[0]).step_by(stride) {
                    voxels.push([x as f64, y as f64, z as f64]);
                    values.push(fixed.get(x, y, z) as f64);
                }
            }
        }
        Self { voxels, values }
    }

    fn ncc(&self, fixed: &Volume, moving: &Volume, fixed_to_moving: &AffineTransform) -> Result<f64> {
        let pull = moving
            .grid()
            .voxel_to_world
            .invert()?
            .compose(fixed_to_moving)
            .compose(&fixed.grid().voxel_to_world);
        let partial: Vec<[f64; 5]> = self
            .voxels
            .par_chunks(SAMPLE_CHUNK)
            .zip(self.values.par_chunks(SAMPLE_CHUNK))
            .map(|(vox, vals)| {
                let mut s = [0.0f64; 5];
                for (c, f) in vox.iter().zip(vals) {
                    let m = sample_trilinear(moving, pull.apply(*c)).unwrap_or(0.0) as f64;
                    s[0] += f;
                    s[1] += m;
                    s[2] += f * f;
                    s[3] += m * m;
                    s[4] += f * m;
                }
                s
            })
            .collect();
        let mut s = [0.0f64; 5];
        for p in &partial {
            for k in 0..5 {
                s[k] += p[k];
            }
        }
        let n = self.values.len() as f64;
        let cov = s[4] - s[0] * s[1] / n;
        let vf = s[2] - s[0] * s[0] / n;
        let vm = s[3] - s[1] * s[1] / n;
        if vf <= 0.0 || vm <= 0.0 {
            return Ok(0.0);
        }
        Ok((cov / (vf * vm).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Normalised cross-correlation between `fixed` and `moving` pulled through
/// `fixed_to_moving` (world → world), over every fixed voxel. Moving samples
/// outside its grid are 0.
///
/// Partial sums are reduced in a fixed block order, so the result does not
/// depend on the thread count.
pub fn ncc(fixed: &Volume, moving: &Volume, fixed_to_moving: &AffineTransform) -> Result<f64> {
    SampleSet::new(fixed, usize::MAX).ncc(fixed, moving, fixed_to_moving)
}

fn check_variance(v: &Volume, what: &str) -> Result<()> {
    let (_, std) = v.mean_std();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateInput(format!("{what} volume has zero intensity variance")));
    }
    Ok(())
}

/// Estimates the affine mapping `moving` world coordinates onto `fixed`
/// world coordinates.
///
/// Each pyramid level evaluates the similarity on at most `MAX_SAMPLES`
/// fixed voxels taken on a regular stride; the final similarity (and the
/// comparison against the identity) uses every voxel.
pub fn estimate_affine(moving: &Volume, fixed: &Volume, config: &RegistrationConfig) -> Result<Registration> {
    check_variance(moving, "moving")?;
    check_variance(fixed, "fixed")?;
    if config.levels == 0 {
        return Err(Error::InvalidArgument("registration needs at least one pyramid level".into()));
    }

    let center = fixed.grid().center_world();
    let com_f = center_of_mass(fixed);
    let com_m = center_of_mass(moving);
    let mut params = AffineParams {
        translation: [com_m[0] - com_f[0], com_m[1] - com_f[1], com_m[2] - com_f[2]],
        ..AffineParams::default()
    };

    let factors: Vec<usize> = (0..config.levels).rev().map(|l| 1usize << l).collect();
    let dof = config.dof;
    for &factor in &factors {
        let f_lvl = downsample(fixed, factor)?;
        let m_lvl = downsample(moving, factor)?;
        let samples = SampleSet::new(&f_lvl, MAX_SAMPLES);
        let cost = |v: &[f64]| -> f64 {
            let p = AffineParams::from_slice(v);
            match p.to_transform(center).and_then(|t| samples.ncc(&f_lvl, &m_lvl, &t)) {
                Ok(c) => 1.0 - c,
                Err(_) => f64::INFINITY,
            }
        };
        let fs = factor as f64;
        let min_spacing = fixed.grid().spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let mut steps = vec![
            fs * min_spacing,
            fs * min_spacing,
            fs * min_spacing,
            0.02 * fs,
            0.02 * fs,
            0.02 * fs,
            0.02 * fs,
            0.02 * fs,
            0.02 * fs,
        ];
        if dof == Dof::Twelve {
            steps.extend_from_slice(&[0.01 * fs; 3]);
        }
        let mut x = params.to_vec(dof);
        let mut value = cost(&x);
        for round in 0..=RESTARTS {
            let r = nelder_mead(cost, &x, &steps, SIMPLEX_TOL, config.max_iters);
            let improved = r.value < value;
            if improved {
                x = r.best;
                value = r.value;
            }
            log::debug!(
                "registration level x{factor} round {round}: cost {value:.6} after {} iterations",
                r.iterations
            );
            if !improved || round == RESTARTS {
                break;
            }
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
        }
        if !value.is_finite() {
            return Err(Error::OptimizationFailure(format!(
                "non-finite objective at pyramid level x{factor}"
            )));
        }
        params = AffineParams::from_slice(&x);
    }

    let fixed_to_moving = params.to_transform(center)?;
    let mut similarity = ncc(fixed, moving, &fixed_to_moving)?;
    let mut transform = fixed_to_moving.invert()?;
    let identity_ncc = ncc(fixed, moving, &AffineTransform::identity())?;
    if !similarity.is_finite() {
        return Err(Error::OptimizationFailure("non-finite final similarity".into()));
    }
    if identity_ncc > similarity {
        similarity = identity_ncc;
        transform = AffineTransform::identity();
    }
    Ok(Registration {
        transform,
        similarity,
    })
}

/// Mean distance between where `estimated` and `truth` send the eight corner
/// voxels of `grid`.
pub fn mean_corner_error(grid: &Grid, estimated: &AffineTransform, truth: &AffineTransform) -> f64 {
    let corners = grid.corners_world();
    corners
        .iter()
        .map(|c| {
            let a = estimated.apply(*c);
            let b = truth.apply(*c);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / 8.0
}
