//! Voxel grids: intensity volumes, label volumes, NIfTI-1 I/O and resampling.
//!
//! Data is stored x-fastest (the NIfTI on-disk order), so the linear index of
//! voxel `(x, y, z)` is `x + nx * (y + ny * z)`.

mod nifti;
mod resample;

pub use nifti::{load_labels, load_nifti, load_volume, store_nifti, NiftiData, NiftiImage};
pub use resample::{resample, Interp};
pub(crate) use resample::sample_trilinear;

use crate::error::{Error, Result};
use crate::registration::AffineTransform;

/// Geometry shared by every voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub voxel_to_world: AffineTransform,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxel_to_world: AffineTransform) -> Result<Self> {
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let det = voxel_to_world.det3();
        if det.abs() <= 1e-12 {
            return Err(Error::SingularTransform(det));
        }
        Ok(Self {
            dims,
            spacing,
            voxel_to_world,
        })
    }

    /// Axis-aligned grid with the voxel-to-world map `diag(spacing)`.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let v2w = AffineTransform::from_linear(
            [
                [spacing[0], 0.0, 0.0],
                [0.0, spacing[1], 0.0],
                [0.0, 0.0, spacing[2]],
            ],
            [0.0; 3],
        )?;
        Self::new(dims, spacing, v2w)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_world(&self, p: [f64; 3]) -> [f64; 3] {
        self.voxel_to_world.apply(p)
    }

    /// World position of the grid center.
    pub fn center_world(&self) -> [f64; 3] {
        self.voxel_world([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    /// World positions of the eight corner voxel centers.
    pub fn corners_world(&self) -> [[f64; 3]; 8] {
        let hi = [
            self.dims[0] as f64 - 1.0,
            self.dims[1] as f64 - 1.0,
            self.dims[2] as f64 - 1.0,
        ];
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let p = [
                if i & 1 != 0 { hi[0] } else { 0.0 },
                if i & 2 != 0 { hi[1] } else { 0.0 },
                if i & 4 != 0 { hi[2] } else { 0.0 },
            ];
            *c = self.voxel_world(p);
        }
        out
    }

    /// Same-geometry check used before voxelwise operations. Affines are
    /// compared with a float32-level tolerance since they may have made a
    /// NIfTI round trip.
    pub fn same_as(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-5 * a.abs().max(1.0))
            && self.voxel_to_world.max_abs_diff(&other.voxel_to_world) <= 1e-4
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    /// Sub-grid starting at voxel `corner` with the given size; world
    /// coordinates of the shared voxels are preserved.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Grid> {
        let shift = AffineTransform::translation([corner[0] as f64, corner[1] as f64, corner[2] as f64]);
        Grid::new(size, self.spacing, self.voxel_to_world.compose(&shift))
    }
}

/// Common access to the two voxel container kinds.
pub trait Voxels: Sized {
    type Elem: Copy + Default + Send + Sync;

    fn grid(&self) -> &Grid;
    fn data(&self) -> &[Self::Elem];
    /// Rebuilds a container of the same kind (and label count) on a new grid.
    fn with_data(&self, grid: Grid, data: Vec<Self::Elem>) -> Result<Self>;
}

/// A 3D scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// (mean, population std) accumulated in f64.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = *v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

impl Voxels for Volume {
    type Elem = f32;

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn data(&self) -> &[f32] {
        &self.data
    }

    fn with_data(&self, grid: Grid, data: Vec<f32>) -> Result<Self> {
        Volume::new(grid, data)
    }
}

/// A 3D integer label grid; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u16>,
    label_count: usize,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>, label_count: usize) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if label_count == 0 || label_count > u16::MAX as usize + 1 {
            return Err(Error::InvalidVolume(format!("invalid label count {label_count}")));
        }
        if let Some(bad) = data.iter().find(|l| **l as usize >= label_count) {
            return Err(Error::LabelRange {
                label: *bad as u32,
                label_count,
            });
        }
        Ok(Self {
            grid,
            data,
            label_count,
        })
    }

    pub fn zeros(grid: Grid, label_count: usize) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![0; n], label_count)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Binary mask of voxels carrying `label`.
    pub fn mask_of(&self, label: u16) -> Vec<bool> {
        self.data.iter().map(|l| *l == label).collect()
    }

    /// Sorted list of labels present.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; self.label_count];
        for l in &self.data {
            seen[*l as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| i as u16)
            .collect()
    }

    /// Voxel count per label (length `label_count`).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.label_count];
        for l in &self.data {
            h[*l as usize] += 1;
        }
        h
    }
}

impl Voxels for LabelVolume {
    type Elem = u16;

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn data(&self) -> &[u16] {
        &self.data
    }

    fn with_data(&self, grid: Grid, data: Vec<u16>) -> Result<Self> {
        LabelVolume::new(grid, data, self.label_count)
    }
}
