//! Synthetic nested-ellipsoid "brain" phantoms with known ground truth.
//!
//! Label `l` (1 ≤ l < L) occupies the shell between ellipsoid `l` and
//! ellipsoid `l + 1`; the innermost label is a solid ellipsoid and label 0 is
//! everything outside ellipsoid 1. All ellipsoids share one centre but have
//! different axis ratios, which keeps the shapes free of affine symmetries.
//! Labels are evaluated analytically at voxel centres, so misaligned phantoms
//! carry no resampling error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{AffineParams, AffineTransform};
use crate::volume::{Grid, LabelVolume, Volume};

/// Rigid-plus-scale misalignment applied to the phantom anatomy about the
/// world origin (the grid centre).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Misalignment {
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for Misalignment {
    fn default() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation_mm: [0.0; 3],
            scale: [1.0; 3],
        }
    }
}

impl Misalignment {
    /// Body-frame → world map of the phantom anatomy.
    pub fn transform(&self) -> Result<AffineTransform> {
        AffineParams {
            translation: self.translation_mm,
            rotation: self.rotation_deg.map(f64::to_radians),
            scale: self.scale,
            shear: [0.0; 3],
        }
        .to_transform([0.0; 3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub label_count: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub bias_amplitude: f64,
    /// Relative amplitude of a smooth intensity texture attached to the
    /// anatomy (it moves with the misalignment, unlike the bias field).
    /// Gives registration something to lock onto beyond the ellipsoid
    /// boundaries, which alone are nearly affine-symmetric.
    pub texture_amplitude: f64,
    pub misalignment: Misalignment,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96, 96, 96],
            spacing: [1.0; 3],
            label_count: 6,
            seed: 0,
            noise_std: 2.0,
            bias_amplitude: 0.0,
            texture_amplitude: 0.0,
            misalignment: Misalignment::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub intensity: Volume,
    pub labels: LabelVolume,
}

/// Fraction of the half field of view spanned by the outer ellipsoid.
const OUTER_AXES: [f64; 3] = [0.80, 0.72, 0.64];
/// Radius of the innermost ellipsoid relative to the outer one.
const INNER_FRACTION: f64 = 0.15;
/// Texture plane waves in half-FOV units: (wave vector, phase). Fixed, so
/// every phantom with the same grid shares the same anatomy.
const TEXTURE_WAVES: [([f64; 3], f64); 3] = [
    ([6.6, 2.9, 0.0], 0.4),
    ([-2.2, 5.8, 3.5], 1.1),
    ([1.6, -2.6, 7.0], 2.3),
];

fn texture(u: [f64; 3]) -> f64 {
    TEXTURE_WAVES
        .iter()
        .map(|(k, phase)| (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + phase).sin())
        .sum::<f64>()
        / TEXTURE_WAVES.len() as f64
}

impl PhantomSpec {
    /// Grid with voxel-to-world `diag(spacing)` centred on the world origin.
    pub fn grid(&self) -> Result<Grid> {
        let center: Vec<f64> = (0..3)
            .map(|k| -(self.dims[k] as f64 - 1.0) / 2.0 * self.spacing[k])
            .collect();
        let v2w = AffineTransform::from_linear(
            [
                [self.spacing[0], 0.0, 0.0],
                [0.0, self.spacing[1], 0.0],
                [0.0, 0.0, self.spacing[2]],
            ],
            [center[0], center[1], center[2]],
        )?;
        Grid::new(self.dims, self.spacing, v2w)
    }

    /// Semi-axes (mm) of ellipsoids 1..L-1, outermost first.
    fn ellipsoids(&self) -> Result<Vec<[f64; 3]>> {
        let l = self.label_count;
        if l < 2 {
            return Err(Error::InvalidArgument("phantom needs at least 2 labels".into()));
        }
        let half: Vec<f64> = (0..3)
            .map(|k| self.dims[k] as f64 * self.spacing[k] / 2.0)
            .collect();
        let outer = [half[0] * OUTER_AXES[0], half[1] * OUTER_AXES[1], half[2] * OUTER_AXES[2]];
        let shells = l - 1;
        let max_spacing = self.spacing.iter().copied().fold(0.0, f64::max);
        let min_axis = outer.iter().copied().fold(f64::INFINITY, f64::min);
        let thickness = min_axis * (1.0 - INNER_FRACTION) / shells as f64;
        if thickness < 1.5 * max_spacing {
            return Err(Error::InvalidArgument(format!(
                "{l} labels need shells {thickness:.2} mm thick, below 1.5 voxels; \
                 use fewer labels or a larger grid"
            )));
        }
        let mut axes = Vec::with_capacity(shells);
        for i in 0..shells {
            let s = 1.0 - (1.0 - INNER_FRACTION) * i as f64 / shells as f64;
            let mut a = [0.0; 3];
            for k in 0..3 {
                // per-level ratio wobble, capped so ellipsoids stay nested
                let wobble = 1.0 + 0.06 * ((i as f64) * 1.7 + k as f64 * 2.1).sin();
                a[k] = outer[k] * s * if i == 0 { 1.0 } else { wobble };
                if let Some(prev) = axes.last() {
                    let prev: &[f64; 3] = prev;
                    a[k] = a[k].min(prev[k] - thickness * 0.5);
                }
            }
            axes.push(a);
        }
        Ok(axes)
    }

    /// Base intensity of each label before bias and noise.
    pub fn label_intensity(&self, label: u16) -> f64 {
        if label == 0 {
            0.0
        } else {
            50.0 + 150.0 * label as f64 / (self.label_count - 1) as f64
        }
    }

    pub fn generate(&self) -> Result<Phantom> {
        let grid = self.grid()?;
        let axes = self.ellipsoids()?;
        let body_to_world = self.misalignment.transform()?;
        let world_to_body = body_to_world.invert()?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0))
            .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
        let phase = {
            let u = Normal::new(0.0, 1.0).unwrap();
            [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)]
        };
        let half: Vec<f64> = (0..3)
            .map(|k| self.dims[k] as f64 * self.spacing[k] / 2.0)
            .collect();

        let n = grid.len();
        let mut labels = vec![0u16; n];
        let mut data = vec![0.0f32; n];
        for idx in 0..n {
            let c = grid.coords(idx);
            let p = grid.voxel_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            let q = world_to_body.apply(p);
            let mut label = 0u16;
            for (i, a) in axes.iter().enumerate() {
                let r = (q[0] / a[0]).powi(2) + (q[1] / a[1]).powi(2) + (q[2] / a[2]).powi(2);
                if r <= 1.0 {
                    label = (i + 1) as u16;
                } else {
                    break;
                }
            }
            let bias = 1.0
                + self.bias_amplitude
                    * (0.5 * (std::f64::consts::PI * p[0] / half[0] + phase[0]).sin()
                        + 0.3 * (std::f64::consts::PI * p[1] / half[1] + phase[1]).sin()
                        + 0.2 * (std::f64::consts::PI * p[2] / half[2] + phase[2]).sin());
            let mut v = self.label_intensity(label) * bias;
            if label > 0 && self.texture_amplitude != 0.0 {
                v *= 1.0 + self.texture_amplitude * texture([q[0] / half[0], q[1] / half[1], q[2] / half[2]]);
            }
            if self.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            labels[idx] = label;
            data[idx] = v as f32;
        }
        Ok(Phantom {
            intensity: Volume::new(grid.clone(), data)?,
            labels: LabelVolume::new(grid, labels, self.label_count)?,
        })
    }

    /// The transform mapping this phantom's world frame onto the world frame
    /// of an unmisaligned phantom with the same grid.
    pub fn to_reference(&self) -> Result<AffineTransform> {
        self.misalignment.transform()?.invert()
    }
}
