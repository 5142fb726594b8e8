use rayon::prelude::*;

use super::{Grid, LabelVolume, Volume, Voxels};
use crate::error::{Error, Result};
use crate::registration::AffineTransform;

/// Interpolation kernel used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Continuous coordinates within this distance of an integer are snapped to
/// it, so that identity-like maps reproduce source voxels bit for bit.
const SNAP: f64 = 1e-6;

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

pub(crate) trait Sample: Voxels {
    const LABELS: bool;
    fn to_f64(e: Self::Elem) -> f64;
    fn from_f64(v: f64) -> Self::Elem;
}

impl Sample for Volume {
    const LABELS: bool = false;
    fn to_f64(e: f32) -> f64 {
        e as f64
    }
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
}

impl Sample for LabelVolume {
    const LABELS: bool = true;
    fn to_f64(e: u16) -> f64 {
        e as f64
    }
    fn from_f64(v: f64) -> u16 {
        v as u16
    }
}

/// Resamples `src` onto `target`.
///
/// `transform` maps source world coordinates to target world coordinates
/// (the direction returned by registration). Each output voxel pulls from the
/// source at `transform⁻¹(world)`; samples falling outside the source are 0.
#[allow(private_bounds)]
pub fn resample<V: Sample>(src: &V, transform: &AffineTransform, target: &Grid, interp: Interp) -> Result<V> {
    if V::LABELS && interp != Interp::Nearest {
        return Err(Error::InvalidInterp(
            "label volumes can only be resampled with nearest-neighbour interpolation".into(),
        ));
    }
    let sg = src.grid();
    let pull = sg
        .voxel_to_world
        .invert()?
        .compose(&transform.invert()?)
        .compose(&target.voxel_to_world);
    let [sx, sy, sz] = sg.dims;
    let sdata = src.data();
    let [nx, ny, _] = target.dims;
    let mut out = vec![V::Elem::default(); target.len()];

    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let c = pull.apply([x as f64, y as f64, z as f64]);
                let c = [snap(c[0]), snap(c[1]), snap(c[2])];
                let v = match interp {
                    Interp::Nearest => {
                        let ix = (c[0] + 0.5).floor();
                        let iy = (c[1] + 0.5).floor();
                        let iz = (c[2] + 0.5).floor();
                        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
                            continue;
                        }
                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                        if ix >= sx || iy >= sy || iz >= sz {
                            continue;
                        }
                        sdata[ix + sx * (iy + sy * iz)]
                    }
                    Interp::Trilinear => match trilinear::<V>(sdata, [sx, sy, sz], c) {
                        Some(v) => v,
                        None => continue,
                    },
                };
                slab[x + nx * y] = v;
            }
        }
    });
    src.with_data(target.clone(), out)
}

#[inline]
fn trilinear<V: Sample>(data: &[V::Elem], dims: [usize; 3], c: [f64; 3]) -> Option<V::Elem> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0f64; 3];
    for k in 0..3 {
        let max = (dims[k] - 1) as f64;
        if !(c[k] >= 0.0 && c[k] <= max) {
            return None;
        }
        let fl = c[k].floor();
        lo[k] = fl as usize;
        f[k] = c[k] - fl;
        hi[k] = if f[k] > 0.0 { lo[k] + 1 } else { lo[k] };
    }
    let at = |x: usize, y: usize, z: usize| V::to_f64(data[x + dims[0] * (y + dims[1] * z)]);
    if f == [0.0; 3] {
        return Some(data[lo[0] + dims[0] * (lo[1] + dims[1] * lo[2])]);
    }
    let c00 = at(lo[0], lo[1], lo[2]) * (1.0 - f[0]) + at(hi[0], lo[1], lo[2]) * f[0];
    let c10 = at(lo[0], hi[1], lo[2]) * (1.0 - f[0]) + at(hi[0], hi[1], lo[2]) * f[0];
    let c01 = at(lo[0], lo[1], hi[2]) * (1.0 - f[0]) + at(hi[0], lo[1], hi[2]) * f[0];
    let c11 = at(lo[0], hi[1], hi[2]) * (1.0 - f[0]) + at(hi[0], hi[1], hi[2]) * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    Some(V::from_f64(c0 * (1.0 - f[2]) + c1 * f[2]))
}

/// Trilinear sample of a volume at continuous voxel coordinates; `None`
/// outside the grid.
#[inline]
pub(crate) fn sample_trilinear(v: &Volume, c: [f64; 3]) -> Option<f32> {
    trilinear::<Volume>(v.data(), v.dims(), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oblique_grid(dims: [usize; 3]) -> Grid {
        let v2w = AffineTransform::from_rows([
            [0.0, 1.2, 0.1, -30.0],
            [0.9, 0.0, 0.0, 12.0],
            [0.05, 0.0, 1.0, 4.5],
        ])
        .unwrap();
        Grid::new(dims, [0.9, 1.2, 1.0], v2w).unwrap()
    }

    fn random_volume(grid: Grid, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.len()).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        Volume::new(grid, data).unwrap()
    }

    fn random_labels(grid: Grid, seed: u64, l: usize) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.len()).map(|_| rng.random_range(0..l as u16)).collect();
        LabelVolume::new(grid, data, l).unwrap()
    }

    #[test]
    fn identity_on_own_grid_is_bitwise_identity() {
        let v = random_volume(oblique_grid([9, 7, 5]), 1);
        let id = AffineTransform::identity();
        for interp in [Interp::Trilinear, Interp::Nearest] {
            let out = resample(&v, &id, v.grid(), interp).unwrap();
            assert_eq!(out.data(), v.data());
        }
        let l = random_labels(oblique_grid([9, 7, 5]), 2, 7);
        assert_eq!(resample(&l, &id, l.grid(), Interp::Nearest).unwrap().data(), l.data());
    }

    #[test]
    fn labels_reject_trilinear() {
        let l = random_labels(Grid::with_spacing([3, 3, 3], [1.0; 3]).unwrap(), 3, 4);
        let r = resample(&l, &AffineTransform::identity(), l.grid(), Interp::Trilinear);
        assert!(matches!(r, Err(Error::InvalidInterp(_))));
    }

    /// Brute-force index-shift oracle for integer voxel translations.
    fn shift_oracle(l: &LabelVolume, shift: [i64; 3]) -> Vec<u16> {
        let [nx, ny, nz] = l.dims();
        let mut out = vec![0u16; l.data().len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let s = [x as i64 - shift[0], y as i64 - shift[1], z as i64 - shift[2]];
                    if (0..3).all(|k| s[k] >= 0 && s[k] < l.dims()[k] as i64) {
                        out[x + nx * (y + ny * z)] = l.get(s[0] as usize, s[1] as usize, s[2] as usize);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn plus_one_voxel_along_x_shifts_one_plane() {
        let g = Grid::with_spacing([16, 16, 16], [1.0; 3]).unwrap();
        let l = random_labels(g, 4, 9);
        let t = AffineTransform::translation([1.0, 0.0, 0.0]);
        let out = resample(&l, &t, l.grid(), Interp::Nearest).unwrap();
        assert_eq!(out.data(), shift_oracle(&l, [1, 0, 0]).as_slice());
        for z in 0..16 {
            for y in 0..16 {
                assert_eq!(out.get(0, y, z), 0);
            }
        }
    }

    #[test]
    fn integer_translations_match_index_shift_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let g = Grid::with_spacing([16, 16, 16], [1.5, 2.0, 0.5]).unwrap();
            let l = random_labels(g, seed, 12);
            let shift = [
                rng.random_range(-5i64..=5),
                rng.random_range(-5i64..=5),
                rng.random_range(-5i64..=5),
            ];
            let t = AffineTransform::translation([
                shift[0] as f64 * 1.5,
                shift[1] as f64 * 2.0,
                shift[2] as f64 * 0.5,
            ]);
            let out = resample(&l, &t, l.grid(), Interp::Nearest).unwrap();
            assert_eq!(out.data(), shift_oracle(&l, shift).as_slice(), "shift {shift:?}");
        }
    }

    #[test]
    fn nearest_never_invents_labels() {
        let g = Grid::with_spacing([12, 12, 12], [1.0; 3]).unwrap();
        let data: Vec<u16> = (0..g.len()).map(|i| [0u16, 3, 7][i % 3]).collect();
        let l = LabelVolume::new(g, data, 10).unwrap();
        let t = AffineTransform::from_rows([
            [0.95, 0.2, 0.0, 1.3],
            [-0.2, 0.95, 0.1, -0.7],
            [0.0, -0.1, 1.1, 0.4],
        ])
        .unwrap();
        let out = resample(&l, &t, l.grid(), Interp::Nearest).unwrap();
        assert!(out.data().iter().all(|v| [0, 3, 7].contains(v)));
    }

    #[test]
    fn trilinear_reproduces_linear_ramp() {
        let g = Grid::with_spacing([10, 10, 10], [1.0; 3]).unwrap();
        let data: Vec<f32> = (0..g.len())
            .map(|i| {
                let [x, y, z] = g.coords(i);
                (x + 2 * y + 3 * z) as f32
            })
            .collect();
        let v = Volume::new(g, data).unwrap();
        let t = AffineTransform::translation([0.25, 0.5, 0.0]);
        let out = resample(&v, &t, v.grid(), Interp::Trilinear).unwrap();
        // interior voxel (5,5,5) pulls from (4.75, 4.5, 5)
        let expect = 4.75 + 2.0 * 4.5 + 15.0;
        assert!((out.get(5, 5, 5) as f64 - expect).abs() < 1e-5);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn colin_grid_onto_canonical_grid_has_canonical_dims() {
        let src = Volume::zeros(Grid::with_spacing([362, 434, 362], [0.5; 3]).unwrap());
        let target = Grid::with_spacing([172, 220, 156], [1.0; 3]).unwrap();
        let out = resample(&src, &AffineTransform::identity(), &target, Interp::Trilinear).unwrap();
        assert_eq!(out.dims(), [172, 220, 156]);
    }
}
