//! Spatially localised sub-spaces ("tiles") of the canonical grid.
//!
//! A lattice places `k_x × k_y × k_z` equally sized boxes uniformly along
//! each axis so that the first tile starts at voxel 0 and the last one ends
//! at the far edge. Tiles are numbered from 1 in z-major, then y, then x
//! order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Voxels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubSpace {
    /// 1-based position in the lattice order.
    pub index: usize,
    pub corner: [usize; 3],
    pub size: [usize; 3],
}

impl SubSpace {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.corner[k] && p[k] < self.corner[k] + self.size[k])
    }

    pub fn voxel_count(&self) -> usize {
        self.size.iter().product()
    }

    /// Ensures the box lies inside a grid of the given dims.
    pub fn check_within(&self, dims: [usize; 3]) -> Result<()> {
        for k in 0..3 {
            if self.size[k] == 0 || self.corner[k] + self.size[k] > dims[k] {
                return Err(Error::Bounds(format!(
                    "tile {} (corner {:?}, size {:?}) does not fit in {:?}",
                    self.index, self.corner, self.size, dims
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLattice {
    pub canonical_dims: [usize; 3],
    pub counts: [usize; 3],
    pub tiles: Vec<SubSpace>,
}

impl TileLattice {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_size(&self) -> [usize; 3] {
        self.tiles[0].size
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lat: TileLattice = serde_json::from_str(s)?;
        for t in &lat.tiles {
            t.check_within(lat.canonical_dims)
                .map_err(|e| Error::InvalidLattice(e.to_string()))?;
        }
        Ok(lat)
    }
}

/// `round(i · span / (count − 1))` with halves rounded up, in integers.
fn uniform_corner(i: usize, span: usize, count: usize) -> usize {
    if count == 1 {
        return span / 2;
    }
    let den = count - 1;
    (2 * i * span + den) / (2 * den)
}

/// Builds a uniform lattice of `counts` tiles of `tile_size` voxels.
pub fn make_lattice(canonical_dims: [usize; 3], counts: [usize; 3], tile_size: [usize; 3]) -> Result<TileLattice> {
    for k in 0..3 {
        if counts[k] == 0 || tile_size[k] == 0 || canonical_dims[k] == 0 {
            return Err(Error::InvalidLattice(format!(
                "counts {counts:?}, tile size {tile_size:?} and dims {canonical_dims:?} must all be positive"
            )));
        }
        if tile_size[k] > canonical_dims[k] {
            return Err(Error::InvalidLattice(format!(
                "tile size {} exceeds volume size {} on axis {k}",
                tile_size[k], canonical_dims[k]
            )));
        }
        if counts[k] * tile_size[k] < canonical_dims[k] {
            return Err(Error::CoverageGap {
                axis: k,
                count: counts[k],
                size: tile_size[k],
                dim: canonical_dims[k],
            });
        }
    }
    let offsets: Vec<Vec<usize>> = (0..3)
        .map(|k| {
            (0..counts[k])
                .map(|i| uniform_corner(i, canonical_dims[k] - tile_size[k], counts[k]))
                .collect()
        })
        .collect();
    let mut tiles = Vec::with_capacity(counts.iter().product());
    for &z in &offsets[2] {
        for &y in &offsets[1] {
            for &x in &offsets[0] {
                tiles.push(SubSpace {
                    index: tiles.len() + 1,
                    corner: [x, y, z],
                    size: tile_size,
                });
            }
        }
    }
    Ok(TileLattice {
        canonical_dims,
        counts,
        tiles,
    })
}

/// Named lattice presets. Tile sizes scale with the canonical dims; on a
/// 172 × 220 × 156 grid they give 86 × 110 × 78 (2³ tiles, an exact
/// partition) and 96 × 128 × 88 (3³ overlapping tiles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Slant8,
    Slant27,
}

/// Tile size of the 27-tile preset relative to the 172 × 220 × 156 grid.
const SLANT27_FRACTION: [(usize, usize); 3] = [(96, 172), (128, 220), (88, 156)];

impl Preset {
    pub fn counts(self) -> [usize; 3] {
        match self {
            Preset::Slant8 => [2; 3],
            Preset::Slant27 => [3; 3],
        }
    }

    pub fn tile_size(self, dims: [usize; 3]) -> [usize; 3] {
        match self {
            Preset::Slant8 => dims.map(|d| d.div_ceil(2)),
            Preset::Slant27 => {
                let mut s = [0; 3];
                for k in 0..3 {
                    let (num, den) = SLANT27_FRACTION[k];
                    // round half up
                    s[k] = ((2 * dims[k] * num + den) / (2 * den)).clamp(1, dims[k].max(1));
                }
                s
            }
        }
    }

    pub fn lattice(self, dims: [usize; 3]) -> Result<TileLattice> {
        make_lattice(dims, self.counts(), self.tile_size(dims))
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slant8" => Ok(Preset::Slant8),
            "slant27" => Ok(Preset::Slant27),
            other => Err(Error::Config(format!("unknown lattice preset {other:?} (expected slant8 or slant27)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Slant8 => "slant8",
            Preset::Slant27 => "slant27",
        })
    }
}

/// Either a named preset or explicit counts and tile size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatticeSpec {
    Preset(Preset),
    Custom { counts: [usize; 3], size: [usize; 3] },
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec::Preset(Preset::Slant27)
    }
}

impl LatticeSpec {
    pub fn build(&self, dims: [usize; 3]) -> Result<TileLattice> {
        match *self {
            LatticeSpec::Preset(p) => p.lattice(dims),
            LatticeSpec::Custom { counts, size } => make_lattice(dims, counts, size),
        }
    }
}

/// Crops the tile out of a volume; world coordinates are preserved.
pub fn extract_tile<V: Voxels>(v: &V, s: &SubSpace) -> Result<V> {
    let g = v.grid();
    s.check_within(g.dims)?;
    let grid = g.crop(s.corner, s.size)?;
    let [sx, sy, sz] = s.size;
    let [cx, cy, cz] = s.corner;
    let src = v.data();
    let mut out = Vec::with_capacity(s.voxel_count());
    for z in 0..sz {
        for y in 0..sy {
            let start = g.index(cx, cy + y, cz + z);
            out.extend_from_slice(&src[start..start + sx]);
        }
    }
    v.with_data(grid, out)
}

/// Per-voxel count of covering tiles on the canonical dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub dims: [usize; 3],
    pub counts: Vec<u16>,
}

impl Coverage {
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.counts[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn min(&self) -> u16 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> u16 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| *c as usize).sum()
    }

    /// Stores the counts as a label image on `grid` (label count = max + 1).
    pub fn to_label_volume(&self, grid: &Grid) -> Result<LabelVolume> {
        if grid.dims != self.dims {
            return Err(Error::GeometryMismatch(format!(
                "coverage dims {:?} vs grid dims {:?}",
                self.dims, grid.dims
            )));
        }
        LabelVolume::new(grid.clone(), self.counts.clone(), self.max() as usize + 1)
    }
}

pub fn coverage_map(lat: &TileLattice) -> Coverage {
    let [nx, ny, nz] = lat.canonical_dims;
    let mut counts = vec![0u16; nx * ny * nz];
    for t in &lat.tiles {
        for z in t.corner[2]..t.corner[2] + t.size[2] {
            for y in t.corner[1]..t.corner[1] + t.size[1] {
                let row = nx * (y + ny * z);
                for c in &mut counts[row + t.corner[0]..row + t.corner[0] + t.size[0]] {
                    *c += 1;
                }
            }
        }
    }
    Coverage {
        dims: lat.canonical_dims,
        counts,
    }
}
