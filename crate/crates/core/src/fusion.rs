//! Majority-vote fusion of overlapping tile segmentations.
//!
//! Every canonical voxel takes the label that most of its covering tiles
//! voted for; ties go to the smaller label and tiles that do not cover a
//! voxel have no say. Voxels outside every tile are set to background.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tiling::{SubSpace, TileLattice};
use crate::volume::{Grid, LabelVolume, Volume};

/// Sparse per-voxel vote counts, stored row-compressed: the votes of voxel
/// `i` are `entries[offsets[i]..offsets[i + 1]]`, ordered by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub dims: [usize; 3],
    pub label_count: usize,
    offsets: Vec<usize>,
    entries: Vec<(u16, u16)>,
}

impl VoteTally {
    /// `(label, votes)` pairs at voxel `idx`; empty where no tile covers it.
    pub fn votes(&self, idx: usize) -> &[(u16, u16)] {
        &self.entries[self.offsets[idx]..self.offsets[idx + 1]]
    }

    pub fn total(&self, idx: usize) -> usize {
        self.votes(idx).iter().map(|(_, c)| *c as usize).sum()
    }

    /// Most-voted label with ties to the smaller label; `None` if uncovered.
    pub fn winner(&self, idx: usize) -> Option<u16> {
        winner(self.votes(idx)).map(|(l, _)| l)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fused labels plus per-voxel agreement.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub labels: LabelVolume,
    /// Winning votes divided by the number of covering tiles (0 where
    /// uncovered).
    pub confidence: Volume,
    pub uncovered_voxels: usize,
}

fn winner(votes: &[(u16, u16)]) -> Option<(u16, u16)> {
    // strictly-greater keeps the first (smallest) label on ties
    let mut best: Option<(u16, u16)> = None;
    for &(l, c) in votes {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best
}

/// Validated inputs, ordered by tile index.
struct TileSet<'a> {
    dims: [usize; 3],
    tiles: Vec<(&'a SubSpace, &'a [u16])>,
}

impl<'a> TileSet<'a> {
    fn new(tile_segs: &'a [(SubSpace, LabelVolume)], lat: &TileLattice, label_count: usize) -> Result<Self> {
        if label_count == 0 || label_count > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("label count {label_count} out of range")));
        }
        if tile_segs.len() != lat.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tile segmentations for a lattice of {} tiles",
                tile_segs.len(),
                lat.len()
            )));
        }
        let mut seen = vec![false; lat.len()];
        let mut tiles = Vec::with_capacity(tile_segs.len());
        for (s, seg) in tile_segs {
            let slot = s
                .index
                .checked_sub(1)
                .filter(|i| *i < lat.len() && lat.tiles[*i] == *s)
                .ok_or_else(|| Error::InvalidArgument(format!("tile {} is not part of the lattice", s.index)))?;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::InvalidArgument(format!("tile {} given twice", s.index)));
            }
            if seg.dims() != s.size {
                return Err(Error::GeometryMismatch(format!(
                    "segmentation of tile {} has dims {:?}, expected {:?}",
                    s.index,
                    seg.dims(),
                    s.size
                )));
            }
            if let Some(&bad) = seg.data().iter().find(|l| **l as usize >= label_count) {
                return Err(Error::LabelRange {
                    label: bad as u32,
                    label_count,
                });
            }
            tiles.push((s, seg.data()));
        }
        tiles.sort_by_key(|(s, _)| s.index);
        Ok(Self {
            dims: lat.canonical_dims,
            tiles,
        })
    }

    /// Calls `f(x, votes)` for every voxel of row (y, z); `votes` is sorted
    /// by label and run-length encoded.
    fn for_row(&self, y: usize, z: usize, mut f: impl FnMut(usize, &[(u16, u16)])) {
        let row_tiles: Vec<&(&SubSpace, &[u16])> = self
            .tiles
            .iter()
            .filter(|(s, _)| {
                y >= s.corner[1] && y < s.corner[1] + s.size[1] && z >= s.corner[2] && z < s.corner[2] + s.size[2]
            })
            .collect();
        let mut labels: Vec<u16> = Vec::with_capacity(row_tiles.len());
        let mut runs: Vec<(u16, u16)> = Vec::with_capacity(row_tiles.len());
        for x in 0..self.dims[0] {
            labels.clear();
            for (s, data) in &row_tiles {
                if x >= s.corner[0] && x < s.corner[0] + s.size[0] {
                    let (lx, ly, lz) = (x - s.corner[0], y - s.corner[1], z - s.corner[2]);
                    labels.push(data[lx + s.size[0] * (ly + s.size[1] * lz)]);
                }
            }
            labels.sort_unstable();
            runs.clear();
            for &l in &labels {
                match runs.last_mut() {
                    Some((rl, c)) if *rl == l => *c += 1,
                    _ => runs.push((l, 1)),
                }
            }
            f(x, &runs);
        }
    }
}

/// Per-voxel vote counts over covering tiles.
pub fn vote_counts(tile_segs: &[(SubSpace, LabelVolume)], lat: &TileLattice, label_count: usize) -> Result<VoteTally> {
    let set = TileSet::new(tile_segs, lat, label_count)?;
    let [nx, ny, nz] = set.dims;
    let slices: Vec<(Vec<usize>, Vec<(u16, u16)>)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut lens = Vec::with_capacity(nx * ny);
            let mut entries = Vec::new();
            for y in 0..ny {
                set.for_row(y, z, |_, votes| {
                    lens.push(votes.len());
                    entries.extend_from_slice(votes);
                });
            }
            (lens, entries)
        })
        .collect();
    let mut offsets = Vec::with_capacity(nx * ny * nz + 1);
    offsets.push(0);
    let mut entries = Vec::new();
    for (lens, e) in slices {
        for l in lens {
            offsets.push(offsets.last().unwrap() + l);
        }
        entries.extend(e);
    }
    Ok(VoteTally {
        dims: set.dims,
        label_count,
        offsets,
        entries,
    })
}

/// Fuses the tiles on the canonical grid and reports agreement.
///
/// Work is split by z-slice; each voxel's result depends only on its own
/// votes, so the output is identical for any thread count.
pub fn fuse_detailed(
    tile_segs: &[(SubSpace, LabelVolume)],
    lat: &TileLattice,
    label_count: usize,
    canonical: &Grid,
) -> Result<Fusion> {
    if canonical.dims != lat.canonical_dims {
        return Err(Error::GeometryMismatch(format!(
            "canonical grid {:?} vs lattice dims {:?}",
            canonical.dims, lat.canonical_dims
        )));
    }
    let set = TileSet::new(tile_segs, lat, label_count)?;
    let [nx, ny, _] = set.dims;
    let n = canonical.len();
    let mut labels = vec![0u16; n];
    let mut confidence = vec![0f32; n];
    let uncovered: usize = labels
        .par_chunks_mut(nx * ny)
        .zip(confidence.par_chunks_mut(nx * ny))
        .enumerate()
        .map(|(z, (lab, conf))| {
            let mut missing = 0;
            for y in 0..ny {
                set.for_row(y, z, |x, votes| {
                    let i = x + nx * y;
                    match winner(votes) {
                        Some((l, c)) => {
                            let total: u32 = votes.iter().map(|(_, c)| *c as u32).sum();
                            lab[i] = l;
                            conf[i] = c as f32 / total as f32;
                        }
                        None => missing += 1,
                    }
                });
            }
            missing
        })
        .sum();
    if uncovered > 0 {
        log::warn!("{uncovered} canonical voxels are covered by no tile; set to background");
    }
    Ok(Fusion {
        labels: LabelVolume::new(canonical.clone(), labels, label_count)?,
        confidence: Volume::new(canonical.clone(), confidence)?,
        uncovered_voxels: uncovered,
    })
}

/// Majority-vote fusion; see [`fuse_detailed`].
pub fn fuse(
    tile_segs: &[(SubSpace, LabelVolume)],
    lat: &TileLattice,
    label_count: usize,
    canonical: &Grid,
) -> Result<LabelVolume> {
    Ok(fuse_detailed(tile_segs, lat, label_count, canonical)?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{coverage_map, extract_tile, make_lattice, Preset};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::with_spacing(dims, [1.0; 3]).unwrap()
    }

    fn constant_tiles(lat: &TileLattice, labels: &[u16], l: usize) -> Vec<(SubSpace, LabelVolume)> {
        lat.tiles
            .iter()
            .zip(labels)
            .map(|(s, v)| (*s, LabelVolume::new(grid(s.size), vec![*v; s.voxel_count()], l).unwrap()))
            .collect()
    }

    #[test]
    fn single_tile_is_pasted() {
        let lat = make_lattice([4, 3, 2], [1, 1, 1], [4, 3, 2]).unwrap();
        let data: Vec<u16> = (0..24).map(|i| (i % 5) as u16).collect();
        let seg = LabelVolume::new(grid([4, 3, 2]), data.clone(), 5).unwrap();
        let out = fuse(&[(lat.tiles[0], seg)], &lat, 5, &grid([4, 3, 2])).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn strict_majority_and_tie_break() {
        // three fully overlapping tiles voting 2, 2, 5
        let lat = make_lattice([2, 2, 2], [3, 1, 1], [2, 2, 2]).unwrap();
        let out = fuse(&constant_tiles(&lat, &[2, 5, 2], 8), &lat, 8, &grid([2, 2, 2])).unwrap();
        assert!(out.data().iter().all(|l| *l == 2));
        let lat = make_lattice([2, 2, 2], [2, 1, 1], [2, 2, 2]).unwrap();
        let f = fuse_detailed(&constant_tiles(&lat, &[7, 3], 8), &lat, 8, &grid([2, 2, 2])).unwrap();
        assert!(f.labels.data().iter().all(|l| *l == 3));
        assert!(f.confidence.data().iter().all(|c| *c == 0.5));
    }

    #[test]
    fn input_errors() {
        let lat = make_lattice([4, 4, 4], [2, 1, 1], [2, 4, 4]).unwrap();
        let g = grid([4, 4, 4]);
        let mut tiles = constant_tiles(&lat, &[1, 1], 3);
        tiles[1].1 = LabelVolume::zeros(grid([3, 4, 4]), 3).unwrap();
        assert!(matches!(fuse(&tiles, &lat, 3, &g), Err(Error::GeometryMismatch(_))));
        let tiles = constant_tiles(&lat, &[1, 4], 5);
        assert!(matches!(fuse(&tiles, &lat, 3, &g), Err(Error::LabelRange { label: 4, .. })));
        let tiles = constant_tiles(&lat, &[1], 3);
        assert!(fuse(&tiles, &lat, 3, &g).is_err());
    }

    #[test]
    fn slant8_partition_has_one_vote_everywhere() {
        let lat = Preset::Slant8.lattice([10, 8, 6]).unwrap();
        let tally = vote_counts(&constant_tiles(&lat, &[1, 2, 3, 4, 5, 6, 7, 0], 8), &lat, 8).unwrap();
        assert!((0..tally.len()).all(|i| tally.total(i) == 1));
    }

    #[test]
    fn uncovered_voxels_are_background_and_absent_from_tally() {
        // hand-built lattice with a hole at x = 2
        let lat = TileLattice {
            canonical_dims: [3, 1, 1],
            counts: [2, 1, 1],
            tiles: vec![
                SubSpace { index: 1, corner: [0, 0, 0], size: [1, 1, 1] },
                SubSpace { index: 2, corner: [1, 0, 0], size: [1, 1, 1] },
            ],
        };
        let tiles = constant_tiles(&lat, &[4, 5], 6);
        let f = fuse_detailed(&tiles, &lat, 6, &grid([3, 1, 1])).unwrap();
        assert_eq!(f.labels.data(), &[4, 5, 0]);
        assert_eq!(f.uncovered_voxels, 1);
        assert!(vote_counts(&tiles, &lat, 6).unwrap().votes(2).is_empty());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (TileLattice, Vec<(SubSpace, LabelVolume)>, usize) {
        let dims: [usize; 3] = [0, 1, 2].map(|_| rng.random_range(1..=12));
        let counts = [0, 1, 2].map(|_| rng.random_range(1..=3usize));
        let size = [0, 1, 2].map(|k| rng.random_range(dims[k].div_ceil(counts[k])..=dims[k]));
        let lat = make_lattice(dims, counts, size).unwrap();
        let l = rng.random_range(1..=10usize);
        let tiles = lat
            .tiles
            .iter()
            .map(|s| {
                let d = (0..s.voxel_count()).map(|_| rng.random_range(0..l as u16)).collect();
                (*s, LabelVolume::new(grid(s.size), d, l).unwrap())
            })
            .collect();
        (lat, tiles, l)
    }

    fn oracle(lat: &TileLattice, tiles: &[(SubSpace, LabelVolume)], l: usize) -> Vec<u16> {
        let [nx, ny, nz] = lat.canonical_dims;
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut hist = vec![0usize; l];
                    for (s, seg) in tiles {
                        if s.contains([x, y, z]) {
                            hist[seg.get(x - s.corner[0], y - s.corner[1], z - s.corner[2]) as usize] += 1;
                        }
                    }
                    let max = *hist.iter().max().unwrap();
                    out.push(if max == 0 { 0 } else { hist.iter().position(|h| *h == max).unwrap() as u16 });
                }
            }
        }
        out
    }

    #[test]
    fn random_instances_match_oracle_and_shuffles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let (lat, mut tiles, l) = random_instance(&mut rng);
            let g = grid(lat.canonical_dims);
            let out = fuse(&tiles, &lat, l, &g).unwrap();
            assert_eq!(out.data(), &oracle(&lat, &tiles, l)[..]);
            let tally = vote_counts(&tiles, &lat, l).unwrap();
            let cov = coverage_map(&lat);
            for i in 0..tally.len() {
                assert_eq!(tally.total(i), cov.counts[i] as usize);
                assert_eq!(tally.winner(i).unwrap_or(0), out.data()[i]);
            }
            tiles.shuffle(&mut rng);
            assert_eq!(fuse(&tiles, &lat, l, &g).unwrap(), out);
        }
    }

    #[test]
    fn identical_copies_are_idempotent() {
        let lat = Preset::Slant27.lattice([12, 10, 11]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid([12, 10, 11]);
        let truth = LabelVolume::new(g.clone(), (0..g.len()).map(|_| rng.random_range(0..6)).collect(), 6).unwrap();
        let tiles: Vec<_> = lat.tiles.iter().map(|s| (*s, extract_tile(&truth, s).unwrap())).collect();
        let f = fuse_detailed(&tiles, &lat, 6, &g).unwrap();
        assert_eq!(f.labels, truth);
        assert!(f.confidence.data().iter().all(|c| *c == 1.0));
    }
}
