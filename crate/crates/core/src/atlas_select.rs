//! Atlas selection on a PCA manifold of masked canonical-space intensities.
//!
//! Every atlas is z-normalised, restricted to the brain mask and flattened to
//! a vector. The vectors are centred on their mean and all non-trivial
//! principal components are kept (at most `n − 1` for `n` atlases), so
//! distances in projection space equal distances between the centred
//! vectors. A test scan is projected the same way and the nearest atlases
//! are returned.
//!
//! The components are obtained from the `n × n` Gram matrix of the centred
//! vectors instead of a decomposition of the (huge) voxel-space covariance.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::harmonize::{znormalize, BrainMask, ByteReader};
use crate::volume::Volume;

/// Default number of atlases returned by [`select`].
pub const DEFAULT_SELECTED: usize = 15;

/// Eigenvalues below this fraction of the total (uncentred) signal energy
/// are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaManifold {
    pub mask: BrainMask,
    pub mean: Vec<f64>,
    /// Orthonormal principal axes, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    /// `atlas_projections[a][c]`: coordinate of atlas `a` on component `c`.
    pub atlas_projections: Vec<Vec<f64>>,
    pub atlas_ids: Vec<String>,
}

impl PcaManifold {
    pub fn n_atlases(&self) -> usize {
        self.atlas_ids.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// All atlases identical (up to z-normalisation): no usable direction.
    pub fn is_degenerate(&self) -> bool {
        self.components.is_empty()
    }

    /// Projection-space coordinates of a canonical-grid scan.
    pub fn project(&self, v: &Volume) -> Result<Vec<f64>> {
        let x = masked_vector(v, &self.mask)?;
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter().map(|c| dot(c, &centred)).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked_vector(v: &Volume, mask: &BrainMask) -> Result<Vec<f64>> {
    mask.gather(&znormalize(v)?)
}

/// Learns the manifold from canonical-grid atlas intensities.
pub fn build_manifold(atlases: &[(String, Volume)], mask: &BrainMask) -> Result<PcaManifold> {
    let n = atlases.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "atlas selection needs at least 2 atlases, got {n}"
        )));
    }
    let mut data = Vec::with_capacity(n);
    for (id, v) in atlases {
        mask.grid()
            .ensure_same(v.grid(), &format!("atlas {id} vs brain mask"))?;
        data.push(masked_vector(v, mask)?);
    }
    let dim = mask.voxel_count();
    let energy: f64 = data.iter().map(|x| dot(x, x)).sum();
    let mut mean = vec![0.0; dim];
    for x in &data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    for x in data.iter_mut() {
        for (v, m) in x.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let gram = DMatrix::from_fn(n, n, |i, j| dot(&data[i], &data[j]));
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components: Vec<Vec<f64>> = Vec::new();
    for &k in order.iter().take(n - 1) {
        let lambda = eig.eigenvalues[k];
        if lambda <= RANK_TOL * energy {
            break;
        }
        // voxel-space axis: Xcᵀ u / ‖Xcᵀ u‖
        let u = eig.eigenvectors.column(k);
        let mut c = vec![0.0; dim];
        for (i, x) in data.iter().enumerate() {
            for (cv, xv) in c.iter_mut().zip(x) {
                *cv += u[i] * xv;
            }
        }
        // re-orthogonalise against earlier axes to clean up round-off
        for prev in &components {
            let p = dot(prev, &c);
            for (cv, pv) in c.iter_mut().zip(prev) {
                *cv -= p * pv;
            }
        }
        let norm = dot(&c, &c).sqrt();
        if norm == 0.0 {
            break;
        }
        c.iter_mut().for_each(|v| *v /= norm);
        components.push(c);
    }
    if components.is_empty() {
        log::warn!("all {n} atlases have identical normalised intensities; PCA manifold is degenerate");
    }
    let atlas_projections = data
        .iter()
        .map(|x| components.iter().map(|c| dot(c, x)).collect())
        .collect();
    Ok(PcaManifold {
        mask: mask.clone(),
        mean,
        components,
        atlas_projections,
        atlas_ids: atlases.iter().map(|(id, _)| id.clone()).collect(),
    })
}

/// Indices of the `n` atlases nearest to `test` in projection space,
/// nearest first; equal distances keep atlas order.
pub fn select_indices(manifold: &PcaManifold, test: &Volume, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > manifold.n_atlases() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {} atlases",
            manifold.n_atlases()
        )));
    }
    let p = manifold.project(test)?;
    if manifold.is_degenerate() {
        log::warn!("degenerate atlas manifold; selecting atlases in id order");
        return Ok((0..n).collect());
    }
    let mut dist: Vec<(f64, usize)> = manifold
        .atlas_projections
        .iter()
        .enumerate()
        .map(|(i, a)| (a.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum::<f64>(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(dist.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Ids of the `n` nearest atlases, nearest first.
pub fn select(manifold: &PcaManifold, test: &Volume, n: usize) -> Result<Vec<String>> {
    Ok(select_indices(manifold, test, n)?
        .into_iter()
        .map(|i| manifold.atlas_ids[i].clone())
        .collect())
}

const MANIFOLD_MAGIC: &[u8; 8] = b"TFPCA\x00\x00\x01";

impl PcaManifold {
    /// Little-endian layout: magic, mask block, atlas count (u32), component
    /// count (u32), ids (u32 byte length + UTF-8 each), mean, components,
    /// projections (all f64, row by row).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MANIFOLD_MAGIC);
        self.mask.write_bytes(&mut out);
        out.extend_from_slice(&(self.n_atlases() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_components() as u32).to_le_bytes());
        for id in &self.atlas_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        let floats = self
            .mean
            .iter()
            .chain(self.components.iter().flatten())
            .chain(self.atlas_projections.iter().flatten());
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != MANIFOLD_MAGIC {
            return Err(Error::Model("atlas manifold: bad magic".into()));
        }
        let mask = BrainMask::read_bytes(&mut r)?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        if c >= n.max(1) {
            return Err(Error::Model(format!("atlas manifold: {c} components for {n} atlases")));
        }
        let atlas_ids = (0..n)
            .map(|_| {
                let len = r.u32()? as usize;
                String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::Model("atlas manifold: id is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = mask.voxel_count();
        let mut floats = |count: usize| (0..count).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
        let mean = floats(dim)?;
        let components = (0..c).map(|_| floats(dim)).collect::<Result<Vec<_>>>()?;
        let atlas_projections = (0..n).map(|_| floats(c)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            mask,
            mean,
            components,
            atlas_projections,
            atlas_ids,
        })
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
