//! 4x4 homogeneous affine transforms between world (mm) frames.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

const SINGULAR_DET: f64 = 1e-12;

/// An invertible affine map stored as a row-major homogeneous matrix.
///
/// The bottom row is always `(0, 0, 0, 1)`.
#[derive(Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 4]; 4],
}

impl fmt::Debug for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineTransform")
            .field("rows", &&self.m[..3])
            .finish()
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Builds a transform from a 4x4 row-major matrix, validating the bottom
    /// row and invertibility.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "affine bottom row must be (0, 0, 0, 1), got {:?}",
                m[3]
            )));
        }
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite affine entry".into()));
        }
        let t = Self { m };
        let det = t.det3();
        if det.abs() <= SINGULAR_DET {
            return Err(Error::SingularTransform(det));
        }
        Ok(t)
    }

    /// Builds a transform from the top three rows (12 numbers).
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self> {
        Self::from_matrix([rows[0], rows[1], rows[2], [0.0, 0.0, 0.0, 1.0]])
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Self::identity().m;
        for i in 0..3 {
            m[i][3] = t[i];
        }
        Self { m }
    }

    /// Diagonal scaling. Panics if any factor is zero.
    pub fn scaling(s: [f64; 3]) -> Self {
        assert!(s.iter().all(|v| *v != 0.0), "zero scale factor");
        let mut m = Self::identity().m;
        for i in 0..3 {
            m[i][i] = s[i];
        }
        Self { m }
    }

    /// Linear part given as a 3x3 row-major matrix plus translation.
    pub fn from_linear(a: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        Self::from_rows([
            [a[0][0], a[0][1], a[0][2], t[0]],
            [a[1][0], a[1][1], a[1][2], t[1]],
            [a[2][0], a[2][1], a[2][2], t[2]],
        ])
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Determinant of the upper 3x3 block.
    pub fn det3(&self) -> f64 {
        let a = &self.m;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Exact inverse via the adjugate of the linear block.
    pub fn invert(&self) -> Result<Self> {
        let det = self.det3();
        if det.abs() <= SINGULAR_DET || !det.is_finite() {
            return Err(Error::SingularTransform(det));
        }
        let a = &self.m;
        let inv_det = 1.0 / det;
        let mut r = [[0.0f64; 3]; 3];
        r[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
        r[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
        r[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
        r[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
        r[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
        r[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
        r[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
        r[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
        r[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
        let t = self.translation_part();
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(r[i][0] * t[0] + r[i][1] * t[1] + r[i][2] * t[2]);
        }
        Ok(Self {
            m: [
                [r[0][0], r[0][1], r[0][2], ti[0]],
                [r[1][0], r[1][1], r[1][2], ti[1]],
                [r[2][0], r[2][1], r[2][2], ti[2]],
                [0.0, 0.0, 0.0, 1.0],
            ],
        })
    }

    /// Matrix product `self · other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0f64; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Self { m }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes as 16 whitespace-separated numbers, one matrix row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.m {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad transform entry {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 16 {
            return Err(Error::InvalidArgument(format!(
                "transform file must hold 16 numbers, found {}",
                nums.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in nums.into_iter().enumerate() {
            m[i / 4][i % 4] = v;
        }
        Self::from_matrix(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
