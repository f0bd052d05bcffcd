//! Evaluation: stitching-seam MSE, mask IoU, pixel-space nearest neighbours
//! and a Fréchet distance over externally computed feature vectors.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::dataset::downscale_to;
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::sampler::PatchGrid;

pub use crate::anomaly::iou;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeamAxis {
    /// A vertical line between two columns.
    Column,
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seam {
    pub axis: SeamAxis,
    /// First pixel index on the far side of the seam.
    pub at: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeamReport {
    pub seams: Vec<Seam>,
    /// Mean over seams; 0 when there are none.
    pub mse: f64,
    pub no_seams: bool,
}

/// Positions where content from a later patch starts: `p[i-1] + s`.
pub fn seam_positions(grid: &PatchGrid) -> Vec<usize> {
    let offs = grid.offsets();
    offs.windows(2)
        .map(|w| w[0] + grid.patch_side)
        .filter(|&c| c < grid.plane_side)
        .collect()
}

/// Mean squared difference of the pixel pairs straddling each seam of
/// `grid`, then averaged over seams.
pub fn seam_mse(plane: &Plane, grid: &PatchGrid) -> Result<SeamReport> {
    let n = grid.plane_side;
    if plane.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: (n, n),
            found: plane.shape(),
        });
    }
    let mut seams = Vec::new();
    for at in seam_positions(grid) {
        let col: f64 = (0..n).map(|r| (plane.get(r, at) - plane.get(r, at - 1)).powi(2)).sum();
        seams.push(Seam { axis: SeamAxis::Column, at, mse: col / n as f64 });
        let row: f64 = (0..n).map(|c| (plane.get(at, c) - plane.get(at - 1, c)).powi(2)).sum();
        seams.push(Seam { axis: SeamAxis::Row, at, mse: row / n as f64 });
    }
    let no_seams = seams.is_empty();
    let mse = if no_seams { 0.0 } else { seams.iter().map(|s| s.mse).sum::<f64>() / seams.len() as f64 };
    Ok(SeamReport { seams, mse, no_seams })
}

/// Side of the pixel vectors compared by `nearest_neighbors`.
pub const NN_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

fn centred_vector(p: &Plane) -> Result<Vec<f64>> {
    let small = downscale_to(p, NN_SIDE, NN_SIDE)?;
    let mean = small.mean();
    Ok(small.as_slice().iter().map(|&v| v - mean).collect())
}

/// Pixel standard deviation below which an image counts as flat.
const FLAT_STD: f64 = 1e-9;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Corpus entries ranked by cosine similarity of area-downscaled,
/// mean-centred pixel vectors. Ties keep corpus order; a flat corpus image
/// has similarity 0.
pub fn nearest_neighbors(query: &Plane, corpus: &[Plane], topk: usize) -> Result<Vec<Neighbor>> {
    if corpus.is_empty() {
        return Err(Error::Contract("nearest-neighbour corpus is empty".into()));
    }
    let q = centred_vector(query)?;
    let qn = norm(&q);
    if qn <= FLAT_STD * (q.len() as f64).sqrt() {
        return Err(Error::DegenerateInput("query image has zero variance".into()));
    }
    let mut out = corpus
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let v = centred_vector(p)?;
            let vn = norm(&v);
            let similarity = if vn <= FLAT_STD * (v.len() as f64).sqrt() {
                0.0
            } else {
                q.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (qn * vn)
            };
            Ok(Neighbor { index, similarity })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index)));
    out.truncate(topk);
    Ok(out)
}

/// Named feature vectors of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, names: Vec::new(), vectors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Format {
                kind: "features",
                detail: format!("vector of length {} in a {}-dim set", v.len(), self.dim),
            });
        }
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format { kind: "features", detail: "name longer than 65535 bytes".into() });
        }
        self.names.push(name);
        self.vectors.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Layout, little-endian: `u32 count, u32 dim`, then per vector
    /// `u16 name length, name bytes (UTF-8), dim x f32`.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (name, v) in self.names.iter().zip(&self.vectors) {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Format { kind: "features", detail };
        let mut fill = |buf: &mut [u8], what: &str| r.read_exact(buf).map_err(|e| bad(format!("{what}: {e}")));
        let mut b4 = [0u8; 4];
        fill(&mut b4, "count")?;
        let count = u32::from_le_bytes(b4) as usize;
        fill(&mut b4, "dimension")?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut set = Self::new(dim);
        for i in 0..count {
            let mut b2 = [0u8; 2];
            fill(&mut b2, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            fill(&mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| bad(format!("vector {i}: name is not UTF-8")))?;
            let mut raw = vec![0u8; dim * 4];
            fill(&mut raw, "values")?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            set.push(name, v)?;
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Mean and unbiased covariance.
    pub fn gaussian_fit(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::DegenerateInput(format!("{n} feature vectors; at least 2 are needed")));
        }
        let d = self.dim;
        let x = DMatrix::from_fn(n, d, |i, j| self.vectors[i][j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        Ok((mean, cov))
    }
}

/// Distance between two feature sets computed by a plug-in metric.
pub trait FeatureMetric {
    fn name(&self) -> &'static str;
    fn compute(&self, a: &FeatureSet, b: &FeatureSet) -> Result<f64>;
}

/// Fréchet distance between Gaussian fits:
/// `|m1 - m2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`.
pub struct Frechet;

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

impl FeatureMetric for Frechet {
    fn name(&self) -> &'static str {
        "frechet"
    }

    fn compute(&self, a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
        if a.dim != b.dim {
            return Err(Error::ShapeMismatch {
                expected: (a.dim, 1),
                found: (b.dim, 1),
            });
        }
        let (m1, c1) = a.gaussian_fit()?;
        let (m2, c2) = b.gaussian_fit()?;
        // tr sqrt(C1 C2) = tr sqrt(S C2 S) with S = sqrt(C1), which is symmetric.
        let s = psd_sqrt(&c1);
        let cross = psd_sqrt(&(&s * &c2 * &s)).trace();
        let value = (&m1 - &m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
        Ok(value.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Mask;
    use crate::sampler::plan_patch_grid;
    use proptest::prelude::*;

    #[test]
    fn constant_plane_has_no_seam_error() {
        let g = plan_patch_grid(32, 8, 2).unwrap();
        let r = seam_mse(&Plane::filled(32, 32, 0.4), &g).unwrap();
        assert!(!r.no_seams);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn step_along_one_seam() {
        let g = plan_patch_grid(20, 8, 2).unwrap();
        let at = seam_positions(&g);
        assert_eq!(at, vec![8, 14]);
        let d = 0.25f64;
        let p = Plane::from_fn(20, 20, |_, c| if c >= 14 { d } else { 0.0 });
        let r = seam_mse(&p, &g).unwrap();
        for s in &r.seams {
            let expect = if s.axis == SeamAxis::Column && s.at == 14 { d * d } else { 0.0 };
            assert!((s.mse - expect).abs() < 1e-12, "{s:?}");
        }
        assert!((r.mse - (d * d) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_patch_flags_no_seams() {
        let g = plan_patch_grid(8, 8, 2).unwrap();
        let r = seam_mse(&Plane::zeros(8, 8), &g).unwrap();
        assert!(r.no_seams);
        assert_eq!(r.mse, 0.0);
        assert!(seam_mse(&Plane::zeros(9, 9), &g).is_err());
    }

    #[test]
    fn clamped_last_offset_seam() {
        // Offsets 0, 6, 12 then clamped 13: content from the last patch
        // starts at 12 + 8 = 20.
        let g = plan_patch_grid(21, 8, 2).unwrap();
        assert_eq!(g.offsets(), vec![0, 6, 12, 13]);
        assert_eq!(seam_positions(&g), vec![8, 14, 20]);
    }

    fn pattern(seed: usize) -> Plane {
        Plane::from_fn(70, 70, |r, c| (((r * 7 + c * 13 + seed * 31) % 17) as f64).sin())
    }

    #[test]
    fn nearest_neighbor_finds_itself() {
        let corpus: Vec<Plane> = (0..5).map(pattern).collect();
        let nn = nearest_neighbors(&corpus[3], &corpus, 4).unwrap();
        assert_eq!(nn.len(), 4);
        assert_eq!(nn[0].index, 3);
        assert!((nn[0].similarity - 1.0).abs() < 1e-9);
        assert!(nn.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn orthogonal_sign_patterns() {
        let q = Plane::from_fn(64, 64, |_, c| if c < 32 { 1.0 } else { -1.0 });
        let corpus = vec![
            Plane::from_fn(64, 64, |r, _| if r < 32 { 1.0 } else { -1.0 }),
            Plane::from_fn(64, 64, |r, c| if (r < 32) == (c < 32) { 1.0 } else { -1.0 }),
        ];
        let nn = nearest_neighbors(&q, &corpus, 4).unwrap();
        assert_eq!(nn.len(), 2);
        assert!(nn.iter().all(|n| n.similarity.abs() < 1e-12));
        assert_eq!((nn[0].index, nn[1].index), (0, 1));
    }

    #[test]
    fn flat_query_rejected() {
        let err = nearest_neighbors(&Plane::filled(64, 64, 0.3), &[pattern(0)], 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
        assert!(nearest_neighbors(&pattern(0), &[], 1).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let mut set = FeatureSet::new(3);
        set.push("a.png", vec![1.0, 2.0, 3.5]).unwrap();
        set.push("b", vec![-1.0, 0.0, 1e-3]).unwrap();
        assert!(set.push("c", vec![1.0]).is_err());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + (2 + 5 + 12) + (2 + 1 + 12));
        assert_eq!(FeatureSet::read_from(&mut buf.as_slice()).unwrap(), set);
        assert!(FeatureSet::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    fn gaussian_set(n: usize, shift: f32, scale: f32) -> FeatureSet {
        let mut set = FeatureSet::new(2);
        for i in 0..n {
            let t = i as f32 / n as f32 * std::f32::consts::TAU;
            set.push(format!("{i}"), vec![shift + scale * t.cos(), shift + scale * t.sin()]).unwrap();
        }
        set
    }

    #[test]
    fn frechet_closed_forms() {
        let a = gaussian_set(64, 0.0, 1.0);
        assert!(Frechet.compute(&a, &a).unwrap().abs() < 1e-9);
        // Same covariance, mean shifted by (1, 1): distance 2.
        let b = gaussian_set(64, 1.0, 1.0);
        assert!((Frechet.compute(&a, &b).unwrap() - 2.0).abs() < 1e-6);
        // Isotropic covariances c1 I and c2 I: 2 (sqrt c1 - sqrt c2)^2.
        let c = gaussian_set(64, 0.0, 2.0);
        let (_, c1) = a.gaussian_fit().unwrap();
        let (_, c2) = c.gaussian_fit().unwrap();
        let expect = 2.0 * (c1[(0, 0)].sqrt() - c2[(0, 0)].sqrt()).powi(2);
        assert!((Frechet.compute(&a, &c).unwrap() - expect).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn iou_grows_with_intersection(bits in proptest::collection::vec(any::<bool>(), 36), extra in 0usize..36) {
            let a = Mask::from_fn(6, 6, |r, c| bits[r * 6 + c]);
            let mut b = Mask::from_fn(6, 6, |r, c| bits[(r * 6 + c + 7) % 36]);
            let before = iou(&a, &b).unwrap();
            // Adding a pixel of `a` to `b` can only grow the overlap.
            let (r, c) = (extra / 6, extra % 6);
            if a.get(r, c) {
                b.set(r, c, true);
                prop_assert!(iou(&a, &b).unwrap() >= before);
            }
        }

        #[test]
        fn neighbors_permutation_equivariant(rot in 0usize..5) {
            let corpus: Vec<Plane> = (0..5).map(pattern).collect();
            let q = pattern(9);
            let base = nearest_neighbors(&q, &corpus, 5).unwrap();
            let rotated: Vec<Plane> = (0..5).map(|i| corpus[(i + rot) % 5].clone()).collect();
            let moved = nearest_neighbors(&q, &rotated, 5).unwrap();
            for n in &moved {
                let orig = (n.index + rot) % 5;
                let m = base.iter().find(|b| b.index == orig).unwrap();
                prop_assert!((m.similarity - n.similarity).abs() < 1e-12);
            }
        }
    }
}
