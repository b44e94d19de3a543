//! Fréchet distance between Gaussians fitted to embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::ImageBatch;
use crate::encoder::Backbone;
use crate::error::{invalid, Error, Result};
use crate::io::Reader;

const STATS_MAGIC: &[u8; 4] = b"NDFS";
const NEGATIVE_EIGEN_LIMIT: f64 = -1e-3;

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Blob layout: magic `NDFS`, `u32` D, `u64` count, D mean values and
    /// D*D row-major covariance values, all little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(16 + 8 * d * (d + 1));
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for v in self.mean.iter().chain(self.cov.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(STATS_MAGIC)?;
        let d = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mean = Array1::from(r.f64s(d)?);
        let cov = Array2::from_shape_vec((d, d), r.f64s(d * d)?).map_err(|e| Error::Format(e.to_string()))?;
        r.finish()?;
        if count < 2 {
            return Err(Error::Format(format!("stats count {count} below 2")));
        }
        Ok(Self { mean, cov, count })
    }
}

/// Mean and covariance with divisor `N - 1`.
pub fn compute_stats(embeddings: ArrayView2<'_, f64>) -> Result<FeatureStats> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(invalid!("need at least 2 embeddings for a covariance, got {n}"));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("nonempty");
    let centered = &embeddings - &mean;
    let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
    // exact symmetry
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(FeatureStats { mean, cov, count: n })
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn symmetric_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&lo) = eig.eigenvalues.iter().find(|&&v| v < NEGATIVE_EIGEN_LIMIT || !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has eigenvalue {lo}; statistics too degenerate")));
    }
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, floored at 0.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric product `S_a^{1/2} S_b S_a^{1/2}`, which shares its spectrum
/// with `S_a S_b`. Eigenvalues in `[-1e-3, 0)` are clamped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("stats dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);

    let eig_a = symmetric_eigen(to_nalgebra(&a.cov), "first covariance")?;
    let sqrt_vals = eig_a.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &eig_a.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig_a.eigenvectors.transpose();
    let product = &sqrt_a * to_nalgebra(&b.cov) * &sqrt_a;
    let eig_p = symmetric_eigen(product, "covariance product")?;
    let tr_sqrt: f64 = eig_p.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();

    let d = mean_term + a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// FID probe with cached statistics of the real data.
///
/// Generated samples are embedded with the same frozen extractor as the
/// reference set, so absolute values are specific to that extractor.
pub struct FidProbe<'a> {
    extractor: &'a Backbone,
    reference: FeatureStats,
}

impl<'a> FidProbe<'a> {
    pub fn new(extractor: &'a Backbone, real: &ImageBatch) -> Result<Self> {
        let emb = extractor.embed(real)?;
        Ok(Self { extractor, reference: compute_stats(emb.data.view())? })
    }

    pub fn with_reference(extractor: &'a Backbone, reference: FeatureStats) -> Self {
        Self { extractor, reference }
    }

    pub fn reference(&self) -> &FeatureStats {
        &self.reference
    }

    pub fn fid(&self, generated: &ImageBatch) -> Result<f64> {
        let emb = self.extractor.embed(generated)?;
        frechet_distance(&compute_stats(emb.data.view())?, &self.reference)
    }
}
