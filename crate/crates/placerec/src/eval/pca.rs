//! PCA-based descriptor reduction fitted on database descriptors.
//!
//! The fit runs in f64 on the Gram matrix (count x count) rather than the
//! covariance (dim x dim), so very wide descriptors stay cheap as long as the
//! database is small.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Per-dimension mean of the fitting data.
    pub mean: Array1<f32>,
    /// Orthonormal columns, `[dim, k]`.
    pub projection: Array2<f32>,
    /// Component standard deviations, used when `whiten` is set.
    pub component_std: Array1<f32>,
    pub whiten: bool,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }
}

/// Fits a `k`-component PCA on `data` rows. `k` must not exceed either the
/// descriptor dimension or the number of rows.
pub fn fit_pca(data: ArrayView2<f32>, k: usize, whiten: bool) -> Result<PcaModel> {
    let (n, dim) = (data.nrows(), data.ncols());
    if k == 0 || k > dim {
        return Err(Error::InputShape(format!(
            "pca components k={k} out of range for dimension {dim}"
        )));
    }
    if k > n {
        return Err(Error::InputShape(format!(
            "pca components k={k} exceed the {n} fitting rows"
        )));
    }
    let x = data.mapv(|v| v as f64);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &x - &mean.view().insert_axis(ndarray::Axis(0));
    // Gram trick: eigenvectors v of X X^T lift to directions X^T v / sqrt(l).
    let gram = centered.dot(&centered.t());
    let (eigvals, eigvecs) = jacobi_eigh(&gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let max_eig = eigvals[order[0]].max(0.0);
    let tiny = (max_eig * 1e-12).max(1e-24);
    let mut projection = Array2::<f64>::zeros((dim, k));
    let mut component_std = Array1::<f64>::zeros(k);
    let denom = (n.max(2) - 1) as f64;
    for (c, &ei) in order.iter().take(k).enumerate() {
        let lam = eigvals[ei];
        if lam > tiny {
            let dir = centered.t().dot(&eigvecs.column(ei)) / lam.sqrt();
            projection.column_mut(c).assign(&dir);
            component_std[c] = (lam / denom).sqrt();
        } else {
            // Rank-deficient data: complete with an arbitrary unit direction
            // orthogonal to the columns picked so far.
            let dir = orthogonal_completion(&projection, c, dim)?;
            projection.column_mut(c).assign(&dir);
            component_std[c] = 0.0;
        }
    }
    Ok(PcaModel {
        mean: mean.mapv(|v| v as f32),
        projection: projection.mapv(|v| v as f32),
        component_std: component_std.mapv(|v| v as f32),
        whiten,
    })
}

/// First canonical basis vector orthogonalized against columns `0..c`.
fn orthogonal_completion(projection: &Array2<f64>, c: usize, dim: usize) -> Result<Array1<f64>> {
    for seed in 0..dim {
        let mut v = Array1::<f64>::zeros(dim);
        v[seed] = 1.0;
        for j in 0..c {
            let col = projection.column(j);
            let d = v.dot(&col);
            v = &v - &(&col * d);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return Ok(v / norm);
        }
    }
    Err(Error::InputShape(
        "cannot complete an orthonormal basis".into(),
    ))
}

/// Centers, projects, optionally whitens, then re-normalizes to unit length
/// so downstream retrieval stays a cosine ranking.
pub fn apply_pca(model: &PcaModel, x: ArrayView1<f32>) -> Result<Array1<f32>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    let centered = &x - &model.mean;
    let mut y = model.projection.t().dot(&centered);
    if model.whiten {
        for (yi, s) in y.iter_mut().zip(model.component_std.iter()) {
            if *s > 1e-12 {
                *yi /= s;
            }
        }
    }
    let norm = y.dot(&y).sqrt().max(1e-12);
    Ok(y / norm)
}

/// Row-wise [`apply_pca`].
pub fn apply_pca_rows(model: &PcaModel, data: ArrayView2<f32>) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((data.nrows(), model.output_dim()));
    for (i, row) in data.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&apply_pca(model, row)?);
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns), unsorted.
pub fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigh needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off < scale * 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < scale * 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[[p, i]], m[[q, i]]);
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (eigvals, v)
}
