//! Classical patch-based ICA: patch extraction, PCA whitening and symmetric
//! FastICA with the log-cosh (tanh) contrast.
//!
//! Data matrices are sample-major: one row per observation (patch), one
//! column per feature (voxel within the patch).

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Patches of a `(d, h, w)` volume, flattened one per row in scan order.
#[derive(Clone, Debug)]
pub struct PatchMatrix {
    pub rows: DMatrix<f64>,
    pub patch: [usize; 3],
    pub stride: usize,
    pub source: [usize; 3],
}

impl PatchMatrix {
    pub fn extract<T: Real>(image: &Tensor<T>, patch: [usize; 3], stride: usize) -> Result<Self> {
        let source: [usize; 3] = match *image.shape() {
            [d, h, w] => [d, h, w],
            [1, 1, d, h, w] => [d, h, w],
            ref s => return Err(Error::shape(format!("patch extraction needs a (d,h,w) volume, got {s:?}"))),
        };
        if stride == 0 {
            return Err(Error::shape("patch stride must be at least 1"));
        }
        if patch.contains(&0) || (0..3).any(|a| patch[a] > source[a]) {
            return Err(Error::shape(format!("patch {patch:?} does not fit volume {source:?}")));
        }
        let counts: [usize; 3] = std::array::from_fn(|a| (source[a] - patch[a]) / stride + 1);
        let num = counts.iter().product();
        let len: usize = patch.iter().product();
        let data = image.data();
        let [_, h, w] = source;
        let mut rows = DMatrix::zeros(num, len);
        let mut r = 0;
        for z in 0..counts[0] {
            for y in 0..counts[1] {
                for x in 0..counts[2] {
                    let mut c = 0;
                    for dz in 0..patch[0] {
                        for dy in 0..patch[1] {
                            for dx in 0..patch[2] {
                                let idx = ((z * stride + dz) * h + y * stride + dy) * w + x * stride + dx;
                                rows[(r, c)] = data[idx].to_f64_lossy();
                                c += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        Ok(PatchMatrix {
            rows,
            patch,
            stride,
            source,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn num_patches(&self) -> usize {
        self.rows.nrows()
    }

    /// Same geometry with different row contents.
    pub fn with_rows(&self, rows: DMatrix<f64>) -> Result<Self> {
        if rows.shape() != self.rows.shape() {
            return Err(Error::shape(format!(
                "patch rows {:?} do not match geometry {:?}",
                rows.shape(),
                self.rows.shape()
            )));
        }
        Ok(PatchMatrix { rows, ..self.clone() })
    }

    /// Reassemble a volume, averaging overlapping patches. Voxels not covered
    /// by any patch are zero.
    pub fn assemble(&self) -> Tensor<f64> {
        let [d, h, w] = self.source;
        let counts: [usize; 3] = std::array::from_fn(|a| (self.source[a] - self.patch[a]) / self.stride + 1);
        let mut sum = vec![0.0; d * h * w];
        let mut hits = vec![0u32; d * h * w];
        let mut r = 0;
        for z in 0..counts[0] {
            for y in 0..counts[1] {
                for x in 0..counts[2] {
                    let mut c = 0;
                    for dz in 0..self.patch[0] {
                        for dy in 0..self.patch[1] {
                            for dx in 0..self.patch[2] {
                                let idx = ((z * self.stride + dz) * h + y * self.stride + dy) * w
                                    + x * self.stride
                                    + dx;
                                sum[idx] += self.rows[(r, c)];
                                hits[idx] += 1;
                                c += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        let data = sum
            .iter()
            .zip(&hits)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        Tensor::new(vec![d, h, w], data).expect("extents match")
    }
}

/// PCA whitening transform fitted to a data matrix.
#[derive(Clone, Debug)]
pub struct Whitening {
    /// Column means removed before whitening.
    pub mean: DVector<f64>,
    /// `rank x features`; whitened = (data - mean) * K^T.
    pub k: DMatrix<f64>,
    /// Variances of the retained principal directions, descending.
    pub variances: Vec<f64>,
}

impl Whitening {
    pub fn rank(&self) -> usize {
        self.k.nrows()
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(center(data, &self.mean)? * self.k.transpose())
    }
}

fn column_means(data: &DMatrix<f64>) -> DVector<f64> {
    let n = data.nrows() as f64;
    DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.sum() / n))
}

fn center(data: &DMatrix<f64>, mean: &DVector<f64>) -> Result<DMatrix<f64>> {
    if data.ncols() != mean.len() {
        return Err(Error::shape(format!(
            "data has {} columns, model expects {}",
            data.ncols(),
            mean.len()
        )));
    }
    let mut out = data.clone();
    for (mut col, &m) in out.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-m);
    }
    Ok(out)
}

/// Relative eigenvalue floor below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// Centre the columns and whiten with the eigen-decomposition of the
/// covariance. Zero-variance directions are dropped; `max_components`
/// further truncates to the leading principal directions.
pub fn whiten(data: &DMatrix<f64>, max_components: Option<usize>) -> Result<(Whitening, DMatrix<f64>)> {
    let n = data.nrows();
    if n < 2 || data.ncols() == 0 {
        return Err(Error::shape(format!("cannot whiten a {:?} matrix", data.shape())));
    }
    let mean = column_means(data);
    let centered = center(data, &mean)?;
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > top * RANK_TOL && eig.eigenvalues[i] > 0.0)
        .collect();
    if let Some(m) = max_components {
        keep.truncate(m);
    }
    if keep.is_empty() {
        return Err(Error::Numerics("data has no variance to whiten".into()));
    }
    let mut k = DMatrix::zeros(keep.len(), data.ncols());
    for (r, &i) in keep.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].sqrt();
        for c in 0..data.ncols() {
            k[(r, c)] = eig.eigenvectors[(c, i)] * scale;
        }
    }
    let white = &centered * k.transpose();
    let variances = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok((Whitening { mean, k, variances }, white))
}

#[derive(Clone, Copy, Debug)]
pub struct FastIcaOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FastIcaOptions {
    fn default() -> Self {
        FastIcaOptions {
            tol: 1e-5,
            max_iter: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FastIcaResult {
    /// `m x rank`, orthonormal rows.
    pub w: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `(W W^T)^{-1/2} W`.
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(w * w.transpose());
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerics("unmixing rows became linearly dependent".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w)
}

/// Symmetric FastICA fixed-point iteration on whitened data with
/// `g(u) = tanh(u)`.
pub fn fastica(white: &DMatrix<f64>, m: usize, opts: &FastIcaOptions) -> Result<FastIcaResult> {
    let (n, rank) = white.shape();
    if m == 0 || m > rank {
        return Err(Error::shape(format!("cannot extract {m} components from rank {rank}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let init = DMatrix::from_fn(m, rank, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let inv_n = 1.0 / n as f64;

    for it in 1..=opts.max_iter {
        let proj = white * w.transpose(); // n x m
        let g = proj.map(f64::tanh);
        let g_prime_mean: Vec<f64> = g
            .column_iter()
            .map(|c| c.iter().map(|v| 1.0 - v * v).sum::<f64>() * inv_n)
            .collect();
        let mut next = g.transpose() * white * inv_n; // m x rank
        for (i, &gp) in g_prime_mean.iter().enumerate() {
            let row = w.row(i) * gp;
            let mut target = next.row_mut(i);
            target -= row;
        }
        let next = symmetric_decorrelation(&next)?;
        let agreement = (0..m)
            .map(|i| next.row(i).dot(&w.row(i)).abs())
            .fold(f64::INFINITY, f64::min);
        w = next;
        if agreement > 1.0 - opts.tol {
            return Ok(FastIcaResult {
                w,
                converged: true,
                iterations: it,
            });
        }
    }
    warn!("FastICA did not converge in {} iterations", opts.max_iter);
    Ok(FastIcaResult {
        w,
        converged: false,
        iterations: opts.max_iter,
    })
}

/// Fitted ICA model: `components = (data - mean) * unmixing^T`,
/// `data ≈ components * mixing^T + mean`.
#[derive(Clone, Debug)]
pub struct IcaModel {
    pub whitening: Whitening,
    /// `m x rank` rotation in whitened space.
    pub w: DMatrix<f64>,
    /// Composite `W K`, `m x features`.
    pub unmixing: DMatrix<f64>,
    /// Pseudo-inverse of the composite unmixing, `features x m`.
    pub mixing: DMatrix<f64>,
    pub m: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaModel {
    /// Whiten to at most `m` principal directions and run FastICA.
    pub fn fit(data: &DMatrix<f64>, m: usize, opts: &FastIcaOptions) -> Result<Self> {
        let (whitening, white) = whiten(data, Some(m))?;
        let m = m.min(whitening.rank());
        let res = fastica(&white, m, opts)?;
        let unmixing = &res.w * &whitening.k;
        let mixing = unmixing
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numerics(e.to_string()))?;
        Ok(IcaModel {
            whitening,
            w: res.w,
            unmixing,
            mixing,
            m,
            converged: res.converged,
            iterations: res.iterations,
        })
    }

    /// Component realizations, one row per sample.
    pub fn unmix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(center(data, &self.whitening.mean)? * self.unmixing.transpose())
    }

    pub fn reconstruct(&self, components: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if components.ncols() != self.m {
            return Err(Error::shape(format!(
                "expected {} components per row, got {}",
                self.m,
                components.ncols()
            )));
        }
        let mut out = components * self.mixing.transpose();
        for (mut col, &m) in out.column_iter_mut().zip(self.whitening.mean.iter()) {
            col.add_scalar_mut(m);
        }
        Ok(out)
    }

    /// Basis patches: the columns of the mixing matrix.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.mixing
    }
}

/// `||a - b||_F / ||a||_F`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(f64::MIN_POSITIVE)
}

/// `avg(-alpha * log cosh(x / alpha))`.
pub fn negentropy_term(x: &[f64], alpha: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let s: f64 = x.iter().map(|&v| -alpha * (v / alpha).cosh().ln()).sum();
    s / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_of_4x4_with_stride_2() {
        let img = Tensor::<f64>::from_fn(vec![1, 4, 4], |i| i as f64);
        let p = PatchMatrix::extract(&img, [1, 2, 2], 2).unwrap();
        assert_eq!(p.num_patches(), 4);
        let expect = [[0., 1., 4., 5.], [2., 3., 6., 7.], [8., 9., 12., 13.], [10., 11., 14., 15.]];
        for (r, row) in expect.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(p.rows[(r, c)], v);
            }
        }
    }

    #[test]
    fn whole_image_patch_is_one_row() {
        let img = Tensor::<f32>::from_fn(vec![2, 3, 3], |i| i as f32);
        let p = PatchMatrix::extract(&img, [2, 3, 3], 1).unwrap();
        assert_eq!(p.num_patches(), 1);
        let row: Vec<f64> = p.rows.row(0).iter().copied().collect();
        assert_eq!(row, (0..18).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn overlapping_patches_enumerate_by_hand() {
        let img = Tensor::<f64>::from_fn(vec![1, 3, 3], |i| i as f64);
        let p = PatchMatrix::extract(&img, [1, 2, 2], 1).unwrap();
        let expect = [[0., 1., 3., 4.], [1., 2., 4., 5.], [3., 4., 6., 7.], [4., 5., 7., 8.]];
        assert_eq!(p.num_patches(), 4);
        for (r, row) in expect.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(p.rows[(r, c)], v);
            }
        }
    }

    #[test]
    fn oversized_patch_is_shape_error() {
        let img = Tensor::<f64>::zeros(vec![1, 3, 3]);
        assert!(PatchMatrix::extract(&img, [1, 4, 2], 1).is_err());
    }

    #[test]
    fn assemble_inverts_tiling() {
        let flat = Tensor::<f64>::from_fn(vec![1, 4, 4], |i| (i as f64).sin());
        let p = PatchMatrix::extract(&flat, [1, 2, 2], 2).unwrap();
        assert_eq!(p.assemble(), flat);
        let img = Tensor::<f64>::from_fn(vec![2, 4, 4], |i| (i as f64).cos());
        let q = PatchMatrix::extract(&img, [2, 3, 3], 1).unwrap();
        let back = q.assemble();
        let diff = crate::tensor::max_abs_diff(&back, &img).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn constant_column_is_dropped() {
        let data = DMatrix::from_fn(50, 3, |r, c| if c == 1 { 7.0 } else { ((r * (c + 3)) as f64).sin() });
        let (wh, white) = whiten(&data, None).unwrap();
        assert_eq!(wh.rank(), 2);
        assert_eq!(white.ncols(), 2);
    }

    #[test]
    fn negentropy_values() {
        assert_eq!(negentropy_term(&[0.0, 0.0], 0.75), 0.0);
        let v = negentropy_term(&[0.75], 0.75);
        assert!((v - (-0.75 * 1f64.cosh().ln())).abs() < 1e-15);
        assert!((v + 0.3255).abs() < 5e-4);
        let a = negentropy_term(&[0.1, -0.4, 2.0], 0.75);
        let b = negentropy_term(&[2.0, 0.1, -0.4], 0.75);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn single_component_is_unit_vector() {
        let data = DMatrix::from_fn(400, 1, |r, _| ((r as f64) * 0.37).sin());
        let (_, white) = whiten(&data, None).unwrap();
        let res = fastica(&white, 1, &FastIcaOptions::default()).unwrap();
        assert!((res.w[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }
}
