//! PCA of frame-level representations: fit, explained-variance curves,
//! linear dimensionality, decorrelating transforms and mean normalization.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::parallel;

/// Added to each eigenvalue before whitening.
pub const WHITEN_EPS: f64 = 1e-8;

/// Jacobi stops once the off-diagonal Frobenius norm falls below this
/// fraction of the trace.
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Frames folded into one partial covariance sum. Fixed so the summation
/// order, and hence the result, does not depend on the thread count.
const SHARD_ROWS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D × D` row-major; rows are principal directions in descending
    /// eigenvalue order.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Zero total variance: ratios were set to `1/D`.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.components[j * d..(j + 1) * d]
    }

    /// Mean subtraction only: identity components, per-feature variances.
    pub fn mean_only(features: &FeatureMatrix) -> Result<Self> {
        let (mean, cov, _) = covariance(std::slice::from_ref(features))?;
        let d = mean.len();
        let mut components = vec![0.0; d * d];
        (0..d).for_each(|i| components[i * d + i] = 1.0);
        let variance: Vec<f64> = (0..d).map(|i| cov[i * d + i]).collect();
        let (ratio, degenerate) = ratios(&variance);
        Ok(Self { mean, components, explained_variance: variance, explained_variance_ratio: ratio, degenerate })
    }

    /// True when the components are the identity (a mean-only model).
    pub fn is_mean_only(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| self.components[i * d + j] == if i == j { 1.0 } else { 0.0 }))
    }
}

fn ratios(variance: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = variance.iter().sum();
    if total > 0.0 {
        (variance.iter().map(|v| v / total).collect(), false)
    } else {
        let d = variance.len().max(1);
        (vec![1.0 / d as f64; variance.len()], true)
    }
}

/// Two-pass sample covariance (denominator `N − 1`) over several matrices of
/// equal width, without concatenating them. Returns `(mean, cov, N)`.
pub fn covariance(parts: &[FeatureMatrix]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let d = parts.first().map_or(0, FeatureMatrix::cols);
    if parts.iter().any(|p| p.cols() != d) {
        return Err(Error::dim("feature matrices differ in width"));
    }
    let n: usize = parts.iter().map(FeatureMatrix::rows).sum();
    if n <= 1 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 frames, got {n}")));
    }
    let rows: Vec<&[f32]> = parts.iter().flat_map(|p| p.row_iter()).collect();
    let shards: Vec<&[&[f32]]> = rows.chunks(SHARD_ROWS).collect();

    let sums = parallel::map(&shards, |shard| {
        let mut s = vec![0.0f64; d];
        for row in shard.iter() {
            s.iter_mut().zip(row.iter()).for_each(|(a, &v)| *a += v as f64);
        }
        s
    });
    let mut mean = vec![0.0f64; d];
    for s in &sums {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let partials = parallel::map(&shards, |shard| {
        let mut c = vec![0.0f64; d * d];
        let mut x = vec![0.0f64; d];
        for row in shard.iter() {
            x.iter_mut().zip(row.iter()).zip(&mean).for_each(|((x, &v), m)| *x = v as f64 - m);
            for i in 0..d {
                let xi = x[i];
                let ci = &mut c[i * d..i * d + d];
                for j in i..d {
                    ci[j] += xi * x[j];
                }
            }
        }
        c
    });
    let mut cov = vec![0.0f64; d * d];
    for p in &partials {
        cov.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((mean, cov, n))
}

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the matching eigenvectors as rows,
/// sorted by descending eigenvalue.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::dim(format!("{n}×{n} matrix given {} values", matrix.len())));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let trace: f64 = (0..n).map(|i| a[i * n + i].abs()).sum();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&a) <= JACOBI_TOL * trace {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                // Columns of v accumulate the rotations.
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        let mut col: Vec<f64> = (0..n).map(|k| v[k * n + i]).collect();
        let lead = col.iter().enumerate().fold(0, |b, (k, x)| if x.abs() > col[b].abs() { k } else { b });
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.extend(col);
    }
    Ok((values, vectors))
}

pub fn pca_fit(features: &FeatureMatrix) -> Result<PcaModel> {
    pca_fit_parts(std::slice::from_ref(features))
}

/// Fit over the concatenation of `parts` without materializing it.
pub fn pca_fit_parts(parts: &[FeatureMatrix]) -> Result<PcaModel> {
    let (mean, cov, _) = covariance(parts)?;
    let d = mean.len();
    let (values, components) = symmetric_eigen(&cov, d)?;
    let explained_variance: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let (explained_variance_ratio, degenerate) = ratios(&explained_variance);
    if degenerate {
        log::warn!("PCA input has zero variance; explained-variance ratios set to 1/{d}");
    }
    Ok(PcaModel { mean, components, explained_variance, explained_variance_ratio, degenerate })
}

/// `(x − mean) · componentsᵀ`, optionally scaled by `1/√(ev + ε)`.
pub fn pca_transform(features: &FeatureMatrix, model: &PcaModel, whiten: bool) -> Result<FeatureMatrix> {
    let d = model.dim();
    if features.cols() != d {
        return Err(Error::dim(format!("features have width {}, PCA model expects {d}", features.cols())));
    }
    let scale: Vec<f64> = model
        .explained_variance
        .iter()
        .map(|&ev| if whiten { 1.0 / (ev + WHITEN_EPS).sqrt() } else { 1.0 })
        .collect();
    let mut out = Vec::with_capacity(features.rows() * d);
    let mut x = vec![0.0f64; d];
    for row in features.row_iter() {
        x.iter_mut().zip(row).zip(&model.mean).for_each(|((x, &v), m)| *x = v as f64 - m);
        for j in 0..d {
            let p: f64 = model.component(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            out.push((p * scale[j]) as f32);
        }
    }
    FeatureMatrix::new(features.rows(), d, out)
}

/// Inverse of [`pca_transform`] with the same `whiten` flag.
pub fn pca_inverse_transform(features: &FeatureMatrix, model: &PcaModel, whitened: bool) -> Result<FeatureMatrix> {
    let d = model.dim();
    if features.cols() != d {
        return Err(Error::dim(format!("features have width {}, PCA model expects {d}", features.cols())));
    }
    let mut out = Vec::with_capacity(features.rows() * d);
    for row in features.row_iter() {
        let mut x = model.mean.clone();
        for (j, &y) in row.iter().enumerate() {
            let y = if whitened { y as f64 * (model.explained_variance[j] + WHITEN_EPS).sqrt() } else { y as f64 };
            x.iter_mut().zip(model.component(j)).for_each(|(x, c)| *x += y * c);
        }
        out.extend(x.iter().map(|&v| v as f32));
    }
    FeatureMatrix::new(features.rows(), d, out)
}

/// Subtracts each column's mean; no rotation or scaling.
pub fn mean_normalize(features: &FeatureMatrix) -> FeatureMatrix {
    let (n, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0f64; d];
    for row in features.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let data = features
        .row_iter()
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, m)| (v as f64 - m) as f32).collect::<Vec<_>>())
        .collect();
    FeatureMatrix::new(n, d, data).expect("mean subtraction keeps values finite")
}

/// Smallest `m` whose cumulative explained-variance ratio reaches `threshold`.
pub fn linear_dimensionality(model: &PcaModel, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1]")));
    }
    // Rounding can leave the full sum a hair under 1.
    let slack = 1e-9;
    let mut cum = 0.0;
    for (i, r) in model.explained_variance_ratio.iter().enumerate() {
        cum += r;
        if cum + slack >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(model.dim())
}

/// `(m, cumulative ratio)` for `m = 1..=D`.
pub fn explained_variance_curve(model: &PcaModel) -> Vec<(usize, f64)> {
    let mut cum = 0.0;
    model
        .explained_variance_ratio
        .iter()
        .enumerate()
        .map(|(i, r)| {
            cum += r;
            (i + 1, cum)
        })
        .collect()
}

/// `m<TAB>cumulative_ratio` lines.
pub fn render_curve(curve: &[(usize, f64)]) -> String {
    curve.iter().map(|(m, r)| format!("{m}\t{r:.6}\n")).collect()
}
