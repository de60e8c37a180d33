//! Principal-component fitting for the fixed baseline projection.
//!
//! Components come from a cyclic Jacobi eigendecomposition of the sample
//! covariance (no whitening: transformed coordinates keep their variance).
//! Everything here is plain f64 arithmetic in a fixed order, so fits are
//! reproducible bit-for-bit across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{QkiError, Result};
use crate::numeric::Matrix;

/// Eigenvalues below `max_eigenvalue * RANK_TOLERANCE` count as rank-deficient.
const RANK_TOLERANCE: f64 = 1e-9;
const MAX_SWEEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One component per row, unit length, mutually orthogonal.
    pub components: Matrix,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.components.cols
    }

    pub fn out_dim(&self) -> usize {
        self.components.rows
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues (unsorted) and eigenvectors as matrix columns.
fn jacobi_eigh(sym: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = sym.rows;
    if n != sym.cols {
        return Err(QkiError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            sym.rows, sym.cols
        )));
    }
    let mut a = sym.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
            }
        }
        if off == 0.0 {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Skip rotations that can no longer change the diagonal.
                if apq.abs() <= f64::EPSILON * (app.abs() + aqq.abs()) * 0.5 {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = arp - s * (arq + tau * arp);
                    a[p * n + r] = a[r * n + p];
                    a[r * n + q] = arq + s * (arp - tau * arq);
                    a[q * n + r] = a[r * n + q];
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = vrp - s * (vrq + tau * vrp);
                    v[r * n + q] = vrq + s * (vrp - tau * vrq);
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    Ok((
        eigenvalues,
        Matrix {
            rows: n,
            cols: n,
            data: v,
        },
    ))
}

/// Fit `d_out` principal components of `data` (rows are samples).
///
/// Components are sorted by descending explained variance; each is sign-fixed
/// so its largest-magnitude entry is positive. Asking for more components
/// than the numerical rank of the covariance is an error.
pub fn pca_fit(data: &Matrix, d_out: usize) -> Result<PcaModel> {
    let n = data.rows;
    let d = data.cols;
    if d_out == 0 || d_out > d {
        return Err(QkiError::Config(format!(
            "pca output dimension {d_out} must be in 1..={d}"
        )));
    }
    if n < 2 {
        return Err(QkiError::Data(format!(
            "pca fit needs at least 2 samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        let row = data.row(i);
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Covariance with the unbiased 1/(n-1) denominator.
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let row = data.row(i);
        for a in 0..d {
            let ca = row[a] - mean[a];
            for b in a..d {
                cov.data[a * d + b] += ca * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let val = cov.data[a * d + b] / denom;
            cov.data[a * d + b] = val;
            cov.data[b * d + a] = val;
        }
    }
    let (eigenvalues, vectors) = jacobi_eigh(&cov)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j]
            .partial_cmp(&eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let max_eig = eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eigenvalues[i] > max_eig * RANK_TOLERANCE && eigenvalues[i] > 0.0)
        .count();
    if d_out > rank {
        return Err(QkiError::Data(format!(
            "pca requested {d_out} components but data has numerical rank {rank}"
        )));
    }
    let mut components = Matrix::zeros(d_out, d);
    for (k, &col) in order.iter().take(d_out).enumerate() {
        let out = components.row_mut(k);
        for j in 0..d {
            out[j] = vectors.data[j * d + col];
        }
        // Deterministic sign: the entry with the largest magnitude is positive.
        let mut arg = 0;
        for j in 1..d {
            if out[j].abs() > out[arg].abs() {
                arg = j;
            }
        }
        if out[arg] < 0.0 {
            for x in out.iter_mut() {
                *x = -*x;
            }
        }
    }
    Ok(PcaModel {
        mean,
        components,
    })
}

/// Project one vector onto the fitted components (centered, no whitening).
pub fn pca_transform(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.in_dim() {
        return Err(QkiError::Shape(format!(
            "pca transform expects dimension {}, got {}",
            model.in_dim(),
            x.len()
        )));
    }
    let d = model.in_dim();
    let mut out = vec![0.0; model.out_dim()];
    for (k, o) in out.iter_mut().enumerate() {
        let comp = model.components.row(k);
        let mut acc = 0.0;
        for j in 0..d {
            acc += comp[j] * (x[j] - model.mean[j]);
        }
        *o = acc;
    }
    Ok(out)
}

/// Map projected coordinates back into the input space.
pub fn pca_inverse(model: &PcaModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.out_dim() {
        return Err(QkiError::Shape(format!(
            "pca inverse expects dimension {}, got {}",
            model.out_dim(),
            y.len()
        )));
    }
    let d = model.in_dim();
    let mut out = model.mean.clone();
    for (k, &yk) in y.iter().enumerate() {
        let comp = model.components.row(k);
        for j in 0..d {
            out[j] += yk * comp[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_data(seed: u64, n: usize, d: usize, scales: &[f64]) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                m.row_mut(i)[j] = scales[j] * rng.gen_range(-1.0..1.0) + 0.3 * j as f64;
            }
        }
        m
    }

    #[test]
    fn jacobi_matches_hand_eigensystem() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = jacobi_eigh(&m).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((sorted[0] - 1.0).abs() < 1e-12);
        assert!((sorted[1] - 3.0).abs() < 1e-12);
        // Eigenvector columns satisfy M v = lambda v.
        for c in 0..2 {
            let v0 = vecs.data[c];
            let v1 = vecs.data[2 + c];
            let mv0 = 2.0 * v0 + v1;
            let mv1 = v0 + 2.0 * v1;
            assert!((mv0 - vals[c] * v0).abs() < 1e-12);
            assert!((mv1 - vals[c] * v1).abs() < 1e-12);
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let data = sample_data(11, 300, 8, &[3.0, 2.5, 2.0, 1.5, 1.0, 0.7, 0.4, 0.2]);
        let model = pca_fit(&data, 8).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = model
                    .components
                    .row(a)
                    .iter()
                    .zip(model.components.row(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < 1e-8,
                    "component {a}.{b}: dot {dot}"
                );
            }
        }
    }

    #[test]
    fn transformed_variance_matches_rayleigh_quotient() {
        let data = sample_data(17, 400, 6, &[2.0, 1.6, 1.2, 0.9, 0.5, 0.3]);
        let model = pca_fit(&data, 6).unwrap();
        let n = data.rows;
        let d = data.cols;
        // Independent covariance computed directly from the samples.
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += data.row(i)[j] / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] +=
                        (data.row(i)[a] - mean[a]) * (data.row(i)[b] - mean[b]) / (n - 1) as f64;
                }
            }
        }
        // Variance of projected coordinate k should equal c_k' C c_k
        // (no whitening), and scores should be uncorrelated across k.
        let projected: Vec<Vec<f64>> = (0..n)
            .map(|i| pca_transform(&model, data.row(i)).unwrap())
            .collect();
        let mut prev = f64::INFINITY;
        for k in 0..d {
            let comp = model.components.row(k);
            let mut rayleigh = 0.0;
            for a in 0..d {
                for b in 0..d {
                    rayleigh += comp[a] * cov[a * d + b] * comp[b];
                }
            }
            let mean_k: f64 = projected.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            let var_k: f64 = projected
                .iter()
                .map(|p| (p[k] - mean_k).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            assert!(
                (var_k - rayleigh).abs() < 1e-8 * rayleigh.max(1.0),
                "component {k}: variance {var_k} vs rayleigh {rayleigh}"
            );
            assert!(rayleigh <= prev + 1e-10, "eigenvalues must be descending");
            prev = rayleigh;
            for k2 in (k + 1)..d {
                let mean_k2: f64 = projected.iter().map(|p| p[k2]).sum::<f64>() / n as f64;
                let covar: f64 = projected
                    .iter()
                    .map(|p| (p[k] - mean_k) * (p[k2] - mean_k2))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!(covar.abs() < 1e-8, "scores {k},{k2} correlated: {covar}");
            }
        }
    }

    #[test]
    fn line_data_recovers_direction_and_rejects_extra_rank() {
        // Points on the line t * (3, 4) / 5 plus an offset.
        let mut data = Matrix::zeros(50, 2);
        for i in 0..50 {
            let t = i as f64 * 0.1 - 2.0;
            data.row_mut(i)[0] = 1.0 + t * 0.6;
            data.row_mut(i)[1] = -2.0 + t * 0.8;
        }
        let model = pca_fit(&data, 1).unwrap();
        let c = model.components.row(0);
        assert!((c[0] - 0.6).abs() < 1e-8 && (c[1] - 0.8).abs() < 1e-8);
        let err = pca_fit(&data, 2).unwrap_err();
        assert!(err.to_string().contains("rank"), "got: {err}");
    }

    #[test]
    fn inverse_reconstructs_in_subspace_data() {
        let data = sample_data(23, 200, 5, &[2.0, 1.5, 1.0, 0.6, 0.3]);
        let model = pca_fit(&data, 5).unwrap();
        for i in (0..200).step_by(17) {
            let x = data.row(i);
            let y = pca_transform(&model, x).unwrap();
            let back = pca_inverse(&model, &y).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = sample_data(31, 150, 4, &[1.0, 0.8, 0.5, 0.2]);
        let m1 = pca_fit(&data, 4).unwrap();
        let m2 = pca_fit(&data, 4).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let data = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(pca_fit(&data, 1).is_err()); // one sample
        let data = sample_data(3, 20, 3, &[1.0, 1.0, 1.0]);
        assert!(pca_fit(&data, 0).is_err());
        assert!(pca_fit(&data, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sign_convention_largest_entry_positive(seed in 0u64..1000) {
            let data = sample_data(seed, 60, 4, &[1.5, 1.0, 0.7, 0.4]);
            let model = pca_fit(&data, 4).unwrap();
            for k in 0..4 {
                let row = model.components.row(k);
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let max_abs = row.iter().map(|x| x.abs()).fold(0.0, f64::max);
                prop_assert!((max - max_abs).abs() < 1e-15,
                    "component {}: largest-magnitude entry must be positive", k);
            }
        }
    }
}
