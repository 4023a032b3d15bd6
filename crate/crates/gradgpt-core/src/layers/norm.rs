//! Layer normalization with a closed-form backward pass.
//!
//! Forward, per token row: `ā = (a − μ̃)/σ̃`, then `out = ā ∘ w̃ + b̃` with the
//! gain and bias broadcast over rows. `σ` is the ε-augmented deviation
//! `sqrt(mean((a−μ)²) + eps)`; the backward formula below is exact for this
//! definition at any `eps ≥ 0`, so forward and backward stay mutually
//! consistent and finite-difference clean.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Gain `w`, offset `b`, and the variance cushion `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T: Scalar = f64> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    /// Added inside the square root; strictly positive in real models, may
    /// be exactly 0 only in gradient-check fixtures.
    pub eps: T,
}

impl<T: Scalar> LayerNormParams<T> {
    /// Standard initialization: unit gain, zero offset.
    pub fn unit(d: usize, eps: T) -> Self {
        LayerNormParams { w: vec![T::ONE; d], b: vec![T::ZERO; d], eps }
    }

    pub fn d(&self) -> usize {
        self.w.len()
    }
}

/// Gradients of the gain and offset vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads<T: Scalar = f64> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LayerNormGrads<T> {
    pub fn zeros_like(p: &LayerNormParams<T>) -> Self {
        LayerNormGrads { w: vec![T::ZERO; p.d()], b: vec![T::ZERO; p.d()] }
    }
}

/// Everything the backward pass needs: the input, the normalized rows `ā`,
/// and the per-token deviations `σ`.
#[derive(Clone, Debug)]
pub struct NormCache<T: Scalar = f64> {
    pub input: Matrix<T>,
    pub normalized: Matrix<T>,
    pub sigma: Vec<T>,
}

/// Normalize each row to mean 0 / deviation σ, then apply gain and offset.
pub fn layernorm_forward<T: Scalar>(
    a: &Matrix<T>,
    p: &LayerNormParams<T>,
) -> (Matrix<T>, NormCache<T>) {
    let d = a.cols();
    assert!(d >= 2, "layer norm needs at least 2 features, got {d}");
    assert_eq!(p.d(), d, "layer norm has {} features but input has {d}", p.d());
    let inv_d = T::ONE / T::from_f64(d as f64);

    let mut normalized = Matrix::zeros(a.rows(), d);
    let mut out = Matrix::zeros(a.rows(), d);
    let mut sigma = Vec::with_capacity(a.rows());
    for t in 0..a.rows() {
        let row = a.row(t);
        let mut mu = T::ZERO;
        for &x in row {
            mu += x;
        }
        mu *= inv_d;
        let mut var = T::ZERO;
        for &x in row {
            let c = x - mu;
            var += c * c;
        }
        var *= inv_d;
        let s = (var + p.eps).sqrt();
        sigma.push(s);
        let n_row = normalized.row_mut(t);
        let o_row = out.row_mut(t);
        for j in 0..d {
            let nj = (row[j] - mu) / s;
            n_row[j] = nj;
            o_row[j] = nj * p.w[j] + p.b[j];
        }
    }
    (out, NormCache { input: a.clone(), normalized, sigma })
}

/// Backward pass. Per token row `t`, with `g = w ∘ Δ_row`:
///
/// `Δ_in = (d·g − Σg − ā·Σ(g∘ā)) / (d·σ_t)`
///
/// The three terms are the direct path and the couplings through the row
/// mean and the row deviation. Gain gradient is `Σ_tokens ā ∘ Δ`, offset
/// gradient is `Σ_tokens Δ`.
pub fn layernorm_backward<T: Scalar>(
    delta: &Matrix<T>,
    cache: &NormCache<T>,
    p: &LayerNormParams<T>,
) -> (Matrix<T>, LayerNormGrads<T>) {
    let d = p.d();
    assert!(
        delta.rows() == cache.normalized.rows() && delta.cols() == d,
        "layernorm_backward shape mismatch: signal {}x{}, cache {}x{}",
        delta.rows(),
        delta.cols(),
        cache.normalized.rows(),
        d
    );
    let d_t = T::from_f64(d as f64);

    let mut delta_in = Matrix::zeros(delta.rows(), d);
    let mut grad_w = vec![T::ZERO; d];
    for t in 0..delta.rows() {
        let d_row = delta.row(t);
        let a_bar = cache.normalized.row(t);
        let mut sum_g = T::ZERO;
        let mut sum_ga = T::ZERO;
        for j in 0..d {
            let g = p.w[j] * d_row[j];
            sum_g += g;
            sum_ga += g * a_bar[j];
            grad_w[j] += a_bar[j] * d_row[j];
        }
        let scale = T::ONE / (d_t * cache.sigma[t]);
        let out_row = delta_in.row_mut(t);
        for j in 0..d {
            let g = p.w[j] * d_row[j];
            out_row[j] = scale * (d_t * g - sum_g - a_bar[j] * sum_ga);
        }
    }
    let grad_b = delta.sum_over_tokens();
    (delta_in, LayerNormGrads { w: grad_w, b: grad_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::test_support::{check_grad, rand_matrix, rand_vec};
    use crate::tensor::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_params(rng: &mut ChaCha8Rng, d: usize, eps: f64) -> LayerNormParams {
        LayerNormParams { w: rand_vec(rng, d), b: rand_vec(rng, d), eps }
    }

    #[test]
    fn constant_row_normalizes_to_offset() {
        let p = LayerNormParams { w: vec![2.0, 2.0, 2.0], b: vec![1.0, -1.0, 0.0], eps: 1e-5 };
        let a = Matrix::from_rows(&[&[7.0, 7.0, 7.0]]);
        let (out, cache) = layernorm_forward(&a, &p);
        assert_eq!(cache.normalized.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(out.row(0), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn already_normalized_row_is_fixed_point_at_zero_eps() {
        let p = LayerNormParams::unit(2, 0.0);
        let a = Matrix::from_rows(&[&[-1.0, 1.0]]);
        let (out, _) = layernorm_forward(&a, &p);
        assert!((out[(0, 0)] + 1.0).abs() < 1e-14);
        assert!((out[(0, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = rand_matrix(&mut rng, 5, 8);
        let (_, cache) = layernorm_forward(&a, &LayerNormParams::unit(8, 0.0));
        for t in 0..5 {
            let row = cache.normalized.row(t);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| x * x).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10, "row {t} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-8, "row {t} variance {var}");
        }
    }

    #[test]
    #[should_panic(expected = "at least 2 features")]
    fn rejects_single_feature() {
        let p = LayerNormParams::<f64>::unit(1, 1e-5);
        let _ = layernorm_forward(&Matrix::zeros(2, 1), &p);
    }

    #[test]
    fn backward_zero_signal_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = rand_params(&mut rng, 4, 1e-5);
        let a = rand_matrix(&mut rng, 3, 4);
        let (_, cache) = layernorm_forward(&a, &p);
        let (din, g) = layernorm_backward(&Matrix::zeros(3, 4), &cache, &p);
        assert_eq!(din, Matrix::zeros(3, 4));
        assert_eq!(g.w, vec![0.0; 4]);
        assert_eq!(g.b, vec![0.0; 4]);
    }

    #[test]
    fn downstream_rows_are_orthogonal_to_ones_and_normalized_row() {
        // The normalization Jacobian projects out the mean direction for any
        // eps; the ā direction is only projected out when eps = 0 (the row
        // then has exact unit second moment).
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = rand_params(&mut rng, 6, 0.0);
        let a = rand_matrix(&mut rng, 4, 6);
        let delta = rand_matrix(&mut rng, 4, 6);
        let (_, cache) = layernorm_forward(&a, &p);
        let (din, _) = layernorm_backward(&delta, &cache, &p);
        for t in 0..4 {
            let row = din.row(t);
            let against_ones: f64 = row.iter().sum();
            let against_abar = dot(row, cache.normalized.row(t));
            assert!(against_ones.abs() <= 1e-10, "row {t} vs ones: {against_ones}");
            assert!(against_abar.abs() <= 1e-10, "row {t} vs normalized row: {against_abar}");
        }
    }

    #[test]
    fn mean_direction_is_projected_out_even_with_positive_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = rand_params(&mut rng, 5, 1e-3);
        let a = rand_matrix(&mut rng, 3, 5);
        let delta = rand_matrix(&mut rng, 3, 5);
        let (_, cache) = layernorm_forward(&a, &p);
        let (din, _) = layernorm_backward(&delta, &cache, &p);
        for t in 0..3 {
            let s: f64 = din.row(t).iter().sum();
            assert!(s.abs() <= 1e-10);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = rand_params(&mut rng, 5, 1e-5); // eps included in σ
        let a = rand_matrix(&mut rng, 4, 5);
        let c = rand_matrix(&mut rng, 4, 5);

        let probe = |p: &LayerNormParams, a: &Matrix| {
            let (out, _) = layernorm_forward(a, p);
            c.frobenius_dot(&out)
        };
        let (_, cache) = layernorm_forward(&a, &p);
        let (din, g) = layernorm_backward(&c, &cache, &p);

        check_grad(
            &g.w,
            &p.w,
            |idx, v| {
                let mut pm = p.clone();
                pm.w[idx] = v;
                probe(&pm, &a)
            },
            "grad_w",
        );
        check_grad(
            &g.b,
            &p.b,
            |idx, v| {
                let mut pm = p.clone();
                pm.b[idx] = v;
                probe(&pm, &a)
            },
            "grad_b",
        );
        check_grad(
            din.data(),
            a.data(),
            |idx, v| {
                let mut am = a.clone();
                am.data_mut()[idx] = v;
                probe(&p, &am)
            },
            "delta_in",
        );
    }

    /// Reference batch-norm normalization (per COLUMN over rows), used to
    /// check the duality: normalizing rows of A equals transposing, applying
    /// the per-column normalization, and transposing back.
    fn batchnorm_normalize(a: &Matrix, eps: f64) -> Matrix {
        let (n, f) = (a.rows(), a.cols());
        let mut out = Matrix::zeros(n, f);
        for j in 0..f {
            let col: Vec<f64> = (0..n).map(|i| a[(i, j)]).collect();
            let mu: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let s = (var + eps).sqrt();
            for i in 0..n {
                out[(i, j)] = (a[(i, j)] - mu) / s;
            }
        }
        out
    }

    #[test]
    fn row_normalization_is_transposed_column_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let a = rand_matrix(&mut rng, 3, 7); // deliberately non-square
        let (_, cache) = layernorm_forward(&a, &LayerNormParams::unit(7, 0.0));
        let bn = batchnorm_normalize(&a.transpose(), 0.0).transpose();
        assert!(cache.normalized.max_abs_diff(&bn) <= 1e-10);
    }
}
