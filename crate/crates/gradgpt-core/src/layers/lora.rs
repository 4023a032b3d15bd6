//! Low-rank adapters: a trainable rank-`r` bypass around a frozen layer.
//!
//! Forward: `out = α·a·d_mat·u_mat`, associated left-to-right so the
//! intermediate is `n×r`. With the standard zero initialization of `u_mat`
//! the adapter starts as an exact zero delta on the frozen path.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Down-projection `d_mat` (f_in×r), up-projection `u_mat` (r×f_out), and
/// the scalar gain `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAParams<T: Scalar = f64> {
    pub d_mat: Matrix<T>,
    pub u_mat: Matrix<T>,
    pub alpha: T,
    pub r: usize,
}

impl<T: Scalar> LoRAParams<T> {
    /// Zero-valued adapter of rank `r` for an `f_in → f_out` layer.
    /// Requires `1 ≤ r ≤ min(f_in, f_out)` and `alpha > 0`.
    pub fn zeros(f_in: usize, f_out: usize, r: usize, alpha: T) -> Self {
        assert!(r >= 1, "adapter rank must be at least 1");
        assert!(
            r <= f_in.min(f_out),
            "adapter rank {r} exceeds min({f_in}, {f_out}) — a full-rank bypass defeats the point"
        );
        assert!(alpha > T::ZERO, "adapter gain must be positive");
        LoRAParams { d_mat: Matrix::zeros(f_in, r), u_mat: Matrix::zeros(r, f_out), alpha, r }
    }

    pub fn f_in(&self) -> usize {
        self.d_mat.rows()
    }

    pub fn f_out(&self) -> usize {
        self.u_mat.cols()
    }
}

/// Adapter gradients, mirroring the two factor matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAGrads<T: Scalar = f64> {
    pub d_mat: Matrix<T>,
    pub u_mat: Matrix<T>,
}

impl<T: Scalar> LoRAGrads<T> {
    pub fn zeros_like(p: &LoRAParams<T>) -> Self {
        LoRAGrads {
            d_mat: Matrix::zeros(p.d_mat.rows(), p.d_mat.cols()),
            u_mat: Matrix::zeros(p.u_mat.rows(), p.u_mat.cols()),
        }
    }
}

/// `α·a·d_mat·u_mat` with the `n×r` intermediate.
pub fn lora_forward<T: Scalar>(a: &Matrix<T>, p: &LoRAParams<T>) -> Matrix<T> {
    assert_eq!(
        a.cols(),
        p.f_in(),
        "adapter input has {} features but expects {}",
        a.cols(),
        p.f_in()
    );
    a.matmul(&p.d_mat).matmul(&p.u_mat).scale(p.alpha)
}

/// Backward pass:
/// `Δ_in = α·Δ·(d·u)ᵗ`, `∂L/∂d = α·aᵗ·Δ·uᵗ`, `∂L/∂u = α·(a·d)ᵗ·Δ`.
pub fn lora_backward<T: Scalar>(
    delta: &Matrix<T>,
    a_in: &Matrix<T>,
    p: &LoRAParams<T>,
) -> (Matrix<T>, LoRAGrads<T>) {
    assert_eq!(
        delta.cols(),
        p.f_out(),
        "adapter backward signal has {} features but adapter produces {}",
        delta.cols(),
        p.f_out()
    );
    let delta_in = delta.matmul(&p.d_mat.matmul(&p.u_mat).transpose()).scale(p.alpha);
    let grad_d = a_in.transpose().matmul(delta).matmul(&p.u_mat.transpose()).scale(p.alpha);
    let grad_u = a_in.matmul(&p.d_mat).transpose().matmul(delta).scale(p.alpha);
    (delta_in, LoRAGrads { d_mat: grad_d, u_mat: grad_u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::test_support::{check_grad, rand_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_adapter(rng: &mut ChaCha8Rng, f_in: usize, f_out: usize, r: usize) -> LoRAParams {
        LoRAParams {
            d_mat: rand_matrix(rng, f_in, r),
            u_mat: rand_matrix(rng, r, f_out),
            alpha: 1.5,
            r,
        }
    }

    #[test]
    fn zero_up_projection_is_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut p = rand_adapter(&mut rng, 4, 3, 2);
        p.u_mat = Matrix::zeros(2, 3);
        let a = rand_matrix(&mut rng, 5, 4);
        assert_eq!(lora_forward(&a, &p), Matrix::zeros(5, 3));
    }

    #[test]
    fn identity_factors_pass_input_scaled() {
        let p = LoRAParams { d_mat: Matrix::identity(3), u_mat: Matrix::identity(3), alpha: 1.0, r: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let a = rand_matrix(&mut rng, 2, 3);
        assert_eq!(lora_forward(&a, &p), a);
    }

    #[test]
    fn doubling_alpha_doubles_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let p = rand_adapter(&mut rng, 4, 3, 2);
        let mut p2 = p.clone();
        p2.alpha = 2.0 * p.alpha;
        let a = rand_matrix(&mut rng, 5, 4);
        let delta = rand_matrix(&mut rng, 5, 3);

        assert!(lora_forward(&a, &p).scale(2.0).max_abs_diff(&lora_forward(&a, &p2)) <= 1e-12);
        let (din, g) = lora_backward(&delta, &a, &p);
        let (din2, g2) = lora_backward(&delta, &a, &p2);
        assert!(din.scale(2.0).max_abs_diff(&din2) <= 1e-12);
        assert!(g.d_mat.scale(2.0).max_abs_diff(&g2.d_mat) <= 1e-12);
        assert!(g.u_mat.scale(2.0).max_abs_diff(&g2.u_mat) <= 1e-12);
    }

    #[test]
    #[should_panic(expected = "rank")]
    fn rejects_excessive_rank() {
        let _ = LoRAParams::<f64>::zeros(4, 3, 4, 1.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let p = rand_adapter(&mut rng, 4, 3, 2);
        let a = rand_matrix(&mut rng, 5, 4);
        let c = rand_matrix(&mut rng, 5, 3);

        let probe = |p: &LoRAParams, a: &Matrix| c.frobenius_dot(&lora_forward(a, p));
        let (din, g) = lora_backward(&c, &a, &p);

        check_grad(
            g.d_mat.data(),
            p.d_mat.data(),
            |idx, v| {
                let mut pm = p.clone();
                pm.d_mat.data_mut()[idx] = v;
                probe(&pm, &a)
            },
            "grad_d",
        );
        check_grad(
            g.u_mat.data(),
            p.u_mat.data(),
            |idx, v| {
                let mut pm = p.clone();
                pm.u_mat.data_mut()[idx] = v;
                probe(&pm, &a)
            },
            "grad_u",
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
}
