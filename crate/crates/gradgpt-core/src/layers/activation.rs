//! Elementwise nonlinearities and their exact derivatives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// √(2/π), the constant of the tanh-based GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Supported nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation: `g(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

impl Activation {
    /// Parse a user-supplied name; unknown names are rejected.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Invalid(format!(
                "unknown activation '{other}' (expected 'relu' or 'gelu')"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::ZERO {
                    x
                } else {
                    T::ZERO
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let c = T::from_f64(GELU_C);
                let cubic = T::from_f64(GELU_CUBIC);
                let t = (c * (x + cubic * x * x * x)).tanh();
                half * x * (T::ONE + t)
            }
        }
    }

    /// Exact derivative of the implemented forward (for ReLU the value at 0
    /// is taken as 0).
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let c = T::from_f64(GELU_C);
                let cubic = T::from_f64(GELU_CUBIC);
                let three = T::from_f64(3.0);
                let t = (c * (x + cubic * x * x * x)).tanh();
                // 0.5(1+t) + 0.5x(1−t²)·√(2/π)(1 + 3·0.044715·x²)
                half * (T::ONE + t)
                    + half * x * (T::ONE - t * t) * c * (T::ONE + three * cubic * x * x)
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Apply `g` elementwise; the returned cache is the pre-activation input,
/// which the backward pass feeds to `g′`.
pub fn activation_forward<T: Scalar>(a: &Matrix<T>, kind: Activation) -> (Matrix<T>, Matrix<T>) {
    let mut out = a.clone();
    for x in out.data_mut() {
        *x = kind.apply(*x);
    }
    (out, a.clone())
}

/// `Δ ∘ g′(cached input)`.
pub fn activation_backward<T: Scalar>(
    delta: &Matrix<T>,
    cache: &Matrix<T>,
    kind: Activation,
) -> Matrix<T> {
    assert!(
        delta.rows() == cache.rows() && delta.cols() == cache.cols(),
        "activation_backward shape mismatch: signal {}x{}, cache {}x{}",
        delta.rows(),
        delta.cols(),
        cache.rows(),
        cache.cols()
    );
    let mut out = delta.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(cache.data()) {
        *o *= kind.derivative(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::test_support::rand_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_forward_examples() {
        let a = Matrix::from_rows(&[&[-1.0, 0.0, 2.0]]);
        let (out, cache) = activation_forward(&a, Activation::Relu);
        assert_eq!(out.row(0), &[0.0, 0.0, 2.0]);
        assert_eq!(cache, a);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        // g is odd-symmetric around the sign flip of its linear factor:
        // large positive x → x, large negative x → 0.
        assert!((Activation::Gelu.apply(10.0) - 10.0).abs() < 1e-9);
        assert!(Activation::Gelu.apply(-10.0).abs() < 1e-9);
    }

    #[test]
    fn relu_backward_gates_by_sign() {
        let cache = Matrix::from_rows(&[&[-3.0, 0.5]]);
        let delta = Matrix::from_rows(&[&[1.0, 1.0]]);
        let out = activation_backward(&delta, &cache, Activation::Relu);
        assert_eq!(out.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn gelu_derivative_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let h = 1e-5;
            let numeric = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            let analytic = Activation::Gelu.derivative(x);
            assert!(
                (analytic - numeric).abs() < 1e-8,
                "x={x}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn backward_is_hadamard_with_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cache = rand_matrix(&mut rng, 3, 4);
        let delta = rand_matrix(&mut rng, 3, 4);
        let out = activation_backward(&delta, &cache, Activation::Gelu);
        for i in 0..3 {
            for j in 0..4 {
                let want = delta[(i, j)] * Activation::Gelu.derivative(cache[(i, j)]);
                assert_eq!(out[(i, j)], want);
            }
        }
    }

    #[test]
    fn parse_accepts_known_rejects_unknown() {
        assert_eq!(Activation::parse("relu").unwrap(), Activation::Relu);
        assert_eq!(Activation::parse("gelu").unwrap(), Activation::Gelu);
        assert!(Activation::parse("swish").is_err());
    }
}
