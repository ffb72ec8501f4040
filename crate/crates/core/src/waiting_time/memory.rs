use num_complex::Complex;

use crate::scalar::{Real, C};
use crate::volterra::{SampledFunction, TimeGrid};

/// One term `Re[c · tᵖ · e^{s t}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpPolyTerm<T: Real> {
    pub coeff: C<T>,
    pub power: u32,
    pub rate: C<T>,
}

/// Real function of the form `Re Σ c_i t^{p_i} e^{s_i t}`.
///
/// Every closed-form memory function in the crate is of this type, and so
/// are their Laplace transforms: `Re Σ c_i p_i! / (u - s_i)^{p_i + 1}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpPoly<T: Real> {
    terms: Vec<ExpPolyTerm<T>>,
}

impl<T: Real> ExpPoly<T> {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    /// `amplitude · e^{-rate t}`.
    pub fn exponential(amplitude: T, rate: T) -> Self {
        Self::zero().with_term(Complex::new(amplitude, T::zero()), 0, Complex::new(-rate, T::zero()))
    }

    pub fn with_term(mut self, coeff: C<T>, power: u32, rate: C<T>) -> Self {
        if coeff != Complex::new(T::zero(), T::zero()) {
            self.terms.push(ExpPolyTerm { coeff, power, rate });
        }
        self
    }

    pub fn terms(&self) -> &[ExpPolyTerm<T>] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, t: T) -> T {
        self.terms
            .iter()
            .map(|term| {
                let tp = t.powi(term.power as i32);
                (term.coeff * (term.rate * t).exp()).re * tp
            })
            .sum()
    }

    /// Laplace transform at real `u` (to the right of every rate).
    pub fn laplace(&self, u: T) -> T {
        self.terms
            .iter()
            .map(|term| {
                let fact: T = (1..=term.power).map(T::from_u32).map(Option::unwrap).product();
                let denom = (Complex::new(u, T::zero()) - term.rate).powu(term.power + 1);
                (term.coeff * fact / denom).re
            })
            .sum()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| ExpPolyTerm {
                    coeff: t.coeff * s,
                    ..*t
                })
                .collect(),
        }
    }
}

/// Memory function `k(t) = w · 2δ(t) + regular(t)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryFunction<T: Real> {
    pub delta_weight: T,
    pub regular: ExpPoly<T>,
}

impl<T: Real> MemoryFunction<T> {
    pub fn zero() -> Self {
        Self {
            delta_weight: T::zero(),
            regular: ExpPoly::zero(),
        }
    }

    /// Pure point mass `w · 2δ(t)` (memoryless).
    pub fn markov(weight: T) -> Self {
        Self {
            delta_weight: weight,
            regular: ExpPoly::zero(),
        }
    }

    /// `amplitude · e^{-rate t}` with no point mass.
    pub fn exponential(amplitude: T, rate: T) -> Self {
        Self {
            delta_weight: T::zero(),
            regular: ExpPoly::exponential(amplitude, rate),
        }
    }

    pub fn new(delta_weight: T, regular: ExpPoly<T>) -> Self {
        Self {
            delta_weight,
            regular,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_weight == T::zero() && self.regular.is_zero()
    }

    /// True when the function is a pure point mass.
    pub fn is_local(&self) -> bool {
        self.regular.is_zero()
    }

    #[inline]
    pub fn regular_at(&self, t: T) -> T {
        self.regular.eval(t)
    }

    /// `k̂(u) = w + regular̂(u)`.
    pub fn laplace(&self, u: T) -> T {
        self.delta_weight + self.regular.laplace(u)
    }

    pub fn sample(&self, grid: &TimeGrid<T>) -> SampledFunction<T> {
        SampledFunction::from_fn(*grid, |t| self.regular.eval(t)).with_delta(self.delta_weight)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            delta_weight: self.delta_weight * s,
            regular: self.regular.scaled(s),
        }
    }

    /// Smallest regular value on the grid, and whether the point mass is
    /// non-negative.
    pub fn is_nonnegative_on(&self, grid: &TimeGrid<T>, tol: T) -> bool {
        self.delta_weight >= -tol && grid.points().all(|t| self.regular.eval(t) >= -tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn damped_sine_term() {
        // Re[-i e^{(-1 + 2i) t}] = e^{-t} sin(2t)
        let p = ExpPoly::zero().with_term(Complex::new(0.0, -1.0), 0, Complex::new(-1.0, 2.0));
        for t in [0.0f64, 0.3, 1.7, 4.0] {
            assert_abs_diff_eq!(p.eval(t), (-t).exp() * (2.0 * t).sin(), epsilon = 1e-14);
        }
        // ∫ e^{-t} sin(2t) e^{-ut} = 2 / ((u+1)² + 4)
        assert_abs_diff_eq!(p.laplace(1.0), 2.0 / 8.0, epsilon = 1e-14);
    }

    #[test]
    fn polynomial_term_laplace() {
        // t e^{-2t} -> 1/(u+2)^2
        let p = ExpPoly::zero().with_term(Complex::new(1.0, 0.0), 1, Complex::new(-2.0, 0.0));
        assert_abs_diff_eq!(p.laplace(3.0), 1.0 / 25.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.eval(0.5), 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn markov_laplace_is_constant() {
        let k = MemoryFunction::markov(2.5);
        assert_eq!(k.laplace(0.1), 2.5);
        assert_eq!(k.laplace(100.0), 2.5);
        assert!(k.is_local());
    }
}
