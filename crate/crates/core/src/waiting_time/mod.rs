//! Waiting-time distributions, survival probabilities and memory functions.
//!
//! A waiting time density `f`, its survival probability `g = 1 - ∫f` and the
//! memory function `k` are tied together by `f = k ∗ g`, or in the Laplace
//! domain `k̂ = u f̂ / (1 - f̂)`. Closed forms are provided for exponential,
//! Erlang (equal or distinct stage rates, up to three stages) and
//! two-component multi-exponential distributions.

mod memory;

pub use memory::{ExpPoly, ExpPolyTerm, MemoryFunction};

use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{Real, C};
use crate::volterra::{SampledFunction, TimeGrid};

/// Shape of a waiting-time distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Kind<T> {
    /// `λ e^{-λτ}`.
    Exponential { rate: T },
    /// Sum of `order` exponential stages of equal rate.
    SpecialErlang { rate: T, order: u32 },
    /// Sum of exponential stages with pairwise distinct rates.
    GeneralizedErlang { rates: Vec<T> },
    /// Convex mixture `Σ p_i λ_i e^{-λ_i τ}`.
    MultiExponential { weights: Vec<T>, rates: Vec<T> },
}

/// Validated waiting-time distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct WaitingTime<T> {
    kind: Kind<T>,
}

fn check_rate<T: Real>(field: &str, rate: T) -> Result<()> {
    if !(rate > T::zero()) || !rate.is_finite() {
        return Err(Error::invalid(field, format!("rate must be positive and finite, got {rate}")));
    }
    Ok(())
}

fn check_time<T: Real>(tau: T) -> Result<()> {
    if tau < T::zero() || tau.is_nan() {
        return Err(Error::Domain(format!("time must be non-negative, got {tau}")));
    }
    Ok(())
}

impl<T: Real> WaitingTime<T> {
    pub fn exponential(rate: T) -> Result<Self> {
        check_rate("exponential rate", rate)?;
        Ok(Self {
            kind: Kind::Exponential { rate },
        })
    }

    pub fn special_erlang(rate: T, order: u32) -> Result<Self> {
        check_rate("erlang rate", rate)?;
        if order == 0 {
            return Err(Error::invalid("erlang order", "must be at least 1"));
        }
        Ok(Self {
            kind: Kind::SpecialErlang { rate, order },
        })
    }

    pub fn generalized_erlang(rates: Vec<T>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("erlang rates", "at least one stage required"));
        }
        for &r in &rates {
            check_rate("erlang rates", r)?;
        }
        for i in 0..rates.len() {
            for j in i + 1..rates.len() {
                if rates[i] == rates[j] {
                    return Err(Error::invalid(
                        "erlang rates",
                        format!("stage rates must be distinct, {} repeats", rates[i]),
                    ));
                }
            }
        }
        Ok(Self {
            kind: Kind::GeneralizedErlang { rates },
        })
    }

    pub fn multi_exponential(weights: Vec<T>, rates: Vec<T>) -> Result<Self> {
        if weights.is_empty() || weights.len() != rates.len() {
            return Err(Error::invalid(
                "multi-exponential",
                "weights and rates must be non-empty and of equal length",
            ));
        }
        for &r in &rates {
            check_rate("multi-exponential rates", r)?;
        }
        if weights.iter().any(|&p| p < T::zero() || !p.is_finite()) {
            return Err(Error::invalid("multi-exponential weights", "must be non-negative"));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(Error::invalid(
                "multi-exponential weights",
                format!("must sum to 1, sum is {total}"),
            ));
        }
        Ok(Self {
            kind: Kind::MultiExponential { weights, rates },
        })
    }

    pub fn kind(&self) -> &Kind<T> {
        &self.kind
    }

    pub fn is_exponential(&self) -> bool {
        match &self.kind {
            Kind::Exponential { .. } => true,
            Kind::SpecialErlang { order, .. } => *order == 1,
            Kind::GeneralizedErlang { rates } => rates.len() == 1,
            Kind::MultiExponential { rates, weights } => {
                rates
                    .iter()
                    .zip(weights)
                    .filter(|(_, &p)| p > T::zero())
                    .map(|(&r, _)| r)
                    .fold(None, |acc: Option<(T, bool)>, r| match acc {
                        None => Some((r, true)),
                        Some((r0, same)) => Some((r0, same && r == r0)),
                    })
                    .map(|(_, same)| same)
                    .unwrap_or(true)
            }
        }
    }

    /// Weights `Π_{j≠i} λ_j / (λ_j - λ_i)` of the generalized Erlang
    /// survival function `Σ w_i e^{-λ_i τ}`.
    fn erlang_weights(rates: &[T]) -> Vec<T> {
        (0..rates.len())
            .map(|i| {
                (0..rates.len())
                    .filter(|&j| j != i)
                    .map(|j| rates[j] / (rates[j] - rates[i]))
                    .product()
            })
            .collect()
    }

    /// Density `f(τ)`.
    pub fn eval_f(&self, tau: T) -> Result<T> {
        check_time(tau)?;
        Ok(self.density(tau))
    }

    /// Survival probability `g(τ) = 1 - ∫₀^τ f`.
    pub fn eval_g(&self, tau: T) -> Result<T> {
        check_time(tau)?;
        Ok(self.survival(tau))
    }

    fn density(&self, tau: T) -> T {
        match &self.kind {
            Kind::Exponential { rate } => *rate * (-*rate * tau).exp(),
            Kind::SpecialErlang { rate, order } => {
                let x = *rate * tau;
                let fact: T = (1..*order).map(|j| T::from_u32(j).unwrap()).product();
                *rate * x.powi(*order as i32 - 1) / fact * (-x).exp()
            }
            Kind::GeneralizedErlang { rates } => Self::erlang_weights(rates)
                .iter()
                .zip(rates)
                .map(|(&w, &r)| w * r * (-r * tau).exp())
                .sum(),
            Kind::MultiExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(&p, &r)| p * r * (-r * tau).exp())
                .sum(),
        }
    }

    fn survival(&self, tau: T) -> T {
        match &self.kind {
            Kind::Exponential { rate } => (-*rate * tau).exp(),
            Kind::SpecialErlang { rate, order } => {
                let x = *rate * tau;
                let mut term = T::one();
                let mut sum = T::one();
                for j in 1..*order {
                    term = term * x / T::from_u32(j).unwrap();
                    sum += term;
                }
                sum * (-x).exp()
            }
            Kind::GeneralizedErlang { rates } => Self::erlang_weights(rates)
                .iter()
                .zip(rates)
                .map(|(&w, &r)| w * (-r * tau).exp())
                .sum(),
            Kind::MultiExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(&p, &r)| p * (-r * tau).exp())
                .sum(),
        }
    }

    /// Laplace transform `f̂(u)` of the density.
    pub fn laplace_density(&self, u: T) -> T {
        match &self.kind {
            Kind::Exponential { rate } => *rate / (u + *rate),
            Kind::SpecialErlang { rate, order } => (*rate / (u + *rate)).powi(*order as i32),
            Kind::GeneralizedErlang { rates } => rates.iter().map(|&r| r / (u + r)).product(),
            Kind::MultiExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(&p, &r)| p * r / (u + r))
                .sum(),
        }
    }

    pub fn mean(&self) -> T {
        match &self.kind {
            Kind::Exponential { rate } => rate.recip(),
            Kind::SpecialErlang { rate, order } => T::from_u32(*order).unwrap() / *rate,
            Kind::GeneralizedErlang { rates } => rates.iter().map(|r| r.recip()).sum(),
            Kind::MultiExponential { weights, rates } => {
                weights.iter().zip(rates).map(|(&p, &r)| p / r).sum()
            }
        }
    }

    pub fn density_on(&self, grid: &TimeGrid<T>) -> SampledFunction<T> {
        SampledFunction::from_fn(*grid, |t| self.density(t))
    }

    pub fn survival_on(&self, grid: &TimeGrid<T>) -> SampledFunction<T> {
        SampledFunction::from_fn(*grid, |t| self.survival(t))
    }

    /// Smallest power-of-two multiple of the mean with `g(T) < eps`.
    pub fn horizon_for(&self, eps: T) -> T {
        let mut t = self.mean();
        while self.survival(t) >= eps {
            t = t * T::two();
        }
        t
    }

    /// Closed-form memory function.
    pub fn memory_function(&self) -> Result<MemoryFunction<T>> {
        let three = T::lit(3.0);
        match &self.kind {
            Kind::Exponential { rate } => Ok(MemoryFunction::markov(*rate)),
            Kind::SpecialErlang { rate, order } => {
                let l = *rate;
                match order {
                    1 => Ok(MemoryFunction::markov(l)),
                    2 => Ok(MemoryFunction::exponential(l * l, T::two() * l)),
                    3 => {
                        // k̂ = λ³ / (u² + 3λu + 3λ²): damped sine with
                        // frequency √3·λ/2 and decay 3λ/2.
                        let amp = T::two() * l * l / three.sqrt();
                        let rate = Complex::new(-three * l / T::two(), three.sqrt() * l / T::two());
                        Ok(MemoryFunction::new(
                            T::zero(),
                            ExpPoly::zero().with_term(Complex::new(T::zero(), -amp), 0, rate),
                        ))
                    }
                    _ => Err(Error::NoClosedForm(format!("special Erlang of order {order}"))),
                }
            }
            Kind::GeneralizedErlang { rates } => match rates.as_slice() {
                [l] => Ok(MemoryFunction::markov(*l)),
                [l1, l2] => Ok(MemoryFunction::exponential(*l1 * *l2, *l1 + *l2)),
                [l1, l2, l3] => Ok(MemoryFunction::new(T::zero(), erlang3_memory(*l1, *l2, *l3))),
                _ => Err(Error::NoClosedForm(format!(
                    "generalized Erlang with {} stages",
                    rates.len()
                ))),
            },
            Kind::MultiExponential { weights, rates } => {
                let active: Vec<(T, T)> = weights
                    .iter()
                    .zip(rates)
                    .filter(|(&p, _)| p > T::zero())
                    .map(|(&p, &r)| (p, r))
                    .collect();
                match active.as_slice() {
                    [(_, l)] => Ok(MemoryFunction::markov(*l)),
                    [(p, l1), (_, l2)] => {
                        let p = *p;
                        let q = T::one() - p;
                        let mean = p * *l1 + q * *l2;
                        let variance = p * q * (*l1 - *l2) * (*l1 - *l2);
                        let decay = p * *l2 + q * *l1;
                        Ok(MemoryFunction::new(mean, ExpPoly::exponential(-variance, decay)))
                    }
                    _ => Err(Error::NoClosedForm(format!(
                        "multi-exponential with {} components",
                        active.len()
                    ))),
                }
            }
        }
    }

    /// Memory function sampled on `grid`: closed form when available,
    /// otherwise numerical deconvolution of `f = k ∗ g`.
    pub fn memory_on(&self, grid: &TimeGrid<T>) -> Result<SampledFunction<T>> {
        match self.memory_function() {
            Ok(k) => Ok(k.sample(grid)),
            Err(Error::NoClosedForm(_)) => {
                crate::volterra::invert_memory(&self.density_on(grid), &self.survival_on(grid))
            }
            Err(e) => Err(e),
        }
    }

    /// Draws one sojourn time. Erlang kinds are sampled stage by stage,
    /// mixtures by first choosing a branch.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let exp = |rng: &mut R, rate: T| -> T {
            let u: f64 = rng.random();
            T::lit(-(1.0 - u).ln()) / rate
        };
        match &self.kind {
            Kind::Exponential { rate } => exp(rng, *rate),
            Kind::SpecialErlang { rate, order } => (0..*order).map(|_| exp(rng, *rate)).sum(),
            Kind::GeneralizedErlang { rates } => rates.iter().map(|&r| exp(rng, r)).sum(),
            Kind::MultiExponential { weights, rates } => {
                let u = T::lit(rng.random::<f64>());
                let mut acc = T::zero();
                let mut chosen = rates.len() - 1;
                for (i, &p) in weights.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                exp(rng, rates[chosen])
            }
        }
    }
}

/// `λ₁λ₂λ₃ (e^{λ₊t} - e^{λ₋t}) / (λ₊ - λ₋)` with
/// `λ± = (-Σλ ± √((λ₁-λ₂-λ₃)² - 4λ₂λ₃)) / 2`; the confluent case
/// `λ₊ = λ₋` degenerates to `λ₁λ₂λ₃ t e^{-Σλ t / 2}`.
fn erlang3_memory<T: Real>(l1: T, l2: T, l3: T) -> ExpPoly<T> {
    let prod = l1 * l2 * l3;
    let sum = l1 + l2 + l3;
    let disc = (l1 - l2 - l3) * (l1 - l2 - l3) - T::lit(4.0) * l2 * l3;
    let centre: C<T> = Complex::new(-sum / T::two(), T::zero());
    if disc.abs() <= T::lit(1e-12) * sum * sum {
        return ExpPoly::zero().with_term(Complex::new(prod, T::zero()), 1, centre);
    }
    let root = if disc >= T::zero() {
        Complex::new(disc.sqrt() / T::two(), T::zero())
    } else {
        Complex::new(T::zero(), (-disc).sqrt() / T::two())
    };
    let (plus, minus) = (centre + root, centre - root);
    let c = Complex::new(prod, T::zero()) / (plus - minus);
    ExpPoly::zero()
        .with_term(c, 0, plus)
        .with_term(-c, 0, minus)
}
