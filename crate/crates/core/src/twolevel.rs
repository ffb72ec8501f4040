//! Closed-form analytics for a two-level system with exponential memory
//! `k_±(τ) = κ_± e^{-γτ}` and jumps `|∓⟩⟨±|`.
//!
//! The square roots `d_± = √(γ² - 4κ_±)`, `d = √(γ² - 4(κ₊+κ₋))` and
//! `d̄ = √(γ² - 2(κ₊+κ₋))` may be imaginary. Every expression is therefore
//! written through the even functions `cosh(√x²)` and `sinh(√x²)/√x²`,
//! which are real and branch independent.
//!
//! In rescaled units `r_± = 4κ_±/γ²`, `τ = γt`, the short-time CP margin
//! `Δ = T₊₊T₋₋ - g₊₋²` starts at fourth order:
//! `Δ(τ) = -(r₊² + r₋² - 4r₊r₋) τ⁴/384 + O(τ⁵)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::waiting_time::WaitingTime;

/// Below this `|x²|` the even functions switch to their Taylor series.
const SERIES_SWITCH: f64 = 1e-4;

/// Largest rescaled time for which `Δ` is summed from its Taylor series.
const DELTA_SERIES_MAX_TAU: f64 = 0.5;
const DELTA_SERIES_TERMS: usize = 40;

/// Window of the one-parameter fit `Δ ≈ c τ³`.
pub const CUBIC_FIT_WINDOW: (f64, f64) = (1e-3, 1e-2);
const CUBIC_FIT_POINTS: usize = 10;

/// `cosh(√x2)`, i.e. `cos(√-x2)` for negative arguments.
pub fn cosh_even<T: Real>(x2: T) -> T {
    if x2.abs() < T::lit(SERIES_SWITCH) {
        // Σ x2^k / (2k)!
        let mut term = T::one();
        let mut sum = T::one();
        for k in 1..6u32 {
            term = term * x2 / T::from_u32((2 * k - 1) * (2 * k)).unwrap();
            sum += term;
        }
        sum
    } else if x2 > T::zero() {
        x2.sqrt().cosh()
    } else {
        (-x2).sqrt().cos()
    }
}

/// `sinh(√x2)/√x2`, i.e. `sin(√-x2)/√-x2` for negative arguments.
pub fn sinhc_even<T: Real>(x2: T) -> T {
    if x2.abs() < T::lit(SERIES_SWITCH) {
        // Σ x2^k / (2k+1)!
        let mut term = T::one();
        let mut sum = T::one();
        for k in 1..6u32 {
            term = term * x2 / T::from_u32((2 * k) * (2 * k + 1)).unwrap();
            sum += term;
        }
        sum
    } else if x2 > T::zero() {
        let x = x2.sqrt();
        x.sinh() / x
    } else {
        let x = (-x2).sqrt();
        x.sin() / x
    }
}

/// `e^{-γt/2} [cosh(Dt/2) + (γ/D) sinh(Dt/2)]` for `D² = d2`.
fn damped<T: Real>(gamma: T, d2: T, t: T) -> T {
    let x2 = d2 * t * t / T::lit(4.0);
    let half = gamma * t * T::half();
    (-half).exp() * (cosh_even(x2) + half * sinhc_even(x2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pair {
    PlusPlus,
    MinusMinus,
    /// `g₊₋ = g₋₊`.
    PlusMinus,
}

/// Kernel parameters `γ > 0`, `κ_± ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLevelParams<T> {
    pub gamma: T,
    pub kappa_plus: T,
    pub kappa_minus: T,
}

impl<T: Real> TwoLevelParams<T> {
    pub fn new(gamma: T, kappa_plus: T, kappa_minus: T) -> Result<Self> {
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return Err(Error::invalid("gamma", format!("must be positive, got {gamma}")));
        }
        for (name, k) in [("kappa_plus", kappa_plus), ("kappa_minus", kappa_minus)] {
            if !(k >= T::zero()) || !k.is_finite() {
                return Err(Error::invalid(name, format!("must be non-negative, got {k}")));
            }
        }
        Ok(Self {
            gamma,
            kappa_plus,
            kappa_minus,
        })
    }

    /// Parameters from rescaled decay constants with `γ = 1`.
    pub fn from_rescaled(r_plus: T, r_minus: T) -> Result<Self> {
        let quarter = T::lit(0.25);
        Self::new(T::one(), r_plus * quarter, r_minus * quarter)
    }

    pub fn kappa(&self, level: Level) -> T {
        match level {
            Level::Plus => self.kappa_plus,
            Level::Minus => self.kappa_minus,
        }
    }

    /// `r_± = 4κ_±/γ²`.
    pub fn r(&self, level: Level) -> T {
        T::lit(4.0) * self.kappa(level) / (self.gamma * self.gamma)
    }

    /// `d_±²`.
    pub fn d_level_sq(&self, level: Level) -> T {
        self.gamma * self.gamma - T::lit(4.0) * self.kappa(level)
    }

    /// `d²`.
    pub fn d_sq(&self) -> T {
        self.gamma * self.gamma - T::lit(4.0) * (self.kappa_plus + self.kappa_minus)
    }

    /// `d̄²`.
    pub fn d_bar_sq(&self) -> T {
        self.gamma * self.gamma - T::two() * (self.kappa_plus + self.kappa_minus)
    }

    /// `γ²/4 ≥ max(κ₊, κ₋)`: both `f_±` are waiting-time densities and the
    /// populations follow a classical semi-Markov process.
    pub fn is_classical(&self) -> bool {
        self.gamma * self.gamma / T::lit(4.0) >= self.kappa_plus.max(self.kappa_minus)
    }

    /// Density `f_±(τ) = κ_± τ e^{-γτ/2} sinhc(d_±τ/2)`.
    pub fn f_pm(&self, level: Level, tau: T) -> T {
        let x2 = self.d_level_sq(level) * tau * tau / T::lit(4.0);
        self.kappa(level) * tau * (-self.gamma * tau * T::half()).exp() * sinhc_even(x2)
    }

    /// The waiting time whose density is `f_±`: a two-stage Erlang with
    /// stage rates `γ/2 ± d_±/2`. `None` when `κ_± = 0` (the level never
    /// decays).
    pub fn waiting_time(&self, level: Level) -> Result<Option<WaitingTime<T>>> {
        if self.kappa(level) == T::zero() {
            return Ok(None);
        }
        let d2 = self.d_level_sq(level);
        if d2 < T::zero() {
            return Err(Error::invalid(
                "kappa",
                format!("γ²/4 < κ = {}, the density is not a waiting time", self.kappa(level)),
            ));
        }
        let half = self.gamma * T::half();
        if d2 == T::zero() {
            return WaitingTime::special_erlang(half, 2).map(Some);
        }
        let d = d2.sqrt() * T::half();
        WaitingTime::generalized_erlang(vec![half + d, half - d]).map(Some)
    }

    /// Conditional probability `T_±±(t)` of finding the level occupied at
    /// `t` given it was at time zero.
    pub fn t_diag(&self, level: Level, t: T) -> T {
        let total = self.kappa_plus + self.kappa_minus;
        if total == T::zero() {
            return T::one();
        }
        let (own, other) = match level {
            Level::Plus => (self.kappa_plus, self.kappa_minus),
            Level::Minus => (self.kappa_minus, self.kappa_plus),
        };
        let v = other / total + own / total * damped(self.gamma, self.d_sq(), t);
        if v < T::zero() && v > T::lit(-1e-12) {
            T::zero()
        } else {
            v
        }
    }

    /// Entries `g₊₊`, `g₋₋`, `g₊₋` of the coherence matrix.
    pub fn g_entry(&self, pair: Pair, t: T) -> T {
        let d2 = match pair {
            Pair::PlusPlus => self.d_level_sq(Level::Plus),
            Pair::MinusMinus => self.d_level_sq(Level::Minus),
            Pair::PlusMinus => self.d_bar_sq(),
        };
        damped(self.gamma, d2, t)
    }

    /// `Δ` at rescaled time `τ = γt`.
    pub fn delta(&self, tau: T) -> T {
        delta(self.r(Level::Plus), self.r(Level::Minus), tau)
    }
}

/// Taylor coefficients of the solution of `y'' + y' + c y = b`,
/// `y(0) = 1`, `y'(0) = 0`.
fn telegraph_series<T: Real>(c: T, b: T, n: usize) -> Vec<T> {
    let mut a = vec![T::zero(); n];
    a[0] = T::one();
    for k in 0..n - 2 {
        let forcing = if k == 0 { b } else { T::zero() };
        let kk = T::from_usize_lossy(k);
        a[k + 2] = (forcing - (kk + T::one()) * a[k + 1] - c * a[k]) / ((kk + T::two()) * (kk + T::one()));
    }
    a
}

/// Taylor coefficients of `Δ(τ)` in rescaled time, up to `τ^{n-1}`.
pub fn delta_series<T: Real>(r_plus: T, r_minus: T, n: usize) -> Vec<T> {
    let quarter = T::lit(0.25);
    let sum = r_plus + r_minus;
    let tpp = telegraph_series(sum * quarter, r_minus * quarter, n);
    let tmm = telegraph_series(sum * quarter, r_plus * quarter, n);
    let gpm = telegraph_series(sum * T::lit(0.125), T::zero(), n);
    (0..n)
        .map(|k| (0..=k).map(|j| tpp[j] * tmm[k - j] - gpm[j] * gpm[k - j]).sum())
        .collect()
}

/// `Δ(τ) = T₊₊T₋₋ - g₊₋²` in rescaled variables. Short times are summed
/// from the Taylor series to avoid the cancellation between two products
/// that are both close to one.
pub fn delta<T: Real>(r_plus: T, r_minus: T, tau: T) -> T {
    if tau <= T::lit(DELTA_SERIES_MAX_TAU) {
        let c = delta_series(r_plus, r_minus, DELTA_SERIES_TERMS);
        return c.iter().rev().fold(T::zero(), |acc, &ck| acc * tau + ck);
    }
    delta_direct(r_plus, r_minus, tau)
}

/// `Δ` from the closed forms, without the short-time series.
pub fn delta_direct<T: Real>(r_plus: T, r_minus: T, tau: T) -> T {
    let sum = r_plus + r_minus;
    let g = damped(T::one(), T::one() - sum / T::two(), tau);
    if sum == T::zero() {
        // no transitions: T₊₊ = T₋₋ = 1
        return T::one() - g * g;
    }
    let h1 = damped(T::one(), T::one() - sum, tau);
    let tpp = r_minus / sum + r_plus / sum * h1;
    let tmm = r_plus / sum + r_minus / sum * h1;
    tpp * tmm - g * g
}

/// `r₊² + r₋² - 4r₊r₋`; its sign decides short-time CP.
pub fn short_time_discriminant<T: Real>(r_plus: T, r_minus: T) -> T {
    r_plus * r_plus + r_minus * r_minus - T::lit(4.0) * r_plus * r_minus
}

/// Leading coefficient of `Δ`, the `τ⁴` term.
pub fn quartic_coefficient<T: Real>(r_plus: T, r_minus: T) -> T {
    -short_time_discriminant(r_plus, r_minus) / T::lit(384.0)
}

/// The coefficient `-(r₊² + r₋² - 4r₊r₋)/96` of the cubic short-time law.
/// It equals the leading coefficient of `dΔ/dτ`, not of `Δ` itself.
pub fn cubic_law_coefficient<T: Real>(r_plus: T, r_minus: T) -> T {
    -short_time_discriminant(r_plus, r_minus) / T::lit(96.0)
}

/// Least-squares `c` in `Δ(τ) ≈ c τ³` over [`CUBIC_FIT_WINDOW`], on
/// geometrically spaced sample times.
pub fn fitted_cubic_coefficient<T: Real>(r_plus: T, r_minus: T) -> T {
    let (lo, hi) = (T::lit(CUBIC_FIT_WINDOW.0), T::lit(CUBIC_FIT_WINDOW.1));
    let ratio = (hi / lo).powf(T::one() / T::from_usize_lossy(CUBIC_FIT_POINTS - 1));
    let (mut num, mut den) = (T::zero(), T::zero());
    let mut tau = lo;
    for _ in 0..CUBIC_FIT_POINTS {
        let t3 = tau * tau * tau;
        num += delta(r_plus, r_minus, tau) * t3;
        den += t3 * t3;
        tau = tau * ratio;
    }
    num / den
}

/// Short-time CP boundary ratios `r₊/r₋ = 2 ± √3`, the roots of
/// `x² - 4x + 1`, returned as `(upper, lower)`.
pub fn cp_boundary_ratio<T: Real>() -> (T, T) {
    let s3 = T::lit(3.0).sqrt();
    (T::two() + s3, T::two() - s3)
}

/// `βħω` threshold `ln(2 + √3)` and its reciprocal `k_B T/ħω`.
pub fn temperature_threshold<T: Real>() -> (T, T) {
    let b = cp_boundary_ratio::<T>().0.ln();
    (b, b.recip())
}

/// Rescaled tolerance below which `|Δ|` is reported as sign `0`.
pub const SIGN_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanCell<T> {
    pub r_minus: T,
    pub r_plus: T,
    pub tau: T,
    pub delta: T,
    pub sign: i8,
    /// `r₊ = r₋ = 0`, where `Δ` is fixed by the no-transition convention.
    pub degenerate: bool,
}

/// Sign map of `Δ(τ)` on `(r₋, r₊) ∈ [0,1]²`, rows ordered by `r₊`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrid<T> {
    pub tau: T,
    pub resolution: usize,
    pub cells: Vec<ScanCell<T>>,
}

fn axis<T: Real>(i: usize, resolution: usize) -> T {
    T::from_usize_lossy(i) / T::from_usize_lossy(resolution - 1)
}

fn sign_of<T: Real>(v: T) -> i8 {
    if v.abs() <= T::lit(SIGN_TOL) {
        0
    } else if v > T::zero() {
        1
    } else {
        -1
    }
}

pub fn scan_region<T: Real>(tau: T, resolution: usize) -> Result<ScanGrid<T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("tau", "must be positive"));
    }
    if resolution < 2 {
        return Err(Error::invalid("resolution", "must be at least 2"));
    }
    let cells = (0..resolution)
        .into_par_iter()
        .flat_map_iter(|row| {
            let r_plus = axis::<T>(row, resolution);
            (0..resolution).map(move |col| {
                let r_minus = axis::<T>(col, resolution);
                let d = delta(r_plus, r_minus, tau);
                ScanCell {
                    r_minus,
                    r_plus,
                    tau,
                    delta: d,
                    sign: sign_of(d),
                    degenerate: r_plus == T::zero() && r_minus == T::zero(),
                }
            })
        })
        .collect();
    Ok(ScanGrid { tau, resolution, cells })
}

impl<T: Real> ScanGrid<T> {
    pub fn cell(&self, row: usize, col: usize) -> &ScanCell<T> {
        &self.cells[row * self.resolution + col]
    }

    /// Upper boundary ratio estimated from the map: for every column `r₋`
    /// whose crossing lies inside the grid, the first `r₊ ≥ r₋` with
    /// negative sign marks the boundary; the estimate is the least-squares
    /// slope of those crossings through the origin.
    pub fn boundary_ratio(&self) -> Option<BoundaryEstimate<T>> {
        let n = self.resolution;
        let cell = T::one() / T::from_usize_lossy(n - 1);
        let (mut num, mut den, mut used) = (T::zero(), T::zero(), 0usize);
        for col in 1..n {
            let r_minus = axis::<T>(col, n);
            let crossing = (col..n).find(|&row| self.cell(row, col).sign < 0);
            if let Some(row) = crossing {
                if row == col {
                    continue;
                }
                // midpoint between last non-negative and first negative cell
                let r_plus = axis::<T>(row, n) - cell * T::half();
                num += r_plus * r_minus;
                den += r_minus * r_minus;
                used += 1;
            }
        }
        if used == 0 {
            return None;
        }
        let ratio = num / den;
        Some(BoundaryEstimate {
            ratio,
            deviation: ratio - cp_boundary_ratio::<T>().0,
            columns_used: used,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEstimate<T> {
    pub ratio: T,
    /// `ratio - (2 + √3)`.
    pub deviation: T,
    pub columns_used: usize,
}

/// Sign change of the fitted cubic coefficient along `r₊ ∈ [0,1]` at fixed
/// `r₋`, sampled at `points` equally spaced values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicBoundary<T> {
    /// Midpoint of the first cell above `r₋` where the coefficient turns negative.
    pub r_plus: T,
    pub cell: T,
}

pub fn cubic_sign_boundary<T: Real>(r_minus: T, points: usize) -> Option<CubicBoundary<T>> {
    if points < 2 {
        return None;
    }
    let cell = T::one() / T::from_usize_lossy(points - 1);
    let coeffs: Vec<T> = (0..points)
        .into_par_iter()
        .map(|i| fitted_cubic_coefficient(axis::<T>(i, points), r_minus))
        .collect();
    (1..points)
        .find(|&i| axis::<T>(i - 1, points) >= r_minus && coeffs[i - 1] >= T::zero() && coeffs[i] < T::zero())
        .map(|i| CubicBoundary {
            r_plus: axis::<T>(i, points) - cell * T::half(),
            cell,
        })
}

/// `Δ` over ratio `r₊/r₋ ∈ [1, 2+√3]` and `τ ∈ [0, tau_max]` at fixed `r₋`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceReport<T> {
    pub r_minus: T,
    /// `(ratio, τ, Δ)` in ratio-major order.
    pub samples: Vec<(T, T, T)>,
    pub min_delta: T,
}

pub fn ratio_slice<T: Real>(r_minus: T, ratios: usize, tau_max: T, taus: usize) -> Result<SliceReport<T>> {
    if ratios < 2 || taus < 2 {
        return Err(Error::invalid("resolution", "must be at least 2"));
    }
    let top = cp_boundary_ratio::<T>().0;
    let samples: Vec<(T, T, T)> = (0..ratios)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ratio = T::one() + (top - T::one()) * axis::<T>(i, ratios);
            (0..taus).map(move |j| {
                let tau = tau_max * axis::<T>(j, taus);
                (ratio, tau, delta(ratio * r_minus, r_minus, tau))
            })
        })
        .collect();
    let min_delta = samples.iter().map(|s| s.2).fold(T::infinity(), T::min);
    Ok(SliceReport {
        r_minus,
        samples,
        min_delta,
    })
}

/// Dense check of `Δ ≥ 0` inside `r₋ ≤ r₊ ≤ (2+√3) r₋`. The result is a
/// finding, not an assertion.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport<T> {
    pub points_checked: usize,
    pub counterexamples: usize,
    /// Most negative `(r₋, r₊, τ, Δ)` found, if any was negative.
    pub worst: Option<(T, T, T, T)>,
    pub tolerance: T,
}

pub fn sufficiency_scan<T: Real>(resolution: usize, tau_max: T, taus: usize, tolerance: T) -> SufficiencyReport<T> {
    let top = cp_boundary_ratio::<T>().0;
    let per_row: Vec<(usize, usize, Option<(T, T, T, T)>)> = (0..resolution)
        .into_par_iter()
        .map(|row| {
            let r_plus = axis::<T>(row, resolution.max(2));
            let mut checked = 0;
            let mut bad = 0;
            let mut worst: Option<(T, T, T, T)> = None;
            for col in 0..resolution {
                let r_minus = axis::<T>(col, resolution.max(2));
                if r_minus == T::zero() || r_plus < r_minus || r_plus > top * r_minus {
                    continue;
                }
                for j in 1..=taus {
                    let tau = tau_max * T::from_usize_lossy(j) / T::from_usize_lossy(taus);
                    let d = delta(r_plus, r_minus, tau);
                    checked += 1;
                    if d < -tolerance {
                        bad += 1;
                    }
                    if d < T::zero() && worst.is_none_or(|w| d < w.3) {
                        worst = Some((r_minus, r_plus, tau, d));
                    }
                }
            }
            (checked, bad, worst)
        })
        .collect();
    let mut report = SufficiencyReport {
        points_checked: 0,
        counterexamples: 0,
        worst: None,
        tolerance,
    };
    for (c, b, w) in per_row {
        report.points_checked += c;
        report.counterexamples += b;
        if let Some(w) = w {
            if report.worst.is_none_or(|cur| w.3 < cur.3) {
                report.worst = Some(w);
            }
        }
    }
    report
}
