//! Convolution-type Volterra equations on a uniform time grid.
//!
//! All quadratures are composite trapezoid rules. Kernels may carry a point
//! mass at the origin, written `w · 2δ(τ)`: integrated over the half line it
//! contributes `w · x(t)`, so `∫₀ᵗ 2δ(s) x(t - s) ds = x(t)`.

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::{Real, Sample, C};
use crate::waiting_time::{ExpPoly, MemoryFunction};

/// Uniform grid `t_i = i·h`, `i = 0..=count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    step: T,
    count: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(step: T, count: usize) -> Result<Self> {
        if !(step > T::zero()) || !step.is_finite() {
            return Err(Error::invalid("grid step", format!("must be positive, got {step}")));
        }
        if count == 0 {
            return Err(Error::invalid("grid count", "must be at least 1"));
        }
        Ok(Self { step, count })
    }

    /// Grid of step `h` reaching at least `horizon`.
    pub fn with_horizon(step: T, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) {
            return Err(Error::invalid("horizon", format!("must be positive, got {horizon}")));
        }
        let n = (horizon / step - T::lit(1e-9)).ceil();
        let count = n.to_usize().ok_or_else(|| Error::invalid("horizon", "too many points"))?;
        Self::new(step, count.max(1))
    }

    #[inline]
    pub fn step(&self) -> T {
        self.step
    }

    /// Number of intervals.
    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    /// Number of points (`count + 1`).
    #[inline]
    pub fn len(&self) -> usize {
        self.count + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn t(&self, i: usize) -> T {
        self.step * T::from_usize_lossy(i)
    }

    pub fn horizon(&self) -> T {
        self.t(self.count)
    }

    pub fn points(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.len()).map(|i| self.t(i))
    }

    /// Index of the grid point nearest to `t` (clamped to the grid).
    pub fn index_of(&self, t: T) -> usize {
        let i = (t / self.step).round().to_usize().unwrap_or(0);
        i.min(self.count)
    }
}

/// Function sampled on a [`TimeGrid`], optionally with a point mass
/// `delta_weight · 2δ(t)` at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction<T: Real, V = T> {
    grid: TimeGrid<T>,
    values: Vec<V>,
    delta_weight: V,
}

impl<T: Real, V: Sample<T>> SampledFunction<T, V> {
    pub fn new(grid: TimeGrid<T>, values: Vec<V>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            delta_weight: V::zero(),
        })
    }

    pub fn from_fn(grid: TimeGrid<T>, f: impl Fn(T) -> V) -> Self {
        Self {
            grid,
            values: grid.points().map(f).collect(),
            delta_weight: V::zero(),
        }
    }

    pub fn constant(grid: TimeGrid<T>, value: V) -> Self {
        Self::from_fn(grid, |_| value)
    }

    pub fn zeros(grid: TimeGrid<T>) -> Self {
        Self::constant(grid, V::zero())
    }

    pub fn with_delta(mut self, weight: V) -> Self {
        self.delta_weight = weight;
        self
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[V] {
        &self.values
    }

    #[inline]
    pub fn delta_weight(&self) -> V {
        self.delta_weight
    }

    #[inline]
    pub fn at(&self, i: usize) -> V {
        self.values[i]
    }

    pub fn is_zero(&self) -> bool {
        self.delta_weight == V::zero() && self.values.iter().all(|v| *v == V::zero())
    }

    /// Largest `|self(t_i) - other(t_i)|` over the regular samples.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a - *b).modulus())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Largest deviation from a reference function of time.
    pub fn max_error_against(&self, reference: impl Fn(T) -> V) -> T {
        self.grid
            .points()
            .zip(&self.values)
            .map(|(t, v)| (*v - reference(t)).modulus())
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn map<W: Sample<T>>(&self, f: impl Fn(V) -> W) -> SampledFunction<T, W> {
        SampledFunction {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            delta_weight: f(self.delta_weight),
        }
    }

    pub fn to_complex(&self) -> SampledFunction<T, C<T>> {
        self.map(|v| v.into_complex())
    }

    /// Trapezoid integral over the whole grid, including the point mass.
    pub fn integral(&self) -> V {
        let h = self.grid.step();
        let n = self.values.len();
        let mut acc = V::zero();
        for (i, &v) in self.values.iter().enumerate() {
            let w = if i == 0 || i == n - 1 { T::half() } else { T::one() };
            acc += v * w;
        }
        acc * h + self.delta_weight
    }
}

impl<T: Real> SampledFunction<T, C<T>> {
    pub fn re(&self) -> SampledFunction<T, T> {
        self.map(|v| v.re)
    }
}

fn check_same_grid<T: Real>(a: &TimeGrid<T>, b: &TimeGrid<T>) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "step {} / {} points vs step {} / {} points",
            a.step(),
            a.len(),
            b.step(),
            b.len()
        )));
    }
    Ok(())
}

/// Trapezoid convolution `(a ∗ b)(t_i) = h Σ'' a(t_j) b(t_{i-j})` plus the
/// point-mass contributions `w_a b + w_b a`; the result carries `w_a w_b`.
pub fn convolve<T: Real, V: Sample<T>>(
    a: &SampledFunction<T, V>,
    b: &SampledFunction<T, V>,
) -> Result<SampledFunction<T, V>> {
    check_same_grid(&a.grid, &b.grid)?;
    let h = a.grid.step();
    let (av, bv) = (&a.values, &b.values);
    let mut out = Vec::with_capacity(av.len());
    for i in 0..av.len() {
        let mut acc = V::zero();
        if i > 0 {
            acc += (av[0] * bv[i] + av[i] * bv[0]) * T::half();
            for j in 1..i {
                acc += av[j] * bv[i - j];
            }
        }
        out.push(acc * h + a.delta_weight * bv[i] + b.delta_weight * av[i]);
    }
    Ok(SampledFunction {
        grid: a.grid,
        values: out,
        delta_weight: a.delta_weight * b.delta_weight,
    })
}

/// One memory contribution `c(τ) · M`: a real scalar profile times a
/// constant coupling matrix. When the profile is known in closed form as a
/// sum of `α tᵖ e^{st}` modes, the history sums are updated recursively.
#[derive(Debug, Clone)]
struct KernelTerm<T: Real> {
    profile: Vec<T>,
    coupling: CMatrix<T>,
    modes: Option<Vec<ExpMode<T>>>,
}

/// `α tᵖ e^{st}`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ExpMode<T: Real> {
    coeff: C<T>,
    power: u32,
    rate: C<T>,
}

/// Splits `Re Σ c tᵖ e^{st}` into complex modes whose sum is the real function.
fn modes_of<T: Real>(poly: &ExpPoly<T>) -> Vec<ExpMode<T>> {
    let mut modes = Vec::new();
    for t in poly.terms() {
        if t.coeff.im == T::zero() && t.rate.im == T::zero() {
            modes.push(ExpMode {
                coeff: t.coeff,
                power: t.power,
                rate: t.rate,
            });
        } else {
            let half = t.coeff * T::half();
            modes.push(ExpMode {
                coeff: half,
                power: t.power,
                rate: t.rate,
            });
            modes.push(ExpMode {
                coeff: half.conj(),
                power: t.power,
                rate: t.rate.conj(),
            });
        }
    }
    modes
}

/// Running sums `S⁽ʳ⁾_i = Σ_{j=1}^{i-1} jʳ ρʲ x_{i-j}`, `ρ = e^{sh}`, for
/// `r = 0..=p`. Advancing uses `S⁽ʳ⁾_{i+1} = ρ (x_i + Σ_q C(r,q) S⁽q⁾_i)`,
/// valid from `i = 1` on, with `S_1 = 0`.
struct ModeHistory<T: Real> {
    ratio: C<T>,
    /// `α hᵖ`.
    scale: C<T>,
    sums: Vec<Vec<C<T>>>,
    binomials: Vec<Vec<T>>,
}

impl<T: Real> ModeHistory<T> {
    fn new(mode: &ExpMode<T>, h: T, len: usize) -> Self {
        let p = mode.power as usize;
        let mut binomials = vec![vec![T::one()]];
        for r in 1..=p {
            let prev = &binomials[r - 1];
            let mut row = vec![T::one(); r + 1];
            for q in 1..r {
                row[q] = prev[q - 1] + prev[q];
            }
            binomials.push(row);
        }
        Self {
            ratio: (mode.rate * h).exp(),
            scale: mode.coeff * h.powi(p as i32),
            sums: vec![vec![C::zero(); len]; p + 1],
            binomials,
        }
    }

    fn accumulate(&self, out: &mut [C<T>]) {
        let top = self.sums.last().expect("at least one order");
        for (o, &v) in out.iter_mut().zip(top) {
            *o += v * self.scale;
        }
    }

    fn push(&mut self, x: &[C<T>]) {
        for r in (0..self.sums.len()).rev() {
            for k in 0..x.len() {
                let mut acc = x[k];
                for q in 0..=r {
                    acc += self.sums[q][k] * self.binomials[r][q];
                }
                self.sums[r][k] = acc * self.ratio;
            }
        }
    }
}

/// Trapezoid convolution `k ∗ x` with a closed-form memory function. Gives
/// the same sums as [`convolve`] on `k` sampled, in linear time.
pub fn convolve_memory<T: Real>(
    k: &MemoryFunction<T>,
    x: &SampledFunction<T, C<T>>,
) -> SampledFunction<T, C<T>> {
    let grid = *x.grid();
    let h = grid.step();
    let xs = x.values();
    let c = k.sample(&grid);
    let cv = c.values();
    let mut histories: Vec<ModeHistory<T>> =
        modes_of(&k.regular).iter().map(|m| ModeHistory::new(m, h, 1)).collect();
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut acc = [C::zero()];
        if i > 0 {
            acc[0] = (xs[i] * cv[0] + xs[0] * cv[i]) * T::half();
            for hist in &histories {
                hist.accumulate(&mut acc);
            }
        }
        out.push(acc[0] * h + xs[i] * k.delta_weight + x.delta_weight() * cv[i]);
        if i > 0 {
            for hist in histories.iter_mut() {
                hist.push(&xs[i..i + 1]);
            }
        }
    }
    SampledFunction {
        grid,
        values: out,
        delta_weight: x.delta_weight() * k.delta_weight,
    }
}

/// Matrix-valued memory kernel
/// `K(τ) = L · 2δ(τ) + Σ_l c_l(τ) M_l`
/// sampled on a grid.
#[derive(Debug, Clone)]
pub struct MemoryKernel<T: Real> {
    dim: usize,
    grid: TimeGrid<T>,
    local: CMatrix<T>,
    terms: Vec<KernelTerm<T>>,
}

impl<T: Real> MemoryKernel<T> {
    pub fn new(dim: usize, grid: TimeGrid<T>) -> Self {
        Self {
            dim,
            grid,
            local: CMatrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    /// Kernel built entry by entry from a square matrix of sampled functions.
    pub fn from_entries(entries: &[Vec<SampledFunction<T>>]) -> Result<Self> {
        let dim = entries.len();
        if dim == 0 {
            return Err(Error::Dimension("empty kernel".into()));
        }
        let grid = *entries[0]
            .first()
            .ok_or_else(|| Error::Dimension("empty kernel row".into()))?
            .grid();
        let mut kernel = Self::new(dim, grid);
        for (r, row) in entries.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Dimension(format!(
                    "kernel row {r} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            for (c, f) in row.iter().enumerate() {
                kernel.add_term(f, CMatrix::unit(dim, r, c))?;
            }
        }
        Ok(kernel)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    /// Coefficient matrix of `2δ(τ)`.
    pub fn local(&self) -> &CMatrix<T> {
        &self.local
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn add_local(&mut self, coupling: &CMatrix<T>) -> Result<()> {
        self.check_coupling(coupling)?;
        self.local = &self.local + coupling;
        Ok(())
    }

    /// Adds `profile(τ) · coupling`; the point mass of `profile` goes to the
    /// local part. Terms with bit-identical profiles are merged.
    pub fn add_term(&mut self, profile: &SampledFunction<T>, coupling: CMatrix<T>) -> Result<()> {
        self.push_term(profile, coupling, None)
    }

    /// Adds `k(τ) · coupling` for a closed-form memory function; its history
    /// sums are then evaluated recursively instead of by direct summation.
    pub fn add_memory(&mut self, k: &MemoryFunction<T>, coupling: CMatrix<T>) -> Result<()> {
        let modes = modes_of(&k.regular);
        self.push_term(&k.sample(&self.grid), coupling, Some(modes))
    }

    fn push_term(
        &mut self,
        profile: &SampledFunction<T>,
        coupling: CMatrix<T>,
        modes: Option<Vec<ExpMode<T>>>,
    ) -> Result<()> {
        check_same_grid(&self.grid, profile.grid())?;
        self.check_coupling(&coupling)?;
        let w = profile.delta_weight();
        if w != T::zero() {
            self.local = &self.local + &coupling.scale_real(w);
        }
        if profile.values().iter().all(|v| *v == T::zero()) || coupling.max_norm() == T::zero() {
            return Ok(());
        }
        if let Some(term) = self.terms.iter_mut().find(|t| t.profile == profile.values()) {
            term.coupling = &term.coupling + &coupling;
            if term.modes.is_none() {
                term.modes = modes;
            }
        } else {
            self.terms.push(KernelTerm {
                profile: profile.values().to_vec(),
                coupling,
                modes,
            });
        }
        Ok(())
    }

    fn check_coupling(&self, m: &CMatrix<T>) -> Result<()> {
        if m.rows() != self.dim || m.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "coupling is {}x{}, kernel dimension is {}",
                m.rows(),
                m.cols(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Regular part of the kernel at grid index `j`.
    pub fn regular_at(&self, j: usize) -> CMatrix<T> {
        let mut k = CMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            k = &k + &term.coupling.scale_real(term.profile[j]);
        }
        k
    }
}

/// Time series of `rows × cols` matrices on a grid.
#[derive(Debug, Clone)]
pub struct MatrixSeries<T: Real> {
    grid: TimeGrid<T>,
    rows: usize,
    cols: usize,
    data: Vec<C<T>>,
}

impl<T: Real> MatrixSeries<T> {
    pub(crate) fn from_raw(grid: TimeGrid<T>, rows: usize, cols: usize, data: Vec<C<T>>) -> Self {
        debug_assert_eq!(data.len(), grid.len() * rows * cols);
        Self {
            grid,
            rows,
            cols,
            data,
        }
    }

    pub fn from_matrices(grid: TimeGrid<T>, mats: &[CMatrix<T>]) -> Result<Self> {
        if mats.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} matrices for {} grid points",
                mats.len(),
                grid.len()
            )));
        }
        let (rows, cols) = (mats[0].rows(), mats[0].cols());
        let mut data = Vec::with_capacity(grid.len() * rows * cols);
        for m in mats {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Dimension("matrices of differing shapes".into()));
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self::from_raw(grid, rows, cols, data))
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    fn block(&self) -> usize {
        self.rows * self.cols
    }

    /// Raw row-major entries at time index `i`.
    pub fn slice_at(&self, i: usize) -> &[C<T>] {
        let m = self.block();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn at(&self, i: usize) -> CMatrix<T> {
        CMatrix::from_vec(self.rows, self.cols, self.slice_at(i).to_vec()).expect("consistent block")
    }

    #[inline]
    pub fn entry_at(&self, i: usize, r: usize, c: usize) -> C<T> {
        self.data[i * self.block() + r * self.cols + c]
    }

    /// Time series of a single entry.
    pub fn entry(&self, r: usize, c: usize) -> SampledFunction<T, C<T>> {
        let values = (0..self.len()).map(|i| self.entry_at(i, r, c)).collect();
        SampledFunction::new(self.grid, values).expect("series length matches grid")
    }

    /// Largest entry-wise deviation from another series.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_raw(
            self.grid,
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    /// Entry-wise largest modulus over all times.
    pub fn max_norm(&self) -> T {
        self.data.iter().map(|v| v.norm()).fold(T::zero(), |a, b| a.max(b))
    }
}

/// Solves `ẋ(t) = ∫₀ᵗ K(τ) x(t - τ) dτ`, `x(0) = x0`, where `x0` is a
/// `dim × cols` matrix (one column per initial vector).
///
/// The point-mass part of `K` acts locally and is propagated exactly with
/// `exp(h L)`; the memory integral uses the trapezoid rule on both the
/// convolution and the time step, which makes each step a small linear solve.
/// The scheme is second order in `h`.
pub fn solve_volterra_ide<T: Real>(kernel: &MemoryKernel<T>, x0: &CMatrix<T>) -> Result<MatrixSeries<T>> {
    let dim = kernel.dim;
    if x0.rows() != dim {
        return Err(Error::Dimension(format!(
            "initial value has {} rows, kernel dimension is {dim}",
            x0.rows()
        )));
    }
    let grid = kernel.grid;
    let h = grid.step();
    let cols = x0.cols();
    let m = dim * cols;
    let n = grid.len();

    let propagator = kernel.local.scale_real(h).expm();
    let k0 = kernel.regular_at(0);
    let implicit = (&CMatrix::identity(dim) - &k0.scale_real(h * h / T::lit(4.0))).inverse()?;
    let half_h = h * T::half();

    let mut x = Vec::with_capacity(n * m);
    x.extend_from_slice(x0.as_slice());
    let mut memory_prev = CMatrix::zeros(dim, cols);
    let mut history = vec![C::<T>::zero(); m];
    let mut recursive: Vec<Option<Vec<ModeHistory<T>>>> = kernel
        .terms
        .iter()
        .map(|t| t.modes.as_ref().map(|ms| ms.iter().map(|md| ModeHistory::new(md, h, m)).collect()))
        .collect();

    for i in 1..n {
        // Σ_l M_l [ Σ_{j=1}^{i-1} c_l(t_j) x_{i-j} + ½ c_l(t_i) x_0 ]
        let mut known = CMatrix::zeros(dim, cols);
        for (term, rec) in kernel.terms.iter().zip(recursive.iter_mut()) {
            history.iter_mut().for_each(|v| *v = C::zero());
            let c = &term.profile;
            match rec {
                Some(modes) => {
                    let last = &x[(i - 1) * m..i * m];
                    for mh in modes.iter_mut() {
                        if i > 1 {
                            mh.push(last);
                        }
                        mh.accumulate(&mut history);
                    }
                }
                None => {
                    for j in 1..i {
                        let cj = c[j];
                        if cj == T::zero() {
                            continue;
                        }
                        let xs = &x[(i - j) * m..(i - j + 1) * m];
                        for (acc, &v) in history.iter_mut().zip(xs) {
                            *acc += v * cj;
                        }
                    }
                }
            }
            let ci = c[i] * T::half();
            for (acc, &v) in history.iter_mut().zip(&x[..m]) {
                *acc += v * ci;
            }
            let hist = CMatrix::from_vec(dim, cols, history.clone())?;
            known = &known + &term.coupling.matmul(&hist);
        }

        let prev = CMatrix::from_vec(dim, cols, x[(i - 1) * m..i * m].to_vec())?;
        let carried = &prev + &memory_prev.scale_real(half_h);
        let rhs = &propagator.matmul(&carried) + &known.scale_real(h * half_h);
        let xi = implicit.matmul(&rhs);
        memory_prev = &k0.matmul(&xi).scale_real(half_h) + &known.scale_real(h);
        x.extend_from_slice(xi.as_slice());
    }
    Ok(MatrixSeries::from_raw(grid, dim, cols, x))
}

/// Solves the scalar equation `ẋ = ∫₀ᵗ k(τ) x(t-τ) dτ`, `x(0) = x0`.
pub fn solve_scalar_ide<T: Real>(
    kernel: &SampledFunction<T, C<T>>,
    x0: C<T>,
) -> Result<SampledFunction<T, C<T>>> {
    let grid = *kernel.grid();
    let mut mk = MemoryKernel::new(1, grid);
    mk.add_local(&CMatrix::from_vec(1, 1, vec![kernel.delta_weight()])?)?;
    let re = kernel.map(|v| v.re).with_delta(T::zero());
    let im = kernel.map(|v| v.im).with_delta(T::zero());
    mk.add_term(&re, CMatrix::from_vec(1, 1, vec![C::new(T::one(), T::zero())])?)?;
    mk.add_term(&im, CMatrix::from_vec(1, 1, vec![C::new(T::zero(), T::one())])?)?;
    let sol = solve_volterra_ide(&mk, &CMatrix::from_vec(1, 1, vec![x0])?)?;
    Ok(sol.entry(0, 0))
}

/// Deconvolves `f = k ∗ g` for the memory function `k`.
///
/// A point mass is present iff `f(0) > 1e-8`, with weight `f(0)/g(0)`. The
/// regular part follows by forward substitution on the trapezoid system,
/// with `k(0)` fixed from the one-sided derivative `f'(0) = k(0) g(0)`.
pub fn invert_memory<T: Real>(
    f: &SampledFunction<T>,
    g: &SampledFunction<T>,
) -> Result<SampledFunction<T>> {
    check_same_grid(f.grid(), g.grid())?;
    let grid = *f.grid();
    let h = grid.step();
    let (fv, gv) = (f.values(), g.values());
    let g0 = gv[0];
    if g0 == T::zero() {
        return Err(Error::Domain("g(0) = 0".into()));
    }
    let diag = h * T::half() * g0;
    if diag.abs() < T::min_positive_value() {
        return Err(Error::IllConditioned(format!("diagonal weight h/2·g(0) = {diag}")));
    }

    let weight = if fv[0] > T::lit(1e-8) { fv[0] / g0 } else { T::zero() };
    let ft: Vec<T> = fv.iter().zip(gv).map(|(&fi, &gi)| fi - weight * gi).collect();

    let n = ft.len();
    let mut k = vec![T::zero(); n];
    if n >= 3 {
        let slope = (T::lit(-3.0) * ft[0] + T::lit(4.0) * ft[1] - ft[2]) / (T::two() * h);
        k[0] = slope / g0;
    } else if n == 2 {
        k[0] = (ft[1] - ft[0]) / h / g0;
    }
    for i in 1..n {
        let mut s = ft[i] / h - T::half() * k[0] * gv[i];
        for j in 1..i {
            s -= k[j] * gv[i - j];
        }
        k[i] = s / (T::half() * g0);
    }
    Ok(SampledFunction::new(grid, k)?.with_delta(weight))
}

/// Trapezoid Laplace transform of a sampled function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceProbe<V> {
    pub value: V,
    /// Set when `e^{-u T} ≥ 1e-10` for the grid horizon `T`.
    pub truncated: bool,
}

/// `∫₀ᵀ x(τ) e^{-uτ} dτ` plus the point mass contribution `w`.
pub fn laplace_probe<T: Real, V: Sample<T>>(x: &SampledFunction<T, V>, u: T) -> Result<LaplaceProbe<V>> {
    if !(u > T::zero()) {
        return Err(Error::Domain(format!("Laplace variable must be positive, got {u}")));
    }
    let grid = x.grid();
    let h = grid.step();
    let n = grid.len();
    let mut acc = V::zero();
    for (i, &v) in x.values().iter().enumerate() {
        let w = if i == 0 || i == n - 1 { T::half() } else { T::one() };
        acc += v * (w * (-u * grid.t(i)).exp());
    }
    Ok(LaplaceProbe {
        value: acc * h + x.delta_weight(),
        truncated: (-u * grid.horizon()).exp() >= T::lit(1e-10),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(h: f64, horizon: f64) -> TimeGrid<f64> {
        TimeGrid::with_horizon(h, horizon).unwrap()
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(0.1, 0).is_err());
        let g = grid(1e-3, 10.0);
        assert_eq!(g.count(), 10_000);
        assert_abs_diff_eq!(g.horizon(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn convolving_constants_is_exact() {
        let g = grid(0.1, 5.0);
        let one = SampledFunction::constant(g, 1.0);
        let c = convolve(&one, &one).unwrap();
        for (i, t) in g.points().enumerate() {
            assert_abs_diff_eq!(c.at(i), t, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_mass_acts_as_identity() {
        let g = grid(0.05, 3.0);
        let lambda = 1.7;
        let a = SampledFunction::zeros(g).with_delta(lambda);
        let b = SampledFunction::from_fn(g, |t| (2.0 * t).sin() + t * t);
        let c = convolve(&a, &b).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(c.at(i), lambda * b.at(i), epsilon = 1e-14);
        }
    }

    #[test]
    fn convolution_of_exponentials() {
        // ∫₀¹ e^{-s} e^{-2(1-s)} ds = e^{-1} - e^{-2}
        let h = 1e-3;
        let g = grid(h, 1.0);
        let a = SampledFunction::from_fn(g, |t| (-t).exp());
        let b = SampledFunction::from_fn(g, |t| (-2.0 * t).exp());
        let c = convolve(&a, &b).unwrap();
        let exact = (-1.0f64).exp() - (-2.0f64).exp();
        assert!((c.at(g.count()) - exact).abs() < h * h);
        assert_abs_diff_eq!(c.at(g.count()), 0.232544, epsilon = 1e-6);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = SampledFunction::constant(grid(0.1, 1.0), 1.0);
        let b = SampledFunction::constant(grid(0.1, 2.0), 1.0);
        assert!(matches!(convolve(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn markov_kernel_gives_exponential_decay() {
        let g = grid(1e-2, 5.0);
        let k = SampledFunction::zeros(g).with_delta(C::new(-1.0, 0.0));
        let x = solve_scalar_ide(&k, C::new(1.0, 0.0)).unwrap();
        let err = x.max_error_against(|t| C::new((-t).exp(), 0.0));
        assert!(err < 1e-13, "error {err}");
    }

    #[test]
    fn zero_kernel_keeps_state() {
        let g = grid(0.1, 2.0);
        let mut k = MemoryKernel::new(2, g);
        k.add_term(&SampledFunction::zeros(g), CMatrix::identity(2)).unwrap();
        let x0 = CMatrix::from_real(2, 1, &[0.3, -2.0]).unwrap();
        let x = solve_volterra_ide(&k, &x0).unwrap();
        assert_eq!(x.at(g.count()), x0);
    }

    #[test]
    fn exponential_memory_matches_telegraph_solution() {
        // ẋ = -κ ∫ e^{-γτ} x(t-τ) dτ with γ = 1, κ = 3/16: x'' + x' + κx = 0,
        // x(0) = 1, x'(0) = 0, roots -1/4 and -3/4.
        let g = grid(1e-3, 20.0);
        let kappa = 0.1875;
        let k = SampledFunction::from_fn(g, |t| C::new(-kappa * (-t).exp(), 0.0));
        let x = solve_scalar_ide(&k, C::new(1.0, 0.0)).unwrap();
        let exact = |t: f64| 1.5 * (-0.25 * t).exp() - 0.5 * (-0.75 * t).exp();
        let err = x.max_error_against(|t| C::new(exact(t), 0.0));
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn second_order_convergence() {
        let kappa = 0.3;
        let run = |h: f64| {
            let g = grid(h, 10.0);
            let k = SampledFunction::from_fn(g, |t| C::new(-kappa * (-1.5 * t).exp(), 0.0));
            let x = solve_scalar_ide(&k, C::new(1.0, 0.0)).unwrap();
            // x'' + 1.5 x' + 0.3 x = 0
            let disc = (1.5f64 * 1.5 - 4.0 * kappa).sqrt();
            let (r1, r2) = ((-1.5 + disc) / 2.0, (-1.5 - disc) / 2.0);
            let (a, b) = (-r2 / (r1 - r2), r1 / (r1 - r2));
            x.max_error_against(|t| C::new(a * (r1 * t).exp() + b * (r2 * t).exp(), 0.0))
        };
        let ratio = run(4e-3) / run(2e-3);
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn matrix_kernel_from_entries() {
        // two decoupled scalar equations written as a diagonal kernel
        let g = grid(1e-2, 3.0);
        let a = SampledFunction::from_fn(g, |t| -0.5 * (-t).exp());
        let z = SampledFunction::zeros(g);
        let b = SampledFunction::zeros(g).with_delta(-2.0);
        let k = MemoryKernel::from_entries(&[vec![a.clone(), z.clone()], vec![z, b]]).unwrap();
        let x = solve_volterra_ide(&k, &CMatrix::identity(2)).unwrap();
        let scalar = solve_scalar_ide(&a.to_complex(), C::new(1.0, 0.0)).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(x.entry_at(i, 0, 0).re, scalar.at(i).re, epsilon = 1e-13);
            assert_abs_diff_eq!(x.entry_at(i, 1, 1).re, (-2.0 * g.t(i)).exp(), epsilon = 1e-12);
            assert_eq!(x.entry_at(i, 0, 1), C::new(0.0, 0.0));
        }
    }

    #[test]
    fn rejects_non_square_initial_rows() {
        let g = grid(0.1, 1.0);
        let k = MemoryKernel::<f64>::new(2, g);
        assert!(solve_volterra_ide(&k, &CMatrix::identity(3)).is_err());
    }

    #[test]
    fn invert_recovers_point_mass_of_exponential() {
        let g = grid(1e-3, 10.0);
        let lambda = 2.0;
        let f = SampledFunction::from_fn(g, |t| lambda * (-lambda * t).exp());
        let s = SampledFunction::from_fn(g, |t| (-lambda * t).exp());
        let k = invert_memory(&f, &s).unwrap();
        assert_abs_diff_eq!(k.delta_weight(), 2.0, epsilon = 1e-12);
        assert!(k.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn invert_is_inverse_of_convolution() {
        let g = grid(1e-3, 5.0);
        let k = SampledFunction::from_fn(g, |t| (3.0 * t).cos() * (-t).exp());
        let s = SampledFunction::from_fn(g, |t| 1.0 / (1.0 + t * t));
        let f = convolve(&k, &s).unwrap();
        let back = invert_memory(&f, &s).unwrap();
        let err = back.max_abs_diff(&k);
        assert!(err < 1e-5, "round-trip error {err}");
    }

    #[test]
    fn invert_rejects_vanishing_survival() {
        let g = grid(0.1, 1.0);
        let f = SampledFunction::zeros(g);
        let s = SampledFunction::zeros(g);
        assert!(matches!(invert_memory(&f, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn laplace_of_exponential() {
        let g = grid(1e-3, 30.0);
        let x = SampledFunction::from_fn(g, |t| (-t).exp());
        let p = laplace_probe(&x, 1.0).unwrap();
        assert!(!p.truncated);
        assert_abs_diff_eq!(p.value, 0.5, epsilon = 1e-6);
        let short = SampledFunction::from_fn(grid(1e-3, 2.0), |t| (-t).exp());
        assert!(laplace_probe(&short, 1.0).unwrap().truncated);
        assert!(laplace_probe(&x, 0.0).is_err());
    }

    fn damped_oscillation() -> MemoryFunction<f64> {
        // 0.7 t e^{-t} + e^{-1.5t} sin(0.9t) + point mass 0.3
        let poly = ExpPoly::zero()
            .with_term(C::new(0.7, 0.0), 1, C::new(-1.0, 0.0))
            .with_term(C::new(0.0, -1.0), 0, C::new(-1.5, 0.9));
        MemoryFunction::new(0.3, poly)
    }

    #[test]
    fn recursive_history_matches_direct_sums() {
        let g = grid(1e-2, 8.0);
        let k = damped_oscillation();
        let coupling = CMatrix::from_fn(2, 2, |r, c| C::new(-0.4 + 0.1 * r as f64, 0.2 * c as f64 - 0.1));
        let mut fast = MemoryKernel::new(2, g);
        fast.add_memory(&k, coupling.clone()).unwrap();
        let mut slow = MemoryKernel::new(2, g);
        slow.add_term(&k.sample(&g), coupling).unwrap();
        let x0 = CMatrix::identity(2);
        let a = solve_volterra_ide(&fast, &x0).unwrap();
        let b = solve_volterra_ide(&slow, &x0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn fast_convolution_matches_direct() {
        let g = grid(1e-2, 6.0);
        let k = damped_oscillation();
        let x = SampledFunction::from_fn(g, |t: f64| C::new((0.5 * t).cos(), t.sin() * 0.2)).with_delta(C::new(0.1, 0.0));
        let fast = convolve_memory(&k, &x);
        let slow = convolve(&k.sample(&g).to_complex(), &x).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
        assert_eq!(fast.delta_weight(), slow.delta_weight());
    }
}
