//! Classical semi-Markov processes: generalized master equation, Pauli
//! limit, Laplace-domain consistency and a Monte Carlo trajectory oracle.
//!
//! Matrices are indexed `[m][n]` for the transition `n → m`, so that
//! transition matrices are column-stochastic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::{Real, C};
use crate::volterra::{laplace_probe, solve_volterra_ide, MemoryKernel, SampledFunction, TimeGrid};
use crate::waiting_time::{MemoryFunction, WaitingTime};

/// Name of the generator used by [`simulate_trajectories`].
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha), stream per block";

const TRAJECTORY_BLOCK: usize = 4096;

/// Checks that `pi` is square, non-negative and column-stochastic.
pub fn validate_column_stochastic<T: Real>(field: &str, pi: &[Vec<T>]) -> Result<()> {
    let s = pi.len();
    if s == 0 {
        return Err(Error::invalid(field, "matrix is empty"));
    }
    for (m, row) in pi.iter().enumerate() {
        if row.len() != s {
            return Err(Error::invalid(field, format!("row {m} has {} entries, expected {s}", row.len())));
        }
        if let Some(n) = row.iter().position(|&p| p < T::zero() || !p.is_finite()) {
            return Err(Error::invalid(field, format!("entry ({m},{n}) is negative or not finite")));
        }
    }
    for n in 0..s {
        let total: T = pi.iter().map(|row| row[n]).sum();
        if (total - T::one()).abs() > T::lit(1e-12) {
            return Err(Error::invalid(field, format!("column {n} sums to {total}, expected 1")));
        }
    }
    Ok(())
}

/// Factorized semi-Markov process `q_mn(τ) = π_mn f_n(τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiMarkovSpec<T: Real> {
    pi: Vec<Vec<T>>,
    waiting: Vec<WaitingTime<T>>,
}

impl<T: Real> SemiMarkovSpec<T> {
    pub fn new(pi: Vec<Vec<T>>, waiting: Vec<WaitingTime<T>>) -> Result<Self> {
        validate_column_stochastic("transition matrix", &pi)?;
        if waiting.len() != pi.len() {
            return Err(Error::invalid(
                "waiting times",
                format!("{} given for {} states", waiting.len(), pi.len()),
            ));
        }
        Ok(Self { pi, waiting })
    }

    /// Semi-Markov form of a Pauli master equation: `π_mn = Γ_mn / λ_n`
    /// with exponential waiting times of rate `λ_n`.
    pub fn from_markov(spec: &MarkovSpec<T>) -> Result<Self> {
        let s = spec.states();
        let mut pi = vec![vec![T::zero(); s]; s];
        let mut waiting = Vec::with_capacity(s);
        for n in 0..s {
            let rate = spec.exit_rate(n);
            if rate == T::zero() {
                return Err(Error::invalid(
                    "rate matrix",
                    format!("state {n} is absorbing and has no waiting-time distribution"),
                ));
            }
            for (m, row) in pi.iter_mut().enumerate() {
                row[n] = spec.gamma[m][n] / rate;
            }
            waiting.push(WaitingTime::exponential(rate)?);
        }
        Self::new(pi, waiting)
    }

    pub fn states(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[Vec<T>] {
        &self.pi
    }

    pub fn waiting_time(&self, n: usize) -> &WaitingTime<T> {
        &self.waiting[n]
    }

    /// Memory functions `k_n` sampled on `grid`.
    pub fn memory_on(&self, grid: &TimeGrid<T>) -> Result<Vec<SampledFunction<T>>> {
        self.waiting.iter().map(|w| w.memory_on(grid)).collect()
    }
}

/// Pauli master equation with rates `Γ_mn` for `n → m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSpec<T: Real> {
    gamma: Vec<Vec<T>>,
}

impl<T: Real> MarkovSpec<T> {
    pub fn new(gamma: Vec<Vec<T>>) -> Result<Self> {
        let s = gamma.len();
        if s == 0 || gamma.iter().any(|row| row.len() != s) {
            return Err(Error::invalid("rate matrix", "must be square and non-empty"));
        }
        if gamma.iter().flatten().any(|&g| g < T::zero() || !g.is_finite()) {
            return Err(Error::invalid("rate matrix", "rates must be non-negative"));
        }
        Ok(Self { gamma })
    }

    pub fn states(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[Vec<T>] {
        &self.gamma
    }

    /// `λ_n = Σ_m Γ_mn`.
    pub fn exit_rate(&self, n: usize) -> T {
        self.gamma.iter().map(|row| row[n]).sum()
    }

    /// Generator `Γ - diag(λ)`.
    pub fn generator(&self) -> CMatrix<T> {
        let s = self.states();
        CMatrix::from_fn(s, s, |m, n| {
            let mut v = self.gamma[m][n];
            if m == n {
                v -= self.exit_rate(n);
            }
            C::new(v, T::zero())
        })
    }
}

/// Conditional transition probabilities `T_mn(t)` on a grid.
#[derive(Debug, Clone)]
pub struct PropagationResult<T: Real> {
    grid: TimeGrid<T>,
    states: usize,
    data: Vec<T>,
    occupations: Option<Vec<Vec<T>>>,
    conservation_drift: T,
}

/// Tolerance on `|Σ_m T_mn - 1|` above which [`PropagationResult::conserves_probability`] fails.
pub const CONSERVATION_TOL: f64 = 1e-6;

impl<T: Real> PropagationResult<T> {
    fn from_series(series: &crate::volterra::MatrixSeries<T>) -> Self {
        let s = series.rows();
        let mut data = Vec::with_capacity(series.len() * s * s);
        let mut drift = T::zero();
        for i in 0..series.len() {
            let block = series.slice_at(i);
            data.extend(block.iter().map(|v| v.re));
            for n in 0..s {
                let total: T = (0..s).map(|m| block[m * s + n].re).sum();
                drift = drift.max((total - T::one()).abs());
            }
        }
        Self {
            grid: *series.grid(),
            states: s,
            data,
            occupations: None,
            conservation_drift: drift,
        }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// `T_mn(t_i)`.
    #[inline]
    pub fn transition(&self, i: usize, m: usize, n: usize) -> T {
        let s = self.states;
        self.data[i * s * s + m * s + n]
    }

    pub fn transition_series(&self, m: usize, n: usize) -> SampledFunction<T> {
        let values = (0..self.grid.len()).map(|i| self.transition(i, m, n)).collect();
        SampledFunction::new(self.grid, values).expect("series matches grid")
    }

    /// Occupations `P(t_i) = T(t_i) P0` if an initial vector was given.
    pub fn occupations(&self) -> Option<&[Vec<T>]> {
        self.occupations.as_deref()
    }

    /// Propagates an initial occupation vector.
    pub fn propagate(&self, p0: &[T]) -> Vec<Vec<T>> {
        let s = self.states;
        (0..self.grid.len())
            .map(|i| (0..s).map(|m| (0..s).map(|n| self.transition(i, m, n) * p0[n]).sum()).collect())
            .collect()
    }

    /// Largest `|Σ_m T_mn(t) - 1|` over the grid.
    pub fn conservation_drift(&self) -> T {
        self.conservation_drift
    }

    pub fn conserves_probability(&self) -> bool {
        self.conservation_drift <= T::lit(CONSERVATION_TOL)
    }

    /// Smallest entry of `T` over the grid.
    pub fn min_entry(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }
}

/// Column `k` of `π - 1`, the coupling of the memory function `k_k`.
fn gme_coupling<T: Real>(pi: &[Vec<T>], k: usize) -> CMatrix<T> {
    let s = pi.len();
    CMatrix::from_fn(s, s, |m, n| {
        if n != k {
            return C::new(T::zero(), T::zero());
        }
        let v = if m == k { pi[m][k] - T::one() } else { pi[m][k] };
        C::new(v, T::zero())
    })
}

fn solve_gme_kernel<T: Real>(kernel: &MemoryKernel<T>) -> Result<PropagationResult<T>> {
    let series = solve_volterra_ide(kernel, &CMatrix::identity(kernel.dim()))?;
    Ok(PropagationResult::from_series(&series))
}

/// Solves the generalized master equation
/// `Ṫ_mn = ∫₀ᵗ Σ_k [W_mk(τ) - δ_mk Σ_j W_jk(τ)] T_kn(t - τ) dτ`
/// with `W_mk = π_mk k_k` and `T(0) = 1`. Memory functions without a
/// closed form are obtained by numerical deconvolution.
pub fn solve_gme<T: Real>(spec: &SemiMarkovSpec<T>, grid: &TimeGrid<T>) -> Result<PropagationResult<T>> {
    let mut kernel = MemoryKernel::new(spec.states(), *grid);
    for (k, w) in spec.waiting.iter().enumerate() {
        let coupling = gme_coupling(spec.pi(), k);
        match w.memory_function() {
            Ok(mf) => kernel.add_memory(&mf, coupling)?,
            Err(Error::NoClosedForm(_)) => kernel.add_term(&w.memory_on(grid)?, coupling)?,
            Err(e) => return Err(e),
        }
    }
    solve_gme_kernel(&kernel)
}

/// Generalized master equation for closed-form memory functions `k_n`,
/// which need not come from a normalized waiting time.
pub fn solve_gme_closed<T: Real>(
    pi: &[Vec<T>],
    memory: &[MemoryFunction<T>],
    grid: &TimeGrid<T>,
) -> Result<PropagationResult<T>> {
    validate_column_stochastic("transition matrix", pi)?;
    if memory.len() != pi.len() {
        return Err(Error::Dimension(format!("{} memory functions for {} states", memory.len(), pi.len())));
    }
    let mut kernel = MemoryKernel::new(pi.len(), *grid);
    for (k, mf) in memory.iter().enumerate() {
        kernel.add_memory(mf, gme_coupling(pi, k))?;
    }
    solve_gme_kernel(&kernel)
}

/// Generalized master equation for sampled memory functions.
pub fn solve_gme_with_memory<T: Real>(
    pi: &[Vec<T>],
    memory: &[SampledFunction<T>],
) -> Result<PropagationResult<T>> {
    validate_column_stochastic("transition matrix", pi)?;
    let s = pi.len();
    if memory.len() != s {
        return Err(Error::Dimension(format!("{} memory functions for {s} states", memory.len())));
    }
    let mut kernel = MemoryKernel::new(s, *memory[0].grid());
    for (k, profile) in memory.iter().enumerate() {
        kernel.add_term(profile, gme_coupling(pi, k))?;
    }
    solve_gme_kernel(&kernel)
}

/// Solves the Pauli master equation `Ṗ = (Γ - diag λ) P`.
pub fn pauli_evolve<T: Real>(spec: &MarkovSpec<T>, p0: &[T], grid: &TimeGrid<T>) -> Result<PropagationResult<T>> {
    let s = spec.states();
    if p0.len() != s {
        return Err(Error::invalid("initial occupations", format!("expected {s} entries")));
    }
    if p0.iter().any(|&p| p < T::zero()) {
        return Err(Error::invalid("initial occupations", "entries must be non-negative"));
    }
    let total: T = p0.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-12) {
        return Err(Error::invalid("initial occupations", format!("sum to {total}, expected 1")));
    }
    let mut kernel = MemoryKernel::new(s, *grid);
    kernel.add_local(&spec.generator())?;
    let series = solve_volterra_ide(&kernel, &CMatrix::identity(s))?;
    let mut result = PropagationResult::from_series(&series);
    result.occupations = Some(result.propagate(p0));
    Ok(result)
}

/// Element-wise residual of `Ŵ_mn(u) ĝ_n(u) = q̂_mn(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceResidual<T> {
    pub residual: Vec<Vec<T>>,
    pub max: T,
    /// Set when the grid horizon is too short for `e^{-uT} < 1e-10`.
    pub truncated: bool,
}

/// Laplace-domain consistency check of the memory functions of `spec`,
/// with every transform taken numerically on `grid`.
pub fn laplace_consistency<T: Real>(
    spec: &SemiMarkovSpec<T>,
    u: T,
    grid: &TimeGrid<T>,
) -> Result<LaplaceResidual<T>> {
    let s = spec.states();
    let mut residual = vec![vec![T::zero(); s]; s];
    let mut truncated = false;
    let mut max = T::zero();
    for n in 0..s {
        let w = spec.waiting_time(n);
        let k = laplace_probe(&w.memory_on(grid)?, u)?;
        let g = laplace_probe(&w.survival_on(grid), u)?;
        let f = laplace_probe(&w.density_on(grid), u)?;
        truncated |= k.truncated || g.truncated || f.truncated;
        for m in 0..s {
            let p = spec.pi()[m][n];
            let r = (p * k.value * g.value - p * f.value).abs();
            residual[m][n] = r;
            max = max.max(r);
        }
    }
    Ok(LaplaceResidual { residual, max, truncated })
}

/// Empirical occupation probabilities from simulated trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate<T> {
    pub times: Vec<T>,
    /// `[time][state]`.
    pub mean: Vec<Vec<T>>,
    /// Binomial standard errors, `[time][state]`.
    pub std_err: Vec<Vec<T>>,
    pub trajectories: usize,
    pub seed: u64,
    pub rng: &'static str,
}

/// Simulates `n_traj` renewal trajectories started in `n0` and records the
/// occupied state at each of `times` (which must be sorted and non-negative).
///
/// Trajectories are split into fixed blocks, each driven by its own stream
/// of a generator seeded with `seed`, so the result does not depend on the
/// number of worker threads.
pub fn simulate_trajectories<T: Real>(
    spec: &SemiMarkovSpec<T>,
    n0: usize,
    times: &[T],
    n_traj: usize,
    seed: u64,
) -> Result<MonteCarloEstimate<T>> {
    let s = spec.states();
    if n_traj == 0 {
        return Err(Error::invalid("trajectory count", "must be positive"));
    }
    if n0 >= s {
        return Err(Error::invalid("initial state", format!("{n0} out of range for {s} states")));
    }
    if times.iter().any(|&t| t < T::zero() || !t.is_finite()) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("sample times", "must be finite, non-negative and sorted"));
    }

    let blocks = n_traj.div_ceil(TRAJECTORY_BLOCK);
    let counts = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let size = TRAJECTORY_BLOCK.min(n_traj - b * TRAJECTORY_BLOCK);
            let mut counts = vec![0u64; times.len() * s];
            for _ in 0..size {
                run_trajectory(spec, n0, times, &mut rng, &mut counts);
            }
            counts
        })
        .reduce(
            || vec![0u64; times.len() * s],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    let total = T::from_usize_lossy(n_traj);
    let mut mean = Vec::with_capacity(times.len());
    let mut std_err = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let p: Vec<T> = (0..s).map(|m| T::from_u64(counts[i * s + m]).unwrap() / total).collect();
        std_err.push(p.iter().map(|&q| (q * (T::one() - q) / total).sqrt()).collect());
        mean.push(p);
    }
    Ok(MonteCarloEstimate {
        times: times.to_vec(),
        mean,
        std_err,
        trajectories: n_traj,
        seed,
        rng: RNG_ALGORITHM,
    })
}

fn run_trajectory<T: Real, R: Rng>(spec: &SemiMarkovSpec<T>, n0: usize, times: &[T], rng: &mut R, counts: &mut [u64]) {
    let s = spec.states();
    let mut state = n0;
    let mut clock = T::zero();
    let mut next = 0;
    while next < times.len() {
        let leave = clock + spec.waiting_time(state).sample(rng);
        while next < times.len() && times[next] < leave {
            counts[next * s + state] += 1;
            next += 1;
        }
        clock = leave;
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        let mut target = state;
        for m in 0..s {
            let p = spec.pi()[m][state];
            acc += p;
            if p > T::zero() {
                target = m;
                if u < acc {
                    break;
                }
            }
        }
        state = target;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flip() -> Vec<Vec<f64>> {
        vec![vec![0.0, 1.0], vec![1.0, 0.0]]
    }

    #[test]
    fn validates_transition_matrix() {
        let w = WaitingTime::exponential(1.0).unwrap();
        assert!(SemiMarkovSpec::new(vec![vec![0.5, 1.0], vec![0.4, 0.0]], vec![w.clone(), w.clone()]).is_err());
        assert!(SemiMarkovSpec::new(vec![vec![1.5, 1.0], vec![-0.5, 0.0]], vec![w.clone(), w.clone()]).is_err());
        assert!(SemiMarkovSpec::new(flip(), vec![w.clone()]).is_err());
        assert!(SemiMarkovSpec::new(flip(), vec![w.clone(), w]).is_ok());
    }

    #[test]
    fn markov_gme_matches_matrix_exponential() {
        let markov = MarkovSpec::new(vec![vec![0.0, 0.7], vec![1.3, 0.0]]).unwrap();
        let spec = SemiMarkovSpec::from_markov(&markov).unwrap();
        let grid = TimeGrid::with_horizon(1e-3, 5.0).unwrap();
        let gme = solve_gme(&spec, &grid).unwrap();
        let gen = markov.generator();
        for i in (0..grid.len()).step_by(250) {
            let exact = gen.scale_real(grid.t(i)).expm();
            for m in 0..2 {
                for n in 0..2 {
                    assert_abs_diff_eq!(gme.transition(i, m, n), exact[(m, n)].re, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_at_time_zero() {
        let spec = SemiMarkovSpec::new(
            flip(),
            vec![
                WaitingTime::special_erlang(1.0, 3).unwrap(),
                WaitingTime::multi_exponential(vec![0.5, 0.5], vec![1.0, 3.0]).unwrap(),
            ],
        )
        .unwrap();
        let res = solve_gme(&spec, &TimeGrid::new(1e-2, 10).unwrap()).unwrap();
        for m in 0..2 {
            for n in 0..2 {
                assert_eq!(res.transition(0, m, n), if m == n { 1.0 } else { 0.0 });
            }
        }
    }

    /// Closed form of the telegraph solution for exponential memory
    /// `k_±(τ) = κ_± e^{-γτ}` with `d² = γ² - 4(κ₊+κ₋)`.
    fn telegraph(kp: f64, km: f64, gamma: f64, t: f64) -> f64 {
        let d2 = gamma * gamma - 4.0 * (kp + km);
        let (ch, shc) = if d2 >= 0.0 {
            let x = d2.sqrt() * t / 2.0;
            (x.cosh(), if x == 0.0 { 1.0 } else { x.sinh() / x })
        } else {
            let x = (-d2).sqrt() * t / 2.0;
            (x.cos(), if x == 0.0 { 1.0 } else { x.sin() / x })
        };
        let g = (-gamma * t / 2.0).exp() * (ch + gamma * t / 2.0 * shc);
        km / (kp + km) + kp / (kp + km) * g
    }

    #[test]
    fn exponential_memory_matches_telegraph_solution() {
        let (gamma, kp, km) = (1.0, 0.1875, 0.12);
        let grid = TimeGrid::with_horizon(1e-3, 20.0).unwrap();
        let memory = [kp, km].map(|k| SampledFunction::from_fn(grid, |t: f64| k * (-gamma * t).exp()));
        let res = solve_gme_with_memory(&flip(), &memory).unwrap();
        let err_pp = res.transition_series(0, 0).max_error_against(|t| telegraph(kp, km, gamma, t));
        let err_mm = res.transition_series(1, 1).max_error_against(|t| telegraph(km, kp, gamma, t));
        assert!(err_pp <= 1e-6, "T++ error {err_pp}");
        assert!(err_mm <= 1e-6, "T-- error {err_mm}");
        assert!(res.conserves_probability());

        let closed = [kp, km].map(|k| MemoryFunction::exponential(k, gamma));
        let fast = solve_gme_closed(&flip(), &closed, &grid).unwrap();
        for i in (0..grid.len()).step_by(97) {
            assert_abs_diff_eq!(fast.transition(i, 0, 0), res.transition(i, 0, 0), epsilon = 1e-12);
        }
    }

    #[test]
    fn pauli_two_state_symmetric() {
        let lambda: f64 = 0.8;
        let spec = MarkovSpec::new(vec![vec![0.0, lambda], vec![lambda, 0.0]]).unwrap();
        let grid = TimeGrid::with_horizon(1e-2, 5.0).unwrap();
        let res = pauli_evolve(&spec, &[1.0, 0.0], &grid).unwrap();
        let p = res.occupations().unwrap();
        for (i, row) in p.iter().enumerate() {
            let t = grid.t(i);
            assert_abs_diff_eq!(row[0], (1.0 + (-2.0 * lambda * t).exp()) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pauli_trivial_cases() {
        let grid = TimeGrid::with_horizon(1e-2, 3.0).unwrap();
        let frozen = pauli_evolve(&MarkovSpec::new(vec![vec![0.0; 3]; 3]).unwrap(), &[0.2, 0.3, 0.5], &grid).unwrap();
        let uniform = [1.0 / 3.0; 3];
        let sym = MarkovSpec::new(vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.5], vec![2.0, 0.5, 0.0]]).unwrap();
        let stationary = pauli_evolve(&sym, &uniform, &grid).unwrap();
        for i in 0..grid.len() {
            let a = &frozen.occupations().unwrap()[i];
            assert_abs_diff_eq!(a[0], 0.2, epsilon = 1e-14);
            assert_abs_diff_eq!(a[2], 0.5, epsilon = 1e-14);
            for &p in &stationary.occupations().unwrap()[i] {
                assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
        assert!(pauli_evolve(&sym, &[0.5, 0.5, 0.5], &grid).is_err());
    }

    #[test]
    fn return_probability_exceeds_survival() {
        let spec = SemiMarkovSpec::new(
            vec![vec![0.0, 0.5, 0.3], vec![0.6, 0.0, 0.7], vec![0.4, 0.5, 0.0]],
            vec![
                WaitingTime::special_erlang(1.0, 3).unwrap(),
                WaitingTime::multi_exponential(vec![0.3, 0.7], vec![0.5, 4.0]).unwrap(),
                WaitingTime::generalized_erlang(vec![1.0, 2.5]).unwrap(),
            ],
        )
        .unwrap();
        let grid = TimeGrid::with_horizon(1e-3, 10.0).unwrap();
        let res = solve_gme(&spec, &grid).unwrap();
        assert!(res.conserves_probability(), "drift {}", res.conservation_drift());
        assert!(res.min_entry() >= -1e-8);
        for n in 0..3 {
            let g = spec.waiting_time(n).survival_on(&grid);
            for i in 0..grid.len() {
                assert!(res.transition(i, n, n) >= g.at(i) - 1e-8);
            }
        }
    }

    #[test]
    fn one_way_decay_equals_survival() {
        // state 1 absorbs through a self-loop, so state 0 is never revisited
        let pi = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let spec = SemiMarkovSpec::new(
            pi,
            vec![WaitingTime::special_erlang(1.2, 2).unwrap(), WaitingTime::exponential(1.0).unwrap()],
        )
        .unwrap();
        let grid = TimeGrid::with_horizon(1e-3, 10.0).unwrap();
        let res = solve_gme(&spec, &grid).unwrap();
        let g = spec.waiting_time(0).survival_on(&grid);
        assert!(res.transition_series(0, 0).max_abs_diff(&g) < 1e-6);
        assert!(res.transition_series(1, 1).max_error_against(|_| 1.0) < 1e-12);
    }

    #[test]
    fn laplace_consistency_examples() {
        let grid = TimeGrid::with_horizon(1e-3, 30.0).unwrap();
        let markov = MarkovSpec::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let spec = SemiMarkovSpec::from_markov(&markov).unwrap();
        let r = laplace_consistency(&spec, 1.0, &grid).unwrap();
        assert!(!r.truncated);
        assert!(r.max <= 1e-4, "{}", r.max);
        // Markov memory transforms to the constant rate
        let k = laplace_probe(&spec.waiting_time(1).memory_on(&grid).unwrap(), 1.0).unwrap();
        assert_abs_diff_eq!(spec.pi()[0][1] * k.value, 2.0, epsilon = 1e-12);

        let erlang = SemiMarkovSpec::new(
            flip(),
            vec![WaitingTime::special_erlang(1.0, 3).unwrap(), WaitingTime::special_erlang(2.0, 3).unwrap()],
        )
        .unwrap();
        assert!(laplace_consistency(&erlang, 2.0, &grid).unwrap().max <= 1e-4);

        let absorbing = SemiMarkovSpec::new(
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![WaitingTime::exponential(1.0).unwrap(), WaitingTime::exponential(1.0).unwrap()],
        )
        .unwrap();
        let r = laplace_consistency(&absorbing, 1.0, &grid).unwrap();
        assert_eq!(r.residual[0][1], 0.0);
    }

    #[test]
    fn monte_carlo_rejects_empty_runs() {
        let spec = SemiMarkovSpec::from_markov(&MarkovSpec::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!(simulate_trajectories(&spec, 0, &[1.0], 0, 1).is_err());
        assert!(simulate_trajectories(&spec, 2, &[1.0], 10, 1).is_err());
        assert!(simulate_trajectories(&spec, 0, &[2.0, 1.0], 10, 1).is_err());
    }

    #[test]
    fn monte_carlo_matches_pauli() {
        let lambda: f64 = 1.0;
        let markov = MarkovSpec::new(vec![vec![0.0, lambda], vec![lambda, 0.0]]).unwrap();
        let spec = SemiMarkovSpec::from_markov(&markov).unwrap();
        let times: Vec<f64> = (0..10).map(|i| 0.25 * i as f64).collect();
        let mc = simulate_trajectories(&spec, 0, &times, 100_000, 7).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let exact = (1.0 + (-2.0 * lambda * t).exp()) / 2.0;
            assert!((mc.mean[i][0] - exact).abs() <= 3.0 * mc.std_err[i][0] + 1e-12, "t={t}");
        }
        let again = simulate_trajectories(&spec, 0, &times, 100_000, 7).unwrap();
        assert_eq!(mc, again);
    }

    #[test]
    fn monte_carlo_independent_of_thread_count() {
        let spec = SemiMarkovSpec::new(
            flip(),
            vec![WaitingTime::special_erlang(1.0, 3).unwrap(), WaitingTime::special_erlang(1.0, 3).unwrap()],
        )
        .unwrap();
        let times = [0.5, 1.0, 4.0];
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| simulate_trajectories(&spec, 0, &times, 20_000, 3).unwrap());
        let multi = simulate_trajectories(&spec, 0, &times, 20_000, 3).unwrap();
        assert_eq!(single, multi);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn gme_is_stochastic(
            a in 0.0f64..1.0, b in 0.0f64..1.0,
            l1 in 0.3f64..3.0, l2 in 0.3f64..3.0, order in 1u32..4,
        ) {
            let pi = vec![vec![0.0, a, 1.0], vec![1.0 - b, 0.0, 0.0], vec![b, 1.0 - a, 0.0]];
            let spec = SemiMarkovSpec::new(pi, vec![
                WaitingTime::special_erlang(l1, order).unwrap(),
                WaitingTime::exponential(l2).unwrap(),
                WaitingTime::multi_exponential(vec![0.5, 0.5], vec![l1, l2 + 0.1]).unwrap(),
            ]).unwrap();
            let grid = TimeGrid::with_horizon(1e-2, 5.0).unwrap();
            let res = solve_gme(&spec, &grid).unwrap();
            prop_assert!(res.conservation_drift() < 1e-6);
            prop_assert!(res.min_entry() > -1e-8);
        }
    }
}
