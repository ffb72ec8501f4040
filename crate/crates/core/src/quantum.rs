//! Quantum master equations with memory kernel
//! `𝒦(τ)ρ = -i[H(τ), ρ] + Σ_n k_n(τ) (B_n ρ - ½{P_n, ρ})`
//! with `H(τ) = Σ ε_n(τ) P_n` diagonal in a fixed basis and completely
//! positive jump maps `B_n`.
//!
//! Superoperators act on row-major vectorized density matrices, so that
//! `vec(A ρ B) = (A ⊗ Bᵀ) vec(ρ)` and index `n·d + m` holds `ρ_nm`.

use rayon::prelude::*;

use crate::classical::{solve_gme_closed, validate_column_stochastic, PropagationResult};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::{Real, C};
use crate::twolevel::TwoLevelParams;
use crate::volterra::{convolve_memory, solve_volterra_ide, MatrixSeries, MemoryKernel, TimeGrid};
use crate::waiting_time::MemoryFunction;

pub const DEFAULT_MAX_DIM: usize = 32;

/// Relative PSD tolerance: a Hermitian matrix passes when its smallest
/// eigenvalue is at least `-PSD_REL_TOL · max|entry|`.
pub const PSD_REL_TOL: f64 = 1e-8;

/// Tolerance for trace and Hermiticity drift of a propagator.
pub const DRIFT_TOL: f64 = 1e-6;

fn cz<T: Real>() -> C<T> {
    C::new(T::zero(), T::zero())
}

fn cr<T: Real>(v: T) -> C<T> {
    C::new(v, T::zero())
}

/// Smallest eigenvalue of a Hermitian matrix and the PSD verdict.
pub fn psd_check<T: Real>(m: &CMatrix<T>) -> (T, bool) {
    let min = m.min_hermitian_eigenvalue();
    (min, min >= -T::lit(PSD_REL_TOL) * m.max_norm())
}

/// Density matrix `ρ`: Hermitian, unit trace, positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    rho: CMatrix<T>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(rho: CMatrix<T>) -> Result<Self> {
        if !rho.is_square() {
            return Err(Error::Dimension("density matrix must be square".into()));
        }
        if rho.hermiticity_defect() > T::lit(1e-12) {
            return Err(Error::invalid("density matrix", "not Hermitian"));
        }
        let tr = rho.trace();
        if (tr.re - T::one()).abs() > T::lit(1e-12) || tr.im.abs() > T::lit(1e-12) {
            return Err(Error::invalid("density matrix", format!("trace {tr} is not 1")));
        }
        if rho.min_hermitian_eigenvalue() < T::lit(-1e-10) {
            return Err(Error::invalid("density matrix", "not positive semidefinite"));
        }
        Ok(Self { rho })
    }

    /// `|n⟩⟨n|`.
    pub fn basis(dim: usize, n: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::Dimension(format!("level {n} out of range for dimension {dim}")));
        }
        Self::new(CMatrix::unit(dim, n, n))
    }

    /// `|ψ⟩⟨ψ|` for a normalized `ψ`.
    pub fn pure(psi: &[C<T>]) -> Result<Self> {
        let d = psi.len();
        Self::new(CMatrix::from_fn(d, d, |r, c| psi[r] * psi[c].conj()))
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            rho: CMatrix::identity(dim).scale_real(T::one() / T::from_usize_lossy(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.rows()
    }

    pub fn matrix(&self) -> &CMatrix<T> {
        &self.rho
    }
}

/// Applies a superoperator to a matrix.
pub fn apply_superoperator<T: Real>(v: &CMatrix<T>, rho: &CMatrix<T>) -> CMatrix<T> {
    let d = rho.rows();
    CMatrix::from_vec(d, d, v.apply(rho.as_slice())).expect("superoperator matches state dimension")
}

/// Superoperator of `ρ ↦ A ρ B`.
pub fn sandwich<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> CMatrix<T> {
    a.kron(&b.transpose())
}

/// Jump structure of the kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpMaps<T: Real> {
    /// `B_n ρ = Σ_m π_mn |m⟩⟨n|ρ|n⟩⟨m|` with column-stochastic `π`.
    Lattice(Vec<Vec<T>>),
    /// `B_n ρ = Σ_α K_α ρ K_α†` with `Σ_α K_α†K_α = |n⟩⟨n|`.
    Kraus(Vec<Vec<CMatrix<T>>>),
}

/// Kernel of the class `-i[H(τ),·] + Σ k_n(τ)(B_n - ½{P_n,·})`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumKernelSpec<T: Real> {
    dim: usize,
    energies: Vec<MemoryFunction<T>>,
    memory: Vec<MemoryFunction<T>>,
    jumps: JumpMaps<T>,
}

impl<T: Real> QuantumKernelSpec<T> {
    pub fn new(energies: Vec<MemoryFunction<T>>, memory: Vec<MemoryFunction<T>>, jumps: JumpMaps<T>) -> Result<Self> {
        Self::with_max_dim(energies, memory, jumps, DEFAULT_MAX_DIM)
    }

    pub fn with_max_dim(
        energies: Vec<MemoryFunction<T>>,
        memory: Vec<MemoryFunction<T>>,
        jumps: JumpMaps<T>,
        max_dim: usize,
    ) -> Result<Self> {
        let dim = memory.len();
        if dim == 0 {
            return Err(Error::invalid("memory", "at least one level required"));
        }
        if dim > max_dim {
            return Err(Error::Dimension(format!("dimension {dim} exceeds the limit {max_dim}")));
        }
        if energies.len() != dim {
            return Err(Error::invalid("energies", format!("{} given for {dim} levels", energies.len())));
        }
        match &jumps {
            JumpMaps::Lattice(pi) => {
                validate_column_stochastic("jump probabilities", pi)?;
                if pi.len() != dim {
                    return Err(Error::invalid("jump probabilities", format!("expected {dim}x{dim}")));
                }
            }
            JumpMaps::Kraus(maps) => {
                if maps.len() != dim {
                    return Err(Error::invalid("jump maps", format!("{} given for {dim} levels", maps.len())));
                }
                for (n, ops) in maps.iter().enumerate() {
                    let mut sum = CMatrix::zeros(dim, dim);
                    for k in ops {
                        if k.rows() != dim || k.cols() != dim {
                            return Err(Error::invalid(
                                "jump maps",
                                format!("Kraus operator of level {n} is not {dim}x{dim}"),
                            ));
                        }
                        sum = &sum + &k.adjoint().matmul(k);
                    }
                    if sum.max_abs_diff(&CMatrix::unit(dim, n, n)) > T::lit(1e-10) {
                        return Err(Error::invalid(
                            "jump maps",
                            format!("Kraus operators of level {n} do not satisfy Σ K†K = |{n}⟩⟨{n}|"),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            dim,
            energies,
            memory,
            jumps,
        })
    }

    /// Lattice kernel without Hamiltonian part.
    pub fn lattice(pi: Vec<Vec<T>>, memory: Vec<MemoryFunction<T>>) -> Result<Self> {
        let energies = vec![MemoryFunction::zero(); memory.len()];
        Self::new(energies, memory, JumpMaps::Lattice(pi))
    }

    /// Two-level kernel with `k_±(τ) = κ_± e^{-γτ}` and jumps `|±⟩ → |∓⟩`.
    /// Level `+` has index 0.
    pub fn two_level(p: &TwoLevelParams<T>) -> Result<Self> {
        let memory = vec![
            MemoryFunction::exponential(p.kappa_plus, p.gamma),
            MemoryFunction::exponential(p.kappa_minus, p.gamma),
        ];
        let pi = vec![vec![T::zero(), T::one()], vec![T::one(), T::zero()]];
        Self::lattice(pi, memory)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn energies(&self) -> &[MemoryFunction<T>] {
        &self.energies
    }

    pub fn memory(&self) -> &[MemoryFunction<T>] {
        &self.memory
    }

    pub fn jumps(&self) -> &JumpMaps<T> {
        &self.jumps
    }

    pub fn pi(&self) -> Option<&[Vec<T>]> {
        match &self.jumps {
            JumpMaps::Lattice(pi) => Some(pi),
            JumpMaps::Kraus(_) => None,
        }
    }

    /// Kraus operators of `B_n`.
    pub fn kraus(&self, n: usize) -> Vec<CMatrix<T>> {
        match &self.jumps {
            JumpMaps::Kraus(maps) => maps[n].clone(),
            JumpMaps::Lattice(pi) => (0..self.dim)
                .filter(|&m| pi[m][n] > T::zero())
                .map(|m| CMatrix::unit(self.dim, m, n).scale_real(pi[m][n].sqrt()))
                .collect(),
        }
    }

    /// True when every memory and energy function is a pure point mass.
    pub fn is_markovian(&self) -> bool {
        self.memory.iter().chain(&self.energies).all(|k| k.is_local())
    }

    /// Whether every `k_n` is non-negative on the grid.
    pub fn memory_nonnegative_on(&self, grid: &TimeGrid<T>) -> bool {
        self.memory.iter().all(|k| k.is_nonnegative_on(grid, T::zero()))
    }

    fn projector(&self, n: usize) -> CMatrix<T> {
        CMatrix::unit(self.dim, n, n)
    }

    /// `-i[P_n, ·]`.
    fn hamiltonian_part(&self, n: usize) -> CMatrix<T> {
        let p = self.projector(n);
        let id = CMatrix::identity(self.dim);
        (&sandwich(&p, &id) - &sandwich(&id, &p)).scale(C::new(T::zero(), -T::one()))
    }

    /// Gain superoperator `B_n`.
    pub fn jump_superoperator(&self, n: usize) -> CMatrix<T> {
        let d2 = self.dim * self.dim;
        self.kraus(n).iter().fold(CMatrix::zeros(d2, d2), |acc, k| &acc + &sandwich(k, &k.adjoint()))
    }

    /// `B_n - ½{P_n, ·}`.
    fn dissipative_part(&self, n: usize) -> CMatrix<T> {
        let p = self.projector(n);
        let id = CMatrix::identity(self.dim);
        let anti = &sandwich(&p, &id) + &sandwich(&id, &p);
        &self.jump_superoperator(n) - &anti.scale_real(T::half())
    }

    /// The vectorized kernel `𝒦(τ)` on `grid`.
    pub fn superoperator_kernel(&self, grid: &TimeGrid<T>) -> Result<MemoryKernel<T>> {
        let mut kernel = MemoryKernel::new(self.dim * self.dim, *grid);
        for n in 0..self.dim {
            kernel.add_memory(&self.energies[n], self.hamiltonian_part(n))?;
            kernel.add_memory(&self.memory[n], self.dissipative_part(n))?;
        }
        Ok(kernel)
    }

    /// Generator `ℒ` of the Markovian limit, for kernels `𝒦(τ) = 2δ(τ)ℒ`.
    pub fn lindblad_generator(&self) -> Result<CMatrix<T>> {
        if !self.is_markovian() {
            return Err(Error::Domain("kernel has a memory part; no time-local generator".into()));
        }
        let d2 = self.dim * self.dim;
        let mut l = CMatrix::zeros(d2, d2);
        for n in 0..self.dim {
            l = &l + &self.hamiltonian_part(n).scale_real(self.energies[n].delta_weight);
            l = &l + &self.dissipative_part(n).scale_real(self.memory[n].delta_weight);
        }
        Ok(l)
    }
}

/// Time-sampled dynamical map `V(t_i)` as `d² × d²` superoperators.
#[derive(Debug, Clone)]
pub struct PropagatorGrid<T: Real> {
    dim: usize,
    series: MatrixSeries<T>,
    trace_drift: T,
    hermiticity_drift: T,
}

impl<T: Real> PropagatorGrid<T> {
    fn from_series(dim: usize, series: MatrixSeries<T>) -> Self {
        let d = dim;
        let mut trace_drift = T::zero();
        let mut herm_drift = T::zero();
        for i in 0..series.len() {
            for k in 0..d {
                for m in 0..d {
                    let col = k * d + m;
                    let tr: C<T> = (0..d).map(|a| series.entry_at(i, a * d + a, col)).sum();
                    let expected = if k == m { cr(T::one()) } else { cz() };
                    trace_drift = trace_drift.max((tr - expected).norm());
                    for a in 0..d {
                        for b in 0..d {
                            let v = series.entry_at(i, a * d + b, col);
                            let w = series.entry_at(i, b * d + a, m * d + k).conj();
                            herm_drift = herm_drift.max((v - w).norm());
                        }
                    }
                }
            }
        }
        Self {
            dim,
            series,
            trace_drift,
            hermiticity_drift: herm_drift,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        self.series.grid()
    }

    pub fn series(&self) -> &MatrixSeries<T> {
        &self.series
    }

    pub fn at(&self, i: usize) -> CMatrix<T> {
        self.series.at(i)
    }

    /// `V(t_i) ρ`.
    pub fn apply(&self, i: usize, rho: &CMatrix<T>) -> CMatrix<T> {
        apply_superoperator(&self.at(i), rho)
    }

    /// Largest `|Tr V(t)(|k⟩⟨m|) - δ_km|`.
    pub fn trace_drift(&self) -> T {
        self.trace_drift
    }

    /// Largest deviation from `V(t)(X†) = V(t)(X)†` on matrix units.
    pub fn hermiticity_drift(&self) -> T {
        self.hermiticity_drift
    }

    pub fn preserves_trace_and_hermiticity(&self) -> bool {
        self.trace_drift <= T::lit(DRIFT_TOL) && self.hermiticity_drift <= T::lit(DRIFT_TOL)
    }
}

/// Integrates `dV/dt = ∫₀ᵗ 𝒦(τ) V(t-τ) dτ`, `V(0) = 1`.
pub fn build_propagator<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<PropagatorGrid<T>> {
    let kernel = spec.superoperator_kernel(grid)?;
    let d2 = spec.dim * spec.dim;
    let series = solve_volterra_ide(&kernel, &CMatrix::identity(d2))?;
    Ok(PropagatorGrid::from_series(spec.dim, series))
}

/// Coherence functions `g_nm(t)`, solutions of
/// `ġ_nm = -∫₀ᵗ [z_n(τ) + z_m*(τ)] g_nm(t-τ) dτ` with `z_n = ½k_n + iε_n`,
/// arranged as the Hermitian matrices `G(t_i)`.
pub fn solve_gnm<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<MatrixSeries<T>> {
    let d = spec.dim;
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|n| (n..d).map(move |m| (n, m))).collect();
    let solved: Vec<Vec<C<T>>> = pairs
        .par_iter()
        .map(|&(n, m)| -> Result<Vec<C<T>>> {
            let mut kernel = MemoryKernel::new(1, *grid);
            let scalar = |v: C<T>| CMatrix::from_vec(1, 1, vec![v]);
            let minus_half = cr(-T::half());
            kernel.add_memory(&spec.memory[n], scalar(minus_half)?)?;
            kernel.add_memory(&spec.memory[m], scalar(minus_half)?)?;
            if n != m {
                kernel.add_memory(&spec.energies[n], scalar(C::new(T::zero(), -T::one()))?)?;
                kernel.add_memory(&spec.energies[m], scalar(C::new(T::zero(), T::one()))?)?;
            }
            let sol = solve_volterra_ide(&kernel, &CMatrix::identity(1))?;
            Ok((0..sol.len()).map(|i| sol.entry_at(i, 0, 0)).collect())
        })
        .collect::<Result<_>>()?;
    let mut data = vec![cz(); grid.len() * d * d];
    for (&(n, m), values) in pairs.iter().zip(&solved) {
        for (i, &v) in values.iter().enumerate() {
            data[i * d * d + n * d + m] = v;
            data[i * d * d + m * d + n] = v.conj();
        }
    }
    Ok(MatrixSeries::from_raw(*grid, d, d, data))
}

/// `F^l(t_i)` with entries `f^l_nm = (k_l ∗ g_nm)(t_i)`, one series per `l`.
pub fn compute_fl<T: Real>(spec: &QuantumKernelSpec<T>, g: &MatrixSeries<T>) -> Vec<MatrixSeries<T>> {
    let d = spec.dim;
    let grid = *g.grid();
    (0..d)
        .into_par_iter()
        .map(|l| {
            let mut data = vec![cz(); grid.len() * d * d];
            for n in 0..d {
                for m in n..d {
                    let f = convolve_memory(&spec.memory[l], &g.entry(n, m));
                    for (i, &v) in f.values().iter().enumerate() {
                        data[i * d * d + n * d + m] = v;
                        data[i * d * d + m * d + n] = v.conj();
                    }
                }
            }
            MatrixSeries::from_raw(grid, d, d, data)
        })
        .collect()
}

/// Minimal eigenvalues over time of a positivity condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport<T> {
    pub min_eigenvalues: Vec<T>,
    pub first_violation: Option<T>,
    pub holds: bool,
}

impl<T: Real> ConditionReport<T> {
    fn from_matrices(grid: &TimeGrid<T>, mats: impl Iterator<Item = CMatrix<T>>) -> Self {
        let mut min_eigenvalues = Vec::with_capacity(grid.len());
        let mut first_violation = None;
        for (i, m) in mats.enumerate() {
            let (min, ok) = psd_check(&m);
            if !ok && first_violation.is_none() {
                first_violation = Some(grid.t(i));
            }
            min_eigenvalues.push(min);
        }
        Self {
            min_eigenvalues,
            holds: first_violation.is_none(),
            first_violation,
        }
    }

    /// Smallest eigenvalue over the whole grid.
    pub fn overall_min(&self) -> T {
        self.min_eigenvalues.iter().copied().fold(T::infinity(), T::min)
    }
}

/// `G(t) ≥ 0`, sufficient for CP when every `k_n ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cond1Report<T> {
    pub report: ConditionReport<T>,
    /// Whether all `k_n ≥ 0` on the grid. When false the verdict alone does
    /// not imply CP.
    pub hypothesis_holds: bool,
}

/// `F^l(t) ≥ 0` for every `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cond2Report<T> {
    pub per_level: Vec<ConditionReport<T>>,
    pub holds: bool,
}

/// `G̃(t) ≥ 0` together with `T_nm(t) ≥ 0` for `n ≠ m`: necessary and
/// sufficient for CP of lattice kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Cond3Report<T> {
    pub report: ConditionReport<T>,
    /// Smallest off-diagonal `T_nm(t_i)` at each time.
    pub min_off_diagonal: Vec<T>,
    pub transitions_nonnegative: bool,
    pub holds: bool,
}

pub fn check_cond1<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<Cond1Report<T>> {
    let g = solve_gnm(spec, grid)?;
    Ok(cond1_from(spec, &g))
}

fn cond1_from<T: Real>(spec: &QuantumKernelSpec<T>, g: &MatrixSeries<T>) -> Cond1Report<T> {
    Cond1Report {
        report: ConditionReport::from_matrices(g.grid(), (0..g.len()).map(|i| g.at(i))),
        hypothesis_holds: spec.memory_nonnegative_on(g.grid()),
    }
}

pub fn check_cond2<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<Cond2Report<T>> {
    let g = solve_gnm(spec, grid)?;
    Ok(cond2_from(spec, &g))
}

fn cond2_from<T: Real>(spec: &QuantumKernelSpec<T>, g: &MatrixSeries<T>) -> Cond2Report<T> {
    let per_level: Vec<_> = compute_fl(spec, g)
        .iter()
        .map(|f| ConditionReport::from_matrices(g.grid(), (0..f.len()).map(|i| f.at(i))))
        .collect();
    Cond2Report {
        holds: per_level.iter().all(|r| r.holds),
        per_level,
    }
}

/// Classical transition probabilities of a lattice kernel.
pub fn lattice_transitions<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<PropagationResult<T>> {
    let pi = spec
        .pi()
        .ok_or_else(|| Error::invalid("jump maps", "lattice form required"))?;
    solve_gme_closed(pi, &spec.memory, grid)
}

/// `G̃(t_i)`: `G(t_i)` with its diagonal replaced by `T_nn(t_i)`.
pub fn g_tilde<T: Real>(g: &MatrixSeries<T>, transitions: &PropagationResult<T>, i: usize) -> CMatrix<T> {
    let mut m = g.at(i);
    for n in 0..m.rows() {
        m[(n, n)] = cr(transitions.transition(i, n, n));
    }
    m
}

pub fn check_cond3_lattice<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<Cond3Report<T>> {
    let g = solve_gnm(spec, grid)?;
    let transitions = lattice_transitions(spec, grid)?;
    Ok(cond3_from(&g, &transitions))
}

fn cond3_from<T: Real>(g: &MatrixSeries<T>, transitions: &PropagationResult<T>) -> Cond3Report<T> {
    let d = g.rows();
    let grid = g.grid();
    let report = ConditionReport::from_matrices(grid, (0..g.len()).map(|i| g_tilde(g, transitions, i)));
    let min_off_diagonal: Vec<T> = (0..g.len())
        .map(|i| {
            (0..d)
                .flat_map(|n| (0..d).filter(move |&m| m != n).map(move |m| (n, m)))
                .map(|(n, m)| transitions.transition(i, n, m))
                .fold(T::infinity(), T::min)
        })
        .collect();
    let transitions_nonnegative = min_off_diagonal.iter().all(|&v| v >= -T::lit(PSD_REL_TOL));
    Cond3Report {
        holds: report.holds && transitions_nonnegative,
        report,
        min_off_diagonal,
        transitions_nonnegative,
    }
}

/// All condition verdicts for one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CpReport<T> {
    pub cond1: Cond1Report<T>,
    pub cond2: Cond2Report<T>,
    /// Present for lattice kernels only.
    pub cond3: Option<Cond3Report<T>>,
    /// Pure point-mass kernel: the map is a CP semigroup.
    pub semigroup: bool,
}

impl<T: Real> CpReport<T> {
    /// COND-1 and COND-2 together imply CP. Each verdict is also reported
    /// separately and is never combined otherwise.
    pub fn sufficient_conditions_hold(&self) -> bool {
        self.cond1.report.holds && self.cond2.holds
    }
}

pub fn check_cp<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<CpReport<T>> {
    let g = solve_gnm(spec, grid)?;
    let cond3 = match spec.jumps {
        JumpMaps::Lattice(_) => Some(cond3_from(&g, &lattice_transitions(spec, grid)?)),
        JumpMaps::Kraus(_) => None,
    };
    Ok(CpReport {
        cond1: cond1_from(spec, &g),
        cond2: cond2_from(spec, &g),
        cond3,
        semigroup: spec.is_markovian(),
    })
}

/// Superoperator of the exact lattice map
/// `ρ ↦ Σ g̃_nm P_n ρ P_m + Σ_{n≠m} T_nm |n⟩⟨m|ρ|m⟩⟨n|`.
pub fn lattice_map<T: Real>(gt: &CMatrix<T>, transitions: &PropagationResult<T>, i: usize) -> CMatrix<T> {
    let d = gt.rows();
    let mut v = CMatrix::zeros(d * d, d * d);
    for n in 0..d {
        for m in 0..d {
            v[(n * d + m, n * d + m)] = gt[(n, m)];
            if n != m {
                v[(n * d + n, m * d + m)] = cr(transitions.transition(i, n, m));
            }
        }
    }
    v
}

/// Choi matrix `Σ_ij |i⟩⟨j| ⊗ V(|i⟩⟨j|)` of a superoperator on `d × d`
/// matrices.
pub fn choi_matrix<T: Real>(v: &CMatrix<T>, d: usize) -> CMatrix<T> {
    CMatrix::from_fn(d * d, d * d, |r, c| {
        let (i, a) = (r / d, r % d);
        let (j, b) = (c / d, c % d);
        v[(a * d + b, i * d + j)]
    })
}

/// Dyson expansion `V = Σ_k (V₀ ∗ B)^{∗k} ∗ V₀` as an independent check of
/// [`build_propagator`].
#[derive(Debug, Clone)]
pub struct DysonResult<T: Real> {
    pub propagator: MatrixSeries<T>,
    /// Number of correction terms added after `V₀`.
    pub orders: usize,
    pub last_term_norm: T,
}

pub const DYSON_MAX_ORDERS: usize = 12;
pub const DYSON_TOL: f64 = 1e-8;

pub fn dyson_propagator<T: Real>(spec: &QuantumKernelSpec<T>, grid: &TimeGrid<T>) -> Result<DysonResult<T>> {
    let d = spec.dim;
    let d2 = d * d;
    let n = grid.len();
    let g = solve_gnm(spec, grid)?;
    let fl = compute_fl(spec, &g);
    let jumps: Vec<CMatrix<T>> = (0..d).map(|l| spec.jump_superoperator(l)).collect();

    // V₀ is diagonal in the matrix-unit basis with entries g_nm
    let mut v0 = vec![cz(); n * d2 * d2];
    for i in 0..n {
        for r in 0..d2 {
            v0[i * d2 * d2 + r * d2 + r] = g.entry_at(i, r / d, r % d);
        }
    }
    // F = V₀ ∗ B = Σ_l diag(f^l) B_l, stored sparsely
    let mut pattern: Vec<(usize, usize)> = Vec::new();
    for r in 0..d2 {
        for c in 0..d2 {
            if jumps.iter().any(|b| b[(r, c)] != cz()) {
                pattern.push((r, c));
            }
        }
    }
    let f_values: Vec<Vec<C<T>>> = (0..n)
        .map(|i| {
            pattern
                .iter()
                .map(|&(r, c)| {
                    (0..d)
                        .map(|l| fl[l].entry_at(i, r / d, r % d) * jumps[l][(r, c)])
                        .sum()
                })
                .collect()
        })
        .collect();

    let h = grid.step();
    let mut total = v0.clone();
    let mut term = v0;
    let mut orders = 0;
    let mut last_norm = T::zero();
    while orders < DYSON_MAX_ORDERS {
        let next: Vec<C<T>> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut out = vec![cz(); d2 * d2];
                for j in 0..=i {
                    let w = if j == 0 || j == i { h * T::half() } else { h };
                    if i == 0 {
                        break;
                    }
                    let x = &term[(i - j) * d2 * d2..(i - j + 1) * d2 * d2];
                    for (p, &(r, c)) in pattern.iter().enumerate() {
                        let f = f_values[j][p] * w;
                        if f == cz() {
                            continue;
                        }
                        for col in 0..d2 {
                            out[r * d2 + col] += f * x[c * d2 + col];
                        }
                    }
                }
                out
            })
            .collect();
        last_norm = next.iter().map(|v| v.norm()).fold(T::zero(), T::max);
        for (t, v) in total.iter_mut().zip(&next) {
            *t += *v;
        }
        term = next;
        orders += 1;
        if last_norm < T::lit(DYSON_TOL) {
            break;
        }
    }
    Ok(DysonResult {
        propagator: MatrixSeries::from_raw(*grid, d2, d2, total),
        orders,
        last_term_norm: last_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twolevel::{Level, Pair};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flip() -> Vec<Vec<f64>> {
        vec![vec![0.0, 1.0], vec![1.0, 0.0]]
    }

    fn two_level(kp: f64, km: f64) -> (TwoLevelParams<f64>, QuantumKernelSpec<f64>) {
        let p = TwoLevelParams::new(1.0, kp, km).unwrap();
        (p, QuantumKernelSpec::two_level(&p).unwrap())
    }

    #[test]
    fn spec_validation() {
        let k = || vec![MemoryFunction::markov(1.0); 2];
        assert!(QuantumKernelSpec::lattice(vec![vec![0.5, 1.0], vec![0.4, 0.0]], k()).is_err());
        assert!(QuantumKernelSpec::lattice(flip(), vec![MemoryFunction::markov(1.0)]).is_err());
        let bad = JumpMaps::Kraus(vec![vec![CMatrix::unit(2, 1, 0).scale_real(0.5)], vec![CMatrix::unit(2, 0, 1)]]);
        assert!(QuantumKernelSpec::new(vec![MemoryFunction::zero(); 2], k(), bad).is_err());
        let good = JumpMaps::Kraus(vec![vec![CMatrix::unit(2, 1, 0)], vec![CMatrix::unit(2, 0, 1)]]);
        assert!(QuantumKernelSpec::new(vec![MemoryFunction::zero(); 2], k(), good).is_ok());
        let big = vec![MemoryFunction::zero(); 33];
        let pi: Vec<Vec<f64>> = (0..33).map(|m| (0..33).map(|n| if m == n { 1.0 } else { 0.0 }).collect()).collect();
        assert!(matches!(QuantumKernelSpec::lattice(pi, big), Err(Error::Dimension(_))));
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::<f64>::basis(2, 0).is_ok());
        assert!(DensityMatrix::new(CMatrix::<f64>::identity(2)).is_err());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = DensityMatrix::pure(&[C::new(s, 0.0), C::new(0.0, s)]).unwrap();
        assert_abs_diff_eq!(plus.matrix()[(0, 1)].im, -0.5, epsilon = 1e-15);
        let neg = CMatrix::from_real(2, 2, &[1.2, 0.0, 0.0, -0.2]).unwrap();
        assert!(DensityMatrix::new(neg).is_err());
    }

    #[test]
    fn kraus_and_lattice_forms_agree() {
        let pi = vec![vec![0.2, 0.5], vec![0.8, 0.5]];
        let memory = vec![MemoryFunction::exponential(0.3, 1.0), MemoryFunction::markov(0.4)];
        let lattice = QuantumKernelSpec::lattice(pi.clone(), memory.clone()).unwrap();
        let kraus: Vec<Vec<CMatrix<f64>>> = (0..2).map(|n| lattice.kraus(n)).collect();
        let general = QuantumKernelSpec::new(vec![MemoryFunction::zero(); 2], memory, JumpMaps::Kraus(kraus)).unwrap();
        let grid = TimeGrid::with_horizon(1e-2, 3.0).unwrap();
        let a = build_propagator(&lattice, &grid).unwrap();
        let b = build_propagator(&general, &grid).unwrap();
        assert!(a.series().max_abs_diff(b.series()) < 1e-14);
    }

    #[test]
    fn gnm_matches_closed_forms() {
        let (p, spec) = two_level(0.1875, 0.12);
        let grid = TimeGrid::with_horizon(1e-3, 20.0).unwrap();
        let g = solve_gnm(&spec, &grid).unwrap();
        let cases = [((0, 0), Pair::PlusPlus), ((1, 1), Pair::MinusMinus), ((0, 1), Pair::PlusMinus)];
        for ((n, m), pair) in cases {
            let err = g.entry(n, m).max_error_against(|t| C::new(p.g_entry(pair, t), 0.0));
            assert!(err <= 1e-6, "{pair:?}: {err}");
        }
    }

    #[test]
    fn zero_kernel_keeps_coherences() {
        let spec = QuantumKernelSpec::lattice(flip(), vec![MemoryFunction::zero(); 2]).unwrap();
        let grid = TimeGrid::with_horizon(1e-2, 2.0).unwrap();
        let g = solve_gnm(&spec, &grid).unwrap();
        assert!(g.max_abs_diff(&MatrixSeries::from_matrices(grid, &vec![CMatrix::from_real(2, 2, &[1.0; 4]).unwrap(); grid.len()]).unwrap()) < 1e-15);
    }

    #[test]
    fn propagator_reproduces_telegraph_and_coherences() {
        let (p, spec) = two_level(0.1875, 0.12);
        let grid = TimeGrid::with_horizon(1e-3, 20.0).unwrap();
        let v = build_propagator(&spec, &grid).unwrap();
        assert!(v.preserves_trace_and_hermiticity());
        let g = solve_gnm(&spec, &grid).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rho0 = DensityMatrix::pure(&[C::new(s, 0.0), C::new(s, 0.0)]).unwrap();
        let up = DensityMatrix::<f64>::basis(2, 0).unwrap();
        for i in (0..grid.len()).step_by(500) {
            let t = grid.t(i);
            let pop = v.apply(i, up.matrix())[(0, 0)].re;
            assert_abs_diff_eq!(pop, p.t_diag(Level::Plus, t), epsilon = 1e-6);
            let coh = v.apply(i, rho0.matrix())[(0, 1)];
            assert_abs_diff_eq!((coh - g.entry_at(i, 0, 1) * 0.5).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn markov_limit_is_a_semigroup() {
        let pi = vec![vec![0.0, 0.3, 0.5], vec![0.6, 0.0, 0.5], vec![0.4, 0.7, 0.0]];
        let memory = vec![MemoryFunction::markov(0.8), MemoryFunction::markov(0.3), MemoryFunction::markov(1.1)];
        let energies = vec![MemoryFunction::markov(0.5), MemoryFunction::zero(), MemoryFunction::markov(-0.7)];
        let spec = QuantumKernelSpec::new(energies, memory, JumpMaps::Lattice(pi)).unwrap();
        let grid = TimeGrid::with_horizon(1e-2, 10.0).unwrap();
        let v = build_propagator(&spec, &grid).unwrap();
        let l = spec.lindblad_generator().unwrap();
        for i in (0..grid.len()).step_by(50) {
            let exact = l.scale_real(grid.t(i)).expm();
            assert!(v.at(i).max_abs_diff(&exact) < 1e-8);
        }
        let (a, b) = (120, 370);
        let composed = v.at(a).matmul(&v.at(b));
        assert!(composed.max_abs_diff(&v.at(a + b)) < 1e-6);
        let cond1 = check_cond1(&spec, &grid).unwrap();
        assert!(cond1.report.holds && cond1.hypothesis_holds);
        // G(t) = h hᴴ has rank one
        let g = solve_gnm(&spec, &grid).unwrap();
        let gi = g.at(300);
        let eig: Vec<f64> = gi.hermitian_eigenvalues();
        assert!(eig[0].abs() < 1e-10 && eig[1].abs() < 1e-10 && eig[2] > 0.0);
    }

    #[test]
    fn generator_requires_point_masses() {
        let (_, spec) = two_level(0.2, 0.1);
        assert!(spec.lindblad_generator().is_err());
    }

    #[test]
    fn translational_invariance_gives_cp() {
        let pi = vec![vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]];
        // negative memory is allowed: the kernel is translation invariant
        let k = MemoryFunction::new(2.0, crate::waiting_time::ExpPoly::exponential(-1.0, 2.0));
        let spec = QuantumKernelSpec::lattice(pi, vec![k.clone(), k.clone(), k]).unwrap();
        let grid = TimeGrid::with_horizon(1e-2, 10.0).unwrap();
        let report = check_cp(&spec, &grid).unwrap();
        assert!(report.cond1.report.holds);
        assert!(!report.cond1.hypothesis_holds);
        assert!(report.cond3.unwrap().holds);
    }

    #[test]
    fn equal_rates_satisfy_cond1() {
        let (_, spec) = two_level(0.2, 0.2);
        let grid = TimeGrid::with_horizon(1e-2, 20.0).unwrap();
        let r = check_cond1(&spec, &grid).unwrap();
        assert!(r.report.holds && r.hypothesis_holds);
    }

    #[test]
    fn cond2_diagonal_is_waiting_density() {
        let (p, spec) = two_level(0.1875, 0.12);
        let grid = TimeGrid::with_horizon(1e-3, 5.0).unwrap();
        let g = solve_gnm(&spec, &grid).unwrap();
        let fl = compute_fl(&spec, &g);
        let i = grid.index_of(1.0);
        assert_abs_diff_eq!(fl[0].entry_at(i, 0, 0).re, p.f_pm(Level::Plus, 1.0), epsilon = 1e-6);
        let err = fl[1].entry(1, 1).max_error_against(|t| C::new(p.f_pm(Level::Minus, t), 0.0));
        assert!(err < 1e-6);
        // G ≥ 0 and k_l ≥ 0 make every F^l a positive mixture
        let (_, equal) = two_level(0.2, 0.2);
        assert!(check_cond2(&equal, &grid).unwrap().holds);

        let zero = QuantumKernelSpec::lattice(flip(), vec![MemoryFunction::zero(); 2]).unwrap();
        let r = check_cond2(&zero, &grid).unwrap();
        assert!(r.holds && r.per_level.iter().all(|l| l.overall_min() == 0.0));
    }

    #[test]
    fn cond3_detects_short_time_violation() {
        let grid = TimeGrid::with_horizon(1e-3, 2.0).unwrap();
        let violating = QuantumKernelSpec::two_level(&TwoLevelParams::from_rescaled(1.0, 0.1).unwrap()).unwrap();
        let r = check_cond3_lattice(&violating, &grid).unwrap();
        assert!(!r.holds);
        assert!(r.report.first_violation.unwrap() < 0.5);

        let equal = QuantumKernelSpec::two_level(&TwoLevelParams::from_rescaled(0.6, 0.6).unwrap()).unwrap();
        assert!(check_cond3_lattice(&equal, &TimeGrid::with_horizon(1e-2, 20.0).unwrap()).unwrap().holds);
    }

    #[test]
    fn pure_decay_makes_cond1_exact() {
        let (_, spec) = two_level(0.2, 0.0);
        let grid = TimeGrid::with_horizon(1e-3, 10.0).unwrap();
        let g = solve_gnm(&spec, &grid).unwrap();
        let tr = lattice_transitions(&spec, &grid).unwrap();
        for i in (0..grid.len()).step_by(100) {
            assert!(g_tilde(&g, &tr, i).max_abs_diff(&g.at(i)) < 1e-6);
        }
    }

    #[test]
    fn choi_spectrum_matches_repr4_blocks() {
        let (_, spec) = two_level(0.24, 0.05);
        let grid = TimeGrid::with_horizon(1e-2, 5.0).unwrap();
        let g = solve_gnm(&spec, &grid).unwrap();
        let tr = lattice_transitions(&spec, &grid).unwrap();
        let v = build_propagator(&spec, &grid).unwrap();
        for i in [0, 10, 100, 500] {
            let gt = g_tilde(&g, &tr, i);
            let map = lattice_map(&gt, &tr, i);
            // the explicit map is the integrated one
            assert!(map.max_abs_diff(&v.at(i)) < 1e-4);
            let mut expected = gt.hermitian_eigenvalues();
            expected.push(tr.transition(i, 0, 1));
            expected.push(tr.transition(i, 1, 0));
            expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let choi = choi_matrix(&map, 2).hermitian_eigenvalues();
            for (a, b) in choi.iter().zip(&expected) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn choi_of_identity_is_maximally_entangled_projector() {
        let choi = choi_matrix(&CMatrix::<f64>::identity(4), 2);
        let eig = choi.hermitian_eigenvalues();
        assert_abs_diff_eq!(eig[3], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eig[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dyson_series_agrees_with_direct_integration() {
        let (_, spec) = two_level(0.1875, 0.12);
        let grid = TimeGrid::with_horizon(2e-3, 5.0).unwrap();
        let direct = build_propagator(&spec, &grid).unwrap();
        let dyson = dyson_propagator(&spec, &grid).unwrap();
        assert!(dyson.orders <= DYSON_MAX_ORDERS);
        let err = dyson.propagator.max_abs_diff(direct.series());
        assert!(err < 1e-5, "dyson vs direct {err} after {} orders", dyson.orders);
    }

    #[test]
    fn dephasing_with_local_energies() {
        // π = 1: jumps return to the same level, populations never move
        let pi = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let memory = vec![MemoryFunction::markov(0.3), MemoryFunction::exponential(0.1, 0.5)];
        let grid = TimeGrid::with_horizon(1e-2, 10.0).unwrap();
        let still = QuantumKernelSpec::lattice(pi.clone(), vec![MemoryFunction::markov(0.3), MemoryFunction::markov(0.1)]).unwrap();
        let turning = QuantumKernelSpec::new(
            vec![MemoryFunction::markov(1.5), MemoryFunction::markov(-0.4)],
            still.memory().to_vec(),
            JumpMaps::Lattice(pi.clone()),
        )
        .unwrap();
        let rotating = QuantumKernelSpec::new(
            vec![MemoryFunction::markov(1.5), MemoryFunction::markov(-0.4)],
            memory,
            JumpMaps::Lattice(pi),
        )
        .unwrap();
        let g0 = solve_gnm(&still, &grid).unwrap();
        let g1 = solve_gnm(&turning, &grid).unwrap();
        let v = build_propagator(&rotating, &grid).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rho = DensityMatrix::pure(&[C::new(s, 0.0), C::new(0.0, s)]).unwrap();
        for i in (0..grid.len()).step_by(40) {
            assert_abs_diff_eq!(g0.entry_at(i, 0, 1).norm(), g1.entry_at(i, 0, 1).norm(), epsilon = 1e-10);
            let out = v.apply(i, rho.matrix());
            assert_abs_diff_eq!(out[(0, 0)].re, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(out[(1, 1)].re, 0.5, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn propagator_preserves_trace_and_hermiticity(
            a in 0.0f64..1.0, k1 in 0.0f64..0.3, k2 in 0.0f64..0.3, e in -1.0f64..1.0,
        ) {
            let pi = vec![vec![0.0, a], vec![1.0, 1.0 - a]];
            let spec = QuantumKernelSpec::new(
                vec![MemoryFunction::markov(e), MemoryFunction::exponential(0.2, 1.0)],
                vec![MemoryFunction::exponential(k1, 1.0), MemoryFunction::markov(k2)],
                JumpMaps::Lattice(pi),
            ).unwrap();
            let grid = TimeGrid::with_horizon(1e-2, 5.0).unwrap();
            let v = build_propagator(&spec, &grid).unwrap();
            prop_assert!(v.trace_drift() < 1e-10);
            prop_assert!(v.hermiticity_drift() < 1e-10);
        }
    }
}
