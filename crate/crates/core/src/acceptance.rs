//! Acceptance suite: numbered criteria checked against closed forms and
//! independent oracles. Shared by the `validate` command and the
//! `acceptance` test target.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classical::{simulate_trajectories, solve_gme, SemiMarkovSpec};
use crate::error::Result;
use crate::linalg::CMatrix;
use crate::quantum::{
    build_propagator, choi_matrix, compute_fl, g_tilde, lattice_map, lattice_transitions, psd_check, solve_gnm,
    JumpMaps, QuantumKernelSpec, PSD_REL_TOL,
};
use crate::scalar::C;
use crate::twolevel::{
    cp_boundary_ratio, cubic_law_coefficient, cubic_sign_boundary, fitted_cubic_coefficient, temperature_threshold,
    Level, Pair,
};
use crate::volterra::invert_memory;
use crate::waiting_time::MemoryFunction;
use crate::{TimeGrid64, TwoLevelParams64, WaitingTime64};

/// Criteria whose literal statement is known not to hold. They are still
/// run and reported as FAIL.
pub const KNOWN_FAILURES: &[u8] = &[4];

/// Seed of every stochastic check.
pub const SEED: u64 = 20_240_229;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    /// A yes/no check; `measured` is 1 for yes.
    Holds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub passed: bool,
    #[serde(skip)]
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} [{:>2}] {}", self.id, self.title)?;
        for c in &self.checks {
            let mark = if c.passed { "ok" } else { "FAILED" };
            match c.bound {
                Bound::AtMost(tol) => write!(f, "; {}: {:.3e} <= {:.1e} {mark}", c.name, c.measured, tol)?,
                Bound::AtLeast(tol) => write!(f, "; {}: {:.4} >= {} {mark}", c.name, c.measured, tol)?,
                Bound::Holds => write!(f, "; {}: {mark}", c.name)?,
            }
        }
        Ok(())
    }
}

/// Collects checks, scaling every tolerance by `scale`. A scale below one
/// tightens the suite; tiny values force failures.
struct Recorder {
    scale: f64,
    checks: Vec<Check>,
}

impl Recorder {
    fn new(scale: f64) -> Self {
        Self {
            scale,
            checks: Vec::new(),
        }
    }

    fn at_most(&mut self, name: impl Into<String>, measured: f64, tol: f64) {
        let tol = tol * self.scale;
        self.checks.push(Check {
            name: name.into(),
            measured,
            bound: Bound::AtMost(tol),
            passed: measured <= tol,
        });
    }

    fn at_least(&mut self, name: impl Into<String>, measured: f64, bound: f64) {
        let bound = bound / self.scale;
        self.checks.push(Check {
            name: name.into(),
            measured,
            bound: Bound::AtLeast(bound),
            passed: measured >= bound,
        });
    }

    fn holds(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push(Check {
            name: name.into(),
            measured: if ok { 1.0 } else { 0.0 },
            bound: Bound::Holds,
            passed: ok,
        });
    }

    /// Runtime limits are not scaled. Only the verdict is recorded so that
    /// reports stay byte-identical between runs.
    fn runtime(&mut self, start: Instant, limit: f64) {
        let ok = start.elapsed().as_secs_f64() <= limit;
        self.holds(format!("runtime <= {limit} s"), ok);
    }

    fn finish(self, id: u8, title: &'static str, start: Instant) -> Outcome {
        Outcome {
            id,
            title,
            passed: !self.checks.is_empty() && self.checks.iter().all(|c| c.passed),
            checks: self.checks,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn error(mut self, id: u8, title: &'static str, start: Instant, err: crate::error::Error) -> Outcome {
        self.holds(format!("error: {err}"), false);
        self.finish(id, title, start)
    }
}

fn run(id: u8, title: &'static str, scale: f64, body: impl FnOnce(&mut Recorder, Instant) -> Result<()>) -> Outcome {
    let start = Instant::now();
    let mut rec = Recorder::new(scale);
    match body(&mut rec, start) {
        Ok(()) => rec.finish(id, title, start),
        Err(e) => rec.error(id, title, start, e),
    }
}

pub const CRITERIA: [u8; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

/// Runs criterion `id` with tolerances multiplied by `scale`.
pub fn criterion(id: u8, scale: f64) -> Option<Outcome> {
    Some(match id {
        1 => memory_inversion(scale),
        2 => negative_kernel_witness(scale),
        3 => two_level_closed_forms(scale),
        4 => delta_taylor_law(scale),
        5 => cp_boundary(scale),
        6 => temperature(scale),
        7 => markov_limit(scale),
        8 => choi_equivalence(scale),
        9 => monte_carlo(scale),
        10 => classical_inequalities(scale),
        11 => convergence_order(scale),
        _ => return None,
    })
}

pub fn run_all(scale: f64) -> Vec<Outcome> {
    CRITERIA.iter().filter_map(|&id| criterion(id, scale)).collect()
}

fn memory_inversion(scale: f64) -> Outcome {
    run(1, "memory-function inversion, special Erlang a=3", scale, |rec, start| {
        let w = WaitingTime64::special_erlang(1.0, 3)?;
        let grid = TimeGrid64::with_horizon(1e-3, 10.0)?;
        let k = invert_memory(&w.density_on(&grid), &w.survival_on(&grid))?;
        let s3 = 3f64.sqrt();
        let err = k.max_error_against(|t| 2.0 / s3 * (s3 * t / 2.0).sin() * (-1.5 * t).exp());
        rec.at_most("max |k - closed form|", err, 1e-5);
        let negative = grid
            .points()
            .zip(k.values())
            .any(|(t, &v)| t > 3.6 && t < 4.0 && v < 0.0);
        rec.holds("negative somewhere in (3.6, 4.0)", negative);
        rec.runtime(start, 5.0);
        Ok(())
    })
}

fn negative_kernel_witness(scale: f64) -> Outcome {
    run(2, "negative-kernel witness, multi-exponential", scale, |rec, _| {
        let w = WaitingTime64::multi_exponential(vec![0.5, 0.5], vec![1.0, 3.0])?;
        let k = w.memory_function()?;
        rec.at_most("|delta weight - 2|", (k.delta_weight - 2.0).abs(), 1e-12);
        let grid = TimeGrid64::with_horizon(1e-3, 10.0)?;
        let closed = grid
            .points()
            .map(|t| (k.regular_at(t) + (-2.0 * t).exp()).abs())
            .fold(0.0, f64::max);
        rec.at_most("max |regular + e^-2t|", closed, 1e-12);
        let numeric = invert_memory(&w.density_on(&grid), &w.survival_on(&grid))?;
        rec.at_most("numeric delta weight", (numeric.delta_weight() - 2.0).abs(), 1e-5);
        rec.at_most("numeric regular part", numeric.max_error_against(|t| -(-2.0 * t).exp()), 1e-5);
        Ok(())
    })
}

const CLOSED_FORM_POINTS: [(f64, f64); 3] = [(0.1875, 0.12), (0.2, 0.2), (0.24, 0.0)];

/// Largest deviations of the integrated two-level quantities from their
/// closed forms on `[0, 20]`: `(populations, coherences, densities)`.
fn closed_form_errors(h: f64) -> Result<(f64, f64, f64)> {
    let grid = TimeGrid64::with_horizon(h, 20.0)?;
    let (mut pop, mut coh, mut dens) = (0.0f64, 0.0f64, 0.0f64);
    for (kp, km) in CLOSED_FORM_POINTS {
        let p = TwoLevelParams64::new(1.0, kp, km)?;
        let spec = QuantumKernelSpec::two_level(&p)?;
        let v = build_propagator(&spec, &grid)?;
        let g = solve_gnm(&spec, &grid)?;
        let gme = lattice_transitions(&spec, &grid)?;
        let fl = compute_fl(&spec, &g);
        let up = CMatrix::unit(2, 0, 0);
        let down = CMatrix::unit(2, 1, 1);
        let mixed = CMatrix::unit(2, 0, 1);
        for i in 0..grid.len() {
            let t = grid.t(i);
            let (tpp, tmm) = (p.t_diag(Level::Plus, t), p.t_diag(Level::Minus, t));
            pop = pop
                .max((v.apply(i, &up)[(0, 0)].re - tpp).abs())
                .max((v.apply(i, &down)[(1, 1)].re - tmm).abs())
                .max((gme.transition(i, 0, 0) - tpp).abs())
                .max((gme.transition(i, 1, 1) - tmm).abs());
            let gpm = p.g_entry(Pair::PlusMinus, t);
            coh = coh
                .max((v.apply(i, &mixed)[(0, 1)] - C::new(gpm, 0.0)).norm())
                .max((g.entry_at(i, 0, 1) - C::new(gpm, 0.0)).norm())
                .max((g.entry_at(i, 0, 0).re - p.g_entry(Pair::PlusPlus, t)).abs())
                .max((g.entry_at(i, 1, 1).re - p.g_entry(Pair::MinusMinus, t)).abs());
            dens = dens
                .max((fl[0].entry_at(i, 0, 0).re - p.f_pm(Level::Plus, t)).abs())
                .max((fl[1].entry_at(i, 1, 1).re - p.f_pm(Level::Minus, t)).abs());
        }
    }
    Ok((pop, coh, dens))
}

fn two_level_closed_forms(scale: f64) -> Outcome {
    run(3, "two-level closed forms", scale, |rec, start| {
        let (pop, coh, dens) = closed_form_errors(1e-3)?;
        rec.at_most("populations T_nn", pop, 1e-6);
        rec.at_most("coherences g", coh, 1e-6);
        rec.at_most("densities f", dens, 1e-6);
        rec.runtime(start, 30.0);
        Ok(())
    })
}

fn delta_taylor_law(scale: f64) -> Outcome {
    run(4, "cubic short-time law of Delta", scale, |rec, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (rp, rm): (f64, f64) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
            let expected = cubic_law_coefficient(rp, rm);
            worst = worst.max(((fitted_cubic_coefficient(rp, rm) - expected) / expected).abs());
        }
        rec.at_most("random points, relative error", worst, 1e-2);
        for (rp, rm, expected) in [(1.0f64, 0.0, -1.0 / 96.0), (1.0, 1.0, 1.0 / 48.0)] {
            let rel = ((fitted_cubic_coefficient(rp, rm) - expected) / expected).abs();
            rec.at_most(format!("({rp}, {rm}) relative error"), rel, 1e-3);
        }
        Ok(())
    })
}

fn cp_boundary(scale: f64) -> Outcome {
    run(5, "CP boundary ratio", scale, |rec, _| {
        let expected = cp_boundary_ratio::<f64>().0 * 0.2;
        match cubic_sign_boundary(0.2, 200) {
            Some(b) => rec.at_most("|boundary - (2+sqrt3)*0.2| in cells", (b.r_plus - expected).abs() / b.cell, 1.0),
            None => rec.holds("sign boundary found", false),
        }
        let (up, lo) = cp_boundary_ratio::<f64>();
        let residual = (up * up - 4.0 * up + 1.0).abs().max((lo * lo - 4.0 * lo + 1.0).abs());
        rec.at_most("root residual of x^2-4x+1", residual, 1e-12);
        Ok(())
    })
}

fn temperature(scale: f64) -> Outcome {
    run(6, "temperature threshold", scale, |rec, _| {
        let (beta, kt) = temperature_threshold::<f64>();
        rec.at_most("|threshold - ln(2+sqrt3)|", (beta - (2.0 + 3f64.sqrt()).ln()).abs(), 1e-12);
        rec.holds(format!("k_B T/hbar omega = {kt:.4} rounds to 0.8"), (kt * 10.0).round() == 8.0);
        Ok(())
    })
}

/// Three-level point-mass kernel with a Hamiltonian part.
pub fn markov_example() -> Result<QuantumKernelSpec<f64>> {
    let pi = vec![vec![0.0, 0.3, 0.5], vec![0.6, 0.0, 0.5], vec![0.4, 0.7, 0.0]];
    let memory = vec![MemoryFunction::markov(0.8), MemoryFunction::markov(0.3), MemoryFunction::markov(1.1)];
    let energies = vec![MemoryFunction::markov(0.5), MemoryFunction::zero(), MemoryFunction::markov(-0.7)];
    QuantumKernelSpec::new(energies, memory, JumpMaps::Lattice(pi))
}

fn markov_limit(scale: f64) -> Outcome {
    run(7, "Markovian limit", scale, |rec, _| {
        let spec = markov_example()?;
        let grid = TimeGrid64::with_horizon(1e-3, 10.0)?;
        let v = build_propagator(&spec, &grid)?;
        let l = spec.lindblad_generator()?;
        let mut err = 0.0f64;
        for i in (0..grid.len()).step_by(100) {
            err = err.max(v.at(i).max_abs_diff(&l.scale_real(grid.t(i)).expm()));
        }
        rec.at_most("max |V(t) - exp(Lt)|", err, 1e-8);
        let mut semigroup = 0.0f64;
        for (a, b) in [(1000, 2500), (333, 4000), (2000, 2000), (4999, 5000)] {
            semigroup = semigroup.max(v.at(a).matmul(&v.at(b)).max_abs_diff(&v.at(a + b)));
        }
        rec.at_most("max |V(t)V(s) - V(t+s)|", semigroup, 1e-6);
        let g = solve_gnm(&spec, &grid)?;
        rec.holds("G(t) PSD at all times", (0..g.len()).all(|i| psd_check(&g.at(i)).1));
        Ok(())
    })
}

/// Parameter points of the CP-verdict comparison: three ratios inside,
/// on and outside the short-time window, at three overall strengths.
pub fn choi_points() -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for rm in [0.05, 0.1, 0.2] {
        for ratio in [1.0, 2.0 + 3f64.sqrt(), 10.0] {
            pts.push((ratio * rm / 4.0, rm / 4.0));
        }
    }
    pts
}

fn choi_equivalence(scale: f64) -> Outcome {
    run(8, "CP verdict vs Choi positivity", scale, |rec, _| {
        let grid = TimeGrid64::with_horizon(1e-2, 10.0)?;
        let tol = PSD_REL_TOL;
        let (mut disagreements, mut gap) = (0usize, 0.0f64);
        let mut any_violation = false;
        for (kp, km) in choi_points() {
            let spec = QuantumKernelSpec::two_level(&TwoLevelParams64::new(1.0, kp, km)?)?;
            let g = solve_gnm(&spec, &grid)?;
            let tr = lattice_transitions(&spec, &grid)?;
            for i in 0..grid.len() {
                let gt = g_tilde(&g, &tr, i);
                let (g_min, g_ok) = psd_check(&gt);
                let off = tr.transition(i, 0, 1).min(tr.transition(i, 1, 0));
                let tilde_min = g_min.min(off);
                let tilde_ok = g_ok && off >= -tol;
                let choi = choi_matrix(&lattice_map(&gt, &tr, i), 2);
                let (c_min, c_ok) = psd_check(&choi);
                any_violation |= !c_ok;
                let diff = (tilde_min - c_min).abs();
                gap = gap.max(diff);
                if tilde_ok != c_ok && diff > tol {
                    disagreements += 1;
                }
            }
        }
        rec.at_most("disagreeing verdicts", disagreements as f64, 0.0);
        rec.at_most("max |min eigenvalue gap|", gap, 1e-8);
        rec.holds("violations present among the points", any_violation);
        Ok(())
    })
}

fn monte_carlo(scale: f64) -> Outcome {
    run(9, "Monte Carlo vs GME, Erlang-3", scale, |rec, start| {
        let w = WaitingTime64::special_erlang(1.0, 3)?;
        let spec = SemiMarkovSpec::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![w.clone(), w])?;
        let grid = TimeGrid64::with_horizon(1e-3, 10.0)?;
        let gme = solve_gme(&spec, &grid)?;
        let times: Vec<f64> = (1..=10).map(f64::from).collect();
        let mc = simulate_trajectories(&spec, 0, &times, 100_000, SEED)?;
        let mut worst = 0.0f64;
        for (k, &t) in times.iter().enumerate() {
            let i = grid.index_of(t);
            for n in 0..2 {
                let z = (mc.mean[k][n] - gme.transition(i, n, 0)).abs() / mc.std_err[k][n];
                worst = worst.max(z);
            }
        }
        rec.at_most("max deviation in standard errors", worst, 3.0);
        let again = simulate_trajectories(&spec, 0, &times, 100_000, SEED)?;
        rec.holds("seed-fixed rerun bit-identical", again.mean == mc.mean && again.std_err == mc.std_err);
        rec.runtime(start, 60.0);
        Ok(())
    })
}

fn classical_inequalities(scale: f64) -> Outcome {
    run(10, "classical inequalities", scale, |rec, _| {
        let grid = TimeGrid64::with_horizon(1e-3, 20.0)?;
        let specs = [
            SemiMarkovSpec::new(
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![WaitingTime64::special_erlang(1.0, 3)?, WaitingTime64::exponential(0.7)?],
            )?,
            SemiMarkovSpec::new(
                vec![vec![0.2, 0.5, 0.0], vec![0.8, 0.0, 0.4], vec![0.0, 0.5, 0.6]],
                vec![
                    WaitingTime64::multi_exponential(vec![0.5, 0.5], vec![1.0, 3.0])?,
                    WaitingTime64::generalized_erlang(vec![1.0, 2.0, 0.5])?,
                    WaitingTime64::special_erlang(2.0, 2)?,
                ],
            )?,
        ];
        let mut worst = 0.0f64;
        for spec in &specs {
            let t = solve_gme(spec, &grid)?;
            for n in 0..spec.states() {
                let g = spec.waiting_time(n).survival_on(&grid);
                for (i, &gi) in g.values().iter().enumerate() {
                    worst = worst.max(gi - t.transition(i, n, n));
                }
            }
        }
        rec.at_most("max (g_n - T_nn)", worst.max(0.0), 1e-8);

        let p = TwoLevelParams64::new(1.0, 0.24, 0.0)?;
        let spec = QuantumKernelSpec::two_level(&p)?;
        let tr = lattice_transitions(&spec, &grid)?;
        let w = p.waiting_time(Level::Plus)?.expect("decaying level has a waiting time");
        let g = w.survival_on(&grid);
        let (mut plus, mut minus) = (0.0f64, 0.0f64);
        for i in 0..grid.len() {
            plus = plus.max((tr.transition(i, 0, 0) - g.at(i)).abs());
            minus = minus.max((tr.transition(i, 1, 1) - 1.0).abs());
        }
        rec.at_most("kappa_- = 0: |T++ - g++|", plus, 1e-6);
        rec.at_most("kappa_- = 0: |T-- - 1|", minus, 1e-6);
        Ok(())
    })
}

fn convergence_order(scale: f64) -> Outcome {
    run(11, "convergence order under step halving", scale, |rec, _| {
        let coarse = closed_form_errors(2e-3)?;
        let fine = closed_form_errors(1e-3)?;
        let worst = |e: (f64, f64, f64)| e.0.max(e.1).max(e.2);
        rec.at_least("error ratio h=2e-3 / h=1e-3", worst(coarse) / worst(fine), 3.5);
        Ok(())
    })
}

/// Whether the failing criteria are exactly the documented ones.
pub fn matches_known_failures(outcomes: &[Outcome]) -> bool {
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    let expected: Vec<u8> = KNOWN_FAILURES
        .iter()
        .copied()
        .filter(|id| outcomes.iter().any(|o| o.id == *id))
        .collect();
    failed == expected
}
