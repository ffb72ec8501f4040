//! TOML run configuration.
//!
//! ```toml
//! [model]
//! kind = "two-level"
//! gamma = 1.0
//! kappa_plus = 0.1875
//! kappa_minus = 0.12
//!
//! [grid]
//! h = 1e-3
//! horizon = 20.0
//! ```

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qsmp::classical::validate_column_stochastic;
use qsmp::quantum::JumpMaps;
use qsmp::{
    CMatrix64, MarkovSpec64, MemoryFunction64, QuantumKernelSpec64, SemiMarkovSpec64, TimeGrid64, TwoLevelParams64,
    WaitingTime64,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: Model,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Model {
    SemiMarkov {
        pi: Vec<Vec<f64>>,
        waiting: Vec<WaitingConfig>,
        #[serde(default)]
        initial: usize,
    },
    /// Rates `Γ_mn` of jumps `n → m`.
    Markov {
        rates: Vec<Vec<f64>>,
        #[serde(default)]
        initial: usize,
    },
    TwoLevel {
        gamma: f64,
        kappa_plus: f64,
        kappa_minus: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho0: Option<StateConfig>,
    },
    /// Lattice kernel with local energies `ε_n`.
    Quantum {
        pi: Vec<Vec<f64>>,
        memory: Vec<MemoryConfig>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        energies: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho0: Option<StateConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WaitingConfig {
    Exponential { rate: f64 },
    SpecialErlang { rate: f64, order: u32 },
    GeneralizedErlang { rates: Vec<f64> },
    MultiExponential { weights: Vec<f64>, rates: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MemoryConfig {
    Zero,
    /// `weight · 2δ(τ)`.
    Markov { weight: f64 },
    Exponential { amplitude: f64, rate: f64 },
    /// Memory function of a waiting-time law with a closed form.
    Waiting { waiting: WaitingConfig },
}

/// Initial density matrix, real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub re: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { h: 1e-3, horizon: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trajectories: usize,
    /// Number of equally spaced Monte Carlo sample times in `(0, horizon]`.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trajectories: 100_000,
            samples: 20,
        }
    }
}

/// A parsed configuration together with the hash of its source text.
pub struct Loaded {
    pub config: Config,
    pub hash: String,
}

pub fn load(path: &Path) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = parse(&text).with_context(|| format!("in {}", path.display()))?;
    let hash = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(Loaded { config, hash })
}

pub fn parse(text: &str) -> anyhow::Result<Config> {
    let config: Config = toml::from_str(text)?;
    config.validate()?;
    Ok(config)
}

impl Config {
    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.time_grid()?;
        if self.run.trajectories == 0 {
            bail!("run.trajectories: must be positive");
        }
        if self.run.samples == 0 {
            bail!("run.samples: must be positive");
        }
        match &self.model {
            Model::SemiMarkov { initial, .. } => {
                let spec = self.semi_markov()?;
                check_initial(*initial, spec.states())
            }
            Model::Markov { initial, .. } => {
                let spec = self.markov()?;
                check_initial(*initial, spec.states())
            }
            Model::TwoLevel { .. } | Model::Quantum { .. } => {
                let spec = self.quantum()?;
                self.initial_state(spec.dim())?;
                Ok(())
            }
        }
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn time_grid(&self) -> anyhow::Result<TimeGrid64> {
        TimeGrid64::with_horizon(self.grid.h, self.grid.horizon).context("grid")
    }

    pub fn is_quantum(&self) -> bool {
        matches!(self.model, Model::TwoLevel { .. } | Model::Quantum { .. })
    }

    pub fn semi_markov(&self) -> anyhow::Result<SemiMarkovSpec64> {
        match &self.model {
            Model::SemiMarkov { pi, waiting, .. } => {
                let waiting = waiting
                    .iter()
                    .enumerate()
                    .map(|(n, w)| w.build().with_context(|| format!("model.waiting[{n}]")))
                    .collect::<anyhow::Result<_>>()?;
                validate_column_stochastic("model.pi", pi)?;
                Ok(SemiMarkovSpec64::new(pi.clone(), waiting)?)
            }
            Model::Markov { .. } => Ok(SemiMarkovSpec64::from_markov(&self.markov()?)?),
            _ => bail!("model.kind: a classical model (semi-markov or markov) is required"),
        }
    }

    pub fn markov(&self) -> anyhow::Result<MarkovSpec64> {
        match &self.model {
            Model::Markov { rates, .. } => Ok(MarkovSpec64::new(rates.clone())?),
            _ => bail!("model.kind: markov required"),
        }
    }

    pub fn quantum(&self) -> anyhow::Result<QuantumKernelSpec64> {
        match &self.model {
            Model::TwoLevel {
                gamma,
                kappa_plus,
                kappa_minus,
                ..
            } => Ok(QuantumKernelSpec64::two_level(&TwoLevelParams64::new(
                *gamma,
                *kappa_plus,
                *kappa_minus,
            )?)?),
            Model::Quantum {
                pi, memory, energies, ..
            } => {
                let memory: Vec<MemoryFunction64> = memory
                    .iter()
                    .enumerate()
                    .map(|(n, m)| m.build().with_context(|| format!("model.memory[{n}]")))
                    .collect::<anyhow::Result<_>>()?;
                let energies = match energies {
                    Some(e) if e.len() != memory.len() => {
                        bail!("model.energies: {} values for {} levels", e.len(), memory.len())
                    }
                    Some(e) => e.iter().map(|&v| MemoryFunction64::markov(v)).collect(),
                    None => vec![MemoryFunction64::zero(); memory.len()],
                };
                validate_column_stochastic("model.pi", pi)?;
                Ok(QuantumKernelSpec64::new(energies, memory, JumpMaps::Lattice(pi.clone()))?)
            }
            _ => bail!("model.kind: a quantum model (two-level or quantum) is required"),
        }
    }

    /// Initial density matrix; `|0⟩⟨0|` unless given.
    pub fn initial_state(&self, dim: usize) -> anyhow::Result<CMatrix64> {
        let state = match &self.model {
            Model::TwoLevel { rho0, .. } | Model::Quantum { rho0, .. } => rho0.as_ref(),
            _ => None,
        };
        let Some(state) = state else {
            return Ok(CMatrix64::unit(dim, 0, 0));
        };
        let shape_ok = |m: &Vec<Vec<f64>>| m.len() == dim && m.iter().all(|r| r.len() == dim);
        if !shape_ok(&state.re) || state.im.as_ref().is_some_and(|im| !shape_ok(im)) {
            bail!("model.rho0: expected {dim}x{dim} matrices");
        }
        let rho = CMatrix64::from_fn(dim, dim, |r, c| {
            let im = state.im.as_ref().map_or(0.0, |m| m[r][c]);
            qsmp::scalar::C::new(state.re[r][c], im)
        });
        qsmp::DensityMatrix64::new(rho.clone()).context("model.rho0")?;
        Ok(rho)
    }

    pub fn initial_index(&self) -> usize {
        match self.model {
            Model::SemiMarkov { initial, .. } | Model::Markov { initial, .. } => initial,
            _ => 0,
        }
    }
}

fn check_initial(initial: usize, states: usize) -> anyhow::Result<()> {
    if initial >= states {
        bail!("model.initial: state {initial} out of range for {states} states");
    }
    Ok(())
}

impl WaitingConfig {
    pub fn build(&self) -> qsmp::Result<WaitingTime64> {
        match self {
            Self::Exponential { rate } => WaitingTime64::exponential(*rate),
            Self::SpecialErlang { rate, order } => WaitingTime64::special_erlang(*rate, *order),
            Self::GeneralizedErlang { rates } => WaitingTime64::generalized_erlang(rates.clone()),
            Self::MultiExponential { weights, rates } => WaitingTime64::multi_exponential(weights.clone(), rates.clone()),
        }
    }
}

impl MemoryConfig {
    pub fn build(&self) -> qsmp::Result<MemoryFunction64> {
        Ok(match self {
            Self::Zero => MemoryFunction64::zero(),
            Self::Markov { weight } => MemoryFunction64::markov(*weight),
            Self::Exponential { amplitude, rate } => MemoryFunction64::exponential(*amplitude, *rate),
            Self::Waiting { waiting } => waiting.build()?.memory_function()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LEVEL: &str = r#"
[model]
kind = "two-level"
gamma = 1.0
kappa_plus = 0.1875
kappa_minus = 0.12
"#;

    #[test]
    fn defaults_fill_in() {
        let c = parse(TWO_LEVEL).unwrap();
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!(c.run.seed, 1);
        assert_eq!(c.quantum().unwrap().dim(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let sources = [
            TWO_LEVEL,
            r#"
[model]
kind = "semi-markov"
pi = [[0.0, 1.0], [1.0, 0.0]]
waiting = [{ kind = "special-erlang", rate = 1.0, order = 3 }, { kind = "multi-exponential", weights = [0.5, 0.5], rates = [1.0, 3.0] }]
initial = 1
[grid]
h = 0.01
horizon = 5.0
[run]
seed = 9
trajectories = 1000
samples = 4
"#,
            r#"
[model]
kind = "quantum"
pi = [[0.0, 1.0], [1.0, 0.0]]
memory = [{ kind = "markov", weight = 0.5 }, { kind = "waiting", waiting = { kind = "exponential", rate = 2.0 } }]
energies = [0.3, -0.3]
rho0 = { re = [[0.5, 0.5], [0.5, 0.5]] }
"#,
        ];
        for src in sources {
            let c = parse(src).unwrap();
            assert_eq!(parse(&c.echo()).unwrap(), c);
        }
    }

    #[test]
    fn errors_name_the_field() {
        let bad_pi = r#"
[model]
kind = "semi-markov"
pi = [[0.5, 1.0], [0.4, 0.0]]
waiting = [{ kind = "exponential", rate = 1.0 }, { kind = "exponential", rate = 1.0 }]
"#;
        let msg = format!("{:#}", parse(bad_pi).unwrap_err());
        assert!(msg.contains("pi"), "{msg}");

        let bad_rate = TWO_LEVEL.replace("gamma = 1.0", "gamma = -1.0");
        let msg = format!("{:#}", parse(&bad_rate).unwrap_err());
        assert!(msg.contains("gamma"), "{msg}");

        let unknown = format!("{TWO_LEVEL}\nextra = 1\n");
        assert!(parse(&unknown).is_err());

        let bad_grid = format!("{TWO_LEVEL}\n[grid]\nh = 0.0\nhorizon = 1.0\n");
        let msg = format!("{:#}", parse(&bad_grid).unwrap_err());
        assert!(msg.contains("grid"), "{msg}");
    }
}
