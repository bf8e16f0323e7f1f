//! Closed-loop rollouts, cross-seed success studies, and path geometry metrics.

use serde::{Deserialize, Serialize};

use crate::envs::{reset, EnvId, CHUNK_LEN, STEP_ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow_train::CouplingSet;
use crate::numerics::DeterministicRng;
use crate::sefa::AlignmentReport;
use crate::solvers::{euler_integrate_batch, sample_with, SolverConfig};
use crate::velocity_net::{Normalizer, VelocityField};

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub nfe: usize,
    pub invocations: usize,
    /// Environment state after reset and after every executed step.
    pub trajectory: Vec<Vec<f64>>,
    /// Set when sampling failed; the episode then counts as a failure.
    pub failure: Option<String>,
}

/// Runs one episode: observe, sample an action chunk, execute it fully (or
/// until the episode ends), repeat.
pub fn rollout_episode<F: VelocityField>(
    field: &F,
    norm: &Normalizer,
    env: EnvId,
    episode_seed: u64,
    solver: &SolverConfig,
    max_invocations: usize,
) -> Result<EpisodeResult> {
    if field.action_dim() != CHUNK_LEN * STEP_ACTION_DIM || norm.obs_dim() != env.obs_dim() {
        return Err(Error::invalid(format!("policy dims do not fit environment {env}")));
    }
    let mut rng = DeterministicRng::new(episode_seed);
    let mut state = reset(env, &mut rng);
    let mut trajectory = vec![state.state.clone()];
    let mut nfe = 0;
    let mut invocations = 0;
    let mut failure = None;
    while !state.terminal && invocations < max_invocations {
        let sample = match sample_with(field, norm, &state.observation(), solver, &mut rng) {
            Ok(s) => s,
            Err(e @ Error::IntegrationFailure { .. }) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        invocations += 1;
        nfe += sample.nfe;
        for step in sample.action.chunks(STEP_ACTION_DIM) {
            if state.terminal {
                break;
            }
            state.step(step)?;
            trajectory.push(state.state.clone());
        }
    }
    Ok(EpisodeResult {
        success: failure.is_none() && state.success(),
        nfe,
        invocations,
        trajectory,
        failure,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub env: EnvId,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
    pub max_invocations: usize,
}

impl EvalConfig {
    pub fn new(env: EnvId, episodes: usize, seeds: Vec<u64>, solver: SolverConfig) -> Self {
        Self {
            env,
            episodes,
            seeds,
            solver,
            max_invocations: env.horizon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.seeds.is_empty() || self.max_invocations == 0 {
            return Err(Error::invalid("eval needs at least one episode, seed and invocation"));
        }
        self.solver.validate()
    }
}

/// Seed of episode `episode` under inference seed `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    DeterministicRng::derive(seed, episode as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRate {
    pub seed: u64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub total: usize,
    pub replaced: usize,
    pub fraction: f64,
}

impl From<&AlignmentReport> for AlignmentSummary {
    fn from(r: &AlignmentReport) -> Self {
        Self {
            total: r.total,
            replaced: r.replaced,
            fraction: r.fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_seed: Vec<SeedRate>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    pub nfe_per_prediction: f64,
    pub straightness: Option<f64>,
    pub transport_cost: Option<f64>,
    pub alignment: Option<AlignmentSummary>,
    /// Episodes whose sampling failed numerically.
    pub integration_failures: usize,
}

/// Mean and population standard deviation, summed in slice order.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn success_rate_study<F: VelocityField>(field: &F, norm: &Normalizer, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut nfe = 0usize;
    let mut invocations = 0usize;
    let mut integration_failures = 0usize;
    for &seed in &cfg.seeds {
        let mut successes = 0usize;
        for e in 0..cfg.episodes {
            let ep = rollout_episode(field, norm, cfg.env, episode_seed(seed, e), &cfg.solver, cfg.max_invocations)?;
            successes += usize::from(ep.success);
            nfe += ep.nfe;
            invocations += ep.invocations;
            integration_failures += usize::from(ep.failure.is_some());
        }
        per_seed.push(SeedRate {
            seed,
            success_rate: successes as f64 / cfg.episodes as f64,
        });
    }
    let rates: Vec<f64> = per_seed.iter().map(|r| r.success_rate).collect();
    let (mean, std) = mean_and_std(&rates);
    Ok(EvalReport {
        config: cfg.clone(),
        per_seed,
        mean,
        std,
        nfe_per_prediction: if invocations == 0 { 0.0 } else { nfe as f64 / invocations as f64 },
        straightness: None,
        transport_cost: None,
        alignment: None,
        integration_failures,
    })
}

const PROBE_BLOCK: usize = 256;

/// Mean over couplings of the mean squared deviation between the velocity
/// along an Euler path and that path's overall displacement.
pub fn straightness<F: VelocityField>(field: &F, couplings: &CouplingSet, probe_steps: usize) -> Result<f64> {
    if couplings.is_empty() {
        return Err(Error::invalid("straightness: empty coupling set"));
    }
    if probe_steps == 0 {
        return Err(Error::invalid("straightness: probe steps must be at least 1"));
    }
    let ad = field.action_dim();
    let h = 1.0 / probe_steps as f64;
    let mut total = 0.0;
    for block in couplings.records.chunks(PROBE_BLOCK) {
        let n = block.len();
        let noise: Vec<f64> = block.iter().flat_map(|r| r.noise.iter().copied()).collect();
        let obs: Vec<f64> = block.iter().flat_map(|r| r.obs.iter().copied()).collect();
        let mut a = noise.clone();
        let mut velocities = Vec::with_capacity(probe_steps);
        for k in 0..probe_steps {
            let s = vec![k as f64 / probe_steps as f64; n];
            let v = field.velocity_batch(&a, &s, &obs)?;
            for (x, dv) in a.iter_mut().zip(&v) {
                *x += h * dv;
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::IntegrationFailure {
                    step: k,
                    detail: "straightness probe diverged".into(),
                });
            }
            velocities.push(v);
        }
        for i in 0..n {
            let row = i * ad..(i + 1) * ad;
            let disp: Vec<f64> = a[row.clone()].iter().zip(&noise[row.clone()]).map(|(e, s)| e - s).collect();
            let dev: f64 = velocities
                .iter()
                .map(|v| v[row.clone()].iter().zip(&disp).map(|(x, d)| (x - d).powi(2)).sum::<f64>())
                .sum();
            total += dev / probe_steps as f64;
        }
    }
    Ok(total / couplings.len() as f64)
}

/// Mean distance between one-step and `many_steps` Euler endpoints over the
/// couplings' noises and observations.
pub fn one_step_gap<F: VelocityField>(field: &F, couplings: &CouplingSet, many_steps: usize) -> Result<f64> {
    if couplings.is_empty() {
        return Err(Error::invalid("one_step_gap: empty coupling set"));
    }
    let noises: Vec<Vec<f64>> = couplings.records.iter().map(|r| r.noise.clone()).collect();
    let obs: Vec<Vec<f64>> = couplings.records.iter().map(|r| r.obs.clone()).collect();
    let mut total = 0.0;
    for (z, o) in noises.chunks(PROBE_BLOCK).zip(obs.chunks(PROBE_BLOCK)) {
        let one = euler_integrate_batch(field, z, o, 1)?;
        let many = euler_integrate_batch(field, z, o, many_steps)?;
        for (x, y) in one.iter().zip(&many) {
            total += x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / couplings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_train::{Coupling, Source};
    use crate::velocity_net::FnField;

    fn probe(noises: &[f64]) -> CouplingSet {
        CouplingSet::new(
            noises
                .iter()
                .map(|&z| Coupling {
                    obs: vec![0.0],
                    noise: vec![z],
                    action: vec![z],
                    source: Source::Base,
                    replaced: false,
                })
                .collect(),
        )
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_and_std(&[0.8, 0.6]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_and_std(&[1.0, 1.0, 1.0]), (1.0, 0.0));
    }

    #[test]
    fn straightness_of_constant_field_is_zero() {
        let field = FnField::new(1, |_: &[f64], _, _: &[f64]| vec![0.75]);
        let s = straightness(&field, &probe(&[0.0, 1.0, -2.0]), 100).unwrap();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn straightness_of_linear_time_field() {
        // Displacement is the Euler sum of 2 s_k = 0.99; mean of (2 s_k - 0.99)^2.
        let field = FnField::new(1, |_: &[f64], s: f64, _: &[f64]| vec![2.0 * s]);
        let n = 100;
        let disp: f64 = (0..n).map(|k| 2.0 * k as f64 / n as f64).sum::<f64>() / n as f64;
        let expected: f64 = (0..n).map(|k| (2.0 * k as f64 / n as f64 - disp).powi(2)).sum::<f64>() / n as f64;
        let got = straightness(&field, &probe(&[0.0]), n).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn one_step_gap_closed_forms() {
        let constant = FnField::new(1, |_: &[f64], _, _: &[f64]| vec![-0.3]);
        assert!(one_step_gap(&constant, &probe(&[0.5, 1.5]), 100).unwrap() < 1e-12);
        let growth = FnField::new(1, |a: &[f64], _, _: &[f64]| a.to_vec());
        let gap = one_step_gap(&growth, &probe(&[1.0]), 100).unwrap();
        assert!((gap - (1.01f64.powi(100) - 2.0)).abs() < 1e-12);
        assert!((gap - 0.705).abs() < 1e-3);
    }

    #[test]
    fn empty_probe_sets_are_rejected() {
        let field = FnField::new(1, |_: &[f64], _, _: &[f64]| vec![0.0]);
        assert!(straightness(&field, &CouplingSet::default(), 10).is_err());
        assert!(one_step_gap(&field, &CouplingSet::default(), 10).is_err());
    }
}
