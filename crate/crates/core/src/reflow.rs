//! Coupling generation from a trained field and reflow retraining.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::envs::Demonstration;
use crate::error::{Error, Result};
use crate::flow_train::{train_policy, Coupling, CouplingSet, Source, TrainConfig, TrainOutcome};
use crate::numerics::DeterministicRng;
use crate::solvers::{integrate_batch, SolverConfig};
use crate::velocity_net::{Normalizer, Space, VelocityField, VelocityNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingGenConfig {
    /// Couplings drawn per distinct observation.
    pub k: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Tag recorded on every generated record.
    pub source: Source,
}

impl CouplingGenConfig {
    /// Defaults for couplings drawn from a base policy.
    pub fn base(seed: u64) -> Self {
        Self {
            k: 10,
            solver: SolverConfig::euler(100),
            seed,
            source: Source::Base,
        }
    }

    /// Defaults for couplings drawn from a reflowed policy.
    pub fn reflow(seed: u64) -> Self {
        Self {
            k: 10,
            solver: SolverConfig::euler(1),
            seed,
            source: Source::Reflow,
        }
    }
}

/// Normalized observations of `demos`, deduplicated by exact equality and kept
/// in first-appearance order.
pub fn distinct_observations(demos: &[Demonstration], norm: &Normalizer) -> Result<Vec<Vec<f64>>> {
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let mut out = Vec::new();
    for d in demos {
        let o = norm.normalize(&d.obs, Space::Obs)?;
        let key: Vec<u64> = o.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key, ()).is_none() {
            out.push(o);
        }
    }
    Ok(out)
}

const GENERATION_BLOCK: usize = 64;

/// Integrates `k` fresh noises per distinct demo observation. Observation `i`
/// draws its noise from `DeterministicRng::derive(seed, i)`; records are ordered
/// by (observation, draw).
pub fn generate_couplings<F: VelocityField>(
    field: &F,
    norm: &Normalizer,
    demos: &[Demonstration],
    cfg: &CouplingGenConfig,
) -> Result<CouplingSet> {
    if demos.is_empty() {
        return Err(Error::invalid("generate_couplings: no demonstrations"));
    }
    if cfg.k == 0 {
        return Err(Error::invalid("generate_couplings: k must be at least 1"));
    }
    cfg.solver.validate()?;
    let observations = distinct_observations(demos, norm)?;
    let ad = field.action_dim();

    let mut records = Vec::with_capacity(observations.len() * cfg.k);
    for (block_idx, block) in observations.chunks(GENERATION_BLOCK).enumerate() {
        let first = block_idx * GENERATION_BLOCK;
        let mut noises = Vec::with_capacity(block.len() * cfg.k);
        let mut obs = Vec::with_capacity(block.len() * cfg.k);
        for (j, o) in block.iter().enumerate() {
            let mut rng = DeterministicRng::derive(cfg.seed, (first + j) as u64);
            for _ in 0..cfg.k {
                noises.push(rng.normal_vec(ad));
                obs.push(o.clone());
            }
        }
        let actions = match integrate_batch(field, &noises, &obs, &cfg.solver) {
            Ok(a) => a,
            Err(e) => return Err(locate_failure(field, &noises, &obs, cfg, first, e)),
        };
        for ((noise, action), o) in noises.into_iter().zip(actions).zip(obs) {
            records.push(Coupling {
                obs: o,
                noise,
                action,
                source: cfg.source,
                replaced: false,
            });
        }
    }
    Ok(CouplingSet::new(records))
}

fn locate_failure<F: VelocityField>(
    field: &F,
    noises: &[Vec<f64>],
    obs: &[Vec<f64>],
    cfg: &CouplingGenConfig,
    first: usize,
    err: Error,
) -> Error {
    for (i, (z, o)) in noises.chunks(cfg.k).zip(obs.chunks(cfg.k)).enumerate() {
        if let Err(e) = integrate_batch(field, z, o, &cfg.solver) {
            return Error::IntegrationFailure {
                step: match e {
                    Error::IntegrationFailure { step, .. } => step,
                    _ => 0,
                },
                detail: format!("while generating couplings for observation {}: {e}", first + i),
            };
        }
    }
    err
}

/// Mean squared transport distance `|action - noise|^2`.
pub fn transport_cost(couplings: &CouplingSet) -> Result<f64> {
    if couplings.is_empty() {
        return Err(Error::invalid("transport_cost: empty coupling set"));
    }
    let total: f64 = couplings
        .records
        .iter()
        .map(|r| r.action.iter().zip(&r.noise).map(|(a, z)| (a - z).powi(2)).sum::<f64>())
        .sum();
    Ok(total / couplings.len() as f64)
}

/// Record indices grouped by exact observation, in first-appearance order.
pub fn observation_groups(couplings: &CouplingSet) -> Vec<Vec<usize>> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in couplings.records.iter().enumerate() {
        let key: Vec<u64> = r.obs.iter().map(|x| x.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Transport cost after randomly permuting actions among the noises that
/// share an observation.
pub fn repaired_transport_cost(couplings: &CouplingSet, rng: &mut DeterministicRng) -> Result<f64> {
    if couplings.is_empty() {
        return Err(Error::invalid("repaired_transport_cost: empty coupling set"));
    }
    let mut total = 0.0;
    for group in observation_groups(couplings) {
        let mut perm = group.clone();
        rng.shuffle(&mut perm);
        for (&i, &j) in group.iter().zip(&perm) {
            let noise = &couplings.records[i].noise;
            let action = &couplings.records[j].action;
            total += action.iter().zip(noise).map(|(a, z)| (a - z).powi(2)).sum::<f64>();
        }
    }
    Ok(total / couplings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportComparison {
    pub coupled_cost: f64,
    pub repaired_costs: Vec<f64>,
    /// Re-pairings whose cost is at least the generated coupling's.
    pub wins: usize,
}

pub fn compare_with_repairings(couplings: &CouplingSet, repairings: usize, seed: u64) -> Result<TransportComparison> {
    let coupled_cost = transport_cost(couplings)?;
    let mut rng = DeterministicRng::new(seed);
    let repaired_costs = (0..repairings)
        .map(|_| repaired_transport_cost(couplings, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let wins = repaired_costs.iter().filter(|&&c| coupled_cost <= c).count();
    Ok(TransportComparison {
        coupled_cost,
        repaired_costs,
        wins,
    })
}

#[derive(Clone, Debug)]
pub struct ReflowRound {
    pub net: VelocityNet,
    /// Couplings generated from the previous net and used for training.
    pub couplings: CouplingSet,
    pub outcome: TrainOutcome,
}

/// Generates couplings from `prev`, then trains a copy of `prev` on them.
pub fn run_reflow_round(
    prev: &VelocityNet,
    demos: &[Demonstration],
    gen_cfg: &CouplingGenConfig,
    train_cfg: &TrainConfig,
) -> Result<ReflowRound> {
    let norm = prev.normalizer()?;
    let couplings = generate_couplings(prev, norm, demos, gen_cfg)?;
    let outcome = train_policy(prev, &couplings, train_cfg)?;
    Ok(ReflowRound {
        net: outcome.net.clone(),
        couplings,
        outcome,
    })
}

/// Repeats reflow `rounds` times. The first round generates with `first_gen`,
/// later rounds with `later_gen` (seeds offset by the round index).
pub fn run_reflow_rounds(
    base: &VelocityNet,
    demos: &[Demonstration],
    first_gen: &CouplingGenConfig,
    later_gen: &CouplingGenConfig,
    train_cfg: &TrainConfig,
    rounds: usize,
) -> Result<Vec<ReflowRound>> {
    if rounds == 0 {
        return Err(Error::invalid("reflow needs at least one round"));
    }
    let mut out: Vec<ReflowRound> = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let prev = out.last().map_or(base, |round| &round.net);
        let mut gen = if r == 0 { first_gen.clone() } else { later_gen.clone() };
        gen.seed = gen.seed.wrapping_add(r as u64);
        let mut train = train_cfg.clone();
        train.seed = train.seed.wrapping_add(r as u64);
        out.push(run_reflow_round(prev, demos, &gen, &train)?);
    }
    Ok(out)
}
