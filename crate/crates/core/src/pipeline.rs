//! End-to-end stage ordering: demos, base flow, reflow, alignment, aligned retraining.

use serde::{Deserialize, Serialize};

use crate::envs::{generate_demos, Demonstration, EnvId};
use crate::error::{Error, Result};
use crate::flow_train::{train_policy, Coupling, CouplingSet, Source, TrainConfig};
use crate::numerics::{AdamWConfig, DeterministicRng};
use crate::reflow::{generate_couplings, run_reflow_rounds, CouplingGenConfig};
use crate::sefa::{align_dataset, AlignConfig, AlignmentReport, ExpertIndex};
use crate::solvers::SolverConfig;
use crate::velocity_net::{init_net, Normalizer, Space, VelocityNet};

/// Which weights the aligned stage starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SefaInit {
    Reflow,
    Cold,
}

/// Which couplings feed the alignment step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignInput {
    /// Fresh couplings sampled from the reflowed policy.
    ReflowPolicy,
    /// The couplings the reflow policy was trained on.
    ReflowTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env: EnvId,
    pub demo_episodes: usize,
    pub demo_seed: u64,
    pub seed: u64,
    pub base: TrainConfig,
    pub reflow: TrainConfig,
    pub sefa: TrainConfig,
    pub couplings_per_obs: usize,
    pub base_solver: SolverConfig,
    pub reflow_solver: SolverConfig,
    pub reflow_rounds: usize,
    pub align: AlignConfig,
    pub sefa_init: SefaInit,
    pub align_input: AlignInput,
}

fn stage(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        optimizer: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

impl PipelineConfig {
    /// Desk-scale settings used by the test suites and the README walkthrough.
    pub fn desk(env: EnvId, seed: u64) -> Self {
        let (episodes, base_epochs, base_lr) = match env {
            EnvId::Bimodal => (200, 300, 1e-3),
            EnvId::Pushblock => (100, 600, 3e-3),
        };
        Self {
            env,
            demo_episodes: episodes,
            demo_seed: seed,
            seed,
            base: stage(base_epochs, base_lr, seed.wrapping_add(1)),
            reflow: stage(100, 1e-3, seed.wrapping_add(2)),
            sefa: stage(100, 1e-3, seed.wrapping_add(3)),
            couplings_per_obs: 10,
            base_solver: SolverConfig::euler(100),
            reflow_solver: SolverConfig::euler(1),
            reflow_rounds: 1,
            align: AlignConfig::default(),
            sefa_init: SefaInit::Reflow,
            align_input: AlignInput::ReflowPolicy,
        }
    }
}

/// Ground-truth training records: expert actions paired with placeholder noise,
/// which training resamples every step.
pub fn groundtruth_couplings(demos: &[Demonstration], norm: &Normalizer) -> Result<CouplingSet> {
    let records = demos
        .iter()
        .map(|d| {
            let action = norm.normalize(&d.action, Space::Action)?;
            Ok(Coupling {
                obs: norm.normalize(&d.obs, Space::Obs)?,
                noise: vec![0.0; action.len()],
                action,
                source: Source::Groundtruth,
                replaced: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CouplingSet::new(records))
}

pub fn fit_normalizer(demos: &[Demonstration]) -> Result<Normalizer> {
    let obs: Vec<Vec<f64>> = demos.iter().map(|d| d.obs.clone()).collect();
    let actions: Vec<Vec<f64>> = demos.iter().map(|d| d.action.clone()).collect();
    Normalizer::fit(&obs, &actions)
}

/// Fresh network with the normalizer fitted to `demos`.
pub fn fresh_net(demos: &[Demonstration], seed: u64) -> Result<VelocityNet> {
    let norm = fit_normalizer(demos)?;
    init_net(norm.action_dim(), norm.obs_dim(), &mut DeterministicRng::new(seed))?.with_normalizer(norm)
}

pub fn train_base(demos: &[Demonstration], init_seed: u64, cfg: &TrainConfig) -> Result<VelocityNet> {
    let init = fresh_net(demos, init_seed)?;
    let data = groundtruth_couplings(demos, init.normalizer()?)?;
    Ok(train_policy(&init, &data, cfg)?.net)
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub demos: Vec<Demonstration>,
    pub base: VelocityNet,
    pub base_couplings: CouplingSet,
    pub reflow: VelocityNet,
    pub reflow_couplings: CouplingSet,
    pub aligned: CouplingSet,
    pub alignment: AlignmentReport,
    pub sefa: VelocityNet,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    if cfg.couplings_per_obs == 0 {
        return Err(Error::invalid("couplings per observation must be at least 1"));
    }
    let demos = generate_demos(cfg.env, cfg.demo_episodes, cfg.demo_seed)?;
    let base = train_base(&demos, cfg.seed, &cfg.base)?;

    let first_gen = CouplingGenConfig {
        k: cfg.couplings_per_obs,
        solver: cfg.base_solver,
        seed: cfg.seed.wrapping_add(10),
        source: Source::Base,
    };
    let later_gen = CouplingGenConfig {
        solver: cfg.reflow_solver,
        source: Source::Reflow,
        ..first_gen.clone()
    };
    let mut rounds = run_reflow_rounds(&base, &demos, &first_gen, &later_gen, &cfg.reflow, cfg.reflow_rounds)?;
    let base_couplings = rounds[0].couplings.clone();
    let last = rounds.pop().expect("at least one round");
    let reflow = last.net;

    let reflow_couplings = match cfg.align_input {
        AlignInput::ReflowPolicy => {
            let gen = CouplingGenConfig {
                seed: cfg.seed.wrapping_add(20),
                ..later_gen
            };
            generate_couplings(&reflow, reflow.normalizer()?, &demos, &gen)?
        }
        AlignInput::ReflowTraining => last.couplings,
    };
    let experts = ExpertIndex::from_demos(&demos, reflow.normalizer()?)?;
    let (aligned, alignment) = align_dataset(&reflow_couplings, &experts, &cfg.align)?;

    let sefa_init = match cfg.sefa_init {
        SefaInit::Reflow => reflow.clone(),
        SefaInit::Cold => fresh_net(&demos, cfg.seed.wrapping_add(30))?,
    };
    let sefa = train_policy(&sefa_init, &aligned, &cfg.sefa)?.net;

    Ok(PipelineRun {
        demos,
        base,
        base_couplings,
        reflow,
        reflow_couplings,
        aligned,
        alignment,
        sefa,
    })
}
