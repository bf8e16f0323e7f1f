//! Flow-matching regression and the training loop shared by every stage.
//!
//! Time runs from `s = 0` (noise) to `s = 1` (action). Along the straight
//! interpolant the velocity target is `action - noise`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, AdamWState, DeterministicRng, Tape, TensorBuffer};
use crate::velocity_net::VelocityNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Groundtruth,
    Base,
    Reflow,
    Sefa,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Groundtruth => "groundtruth",
            Source::Base => "base",
            Source::Reflow => "reflow",
            Source::Sefa => "sefa",
        }
    }
}

/// A (noise, action, observation) triple in normalized space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub obs: Vec<f64>,
    pub noise: Vec<f64>,
    pub action: Vec<f64>,
    pub source: Source,
    pub replaced: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CouplingSet {
    pub records: Vec<Coupling>,
}

impl CouplingSet {
    pub fn new(records: Vec<Coupling>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks dimensional consistency and the ground-truth `replaced` rule.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let (ad, od) = (first.action.len(), first.obs.len());
        for (i, r) in self.records.iter().enumerate() {
            if r.noise.len() != r.action.len() {
                return Err(Error::Validation(format!(
                    "record {i}: noise dim {} != action dim {}",
                    r.noise.len(),
                    r.action.len()
                )));
            }
            if r.action.len() != ad || r.obs.len() != od {
                return Err(Error::Validation(format!("record {i}: dimensions differ from record 0")));
            }
            if r.source == Source::Groundtruth && r.replaced {
                return Err(Error::Validation(format!("record {i}: ground-truth record marked replaced")));
            }
            if !r.noise.iter().chain(&r.action).chain(&r.obs).all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("record {i}: non-finite value")));
            }
        }
        Ok(())
    }
}

/// `(1 - s) * noise + s * action`.
pub fn interpolate(noise: &[f64], action: &[f64], s: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("interpolate: s = {s} outside [0, 1]")));
    }
    if noise.len() != action.len() {
        return Err(Error::invalid("interpolate: dimension mismatch"));
    }
    Ok(noise
        .iter()
        .zip(action)
        .map(|(&z, &a)| (1.0 - s) * z + s * a)
        .collect())
}

#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    /// One gradient per parameter, in [`VelocityNet::params`] order.
    pub grads: Vec<TensorBuffer>,
}

/// Mean over the batch of `|action - noise - v(a_s, s, obs)|^2`, with parameter gradients.
pub fn flow_matching_loss(net: &VelocityNet, batch: &[Coupling], times: &[f64]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::invalid("flow_matching_loss: empty batch"));
    }
    if times.len() != batch.len() {
        return Err(Error::invalid("flow_matching_loss: one time per record required"));
    }
    let ad = net.arch.action_dim;
    let mut points = Vec::with_capacity(batch.len() * ad);
    let mut obs = Vec::with_capacity(batch.len() * net.arch.obs_dim);
    let mut target = Vec::with_capacity(batch.len() * ad);
    for (rec, &s) in batch.iter().zip(times) {
        if rec.action.len() != ad || rec.noise.len() != ad {
            return Err(Error::invalid("flow_matching_loss: record dims do not match the network"));
        }
        points.extend(interpolate(&rec.noise, &rec.action, s)?);
        obs.extend_from_slice(&rec.obs);
        target.extend(rec.action.iter().zip(&rec.noise).map(|(a, z)| a - z));
    }
    let input = net.pack_inputs(&points, times, &obs)?;

    let mut tape = Tape::new();
    let (pred, param_ids) = net.record(&mut tape, input)?;
    let target = tape.leaf(TensorBuffer::new(vec![batch.len(), ad], target)?, false);
    let neg = tape.scale(pred, -1.0)?;
    let residual = tape.add(target, neg)?;
    let sq = tape.sum_squares(residual)?;
    let loss_node = tape.scale(sq, 1.0 / batch.len() as f64)?;
    let loss = tape.value(loss_node).data()[0];

    let mut grads = tape.backward(loss_node)?;
    let grads = param_ids
        .iter()
        .map(|&id| grads.take(id).expect("parameters are differentiable"))
        .collect();
    Ok(LossAndGrads { loss, grads })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSampling {
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub time_sampling: TimeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
            time_sampling: TimeSampling::Uniform,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: VelocityNet,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

/// Runs `epochs * ceil(N / batch)` AdamW steps starting from a copy of `init`.
///
/// Each step draws a fresh `s ~ U[0, 1]` per record. Ground-truth records pair
/// their action with fresh Gaussian noise every step; generated couplings keep
/// their stored noise.
pub fn train_policy(init: &VelocityNet, data: &CouplingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("train_policy: epochs and batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("train_policy: empty dataset"));
    }
    let (ad, od) = (init.arch.action_dim, init.arch.obs_dim);
    if data.records.iter().any(|r| r.action.len() != ad || r.noise.len() != ad || r.obs.len() != od) {
        return Err(Error::invalid("train_policy: dataset dims do not match the network"));
    }

    let mut net = init.clone();
    let mut opt = AdamWState::new(cfg.optimizer, &net.params());
    let mut rng = DeterministicRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Coupling> = chunk
                .iter()
                .map(|&i| {
                    let rec = &data.records[i];
                    let mut rec = rec.clone();
                    if rec.source == Source::Groundtruth {
                        rec.noise = rng.normal_vec(ad);
                    }
                    rec
                })
                .collect();
            let times: Vec<f64> = (0..batch.len()).map(|_| rng.uniform()).collect();
            let LossAndGrads { loss, grads } = flow_matching_loss(&net, &batch, &times)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence {
                    step,
                    detail: format!("loss became {loss}"),
                });
            }
            let grad_refs: Vec<&TensorBuffer> = grads.iter().collect();
            opt.step(&mut net.params_mut(), &grad_refs).map_err(|e| match e {
                Error::TrainingDivergence { detail, .. } => Error::TrainingDivergence { step, detail },
                other => other,
            })?;
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        net,
        epoch_losses,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_net::init_net;

    fn rec(noise: Vec<f64>, action: Vec<f64>, obs: Vec<f64>) -> Coupling {
        Coupling {
            obs,
            noise,
            action,
            source: Source::Base,
            replaced: false,
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let z = [0.3, -1.2];
        let a = [2.0, -2.0];
        assert_eq!(interpolate(&z, &a, 0.0).unwrap(), z.to_vec());
        assert_eq!(interpolate(&z, &a, 1.0).unwrap(), a.to_vec());
        assert_eq!(interpolate(&[0.0, 0.0], &a, 0.5).unwrap(), vec![1.0, -1.0]);
        assert!(interpolate(&z, &a, 1.01).is_err());
    }

    /// Net whose output is `bias` everywhere (all weights zero).
    fn constant_net(action_dim: usize, obs_dim: usize, value: f64) -> VelocityNet {
        let mut net = init_net(action_dim, obs_dim, &mut DeterministicRng::new(0)).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        net.layers.last_mut().unwrap().bias.data_mut().iter_mut().for_each(|x| *x = value);
        net
    }

    #[test]
    fn exact_field_has_zero_loss() {
        let net = constant_net(2, 1, 1.0);
        let batch = vec![
            rec(vec![0.0, 0.5], vec![1.0, 1.5], vec![0.2]),
            rec(vec![-1.0, 2.0], vec![0.0, 3.0], vec![-0.4]),
        ];
        let out = flow_matching_loss(&net, &batch, &[0.1, 0.7]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn hand_computed_single_record_loss() {
        let net = constant_net(1, 1, 1.0);
        let out = flow_matching_loss(&net, &[rec(vec![0.0], vec![2.0], vec![0.0])], &[0.5]).unwrap();
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let net = constant_net(1, 1, 1.0);
        assert!(flow_matching_loss(&net, &[], &[]).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let net = constant_net(1, 1, 0.0);
        let data = CouplingSet::new(vec![rec(vec![0.0], vec![1.0], vec![0.0])]);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_policy(&net, &data, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn validate_flags_dim_mismatch() {
        let set = CouplingSet::new(vec![rec(vec![0.0, 1.0], vec![1.0], vec![0.0])]);
        assert!(set.validate().is_err());
        let mut gt = rec(vec![0.0], vec![1.0], vec![0.0]);
        gt.source = Source::Groundtruth;
        gt.replaced = true;
        assert!(CouplingSet::new(vec![gt]).validate().is_err());
    }
}
