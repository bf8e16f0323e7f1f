//! Selective flow alignment.
//!
//! Each generated coupling looks up the demonstration whose observation is
//! nearest to its own. If the generated action lies strictly within `delta`
//! of that demonstration's action, the action is snapped onto it; otherwise
//! the generated action is kept, which preserves alternative modes the expert
//! data also supports elsewhere.

use serde::{Deserialize, Serialize};

use crate::envs::Demonstration;
use crate::error::{Error, Result};
use crate::flow_train::{Coupling, CouplingSet, Source};
use crate::velocity_net::{Normalizer, Space};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Replacement threshold on the Euclidean action distance, normalized units.
    pub delta: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { delta: 0.5 }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("delta must be positive, got {}", self.delta)))
        }
    }
}

/// Demonstrations in normalized observation and action space.
#[derive(Clone, Debug)]
pub struct ExpertIndex {
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nearest<'a> {
    pub index: usize,
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl ExpertIndex {
    pub fn new(obs: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if obs.len() != actions.len() {
            return Err(Error::invalid("expert index: obs/action count mismatch"));
        }
        Ok(Self { obs, actions })
    }

    pub fn from_demos(demos: &[Demonstration], norm: &Normalizer) -> Result<Self> {
        let obs = demos
            .iter()
            .map(|d| norm.normalize(&d.obs, Space::Obs))
            .collect::<Result<_>>()?;
        let actions = demos
            .iter()
            .map(|d| norm.normalize(&d.action, Space::Action))
            .collect::<Result<_>>()?;
        Self::new(obs, actions)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i]
    }

    /// Exhaustive scan for the closest observation; ties go to the lowest index.
    pub fn nearest_expert(&self, obs: &[f64]) -> Result<Nearest<'_>> {
        if self.is_empty() {
            return Err(Error::invalid("nearest_expert: no demonstrations"));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, o) in self.obs.iter().enumerate() {
            if o.len() != obs.len() {
                return Err(Error::invalid("nearest_expert: observation dim mismatch"));
            }
            let d = sq_dist(o, obs);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        Ok(Nearest {
            index: best,
            obs: &self.obs[best],
            action: &self.actions[best],
            distance: best_d.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub record: Coupling,
    /// Distance from the generated action to the nearest expert's action.
    pub action_distance: f64,
}

/// Snaps one record onto its nearest expert action when strictly within `delta`.
/// Noise and observation are never modified.
pub fn align_coupling(coupling: &Coupling, experts: &ExpertIndex, cfg: &AlignConfig) -> Result<Alignment> {
    cfg.validate()?;
    let nearest = experts.nearest_expert(&coupling.obs)?;
    if nearest.action.len() != coupling.action.len() {
        return Err(Error::invalid("align_coupling: action dim mismatch"));
    }
    let action_distance = sq_dist(&coupling.action, nearest.action).sqrt();
    let mut record = coupling.clone();
    if action_distance < cfg.delta {
        record.action = nearest.action.to_vec();
        record.replaced = true;
    } else {
        record.replaced = false;
    }
    Ok(Alignment {
        record,
        action_distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub total: usize,
    pub replaced: usize,
    pub fraction: f64,
    /// Mean pre-replacement action distance over replaced records.
    pub mean_replaced_distance: Option<f64>,
    /// Mean action distance over preserved records.
    pub mean_preserved_distance: Option<f64>,
}

/// Aligns every record in order and tags the result as `sefa`.
pub fn align_dataset(
    couplings: &CouplingSet,
    experts: &ExpertIndex,
    cfg: &AlignConfig,
) -> Result<(CouplingSet, AlignmentReport)> {
    if couplings.is_empty() {
        return Err(Error::invalid("align_dataset: empty coupling set"));
    }
    cfg.validate()?;
    let mut records = Vec::with_capacity(couplings.len());
    let (mut replaced_sum, mut preserved_sum) = (0.0, 0.0);
    let mut replaced = 0usize;
    for c in &couplings.records {
        let Alignment {
            mut record,
            action_distance,
        } = align_coupling(c, experts, cfg)?;
        if record.replaced {
            replaced += 1;
            replaced_sum += action_distance;
        } else {
            preserved_sum += action_distance;
        }
        record.source = Source::Sefa;
        records.push(record);
    }
    let total = records.len();
    let preserved = total - replaced;
    let report = AlignmentReport {
        total,
        replaced,
        fraction: replaced as f64 / total as f64,
        mean_replaced_distance: (replaced > 0).then(|| replaced_sum / replaced as f64),
        mean_preserved_distance: (preserved > 0).then(|| preserved_sum / preserved as f64),
    };
    Ok((CouplingSet::new(records), report))
}
