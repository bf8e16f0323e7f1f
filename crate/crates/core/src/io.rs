//! JSON / JSON-Lines persistence for demonstrations, couplings, checkpoints and reports.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so every document survives a save/load cycle bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::Demonstration;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::flow_train::{Coupling, CouplingSet, Source, TrainConfig};
use crate::numerics::{DeterministicRng, TensorBuffer};
use crate::solvers::euler_integrate;
use crate::velocity_net::{Architecture, Dense, Normalizer, Space, VelocityNet};

pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of a byte string, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses one JSON value per line; errors name the 1-based line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.split_terminator('\n')
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

pub fn validate_demos(demos: &[Demonstration]) -> Result<()> {
    let Some(first) = demos.first() else {
        return Err(Error::Validation("demonstration file is empty".into()));
    };
    for (i, d) in demos.iter().enumerate() {
        if d.obs.len() != first.obs.len() || d.action.len() != first.action.len() {
            return Err(Error::Validation(format!("demo line {}: dimensions differ from line 1", i + 1)));
        }
        if d.obs.is_empty() || d.action.is_empty() || !all_finite(&d.obs) || !all_finite(&d.action) {
            return Err(Error::Validation(format!("demo line {}: empty or non-finite array", i + 1)));
        }
    }
    Ok(())
}

pub fn save_demos(path: &Path, demos: &[Demonstration]) -> Result<()> {
    validate_demos(demos)?;
    write_bytes(path, to_jsonl(demos)?.as_bytes())
}

pub fn load_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let demos = parse_jsonl(&read_string(path)?, path)?;
    validate_demos(&demos)?;
    Ok(demos)
}

pub fn save_couplings(path: &Path, couplings: &CouplingSet) -> Result<()> {
    couplings.validate()?;
    write_bytes(path, to_jsonl(&couplings.records)?.as_bytes())
}

pub fn load_couplings(path: &Path) -> Result<CouplingSet> {
    let records: Vec<Coupling> = parse_jsonl(&read_string(path)?, path)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{}: coupling file is empty", path.display())));
    }
    let set = CouplingSet::new(records);
    set.validate()?;
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Reflow,
    Sefa,
}

impl Stage {
    /// Tag for couplings generated by a checkpoint of this stage.
    pub fn coupling_source(self) -> Source {
        match self {
            Stage::Base => Source::Base,
            Stage::Reflow => Source::Reflow,
            Stage::Sefa => Source::Sefa,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "reflow" => Ok(Stage::Reflow),
            "sefa" => Ok(Stage::Sefa),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_hash: Option<String>,
    pub couplings_hash: Option<String>,
    pub demos_hash: Option<String>,
    /// Set when a later-stage network was trained from fresh weights.
    #[serde(default)]
    pub cold_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorValues {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: TensorValues,
}

impl NamedTensor {
    fn from_buffer(name: String, t: &TensorBuffer) -> Self {
        let values = match t.shape() {
            [_, cols] => TensorValues::Matrix(t.data().chunks(*cols).map(<[f64]>::to_vec).collect()),
            _ => TensorValues::Vector(t.data().to_vec()),
        };
        Self {
            name,
            shape: t.shape().to_vec(),
            values,
        }
    }

    fn to_buffer(&self) -> Result<TensorBuffer> {
        let data: Vec<f64> = match &self.values {
            TensorValues::Matrix(rows) => {
                if self.shape.len() != 2 || rows.len() != self.shape[0] || rows.iter().any(|r| r.len() != self.shape[1]) {
                    return Err(Error::Validation(format!("tensor {}: values do not match shape {:?}", self.name, self.shape)));
                }
                rows.concat()
            }
            TensorValues::Vector(v) => v.clone(),
        };
        if !all_finite(&data) {
            return Err(Error::Validation(format!("tensor {}: non-finite value", self.name)));
        }
        TensorBuffer::new(self.shape.clone(), data)
            .map_err(|_| Error::Validation(format!("tensor {}: values do not match shape {:?}", self.name, self.shape)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub format_version: u32,
    pub stage: Stage,
    pub architecture: Architecture,
    pub normalizer: Normalizer,
    pub weights: Vec<NamedTensor>,
    pub train_config: Option<TrainConfig>,
    pub provenance: Provenance,
}

impl CheckpointDoc {
    pub fn from_net(net: &VelocityNet, stage: Stage, train_config: Option<TrainConfig>, provenance: Provenance) -> Result<Self> {
        let normalizer = net.normalizer()?.clone();
        let weights = net
            .param_names()
            .into_iter()
            .zip(net.params())
            .map(|(name, t)| NamedTensor::from_buffer(name, t))
            .collect();
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            stage,
            architecture: net.arch.clone(),
            normalizer,
            weights,
            train_config,
            provenance,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        self.normalizer.validate()?;
        let p = &self.provenance;
        match self.stage {
            Stage::Base => {}
            Stage::Reflow if p.parent_hash.is_none() || p.couplings_hash.is_none() => {
                return Err(Error::Validation("reflow checkpoint lacks provenance hashes".into()));
            }
            Stage::Sefa if p.couplings_hash.is_none() || (p.parent_hash.is_none() && !p.cold_start) => {
                return Err(Error::Validation("sefa checkpoint lacks provenance hashes".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_net(&self) -> Result<VelocityNet> {
        self.validate()?;
        let arch = &self.architecture;
        let dims = arch.layer_dims();
        if self.weights.len() != 2 * dims.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.weights.len(),
                2 * dims.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let (w, b) = (&self.weights[2 * i], &self.weights[2 * i + 1]);
            let weight = w.to_buffer()?;
            let bias = b.to_buffer()?;
            if weight.shape() != [fan_in, fan_out] || bias.shape() != [fan_out] {
                return Err(Error::Validation(format!("layer {i}: shapes disagree with the architecture")));
            }
            layers.push(Dense { weight, bias });
        }
        VelocityNet {
            arch: arch.clone(),
            layers,
            normalizer: None,
        }
        .with_normalizer(self.normalizer.clone())
        .map_err(|e| Error::Validation(e.to_string()))
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

pub fn save_checkpoint(path: &Path, doc: &CheckpointDoc) -> Result<()> {
    doc.validate()?;
    save_json(path, doc)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointDoc> {
    let doc: CheckpointDoc = load_json(path)?;
    doc.validate()?;
    doc.to_net()?;
    Ok(doc)
}

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    save_json(path, report)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let report: EvalReport = load_json(path)?;
    let bad_rate = |r: f64| !(0.0..=1.0).contains(&r);
    if report.per_seed.iter().any(|s| bad_rate(s.success_rate)) || bad_rate(report.mean) || !(report.std >= 0.0) {
        return Err(Error::Validation("report rates out of range".into()));
    }
    Ok(report)
}

/// Writes `samples` Euler paths as CSV (`sample,step,s,dim0,...`) in normalized
/// action space. Observations are drawn uniformly from `demos`.
pub fn export_paths<W: Write>(
    net: &VelocityNet,
    demos: &[Demonstration],
    samples: usize,
    steps: usize,
    seed: u64,
    out: &mut W,
) -> Result<()> {
    if demos.is_empty() {
        return Err(Error::invalid("export_paths: no demonstrations"));
    }
    let norm = net.normalizer()?;
    let ad = net.arch.action_dim;
    let mut rng = DeterministicRng::new(seed);
    let io_err = |e| Error::io("<paths output>", e);
    let header: Vec<String> = ["sample", "step", "s"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..ad).map(|d| format!("dim{d}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..samples {
        let demo = &demos[rng.below(demos.len())];
        let obs = norm.normalize(&demo.obs, Space::Obs)?;
        let noise = rng.normal_vec(ad);
        let path = euler_integrate(net, &noise, &obs, steps)?;
        for (k, (s, state)) in path.times.iter().zip(&path.states).enumerate() {
            let cols: Vec<String> = state.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{i},{k},{s},{}", cols.join(",")).map_err(io_err)?;
        }
    }
    Ok(())
}
