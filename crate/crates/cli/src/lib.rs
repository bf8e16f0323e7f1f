//! The `flowpolicy` command line: one subcommand per pipeline stage.
//!
//! Every command echoes its effective configuration (defaults filled in) as a
//! JSON line on stderr before doing any work. Exit codes: 0 on success, 1 for
//! usage and validation errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use flowpolicy_core::envs::{generate_demos, EnvId};
use flowpolicy_core::eval::{straightness, success_rate_study, AlignmentSummary, EvalConfig};
use flowpolicy_core::flow_train::{train_policy, CouplingSet, Source, TrainConfig};
use flowpolicy_core::io::{
    export_paths, hash_file, load_checkpoint, load_couplings, load_demos, save_checkpoint, save_couplings,
    save_demos, save_json, save_report, CheckpointDoc, Provenance, Stage,
};
use flowpolicy_core::numerics::AdamWConfig;
use flowpolicy_core::pipeline::{fresh_net, groundtruth_couplings};
use flowpolicy_core::reflow::{generate_couplings, transport_cost, CouplingGenConfig};
use flowpolicy_core::sefa::{align_dataset, AlignConfig, ExpertIndex};
use flowpolicy_core::solvers::SolverConfig;
use flowpolicy_core::velocity_net::VelocityNet;
use flowpolicy_core::Error;

#[derive(Debug, Parser)]
#[command(name = "flowpolicy", version, about = "Rectified-flow policies with reflow and selective alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write demonstration chunks.
    GenDemos(GenDemosArgs),
    /// Train a base, reflow or aligned checkpoint.
    Train(TrainArgs),
    /// Generate (noise, action) couplings from a checkpoint.
    Couple(CoupleArgs),
    /// Selectively snap generated actions onto expert actions.
    Align(AlignArgs),
    /// Closed-loop success study across inference seeds.
    Eval(EvalArgs),
    /// Export sampling paths as CSV.
    Paths(PathsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDemosArgs {
    #[arg(long)]
    pub env: EnvId,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Stage,
    #[arg(long)]
    pub demos: PathBuf,
    /// Training couplings; required for reflow and sefa.
    #[arg(long)]
    pub couplings: Option<PathBuf>,
    /// Checkpoint to warm-start from; required for reflow, and for sefa unless --cold-start.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = AdamWConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train a sefa checkpoint from fresh weights.
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CoupleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub demos: PathBuf,
    /// Couplings per distinct observation.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Defaults to euler:100 for base checkpoints, euler:1 otherwise.
    #[arg(long)]
    pub solver: Option<SolverConfig>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub couplings: PathBuf,
    #[arg(long)]
    pub demos: PathBuf,
    /// Checkpoint whose normalizer maps the demonstrations into coupling space.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = AlignConfig::default().delta)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON alignment report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub env: EnvId,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value = "euler:1")]
    pub solver: SolverConfig,
    /// Inclusive seed range `A..B`.
    #[arg(long, default_value = "0..9")]
    pub seeds: SeedRange,
    /// Probe couplings for straightness, transport cost and alignment statistics.
    #[arg(long)]
    pub couplings: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub probe_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PathsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Inclusive seed range, written `A..B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedRange(pub RangeInclusive<u64>);

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start `{a}`: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end `{b}`: {e}"))?;
        if a > b {
            return Err(format!("empty seed range {a}..{b}"));
        }
        Ok(SeedRange(a..=b))
    }
}

impl std::fmt::Display for SeedRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.0.start(), self.0.end())
    }
}

impl Serialize for SeedRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn echo_config(command: &str, config: &impl Serialize) {
    eprintln!("{}", json!({ "command": command, "config": config }));
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn execute(command: &Command) -> flowpolicy_core::Result<()> {
    match command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Train(a) => train(a),
        Command::Couple(a) => couple(a),
        Command::Align(a) => align(a),
        Command::Eval(a) => eval(a),
        Command::Paths(a) => paths(a),
    }
}

fn gen_demos(a: &GenDemosArgs) -> flowpolicy_core::Result<()> {
    echo_config("gen-demos", a);
    let demos = generate_demos(a.env, a.episodes, a.seed)?;
    save_demos(&a.out, &demos)
}

fn load_net(path: &Path) -> flowpolicy_core::Result<(CheckpointDoc, VelocityNet)> {
    let doc = load_checkpoint(path)?;
    let net = doc.to_net()?;
    Ok((doc, net))
}

fn train(a: &TrainArgs) -> flowpolicy_core::Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: AdamWConfig {
            lr: a.lr,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    echo_config("train", &json!({ "args": a, "train": cfg }));

    let demos = load_demos(&a.demos)?;
    let mut provenance = Provenance {
        demos_hash: Some(hash_file(&a.demos)?),
        ..Provenance::default()
    };
    let (init, data) = match a.stage {
        Stage::Base => {
            if a.couplings.is_some() || a.init.is_some() || a.cold_start {
                return Err(usage("base training takes only --demos"));
            }
            let init = fresh_net(&demos, a.seed)?;
            let data = groundtruth_couplings(&demos, init.normalizer()?)?;
            (init, data)
        }
        Stage::Reflow | Stage::Sefa => {
            let path = a
                .couplings
                .as_ref()
                .ok_or_else(|| usage(format!("--couplings is required for {:?} training", a.stage)))?;
            let data = load_couplings(path)?;
            check_sources(&data, a.stage)?;
            provenance.couplings_hash = Some(hash_file(path)?);
            let init = match (&a.init, a.stage, a.cold_start) {
                (Some(_), _, true) => return Err(usage("--init and --cold-start are mutually exclusive")),
                (None, Stage::Sefa, true) => {
                    provenance.cold_start = true;
                    // The normalizer must match the one the couplings were built with,
                    // which is the demo-fitted one.
                    fresh_net(&demos, a.seed)?
                }
                (None, _, true) => return Err(usage("--cold-start applies to sefa training only")),
                (None, _, false) => return Err(usage("--init is required unless --cold-start")),
                (Some(p), _, false) => {
                    provenance.parent_hash = Some(hash_file(p)?);
                    load_net(p)?.1
                }
            };
            (init, data)
        }
    };
    let outcome = train_policy(&init, &data, &cfg)?;
    let doc = CheckpointDoc::from_net(&outcome.net, a.stage, Some(cfg), provenance)?;
    save_checkpoint(&a.out, &doc)
}

fn check_sources(data: &CouplingSet, stage: Stage) -> flowpolicy_core::Result<()> {
    let ok = |s: Source| match stage {
        Stage::Base => s == Source::Groundtruth,
        Stage::Reflow => matches!(s, Source::Base | Source::Reflow),
        Stage::Sefa => s == Source::Sefa,
    };
    match data.records.iter().position(|r| !ok(r.source)) {
        None => Ok(()),
        Some(i) => Err(Error::Validation(format!(
            "coupling record {} is tagged {:?}, which {:?} training does not accept",
            i + 1,
            data.records[i].source,
            stage
        ))),
    }
}

fn couple(a: &CoupleArgs) -> flowpolicy_core::Result<()> {
    let (doc, net) = load_net(&a.ckpt)?;
    let solver = a.solver.unwrap_or(match doc.stage {
        Stage::Base => SolverConfig::euler(100),
        _ => SolverConfig::euler(1),
    });
    let gen = CouplingGenConfig {
        k: a.k,
        solver,
        seed: a.seed,
        source: match doc.stage {
            Stage::Base => Source::Base,
            // Couplings from any later stage feed the next round of reflow or alignment.
            _ => Source::Reflow,
        },
    };
    echo_config("couple", &json!({ "args": a, "generation": gen }));
    let demos = load_demos(&a.demos)?;
    let set = generate_couplings(&net, net.normalizer()?, &demos, &gen)?;
    save_couplings(&a.out, &set)
}

fn align(a: &AlignArgs) -> flowpolicy_core::Result<()> {
    let cfg = AlignConfig { delta: a.delta };
    echo_config("align", a);
    cfg.validate()?;
    let (_, net) = load_net(&a.ckpt)?;
    let demos = load_demos(&a.demos)?;
    let couplings = load_couplings(&a.couplings)?;
    let experts = ExpertIndex::from_demos(&demos, net.normalizer()?)?;
    let (aligned, report) = align_dataset(&couplings, &experts, &cfg)?;
    save_couplings(&a.out, &aligned)?;
    if let Some(path) = &a.report {
        save_json(path, &report)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> flowpolicy_core::Result<()> {
    let seeds: Vec<u64> = a.seeds.0.clone().collect();
    let cfg = EvalConfig::new(a.env, a.episodes, seeds, a.solver);
    echo_config("eval", &json!({ "args": a, "eval": cfg }));
    let (_, net) = load_net(&a.ckpt)?;
    let mut report = success_rate_study(&net, net.normalizer()?, &cfg)?;
    if let Some(path) = &a.couplings {
        let probe = load_couplings(path)?;
        report.straightness = Some(straightness(&net, &probe, a.probe_steps)?);
        report.transport_cost = Some(transport_cost(&probe)?);
        if probe.records.iter().all(|r| r.source == Source::Sefa) {
            let replaced = probe.records.iter().filter(|r| r.replaced).count();
            report.alignment = Some(AlignmentSummary {
                total: probe.len(),
                replaced,
                fraction: replaced as f64 / probe.len() as f64,
            });
        }
    }
    save_report(&a.out, &report)
}

fn paths(a: &PathsArgs) -> flowpolicy_core::Result<()> {
    echo_config("paths", a);
    let (_, net) = load_net(&a.ckpt)?;
    let demos = load_demos(&a.demos)?;
    let file = File::create(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    export_paths(&net, &demos, a.samples, a.steps, a.seed, &mut w)?;
    w.flush().map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}
