//! Acceptance suite: ten numbered criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed regardless of
//! capture settings. `ACCEPTANCE_ONLY=2,7` restricts the run to a subset.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use flowpolicy_core::envs::{chunk_mode, expert_episode, EnvId, ExpertMode};
use flowpolicy_core::eval::{one_step_gap, straightness, success_rate_study, EvalConfig, EvalReport};
use flowpolicy_core::flow_train::{flow_matching_loss, Coupling, Source};
use flowpolicy_core::io::{hash_file, load_checkpoint};
use flowpolicy_core::numerics::{relative_error, Activation, DeterministicRng};
use flowpolicy_core::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use flowpolicy_core::reflow::{compare_with_repairings, generate_couplings, CouplingGenConfig};
use flowpolicy_core::solvers::{integrate, sample_action, Rk45Config, SolverConfig};
use flowpolicy_core::velocity_net::{Architecture, FnField, Space, VelocityNet};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const PIPELINE_SEEDS: u64 = 10;

/// Pipelines are shared between criteria and built on first use.
#[derive(Default)]
struct Artifacts {
    bimodal: Option<(PipelineRun, f64)>,
    pushblock: Vec<PushblockRun>,
}

struct PushblockRun {
    seed: u64,
    run: PipelineRun,
    base100: EvalReport,
    reflow1: EvalReport,
    sefa1: EvalReport,
    sefa100: EvalReport,
}

impl Artifacts {
    fn bimodal(&mut self) -> &(PipelineRun, f64) {
        self.bimodal.get_or_insert_with(|| {
            let start = Instant::now();
            let run = run_pipeline(&PipelineConfig::desk(EnvId::Bimodal, 0)).expect("bimodal pipeline");
            (run, start.elapsed().as_secs_f64())
        })
    }

    fn pushblock(&mut self) -> &[PushblockRun] {
        if self.pushblock.is_empty() {
            for seed in 0..PIPELINE_SEEDS {
                let start = Instant::now();
                let run = run_pipeline(&PipelineConfig::desk(EnvId::Pushblock, seed)).expect("pushblock pipeline");
                let study = |net: &VelocityNet, steps| {
                    let cfg = EvalConfig::new(EnvId::Pushblock, 50, (0..10).collect(), SolverConfig::euler(steps));
                    success_rate_study(net, net.normalizer().unwrap(), &cfg).expect("study")
                };
                let r = PushblockRun {
                    seed,
                    base100: study(&run.base, 100),
                    reflow1: study(&run.reflow, 1),
                    sefa1: study(&run.sefa, 1),
                    sefa100: study(&run.sefa, 100),
                    run,
                };
                println!(
                    "    pushblock pipeline {seed}: base@100 {:.3}  reflow@1 {:.3}  sefa@1 {:.3}  sefa@100 {:.3}  ({:.0}s)",
                    r.base100.mean,
                    r.reflow1.mean,
                    r.sefa1.mean,
                    r.sefa100.mean,
                    start.elapsed().as_secs_f64()
                );
                self.pushblock.push(r);
            }
        }
        &self.pushblock
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = DeterministicRng::new(2024);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for draw in 0..50 {
        let arch = Architecture {
            action_dim: 1 + rng.below(4),
            obs_dim: 1 + rng.below(3),
            hidden: vec![4 + rng.below(13), 4 + rng.below(13)],
            activation: if draw % 2 == 0 { Activation::Silu } else { Activation::Tanh },
        };
        let mut net = VelocityNet::init(arch.clone(), &mut rng).unwrap();
        for p in net.params_mut() {
            for x in p.data_mut() {
                *x += rng.uniform_range(-0.5, 0.5);
            }
        }
        let n = 1 + rng.below(4);
        let batch: Vec<Coupling> = (0..n)
            .map(|_| Coupling {
                obs: (0..arch.obs_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                noise: rng.normal_vec(arch.action_dim),
                action: (0..arch.action_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                source: Source::Base,
                replaced: false,
            })
            .collect();
        let times: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let grads = flow_matching_loss(&net, &batch, &times).unwrap().grads;
        for (p, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = net.clone();
                plus.params_mut()[p].data_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[p].data_mut()[i] -= h;
                let fd = (flow_matching_loss(&plus, &batch, &times).unwrap().loss
                    - flow_matching_loss(&minus, &batch, &times).unwrap().loss)
                    / (2.0 * h);
                worst = worst.max(relative_error(g.data()[i], fd, 1e-3));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-5 && secs < 60.0,
        format!("50 draws, {checked} components, worst relative error {worst:.2e} (floor 1e-3), {secs:.1}s"),
    )
}

fn reflow_straightens(art: &mut Artifacts) -> Verdict {
    let (run, train_secs) = art.bimodal();
    let base_norm = run.base.normalizer().unwrap();
    // 50 evenly spaced demo observations x 10 couplings, drawn from the base flow.
    let step = run.demos.len() / 50;
    let probe_demos: Vec<_> = run.demos.iter().step_by(step).take(50).cloned().collect();
    let gen = CouplingGenConfig {
        seed: 9000,
        ..CouplingGenConfig::base(0)
    };
    let probe = generate_couplings(&run.base, base_norm, &probe_demos, &gen).unwrap();
    let sb = straightness(&run.base, &probe, 100).unwrap();
    let sr = straightness(&run.reflow, &probe, 100).unwrap();
    let gb = one_step_gap(&run.base, &probe, 100).unwrap();
    let gr = one_step_gap(&run.reflow, &probe, 100).unwrap();
    verdict(
        probe.len() == 500 && sr <= 0.5 * sb && gr <= 0.5 * gb && *train_secs < 900.0,
        format!(
            "{} couplings; straightness {sb:.4} -> {sr:.4} (x{:.2}); one-step gap {gb:.4} -> {gr:.4} (x{:.2}); pipeline {train_secs:.0}s",
            probe.len(),
            sr / sb,
            gr / gb
        ),
    )
}

fn stage_ordering(art: &mut Artifacts) -> Verdict {
    let runs = art.pushblock();
    let sefa_ok = runs.iter().filter(|r| r.sefa1.mean >= r.reflow1.mean).count();
    let base_ok = runs.iter().filter(|r| r.base100.mean >= r.reflow1.mean).count();
    let both = runs
        .iter()
        .filter(|r| r.sefa1.mean >= r.reflow1.mean && r.base100.mean >= r.reflow1.mean)
        .count();
    verdict(
        both >= 8,
        format!(
            "both orderings on {both}/{} seeds (sefa@1 >= reflow@1: {sefa_ok}, base@100 >= reflow@1: {base_ok}); need 8",
            runs.len()
        ),
    )
}

fn solver_ablation(art: &mut Artifacts) -> Verdict {
    let runs = art.pushblock();
    let r = &runs[0];
    let gap = (r.sefa1.mean - r.sefa100.mean).abs();
    let within = runs
        .iter()
        .filter(|r| (r.sefa1.mean - r.sefa100.mean).abs() <= 0.1)
        .count();
    verdict(
        gap <= 0.1,
        format!(
            "pipeline {}: sefa@1 {:.3} vs sefa@100 {:.3}, |diff| {gap:.3} (limit 0.1); within limit on {within}/{} pipelines",
            r.seed,
            r.sefa1.mean,
            r.sefa100.mean,
            runs.len()
        ),
    )
}

fn nfe_accounting(art: &mut Artifacts) -> Verdict {
    let (run, _) = art.bimodal();
    let net = &run.sefa;
    let obs = run.demos[0].obs.clone();
    let mut rng = DeterministicRng::new(5);
    let one = sample_action(net, &obs, &SolverConfig::euler(1), &mut rng).unwrap().nfe;
    let hundred = sample_action(net, &obs, &SolverConfig::euler(100), &mut rng).unwrap().nfe;
    let study = |steps| {
        let cfg = EvalConfig::new(EnvId::Bimodal, 5, vec![0, 1], SolverConfig::euler(steps));
        success_rate_study(net, net.normalizer().unwrap(), &cfg).unwrap().nfe_per_prediction
    };
    let (p1, p100) = (study(1), study(100));
    verdict(
        one == 1 && hundred == 100 && p1 == 1.0 && p100 == 100.0 && p100 / p1 == 100.0,
        format!("per prediction: euler:1 -> {one}, euler:100 -> {hundred}; rollout means {p1} and {p100} (ratio {})", p100 / p1),
    )
}

fn transport_cost_claim(art: &mut Artifacts) -> Verdict {
    let bimodal = compare_with_repairings(&art.bimodal().0.base_couplings, 100, 77).unwrap();
    let push = compare_with_repairings(&art.pushblock()[0].run.base_couplings, 100, 77).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    verdict(
        bimodal.wins >= 90 && push.wins >= 90,
        format!(
            "bimodal {}/100 (cost {:.3} vs shuffled mean {:.3}); pushblock {}/100 (cost {:.3} vs {:.3})",
            bimodal.wins,
            bimodal.coupled_cost,
            mean(&bimodal.repaired_costs),
            push.wins,
            push.coupled_cost,
            mean(&push.repaired_costs)
        ),
    )
}

fn sefa_branches(art: &mut Artifacts) -> Verdict {
    let (run, _) = art.bimodal();
    let norm = run.reflow.normalizer().unwrap();
    let report = &run.alignment;
    let demo_actions: HashSet<Vec<u64>> = run
        .demos
        .iter()
        .map(|d| {
            norm.normalize(&d.action, Space::Action)
                .unwrap()
                .iter()
                .map(|x| x.to_bits())
                .collect()
        })
        .collect();
    let replaced: Vec<_> = run.aligned.records.iter().filter(|r| r.replaced).collect();
    let exact = replaced
        .iter()
        .filter(|r| demo_actions.contains(&r.action.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        .count();
    let mut modes = HashSet::new();
    let mut near_origin = 0usize;
    for r in run.aligned.records.iter().filter(|r| !r.replaced) {
        let obs = norm.denormalize(&r.obs, Space::Obs).unwrap();
        if obs[0].hypot(obs[1]) < 0.1 {
            near_origin += 1;
            let action = norm.denormalize(&r.action, Space::Action).unwrap();
            modes.insert(match chunk_mode(&action) {
                ExpertMode::Left => "left",
                _ => "right",
            });
        }
    }
    let fraction_ok = report.fraction > 0.0 && report.fraction < 1.0;
    verdict(
        fraction_ok && exact == replaced.len() && modes.len() == 2,
        format!(
            "replaced {}/{} ({:.3}); {exact}/{} replaced actions are demo actions bit-exactly; {near_origin} preserved near-origin records, modes {:?}",
            report.replaced,
            report.total,
            report.fraction,
            replaced.len(),
            {
                let mut m: Vec<_> = modes.into_iter().collect();
                m.sort();
                m
            }
        ),
    )
}

fn rk45_correctness() -> Verdict {
    let solver = SolverConfig::Rk45(Rk45Config::new(1e-6, 1e-9));
    let decay = FnField::new(1, |a: &[f64], _, _: &[f64]| vec![-a[0]]);
    let d = integrate(&decay, &[1.0], &[0.0], &solver).unwrap();
    let exact = (-1.0f64).exp();
    let decay_err = (d.final_state()[0] - exact).abs() / exact;

    let constant = FnField::new(2, |_: &[f64], _, _: &[f64]| vec![0.5, -1.25]);
    let c = integrate(&constant, &[0.1, 0.2], &[0.0], &solver).unwrap();
    let const_err = (c.final_state()[0] - 0.6).abs().max((c.final_state()[1] + 1.05).abs());

    let linear = FnField::new(1, |_: &[f64], s: f64, _: &[f64]| vec![3.0 * s - 1.0]);
    let l = integrate(&linear, &[2.0], &[0.0], &solver).unwrap();
    let lin_err = (l.final_state()[0] - 2.5).abs();

    // A stiff field started with an oversized first step still accepts steps.
    let stiff = FnField::new(1, |a: &[f64], _, _: &[f64]| vec![-200.0 * a[0]]);
    let big_first = SolverConfig::Rk45(Rk45Config {
        initial_step: 1.0,
        ..Rk45Config::new(1e-6, 1e-9)
    });
    let s = integrate(&stiff, &[1.0], &[0.0], &big_first).unwrap();
    let accepted = [&d, &c, &l, &s].iter().map(|p| p.times.len() - 1).min().unwrap();
    verdict(
        decay_err <= 1e-6 && const_err <= 1e-9 && lin_err <= 1e-9 && accepted >= 1,
        format!(
            "decay rel err {decay_err:.2e}; constant {const_err:.1e}; linear-in-s {lin_err:.1e}; min accepted steps {accepted} (stiff run rejected {})",
            s.rejected
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_flowpolicy"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn flowpolicy");
    (out.status.code().unwrap_or(-1), out.stdout)
}

const PIPELINE: &[&[&str]] = &[
    &["gen-demos", "--env", "bimodal", "--episodes", "20", "--seed", "0", "--out", "demos.jsonl"],
    &["train", "--stage", "base", "--demos", "demos.jsonl", "--epochs", "20", "--lr", "1e-3", "--seed", "0", "--out", "base.ckpt"],
    &["couple", "--ckpt", "base.ckpt", "--demos", "demos.jsonl", "--seed", "1", "--out", "base_couplings.jsonl"],
    &[
        "train", "--stage", "reflow", "--demos", "demos.jsonl", "--couplings", "base_couplings.jsonl", "--init", "base.ckpt",
        "--epochs", "5", "--lr", "1e-3", "--seed", "2", "--out", "reflow.ckpt",
    ],
    &["couple", "--ckpt", "reflow.ckpt", "--demos", "demos.jsonl", "--seed", "3", "--out", "reflow_couplings.jsonl"],
    &[
        "align", "--couplings", "reflow_couplings.jsonl", "--demos", "demos.jsonl", "--ckpt", "reflow.ckpt", "--out",
        "aligned.jsonl", "--report", "alignment.json",
    ],
    &[
        "train", "--stage", "sefa", "--demos", "demos.jsonl", "--couplings", "aligned.jsonl", "--init", "reflow.ckpt",
        "--epochs", "5", "--lr", "1e-3", "--seed", "4", "--out", "sefa.ckpt",
    ],
    &[
        "eval", "--ckpt", "sefa.ckpt", "--env", "bimodal", "--episodes", "10", "--solver", "euler:1", "--seeds", "0..2",
        "--couplings", "aligned.jsonl", "--out", "report.json",
    ],
    &["paths", "--ckpt", "sefa.ckpt", "--demos", "demos.jsonl", "--samples", "4", "--steps", "10", "--out", "paths.csv"],
];

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut stdouts = Vec::new();
    for dir in &dirs {
        let mut captured = Vec::new();
        for (i, args) in PIPELINE.iter().enumerate() {
            let (code, stdout) = run_cli(dir.path(), args);
            if code != 0 {
                return verdict(false, format!("step {} ({}) exited with {code}", i + 1, args[0]));
            }
            captured.push(stdout);
        }
        stdouts.push(captured);
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .collect();
    let d = dirs[0].path();
    let sefa = load_checkpoint(&d.join("sefa.ckpt")).unwrap();
    let reflow = load_checkpoint(&d.join("reflow.ckpt")).unwrap();
    let chain_ok = sefa.provenance.parent_hash == Some(hash_file(&d.join("reflow.ckpt")).unwrap())
        && reflow.provenance.parent_hash == Some(hash_file(&d.join("base.ckpt")).unwrap());
    verdict(
        differing.is_empty() && names.len() == 10 && stdouts[0] == stdouts[1] && chain_ok,
        format!(
            "{} files compared across two runs, {} differ {:?}; stdout {}; provenance chain {}",
            names.len(),
            differing.len(),
            differing,
            if stdouts[0] == stdouts[1] { "identical" } else { "differs" },
            if chain_ok { "resolves" } else { "broken" }
        ),
    )
}

fn expert_gate() -> Verdict {
    let counts: Vec<(EnvId, usize)> = [EnvId::Bimodal, EnvId::Pushblock]
        .into_iter()
        .map(|env| {
            let ok = (0..100u64)
                .filter(|&s| expert_episode(env, &mut DeterministicRng::new(s)).unwrap().success)
                .count();
            (env, ok)
        })
        .collect();
    verdict(
        counts.iter().all(|&(_, ok)| ok == 100),
        counts
            .iter()
            .map(|(env, ok)| format!("{env} {ok}/100"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn main() {
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().is_none_or(|set| set.contains(&n));
    let mut art = Artifacts::default();

    type Check<'a> = Box<dyn FnOnce(&mut Artifacts) -> Verdict + 'a>;
    // Cheap checks first; the pushblock pipelines dominate the runtime.
    let criteria: Vec<(u32, &str, Check)> = vec![
        (10, "expert-competence gate", Box::new(|_| expert_gate())),
        (8, "RK45 correctness", Box::new(|_| rk45_correctness())),
        (1, "gradient correctness", Box::new(|_| gradient_correctness())),
        (9, "CLI pipeline determinism", Box::new(|_| determinism())),
        (2, "reflow straightens", Box::new(reflow_straightens)),
        (5, "NFE accounting", Box::new(nfe_accounting)),
        (7, "alignment branch behavior", Box::new(sefa_branches)),
        (6, "transport-cost claim", Box::new(transport_cost_claim)),
        (3, "stage ordering on pushblock", Box::new(stage_ordering)),
        (4, "solver ablation", Box::new(solver_ablation)),
    ];

    let mut failed = Vec::new();
    let mut results = Vec::new();
    for (n, name, check) in criteria {
        if !selected(n) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut art);
        let line = format!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        if !v.pass {
            failed.push(n);
        }
        results.push((n, line));
    }

    results.sort_by_key(|(n, _)| *n);
    println!("\nacceptance summary");
    for (_, line) in &results {
        println!("  {line}");
    }
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        failed.sort();
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
