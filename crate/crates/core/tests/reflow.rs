use flowpolicy_core::envs::{generate_demos, EnvId};
use flowpolicy_core::flow_train::{train_policy, Coupling, CouplingSet, Source, TrainConfig};
use flowpolicy_core::numerics::{AdamWConfig, DeterministicRng};
use flowpolicy_core::pipeline::fresh_net;
use flowpolicy_core::reflow::{compare_with_repairings, generate_couplings, run_reflow_round, CouplingGenConfig};
use flowpolicy_core::velocity_net::VelocityField;

#[test]
fn zero_displacement_couplings_give_a_still_field() {
    let mut rng = DeterministicRng::new(4);
    let records: Vec<Coupling> = (0..256)
        .map(|i| {
            let z = rng.normal_vec(2);
            Coupling {
                obs: vec![(i % 4) as f64 / 2.0 - 0.75],
                noise: z.clone(),
                action: z,
                source: Source::Reflow,
                replaced: false,
            }
        })
        .collect();
    let data = CouplingSet::new(records);
    let init = flowpolicy_core::velocity_net::init_net(2, 1, &mut DeterministicRng::new(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let net = train_policy(&init, &data, &cfg).unwrap().net;
    let mut worst: f64 = 0.0;
    for r in data.records.iter().take(32) {
        for s in [0.0, 0.5, 1.0] {
            let v = net.velocity(&r.noise, s, &r.obs).unwrap();
            worst = worst.max(v.iter().map(|x| x.abs()).fold(0.0, f64::max));
        }
    }
    assert!(worst < 0.05, "largest velocity component {worst}");
}

#[test]
fn reflow_round_warm_starts_from_a_copy() {
    let demos = generate_demos(EnvId::Bimodal, 5, 0).unwrap();
    let base = fresh_net(&demos, 2).unwrap();
    let snapshot = base.clone();
    let mut gen = CouplingGenConfig::base(0);
    gen.solver = flowpolicy_core::solvers::SolverConfig::euler(4);
    let frozen = TrainConfig {
        epochs: 1,
        optimizer: AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let round = run_reflow_round(&base, &demos, &gen, &frozen).unwrap();
    // Zero learning rate leaves the copied weights bit-identical, and the
    // parent is untouched.
    assert_eq!(round.net, snapshot);
    assert_eq!(base, snapshot);
    assert!(round.couplings.records.iter().all(|r| r.source == Source::Base));
}

#[test]
fn near_identity_flow_beats_repairings() {
    // An untrained net moves each noise only slightly, so pairing every noise
    // with its own endpoint is far cheaper than any shuffle.
    let demos = generate_demos(EnvId::Bimodal, 10, 3).unwrap();
    let net = fresh_net(&demos, 5).unwrap();
    let set = generate_couplings(&net, net.normalizer().unwrap(), &demos, &CouplingGenConfig::base(1)).unwrap();
    let cmp = compare_with_repairings(&set, 100, 0).unwrap();
    assert_eq!(cmp.repaired_costs.len(), 100);
    assert!(cmp.wins >= 90, "{} wins", cmp.wins);
}
