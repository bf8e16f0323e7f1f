//! Integrators for `da/ds = v(a, s, obs)` from noise at `s = 0` to an action at `s = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DeterministicRng;
use crate::velocity_net::{Space, VelocityField, VelocityNet};

/// Step-size controller settings for the adaptive solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rk45Config {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Rk45Config {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

impl Default for Rk45Config {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-6,
            max_steps: 10_000,
            initial_step: 0.1,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolverConfig {
    Euler { steps: usize },
    Rk45(Rk45Config),
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        SolverConfig::Euler { steps }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SolverConfig::Euler { steps } if *steps == 0 => {
                Err(Error::invalid("euler solver needs at least one step"))
            }
            SolverConfig::Rk45(c) if !(c.rtol > 0.0 && c.atol > 0.0) => {
                Err(Error::invalid("rk45 tolerances must be positive"))
            }
            SolverConfig::Rk45(c) if c.max_steps == 0 || !(c.initial_step > 0.0) => {
                Err(Error::invalid("rk45 step settings must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverConfig::Euler { steps } => write!(f, "euler:{steps}"),
            SolverConfig::Rk45(c) => write!(f, "rk45:{:e},{:e}", c.rtol, c.atol),
        }
    }
}

/// Parses `euler:N` or `rk45:RTOL,ATOL`.
impl FromStr for SolverConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("solver `{s}`: expected euler:N or rk45:RTOL,ATOL"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let cfg = match kind {
            "euler" => SolverConfig::Euler {
                steps: args.trim().parse().map_err(|_| bad())?,
            },
            "rk45" => {
                let (r, a) = args.split_once(',').ok_or_else(bad)?;
                SolverConfig::Rk45(Rk45Config::new(
                    r.trim().parse().map_err(|_| bad())?,
                    a.trim().parse().map_err(|_| bad())?,
                ))
            }
            _ => return Err(bad()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Visited times and states of one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Velocity evaluations, rejected trial steps included.
    pub nfe: usize,
    pub rejected: usize,
}

impl SamplePath {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("paths hold the initial state")
    }
}

fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure {
            step,
            detail: "state became non-finite".into(),
        })
    }
}

/// Fixed-step Euler with velocities taken at the left end of each interval.
pub fn euler_integrate<F: VelocityField>(field: &F, noise: &[f64], obs: &[f64], steps: usize) -> Result<SamplePath> {
    if steps == 0 {
        return Err(Error::invalid("euler_integrate: steps must be at least 1"));
    }
    let h = 1.0 / steps as f64;
    let mut a = noise.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![a.clone()];
    for k in 0..steps {
        let s = k as f64 / steps as f64;
        let v = field.velocity(&a, s, obs)?;
        for (x, dv) in a.iter_mut().zip(&v) {
            *x += h * dv;
        }
        check_finite(&a, k)?;
        times.push((k + 1) as f64 / steps as f64);
        states.push(a.clone());
    }
    Ok(SamplePath {
        times,
        states,
        nfe: steps,
        rejected: 0,
    })
}

/// Euler over many independent rows at once. Row `i` of the result is bitwise
/// equal to `euler_integrate` on that row alone.
pub fn euler_integrate_batch<F: VelocityField>(
    field: &F,
    noises: &[Vec<f64>],
    obs: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::invalid("euler_integrate: steps must be at least 1"));
    }
    if noises.len() != obs.len() {
        return Err(Error::invalid("euler_integrate_batch: row count mismatch"));
    }
    if noises.is_empty() {
        return Ok(Vec::new());
    }
    let n = noises.len();
    let ad = field.action_dim();
    let h = 1.0 / steps as f64;
    let mut a: Vec<f64> = noises.concat();
    if a.len() != n * ad {
        return Err(Error::invalid("euler_integrate_batch: noise dims do not match the field"));
    }
    let flat_obs = obs.concat();
    for k in 0..steps {
        let s = vec![k as f64 / steps as f64; n];
        let v = field.velocity_batch(&a, &s, &flat_obs)?;
        for (x, dv) in a.iter_mut().zip(&v) {
            *x += h * dv;
        }
        check_finite(&a, k)?;
    }
    Ok(a.chunks(ad).map(<[f64]>::to_vec).collect())
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Evaluations per trial step; the first-same-as-last stage is not reused.
pub const RK45_STAGES: usize = 7;

/// Adaptive Dormand–Prince 5(4) with a standard error-per-step controller.
///
/// Every trial step, accepted or rejected, costs [`RK45_STAGES`] evaluations.
pub fn rk45_integrate<F: VelocityField>(field: &F, noise: &[f64], obs: &[f64], cfg: &Rk45Config) -> Result<SamplePath> {
    SolverConfig::Rk45(*cfg).validate()?;
    let dim = noise.len();
    let mut s = 0.0f64;
    let mut a = noise.to_vec();
    let mut h = cfg.initial_step.min(1.0);
    let mut times = vec![0.0];
    let mut states = vec![a.clone()];
    let mut nfe = 0usize;
    let mut trials = 0usize;
    let mut rejected = 0usize;
    let mut k = vec![vec![0.0; dim]; 7];
    let mut stage = vec![0.0; dim];

    while s < 1.0 {
        if trials >= cfg.max_steps {
            return Err(Error::IntegrationFailure {
                step: trials,
                detail: format!("exceeded {} trial steps", cfg.max_steps),
            });
        }
        trials += 1;
        let last = s + h >= 1.0;
        if last {
            h = 1.0 - s;
        }
        for i in 0..7 {
            stage.copy_from_slice(&a);
            for (j, kj) in k.iter().enumerate().take(i) {
                let coef = A[i][j];
                if coef != 0.0 {
                    for (x, &d) in stage.iter_mut().zip(kj) {
                        *x += h * coef * d;
                    }
                }
            }
            let t = if i == 0 { s } else { (s + C[i] * h).min(1.0) };
            k[i] = field.velocity(&stage, t, obs)?;
            nfe += 1;
        }
        let mut a5 = a.clone();
        let mut err_sq = 0.0;
        for d in 0..dim {
            let mut inc5 = 0.0;
            let mut inc4 = 0.0;
            for i in 0..7 {
                inc5 += B5[i] * k[i][d];
                inc4 += B4[i] * k[i][d];
            }
            a5[d] += h * inc5;
            let scale = cfg.atol + cfg.rtol * a[d].abs().max(a5[d].abs());
            err_sq += (h * (inc5 - inc4) / scale).powi(2);
        }
        let err = if dim == 0 { 0.0 } else { (err_sq / dim as f64).sqrt() };
        if !err.is_finite() || a5.iter().any(|x| !x.is_finite()) {
            return Err(Error::IntegrationFailure {
                step: trials,
                detail: "state became non-finite".into(),
            });
        }

        let factor = if err == 0.0 {
            cfg.max_factor
        } else {
            (cfg.safety * err.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
        };
        if err <= 1.0 {
            s = if last { 1.0 } else { s + h };
            a = a5;
            times.push(s);
            states.push(a.clone());
            h *= factor;
        } else {
            rejected += 1;
            h *= factor.min(1.0);
        }
    }
    Ok(SamplePath {
        times,
        states,
        nfe,
        rejected,
    })
}

pub fn integrate<F: VelocityField>(field: &F, noise: &[f64], obs: &[f64], cfg: &SolverConfig) -> Result<SamplePath> {
    match cfg {
        SolverConfig::Euler { steps } => euler_integrate(field, noise, obs, *steps),
        SolverConfig::Rk45(c) => rk45_integrate(field, noise, obs, c),
    }
}

/// Final states for many rows; Euler rows are integrated together.
pub fn integrate_batch<F: VelocityField>(
    field: &F,
    noises: &[Vec<f64>],
    obs: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    match cfg {
        SolverConfig::Euler { steps } => euler_integrate_batch(field, noises, obs, *steps),
        SolverConfig::Rk45(c) => noises
            .iter()
            .zip(obs)
            .map(|(z, o)| rk45_integrate(field, z, o, c).map(|p| p.final_state().to_vec()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    /// Action chunk in raw (denormalized) units.
    pub action: Vec<f64>,
    pub nfe: usize,
}

/// Draws noise, integrates under the normalized observation, and maps the
/// result back to raw action units.
pub fn sample_action(
    net: &VelocityNet,
    obs: &[f64],
    cfg: &SolverConfig,
    rng: &mut DeterministicRng,
) -> Result<ActionSample> {
    let norm = net.normalizer()?;
    sample_with(net, norm, obs, cfg, rng)
}

/// [`sample_action`] for an arbitrary field paired with a normalizer.
pub fn sample_with<F: VelocityField>(
    field: &F,
    norm: &crate::velocity_net::Normalizer,
    obs: &[f64],
    cfg: &SolverConfig,
    rng: &mut DeterministicRng,
) -> Result<ActionSample> {
    cfg.validate()?;
    let noise = rng.normal_vec(field.action_dim());
    let obs_n = norm.normalize(obs, Space::Obs)?;
    let path = integrate(field, &noise, &obs_n, cfg)?;
    Ok(ActionSample {
        action: norm.denormalize(path.final_state(), Space::Action)?,
        nfe: path.nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_net::FnField;

    fn constant(c: f64) -> FnField<impl Fn(&[f64], f64, &[f64]) -> Vec<f64>> {
        FnField::new(1, move |_, _, _| vec![c])
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("euler:100".parse::<SolverConfig>().unwrap(), SolverConfig::euler(100));
        let rk: SolverConfig = "rk45:1e-6,1e-9".parse().unwrap();
        match rk {
            SolverConfig::Rk45(c) => assert_eq!((c.rtol, c.atol), (1e-6, 1e-9)),
            _ => panic!(),
        }
        assert_eq!(rk.to_string().parse::<SolverConfig>().unwrap(), rk);
        for bad in ["euler:0", "euler", "rk45:1e-3", "rk45:0,1e-6", "heun:3", "euler:x"] {
            assert!(bad.parse::<SolverConfig>().is_err(), "{bad}");
        }
    }

    #[test]
    fn euler_constant_field_single_step() {
        let p = euler_integrate(&constant(2.5), &[1.0], &[], 1).unwrap();
        assert_eq!(p.final_state(), &[3.5]);
        assert_eq!(p.nfe, 1);
        assert_eq!(p.times, vec![0.0, 1.0]);
    }

    #[test]
    fn euler_constant_field_step_count_invariant() {
        let one = euler_integrate(&constant(0.7), &[0.2], &[], 1).unwrap();
        let many = euler_integrate(&constant(0.7), &[0.2], &[], 100).unwrap();
        assert!((one.final_state()[0] - many.final_state()[0]).abs() < 1e-12);
        assert_eq!(many.nfe, 100);
    }

    #[test]
    fn euler_compound_growth() {
        let field = FnField::new(1, |a: &[f64], _, _: &[f64]| a.to_vec());
        let p = euler_integrate(&field, &[1.0], &[], 100).unwrap();
        let expected = (1.0f64 + 0.01).powi(100);
        assert!((p.final_state()[0] - expected).abs() < 1e-12);
        assert!((p.final_state()[0] - 2.7048).abs() < 1e-4);
    }

    #[test]
    fn euler_reports_non_finite_state() {
        let field = FnField::new(1, |_: &[f64], _, _: &[f64]| vec![f64::INFINITY]);
        let err = euler_integrate(&field, &[0.0], &[], 3).unwrap_err();
        assert!(matches!(err, Error::IntegrationFailure { step: 0, .. }));
    }

    #[test]
    fn rk45_constant_field() {
        let p = rk45_integrate(&constant(1.0), &[0.0], &[], &Rk45Config::default()).unwrap();
        assert!((p.final_state()[0] - 1.0).abs() < 1e-12);
        assert_eq!(*p.times.last().unwrap(), 1.0);
        assert_eq!(p.rejected, 0);
        assert!(p.times.len() >= 2);
    }

    #[test]
    fn rk45_exponential_decay() {
        let field = FnField::new(1, |a: &[f64], _, _: &[f64]| vec![-a[0]]);
        let p = rk45_integrate(&field, &[1.0], &[], &Rk45Config::new(1e-6, 1e-9)).unwrap();
        assert!((p.final_state()[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk45_quadrature_of_linear_time_field() {
        let field = FnField::new(1, |_: &[f64], s: f64, _: &[f64]| vec![2.0 * s]);
        let p = rk45_integrate(&field, &[0.0], &[], &Rk45Config::default()).unwrap();
        assert!((p.final_state()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rk45_nfe_counts_every_trial() {
        let field = FnField::new(2, |a: &[f64], s: f64, _: &[f64]| vec![-3.0 * a[0] + s, (5.0 * s).sin() * a[1]]);
        let p = rk45_integrate(&field, &[1.0, 0.5], &[], &Rk45Config::new(1e-8, 1e-10)).unwrap();
        let trials = (p.times.len() - 1) + p.rejected;
        assert_eq!(p.nfe, RK45_STAGES * trials);
        assert!(p.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rk45_step_cap() {
        let field = FnField::new(1, |a: &[f64], _, _: &[f64]| vec![-a[0]]);
        let cfg = Rk45Config {
            max_steps: 2,
            ..Rk45Config::new(1e-10, 1e-12)
        };
        assert!(matches!(
            rk45_integrate(&field, &[1.0], &[], &cfg),
            Err(Error::IntegrationFailure { .. })
        ));
    }

    #[test]
    fn batch_matches_single_rows() {
        let field = FnField::new(2, |a: &[f64], s: f64, o: &[f64]| vec![a[1] * s + o[0], -a[0]]);
        let noises = vec![vec![0.1, 0.2], vec![-1.0, 0.5], vec![0.0, 0.0]];
        let obs = vec![vec![1.0], vec![2.0], vec![-0.5]];
        let batch = euler_integrate_batch(&field, &noises, &obs, 7).unwrap();
        for i in 0..3 {
            let single = euler_integrate(&field, &noises[i], &obs[i], 7).unwrap();
            assert_eq!(batch[i], single.final_state());
        }
    }
}
