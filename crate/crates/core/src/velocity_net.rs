//! The conditional drift network `v(a, s, obs)` and its data normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_into, Activation, DeterministicRng, NodeId, Tape, TensorBuffer};

/// Anything that can act as a velocity field over normalized action space.
pub trait VelocityField {
    fn action_dim(&self) -> usize;

    fn velocity(&self, action: &[f64], s: f64, obs: &[f64]) -> Result<Vec<f64>>;

    /// Row-wise evaluation: `actions` holds `s.len()` rows, `obs` the matching
    /// observation rows. Each row must equal what [`Self::velocity`] returns.
    fn velocity_batch(&self, actions: &[f64], s: &[f64], obs: &[f64]) -> Result<Vec<f64>> {
        let n = s.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let ad = actions.len() / n;
        let od = obs.len() / n;
        let mut out = Vec::with_capacity(actions.len());
        for i in 0..n {
            out.extend(self.velocity(
                &actions[i * ad..(i + 1) * ad],
                s[i],
                &obs[i * od..(i + 1) * od],
            )?);
        }
        Ok(out)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn velocity(&self, action: &[f64], s: f64, obs: &[f64]) -> Result<Vec<f64>> {
        (**self).velocity(action, s, obs)
    }
    fn velocity_batch(&self, actions: &[f64], s: &[f64], obs: &[f64]) -> Result<Vec<f64>> {
        (**self).velocity_batch(actions, s, obs)
    }
}

/// A velocity field given by a closure; handy for analytic test fields.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, action: &[f64], s: f64, obs: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(action, s, obs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Obs,
    Action,
}

/// Per-dimension min-max scaling onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
}

fn column_range(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("normalizer: no data to fit"));
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in rows {
        if r.len() != dim {
            return Err(Error::invalid("normalizer: ragged rows"));
        }
        for (j, &x) in r.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::invalid("normalizer: non-finite value"));
            }
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    Ok((lo, hi))
}

impl Normalizer {
    pub fn fit(obs: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Self> {
        let (obs_min, obs_max) = column_range(obs)?;
        let (action_min, action_max) = column_range(actions)?;
        Ok(Self {
            obs_min,
            obs_max,
            action_min,
            action_max,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_min.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: &[f64], hi: &[f64]| {
            lo.len() == hi.len()
                && !lo.is_empty()
                && lo.iter().zip(hi).all(|(a, b)| a.is_finite() && b.is_finite() && b >= a)
        };
        if ok(&self.obs_min, &self.obs_max) && ok(&self.action_min, &self.action_max) {
            Ok(())
        } else {
            Err(Error::Validation("normalizer ranges are malformed".into()))
        }
    }

    fn bounds(&self, which: Space) -> (&[f64], &[f64]) {
        match which {
            Space::Obs => (&self.obs_min, &self.obs_max),
            Space::Action => (&self.action_min, &self.action_max),
        }
    }

    pub fn normalize(&self, x: &[f64], which: Space) -> Result<Vec<f64>> {
        let (lo, hi) = self.bounds(which);
        if x.len() != lo.len() {
            return Err(Error::invalid(format!(
                "normalize: expected {} dims, got {}",
                lo.len(),
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&a, &b))| if b > a { 2.0 * (v - a) / (b - a) - 1.0 } else { 0.0 })
            .collect())
    }

    pub fn denormalize(&self, y: &[f64], which: Space) -> Result<Vec<f64>> {
        let (lo, hi) = self.bounds(which);
        if y.len() != lo.len() {
            return Err(Error::invalid(format!(
                "denormalize: expected {} dims, got {}",
                lo.len(),
                y.len()
            )));
        }
        Ok(y.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&a, &b))| if b > a { a + (v + 1.0) * 0.5 * (b - a) } else { a })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn mlp(action_dim: usize, obs_dim: usize) -> Self {
        Self {
            action_dim,
            obs_dim,
            hidden: vec![128, 128],
            activation: Activation::Silu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.action_dim + 1 + self.obs_dim
    }

    /// `(fan_in, fan_out)` for every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in self.hidden.iter().chain(std::iter::once(&self.action_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: TensorBuffer,
    pub bias: TensorBuffer,
}

/// MLP over `[action, s, obs]`. Hidden layers use the architecture's activation;
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub arch: Architecture,
    pub layers: Vec<Dense>,
    pub normalizer: Option<Normalizer>,
}

pub fn init_net(action_dim: usize, obs_dim: usize, rng: &mut DeterministicRng) -> Result<VelocityNet> {
    VelocityNet::init(Architecture::mlp(action_dim, obs_dim), rng)
}

impl VelocityNet {
    /// Fan-in scaled uniform weights, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; zero biases.
    pub fn init(arch: Architecture, rng: &mut DeterministicRng) -> Result<Self> {
        if arch.action_dim == 0 || arch.obs_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::invalid(format!("init_net: bad architecture {arch:?}")));
        }
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                Dense {
                    weight: TensorBuffer::new(vec![fan_in, fan_out], w).expect("sized"),
                    bias: TensorBuffer::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            normalizer: None,
        })
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Result<Self> {
        if normalizer.obs_dim() != self.arch.obs_dim || normalizer.action_dim() != self.arch.action_dim {
            return Err(Error::invalid("normalizer dims do not match the network"));
        }
        self.normalizer = Some(normalizer);
        Ok(self)
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::State("normalizer has not been fitted".into()))
    }

    pub fn normalize(&self, x: &[f64], which: Space) -> Result<Vec<f64>> {
        self.normalizer()?.normalize(x, which)
    }

    pub fn denormalize(&self, y: &[f64], which: Space) -> Result<Vec<f64>> {
        self.normalizer()?.denormalize(y, which)
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.obs_dim
    }

    /// Parameters in a fixed order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&TensorBuffer> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut TensorBuffer> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Packs rows of `[action | s | obs]` into a `[n, input_dim]` buffer.
    pub fn pack_inputs(&self, actions: &[f64], s: &[f64], obs: &[f64]) -> Result<TensorBuffer> {
        let n = s.len();
        let (ad, od) = (self.arch.action_dim, self.arch.obs_dim);
        if n == 0 || actions.len() != n * ad || obs.len() != n * od {
            return Err(Error::invalid(format!(
                "velocity: expected {n} rows of action dim {ad} and obs dim {od}, got {} and {} values",
                actions.len(),
                obs.len()
            )));
        }
        if let Some(bad) = s.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("velocity: time {bad} outside [0, 1]")));
        }
        let mut data = Vec::with_capacity(n * self.arch.input_dim());
        for i in 0..n {
            data.extend_from_slice(&actions[i * ad..(i + 1) * ad]);
            data.push(s[i]);
            data.extend_from_slice(&obs[i * od..(i + 1) * od]);
        }
        TensorBuffer::new(vec![n, self.arch.input_dim()], data)
    }

    /// Records the forward pass on `tape`; returns the output node and the
    /// parameter leaves in [`Self::params`] order.
    pub fn record(&self, tape: &mut Tape, input: TensorBuffer) -> Result<(NodeId, Vec<NodeId>)> {
        let mut h = tape.leaf(input, false);
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone(), true);
            let b = tape.leaf(layer.bias.clone(), true);
            ids.push(w);
            ids.push(b);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i != last {
                h = tape.activate(h, self.arch.activation)?;
            }
        }
        Ok((h, ids))
    }

    /// Tape-free forward pass with the same arithmetic as [`Self::record`].
    pub fn forward_rows(&self, input: &TensorBuffer) -> Vec<f64> {
        let (n, _) = input.as_matrix();
        let mut h = input.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut z = vec![0.0; n * m];
            matmul_into(&h, layer.weight.data(), &mut z, n, k, m);
            for row in z.chunks_mut(m) {
                for (o, &b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if i != last {
                let act = self.arch.activation;
                z.iter_mut().for_each(|x| *x = act.apply(*x));
            }
            h = z;
        }
        h
    }

    /// `v(a, s, obs)` for one normalized action and observation.
    pub fn eval_velocity(&self, action: &[f64], s: f64, obs: &[f64]) -> Result<Vec<f64>> {
        let input = self.pack_inputs(action, &[s], obs)?;
        let out = self.forward_rows(&input);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::IntegrationFailure {
                step: 0,
                detail: "network produced a non-finite velocity".into(),
            });
        }
        Ok(out)
    }
}

impl VelocityField for VelocityNet {
    fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    fn velocity(&self, action: &[f64], s: f64, obs: &[f64]) -> Result<Vec<f64>> {
        self.eval_velocity(action, s, obs)
    }

    fn velocity_batch(&self, actions: &[f64], s: &[f64], obs: &[f64]) -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.pack_inputs(actions, s, obs)?;
        Ok(self.forward_rows(&input))
    }
}
