//! Feed-forward tanh estimators with structured output heads.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mat_vec, HyperDual, NodeId, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_LAYERS: usize = 5;

/// Hidden-layer shape shared by all estimators of a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkShape {
    pub width: usize,
    pub hidden_layers: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            width: DEFAULT_HIDDEN_WIDTH,
            hidden_layers: HIDDEN_LAYERS,
        }
    }
}

impl NetworkShape {
    pub fn spec(&self, input_dim: usize, output_dim: usize, head: Head) -> MlpSpec {
        let mut s = MlpSpec::new(input_dim, self.width, output_dim, head);
        s.hidden_widths = vec![self.width; self.hidden_layers];
        s
    }
}

/// How the last affine layer's output is turned into the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Raw affine output.
    Linear,
    /// Output read as an `n × n` matrix `P`; the estimate is `PᵀP`.
    Psd,
    /// Output read as an `n × n` matrix `M`; the estimate is `(M + Mᵀ)/2`.
    Symmetric,
    /// Elementwise `tanh`, so every component lies in `(-1, 1)`.
    Bounded,
}

impl Head {
    pub fn code(self) -> u8 {
        match self {
            Head::Linear => 0,
            Head::Psd => 1,
            Head::Symmetric => 2,
            Head::Bounded => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Head::Linear,
            1 => Head::Psd,
            2 => Head::Symmetric,
            3 => Head::Bounded,
            _ => return None,
        })
    }
}

/// Architecture of one estimator.
///
/// Inputs are first mapped affinely, `(x - input_offset) * input_scale`, so
/// that a time interval `[0, T]` lands on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
    pub input_offset: f64,
    pub input_scale: f64,
}

impl MlpSpec {
    /// Five hidden tanh layers of equal width plus the output layer.
    pub fn new(input_dim: usize, width: usize, output_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![width; HIDDEN_LAYERS],
            output_dim,
            head,
            input_offset: 0.0,
            input_scale: 1.0,
        }
    }

    /// Normalizes a scalar input ranging over `[lo, hi]` to `[-1, 1]`.
    pub fn with_input_range(mut self, lo: f64, hi: f64) -> Self {
        self.input_offset = 0.5 * (lo + hi);
        self.input_scale = 2.0 / (hi - lo);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::usage("network dimensions must be positive"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::usage("hidden widths must be positive"));
        }
        if matches!(self.head, Head::Psd | Head::Symmetric) && self.matrix_side().is_none() {
            return Err(Error::usage(format!(
                "matrix head needs a square output dimension, got {}",
                self.output_dim
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale != 0.0) {
            return Err(Error::usage("input scale must be finite and non-zero"));
        }
        Ok(())
    }

    /// `n` such that `output_dim = n²`, if any.
    pub fn matrix_side(&self) -> Option<usize> {
        let n = (self.output_dim as f64).sqrt().round() as usize;
        (n * n == self.output_dim).then_some(n)
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Half-width of the Glorot uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights and zero biases, laid out layer by layer as
/// `W (out × in, row-major)` followed by `b (out)`.
pub fn glorot_values(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let l = glorot_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-l, l);
        out.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
        out.extend(std::iter::repeat(0.0).take(fan_out));
    }
    out
}

/// A freshly initialized store holding one network under the slice `network`.
pub fn glorot_init(spec: &MlpSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.push("network", &glorot_values(spec, &mut rng))?;
    Ok(store)
}

/// `PᵀP` for a row-major `n × n` matrix `P`.
pub fn psd_head(raw: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| raw[k * n + i] * raw[k * n + j]).sum();
        }
    }
    out
}

pub fn symmetric_head(raw: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
        }
    }
    out
}

/// Largest double strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Elementwise `tanh`, kept strictly inside `(-1, 1)` even where `tanh`
/// rounds to `±1`.
pub fn bounded_head(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE)).collect()
}

/// A network placed at `offset` inside a shared parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    pub offset: usize,
}

impl Mlp {
    /// Binds `spec` to the store slice called `name`.
    pub fn bind(name: &str, spec: MlpSpec, store: &ParameterStore) -> Result<Self> {
        spec.validate()?;
        let slice = store
            .slice(name)
            .ok_or_else(|| Error::usage(format!("no parameter slice `{name}`")))?;
        if slice.len != spec.param_count() {
            return Err(Error::usage(format!(
                "slice `{name}` has {} parameters, network needs {}",
                slice.len,
                spec.param_count()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            offset: slice.offset,
        })
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_dim {
            return Err(Error::usage(format!(
                "network `{}` expects {} inputs, got {len}",
                self.name, self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn apply_head(&self, raw: Vec<f64>) -> Vec<f64> {
        match self.spec.head {
            Head::Linear => raw,
            Head::Psd => psd_head(&raw, self.spec.matrix_side().unwrap()),
            Head::Symmetric => symmetric_head(&raw, self.spec.matrix_side().unwrap()),
            Head::Bounded => bounded_head(&raw),
        }
    }

    /// Plain evaluation.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut x: Vec<f64> = input
            .iter()
            .map(|v| (v - self.spec.input_offset) * self.spec.input_scale)
            .collect();
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut off = self.offset;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut y: Vec<f64> = (0..fan_out)
                .map(|i| {
                    w[i * fan_in..(i + 1) * fan_in]
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + b[i]
                })
                .collect();
            if l < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
            off += fan_in * fan_out + fan_out;
        }
        Ok(self.apply_head(x))
    }

    /// Output and its first two derivatives with respect to a scalar input.
    ///
    /// Channels above `order` are returned as zeros.
    pub fn eval_with_input_derivs(
        &self,
        params: &[f64],
        t: f64,
        order: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if order > 2 {
            return Err(Error::usage("derivative order must be at most 2"));
        }
        self.check_input(1)?;
        let seed = HyperDual::variable(t);
        let y = self.forward_hyperdual(params, &[seed])?;
        let pick = |f: fn(&HyperDual) -> f64, k: usize| -> Vec<f64> {
            y.iter().map(|h| if k <= order { f(h) } else { 0.0 }).collect()
        };
        Ok((pick(|h| h.value, 0), pick(|h| h.d1, 1), pick(|h| h.d2, 2)))
    }

    /// Hyper-dual evaluation; errors name the first layer producing a
    /// non-finite value.
    pub fn forward_hyperdual(&self, params: &[f64], input: &[HyperDual]) -> Result<Vec<HyperDual>> {
        self.check_input(input.len())?;
        let mut x: Vec<HyperDual> = input
            .iter()
            .map(|v| (*v - HyperDual::constant(self.spec.input_offset)).scale(self.spec.input_scale))
            .collect();
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut off = self.offset;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut y = mat_vec(w, fan_out, &x);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += HyperDual::constant(*bi);
                if l < last {
                    *yi = yi.tanh();
                }
            }
            if y.iter().any(|h| !h.is_finite()) {
                return Err(Error::NonFiniteValue {
                    context: format!("network `{}` layer {l}", self.name),
                });
            }
            x = y;
            off += fan_in * fan_out + fan_out;
        }
        Ok(match self.spec.head {
            Head::Linear => x,
            Head::Bounded => x
                .into_iter()
                .map(|h| {
                    let mut y = h.tanh();
                    y.value = y.value.clamp(-BELOW_ONE, BELOW_ONE);
                    y
                })
                .collect(),
            Head::Psd => {
                let n = self.spec.matrix_side().unwrap();
                let mut out = vec![HyperDual::default(); n * n];
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            out[i * n + j] += x[k * n + i] * x[k * n + j];
                        }
                    }
                }
                out
            }
            Head::Symmetric => {
                let n = self.spec.matrix_side().unwrap();
                let mut out = vec![HyperDual::default(); n * n];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = (x[i * n + j] + x[j * n + i]).scale(0.5);
                    }
                }
                out
            }
        })
    }

    /// Records the network on `tape` for a batch `input` (`rows × input_dim`).
    pub fn record(&self, tape: &mut Tape<'_>, input: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(input).cols())?;
        let mut x = if self.spec.input_offset != 0.0 || self.spec.input_scale != 1.0 {
            let shifted = tape.add_const(input, -self.spec.input_offset);
            tape.scale(shifted, self.spec.input_scale)
        } else {
            input
        };
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut off = self.offset;
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            x = tape.linear(x, off, fan_in, fan_out)?;
            if l < last {
                x = tape.tanh(x);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(match self.spec.head {
            Head::Linear => x,
            Head::Bounded => tape.tanh(x),
            Head::Psd => {
                let n = self.spec.matrix_side().unwrap();
                let pt = tape.transpose(x, n, n)?;
                tape.batch_matmul(pt, x, n, n, n)?
            }
            Head::Symmetric => {
                let n = self.spec.matrix_side().unwrap();
                let mt = tape.transpose(x, n, n)?;
                let s = tape.add(x, mt)?;
                tape.scale(s, 0.5)
            }
        })
    }

    /// Records the network on scalar time inputs seeded for derivatives.
    pub fn record_times(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<NodeId> {
        let t = tape.time_input(times);
        self.record(tape, t)
    }

    /// Records the network on plain (non-differentiated) inputs.
    pub fn record_values(&self, tape: &mut Tape<'_>, rows: usize, values: Vec<f64>) -> Result<NodeId> {
        let cols = self.spec.input_dim;
        let c = tape.constant(Tensor::from_values(rows, cols, values));
        self.record(tape, c)
    }
}

/// A learnable scalar such as the terminal time or a terminal multiplier,
/// kept inside `[lower, upper]` after each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableScalar {
    pub name: String,
    pub init: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl LearnableScalar {
    pub fn new(name: &str, init: f64) -> Self {
        Self {
            name: name.to_string(),
            init,
            lower: None,
            upper: None,
        }
    }

    pub fn bounded(mut self, lower: f64, upper: f64) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn clamp(&self, v: f64) -> f64 {
        let v = self.lower.map_or(v, |lo| v.max(lo));
        self.upper.map_or(v, |hi| v.min(hi))
    }
}
