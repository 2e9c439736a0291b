use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use super::schedule::NoiseSchedule;
use crate::numerics::{RngStream, Tape, TensorValue, Var};

pub const TIME_FEATURES: usize = 16;
pub const HIDDEN: usize = 128;

/// Sinusoidal features of the integer timestep.
pub fn time_features(t: usize) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    let half = TIME_FEATURES / 2;
    for k in 0..half {
        let freq = libm::pow(1000.0, -(k as f64) / half as f64);
        out[k] = libm::sin(t as f64 * freq);
        out[half + k] = libm::cos(t as f64 * freq);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: TensorValue,
    pub bias: TensorValue,
}

impl Layer {
    fn init(rng: &mut RngStream, inputs: usize, outputs: usize) -> Self {
        let scale = 1.0 / libm::sqrt(inputs as f64);
        Self { weight: rng.gaussian(&[outputs, inputs]).map(|v| v * scale), bias: TensorValue::zeros(&[outputs]) }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (outputs, inputs) = (self.weight.shape()[0], self.weight.shape()[1]);
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; rows * outputs];
        for r in 0..rows {
            let xr = &x[r * inputs..(r + 1) * inputs];
            for o in 0..outputs {
                let wo = &w[o * inputs..(o + 1) * inputs];
                let mut acc = b[o];
                for (a, c) in wo.iter().zip(xr) {
                    acc += a * c;
                }
                out[r * outputs + o] = acc;
            }
        }
        out
    }
}

/// Weights of the three fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub layers: [Layer; 3],
}

const LAYER_NAMES: [&str; 3] = ["fc1", "fc2", "fc3"];

impl DenoiserParams {
    /// `(name, tensor)` pairs, e.g. `fc1.weight`.
    pub fn named(&self) -> Vec<(String, &TensorValue)> {
        let mut out = Vec::with_capacity(6);
        for (name, l) in LAYER_NAMES.iter().zip(&self.layers) {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut TensorValue> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorValue> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    /// Rebuilds parameters from named tensors; `get` returns `None` for a
    /// missing name.
    pub fn from_named<'a>(mut get: impl FnMut(&str) -> Option<&'a TensorValue>) -> Result<Self> {
        let mut fetch = |n: String| -> Result<TensorValue> {
            get(&n).cloned().ok_or_else(|| Error::argument("parameters", format!("missing {n}")))
        };
        let mut layers = Vec::with_capacity(3);
        for name in LAYER_NAMES {
            layers.push(Layer {
                weight: fetch(format!("{name}.weight"))?,
                bias: fetch(format!("{name}.bias"))?,
            });
        }
        let [a, b, c]: [Layer; 3] = layers.try_into().map_err(|_| Error::Provenance)?;
        Ok(Self { layers: [a, b, c] })
    }
}

/// Tape handles for one recording of the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    vars: [(Var, Var); 3],
}

impl ParamVars {
    pub fn all(&self) -> [Var; 6] {
        let v = &self.vars;
        [v[0].0, v[0].1, v[1].0, v[1].1, v[2].0, v[2].1]
    }
}

/// Conditional noise predictor. An MLP over `[x_t | time features |
/// embedding]` with two SiLU hidden layers estimates the clean image `f`,
/// and the noise follows as `(x_t - sqrt(alpha_bar) f) / sqrt(1 - alpha_bar)`.
/// The hidden width is below the image size, so predicting the noise
/// directly would leave most of it unexplained; clean images lie on a
/// low-dimensional set the narrow output can cover.
///
/// Keeps the pre-finetune weights as a frozen copy once prior training has
/// finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    image_len: usize,
    embed_dim: usize,
    params: DenoiserParams,
    frozen: Option<DenoiserParams>,
    schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(image_len: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let input = image_len + TIME_FEATURES + embed_dim;
        let layers = [
            Layer::init(&mut rng, input, HIDDEN),
            Layer::init(&mut rng, HIDDEN, HIDDEN),
            Layer::init(&mut rng, HIDDEN, image_len),
        ];
        Self { image_len, embed_dim, params: DenoiserParams { layers }, frozen: None, schedule: NoiseSchedule::default() }
    }

    pub fn from_params(params: DenoiserParams, frozen: Option<DenoiserParams>) -> Result<Self> {
        let w1 = params.layers[0].weight.shape();
        let image_len = params.layers[2].weight.shape()[0];
        if w1.len() != 2 || w1[1] <= image_len + TIME_FEATURES {
            return Err(Error::shape("denoiser", format!("first layer {w1:?}")));
        }
        let embed_dim = w1[1] - image_len - TIME_FEATURES;
        let d = Self { image_len, embed_dim, params, frozen, schedule: NoiseSchedule::default() };
        if let Some(f) = &d.frozen {
            if f.tensors().map(|t| t.shape()).ne(d.params.tensors().map(|t| t.shape())) {
                return Err(Error::shape("denoiser", "frozen copy has different shapes"));
            }
        }
        Ok(d)
    }

    /// Replaces the schedule used to turn clean-image estimates into noise.
    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    // Multipliers of x_t and of the clean-image estimate.
    fn noise_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let (a, s) = self.schedule.coefficients(t)?;
        Ok((1.0 / s, a / s))
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut DenoiserParams {
        &mut self.params
    }

    /// Weights as they were when prior training finished.
    pub fn frozen(&self) -> Option<&DenoiserParams> {
        self.frozen.as_ref()
    }

    pub(crate) fn freeze(&mut self) {
        self.frozen = Some(self.params.clone());
    }

    /// Copy of this model running the frozen pre-finetune weights.
    pub fn pre_finetune(&self) -> Option<Denoiser> {
        self.frozen.as_ref().map(|f| Denoiser {
            image_len: self.image_len,
            embed_dim: self.embed_dim,
            params: f.clone(),
            frozen: Some(f.clone()),
            schedule: self.schedule.clone(),
        })
    }

    fn input_row(&self, x_t: &[f64], e: &[f64], t: usize, row: &mut Vec<f64>) {
        row.extend_from_slice(x_t);
        row.extend_from_slice(&time_features(t));
        row.extend_from_slice(e);
    }

    fn check(&self, x_t: &[f64], e: &[f64]) -> Result<()> {
        if x_t.len() != self.image_len || e.len() != self.embed_dim {
            return Err(Error::shape(
                "predict",
                format!("x_t {} / e {} vs {} / {}", x_t.len(), e.len(), self.image_len, self.embed_dim),
            ));
        }
        Ok(())
    }

    /// Noise prediction `eps_hat(x_t; e, t)`.
    pub fn predict(&self, x_t: &[f64], e: &[f64], t: usize) -> Result<Vec<f64>> {
        self.predict_many(x_t, &[e], t).map(|mut v| v.swap_remove(0))
    }

    /// Predictions for one noisy image under several conditions.
    pub fn predict_many(&self, x_t: &[f64], conditions: &[&[f64]], t: usize) -> Result<Vec<Vec<f64>>> {
        let rows = conditions.len();
        let mut input = Vec::with_capacity(rows * (self.image_len + TIME_FEATURES + self.embed_dim));
        for e in conditions {
            self.check(x_t, e)?;
            self.input_row(x_t, e, t, &mut input);
        }
        let [l1, l2, l3] = &self.params.layers;
        let h = l1.forward(&input, rows).into_iter().map(silu).collect::<Vec<_>>();
        let h = l2.forward(&h, rows).into_iter().map(silu).collect::<Vec<_>>();
        let clean = l3.forward(&h, rows);
        let (cx, cf) = self.noise_coefficients(t)?;
        Ok(clean.chunks(self.image_len).map(|f| f.iter().zip(x_t).map(|(f, x)| x * cx - f * cf).collect()).collect())
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut rec = |t: &TensorValue| if trainable { tape.param(t) } else { tape.constant(t) };
        let l = &self.params.layers;
        ParamVars {
            vars: [
                (rec(&l[0].weight), rec(&l[0].bias)),
                (rec(&l[1].weight), rec(&l[1].bias)),
                (rec(&l[2].weight), rec(&l[2].bias)),
            ],
        }
    }

    /// Differentiable forward pass over a batch: `x_t` is `[rows, image_len]`,
    /// `e` is `[rows, embed_dim]`, one timestep per row.
    pub fn record(&self, tape: &mut Tape, params: ParamVars, x_t: Var, e: Var, t: &[usize]) -> Result<Var> {
        let rows = t.len();
        if tape.shape(x_t)? != [rows, self.image_len] || tape.shape(e)? != [rows, self.embed_dim] {
            return Err(Error::shape(
                "record",
                format!("x_t {:?}, e {:?}, {rows} timesteps", tape.shape(x_t)?, tape.shape(e)?),
            ));
        }
        let mut tf = Vec::with_capacity(rows * TIME_FEATURES);
        let (mut cx, mut cf) = (Vec::with_capacity(rows * self.image_len), Vec::with_capacity(rows * self.image_len));
        for &s in t {
            tf.extend_from_slice(&time_features(s));
            let (a, b) = self.noise_coefficients(s)?;
            cx.extend(core::iter::repeat_n(a, self.image_len));
            cf.extend(core::iter::repeat_n(b, self.image_len));
        }
        let tf = tape.constant_from(&[rows, TIME_FEATURES], tf)?;
        let input = tape.concat(&[x_t, tf, e])?;
        let [(w1, b1), (w2, b2), (w3, b3)] = params.vars;
        let h = tape.linear(input, w1, b1)?;
        let h = tape.silu(h)?;
        let h = tape.linear(h, w2, b2)?;
        let h = tape.silu(h)?;
        let clean = tape.linear(h, w3, b3)?;
        let shape = [rows, self.image_len];
        let (cx, cf) = (tape.constant_from(&shape, cx)?, tape.constant_from(&shape, cf)?);
        let scaled_x = tape.mul(x_t, cx)?;
        let scaled_f = tape.mul(clean, cf)?;
        tape.sub(scaled_x, scaled_f)
    }
}

// Same expression as the tape's SiLU so both paths agree bitwise.
fn silu(x: f64) -> f64 {
    x * (1.0 / (1.0 + libm::exp(-x)))
}
