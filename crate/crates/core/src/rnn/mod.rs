//! Three-unit LSTM regressing trait grades from a sequence of spending profiles.
//!
//! Gate equations, with `x` the standardised input:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)      g = tanh(W_g x + U_g h + b_g)
//! c_t = f ⊙ c_{t−1} + i ⊙ g       h_t = o ⊙ tanh(c_t)
//! ŷ = W_out h_T + b_out
//! ```
//!
//! The hidden states `h_1..h_T` form the customer's trajectory.

mod gradcheck;
mod train;

pub use gradcheck::{gradient_check, gradient_check_with, random_check_problem, CheckProblem, GradCheckResult};
pub use train::{split_customers, train, EpochStats, Optimizer, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{SpendingProfile, N_TRAITS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, sigmoid, Scalar};
use crate::synth::Dataset;

pub const HIDDEN: usize = 3;
pub const N_OUTPUTS: usize = N_TRAITS;

pub type Vec3<T> = [T; HIDDEN];

/// Weights of one gate: input (3×K), recurrent (3×3) and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Gate<T> {
    pub input: Matrix<T>,
    pub recurrent: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gate<T> {
    fn zeros(k: usize) -> Self {
        Gate {
            input: Matrix::zeros(HIDDEN, k),
            recurrent: Matrix::zeros(HIDDEN, HIDDEN),
            bias: vec![T::zero(); HIDDEN],
        }
    }

    fn random(k: usize, scale: f64, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |_, _| T::of(rng.random_range(-scale..=scale));
        Gate {
            input: Matrix::from_fn(HIDDEN, k, &mut draw),
            recurrent: Matrix::from_fn(HIDDEN, HIDDEN, &mut draw),
            bias: vec![T::of(bias); HIDDEN],
        }
    }

    #[inline]
    fn preactivation(&self, x: &[T], h: &Vec3<T>) -> Vec3<T> {
        let mut out = [T::zero(); HIDDEN];
        for (u, o) in out.iter_mut().enumerate() {
            *o = dot(self.input.row(u), x) + dot(self.recurrent.row(u), h) + self.bias[u];
        }
        out
    }
}

/// All trainable parameters. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LstmWeights<T> {
    pub input_gate: Gate<T>,
    pub forget_gate: Gate<T>,
    pub output_gate: Gate<T>,
    pub candidate: Gate<T>,
    /// 5×3
    pub readout: Matrix<T>,
    pub readout_bias: Vec<T>,
}

pub const PARAMETER_GROUPS: [&str; 14] = [
    "input_gate.input",
    "input_gate.recurrent",
    "input_gate.bias",
    "forget_gate.input",
    "forget_gate.recurrent",
    "forget_gate.bias",
    "output_gate.input",
    "output_gate.recurrent",
    "output_gate.bias",
    "candidate.input",
    "candidate.recurrent",
    "candidate.bias",
    "readout",
    "readout_bias",
];

impl<T: Scalar> LstmWeights<T> {
    pub fn zeros(k: usize) -> Self {
        LstmWeights {
            input_gate: Gate::zeros(k),
            forget_gate: Gate::zeros(k),
            output_gate: Gate::zeros(k),
            candidate: Gate::zeros(k),
            readout: Matrix::zeros(N_OUTPUTS, HIDDEN),
            readout_bias: vec![T::zero(); N_OUTPUTS],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.input_gate.input.cols()
    }

    /// Parameter blocks in [`PARAMETER_GROUPS`] order.
    pub fn groups(&self) -> [&[T]; 14] {
        fn g<T: Scalar>(gate: &Gate<T>) -> [&[T]; 3] {
            [gate.input.as_slice(), gate.recurrent.as_slice(), &gate.bias[..]]
        }
        let [a, b, c] = g(&self.input_gate);
        let [d, e, f] = g(&self.forget_gate);
        let [h, i, j] = g(&self.output_gate);
        let [k, l, m] = g(&self.candidate);
        [a, b, c, d, e, f, h, i, j, k, l, m, self.readout.as_slice(), &self.readout_bias]
    }

    pub fn groups_mut(&mut self) -> [&mut [T]; 14] {
        fn g<T: Scalar>(gate: &mut Gate<T>) -> [&mut [T]; 3] {
            [gate.input.as_mut_slice(), gate.recurrent.as_mut_slice(), &mut gate.bias[..]]
        }
        let [a, b, c] = g(&mut self.input_gate);
        let [d, e, f] = g(&mut self.forget_gate);
        let [h, i, j] = g(&mut self.output_gate);
        let [k, l, m] = g(&mut self.candidate);
        [a, b, c, d, e, f, h, i, j, k, l, m, self.readout.as_mut_slice(), &mut self.readout_bias]
    }

    pub fn n_parameters(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// `self += scale · other`, blockwise.
    pub fn add_scaled(&mut self, other: &LstmWeights<T>, scale: T) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the bit patterns.
        let mut hash = 0xcbf2_9ce4_8422_2325_u64;
        for group in self.groups() {
            for x in group {
                hash ^= x.as_f64().to_bits();
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

/// Fixed input standardisation applied before the gates: `(x − shift) ⊙ scale`.
///
/// [`InputNormalizer::fit`] centres each class and divides by one pooled
/// standard deviation, so the relative spread of the classes is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct InputNormalizer<T> {
    pub shift: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> InputNormalizer<T> {
    pub fn identity(k: usize) -> Self {
        InputNormalizer {
            shift: vec![T::zero(); k],
            scale: vec![T::one(); k],
        }
    }

    /// Per-class means and the inverse root of the mean per-class variance.
    pub fn fit<'a, S: AsRef<[T]> + 'a>(k: usize, profiles: impl IntoIterator<Item = &'a S>) -> Self {
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut n = 0usize;
        for p in profiles {
            for (j, &x) in p.as_ref().iter().enumerate() {
                let x = x.as_f64();
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1;
        }
        if n == 0 || k == 0 {
            return Self::identity(k);
        }
        let nf = n as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let pooled = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| (q / nf - m * m).max(0.0))
            .sum::<f64>()
            / k as f64;
        let scale = if pooled > 1e-24 { 1.0 / pooled.sqrt() } else { 1.0 };
        InputNormalizer {
            shift: shift.into_iter().map(T::of).collect(),
            scale: vec![T::of(scale); k],
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect()
    }

    fn fingerprint(&self) -> u64 {
        let mut hash = 0x9e37_79b9_7f4a_7c15_u64;
        for x in self.shift.iter().chain(&self.scale) {
            hash ^= x.as_f64().to_bits();
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LstmModel<T> {
    pub weights: LstmWeights<T>,
    pub normalizer: InputNormalizer<T>,
}

impl<T: Scalar> LstmModel<T> {
    pub fn zeros(k: usize) -> Self {
        LstmModel {
            weights: LstmWeights::zeros(k),
            normalizer: InputNormalizer::identity(k),
        }
    }

    /// Uniform `[−scale, scale]` weights, zero biases except the forget gate.
    pub fn init(k: usize, weight_scale: f64, forget_bias: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = LstmWeights {
            input_gate: Gate::random(k, weight_scale, 0.0, &mut rng),
            forget_gate: Gate::random(k, weight_scale, forget_bias, &mut rng),
            output_gate: Gate::random(k, weight_scale, 0.0, &mut rng),
            candidate: Gate::random(k, weight_scale, 0.0, &mut rng),
            readout: Matrix::from_fn(N_OUTPUTS, HIDDEN, |_, _| T::of(rng.random_range(-weight_scale..=weight_scale))),
            readout_bias: vec![T::zero(); N_OUTPUTS],
        };
        LstmModel {
            weights,
            normalizer: InputNormalizer::identity(k),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.weights.n_inputs()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_inputs();
        let w = &self.weights;
        for gate in [&w.input_gate, &w.forget_gate, &w.output_gate, &w.candidate] {
            if gate.input.rows() != HIDDEN
                || gate.input.cols() != k
                || gate.recurrent.rows() != HIDDEN
                || gate.recurrent.cols() != HIDDEN
                || gate.bias.len() != HIDDEN
            {
                return Err(Error::Dimension("gate shapes disagree with a 3-unit LSTM".into()));
            }
        }
        if w.readout.rows() != N_OUTPUTS || w.readout.cols() != HIDDEN || w.readout_bias.len() != N_OUTPUTS {
            return Err(Error::Dimension("readout must be 5×3 with a 5-vector bias".into()));
        }
        if self.normalizer.shift.len() != k || self.normalizer.scale.len() != k {
            return Err(Error::Dimension("normaliser length differs from the input size".into()));
        }
        if !w.is_finite() {
            return Err(Error::Schema("model contains non-finite weights".into()));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        self.weights.fingerprint() ^ self.normalizer.fingerprint().rotate_left(17)
    }
}

/// Hidden states `h_1..h_T` of one customer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Trajectory<T> {
    pub customer_id: String,
    pub points: Vec<Vec3<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `h_T − h_1`
    pub fn net_displacement(&self) -> Option<Vec3<T>> {
        let first = self.points.first()?;
        let last = self.points.last()?;
        Some([last[0] - first[0], last[1] - first[1], last[2] - first[2]])
    }
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    x: Vec<T>,
    h_prev: Vec3<T>,
    c_prev: Vec3<T>,
    i: Vec3<T>,
    f: Vec3<T>,
    o: Vec3<T>,
    g: Vec3<T>,
    tanh_c: Vec3<T>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    fingerprint: u64,
    steps: Vec<StepCache<T>>,
    h_last: Vec3<T>,
}

impl<T> ForwardCache<T> {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub trajectory: Trajectory<T>,
    pub prediction: [T; N_OUTPUTS],
    pub cache: ForwardCache<T>,
}

/// Runs the recurrence from `h₀ = c₀ = 0` over the profile sequence.
pub fn forward<T: Scalar>(model: &LstmModel<T>, sequence: &[SpendingProfile<T>]) -> Result<ForwardOutput<T>> {
    let customer_id = sequence.first().map(|p| p.customer_id.clone()).unwrap_or_default();
    let (points, prediction, cache) = forward_inputs(model, sequence, model.fingerprint())?;
    Ok(ForwardOutput {
        trajectory: Trajectory { customer_id, points },
        prediction,
        cache,
    })
}

type Forwarded<T> = (Vec<Vec3<T>>, [T; N_OUTPUTS], ForwardCache<T>);

pub(crate) fn forward_inputs<T: Scalar, S: AsRef<[T]>>(
    model: &LstmModel<T>,
    sequence: &[S],
    fingerprint: u64,
) -> Result<Forwarded<T>> {
    if sequence.is_empty() {
        return Err(Error::Dimension("forward needs at least one time step".into()));
    }
    let k = model.n_inputs();
    let w = &model.weights;
    let mut h = [T::zero(); HIDDEN];
    let mut c = [T::zero(); HIDDEN];
    let mut points = Vec::with_capacity(sequence.len());
    let mut steps = Vec::with_capacity(sequence.len());
    for raw in sequence {
        let raw = raw.as_ref();
        if raw.len() != k {
            return Err(Error::Dimension(format!(
                "input has {} classes, model expects {k}",
                raw.len()
            )));
        }
        let x = model.normalizer.apply(raw);
        let i = w.input_gate.preactivation(&x, &h).map(sigmoid);
        let f = w.forget_gate.preactivation(&x, &h).map(sigmoid);
        let o = w.output_gate.preactivation(&x, &h).map(sigmoid);
        let g = w.candidate.preactivation(&x, &h).map(|v| v.tanh());
        let c_prev = c;
        let h_prev = h;
        let mut tanh_c = [T::zero(); HIDDEN];
        for u in 0..HIDDEN {
            c[u] = f[u] * c_prev[u] + i[u] * g[u];
            tanh_c[u] = c[u].tanh();
            h[u] = o[u] * tanh_c[u];
        }
        points.push(h);
        steps.push(StepCache {
            x,
            h_prev,
            c_prev,
            i,
            f,
            o,
            g,
            tanh_c,
        });
    }
    let mut prediction = [T::zero(); N_OUTPUTS];
    for (r, p) in prediction.iter_mut().enumerate() {
        *p = dot(w.readout.row(r), &h) + w.readout_bias[r];
    }
    Ok((
        points,
        prediction,
        ForwardCache {
            fingerprint,
            steps,
            h_last: h,
        },
    ))
}

/// Backpropagation through time for a loss whose gradient w.r.t. the prediction is `d_prediction`.
pub fn backward<T: Scalar>(
    model: &LstmModel<T>,
    cache: &ForwardCache<T>,
    d_prediction: &[T; N_OUTPUTS],
) -> Result<LstmWeights<T>> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::Cache("cache was produced by different weights".into()));
    }
    if cache.steps.iter().any(|s| s.x.len() != model.n_inputs()) {
        return Err(Error::Cache("cached inputs have a different class count".into()));
    }
    let mut grad = LstmWeights::zeros(model.n_inputs());
    accumulate_backward(model, cache, d_prediction, &mut grad);
    Ok(grad)
}

pub(crate) fn accumulate_backward<T: Scalar>(
    model: &LstmModel<T>,
    cache: &ForwardCache<T>,
    dy: &[T; N_OUTPUTS],
    grad: &mut LstmWeights<T>,
) {
    let w = &model.weights;
    let mut dh = [T::zero(); HIDDEN];
    for r in 0..N_OUTPUTS {
        grad.readout_bias[r] += dy[r];
        for u in 0..HIDDEN {
            let idx = r * HIDDEN + u;
            grad.readout.as_mut_slice()[idx] += dy[r] * cache.h_last[u];
            dh[u] += w.readout.get(r, u) * dy[r];
        }
    }
    let mut dc = [T::zero(); HIDDEN];
    let one = T::one();
    for step in cache.steps.iter().rev() {
        let mut da_i = [T::zero(); HIDDEN];
        let mut da_f = [T::zero(); HIDDEN];
        let mut da_o = [T::zero(); HIDDEN];
        let mut da_g = [T::zero(); HIDDEN];
        let mut dc_prev = [T::zero(); HIDDEN];
        for u in 0..HIDDEN {
            let tc = step.tanh_c[u];
            let d_o = dh[u] * tc;
            let dcu = dc[u] + dh[u] * step.o[u] * (one - tc * tc);
            let d_i = dcu * step.g[u];
            let d_g = dcu * step.i[u];
            let d_f = dcu * step.c_prev[u];
            dc_prev[u] = dcu * step.f[u];
            da_i[u] = d_i * step.i[u] * (one - step.i[u]);
            da_f[u] = d_f * step.f[u] * (one - step.f[u]);
            da_o[u] = d_o * step.o[u] * (one - step.o[u]);
            da_g[u] = d_g * (one - step.g[u] * step.g[u]);
        }
        let mut dh_prev = [T::zero(); HIDDEN];
        for (gate, gg, da) in [
            (&w.input_gate, &mut grad.input_gate, &da_i),
            (&w.forget_gate, &mut grad.forget_gate, &da_f),
            (&w.output_gate, &mut grad.output_gate, &da_o),
            (&w.candidate, &mut grad.candidate, &da_g),
        ] {
            for u in 0..HIDDEN {
                let d = da[u];
                if d == T::zero() {
                    continue;
                }
                for (gw, &x) in gg.input.row_mut(u).iter_mut().zip(&step.x) {
                    *gw += d * x;
                }
                for v in 0..HIDDEN {
                    let idx = u * HIDDEN + v;
                    gg.recurrent.as_mut_slice()[idx] += d * step.h_prev[v];
                    dh_prev[v] += gate.recurrent.get(u, v) * d;
                }
                gg.bias[u] += d;
            }
        }
        dh = dh_prev;
        dc = dc_prev;
    }
}

/// One trajectory per customer over the sequence chosen by `span` (see [`Customer::window`](crate::synth::Customer::window)).
pub fn extract_trajectories<T: Scalar>(model: &LstmModel<T>, dataset: &Dataset<T>, span: usize) -> Result<Vec<Trajectory<T>>> {
    let fingerprint = model.fingerprint();
    dataset
        .customers
        .iter()
        .map(|c| {
            let (points, _, _) = forward_inputs(model, c.window(span)?, fingerprint)?;
            Ok(Trajectory {
                customer_id: c.customer_id.clone(),
                points,
            })
        })
        .collect()
}
