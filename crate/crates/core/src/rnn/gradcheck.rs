use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, InputNormalizer, LstmModel, LstmWeights, N_OUTPUTS, PARAMETER_GROUPS};
use crate::domain::SpendingProfile;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A model plus a labelled batch to differentiate the mean squared error on.
#[derive(Debug, Clone)]
pub struct CheckProblem<T> {
    pub model: LstmModel<T>,
    pub batch: Vec<(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])>,
}

/// Random model (weights in ±0.5, non-trivial normaliser) and random simplex inputs.
pub fn random_check_problem<T: Scalar>(seed: u64, k: usize, steps: usize, batch_size: usize) -> CheckProblem<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])> = (0..batch_size)
        .map(|b| {
            let seq = (0..steps)
                .map(|t| {
                    let amounts = (0..k).map(|_| T::of(rng.random_range(0.05..1.0))).collect();
                    SpendingProfile::from_amounts(format!("g{b}"), t, amounts).expect("positive amounts")
                })
                .collect();
            let target = [(); N_OUTPUTS].map(|_| T::of(rng.random_range(0.0..1.0)));
            (seq, target)
        })
        .collect();
    let mut model = LstmModel::init(k, 0.5, 1.0, rng.random());
    for b in model.weights.readout_bias.iter_mut() {
        *b = T::of(rng.random_range(-0.5..0.5));
    }
    model.normalizer = InputNormalizer::fit(k, batch.iter().flat_map(|(s, _)| s.iter()));
    CheckProblem { model, batch }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub max_relative_error: f64,
    /// Parameter block and flat index of the worst entry.
    pub worst: (&'static str, usize),
    pub n_parameters: usize,
}

fn batch_loss<T: Scalar>(model: &LstmModel<T>, batch: &[(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])]) -> Result<f64> {
    let mut total = 0.0;
    for (seq, target) in batch {
        let out = forward(model, seq)?;
        for j in 0..N_OUTPUTS {
            total += (out.prediction[j] - target[j]).as_f64().powi(2);
        }
    }
    Ok(total / (batch.len() * N_OUTPUTS) as f64)
}

fn analytic_gradient<T: Scalar>(
    model: &LstmModel<T>,
    batch: &[(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])],
) -> Result<LstmWeights<T>> {
    let denom = T::of_usize(batch.len() * N_OUTPUTS);
    let mut grad = LstmWeights::zeros(model.n_inputs());
    for (seq, target) in batch {
        let out = forward(model, seq)?;
        let mut dy = [T::zero(); N_OUTPUTS];
        for j in 0..N_OUTPUTS {
            dy[j] = T::of(2.0) * (out.prediction[j] - target[j]) / denom;
        }
        grad.add_scaled(&backward(model, &out.cache, &dy)?, T::one());
    }
    Ok(grad)
}

/// Largest `|a − n| / max(|a|, |n|, 1e-8)` between backpropagated and central-difference gradients.
pub fn gradient_check<T: Scalar>(
    model: &LstmModel<T>,
    batch: &[(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])],
    epsilon: f64,
) -> Result<GradCheckResult> {
    gradient_check_with(model, batch, epsilon, |_| {})
}

/// Like [`gradient_check`], with a hook that may alter the analytic gradient before comparison.
pub fn gradient_check_with<T: Scalar>(
    model: &LstmModel<T>,
    batch: &[(Vec<SpendingProfile<T>>, [T; N_OUTPUTS])],
    epsilon: f64,
    tamper: impl FnOnce(&mut LstmWeights<T>),
) -> Result<GradCheckResult> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon:e} outside [1e-7, 1e-3]")));
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset("gradient check needs a non-empty batch".into()));
    }
    let mut analytic = analytic_gradient(model, batch)?;
    tamper(&mut analytic);

    let mut probe = model.clone();
    let mut worst = (0.0_f64, (PARAMETER_GROUPS[0], 0));
    let eps = T::of(epsilon);
    let n_groups = PARAMETER_GROUPS.len();
    for g in 0..n_groups {
        let len = model.weights.groups()[g].len();
        for j in 0..len {
            let original = model.weights.groups()[g][j];
            probe.weights.groups_mut()[g][j] = original + eps;
            let plus = batch_loss(&probe, batch)?;
            probe.weights.groups_mut()[g][j] = original - eps;
            let minus = batch_loss(&probe, batch)?;
            probe.weights.groups_mut()[g][j] = original;
            // Divide by the perturbation actually applied in T.
            let step = ((original + eps) - (original - eps)).as_f64();
            let numeric = (plus - minus) / step;
            let exact = analytic.groups()[g][j].as_f64();
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            if rel > worst.0 || rel.is_nan() {
                worst = (rel, (PARAMETER_GROUPS[g], j));
            }
        }
    }
    Ok(GradCheckResult {
        max_relative_error: worst.0,
        worst: worst.1,
        n_parameters: model.weights.n_parameters(),
    })
}
