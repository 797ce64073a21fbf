use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate_backward, forward_inputs, InputNormalizer, LstmModel, LstmWeights, N_OUTPUTS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub forget_bias_init: f64,
    pub weight_init_scale: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 300,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            forget_bias_init: 1.0,
            weight_init_scale: 0.2,
            seed: 45,
            train_fraction: 0.8,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.adam_eps) || !positive(self.weight_init_scale) {
            return Err(Error::Config("learning rate, epsilon and init scale must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if !self.forget_bias_init.is_finite() {
            return Err(Error::Config("forget_bias_init must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub validation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_validation: usize,
    pub initial_validation_mse: f64,
    pub final_validation_mse: f64,
    /// MSE of predicting the validation label mean, i.e. the pooled label variance.
    pub validation_label_variance: f64,
    pub validation_r2: [f64; N_OUTPUTS],
    pub epochs: Vec<EpochStats>,
}

/// Seeded customer split; both halves are returned in ascending index order.
pub fn split_customers(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::EmptyDataset(format!("{n} customers cannot be split into train and validation")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut validation = idx[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    Ok((train, validation))
}

struct Evaluation {
    mse: f64,
    label_variance: f64,
    r2: [f64; N_OUTPUTS],
}

fn evaluate<T: Scalar>(model: &LstmModel<T>, dataset: &Dataset<T>, indices: &[usize]) -> Result<Evaluation> {
    let fingerprint = model.fingerprint();
    let mut preds = Vec::with_capacity(indices.len());
    for &i in indices {
        let c = &dataset.customers[i];
        let (_, y, _) = forward_inputs(model, &c.profiles, fingerprint)?;
        preds.push(y.map(|v| v.as_f64()));
    }
    let labels: Vec<[f64; N_OUTPUTS]> = indices
        .iter()
        .map(|&i| dataset.customers[i].traits.grades.map(|v| v.as_f64()))
        .collect();
    let n = indices.len() as f64;
    let mut mean = [0.0; N_OUTPUTS];
    for y in &labels {
        for j in 0..N_OUTPUTS {
            mean[j] += y[j] / n;
        }
    }
    let mut ss_res = [0.0; N_OUTPUTS];
    let mut ss_tot = [0.0; N_OUTPUTS];
    for (p, y) in preds.iter().zip(&labels) {
        for j in 0..N_OUTPUTS {
            ss_res[j] += (p[j] - y[j]).powi(2);
            ss_tot[j] += (y[j] - mean[j]).powi(2);
        }
    }
    let total = n * N_OUTPUTS as f64;
    let mut r2 = [0.0; N_OUTPUTS];
    for j in 0..N_OUTPUTS {
        r2[j] = if ss_tot[j] > 0.0 { 1.0 - ss_res[j] / ss_tot[j] } else { f64::NAN };
    }
    Ok(Evaluation {
        mse: ss_res.iter().sum::<f64>() / total,
        label_variance: ss_tot.iter().sum::<f64>() / total,
        r2,
    })
}

struct AdamState<T> {
    m: LstmWeights<T>,
    v: LstmWeights<T>,
    step: i32,
}

fn apply_update<T: Scalar>(
    weights: &mut LstmWeights<T>,
    grad: &LstmWeights<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) {
    let lr = T::of(config.learning_rate);
    match config.optimizer {
        Optimizer::Sgd => weights.add_scaled(grad, -lr),
        Optimizer::Adam => {
            state.step += 1;
            let (b1, b2) = (T::of(config.adam_beta1), T::of(config.adam_beta2));
            let c1 = T::one() - b1.powi(state.step);
            let c2 = T::one() - b2.powi(state.step);
            let eps = T::of(config.adam_eps);
            let groups = weights
                .groups_mut()
                .into_iter()
                .zip(grad.groups())
                .zip(state.m.groups_mut().into_iter().zip(state.v.groups_mut()));
            for ((w, g), (m, v)) in groups {
                for j in 0..w.len() {
                    m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                    v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Minimises the mean squared error of the five trait grades.
///
/// Seeds are derived from `config.seed`: the split uses it directly, weight
/// initialisation adds 1 and the per-epoch shuffles add 2.
pub fn train<T: Scalar>(dataset: &Dataset<T>, config: &TrainConfig) -> Result<(LstmModel<T>, TrainReport)> {
    config.validate()?;
    dataset.validate()?;
    let k = dataset.n_classes();
    let (train_idx, val_idx) = split_customers(dataset.customers.len(), config.train_fraction, config.seed)?;

    let mut model = LstmModel::init(
        k,
        config.weight_init_scale,
        config.forget_bias_init,
        config.seed.wrapping_add(1),
    );
    model.normalizer = InputNormalizer::fit(
        k,
        train_idx.iter().flat_map(|&i| dataset.customers[i].profiles.iter()),
    );

    let initial = evaluate(&model, dataset, &val_idx)?;
    let mut state = AdamState {
        m: LstmWeights::zeros(k),
        v: LstmWeights::zeros(k),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    let scale_out = T::of_usize(N_OUTPUTS);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let fingerprint = model.fingerprint();
            let mut grad = LstmWeights::zeros(k);
            let denom = T::of_usize(batch.len()) * scale_out;
            for &i in batch {
                let c = &dataset.customers[i];
                let (_, y, cache) = forward_inputs(&model, &c.profiles, fingerprint)?;
                let mut dy = [T::zero(); N_OUTPUTS];
                for j in 0..N_OUTPUTS {
                    let err = y[j] - c.traits.grades[j];
                    sq_sum += (err * err).as_f64();
                    dy[j] = T::of(2.0) * err / denom;
                }
                accumulate_backward(&model, &cache, &dy, &mut grad);
            }
            if !sq_sum.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            apply_update(&mut model.weights, &grad, &mut state, config);
        }
        let val = evaluate(&model, dataset, &val_idx)?;
        let train_mse = sq_sum / (order.len() * N_OUTPUTS) as f64;
        if !val.mse.is_finite() || !model.weights.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epochs.push(EpochStats {
            epoch,
            train_mse,
            validation_mse: val.mse,
        });
    }

    let last = evaluate(&model, dataset, &val_idx)?;
    let report = TrainReport {
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
        initial_validation_mse: initial.mse,
        final_validation_mse: last.mse,
        validation_label_variance: last.label_variance,
        validation_r2: last.r2,
        epochs,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TraitVector;
    use crate::synth::{generate_coefficients, generate_population, SynthConfig};

    fn small_dataset(n: usize) -> Dataset<f64> {
        let config = SynthConfig {
            n_customers: n,
            k_classes: 12,
            n_nonzero_rows: 8,
            seed: 5,
            ..SynthConfig::default()
        };
        let coeffs = generate_coefficients(12, 8, 6).unwrap();
        generate_population(&config, &coeffs).unwrap()
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = split_customers(100, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_customers(100, 0.8, 1).unwrap(), (a, b));
        assert!(split_customers(1, 0.8, 1).is_err());
    }

    #[test]
    fn constant_labels_are_learned_through_the_readout_bias() {
        let mut ds = small_dataset(600);
        for c in &mut ds.customers {
            c.traits = TraitVector {
                grades: [0.2, 0.4, 0.6, 0.8, 0.3],
            };
        }
        // Plain gradient descent and a small init: Adam keeps jittering around the optimum at this scale.
        let config = TrainConfig {
            epochs: 50,
            optimizer: Optimizer::Sgd,
            learning_rate: 2.0,
            weight_init_scale: 0.05,
            ..TrainConfig::default()
        };
        let (_, report) = train(&ds, &config).unwrap();
        // The best constant predictor has zero error on constant labels.
        assert!(report.validation_label_variance < 1e-20);
        assert!(
            report.final_validation_mse <= report.validation_label_variance + 1e-6,
            "mse {}",
            report.final_validation_mse
        );
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ds = small_dataset(150);
        let config = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&ds, &config).unwrap();
        let (m2, r2) = train(&ds, &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(r1.epochs.len(), 15);
        assert!(r1.final_validation_mse < r1.initial_validation_mse);
    }

    #[test]
    fn plain_gradient_descent_runs() {
        let ds = small_dataset(60);
        let config = TrainConfig {
            epochs: 5,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let (_, report) = train(&ds, &config).unwrap();
        assert!(report.final_validation_mse < report.initial_validation_mse);
    }

    #[test]
    fn divergence_is_reported_with_its_epoch() {
        let ds = small_dataset(60);
        let config = TrainConfig {
            epochs: 5,
            optimizer: Optimizer::Sgd,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&ds, &config), Err(Error::Divergence { epoch: 1 })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = small_dataset(20);
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { train_fraction: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&ds, &bad), Err(Error::Config(_))));
        }
    }
}
