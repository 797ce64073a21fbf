//! Seeded synthetic customer populations and transaction aggregation.
//!
//! Each customer gets a latent trait-intensity vector with one deliberately
//! dominant trait and a decreasing ladder for the rest. Their base spending
//! profile is `normalize(softplus(b₀ + signal · C · latent + noise))`, so the
//! linear trait score of the profile is largest for the dominant trait in
//! expectation. Per-period profiles perturb the base multiplicatively. The
//! final period is additionally split into sub-period profiles, which stand in
//! for finer-grained aggregation of the most recent period.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    dominant_order, score_shares, scale_population, CoefficientMatrix, DominantOrder, SpendingProfile, TraitScaling,
    TraitVector, N_TRAITS,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{softplus, Scalar};

/// Latent intensity of the 1st..5th most dominant trait before per-customer scaling.
const LATENT_LADDER: [f64; N_TRAITS] = [1.0, 0.5, 0.3, 0.15, 0.05];
const LATENT_JITTER: f64 = 0.05;
const INTENSITY_RANGE: (f64, f64) = (0.75, 1.25);
/// Standard deviation of the population-wide log-spending baseline `b₀`.
const BASELINE_SD: f64 = 0.5;
/// Amount per period used when exporting profiles as raw transactions.
pub const EXPORT_PERIOD_SPEND: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_customers: usize,
    pub n_periods: usize,
    pub k_classes: usize,
    pub n_nonzero_rows: usize,
    pub trait_signal_strength: f64,
    pub noise_scale: f64,
    pub regime_switch_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_customers: 2000,
            n_periods: 6,
            k_classes: 97,
            n_nonzero_rows: 61,
            trait_signal_strength: 3.0,
            noise_scale: 0.1,
            regime_switch_fraction: 0.1,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_customers == 0 {
            return Err(Error::EmptyDataset("n_customers must be at least 1".into()));
        }
        if self.n_periods < 2 {
            return Err(Error::Config(format!("n_periods = {} but at least 2 are needed", self.n_periods)));
        }
        if self.k_classes < N_TRAITS {
            return Err(Error::Config(format!("k_classes = {} is below {N_TRAITS}", self.k_classes)));
        }
        if self.n_nonzero_rows > self.k_classes {
            return Err(Error::Config(format!(
                "n_nonzero_rows = {} exceeds k_classes = {}",
                self.n_nonzero_rows, self.k_classes
            )));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.trait_signal_strength) || !finite_nonneg(self.noise_scale) {
            return Err(Error::Config("signal strength and noise scale must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.regime_switch_fraction) {
            return Err(Error::Config(format!(
                "regime_switch_fraction = {} outside [0, 1]",
                self.regime_switch_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSwitch {
    /// First period generated from the new latent vector, in `1..T`.
    pub switch_period: usize,
    pub dominant_before: usize,
    pub dominant_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Customer<T> {
    pub customer_id: String,
    /// One profile per period, oldest first.
    pub profiles: Vec<SpendingProfile<T>>,
    /// The final period split into `n_periods` sub-period profiles.
    pub fine_profiles: Vec<SpendingProfile<T>>,
    /// Grades of the period-averaged profile; the training target.
    pub traits: TraitVector<T>,
    pub order: DominantOrder,
    pub period_traits: Vec<TraitVector<T>>,
    pub period_orders: Vec<DominantOrder>,
    pub intended_dominant: usize,
    pub regime: Option<RegimeSwitch>,
}

impl<T: Scalar> Customer<T> {
    pub fn regime_switched(&self) -> bool {
        self.regime.is_some()
    }

    /// Input sequence covering the last `span` periods.
    ///
    /// A span of one period uses the sub-period profiles of the final period,
    /// any other span uses one profile per period.
    pub fn window(&self, span: usize) -> Result<&[SpendingProfile<T>]> {
        let t = self.profiles.len();
        match span {
            1 => Ok(&self.fine_profiles),
            s if (2..=t).contains(&s) => Ok(&self.profiles[t - s..]),
            s => Err(Error::Config(format!("window span {s} is outside 1..={t} periods"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Dataset<T> {
    pub config: SynthConfig,
    pub coefficients: CoefficientMatrix<T>,
    pub scaling: TraitScaling<T>,
    pub customers: Vec<Customer<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn n_classes(&self) -> usize {
        self.coefficients.n_classes()
    }

    pub fn n_periods(&self) -> usize {
        self.customers.first().map_or(0, |c| c.profiles.len())
    }

    /// Checks the shared-K/T and simplex invariants, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        if self.customers.is_empty() {
            return Err(Error::EmptyDataset("dataset has no customers".into()));
        }
        let (k, t) = (self.n_classes(), self.n_periods());
        for c in &self.customers {
            if c.profiles.len() != t || c.period_traits.len() != t || c.period_orders.len() != t {
                return Err(Error::Schema(format!("customer {} does not have {t} periods", c.customer_id)));
            }
            for p in c.profiles.iter().chain(&c.fine_profiles) {
                if p.n_classes() != k {
                    return Err(Error::Dimension(format!(
                        "customer {} has a profile over {} classes, expected {k}",
                        c.customer_id,
                        p.n_classes()
                    )));
                }
                p.validate()?;
            }
            if let Some(r) = c.regime {
                if r.switch_period == 0 || r.switch_period >= t {
                    return Err(Error::Schema(format!(
                        "customer {} switches at period {} outside 1..{t}",
                        c.customer_id, r.switch_period
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn customer_index(&self) -> HashMap<&str, usize> {
        self.customers
            .iter()
            .enumerate()
            .map(|(i, c)| (c.customer_id.as_str(), i))
            .collect()
    }
}

pub fn class_name(k: usize) -> String {
    format!("class_{k:03}")
}

/// `n_nonzero_rows` randomly placed rows of standard-normal weights, all others zero.
pub fn generate_coefficients<T: Scalar>(k_classes: usize, n_nonzero_rows: usize, seed: u64) -> Result<CoefficientMatrix<T>> {
    if n_nonzero_rows > k_classes {
        return Err(Error::Config(format!(
            "n_nonzero_rows = {n_nonzero_rows} exceeds k_classes = {k_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = (0..k_classes).collect();
    rows.shuffle(&mut rng);
    let mut active = rows[..n_nonzero_rows].to_vec();
    active.sort_unstable();
    let mut values = Matrix::zeros(k_classes, N_TRAITS);
    for &r in &active {
        for c in 0..N_TRAITS {
            let z: f64 = loop {
                // An exact zero would make the row count ambiguous.
                let z: f64 = StandardNormal.sample(&mut rng);
                if z != 0.0 {
                    break z;
                }
            };
            values.set(r, c, T::of(z));
        }
    }
    CoefficientMatrix::new((0..k_classes).map(class_name).collect(), values)
}

struct Latent {
    values: [f64; N_TRAITS],
    dominant: usize,
}

fn draw_latent(rng: &mut ChaCha8Rng, avoid_dominant: Option<usize>) -> Latent {
    let mut order = [0, 1, 2, 3, 4];
    loop {
        order.shuffle(rng);
        if Some(order[0]) != avoid_dominant {
            break;
        }
    }
    let intensity = rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1);
    let mut values = [0.0; N_TRAITS];
    for (rank, &t) in order.iter().enumerate() {
        let jitter = rng.random_range(-LATENT_JITTER..LATENT_JITTER);
        values[t] = intensity * (LATENT_LADDER[rank] + jitter);
    }
    Latent {
        values,
        dominant: order[0],
    }
}

fn normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn perturb(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if noise == 0.0 {
        return base.to_vec();
    }
    let mut out: Vec<f64> = base
        .iter()
        .map(|&b| {
            let z: f64 = StandardNormal.sample(rng);
            b * (noise * z).exp()
        })
        .collect();
    normalize(&mut out);
    out
}

fn base_profile<T: Scalar>(
    latent: &Latent,
    baseline: &[f64],
    coeffs: &CoefficientMatrix<T>,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out: Vec<f64> = baseline
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let row = coeffs.values().row(k);
            let drive: f64 = row.iter().zip(&latent.values).map(|(c, l)| c.as_f64() * l).sum();
            let z: f64 = StandardNormal.sample(rng);
            softplus(b + config.trait_signal_strength * drive + config.noise_scale * z)
        })
        .collect();
    normalize(&mut out);
    out
}

pub fn generate_population<T: Scalar>(config: &SynthConfig, coeffs: &CoefficientMatrix<T>) -> Result<Dataset<T>> {
    config.validate()?;
    if coeffs.n_classes() != config.k_classes {
        return Err(Error::Dimension(format!(
            "config asks for {} classes but coefficients have {}",
            config.k_classes,
            coeffs.n_classes()
        )));
    }
    let (n, t_periods, k) = (config.n_customers, config.n_periods, config.k_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let baseline: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            BASELINE_SD * z
        })
        .collect();

    let n_switch = (config.regime_switch_fraction * n as f64).round() as usize;
    let mut picks: Vec<usize> = (0..n).collect();
    picks.shuffle(&mut rng);
    let mut switches = vec![false; n];
    for &i in &picks[..n_switch] {
        switches[i] = true;
    }

    struct Draft {
        id: String,
        periods: Vec<Vec<f64>>,
        fine: Vec<Vec<f64>>,
        intended: usize,
        regime: Option<RegimeSwitch>,
    }

    let mut drafts = Vec::with_capacity(n);
    for (i, &switch) in switches.iter().enumerate() {
        let latent = draw_latent(&mut rng, None);
        let base = base_profile(&latent, &baseline, coeffs, config, &mut rng);
        let regime = if switch {
            let next = draw_latent(&mut rng, Some(latent.dominant));
            let switch_period = rng.random_range(1..t_periods);
            let next_base = base_profile(&next, &baseline, coeffs, config, &mut rng);
            Some((
                RegimeSwitch {
                    switch_period,
                    dominant_before: latent.dominant,
                    dominant_after: next.dominant,
                },
                next_base,
            ))
        } else {
            None
        };
        let periods: Vec<Vec<f64>> = (0..t_periods)
            .map(|t| {
                let b = match &regime {
                    Some((r, next)) if t >= r.switch_period => next,
                    _ => &base,
                };
                perturb(b, config.noise_scale, &mut rng)
            })
            .collect();
        let last = periods.last().expect("n_periods >= 2");
        let fine = (0..t_periods)
            .map(|_| perturb(last, config.noise_scale, &mut rng))
            .collect();
        drafts.push(Draft {
            id: format!("c{i:05}"),
            periods,
            fine,
            intended: latent.dominant,
            regime: regime.map(|(r, _)| r),
        });
    }

    let mean_raw: Vec<[T; N_TRAITS]> = drafts
        .iter()
        .map(|d| {
            let mut avg = vec![0.0; k];
            for p in &d.periods {
                for (a, &s) in avg.iter_mut().zip(p) {
                    *a += s;
                }
            }
            normalize(&mut avg);
            let shares: Vec<T> = avg.into_iter().map(T::of).collect();
            score_shares(&shares, coeffs)
        })
        .collect::<Result<_>>()?;
    let (traits, scaling) = scale_population(&mean_raw)?;

    let to_profile = |id: &str, t: usize, shares: &[f64]| {
        SpendingProfile::from_amounts(id.to_string(), t, shares.iter().map(|&s| T::of(s)).collect())
    };
    let customers = drafts
        .into_iter()
        .zip(traits)
        .map(|(d, traits)| {
            let profiles = d
                .periods
                .iter()
                .enumerate()
                .map(|(t, p)| to_profile(&d.id, t, p))
                .collect::<Result<Vec<_>>>()?;
            let fine_profiles = d
                .fine
                .iter()
                .enumerate()
                .map(|(b, p)| to_profile(&d.id, b, p))
                .collect::<Result<Vec<_>>>()?;
            let period_traits = profiles
                .iter()
                .map(|p| Ok(scaling.scale(&score_shares(p.shares(), coeffs)?)))
                .collect::<Result<Vec<_>>>()?;
            let period_orders = period_traits.iter().map(dominant_order).collect::<Result<Vec<_>>>()?;
            Ok(Customer {
                order: dominant_order(&traits)?,
                customer_id: d.id,
                profiles,
                fine_profiles,
                traits,
                period_traits,
                period_orders,
                intended_dominant: d.intended,
                regime: d.regime,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        config: config.clone(),
        coefficients: coeffs.clone(),
        scaling,
        customers,
    })
}

/// One row of `transactions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTransaction {
    pub customer_id: String,
    pub bucket: usize,
    pub class_id: usize,
    pub amount: f64,
}

/// Sums amounts per class over windows of `window_periods` buckets and normalises each window.
///
/// Customers keep their first-appearance order; within a customer, profiles
/// are ordered by window and carry the window index as their period.
pub fn aggregate_transactions<T: Scalar>(
    rows: &[RawTransaction],
    k_classes: usize,
    window_periods: usize,
) -> Result<Vec<SpendingProfile<T>>> {
    if window_periods == 0 {
        return Err(Error::Config("window_periods must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no transactions to aggregate".into()));
    }
    let n_buckets = rows.iter().map(|r| r.bucket).max().expect("non-empty") + 1;
    if n_buckets % window_periods != 0 {
        return Err(Error::Config(format!(
            "window of {window_periods} buckets does not divide {n_buckets} buckets"
        )));
    }
    let n_windows = n_buckets / window_periods;
    let mut order: Vec<&str> = Vec::new();
    let mut sums: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for r in rows {
        if r.class_id >= k_classes {
            return Err(Error::Schema(format!(
                "customer {}: class_id {} is not one of {k_classes} classes",
                r.customer_id, r.class_id
            )));
        }
        if !r.amount.is_finite() || r.amount < 0.0 {
            return Err(Error::Schema(format!(
                "customer {}: amount {} must be finite and non-negative",
                r.customer_id, r.amount
            )));
        }
        let windows = sums.entry(r.customer_id.as_str()).or_insert_with(|| {
            order.push(r.customer_id.as_str());
            vec![vec![0.0; k_classes]; n_windows]
        });
        windows[r.bucket / window_periods][r.class_id] += r.amount;
    }
    let mut out = Vec::with_capacity(order.len() * n_windows);
    for id in order {
        for (w, amounts) in sums.remove(id).expect("recorded").into_iter().enumerate() {
            out.push(SpendingProfile::from_amounts(
                id,
                w,
                amounts.into_iter().map(T::of).collect(),
            )?);
        }
    }
    Ok(out)
}

/// Expresses every period profile as per-class amounts, one bucket per period.
pub fn dataset_transactions<T: Scalar>(dataset: &Dataset<T>) -> Vec<RawTransaction> {
    let mut rows = Vec::new();
    for c in &dataset.customers {
        for p in &c.profiles {
            for (class_id, &s) in p.shares().iter().enumerate() {
                rows.push(RawTransaction {
                    customer_id: c.customer_id.clone(),
                    bucket: p.period_index,
                    class_id,
                    amount: s.as_f64() * EXPORT_PERIOD_SPEND,
                });
            }
        }
    }
    rows
}
