//! End-to-end run: synth, score, train, extract, explain, cluster and stability,
//! with every artifact written to one directory.
//!
//! One master seed `s` drives all randomness: coefficients use `s + 1`, the
//! population `s + 2`, training `s + 3` and k-means `s + 4`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{dominant_order, scale_population, score_traits, CoefficientMatrix, SpendingProfile, N_TRAITS};
use crate::error::{Error, Result};
use crate::io::{self, AngleRow, TraitRow};
use crate::linalg::Matrix;
use crate::rnn::{extract_trajectories, split_customers, train, LstmModel, TrainConfig, TrainReport, Trajectory, N_OUTPUTS};
use crate::segmentation::{
    annotate_subcluster_purity, build_hierarchy, detect_course_change, geometric_purity, plane_point, stability_check,
    ClusterTree, PurityResult, StabilityReport, DEFAULT_TURN_THRESHOLD,
};
use crate::surrogate::{
    evaluate_fidelity, fit_polynomial_baseline, trajectory_angles, DirectionAngles, DirectionMode, FidelityReport,
    LinearSurrogate,
};
use crate::synth::{aggregate_transactions, dataset_transactions, generate_coefficients, generate_population, Dataset, RawTransaction, SynthConfig};

pub const SEED_OFFSET_COEFFICIENTS: u64 = 1;
pub const SEED_OFFSET_POPULATION: u64 = 2;
pub const SEED_OFFSET_TRAIN: u64 = 3;
pub const SEED_OFFSET_KMEANS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Relative magnitude below which a weight or coefficient counts as zero.
    pub nonzero_threshold: f64,
    pub direction_mode: DirectionMode,
    pub polynomial_degree: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            nonzero_threshold: crate::domain::DEFAULT_NONZERO_FACTOR,
            direction_mode: DirectionMode::NetDisplacement,
            polynomial_degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub depth: usize,
    /// k for the depth-1 purity check.
    pub k_clusters: usize,
    pub min_subcluster_members: usize,
    /// Defaults to the full history.
    pub coarse_window: Option<usize>,
    pub fine_window: usize,
    pub course_change_threshold: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            depth: 4,
            k_clusters: N_TRAITS,
            min_subcluster_members: 100,
            coarse_window: None,
            fine_window: 1,
            course_change_threshold: DEFAULT_TURN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not echoed into the report, so runs into different directories compare equal.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    pub segmentation: SegmentationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: None,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            surrogate: SurrogateConfig::default(),
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copy with every module seed derived from `seed`.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.train.seed = self.seed.wrapping_add(SEED_OFFSET_TRAIN);
        c
    }

    pub fn kmeans_seed(&self) -> u64 {
        self.seed.wrapping_add(SEED_OFFSET_KMEANS)
    }

    pub fn coarse_window(&self) -> usize {
        self.segmentation.coarse_window.unwrap_or(self.synth.n_periods)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let s = &self.segmentation;
        if !(1..=crate::segmentation::MAX_DEPTH).contains(&s.depth) {
            return Err(Error::Config(format!("segmentation depth {} outside 1..=4", s.depth)));
        }
        if s.k_clusters == 0 {
            return Err(Error::Config("k_clusters must be at least 1".into()));
        }
        if !(s.course_change_threshold.is_finite() && s.course_change_threshold >= 0.0) {
            return Err(Error::Config("course_change_threshold must be finite and >= 0".into()));
        }
        let t = self.synth.n_periods;
        for w in [self.coarse_window(), s.fine_window] {
            if !(1..=t).contains(&w) {
                return Err(Error::Config(format!("window {w} outside 1..={t}")));
            }
        }
        let th = self.surrogate.nonzero_threshold;
        if !(th.is_finite() && th >= 0.0) {
            return Err(Error::Config("nonzero_threshold must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Coefficients from `config.seed + 1`, population from `config.seed + 2`.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset<f64>> {
    config.validate()?;
    let coeffs = generate_coefficients(
        config.k_classes,
        config.n_nonzero_rows,
        config.seed.wrapping_add(SEED_OFFSET_COEFFICIENTS),
    )?;
    let population = SynthConfig {
        seed: config.seed.wrapping_add(SEED_OFFSET_POPULATION),
        ..config.clone()
    };
    let mut dataset = generate_population(&population, &coeffs)?;
    dataset.config = config.clone();
    Ok(dataset)
}

/// Share-weighted mean of the profiles, renormalised.
pub fn period_average(profiles: &[SpendingProfile<f64>]) -> Vec<f64> {
    let k = profiles.first().map_or(0, |p| p.n_classes());
    let mut avg = vec![0.0; k];
    for p in profiles {
        for (a, s) in avg.iter_mut().zip(p.shares()) {
            *a += s;
        }
    }
    let total: f64 = avg.iter().sum();
    if total > 0.0 {
        avg.iter_mut().for_each(|a| *a /= total);
    }
    avg
}

pub fn dataset_trait_rows(dataset: &Dataset<f64>) -> Vec<TraitRow> {
    dataset
        .customers
        .iter()
        .map(|c| TraitRow {
            customer_id: c.customer_id.clone(),
            traits: c.traits,
            order: c.order,
        })
        .collect()
}

/// Traits of each customer's period-averaged profile, min-max scaled over the population.
pub fn score_transactions(
    rows: &[RawTransaction],
    coeffs: &CoefficientMatrix<f64>,
    window_periods: usize,
) -> Result<Vec<TraitRow>> {
    let profiles = aggregate_transactions::<f64>(rows, coeffs.n_classes(), window_periods)?;
    let mut ids: Vec<String> = Vec::new();
    let mut raw = Vec::new();
    let mut start = 0;
    while start < profiles.len() {
        let id = &profiles[start].customer_id;
        let end = start + profiles[start..].iter().take_while(|p| &p.customer_id == id).count();
        let avg = period_average(&profiles[start..end]);
        let profile = SpendingProfile::from_amounts(id.clone(), 0, avg)?;
        raw.push(score_traits(&profile, coeffs)?);
        ids.push(id.clone());
        start = end;
    }
    let (traits, _) = scale_population(&raw)?;
    ids.into_iter()
        .zip(traits)
        .map(|(customer_id, traits)| {
            Ok(TraitRow {
                customer_id,
                order: dominant_order(&traits)?,
                traits,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub n_train: usize,
    pub n_validation: usize,
    pub epochs: usize,
    pub initial_validation_mse: f64,
    pub final_validation_mse: f64,
    pub validation_label_variance: f64,
    pub validation_r2: [f64; N_OUTPUTS],
}

impl From<&TrainReport> for TrainingSummary {
    fn from(r: &TrainReport) -> Self {
        TrainingSummary {
            n_train: r.n_train,
            n_validation: r.n_validation,
            epochs: r.epochs.len(),
            initial_validation_mse: r.initial_validation_mse,
            final_validation_mse: r.final_validation_mse,
            validation_label_variance: r.validation_label_variance,
            validation_r2: r.validation_r2,
        }
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: TrainConfig,
    pub training: TrainingSummary,
    pub model: LstmModel<f64>,
}

pub struct Explanation {
    pub trajectories: Vec<Trajectory<f64>>,
    /// Customers with a usable direction, in dataset order.
    pub angles: Vec<AngleRow>,
    pub n_degenerate: usize,
    pub surrogate: LinearSurrogate<f64>,
    pub fidelity: FidelityReport,
}

/// Fits the surrogate on the training split of `train_config` and scores it on the rest.
pub fn explain(
    dataset: &Dataset<f64>,
    model: &LstmModel<f64>,
    train_config: &TrainConfig,
    config: &SurrogateConfig,
) -> Result<Explanation> {
    let trajectories = extract_trajectories(model, dataset, dataset.n_periods())?;
    let (train_idx, test_idx) = split_customers(dataset.customers.len(), train_config.train_fraction, train_config.seed)?;
    let mut angle_of: Vec<Option<DirectionAngles<f64>>> = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        match trajectory_angles(t, config.direction_mode) {
            Ok(a) => angle_of.push(Some(a)),
            Err(Error::DegenerateTrajectory { .. }) => angle_of.push(None),
            Err(e) => return Err(e),
        }
    }
    let n_degenerate = angle_of.iter().filter(|a| a.is_none()).count();
    let design = |idx: &[usize]| -> Result<(Matrix<f64>, Vec<DirectionAngles<f64>>)> {
        let kept: Vec<usize> = idx.iter().copied().filter(|&i| angle_of[i].is_some()).collect();
        if kept.is_empty() {
            return Err(Error::EmptyDataset("no customer in the split has a usable trajectory".into()));
        }
        let rows: Vec<Vec<f64>> = kept.iter().map(|&i| period_average(&dataset.customers[i].profiles)).collect();
        let angles = kept.iter().map(|&i| angle_of[i].expect("kept")).collect();
        Ok((Matrix::from_rows(&rows)?, angles))
    };
    let (x_train, a_train) = design(&train_idx)?;
    let (x_test, a_test) = design(&test_idx)?;
    let surrogate = LinearSurrogate::fit(&x_train, &a_train)?;
    let offset = surrogate.azimuth_offset;
    let targets = crate::surrogate::angle_targets(&a_train, offset);
    let polynomial = fit_polynomial_baseline(&x_train, &targets, config.polynomial_degree)?;
    let fidelity = evaluate_fidelity(
        &surrogate,
        &polynomial,
        &dataset.coefficients,
        (&x_train, &a_train),
        (&x_test, &a_test),
        config.nonzero_threshold,
    )?;
    let angles = dataset
        .customers
        .iter()
        .zip(&angle_of)
        .filter_map(|(c, a)| {
            a.map(|angles| AngleRow {
                customer_id: c.customer_id.clone(),
                angles,
                order: c.order,
            })
        })
        .collect();
    Ok(Explanation {
        trajectories,
        angles,
        n_degenerate,
        surrogate,
        fidelity,
    })
}

/// Sub-cluster purity of the nodes one level above `depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPurity {
    pub depth: usize,
    pub nodes_scored: usize,
    pub mean_purity: Option<f64>,
    pub mean_null_purity: Option<f64>,
    pub min_excess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub azimuth_offset: f64,
    pub depth1: PurityResult,
    /// Depth 1 is the population-wide k-means; deeper levels aggregate per-node scores.
    pub levels: Vec<LevelPurity>,
}

pub struct Segmentation {
    pub tree: ClusterTree,
    pub summary: SegmentationSummary,
}

/// Hierarchy from trait orders, k-means purity at depth 1 and within every large node.
pub fn segment(
    rows: &[AngleRow],
    orders: &BTreeMap<String, crate::domain::DominantOrder>,
    azimuth_offset: f64,
    config: &SegmentationConfig,
    seed: u64,
) -> Result<Segmentation> {
    let ids: Vec<String> = rows.iter().map(|r| r.customer_id.clone()).collect();
    let angles: Vec<DirectionAngles<f64>> = rows.iter().map(|r| r.angles).collect();
    let orders: Vec<_> = rows
        .iter()
        .map(|r| {
            orders
                .get(&r.customer_id)
                .copied()
                .ok_or_else(|| Error::Schema(format!("customer {} has angles but no traits", r.customer_id)))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset("no angles to cluster".into()));
    }
    let points: Vec<[f64; 2]> = angles.iter().map(|a| plane_point(a, azimuth_offset)).collect();
    let labels: Vec<usize> = orders.iter().map(|o| o.dominant()).collect();
    let depth1 = geometric_purity(&points, &labels, config.k_clusters, seed)?;
    let mut tree = build_hierarchy(&ids, &angles, &orders, config.depth, azimuth_offset)?;
    annotate_subcluster_purity(&mut tree, &ids, &angles, &orders, config.min_subcluster_members, seed)?;

    let mut levels = vec![LevelPurity {
        depth: 1,
        nodes_scored: 1,
        mean_purity: Some(depth1.purity),
        mean_null_purity: Some(depth1.null_purity),
        min_excess: Some(depth1.excess()),
    }];
    for depth in 2..=config.depth {
        let scored: Vec<PurityResult> = tree.level(depth - 1).filter_map(|n| n.subcluster_purity).collect();
        let mean = |f: fn(&PurityResult) -> f64| {
            (!scored.is_empty()).then(|| scored.iter().map(f).sum::<f64>() / scored.len() as f64)
        };
        levels.push(LevelPurity {
            depth,
            nodes_scored: scored.len(),
            mean_purity: mean(|p| p.purity),
            mean_null_purity: mean(|p| p.null_purity),
            min_excess: scored.iter().map(PurityResult::excess).reduce(f64::min),
        });
    }
    Ok(Segmentation {
        tree,
        summary: SegmentationSummary {
            azimuth_offset,
            depth1,
            levels,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub coarse_window: usize,
    pub fine_window: usize,
    /// Over customers without a regime switch.
    pub agreement_rate: f64,
    pub n_compared: usize,
    pub agreement_rate_all: f64,
    pub n_compared_all: usize,
    pub mean_divergence_rad: f64,
    pub n_degenerate: usize,
}

/// `(all customers, customers without a switch)`.
pub fn stability(
    dataset: &Dataset<f64>,
    model: &LstmModel<f64>,
    coarse: usize,
    fine: usize,
    mode: DirectionMode,
) -> Result<(StabilityReport, StabilityReport)> {
    let all = stability_check(model, dataset, coarse, fine, mode, |_| true)?;
    let steady = stability_check(model, dataset, coarse, fine, mode, |c| !c.regime_switched())?;
    Ok((all, steady))
}

impl StabilitySummary {
    pub fn new(all: &StabilityReport, steady: &StabilityReport) -> Self {
        StabilitySummary {
            coarse_window: all.coarse_window,
            fine_window: all.fine_window,
            agreement_rate: steady.agreement_rate,
            n_compared: steady.n_compared,
            agreement_rate_all: all.agreement_rate,
            n_compared_all: all.n_compared,
            mean_divergence_rad: all.mean_divergence_rad,
            n_degenerate: all.n_degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseChangeSummary {
    pub threshold_rad: f64,
    pub n_switched: usize,
    pub n_detected: usize,
    pub n_within_one: usize,
    /// `n_within_one / n_switched`; `None` without switched customers.
    pub within_one_rate: Option<f64>,
    pub n_unswitched: usize,
    pub n_unswitched_flagged: usize,
}

pub fn course_changes(dataset: &Dataset<f64>, trajectories: &[Trajectory<f64>], threshold: f64) -> Result<CourseChangeSummary> {
    let mut s = CourseChangeSummary {
        threshold_rad: threshold,
        n_switched: 0,
        n_detected: 0,
        n_within_one: 0,
        within_one_rate: None,
        n_unswitched: 0,
        n_unswitched_flagged: 0,
    };
    for (c, t) in dataset.customers.iter().zip(trajectories) {
        let found = detect_course_change(t, threshold)?.period;
        match c.regime {
            Some(r) => {
                s.n_switched += 1;
                if let Some(p) = found {
                    s.n_detected += 1;
                    if p.abs_diff(r.switch_period) <= 1 {
                        s.n_within_one += 1;
                    }
                }
            }
            None => {
                s.n_unswitched += 1;
                s.n_unswitched_flagged += found.is_some() as usize;
            }
        }
    }
    s.within_one_rate = (s.n_switched > 0).then(|| s.n_within_one as f64 / s.n_switched as f64);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_customers: usize,
    pub n_periods: usize,
    pub k_classes: usize,
    pub n_regime_switched: usize,
    /// Share of customers without a switch whose labelled dominant trait is the generator's.
    pub label_audit_agreement: f64,
}

impl DatasetSummary {
    pub fn new(d: &Dataset<f64>) -> Self {
        let steady: Vec<_> = d.customers.iter().filter(|c| !c.regime_switched()).collect();
        let agree = steady.iter().filter(|c| c.order.dominant() == c.intended_dominant).count();
        DatasetSummary {
            n_customers: d.customers.len(),
            n_periods: d.n_periods(),
            k_classes: d.n_classes(),
            n_regime_switched: d.customers.len() - steady.len(),
            label_audit_agreement: agree as f64 / steady.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub azimuth_offset: f64,
    pub rank: usize,
    pub n_degenerate: usize,
    pub fidelity: FidelityReport,
}

/// One acceptance threshold evaluated on a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub description: String,
    pub value: Option<f64>,
    /// `>=` or `<`.
    pub relation: String,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(criterion: &str, description: &str, value: Option<f64>, relation: &str, threshold: f64) -> Self {
        let passed = match (value, relation) {
            (Some(v), ">=") => v >= threshold,
            (Some(v), "<") => v < threshold,
            _ => false,
        };
        Check {
            criterion: criterion.into(),
            description: description.into(),
            value,
            relation: relation.into(),
            threshold,
            passed,
        }
    }
}

/// Contents of `report.json`; nothing time-dependent goes here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub training: TrainingSummary,
    pub surrogate: SurrogateSummary,
    pub segmentation: SegmentationSummary,
    pub stability: StabilitySummary,
    pub course_change: CourseChangeSummary,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Largest |r| over the trait columns, taking the weaker of the two angles.
pub fn weakest_best_correlation(f: &FidelityReport) -> Option<f64> {
    (0..2)
        .map(|a| {
            f.coefficient_correlations
                .iter()
                .filter_map(|row| row[a].map(f64::abs))
                .reduce(f64::max)
        })
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.into_iter().fold(f64::INFINITY, f64::min))
}

pub fn acceptance_checks(
    training: &TrainingSummary,
    fidelity: &FidelityReport,
    segmentation: &SegmentationSummary,
    stability: &StabilitySummary,
    course: &CourseChangeSummary,
) -> Vec<Check> {
    let depth2 = segmentation.levels.iter().find(|l| l.depth == 2).and_then(|l| l.min_excess);
    let finite = |x: f64| x.is_finite().then_some(x);
    vec![
        Check::new(
            "2",
            "validation MSE below validation label variance",
            Some(training.final_validation_mse),
            "<",
            training.validation_label_variance,
        ),
        Check::new("3", "surrogate test R² pooled over both angles", finite(fidelity.r2_test), ">=", 0.70),
        Check::new(
            "3",
            "polynomial test R² minus linear test R²",
            finite(fidelity.r2_polynomial_test - fidelity.r2_test),
            "<",
            0.05,
        ),
        Check::new("6", "depth-1 k-means purity", Some(segmentation.depth1.purity), ">=", 0.8),
        Check::new("6", "depth-1 purity above permutation null", Some(segmentation.depth1.excess()), ">=", 0.4),
        Check::new("7", "smallest depth-2 purity excess over depth-1 nodes", depth2, ">=", 0.1),
        Check::new("8", "window stability agreement without regime switch", Some(stability.agreement_rate), ">=", 0.9),
        Check::new("9", "course change within one period of the switch", course.within_one_rate, ">=", 0.7),
        Check::new(
            "10",
            "best |r| between a trait column and each surrogate angle",
            weakest_best_correlation(fidelity),
            ">=",
            0.5,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Contents of `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageTime>,
    pub total_seconds: f64,
}

/// A pipeline error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub mod files {
    pub const DATASET: &str = "dataset.json";
    pub const COEFFICIENTS: &str = "coefficients.csv";
    pub const TRANSACTIONS: &str = "transactions.csv";
    pub const TRAITS: &str = "traits.csv";
    pub const MODEL: &str = "model.json";
    pub const TRAJECTORIES: &str = "trajectories.csv";
    pub const ANGLES: &str = "angles.csv";
    pub const SURROGATE: &str = "surrogate.json";
    pub const FIDELITY: &str = "fidelity.json";
    pub const HIERARCHY: &str = "hierarchy.json";
    pub const STABILITY: &str = "stability.csv";
    pub const REPORT: &str = "report.json";
    pub const TIMING: &str = "timing.json";
    pub const FIG1: &str = "fig1_trajectories.csv";
    pub const FIG2: &str = "fig2_angles.csv";
    pub const FIG3: &str = "fig3_pair.csv";
}

/// Writes the dataset directory read by the per-stage commands.
pub fn write_dataset(dir: &Path, dataset: &Dataset<f64>) -> Result<()> {
    io::write_json_compact(dir.join(files::DATASET), dataset)?;
    io::write_coefficients_csv(dir.join(files::COEFFICIENTS), &dataset.coefficients)?;
    io::write_transactions_csv(dir.join(files::TRANSACTIONS), &dataset_transactions(dataset))?;
    io::write_traits_csv(dir.join(files::TRAITS), &dataset_trait_rows(dataset))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset<f64>> {
    let d: Dataset<f64> = io::read_json(dir.join(files::DATASET))?;
    d.validate()?;
    Ok(d)
}

struct Clock<'a> {
    stages: Vec<StageTime>,
    start: Instant,
    log: &'a mut dyn FnMut(&str),
}

impl Clock<'_> {
    fn stage<V>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<V>) -> std::result::Result<V, StageError> {
        (self.log)(&format!("{stage}: running"));
        let t = Instant::now();
        let out = f().map_err(|error| StageError { stage, error })?;
        let seconds = t.elapsed().as_secs_f64();
        (self.log)(&format!("{stage}: done in {seconds:.2} s"));
        self.stages.push(StageTime {
            stage: stage.into(),
            seconds,
        });
        Ok(out)
    }
}

/// Runs every stage into `out_dir`. Artifacts of completed stages are kept on failure.
pub fn run_pipeline(
    config: &RunConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> std::result::Result<(Report, Timing), StageError> {
    let config = config.resolved();
    let mut clock = Clock {
        stages: Vec::new(),
        start: Instant::now(),
        log,
    };
    let dataset = clock.stage("synth", || {
        config.validate()?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let d = synthesize(&config.synth)?;
        io::write_json_compact(out_dir.join(files::DATASET), &d)?;
        io::write_coefficients_csv(out_dir.join(files::COEFFICIENTS), &d.coefficients)?;
        io::write_transactions_csv(out_dir.join(files::TRANSACTIONS), &dataset_transactions(&d))?;
        Ok(d)
    })?;
    let trait_rows = clock.stage("score", || {
        let rows = dataset_trait_rows(&dataset);
        io::write_traits_csv(out_dir.join(files::TRAITS), &rows)?;
        Ok(rows)
    })?;
    let (model, training) = clock.stage("train", || {
        let (model, report) = train(&dataset, &config.train)?;
        let file = ModelFile {
            config: config.train.clone(),
            training: TrainingSummary::from(&report),
            model,
        };
        io::write_json(out_dir.join(files::MODEL), &file)?;
        Ok((file.model, file.training))
    })?;
    let explanation = clock.stage("explain", || {
        let e = explain(&dataset, &model, &config.train, &config.surrogate)?;
        io::write_trajectories_csv(out_dir.join(files::TRAJECTORIES), &e.trajectories)?;
        io::write_angles_csv(out_dir.join(files::ANGLES), &e.angles)?;
        io::write_json(out_dir.join(files::SURROGATE), &e.surrogate)?;
        io::write_json(out_dir.join(files::FIDELITY), &e.fidelity)?;
        Ok(e)
    })?;
    let segmentation = clock.stage("cluster", || {
        let orders = trait_rows.iter().map(|r| (r.customer_id.clone(), r.order)).collect();
        let s = segment(
            &explanation.angles,
            &orders,
            explanation.surrogate.azimuth_offset,
            &config.segmentation,
            config.kmeans_seed(),
        )?;
        io::write_json(out_dir.join(files::HIERARCHY), &s.tree)?;
        Ok(s.summary)
    })?;
    let (stability_summary, course) = clock.stage("stability", || {
        let (all, steady) = stability(
            &dataset,
            &model,
            config.coarse_window(),
            config.segmentation.fine_window,
            config.surrogate.direction_mode,
        )?;
        io::write_stability_csv(out_dir.join(files::STABILITY), &all)?;
        let course = course_changes(&dataset, &explanation.trajectories, config.segmentation.course_change_threshold)?;
        Ok((StabilitySummary::new(&all, &steady), course))
    })?;
    let report = clock.stage("report", || {
        let checks = acceptance_checks(&training, &explanation.fidelity, &segmentation, &stability_summary, &course);
        let report = Report {
            seed: config.seed,
            config: config.clone(),
            dataset: DatasetSummary::new(&dataset),
            training,
            surrogate: SurrogateSummary {
                azimuth_offset: explanation.surrogate.azimuth_offset,
                rank: explanation.surrogate.rank,
                n_degenerate: explanation.n_degenerate,
                fidelity: explanation.fidelity.clone(),
            },
            segmentation,
            stability: stability_summary,
            course_change: course,
            checks,
        };
        io::write_json(out_dir.join(files::REPORT), &report)?;
        Ok(report)
    })?;
    let timing = Timing {
        total_seconds: clock.start.elapsed().as_secs_f64(),
        stages: clock.stages,
    };
    io::write_json(out_dir.join(files::TIMING), &timing).map_err(|error| StageError { stage: "report", error })?;
    Ok((report, timing))
}

/// Customers per dominant trait drawn for the trajectory figure.
pub const FIG1_PER_TRAIT: usize = 20;

/// Writes the three figure tables from the artifacts of a completed run.
pub fn emit_plot_data(dir: &Path) -> Result<()> {
    for name in [files::DATASET, files::MODEL, files::TRAJECTORIES, files::ANGLES, files::HIERARCHY] {
        if !dir.join(name).is_file() {
            return Err(Error::StageOrder(dir.join(name).display().to_string()));
        }
    }
    let dataset = read_dataset(dir)?;
    let model: ModelFile = io::read_json(dir.join(files::MODEL))?;
    let trajectories = io::read_trajectories_csv(dir.join(files::TRAJECTORIES))?;
    let angles = io::read_angles_csv(dir.join(files::ANGLES))?;
    let tree: ClusterTree = io::read_json(dir.join(files::HIERARCHY))?;
    let index = dataset.customer_index();

    let mut taken = [0usize; N_TRAITS];
    let mut fig1 = Vec::new();
    for t in &trajectories {
        let c = index
            .get(t.customer_id.as_str())
            .map(|&i| &dataset.customers[i])
            .ok_or_else(|| Error::Schema(format!("trajectory of unknown customer {}", t.customer_id)))?;
        let d = c.order.dominant();
        if taken[d] == FIG1_PER_TRAIT {
            continue;
        }
        taken[d] += 1;
        for (step, h) in t.points.iter().enumerate() {
            fig1.push(vec![
                t.customer_id.clone(),
                step.to_string(),
                io::fmt_f64(h[0]),
                io::fmt_f64(h[1]),
                io::fmt_f64(h[2]),
                crate::domain::initials(&[d]),
            ]);
        }
    }
    io::write_csv(dir.join(files::FIG1), &["customer_id", "step", "h1", "h2", "h3", "dominant"], fig1)?;

    let mut key_of: BTreeMap<(&str, usize), String> = BTreeMap::new();
    for node in &tree.nodes {
        for m in &node.members {
            key_of.insert((m.as_str(), node.depth()), crate::domain::initials(&node.key));
        }
    }
    let depth_cols = ["depth1", "depth2", "depth3", "depth4"];
    let mut header = vec!["customer_id", "theta", "phi"];
    header.extend(&depth_cols[..tree.depth]);
    let fig2 = angles.iter().map(|r| {
        let mut row = vec![r.customer_id.clone(), io::fmt_f64(r.angles.theta), io::fmt_f64(r.angles.phi)];
        for d in 1..=tree.depth {
            row.push(key_of.get(&(r.customer_id.as_str(), d)).cloned().unwrap_or_default());
        }
        row
    });
    io::write_csv(dir.join(files::FIG2), &header, fig2)?;

    let pick = dataset
        .customers
        .iter()
        .find(|c| c.regime_switched())
        .or(dataset.customers.first())
        .ok_or_else(|| Error::EmptyDataset("dataset has no customers".into()))?;
    let single = Dataset {
        customers: vec![pick.clone()],
        ..dataset.clone()
    };
    let switch = pick.regime.map_or(String::new(), |r| r.switch_period.to_string());
    let mut fig3 = Vec::new();
    for (window, span) in [("coarse", dataset.n_periods()), ("fine", 1)] {
        let t = extract_trajectories(&model.model, &single, span)?.remove(0);
        for (step, h) in t.points.iter().enumerate() {
            fig3.push(vec![
                pick.customer_id.clone(),
                window.to_string(),
                step.to_string(),
                io::fmt_f64(h[0]),
                io::fmt_f64(h[1]),
                io::fmt_f64(h[2]),
                switch.clone(),
            ]);
        }
    }
    io::write_csv(
        dir.join(files::FIG3),
        &["customer_id", "window", "step", "h1", "h2", "h3", "switch_period"],
        fig3,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            synth: SynthConfig {
                n_customers: 240,
                k_classes: 12,
                n_nonzero_rows: 8,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            segmentation: SegmentationConfig {
                min_subcluster_members: 20,
                ..SegmentationConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn seeds_derive_from_the_master_seed() {
        let c = RunConfig {
            seed: 7,
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!((c.synth.seed, c.train.seed, c.kmeans_seed()), (7, 10, 11));
    }

    #[test]
    fn run_config_json_round_trip_and_partial_files() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "synth": {"n_customers": 10}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.synth.n_customers, 10);
        assert_eq!(c.synth.k_classes, 97);
        let back: RunConfig = serde_json::from_str(&io::to_json_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn scoring_transactions_reproduces_the_dataset_labels() {
        let d = synthesize(&small_config().synth).unwrap();
        let rows = score_transactions(&dataset_transactions(&d), &d.coefficients, 1).unwrap();
        let expected = dataset_trait_rows(&d);
        assert_eq!(rows.len(), expected.len());
        for (a, b) in rows.iter().zip(&expected) {
            assert_eq!(a.customer_id, b.customer_id);
            assert_eq!(a.order, b.order);
            for t in 0..N_TRAITS {
                assert!((a.traits.grades[t] - b.traits.grades[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_population_fails_in_synth() {
        let mut c = small_config();
        c.synth.n_customers = 0;
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&c, dir.path(), &mut |_| {}).unwrap_err();
        assert_eq!(err.stage, "synth");
        assert!(matches!(err.error, Error::EmptyDataset(_)));
    }

    #[test]
    fn course_change_summary_counts_switched_customers() {
        let d = synthesize(&small_config().synth).unwrap();
        let straight: Vec<Trajectory<f64>> = d
            .customers
            .iter()
            .map(|c| Trajectory {
                customer_id: c.customer_id.clone(),
                points: (0..6).map(|t| [t as f64, 0.0, 0.0]).collect(),
            })
            .collect();
        let s = course_changes(&d, &straight, DEFAULT_TURN_THRESHOLD).unwrap();
        assert_eq!(s.n_switched, 24);
        assert_eq!(s.n_switched + s.n_unswitched, 240);
        assert_eq!((s.n_detected, s.n_unswitched_flagged), (0, 0));
        assert_eq!(s.within_one_rate, Some(0.0));
    }

    #[test]
    fn checks_compare_against_their_thresholds() {
        assert!(Check::new("x", "", Some(0.7), ">=", 0.7).passed);
        assert!(!Check::new("x", "", Some(0.05), "<", 0.05).passed);
        assert!(!Check::new("x", "", None, ">=", 0.0).passed);
    }

    #[test]
    fn weakest_best_correlation_takes_the_worse_angle() {
        let mut table = [[None; 2]; N_TRAITS];
        table[0] = [Some(0.9), Some(-0.2)];
        table[3] = [Some(0.1), Some(-0.6)];
        let f = FidelityReport {
            r2_test: 0.0,
            r2_train: 0.0,
            r2_test_per_angle: [0.0; 2],
            r2_train_per_angle: [0.0; 2],
            r2_polynomial_test: 0.0,
            r2_polynomial_train: 0.0,
            nonzero_threshold: 0.1,
            nonzero_count: 0,
            coefficient_nonzero_count: 0,
            jointly_nonzero_rows: 0,
            coefficient_correlations: table,
        };
        assert_eq!(weakest_best_correlation(&f), Some(0.6));
        table[3][1] = None;
        table[0][1] = None;
        assert_eq!(weakest_best_correlation(&FidelityReport { coefficient_correlations: table, ..f }), None);
    }

    #[test]
    fn small_run_writes_every_artifact_and_plot_data() {
        let dir = tempfile::tempdir().unwrap();
        let (report, timing) = run_pipeline(&small_config(), dir.path(), &mut |_| {}).unwrap();
        for name in [
            files::DATASET,
            files::COEFFICIENTS,
            files::TRANSACTIONS,
            files::TRAITS,
            files::MODEL,
            files::TRAJECTORIES,
            files::ANGLES,
            files::SURROGATE,
            files::FIDELITY,
            files::HIERARCHY,
            files::STABILITY,
            files::REPORT,
            files::TIMING,
        ] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        assert_eq!(report.dataset.n_customers, 240);
        assert_eq!(report.segmentation.levels.len(), 4);
        assert_eq!(timing.stages.last().unwrap().stage, "report");

        emit_plot_data(dir.path()).unwrap();
        let fig2 = std::fs::read_to_string(dir.path().join(files::FIG2)).unwrap();
        let tree: ClusterTree = io::read_json(dir.path().join(files::HIERARCHY)).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in fig2.lines().skip(1) {
            *counts.entry(line.split(',').nth(3).unwrap().to_string()).or_default() += 1;
        }
        for node in tree.level(1) {
            assert_eq!(counts[&crate::domain::initials(&node.key)], node.member_count);
        }
        assert_eq!(counts.values().sum::<usize>(), report.dataset.n_customers - report.surrogate.n_degenerate);

        let fig3 = std::fs::read_to_string(dir.path().join(files::FIG3)).unwrap();
        let id = fig3.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
        let dataset = read_dataset(dir.path()).unwrap();
        assert!(dataset.customers.iter().find(|c| c.customer_id == id).unwrap().regime_switched());
        assert_eq!(fig3.lines().count(), 1 + 2 * 6);
    }

    #[test]
    fn plot_data_without_a_run_is_a_stage_order_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plot_data(dir.path()), Err(Error::StageOrder(_))));
    }
}
