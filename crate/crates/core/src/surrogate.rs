//! Linear explanation of the trajectory features.
//!
//! Trajectories are reduced to the direction of their net displacement,
//! expressed as azimuth `θ = atan2(d_y, d_x)` and elevation
//! `φ = asin(d_z / ‖d‖)`. A least-squares linear model then maps a customer's
//! aggregated spending shares to `(θ, φ)`.

use serde::{Deserialize, Serialize};

use crate::domain::{nonzero_rows, CoefficientMatrix, N_TRAITS};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix};
use crate::rnn::{Trajectory, Vec3};
use crate::scalar::Scalar;

/// Displacements shorter than this have no usable direction.
pub const MIN_DISPLACEMENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct DirectionAngles<T> {
    /// Azimuth in `(−π, π]`.
    pub theta: T,
    /// Elevation in `[−π/2, π/2]`.
    pub phi: T,
}

impl<T: Scalar> DirectionAngles<T> {
    /// Unit vector `(cos φ cos θ, cos φ sin θ, sin φ)`.
    pub fn unit_vector(&self) -> Vec3<T> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [cp * ct, cp * st, sp]
    }
}

/// Which vector of a trajectory is reduced to angles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// `h_T − h_1`
    #[default]
    NetDisplacement,
    /// `h_T`, i.e. the direction from the origin.
    FinalPoint,
}

pub fn direction_angles<T: Scalar>(d: &Vec3<T>) -> Result<DirectionAngles<T>> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !(norm >= T::of(MIN_DISPLACEMENT)) {
        return Err(Error::DegenerateTrajectory { norm: norm.as_f64() });
    }
    let theta = if d[0] == T::zero() && d[1] == T::zero() {
        T::zero()
    } else {
        d[1].atan2(d[0])
    };
    let phi = (d[2] / norm).max(-T::one()).min(T::one()).asin();
    Ok(DirectionAngles { theta, phi })
}

pub fn trajectory_angles<T: Scalar>(trajectory: &Trajectory<T>, mode: DirectionMode) -> Result<DirectionAngles<T>> {
    if trajectory.len() < 2 {
        return Err(Error::Dimension(format!(
            "trajectory {} has {} points, need at least 2",
            trajectory.customer_id,
            trajectory.len()
        )));
    }
    let d = match mode {
        DirectionMode::NetDisplacement => trajectory.net_displacement().expect("non-empty"),
        DirectionMode::FinalPoint => *trajectory.points.last().expect("non-empty"),
    };
    direction_angles(&d)
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle<T: Scalar>(x: T) -> T {
    let pi = T::of(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut y = x % two_pi;
    if y <= -pi {
        y += two_pi;
    } else if y > pi {
        y -= two_pi;
    }
    y
}

/// `atan2(Σ sin θ, Σ cos θ)`, or 0 when the resultant vanishes.
pub fn circular_mean<T: Scalar>(angles: impl IntoIterator<Item = T>) -> T {
    let (s, c) = angles
        .into_iter()
        .fold((T::zero(), T::zero()), |(s, c), a| (s + a.sin(), c + a.cos()));
    if s == T::zero() && c == T::zero() {
        T::zero()
    } else {
        s.atan2(c)
    }
}

/// Ordinary least squares with intercept, minimum-norm when rank-deficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LinearFit<T> {
    /// `K × outputs`
    pub weights: Matrix<T>,
    pub intercept: Vec<T>,
    /// Rank of the design including the intercept column.
    pub rank: usize,
}

impl<T: Scalar> LinearFit<T> {
    pub fn predict_row(&self, x: &[T]) -> Vec<T> {
        (0..self.intercept.len())
            .map(|j| {
                self.intercept[j]
                    + x.iter()
                        .enumerate()
                        .map(|(k, &v)| v * self.weights.get(k, j))
                        .sum::<T>()
            })
            .collect()
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.weights.rows() {
            return Err(Error::Dimension(format!(
                "{} features against a fit over {}",
                x.cols(),
                self.weights.rows()
            )));
        }
        let rows: Vec<Vec<T>> = (0..x.rows()).map(|r| self.predict_row(x.row(r))).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.intercept.len()));
        }
        Matrix::from_rows(&rows)
    }
}

/// `[1 | X]`
fn with_intercept<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(x.rows(), x.cols() + 1, |r, c| if c == 0 { T::one() } else { x.get(r, c - 1) })
}

pub fn fit_linear<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<LinearFit<T>> {
    if x.rows() == 0 {
        return Err(Error::EmptyDataset("linear fit with zero samples".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!("{} feature rows vs {} target rows", x.rows(), y.rows())));
    }
    let ls = lstsq(&with_intercept(x), y)?;
    let k = x.cols();
    let p = y.cols();
    let intercept = (0..p).map(|j| ls.solution.get(0, j)).collect();
    let weights = Matrix::from_fn(k, p, |r, c| ls.solution.get(r + 1, c));
    Ok(LinearFit {
        weights,
        intercept,
        rank: ls.rank,
    })
}

/// Features `x_k` followed by `x_i x_j` for `i ≤ j`.
pub fn expand_quadratic<T: Scalar>(x: &[T]) -> Vec<T> {
    let k = x.len();
    let mut out = Vec::with_capacity(k + k * (k + 1) / 2);
    out.extend_from_slice(x);
    for i in 0..k {
        for j in i..k {
            out.push(x[i] * x[j]);
        }
    }
    out
}

fn expand_matrix<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let k = x.cols();
    let width = k + k * (k + 1) / 2;
    let mut data = Vec::with_capacity(x.rows() * width);
    for r in 0..x.rows() {
        data.extend(expand_quadratic(x.row(r)));
    }
    Matrix::from_vec(x.rows(), width, data).expect("width matches the expansion")
}

/// Degree-2 polynomial regression, solved like [`fit_linear`] on expanded features.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFit<T> {
    pub fit: LinearFit<T>,
}

impl<T: Scalar> PolynomialFit<T> {
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.fit.predict(&expand_matrix(x))
    }
}

pub fn fit_polynomial_baseline<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, degree: usize) -> Result<PolynomialFit<T>> {
    if degree != 2 {
        return Err(Error::Config(format!("polynomial degree {degree} unsupported; only 2 is implemented")));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyDataset("polynomial fit with zero samples".into()));
    }
    Ok(PolynomialFit {
        fit: fit_linear(&expand_matrix(x), y)?,
    })
}

const DEGENERATE_SS: f64 = 1e-12;

/// Coefficient of determination pooled over all columns.
///
/// With a constant truth, returns 1 for a perfect fit and −∞ otherwise.
pub fn r_squared<T: Scalar>(predictions: &Matrix<T>, truth: &Matrix<T>) -> Result<f64> {
    let (res, tot) = sums_of_squares(predictions, truth)?;
    let res: f64 = res.iter().sum();
    let tot: f64 = tot.iter().sum();
    Ok(ratio(res, tot))
}

pub fn r_squared_per_column<T: Scalar>(predictions: &Matrix<T>, truth: &Matrix<T>) -> Result<Vec<f64>> {
    let (res, tot) = sums_of_squares(predictions, truth)?;
    Ok(res.into_iter().zip(tot).map(|(r, t)| ratio(r, t)).collect())
}

fn ratio(res: f64, tot: f64) -> f64 {
    if tot < DEGENERATE_SS {
        if res < DEGENERATE_SS {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - res / tot
    }
}

fn sums_of_squares<T: Scalar>(predictions: &Matrix<T>, truth: &Matrix<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if predictions.rows() != truth.rows() || predictions.cols() != truth.cols() {
        return Err(Error::Dimension("predictions and truth differ in shape".into()));
    }
    let n = truth.rows();
    if n < 2 {
        return Err(Error::EmptyDataset(format!("R² needs at least 2 samples, got {n}")));
    }
    let p = truth.cols();
    let mut res = vec![0.0; p];
    let mut tot = vec![0.0; p];
    for j in 0..p {
        let mean = (0..n).map(|r| truth.get(r, j).as_f64()).sum::<f64>() / n as f64;
        for r in 0..n {
            let t = truth.get(r, j).as_f64();
            res[j] += (predictions.get(r, j).as_f64() - t).powi(2);
            tot[j] += (t - mean).powi(2);
        }
    }
    Ok((res, tot))
}

/// Linear map from spending shares to direction angles.
///
/// Azimuths are regressed after rotating the circular mean of the training
/// azimuths to zero, so that customers near `±π` do not split across the
/// branch cut. [`LinearSurrogate::predict`] returns angles in that rotated
/// frame; [`LinearSurrogate::predict_angles`] undoes the rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LinearSurrogate<T> {
    /// `K × 2`, columns `(θ, φ)`.
    pub weights: Matrix<T>,
    pub intercept: [T; 2],
    pub azimuth_offset: T,
    pub rank: usize,
    pub r2_train: f64,
    pub r2_train_per_angle: [f64; 2],
}

/// Angles as a regression target in the frame rotated by `offset`.
pub fn angle_targets<T: Scalar>(angles: &[DirectionAngles<T>], offset: T) -> Matrix<T> {
    Matrix::from_fn(angles.len(), 2, |r, c| {
        if c == 0 {
            wrap_angle(angles[r].theta - offset)
        } else {
            angles[r].phi
        }
    })
}

impl<T: Scalar> LinearSurrogate<T> {
    pub fn fit(x: &Matrix<T>, angles: &[DirectionAngles<T>]) -> Result<Self> {
        if angles.len() != x.rows() {
            return Err(Error::Dimension(format!("{} profiles vs {} angle pairs", x.rows(), angles.len())));
        }
        let offset = circular_mean(angles.iter().map(|a| a.theta));
        let y = angle_targets(angles, offset);
        let fit = fit_linear(x, &y)?;
        let pred = fit.predict(x)?;
        let (r2_train, per) = if x.rows() >= 2 {
            let per = r_squared_per_column(&pred, &y)?;
            (r_squared(&pred, &y)?, [per[0], per[1]])
        } else {
            (f64::NAN, [f64::NAN; 2])
        };
        Ok(LinearSurrogate {
            weights: fit.weights,
            intercept: [fit.intercept[0], fit.intercept[1]],
            azimuth_offset: offset,
            rank: fit.rank,
            r2_train,
            r2_train_per_angle: per,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    fn as_fit(&self) -> LinearFit<T> {
        LinearFit {
            weights: self.weights.clone(),
            intercept: self.intercept.to_vec(),
            rank: self.rank,
        }
    }

    /// Predictions in the rotated frame, one `(θ', φ)` row per profile.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.as_fit().predict(x)
    }

    pub fn predict_angles(&self, shares: &[T]) -> Result<DirectionAngles<T>> {
        if shares.len() != self.n_classes() {
            return Err(Error::Dimension(format!(
                "{} shares against {} classes",
                shares.len(),
                self.n_classes()
            )));
        }
        let y = self.as_fit().predict_row(shares);
        Ok(DirectionAngles {
            theta: wrap_angle(y[0] + self.azimuth_offset),
            phi: y[1],
        })
    }
}

/// How well the surrogate reproduces the trajectories and relates to the scoring weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub r2_test: f64,
    pub r2_train: f64,
    pub r2_test_per_angle: [f64; 2],
    pub r2_train_per_angle: [f64; 2],
    pub r2_polynomial_test: f64,
    pub r2_polynomial_train: f64,
    pub nonzero_threshold: f64,
    /// Surrogate rows with a weight that is not negligible.
    pub nonzero_count: usize,
    pub coefficient_nonzero_count: usize,
    pub jointly_nonzero_rows: usize,
    /// `[trait][angle]` Pearson r; `None` when fewer than 3 rows qualify or a column is constant.
    pub coefficient_correlations: [[Option<f64>; 2]; N_TRAITS],
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 3 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of every trait column with every surrogate column over jointly non-zero rows.
pub fn coefficient_correlations<T: Scalar>(
    surrogate_weights: &Matrix<T>,
    coeffs: &CoefficientMatrix<T>,
    factor: f64,
) -> Result<([[Option<f64>; 2]; N_TRAITS], usize)> {
    if surrogate_weights.rows() != coeffs.n_classes() {
        return Err(Error::Dimension(format!(
            "surrogate over {} classes, coefficients over {}",
            surrogate_weights.rows(),
            coeffs.n_classes()
        )));
    }
    let s_mask = nonzero_rows(surrogate_weights, T::of(factor));
    let c_mask = coeffs.nonzero_rows(T::of(factor));
    let rows: Vec<usize> = (0..s_mask.len()).filter(|&r| s_mask[r] && c_mask[r]).collect();
    let mut table = [[None; 2]; N_TRAITS];
    for (t, row) in table.iter_mut().enumerate() {
        let a: Vec<f64> = rows.iter().map(|&r| coeffs.values().get(r, t).as_f64()).collect();
        for (angle, cell) in row.iter_mut().enumerate() {
            let b: Vec<f64> = rows.iter().map(|&r| surrogate_weights.get(r, angle).as_f64()).collect();
            *cell = pearson(&a, &b);
        }
    }
    Ok((table, rows.len()))
}

pub fn evaluate_fidelity<T: Scalar>(
    surrogate: &LinearSurrogate<T>,
    polynomial: &PolynomialFit<T>,
    coeffs: &CoefficientMatrix<T>,
    train: (&Matrix<T>, &[DirectionAngles<T>]),
    test: (&Matrix<T>, &[DirectionAngles<T>]),
    nonzero_factor: f64,
) -> Result<FidelityReport> {
    let y_test = angle_targets(test.1, surrogate.azimuth_offset);
    let y_train = angle_targets(train.1, surrogate.azimuth_offset);
    let pred = surrogate.predict(test.0)?;
    let per = r_squared_per_column(&pred, &y_test)?;
    let poly_test = r_squared(&polynomial.predict(test.0)?, &y_test)?;
    let poly_train = r_squared(&polynomial.predict(train.0)?, &y_train)?;
    let (table, joint) = coefficient_correlations(&surrogate.weights, coeffs, nonzero_factor)?;
    let nonzero_count = nonzero_rows(&surrogate.weights, T::of(nonzero_factor))
        .into_iter()
        .filter(|&b| b)
        .count();
    Ok(FidelityReport {
        r2_test: r_squared(&pred, &y_test)?,
        r2_train: surrogate.r2_train,
        r2_test_per_angle: [per[0], per[1]],
        r2_train_per_angle: surrogate.r2_train_per_angle,
        r2_polynomial_test: poly_test,
        r2_polynomial_train: poly_train,
        nonzero_threshold: nonzero_factor,
        nonzero_count,
        coefficient_nonzero_count: coeffs.nonzero_count(T::of(nonzero_factor)),
        jointly_nonzero_rows: joint,
        coefficient_correlations: table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn angles(d: [f64; 3]) -> DirectionAngles<f64> {
        direction_angles(&d).unwrap()
    }

    #[test]
    fn axis_directions() {
        assert_eq!(angles([1.0, 0.0, 0.0]), DirectionAngles { theta: 0.0, phi: 0.0 });
        let a = angles([0.0, 1.0, 0.0]);
        assert!((a.theta - FRAC_PI_2).abs() < 1e-15 && a.phi == 0.0);
        let a = angles([0.0, 0.0, 1.0]);
        assert!(a.theta == 0.0 && (a.phi - FRAC_PI_2).abs() < 1e-15);
        let a = angles([1.0, 1.0, 2f64.sqrt()]);
        assert!((a.theta - FRAC_PI_4).abs() < 1e-15);
        assert!((a.phi - FRAC_PI_4).abs() < 1e-15);
        assert!((angles([-1.0, 0.0, 0.0]).theta - PI).abs() < 1e-15);
    }

    #[test]
    fn tiny_displacements_are_degenerate() {
        assert!(matches!(
            direction_angles(&[1e-10, 0.0, 0.0]),
            Err(Error::DegenerateTrajectory { .. })
        ));
        assert!(direction_angles(&[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn trajectory_direction_modes() {
        let t = Trajectory {
            customer_id: "x".into(),
            points: vec![[0.1, 0.0, 0.0], [0.2, 0.1, 0.0], [0.1, 0.1, 0.0]],
        };
        let net = trajectory_angles(&t, DirectionMode::NetDisplacement).unwrap();
        assert!((net.theta - FRAC_PI_2).abs() < 1e-12);
        let fin = trajectory_angles(&t, DirectionMode::FinalPoint).unwrap();
        assert!((fin.theta - FRAC_PI_4).abs() < 1e-12);
        let short = Trajectory {
            customer_id: "y".into(),
            points: vec![[0.1, 0.0, 0.0]],
        };
        assert!(trajectory_angles(&short, DirectionMode::NetDisplacement).is_err());
    }

    #[test]
    fn wrap_and_circular_mean() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5_f64) - 0.5).abs() < 1e-15);
        let m = circular_mean([PI - 0.1, -PI + 0.1]);
        assert!((m.abs() - PI).abs() < 1e-12);
        assert_eq!(circular_mean(Vec::<f64>::new()), 0.0);
    }

    #[test]
    fn exact_line_fit() {
        let x = Matrix::from_rows(&[[1.0_f64], [2.0], [3.0]]).unwrap();
        let y = Matrix::from_rows(&[[2.0], [4.0], [6.0]]).unwrap();
        let f = fit_linear(&x, &y).unwrap();
        assert!((f.weights.get(0, 0) - 2.0).abs() < 1e-12);
        assert!(f.intercept[0].abs() < 1e-12);
    }

    #[test]
    fn constant_target_fits_the_intercept() {
        let x = Matrix::from_rows(&[[1.0_f64, 0.3], [2.0, -1.0], [3.0, 0.5], [0.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.5], [1.5], [1.5], [1.5]]).unwrap();
        let f = fit_linear(&x, &y).unwrap();
        assert!(f.weights.as_slice().iter().all(|w| w.abs() < 1e-12));
        assert!((f.intercept[0] - 1.5).abs() < 1e-12);
        assert!(matches!(
            fit_linear(&Matrix::<f64>::zeros(0, 2), &Matrix::zeros(0, 1)),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn r_squared_examples() {
        let truth = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert_eq!(r_squared(&truth, &truth).unwrap(), 1.0);
        let means = Matrix::from_rows(&[[1.0], [1.0], [1.0]]).unwrap();
        assert_eq!(r_squared(&means, &truth).unwrap(), 0.0);
        let pred = Matrix::from_rows(&[[0.0], [1.0], [1.0]]).unwrap();
        assert!((r_squared(&pred, &truth).unwrap() - 0.5).abs() < 1e-15);

        let flat = Matrix::from_rows(&[[3.0], [3.0]]).unwrap();
        assert_eq!(r_squared(&flat, &flat).unwrap(), 1.0);
        let off = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(r_squared(&off, &flat).unwrap(), f64::NEG_INFINITY);
        let one = Matrix::from_rows(&[[3.0]]).unwrap();
        assert!(matches!(r_squared(&one, &one), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn quadratic_baseline_captures_a_square() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let sample = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let y = Matrix::from_fn(n, 1, |r, _| x.get(r, 0) * x.get(r, 0));
            (x, y)
        };
        let (x, y) = sample(&mut rng, 40);
        let (xt, yt) = sample(&mut rng, 40);
        let poly = fit_polynomial_baseline(&x, &y, 2).unwrap();
        let lin = fit_linear(&x, &y).unwrap();
        assert!((r_squared(&poly.predict(&xt).unwrap(), &yt).unwrap() - 1.0).abs() < 1e-9);
        assert!(r_squared(&lin.predict(&xt).unwrap(), &yt).unwrap() < 1.0);
        assert!(fit_polynomial_baseline(&x, &y, 3).is_err());
    }

    #[test]
    fn quadratic_baseline_on_linear_data_stays_close() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_fn(120, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(120, 1, |r, _| {
            0.5 + x.get(r, 0) - 2.0 * x.get(r, 2) + 0.1 * rng.random_range(-1.0..1.0)
        });
        let lin = fit_linear(&x, &y).unwrap();
        let poly = fit_polynomial_baseline(&x, &y, 2).unwrap();
        let r_lin = r_squared(&lin.predict(&x).unwrap(), &y).unwrap();
        let r_poly = r_squared(&poly.predict(&x).unwrap(), &y).unwrap();
        assert!(r_poly >= r_lin - 0.02);
        assert!(r_poly >= r_lin - 1e-12, "nested models: {r_poly} < {r_lin}");
    }

    #[test]
    fn surrogate_unwraps_azimuths_near_the_branch_cut() {
        // θ straddles ±π linearly in the first feature.
        let n = 30;
        let x = Matrix::from_fn(n, 1, |r, _| r as f64 / n as f64);
        let raw: Vec<DirectionAngles<f64>> = (0..n)
            .map(|r| DirectionAngles {
                theta: wrap_angle(PI - 0.3 + 0.6 * r as f64 / n as f64),
                phi: 0.1,
            })
            .collect();
        let s = LinearSurrogate::fit(&x, &raw).unwrap();
        assert!(s.r2_train_per_angle[0] > 1.0 - 1e-10);
        for (r, a) in raw.iter().enumerate() {
            let p = s.predict_angles(x.row(r)).unwrap();
            assert!(wrap_angle(p.theta - a.theta).abs() < 1e-9);
        }
    }

    fn coeffs_fixture() -> CoefficientMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let values = Matrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
        CoefficientMatrix::new((0..12).map(|i| i.to_string()).collect(), values).unwrap()
    }

    #[test]
    fn self_correlation_is_one_and_negation_minus_one() {
        let c = coeffs_fixture();
        let col = c.values().column(3);
        let w = Matrix::from_fn(12, 2, |r, _| col[r]);
        let (table, joint) = coefficient_correlations(&w, &c, 0.1).unwrap();
        assert!(joint >= 3);
        assert!((table[3][0].unwrap() - 1.0).abs() < 1e-12);
        assert!((table[3][1].unwrap() - 1.0).abs() < 1e-12);
        let neg = Matrix::from_fn(12, 2, |r, _| -col[r]);
        let (table, _) = coefficient_correlations(&neg, &c, 0.1).unwrap();
        assert!((table[3][0].unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_joint_rows_means_no_correlation() {
        let c = coeffs_fixture();
        let mut w = Matrix::zeros(12, 2);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let (table, joint) = coefficient_correlations(&w, &c, 0.1).unwrap();
        assert_eq!(joint, 2);
        assert!(table.iter().flatten().all(|r| r.is_none()));
    }

    proptest! {
        #[test]
        fn angles_are_scale_invariant(d in prop::array::uniform3(-1.0f64..1.0), k in 0usize..3) {
            prop_assume!(d.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3);
            let lambda = [1e-3, 1.0, 1e3][k];
            let a = angles(d);
            let b = angles(d.map(|x| x * lambda));
            prop_assert!(wrap_angle(a.theta - b.theta).abs() < 1e-12);
            prop_assert!((a.phi - b.phi).abs() < 1e-12);
        }

        #[test]
        fn angles_reconstruct_the_unit_direction(d in prop::array::uniform3(-5.0f64..5.0)) {
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-6);
            let a = angles(d);
            prop_assert!(a.theta > -PI && a.theta <= PI);
            prop_assert!(a.phi.abs() <= FRAC_PI_2);
            let u = a.unit_vector();
            for i in 0..3 {
                prop_assert!((u[i] - d[i] / norm).abs() < 1e-12);
            }
        }
    }
}
