//! MAP position estimation and the hybrid Cramér–Rao bound.
//!
//! The unknown is the stacked coordinate vector of every node,
//! `x = [x1, y1, ..., xN, yN, xL, yL]`. Anchors enter with tight Gaussian
//! priors, the listener with a wide one. With the noise level profiled out,
//! the negative log posterior is
//!
//! ```text
//! V(x) = 1/2 ln |y - S g(x)/c - D|^2 + beta/2 |mu - x|^2_{Pr^-1},   beta = 1/(M + 2)
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{listener_of, range_jacobian, ranges_from_stacked, stack, NetworkGeometry, SPEED_OF_LIGHT};
use crate::schedule::ScheduleMatrices;

/// Lower bound on the squared residual norm inside the logarithm, s^2.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    mu: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl Prior {
    pub fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        if cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                what: "prior covariance",
                expected: n,
                got: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax() {
            return Err(Error::Config("prior covariance is not symmetric".into()));
        }
        let ch = Cholesky::<f64, Dyn>::new(cov.clone())
            .ok_or_else(|| Error::Config("prior covariance is not positive definite".into()))?;
        Ok(Self {
            precision: ch.inverse(),
            mu,
            cov,
        })
    }

    /// Independent isotropic priors: anchors at their surveyed positions with
    /// `anchor_std`, the listener at `listener_mean` with `listener_std` (m).
    pub fn anchored(geometry: &NetworkGeometry, anchor_std: f64, listener_mean: Point2<f64>, listener_std: f64) -> Result<Self> {
        let mu = stack(geometry.anchors(), listener_mean);
        let n = mu.len();
        let cov = DMatrix::from_fn(n, n, |r, c| match (r == c, r >= n - 2) {
            (false, _) => 0.0,
            (true, false) => anchor_std * anchor_std,
            (true, true) => listener_std * listener_std,
        });
        Self::new(mu, cov)
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Same prior shifted by `offset` on every node.
    pub fn translated(&self, offset: Vector2<f64>) -> Self {
        let mut mu = self.mu.clone();
        for i in 0..mu.len() / 2 {
            mu[2 * i] += offset.x;
            mu[2 * i + 1] += offset.y;
        }
        Self { mu, ..self.clone() }
    }
}

fn beta(m: usize) -> f64 {
    1.0 / (m as f64 + 2.0)
}

fn check_inputs(x: &DVector<f64>, y: &DVector<f64>, delays: &DVector<f64>, matrices: &ScheduleMatrices, prior: &Prior) -> Result<()> {
    let dim = 2 * (matrices.n_anchors() + 1);
    let m = matrices.n_measurements();
    for (what, expected, got) in [
        ("stacked positions", dim, x.len()),
        ("prior mean", dim, prior.mu.len()),
        ("measurement vector", m, y.len()),
        ("delay vector", m, delays.len()),
    ] {
        if expected != got {
            return Err(Error::DimensionMismatch { what, expected, got });
        }
    }
    Ok(())
}

fn residual(x: &DVector<f64>, y: &DVector<f64>, delays: &DVector<f64>, matrices: &ScheduleMatrices) -> DVector<f64> {
    y - matrices.s() * ranges_from_stacked(x) / SPEED_OF_LIGHT - delays
}

fn prior_term(x: &DVector<f64>, prior: &Prior, m: usize) -> f64 {
    let e = x - &prior.mu;
    0.5 * beta(m) * (e.transpose() * &prior.precision * &e)[(0, 0)]
}

pub fn map_cost(x: &DVector<f64>, y_cal: &DVector<f64>, delays: &DVector<f64>, matrices: &ScheduleMatrices, prior: &Prior) -> Result<f64> {
    check_inputs(x, y_cal, delays, matrices, prior)?;
    Ok(cost_unchecked(x, y_cal, delays, matrices, prior))
}

fn cost_unchecked(x: &DVector<f64>, y: &DVector<f64>, delays: &DVector<f64>, matrices: &ScheduleMatrices, prior: &Prior) -> f64 {
    let r2 = residual(x, y, delays, matrices).norm_squared().max(RESIDUAL_FLOOR);
    0.5 * r2.ln() + prior_term(x, prior, matrices.n_measurements())
}

/// Analytic gradient of [`map_cost`].
pub fn map_gradient(x: &DVector<f64>, y_cal: &DVector<f64>, delays: &DVector<f64>, matrices: &ScheduleMatrices, prior: &Prior) -> Result<DVector<f64>> {
    check_inputs(x, y_cal, delays, matrices, prior)?;
    let r = residual(x, y_cal, delays, matrices);
    let jr = residual_jacobian(x, matrices);
    let r2 = r.norm_squared().max(RESIDUAL_FLOOR);
    Ok(jr.transpose() * r / r2 + &prior.precision * (x - &prior.mu) * beta(matrices.n_measurements()))
}

fn residual_jacobian(x: &DVector<f64>, matrices: &ScheduleMatrices) -> DMatrix<f64> {
    -(matrices.s() * range_jacobian(x)) / SPEED_OF_LIGHT
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    pub max_iterations: usize,
    /// Step norm below which the iteration stops, m.
    pub step_tol: f64,
    pub grad_tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step_tol: 1e-6,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimate {
    /// All node coordinates at the optimum.
    pub x: DVector<f64>,
    pub listener: Point2<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn map_estimate(
    y_cal: &DVector<f64>,
    delays: &DVector<f64>,
    matrices: &ScheduleMatrices,
    prior: &Prior,
    init: Option<&DVector<f64>>,
) -> Result<PositionEstimate> {
    map_estimate_with(y_cal, delays, matrices, prior, init, &MapOptions::default())
}

/// Gauss–Newton on the profiled cost with Armijo backtracking.
///
/// Multiplying the gradient and the Gauss–Newton curvature by `|r|^2` turns
/// each step into a prior-weighted least-squares step:
/// `(Jr^T Jr + beta |r|^2 W) p = -(Jr^T r + beta |r|^2 W (x - mu))`.
pub fn map_estimate_with(
    y_cal: &DVector<f64>,
    delays: &DVector<f64>,
    matrices: &ScheduleMatrices,
    prior: &Prior,
    init: Option<&DVector<f64>>,
    options: &MapOptions,
) -> Result<PositionEstimate> {
    let mut x = init.cloned().unwrap_or_else(|| prior.mu.clone());
    check_inputs(&x, y_cal, delays, matrices, prior)?;
    let b = beta(matrices.n_measurements());
    let w = &prior.precision;
    let mut cost = cost_unchecked(&x, y_cal, delays, matrices, prior);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let r = residual(&x, y_cal, delays, matrices);
        let r2 = r.norm_squared().max(RESIDUAL_FLOOR);
        let jr = residual_jacobian(&x, matrices);
        let scaled_grad = jr.transpose() * &r + w * (&x - &prior.mu) * (b * r2);
        let grad = &scaled_grad / r2;
        if grad.norm() < options.grad_tol {
            converged = true;
            break;
        }
        let h = jr.transpose() * &jr + w * (b * r2);
        let step = match Cholesky::<f64, Dyn>::new(h) {
            Some(ch) => -ch.solve(&scaled_grad),
            // singular curvature: unit-length steepest descent
            None => -&grad / grad.norm(),
        };
        if step.norm() < options.step_tol {
            x += &step;
            cost = cost_unchecked(&x, y_cal, delays, matrices, prior);
            converged = true;
            break;
        }
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        let accepted = loop {
            let candidate = &x + &step * alpha;
            let c = cost_unchecked(&candidate, y_cal, delays, matrices, prior);
            if c <= cost + 1e-4 * alpha * slope {
                break Some((candidate, c));
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                break None;
            }
        };
        let Some((next, c)) = accepted else { break };
        x = next;
        cost = c;
        if alpha * step.norm() < options.step_tol {
            converged = true;
            break;
        }
    }

    Ok(PositionEstimate {
        listener: listener_of(&x),
        x,
        cost,
        iterations,
        converged,
    })
}

/// `J = J^D + J^P` for stacked positions `x` and measurement noise `sigma` (s).
pub fn fisher_information(x: &DVector<f64>, matrices: &ScheduleMatrices, sigma: f64, prior: &Prior) -> Result<DMatrix<f64>> {
    fisher_information_with(x, matrices, sigma, None, prior)
}

/// As [`fisher_information`], with an optional position-dependent noise
/// level given by its gradient `d sigma / d x`. The noise model used
/// throughout this crate is position independent, so callers pass `None`.
pub fn fisher_information_with(
    x: &DVector<f64>,
    matrices: &ScheduleMatrices,
    sigma: f64,
    sigma_gradient: Option<&DVector<f64>>,
    prior: &Prior,
) -> Result<DMatrix<f64>> {
    let dim = 2 * (matrices.n_anchors() + 1);
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "stacked positions",
            expected: dim,
            got: x.len(),
        });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config("sigma must be > 0".into()));
    }
    let sg = matrices.s() * range_jacobian(x);
    let mut j = sg.transpose() * &sg / (SPEED_OF_LIGHT * SPEED_OF_LIGHT * sigma * sigma);
    if let Some(ds) = sigma_gradient {
        let m = matrices.n_measurements() as f64;
        j += ds * ds.transpose() * (m / (2.0 * sigma.powi(4)));
    }
    Ok(j + &prior.precision)
}

/// Bound on the covariance of all coordinates, `J^-1`.
pub fn hcrb(x: &DVector<f64>, matrices: &ScheduleMatrices, sigma: f64, prior: &Prior) -> Result<DMatrix<f64>> {
    let j = fisher_information(x, matrices, sigma, prior)?;
    Cholesky::<f64, Dyn>::new(j)
        .map(|ch| ch.inverse())
        .ok_or(Error::SingularInformation)
}

/// Trailing 2x2 block (the listener) of a stacked covariance.
pub fn listener_block(m: &DMatrix<f64>) -> Matrix2<f64> {
    let n = m.nrows();
    m.fixed_view::<2, 2>(n - 2, n - 2).into_owned()
}

/// Chi-square quantile with two degrees of freedom, `-2 ln(1 - p)`.
pub fn chi2_quantile_2dof(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEllipse {
    pub center: [f64; 2],
    /// Major then minor semi-axis, m.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from +x, radians.
    pub orientation_rad: f64,
    pub confidence: f64,
}

impl ErrorEllipse {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_axes[0] * self.semi_axes[1]
    }
}

pub fn error_ellipse(cov: &Matrix2<f64>, center: Point2<f64>, confidence: f64) -> Result<ErrorEllipse> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} outside (0, 1)")));
    }
    let (a, b, d) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    if l2 < -1e-12 {
        return Err(Error::NegativeEigenvalue(l2));
    }
    let q = chi2_quantile_2dof(confidence);
    Ok(ErrorEllipse {
        center: [center.x, center.y],
        semi_axes: [(l1 * q).sqrt(), (l2.max(0.0) * q).sqrt()],
        orientation_rad: 0.5 * (2.0 * b).atan2(a - d),
        confidence,
    })
}

/// Mean and (biased, `1/n`) covariance of a point cloud.
pub fn sample_covariance(points: &[Point2<f64>]) -> (Point2<f64>, Matrix2<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords) / n;
    let cov = points.iter().fold(Matrix2::zeros(), |acc, p| {
        let e = p.coords - mean;
        acc + e * e.transpose()
    }) / n;
    (Point2::from(mean), cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ranges_from_geometry;
    use crate::schedule::Schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const C: f64 = SPEED_OF_LIGHT;
    const DELTA: f64 = 3e-3;

    fn setup(listener: [f64; 2]) -> (NetworkGeometry, ScheduleMatrices) {
        let g = NetworkGeometry::from_coords(&[[0.0, 0.0], [10.33, 0.0], [4.90, 8.66]], Some(listener)).unwrap();
        let m = ScheduleMatrices::new(&Schedule::new(vec![1, 2, 3, 2, 1, 3, 1], 3, DELTA).unwrap()).unwrap();
        (g, m)
    }

    fn clean_data(g: &NetworkGeometry, m: &ScheduleMatrices) -> (DVector<f64>, DVector<f64>) {
        let d = DVector::from_element(m.n_measurements(), DELTA);
        let y = m.s() * ranges_from_geometry(g).unwrap().values() / C + &d;
        (y, d)
    }

    fn noisy(y: &DVector<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        y.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn prior_center_has_zero_prior_term() {
        let (g, m) = setup([1.92, 2.42]);
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        assert_eq!(prior_term(prior.mu(), &prior, m.n_measurements()), 0.0);
    }

    #[test]
    fn noiseless_cost_hits_floor_at_truth() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let truth = g.stacked().unwrap();
        let prior = Prior::anchored(&g, 1e-6, g.listener().unwrap(), 1e-6).unwrap();
        let v = map_cost(&truth, &y, &d, &m, &prior).unwrap();
        assert_eq!(v, 0.5 * RESIDUAL_FLOOR.ln());
        let mut off = truth.clone();
        off[6] += 0.01;
        assert!(map_cost(&off, &y, &d, &m, &prior).unwrap() > v);
    }

    #[test]
    fn noiseless_estimate_recovers_truth() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let prior = Prior::anchored(&g, 0.01, g.listener().unwrap(), 10.0).unwrap();
        let est = map_estimate(&y, &d, &m, &prior, None).unwrap();
        assert!(est.converged);
        assert!((est.listener - g.listener().unwrap()).norm() < 1e-6);

        // and from a displaced start
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        let est = map_estimate(&y, &d, &m, &prior, None).unwrap();
        assert!(est.converged);
        assert!((est.listener - g.listener().unwrap()).norm() < 1e-4, "{}", est.listener);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = noisy(&y, 3e-9, &mut rng);
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        let truth = g.stacked().unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let x = truth.map(|v| v + rng.gen_range(-0.5..0.5));
            let grad = map_gradient(&x, &y, &d, &m, &prior).unwrap();
            let fd = DVector::from_fn(x.len(), |i, _| {
                let mut p = x.clone();
                let mut q = x.clone();
                p[i] += h;
                q[i] -= h;
                (map_cost(&p, &y, &d, &m, &prior).unwrap() - map_cost(&q, &y, &d, &m, &prior).unwrap()) / (2.0 * h)
            });
            assert!((&fd - &grad).norm() / grad.norm() < 1e-5);
        }
    }

    #[test]
    fn estimate_agrees_with_grid_search() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = noisy(&y, 3e-9, &mut rng);
        let truth = g.listener().unwrap();
        let prior = Prior::anchored(&g, 0.01, truth + Vector2::new(0.8, -0.6), 10.0).unwrap();
        let est = map_estimate(&y, &d, &m, &prior, None).unwrap();
        assert!(est.converged);

        // anchors held at their prior means; listener on a 1 cm lattice
        let mut x = prior.mu().clone();
        let mut best = (f64::INFINITY, Point2::origin());
        for i in 0..=400 {
            for j in 0..=400 {
                let p = Point2::new(truth.x - 2.0 + 0.01 * i as f64, truth.y - 2.0 + 0.01 * j as f64);
                x[6] = p.x;
                x[7] = p.y;
                let v = map_cost(&x, &y, &d, &m, &prior).unwrap();
                if v < best.0 {
                    best = (v, p);
                }
            }
        }
        assert!((est.listener - best.1).norm() < 0.015, "map {} grid {}", est.listener, best.1);
    }

    #[test]
    fn translation_equivariance() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = noisy(&y, 3e-9, &mut rng);
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        let offset = Vector2::new(13.0, -7.5);
        let a = map_estimate(&y, &d, &m, &prior, None).unwrap();
        let b = map_estimate(&y, &d, &m, &prior.translated(offset), None).unwrap();
        assert!((b.listener - (a.listener + offset)).norm() < 1e-5);
    }

    #[test]
    fn fisher_scales_with_inverse_variance() {
        let (g, m) = setup([1.92, 2.42]);
        let x = g.stacked().unwrap();
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        let j1 = fisher_information(&x, &m, 3e-9, &prior).unwrap() - prior.precision();
        let j2 = fisher_information(&x, &m, 6e-9, &prior).unwrap() - prior.precision();
        assert!((&j1 / 4.0 - &j2).amax() < 1e-9 * j1.amax());
        let zero_hook = fisher_information_with(&x, &m, 3e-9, Some(&DVector::zeros(8)), &prior).unwrap();
        assert_eq!(zero_hook, fisher_information(&x, &m, 3e-9, &prior).unwrap());
    }

    #[test]
    fn hcrb_is_centimeter_scale() {
        let (g, m) = setup([1.92, 2.42]);
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        let cov = listener_block(&hcrb(&g.stacked().unwrap(), &m, 3e-9, &prior).unwrap());
        let e = error_ellipse(&cov, g.listener().unwrap(), 0.99).unwrap();
        assert!(e.semi_axes[0] > 0.05 && e.semi_axes[0] < 5.0, "{e:?}");
    }

    #[test]
    fn ellipse_examples() {
        let e = error_ellipse(&(Matrix2::identity() * 0.01), Point2::origin(), 0.99).unwrap();
        assert!((e.semi_axes[0] - 0.30348542587702926).abs() < 1e-12);
        assert_eq!(e.semi_axes[0], e.semi_axes[1]);
        assert!((chi2_quantile_2dof(0.99) - 9.2103).abs() < 1e-4);

        let e = error_ellipse(&Matrix2::new(4e-4, 0.0, 0.0, 1e-4), Point2::origin(), 0.99).unwrap();
        assert!((e.semi_axes[0] / e.semi_axes[1] - 2.0).abs() < 1e-12);
        assert_eq!(e.orientation_rad, 0.0);

        let e = error_ellipse(&Matrix2::new(1e-4, 0.0, 0.0, 4e-4), Point2::origin(), 0.99).unwrap();
        assert!((e.orientation_rad - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        assert!(matches!(
            error_ellipse(&Matrix2::new(1.0, 0.0, 0.0, -1.0), Point2::origin(), 0.99),
            Err(Error::NegativeEigenvalue(_))
        ));
        let cov = Matrix2::new(2e-3, 5e-4, 5e-4, 1e-3);
        let small = error_ellipse(&cov, Point2::origin(), 0.5).unwrap();
        let large = error_ellipse(&cov, Point2::origin(), 0.99).unwrap();
        assert!(small.area() < large.area());
    }

    #[test]
    fn rejects_bad_dimensions() {
        let (g, m) = setup([1.92, 2.42]);
        let (y, d) = clean_data(&g, &m);
        let prior = Prior::anchored(&g, 0.01, g.centroid(), 10.0).unwrap();
        assert!(map_cost(&DVector::zeros(6), &y, &d, &m, &prior).is_err());
        assert!(map_estimate(&y.rows(0, 5).into_owned(), &d, &m, &prior, None).is_err());
        assert!(Prior::new(DVector::zeros(2), DMatrix::zeros(2, 2)).is_err());
    }
}
