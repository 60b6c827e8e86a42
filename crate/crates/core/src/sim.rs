//! Synthetic measurements from the full clock-error model.
//!
//! Every node runs on `C = (1 + skew) t`. A responder waits `delta + eps`
//! before answering; timestamps carry white jitter and the channel adds white
//! noise. Batches are reproducible: batch `k` of a run always draws from the
//! stream `(seed, k)`, independent of how many threads produced the run.

use nalgebra::{DVector, Point2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{
    ranges_from_geometry, ClockParams, NetworkGeometry, NoiseParams, RangeVector, SPEED_OF_LIGHT,
};
use crate::schedule::{Schedule, ScheduleMatrices};

fn gauss<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        sd * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Two-way ranging between nodes 1 and 2 while node 3 listens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwrObservation {
    /// Round trip measured by node 1.
    pub y1: f64,
    /// Round trip measured by node 2.
    pub y2: f64,
    pub y3_12: f64,
    pub y3_21: f64,
    /// Delays actually generated by nodes 1 and 2.
    pub delta1: f64,
    pub delta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwrRanges {
    pub rho12: f64,
    pub rho13: f64,
    pub rho23: f64,
}

pub fn simulate_twr<R: Rng + ?Sized>(
    ranges: &TwrRanges,
    clocks: [&ClockParams; 3],
    noise: &NoiseParams,
    delta: f64,
    rng: &mut R,
) -> TwrObservation {
    let [c1, c2, c3] = clocks;
    let TwrRanges { rho12, rho13, rho23 } = *ranges;
    let c = SPEED_OF_LIGHT;
    let delta1 = delta + gauss(rng, c1.delay_err_sigma);
    let delta2 = delta + gauss(rng, c2.delay_err_sigma);
    let sd = |a: &ClockParams, b: &ClockParams| noise.measurement_var(a, b).sqrt();

    let y1 = 2.0 * rho12 / c * (1.0 + c1.skew) + delta2 * (1.0 + c1.skew - c2.skew) + gauss(rng, sd(c1, c2));
    let y2 = 2.0 * rho12 / c * (1.0 + c2.skew) + delta1 * (1.0 + c2.skew - c1.skew) + gauss(rng, sd(c1, c2));
    let y3_12 = (rho12 + rho23 - rho13) / c * (1.0 + c3.skew)
        + delta2 * (1.0 + c3.skew - c2.skew)
        + gauss(rng, sd(c2, c3));
    let y3_21 = (rho12 + rho13 - rho23) / c * (1.0 + c3.skew)
        + delta1 * (1.0 + c3.skew - c1.skew)
        + gauss(rng, sd(c1, c3));
    TwrObservation {
        y1,
        y2,
        y3_12,
        y3_21,
        delta1,
        delta2,
    }
}

/// Ground truth attached to simulated batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// Relative skews `skew_L - skew_i`, one per anchor.
    pub theta: DVector<f64>,
    pub listener: Point2<f64>,
}

/// One pass of the schedule as seen by the listener.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub index: usize,
    /// Reception time differences, seconds.
    pub y: DVector<f64>,
    /// Delays reported in the transmitted payload, if received.
    pub delta_actual: Option<DVector<f64>>,
    pub truth: Option<Truth>,
}

impl MeasurementBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub geometry: NetworkGeometry,
    pub anchor_clocks: Vec<ClockParams>,
    pub listener_clock: ClockParams,
    pub noise: NoiseParams,
    pub schedule: Schedule,
    pub n_batches: usize,
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.geometry.n_anchors();
        if self.anchor_clocks.len() != n {
            return Err(Error::DimensionMismatch {
                what: "anchor clocks",
                expected: n,
                got: self.anchor_clocks.len(),
            });
        }
        if self.schedule.n_anchors() != n {
            return Err(Error::DimensionMismatch {
                what: "schedule anchors",
                expected: n,
                got: self.schedule.n_anchors(),
            });
        }
        if self.geometry.listener().is_none() {
            return Err(Error::MissingListener);
        }
        if self.n_batches == 0 {
            return Err(Error::Config("n_batches must be >= 1".into()));
        }
        Ok(())
    }

    pub fn relative_skews(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.anchor_clocks.len(),
            self.anchor_clocks.iter().map(|c| self.listener_clock.skew - c.skew),
        )
    }

    pub fn ranges(&self) -> Result<RangeVector> {
        ranges_from_geometry(&self.geometry)
    }
}

/// Independent stream for batch `index` of a run seeded with `seed`.
pub fn batch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_consistent(cfg: &SimConfig, matrices: &ScheduleMatrices) -> Result<()> {
    cfg.validate()?;
    if matrices.schedule() != &cfg.schedule {
        return Err(Error::InvalidSchedule(
            "schedule matrices were built for a different schedule".into(),
        ));
    }
    Ok(())
}

/// Noise-free expectation of `y`: `(1/c)(1 + skew_L) S rho + delta 1 + R D`.
pub fn mean_measurements(cfg: &SimConfig, matrices: &ScheduleMatrices) -> Result<DVector<f64>> {
    check_consistent(cfg, matrices)?;
    let rho = cfg.ranges()?;
    let theta = cfg.relative_skews();
    let delta = cfg.schedule.nominal_delay();
    let tof = matrices.s() * rho.values() / SPEED_OF_LIGHT;
    Ok(DVector::from_fn(matrices.n_measurements(), |k, _| {
        let th = theta[cfg.schedule.delay_holder(k) - 1];
        tof[k] * (1.0 + cfg.listener_clock.skew) + delta + th * delta
    }))
}

/// One schedule pass drawn from the given rng.
pub fn simulate_batch_with<R: Rng + ?Sized>(
    cfg: &SimConfig,
    matrices: &ScheduleMatrices,
    index: usize,
    rng: &mut R,
) -> Result<MeasurementBatch> {
    check_consistent(cfg, matrices)?;
    let rho = cfg.ranges()?;
    let theta = cfg.relative_skews();
    let listener = &cfg.listener_clock;
    let delta = cfg.schedule.nominal_delay();
    let tof = matrices.s() * rho.values() / SPEED_OF_LIGHT;
    let m = matrices.n_measurements();

    let mut y = DVector::zeros(m);
    let mut delta_actual = DVector::zeros(m);
    for k in 0..m {
        let holder = cfg.schedule.delay_holder(k);
        let clock = &cfg.anchor_clocks[holder - 1];
        let th = theta[holder - 1];
        let eps = gauss(rng, clock.delay_err_sigma);
        let eta = gauss(rng, cfg.noise.measurement_var(clock, listener).sqrt());
        // (1/c) S rho + D + (1/c) skew_L S rho + R D + (I + R) eps + eta
        y[k] = tof[k] + delta + listener.skew * tof[k] + th * delta + (1.0 + th) * eps + eta;
        delta_actual[k] = delta + eps;
    }
    Ok(MeasurementBatch {
        index,
        y,
        delta_actual: Some(delta_actual),
        truth: Some(Truth {
            theta,
            listener: cfg.geometry.listener().expect("validated"),
        }),
    })
}

/// Batch `index` of the run, drawn from the stream `(cfg.rng_seed, index)`.
pub fn simulate_batch(cfg: &SimConfig, matrices: &ScheduleMatrices, index: usize) -> Result<MeasurementBatch> {
    simulate_batch_with(cfg, matrices, index, &mut batch_rng(cfg.rng_seed, index))
}

/// All `cfg.n_batches` batches, generated in parallel.
pub fn simulate_batches(cfg: &SimConfig, matrices: &ScheduleMatrices) -> Result<Vec<MeasurementBatch>> {
    check_consistent(cfg, matrices)?;
    (0..cfg.n_batches)
        .into_par_iter()
        .map(|k| simulate_batch(cfg, matrices, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: f64 = SPEED_OF_LIGHT;

    fn cfg_with(
        anchor_skews: [f64; 3],
        listener_skew: f64,
        jitter_var: f64,
        eps_sigma: f64,
        order: Vec<usize>,
    ) -> SimConfig {
        let geometry = NetworkGeometry::from_coords(
            &[[0.0, 0.0], [10.33, 0.0], [4.90, 8.66]],
            Some([1.92, 2.42]),
        )
        .unwrap();
        SimConfig {
            geometry,
            anchor_clocks: anchor_skews
                .iter()
                .map(|&s| ClockParams::new(s, jitter_var, eps_sigma).unwrap())
                .collect(),
            listener_clock: ClockParams::new(listener_skew, jitter_var, 0.0).unwrap(),
            noise: NoiseParams::new(jitter_var).unwrap(),
            schedule: Schedule::new(order, 3, 3e-3).unwrap(),
            n_batches: 4,
            rng_seed: 5,
        }
    }

    #[test]
    fn twr_noiseless_round_trip() {
        let ideal = ClockParams::ideal();
        let r = TwrRanges {
            rho12: 3.0,
            rho13: 4.0,
            rho23: 5.0,
        };
        let obs = simulate_twr(&r, [&ideal; 3], &NoiseParams::default(), 3e-3, &mut batch_rng(0, 0));
        assert_eq!(obs.y1, 6.0 / C + 0.003);
        assert!((obs.y1 - 0.003000020013845712).abs() < 1e-18);
        assert_eq!(obs.y1, obs.y2);
        // the listener sum carries both response delays
        assert!((obs.y3_12 + obs.y3_21 - (obs.y1 + obs.delta1)).abs() < 1e-18);
    }

    #[test]
    fn twr_listener_sum_with_listener_skew() {
        let ideal = ClockParams::ideal();
        let c3 = ClockParams::new(1.7e-5, 0.0, 0.0).unwrap();
        let r = TwrRanges {
            rho12: 7.0,
            rho13: 4.0,
            rho23: 5.0,
        };
        let delta = 5e-3;
        let obs = simulate_twr(&r, [&ideal, &ideal, &c3], &NoiseParams::default(), delta, &mut batch_rng(0, 0));
        let expected = 2.0 * 7.0 / C * (1.0 + 1.7e-5) + delta * (2.0 + 2.0 * 1.7e-5);
        assert!((obs.y3_12 + obs.y3_21 - expected).abs() < 1e-17);
    }

    #[test]
    fn zero_error_batch_is_approximate_model() {
        let cfg = cfg_with([0.0; 3], 0.0, 0.0, 0.0, vec![1, 2, 3, 2, 1, 3, 1]);
        let mats = ScheduleMatrices::new(&cfg.schedule).unwrap();
        let b = simulate_batch(&cfg, &mats, 0).unwrap();
        let rho = cfg.ranges().unwrap();
        let model = mats.s() * rho.values() / C + DVector::from_element(6, 3e-3);
        assert_eq!(b.y, model);
        assert_eq!(b.delta_actual.unwrap(), DVector::from_element(6, 3e-3));
    }

    #[test]
    fn skew_bias_follows_reference_rd_vector() {
        let (t1, t2, t3) = (4e-6, -9e-6, 1.3e-5);
        let listener = 2e-6;
        let cfg = cfg_with(
            [listener - t1, listener - t2, listener - t3],
            listener,
            0.0,
            0.0,
            vec![1, 2, 3, 2, 1, 3],
        );
        let mats = ScheduleMatrices::new(&cfg.schedule).unwrap();
        let b = simulate_batch(&cfg, &mats, 0).unwrap();
        let rho = cfg.ranges().unwrap();
        let base = mats.s() * rho.values() / C * (1.0 + listener);
        let bias = &b.y - base - DVector::from_element(5, 3e-3);
        let expected = [t2, t3, t2, t1, t3].map(|t| t * 3e-3);
        for k in 0..5 {
            assert!((bias[k] - expected[k]).abs() < 1e-17, "k={k}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = cfg_with([1e-5, -1e-5, 0.0], 0.0, 1e-18, 3e-9, vec![1, 2, 3, 2, 1, 3, 1]);
        let mats = ScheduleMatrices::new(&cfg.schedule).unwrap();
        let a = simulate_batches(&cfg, &mats).unwrap();
        let b = simulate_batches(&cfg, &mats).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].y, a[1].y);
        assert_eq!(a[2], simulate_batch(&cfg, &mats, 2).unwrap());
    }

    #[test]
    fn noise_variance_matches_model() {
        // sigma^2 = 2 sigma_j^2 + 2 sigma_c^2 with sigma_j = sigma_c = 1.5 ns
        let var = 2.25e-18;
        let cfg = SimConfig {
            n_batches: 10_000,
            ..cfg_with([0.0; 3], 0.0, var, 0.0, vec![1, 2, 3, 2, 1, 3, 1])
        };
        let mats = ScheduleMatrices::new(&cfg.schedule).unwrap();
        let mean = mean_measurements(&cfg, &mats).unwrap();
        let batches = simulate_batches(&cfg, &mats).unwrap();
        let sigma2 = 4.0 * var;
        for k in 0..6 {
            let s2 = batches.iter().map(|b| (b.y[k] - mean[k]).powi(2)).sum::<f64>() / batches.len() as f64;
            assert!((s2 / sigma2 - 1.0).abs() < 0.05, "k={k} ratio={}", s2 / sigma2);
        }
    }

    #[test]
    fn skew_term_dominates_noise() {
        let cfg = cfg_with([1e-5, -1e-5, 5e-6], 0.0, 0.0, 0.0, vec![1, 2, 3, 2, 1, 3, 1]);
        let mats = ScheduleMatrices::new(&cfg.schedule).unwrap();
        let mean = mean_measurements(&cfg, &mats).unwrap();
        let rho = cfg.ranges().unwrap();
        let rd = mean - mats.s() * rho.values() / C - DVector::from_element(6, 3e-3);
        // 10 ppm over 3 ms is 30 ns, an order of magnitude above sigma = 3 ns
        assert!(rd.amax() >= 10.0 * 3e-9 * 0.99);
    }

    #[test]
    fn rejects_mismatched_schedule() {
        let cfg = cfg_with([0.0; 3], 0.0, 0.0, 0.0, vec![1, 2, 3, 2, 1, 3, 1]);
        let other = Schedule::new(vec![1, 2, 3, 2, 1, 3], 3, 3e-3).unwrap();
        let mats = ScheduleMatrices::new(&other).unwrap();
        assert!(simulate_batch(&cfg, &mats, 0).is_err());
    }
}
