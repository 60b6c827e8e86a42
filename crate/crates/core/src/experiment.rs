//! Scenario configuration, built-in presets and end-to-end pipelines.
//!
//! Configuration is JSON. Every physical quantity carries its unit in the key
//! name (`_m`, `_ms`, `_ns`, `_ppm`) and is converted to SI once, in
//! [`Scenario::new`], which also runs every validation the library offers.
//!
//! A *fix* is one position estimate pooled over `batches_per_fix` consecutive
//! schedule passes. Each fix window is calibrated on its own (fresh skew
//! estimator), so windows are independent and Monte-Carlo runs parallelize
//! over them.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{DVector, Matrix2, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_run, CalibratedBatch, CalibrationOptions, CalibrationOutcome, RlsConfig, RlsTraceRow};
use crate::error::{Error, Result};
use crate::estimation::{
    error_ellipse, hcrb, listener_block, map_estimate, sample_covariance, ErrorEllipse, PositionEstimate, Prior,
};
use crate::network::{ranges_from_geometry, ClockParams, NetworkGeometry, NoiseParams, SPEED_OF_LIGHT};
use crate::schedule::{Schedule, ScheduleMatrices};
use crate::sim::{simulate_batch, simulate_batches, simulate_twr, MeasurementBatch, SimConfig, TwrRanges};

const NS: f64 = 1e-9;
const MS: f64 = 1e-3;
const PPM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub anchors_m: Vec<[f64; 2]>,
    /// True listener position; required to simulate, absent for captured data.
    #[serde(default)]
    pub listener_m: Option<[f64; 2]>,
    pub clocks: ClockConfig,
    pub noise: NoiseConfig,
    /// 1-based anchor transmission order.
    pub schedule: Vec<usize>,
    pub delay_ms: f64,
    pub n_batches: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub anchor_skews_ppm: Vec<f64>,
    #[serde(default)]
    pub listener_skew_ppm: f64,
    /// Per-node timestamp jitter.
    #[serde(default)]
    pub jitter_std_ns: f64,
    #[serde(default)]
    pub delay_err_sigma_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub channel_std_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "yes")]
    pub retrieval: bool,
    #[serde(default = "yes")]
    pub rls: bool,
    /// `null` disables screening.
    #[serde(default = "default_outlier_threshold_ns")]
    pub outlier_threshold_ns: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            retrieval: true,
            rls: true,
            outlier_threshold_ns: default_outlier_threshold_ns(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Measurement noise level assumed by the bound.
    pub sigma_ns: f64,
    pub batches_per_fix: usize,
    pub anchor_prior_std_m: f64,
    /// Defaults to the anchor centroid.
    pub listener_prior_mean_m: Option<[f64; 2]>,
    pub listener_prior_std_m: f64,
    pub confidence: f64,
    /// Fixes per position in Monte-Carlo reproduction runs.
    pub monte_carlo_fixes: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            sigma_ns: 3.0,
            batches_per_fix: 300,
            anchor_prior_std_m: 0.01,
            listener_prior_mean_m: None,
            listener_prior_std_m: 10.0,
            confidence: 0.99,
            monte_carlo_fixes: 1000,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_outlier_threshold_ns() -> Option<f64> {
    Some(100.0)
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        presets::fig6(0)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn finite_nonneg(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn finite_pos(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be finite and > 0, got {v}")))
    }
}

/// A validated configuration with all derived objects in SI units.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ExperimentConfig,
    geometry: NetworkGeometry,
    matrices: ScheduleMatrices,
    anchor_clocks: Vec<ClockParams>,
    listener_clock: ClockParams,
    noise: NoiseParams,
    calibration: CalibrationOptions,
    prior: Prior,
}

impl Scenario {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let geometry = NetworkGeometry::from_coords(&config.anchors_m, config.listener_m)?;
        if geometry.listener().is_some() {
            ranges_from_geometry(&geometry)?;
        }
        let n = geometry.n_anchors();

        let c = &config.clocks;
        if c.anchor_skews_ppm.len() != n {
            return Err(config_err(format!(
                "clocks.anchor_skews_ppm has {} entries for {n} anchors",
                c.anchor_skews_ppm.len()
            )));
        }
        let jitter = finite_nonneg("clocks.jitter_std_ns", c.jitter_std_ns)? * NS;
        let eps = finite_nonneg("clocks.delay_err_sigma_ns", c.delay_err_sigma_ns)? * NS;
        let anchor_clocks = c
            .anchor_skews_ppm
            .iter()
            .map(|s| ClockParams::new(s * PPM, jitter * jitter, eps))
            .collect::<Result<Vec<_>>>()?;
        // the listener never generates a delay
        let listener_clock = ClockParams::new(c.listener_skew_ppm * PPM, jitter * jitter, 0.0)?;
        let channel = finite_nonneg("noise.channel_std_ns", config.noise.channel_std_ns)? * NS;
        let noise = NoiseParams::new(channel * channel)?;

        let delay = finite_pos("delay_ms", config.delay_ms)? * MS;
        let schedule = Schedule::new(config.schedule.clone(), n, delay)?;
        let matrices = ScheduleMatrices::new(&schedule)?;
        if config.n_batches == 0 {
            return Err(config_err("n_batches must be >= 1"));
        }

        let cal = &config.calibration;
        let outlier_threshold = match cal.outlier_threshold_ns {
            Some(t) => Some(finite_pos("calibration.outlier_threshold_ns", t)? * NS),
            None => None,
        };
        let calibration = CalibrationOptions {
            retrieval: cal.retrieval,
            rls: cal.rls,
            outlier_threshold,
            rls_config: RlsConfig::default(),
        };

        let est = &config.estimation;
        finite_pos("estimation.sigma_ns", est.sigma_ns)?;
        if est.batches_per_fix == 0 {
            return Err(config_err("estimation.batches_per_fix must be >= 1"));
        }
        if est.monte_carlo_fixes < 3 {
            return Err(config_err("estimation.monte_carlo_fixes must be >= 3"));
        }
        if !(est.confidence > 0.0 && est.confidence < 1.0) {
            return Err(config_err(format!("estimation.confidence must lie in (0, 1), got {}", est.confidence)));
        }
        let anchor_std = finite_pos("estimation.anchor_prior_std_m", est.anchor_prior_std_m)?;
        let listener_std = finite_pos("estimation.listener_prior_std_m", est.listener_prior_std_m)?;
        let listener_mean = match est.listener_prior_mean_m {
            Some([x, y]) if x.is_finite() && y.is_finite() => Point2::new(x, y),
            Some(_) => return Err(Error::NonFinite("estimation.listener_prior_mean_m")),
            None => geometry.centroid(),
        };
        let prior = Prior::anchored(&geometry, anchor_std, listener_mean, listener_std)?;

        Ok(Self {
            config,
            geometry,
            matrices,
            anchor_clocks,
            listener_clock,
            noise,
            calibration,
            prior,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }
    pub fn geometry(&self) -> &NetworkGeometry {
        &self.geometry
    }
    pub fn matrices(&self) -> &ScheduleMatrices {
        &self.matrices
    }
    pub fn schedule(&self) -> &Schedule {
        self.matrices.schedule()
    }
    pub fn prior(&self) -> &Prior {
        &self.prior
    }
    pub fn calibration_options(&self) -> &CalibrationOptions {
        &self.calibration
    }
    pub fn batches_per_fix(&self) -> usize {
        self.config.estimation.batches_per_fix
    }
    pub fn confidence(&self) -> f64 {
        self.config.estimation.confidence
    }

    /// Per-pass noise level, s.
    pub fn sigma(&self) -> f64 {
        self.config.estimation.sigma_ns * NS
    }

    /// Noise level of a fix's averaged measurement vector, s.
    pub fn fix_sigma(&self) -> f64 {
        self.sigma() / (self.batches_per_fix() as f64).sqrt()
    }

    /// Simulation parameters; needs a listener position.
    pub fn sim_config(&self) -> Result<SimConfig> {
        if self.geometry.listener().is_none() {
            return Err(config_err("listener_m is required to simulate"));
        }
        Ok(SimConfig {
            geometry: self.geometry.clone(),
            anchor_clocks: self.anchor_clocks.clone(),
            listener_clock: self.listener_clock,
            noise: self.noise,
            schedule: self.schedule().clone(),
            n_batches: self.config.n_batches,
            rng_seed: self.config.rng_seed,
        })
    }

    /// True relative skews `skew_L - skew_i`.
    pub fn relative_skews(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.anchor_clocks.len(),
            self.anchor_clocks.iter().map(|c| self.listener_clock.skew - c.skew),
        )
    }

    pub fn with_config(&self, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<Self> {
        let mut config = self.config.clone();
        edit(&mut config);
        Self::new(config)
    }
}

/// Built-in scenarios.
pub mod presets {
    use super::*;

    pub const FIG6_ANCHORS: [[f64; 2]; 3] = [[0.0, 0.0], [10.33, 0.0], [4.90, 8.66]];
    pub const FIG6_LISTENERS: [[f64; 2]; 2] = [[1.92, 2.42], [-1.53, 4.73]];
    pub const FIG6_SCHEDULE: [usize; 7] = [1, 2, 3, 2, 1, 3, 1];

    /// Three anchors about 10 m apart, `delta = 3 ms`, `sigma = 3 ns` split
    /// evenly between per-node jitter and channel noise (2 x 1.5^2 + 2 x 1.5^2
    /// = 3^2 ns^2), retrieval and skew estimation on. Relative skews lie
    /// within +-10 ppm.
    pub fn fig6(position: usize) -> ExperimentConfig {
        ExperimentConfig {
            anchors_m: FIG6_ANCHORS.to_vec(),
            listener_m: Some(FIG6_LISTENERS[position]),
            clocks: ClockConfig {
                anchor_skews_ppm: vec![4.0, -6.0, 3.0],
                listener_skew_ppm: -2.0,
                jitter_std_ns: 1.5,
                delay_err_sigma_ns: 3.3,
            },
            noise: NoiseConfig { channel_std_ns: 1.5 },
            schedule: FIG6_SCHEDULE.to_vec(),
            delay_ms: 3.0,
            n_batches: 300,
            rng_seed: 20_170_601,
            calibration: CalibrationConfig::default(),
            estimation: EstimationConfig::default(),
            outputs: default_outputs(),
        }
    }

    /// Delay-retrieval comparison: no skew, `eps` of 3.3 ns, 0.3 ns residual
    /// noise, 10^4 passes.
    pub fn fig3() -> ExperimentConfig {
        let mut c = fig6(0);
        c.clocks = ClockConfig {
            anchor_skews_ppm: vec![0.0; 3],
            listener_skew_ppm: 0.0,
            jitter_std_ns: 0.15,
            delay_err_sigma_ns: 3.3,
        };
        c.noise.channel_std_ns = 0.15;
        c.schedule = vec![1, 2, 3, 2, 1, 3];
        c.n_batches = 10_000;
        c
    }

    /// Skew-estimator convergence: fig6 clocks, 500 passes in one session.
    pub fn fig4() -> ExperimentConfig {
        let mut c = fig6(0);
        c.n_batches = 500;
        c.estimation.batches_per_fix = 500;
        c
    }

    /// Skews drawn uniformly in +-`max_ppm` per node from `seed`, screening
    /// off (relative skews of up to 2 x `max_ppm` move timings by more than
    /// the 100 ns screening threshold at `delta = 3 ms`).
    pub fn random_skews(position: usize, max_ppm: f64, seed: u64) -> ExperimentConfig {
        let mut c = fig6(position);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        c.clocks.anchor_skews_ppm = (0..3).map(|_| rng.gen_range(-max_ppm..=max_ppm)).collect();
        c.clocks.listener_skew_ppm = rng.gen_range(-max_ppm..=max_ppm);
        c.calibration.outlier_threshold_ns = None;
        c.rng_seed = seed;
        c
    }

    /// Same data, no clock-error mitigation at all.
    pub fn uncalibrated(mut c: ExperimentConfig) -> ExperimentConfig {
        c.calibration.retrieval = false;
        c.calibration.rls = false;
        c
    }
}

pub fn simulate(scenario: &Scenario) -> Result<Vec<MeasurementBatch>> {
    simulate_batches(&scenario.sim_config()?, scenario.matrices())
}

/// Calibration of one fix window.
#[derive(Debug, Clone)]
pub struct WindowCalibration {
    pub window: usize,
    pub outcome: CalibrationOutcome,
}

/// Splits batches into fix windows by `index / batches_per_fix` and
/// calibrates every window independently.
pub fn calibrate(scenario: &Scenario, batches: &[MeasurementBatch]) -> Result<Vec<WindowCalibration>> {
    let k = scenario.batches_per_fix();
    let pairs = scenario.geometry().anchor_pair_ranges();
    let mut windows = Vec::new();
    let mut start = 0;
    while start < batches.len() {
        let window = batches[start].index / k;
        let len = batches[start..].iter().take_while(|b| b.index / k == window).count();
        let outcome = calibrate_run(
            &batches[start..start + len],
            scenario.matrices(),
            &pairs,
            scenario.calibration_options(),
        )?;
        windows.push(WindowCalibration { window, outcome });
        start += len;
    }
    Ok(windows)
}

pub fn calibrated_batches(windows: &[WindowCalibration]) -> Vec<CalibratedBatch> {
    windows.iter().flat_map(|w| w.outcome.batches.iter().cloned()).collect()
}

/// One pooled position estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Fix {
    pub window: usize,
    /// Accepted passes that went into the fix.
    pub n_batches: usize,
    /// `None` when every pass of the window was rejected.
    pub estimate: Option<PositionEstimate>,
}

impl Fix {
    pub fn converged_listener(&self) -> Option<Point2<f64>> {
        self.estimate.as_ref().filter(|e| e.converged).map(|e| e.listener)
    }
}

/// MAP estimate on the average of the accepted passes.
pub fn pooled_estimate<'a>(
    scenario: &Scenario,
    batches: impl IntoIterator<Item = &'a CalibratedBatch>,
) -> Result<(usize, Option<PositionEstimate>)> {
    let m = scenario.matrices().n_measurements();
    let mut y = DVector::zeros(m);
    let mut d = DVector::zeros(m);
    let mut n = 0usize;
    for b in batches.into_iter().filter(|b| !b.rejected) {
        y += &b.y_cal;
        d += &b.delays;
        n += 1;
    }
    if n == 0 {
        return Ok((0, None));
    }
    let (y, d) = (y / n as f64, d / n as f64);
    let est = map_estimate(&y, &d, scenario.matrices(), scenario.prior(), None)?;
    Ok((n, Some(est)))
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub fixes: Vec<Fix>,
    /// Estimate from all accepted passes at once.
    pub pooled: Option<PositionEstimate>,
    /// Scatter ellipse of the converged fixes (needs at least three).
    pub ellipse: Option<ErrorEllipse>,
}

pub fn localize(scenario: &Scenario, batches: &[CalibratedBatch]) -> Result<Localization> {
    let k = scenario.batches_per_fix();
    let mut groups: Vec<(usize, Vec<&CalibratedBatch>)> = Vec::new();
    for b in batches.iter().filter(|b| !b.rejected) {
        let w = b.index / k;
        match groups.last_mut() {
            Some((lw, g)) if *lw == w => g.push(b),
            _ => groups.push((w, vec![b])),
        }
    }
    let fixes = groups
        .par_iter()
        .map(|(window, g)| {
            let (n_batches, estimate) = pooled_estimate(scenario, g.iter().copied())?;
            Ok(Fix {
                window: *window,
                n_batches,
                estimate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, pooled) = pooled_estimate(scenario, batches)?;
    let ellipse = scatter_ellipse(&fixes, scenario.confidence())?;
    Ok(Localization { fixes, pooled, ellipse })
}

/// Ellipse of the converged fixes around their mean.
pub fn scatter_ellipse(fixes: &[Fix], confidence: f64) -> Result<Option<ErrorEllipse>> {
    let pts: Vec<_> = fixes.iter().filter_map(Fix::converged_listener).collect();
    if pts.len() < 3 {
        return Ok(None);
    }
    let (mean, cov) = sample_covariance(&pts);
    error_ellipse(&cov, mean, confidence).map(Some)
}

/// HCRB listener covariance for one fix at the true geometry.
pub fn bound_covariance(scenario: &Scenario) -> Result<Matrix2<f64>> {
    let x = scenario.geometry().stacked()?;
    let b = hcrb(&x, scenario.matrices(), scenario.fix_sigma(), scenario.prior())?;
    Ok(listener_block(&b))
}

pub fn bound(scenario: &Scenario) -> Result<ErrorEllipse> {
    let cov = bound_covariance(scenario)?;
    let center = scenario.geometry().listener().ok_or(Error::MissingListener)?;
    error_ellipse(&cov, center, scenario.confidence())
}

/// Simulates, calibrates and estimates `n_fixes` independent fixes in
/// parallel. Fix `w` uses passes `w*K .. (w+1)*K` of the scenario's seed, so
/// the result equals `simulate -> calibrate -> localize` on the same passes.
pub fn monte_carlo(scenario: &Scenario, n_fixes: usize) -> Result<Vec<Fix>> {
    let sim = scenario.sim_config()?;
    let k = scenario.batches_per_fix();
    let pairs = scenario.geometry().anchor_pair_ranges();
    (0..n_fixes)
        .into_par_iter()
        .map(|w| {
            let batches = (w * k..(w + 1) * k)
                .map(|i| simulate_batch(&sim, scenario.matrices(), i))
                .collect::<Result<Vec<_>>>()?;
            let outcome = calibrate_run(&batches, scenario.matrices(), &pairs, scenario.calibration_options())?;
            let (n_batches, estimate) = pooled_estimate(scenario, &outcome.batches)?;
            Ok(Fix {
                window: w,
                n_batches,
                estimate,
            })
        })
        .collect()
}

/// Monte-Carlo summary of a set of fixes against the truth.
#[derive(Debug, Clone)]
pub struct FixStatistics {
    pub n_fixes: usize,
    pub n_converged: usize,
    pub mean: Point2<f64>,
    pub covariance: Matrix2<f64>,
    /// Distance from the mean fix to the truth, m.
    pub bias: f64,
}

pub fn fix_statistics(fixes: &[Fix], truth: Point2<f64>) -> Option<FixStatistics> {
    let pts: Vec<_> = fixes.iter().filter_map(Fix::converged_listener).collect();
    if pts.len() < 2 {
        return None;
    }
    let (mean, covariance) = sample_covariance(&pts);
    Some(FixStatistics {
        n_fixes: fixes.len(),
        n_converged: pts.len(),
        mean,
        covariance,
        bias: (mean - truth).norm(),
    })
}

/// Least-squares line through `(x, y)` pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Noise-free TWR skew error `y3_12 + y3_21 - 2 rho12 / c - 2 delta` for each
/// delay, with node 3 on the perpendicular bisector of a `rho12` baseline.
pub fn twr_skew_sweep(skews: [f64; 3], rho12: f64, deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let clocks = skews
        .iter()
        .map(|&s| ClockParams::new(s, 0.0, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let ranges = TwrRanges {
        rho12,
        rho13: rho12,
        rho23: rho12,
    };
    let noise = NoiseParams::new(0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(deltas
        .iter()
        .map(|&delta| {
            let o = simulate_twr(&ranges, [&clocks[0], &clocks[1], &clocks[2]], &noise, delta, &mut rng);
            (delta, o.y3_12 + o.y3_21 - 2.0 * rho12 / SPEED_OF_LIGHT - 2.0 * delta)
        })
        .collect())
}

/// Residuals `y - S rho / c - D` of every measurement, once with the nominal
/// delays and once with the delays carried in the payload.
#[derive(Debug, Clone)]
pub struct RetrievalResiduals {
    pub without: Vec<f64>,
    pub with: Vec<f64>,
}

pub fn retrieval_residuals(scenario: &Scenario, batches: &[MeasurementBatch]) -> Result<RetrievalResiduals> {
    let rho = ranges_from_geometry(scenario.geometry())?;
    let tof = scenario.matrices().s() * rho.values() / SPEED_OF_LIGHT;
    let delta = scenario.schedule().nominal_delay();
    let mut without = Vec::with_capacity(batches.len() * tof.len());
    let mut with = Vec::with_capacity(batches.len() * tof.len());
    for b in batches {
        let actual = b
            .delta_actual
            .as_ref()
            .ok_or_else(|| Error::Data {
                line: 0,
                msg: format!("batch {} carries no delay payload", b.index),
            })?;
        for k in 0..tof.len() {
            without.push(b.y[k] - tof[k] - delta);
            with.push(b.y[k] - tof[k] - actual[k]);
        }
    }
    Ok(RetrievalResiduals { without, with })
}

/// Sample mean and standard deviation (`1/(n-1)`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Skew-estimator trace of one session of `n_batches` passes.
pub fn rls_session(scenario: &Scenario) -> Result<Vec<RlsTraceRow>> {
    let batches = simulate(scenario)?;
    let mut opts = *scenario.calibration_options();
    opts.rls = true;
    let outcome = calibrate_run(
        &batches,
        scenario.matrices(),
        &scenario.geometry().anchor_pair_ranges(),
        &opts,
    )?;
    Ok(outcome.trace)
}

/// Total variance (sum over anchors) of the skew estimate after each update,
/// across sessions seeded `seed0, seed0 + 1, ...`. Truncated to the shortest
/// session.
pub fn rls_variance_curve(scenario: &Scenario, n_seeds: u64) -> Result<Vec<f64>> {
    let seed0 = scenario.config().rng_seed;
    let traces = (0..n_seeds)
        .into_par_iter()
        .map(|s| rls_session(&scenario.with_config(|c| c.rng_seed = seed0.wrapping_add(s))?))
        .collect::<Result<Vec<_>>>()?;
    let len = traces.iter().map(Vec::len).min().unwrap_or(0);
    let n = traces.len() as f64;
    Ok((0..len)
        .map(|i| {
            let mean = traces.iter().fold(DVector::zeros(scenario.geometry().n_anchors()), |acc, t| {
                acc + &t[i].theta_hat
            }) / n;
            traces
                .iter()
                .map(|t| (&t[i].theta_hat - &mean).norm_squared())
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
    Fig6,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::Fig2, Figure::Fig3, Figure::Fig4, Figure::Fig6];
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig6 => "fig6",
        })
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| config_err(format!("unknown figure {s:?}; expected fig2, fig3, fig4 or fig6")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(position: usize) -> Scenario {
        let mut c = presets::fig6(position);
        c.n_batches = 40;
        c.estimation.batches_per_fix = 10;
        Scenario::new(c).unwrap()
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c = presets::fig6(1);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let minimal = r#"{
            "anchors_m": [[0,0],[10,0],[5,8]],
            "clocks": {"anchor_skews_ppm": [1,2,3]},
            "noise": {},
            "schedule": [1,2,3,2,1,3],
            "delay_ms": 3,
            "n_batches": 5,
            "rng_seed": 1,
            "calibration": {"outlier_threshold_ns": null}
        }"#;
        let c = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(c.calibration.outlier_threshold_ns, None);
        assert!(c.calibration.rls);
        assert_eq!(c.estimation, EstimationConfig::default());
        let s = Scenario::new(c).unwrap();
        assert!(s.sim_config().is_err());
        assert_eq!(s.prior().mu()[6], 5.0);
    }

    #[test]
    fn validation_messages_are_specific() {
        let bad = |edit: fn(&mut ExperimentConfig), needle: &str| {
            let mut c = presets::fig6(0);
            edit(&mut c);
            let msg = Scenario::new(c).unwrap_err().to_string();
            assert!(msg.contains(needle), "{msg:?} lacks {needle:?}");
        };
        bad(|c| c.anchors_m.truncate(2), "N >= 3");
        bad(|c| c.anchors_m[2] = [5.0, 0.0], "collinear");
        bad(|c| c.listener_m = Some([0.0, 0.0]), "zero range");
        bad(|c| c.clocks.anchor_skews_ppm.truncate(2), "anchor_skews_ppm");
        bad(|c| c.clocks.anchor_skews_ppm[0] = 5e4, "skew");
        bad(|c| c.clocks.jitter_std_ns = -1.0, "jitter_std_ns");
        bad(|c| c.clocks.delay_err_sigma_ns = f64::NAN, "delay_err_sigma_ns");
        bad(|c| c.noise.channel_std_ns = -0.1, "channel_std_ns");
        bad(|c| c.schedule = vec![1, 1, 2, 3], "repeated consecutive sender");
        bad(|c| c.schedule = vec![1, 2, 1, 2], "schedule");
        bad(|c| c.schedule = vec![1, 2, 4], "schedule");
        bad(|c| c.delay_ms = 0.0, "delay_ms");
        bad(|c| c.n_batches = 0, "n_batches");
        bad(|c| c.calibration.outlier_threshold_ns = Some(-5.0), "outlier_threshold_ns");
        bad(|c| c.estimation.sigma_ns = 0.0, "sigma_ns");
        bad(|c| c.estimation.batches_per_fix = 0, "batches_per_fix");
        bad(|c| c.estimation.confidence = 1.0, "confidence");
        bad(|c| c.estimation.anchor_prior_std_m = 0.0, "anchor_prior_std_m");
        bad(|c| c.estimation.listener_prior_mean_m = Some([f64::INFINITY, 0.0]), "listener_prior_mean_m");
        assert!(ExperimentConfig::from_json(r#"{"anchors_m": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn monte_carlo_equals_staged_pipeline() {
        let s = small(1);
        let batches = simulate(&s).unwrap();
        let windows = calibrate(&s, &batches).unwrap();
        assert_eq!(windows.len(), 4);
        let loc = localize(&s, &calibrated_batches(&windows)).unwrap();
        let mc = monte_carlo(&s, 4).unwrap();
        assert_eq!(loc.fixes, mc);
        assert!(loc.pooled.is_some());
        assert!(loc.ellipse.is_some());
    }

    #[test]
    fn window_calibration_restarts_the_estimator() {
        let s = small(0);
        let windows = calibrate(&s, &simulate(&s).unwrap()).unwrap();
        for w in &windows {
            assert_eq!(w.outcome.trace[0].n, 1);
            assert_eq!(w.outcome.batches.len(), 10);
        }
    }

    #[test]
    fn bound_scales_with_pooling() {
        let a = bound_covariance(&small(0)).unwrap();
        let b = bound_covariance(&small(0).with_config(|c| c.estimation.batches_per_fix = 40).unwrap()).unwrap();
        // anchor prior keeps this from being exactly 4x
        let ratio = a.trace() / b.trace();
        assert!(ratio > 3.5 && ratio <= 4.0 + 1e-9, "{ratio}");
    }

    #[test]
    fn linear_fit_recovers_line() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64 - 1.0)).collect();
        let f = linear_fit(&pts);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn figure_names() {
        for f in Figure::ALL {
            assert_eq!(f.to_string().parse::<Figure>().unwrap(), f);
        }
        assert!("fig5".parse::<Figure>().is_err());
    }
}
