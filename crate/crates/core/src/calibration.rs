//! Clock-error mitigation.
//!
//! Two independent corrections are applied to each schedule pass:
//!
//! * **Delay retrieval.** Each responder reports the delay it actually
//!   generated; using those values instead of the nominal `delta` removes the
//!   delay-resolution error `eps` from the measurement.
//! * **Inline skew estimation.** With anchor positions known, the anchor-pair
//!   block of `S+ (y - D)` differs from `rho / c` only by a term linear in the
//!   relative skews `theta = skew_L - skew_i`. That residual feeds a recursive
//!   least-squares estimator, and the estimated skew bias is subtracted from
//!   the measurements.
//!
//! Batches whose timings stray more than a threshold from the reported delay
//! are discarded as a whole before any of this happens.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::network::{n_pairs, SPEED_OF_LIGHT};
use crate::schedule::ScheduleMatrices;
use crate::sim::MeasurementBatch;

/// Default front-end screening threshold, seconds.
pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 100e-9;

/// Delays to use for a batch, and whether they came from the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayVector {
    pub values: DVector<f64>,
    pub retrieved: bool,
}

/// Replaces the nominal delay with the delays carried in the payload. Falls
/// back to `nominal_delay * 1` (and `retrieved = false`) when the payload is
/// missing or has the wrong length.
pub fn apply_delay_retrieval(batch: &MeasurementBatch, nominal_delay: f64) -> DelayVector {
    match &batch.delta_actual {
        Some(d) if d.len() == batch.y.len() => DelayVector {
            values: d.clone(),
            retrieved: true,
        },
        _ => nominal_delays(batch.y.len(), nominal_delay),
    }
}

pub fn nominal_delays(m: usize, nominal_delay: f64) -> DelayVector {
    DelayVector {
        values: DVector::from_element(m, nominal_delay),
        retrieved: false,
    }
}

/// `true` when the batch must be discarded: some `|y_k - D_k|` exceeds the
/// threshold.
pub fn reject_outliers(y: &DVector<f64>, delays: &DVector<f64>, threshold: f64) -> bool {
    y.iter().zip(delays.iter()).any(|(y, d)| (y - d).abs() > threshold)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

/// Skew observation `d = Pi' (S+ (y - D) - rho / c)` on the anchor-pair block.
///
/// Only the anchor-pair ranges are needed: `Pi S+ S = Pi` means the listener
/// block never reaches these components. In expectation `d = G^T theta`.
pub fn skew_residual(
    y: &DVector<f64>,
    matrices: &ScheduleMatrices,
    anchor_pair_ranges: &DVector<f64>,
    delays: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = matrices.n_measurements();
    check_len("measurement vector", m, y.len())?;
    check_len("delay vector", m, delays.len())?;
    check_len("anchor pair ranges", n_pairs(matrices.n_anchors()), anchor_pair_ranges.len())?;
    Ok(matrices.pair_pinv() * (y - delays) - anchor_pair_ranges / SPEED_OF_LIGHT)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlsConfig {
    /// Initial covariance scale, `P_0 = p0 I`.
    pub p0: f64,
    /// Variance the observation residuals are normalized by, s^2. The
    /// recursion's innovation covariance is identity in these units.
    pub obs_var: f64,
}

impl Default for RlsConfig {
    fn default() -> Self {
        Self {
            p0: 1e6,
            obs_var: 1e-18,
        }
    }
}

/// Recursive least-squares state with unit forgetting factor.
///
/// `p_inv` is the information matrix `P^-1`. The recursion runs in
/// information form, which is algebraically the gain form
/// `K = P G (I + G^T P G)^-1` but only ever factors an `N x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub theta_hat: DVector<f64>,
    pub p_inv: DMatrix<f64>,
    pub n_updates: usize,
    obs_var: f64,
}

impl RlsState {
    pub fn new(n_anchors: usize, config: RlsConfig) -> Self {
        Self {
            theta_hat: DVector::zeros(n_anchors),
            p_inv: DMatrix::identity(n_anchors, n_anchors) / config.p0,
            n_updates: 0,
            obs_var: config.obs_var,
        }
    }

    /// Estimate covariance `P`, in units of `obs_var`.
    pub fn covariance(&self) -> DMatrix<f64> {
        solve_spd(&self.p_inv, &DMatrix::identity(self.p_inv.nrows(), self.p_inv.nrows()))
    }

    /// One update with system matrix `g` (`N x N(N-1)/2`) and observation `d`.
    pub fn update(&mut self, g: &DMatrix<f64>, d: &DVector<f64>) -> Result<()> {
        let n = self.theta_hat.len();
        check_len("G rows", n, g.nrows())?;
        check_len("skew observation", g.ncols(), d.len())?;
        let prediction = g.transpose() * &self.theta_hat;
        let scaled = g / self.obs_var.sqrt();
        self.p_inv += &scaled * scaled.transpose();
        self.p_inv = (&self.p_inv + self.p_inv.transpose()) * 0.5;
        // K (d - G^T theta) with K = P_{n+1} G / obs_var
        let innovation = (d - prediction) / self.obs_var;
        let step = solve_spd(&self.p_inv, &DMatrix::from_column_slice(n, 1, (g * innovation).as_slice()));
        self.theta_hat += step.column(0);
        self.n_updates += 1;
        Ok(())
    }
}

pub fn rls_update(state: &RlsState, g: &DMatrix<f64>, d: &DVector<f64>) -> Result<RlsState> {
    let mut next = state.clone();
    next.update(g, d)?;
    Ok(next)
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`, adding
/// `1e-12 * scale * I` when the plain factorization fails.
fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::<f64, Dyn>::new(a.clone()) {
        return ch.solve(b);
    }
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let reg = a + DMatrix::identity(a.nrows(), a.ncols()) * (1e-12 * scale);
    match Cholesky::<f64, Dyn>::new(reg.clone()) {
        Some(ch) => ch.solve(b),
        None => crate::schedule::pseudoinverse(&reg) * b,
    }
}

/// Gain sequence for a fixed `G`. With `G` fixed the gains do not depend on
/// the data, so they can be computed ahead of time and replayed.
#[derive(Debug, Clone)]
pub struct PrecomputedGains {
    gains: Vec<DMatrix<f64>>,
    g: DMatrix<f64>,
}

impl PrecomputedGains {
    pub fn new(n_anchors: usize, g: &DMatrix<f64>, n_steps: usize, config: RlsConfig) -> Self {
        let mut p_inv = DMatrix::identity(n_anchors, n_anchors) / config.p0;
        let info = g * g.transpose() / config.obs_var;
        let gains = (0..n_steps)
            .map(|_| {
                p_inv += &info;
                solve_spd(&p_inv, g) / config.obs_var
            })
            .collect();
        Self { gains, g: g.clone() }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Applies gain `step` to the running estimate.
    pub fn apply(&self, step: usize, theta_hat: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        theta_hat + &self.gains[step] * (d - self.g.transpose() * theta_hat)
    }
}

/// One batch after calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedBatch {
    pub index: usize,
    pub y_cal: DVector<f64>,
    /// Delays used for this batch (retrieved or nominal).
    pub delays: DVector<f64>,
    pub retrieved: bool,
    pub d_n: Option<DVector<f64>>,
    pub rejected: bool,
}

/// Subtracts the estimated skew bias `Diag(D) A theta_hat` from `y`.
pub fn calibrate_measurements(
    y: &DVector<f64>,
    matrices: &ScheduleMatrices,
    theta_hat: &DVector<f64>,
    delays: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = matrices.n_measurements();
    check_len("measurement vector", m, y.len())?;
    check_len("delay vector", m, delays.len())?;
    check_len("skew estimate", matrices.n_anchors(), theta_hat.len())?;
    let bias = (matrices.selection() * theta_hat).component_mul(delays);
    Ok(y - bias)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub retrieval: bool,
    pub rls: bool,
    /// `None` disables screening.
    pub outlier_threshold: Option<f64>,
    pub rls_config: RlsConfig,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            retrieval: true,
            rls: true,
            outlier_threshold: Some(DEFAULT_OUTLIER_THRESHOLD),
            rls_config: RlsConfig::default(),
        }
    }
}

/// One row of the estimator trace: the state after update `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsTraceRow {
    pub n: usize,
    pub batch: usize,
    pub theta_hat: DVector<f64>,
    pub trace_p: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub batches: Vec<CalibratedBatch>,
    pub trace: Vec<RlsTraceRow>,
    pub state: RlsState,
}

impl CalibrationOutcome {
    pub fn accepted(&self) -> impl Iterator<Item = &CalibratedBatch> {
        self.batches.iter().filter(|b| !b.rejected)
    }

    pub fn n_rejected(&self) -> usize {
        self.batches.iter().filter(|b| b.rejected).count()
    }
}

/// Screens, estimates skews over all accepted batches in arrival order, then
/// removes the final skew estimate from every accepted batch.
pub fn calibrate_run(
    batches: &[MeasurementBatch],
    matrices: &ScheduleMatrices,
    anchor_pair_ranges: &DVector<f64>,
    options: &CalibrationOptions,
) -> Result<CalibrationOutcome> {
    let nominal = matrices.schedule().nominal_delay();
    let mut state = RlsState::new(matrices.n_anchors(), options.rls_config);
    let mut trace = Vec::new();
    let mut staged = Vec::with_capacity(batches.len());

    for batch in batches {
        let m = matrices.n_measurements();
        check_len("measurement vector", m, batch.y.len())?;
        let delays = if options.retrieval {
            apply_delay_retrieval(batch, nominal)
        } else {
            nominal_delays(m, nominal)
        };
        let rejected = options
            .outlier_threshold
            .is_some_and(|t| reject_outliers(&batch.y, &delays.values, t));
        let d_n = if rejected {
            None
        } else {
            Some(skew_residual(&batch.y, matrices, anchor_pair_ranges, &delays.values)?)
        };
        if options.rls {
            if let Some(d) = &d_n {
                let g = if delays.retrieved {
                    matrices.g_matrix(&delays.values)?
                } else {
                    matrices.g_nominal().clone()
                };
                state.update(&g, d)?;
                trace.push(RlsTraceRow {
                    n: state.n_updates,
                    batch: batch.index,
                    theta_hat: state.theta_hat.clone(),
                    trace_p: state.covariance().trace(),
                });
            }
        }
        staged.push((batch, delays, d_n, rejected));
    }

    let theta_hat = state.theta_hat.clone();
    let out = staged
        .into_iter()
        .map(|(batch, delays, d_n, rejected)| {
            let y_cal = if rejected || !options.rls {
                batch.y.clone()
            } else {
                calibrate_measurements(&batch.y, matrices, &theta_hat, &delays.values)?
            };
            Ok(CalibratedBatch {
                index: batch.index,
                y_cal,
                delays: delays.values,
                retrieved: delays.retrieved,
                d_n,
                rejected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationOutcome {
        batches: out,
        trace,
        state,
    })
}
