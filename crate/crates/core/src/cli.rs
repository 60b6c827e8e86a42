//! File-producing commands behind the `schedloc` binary.
//!
//! Each command reads and writes fixed file names inside an output directory
//! and returns a [`Report`] of human-readable lines; nothing here prints.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{error_ellipse, PositionEstimate};
use crate::experiment::{
    self, bound, bound_covariance, calibrate, calibrated_batches, fix_statistics, linear_fit, localize, mean_std,
    monte_carlo, presets, retrieval_residuals, rls_session, rls_variance_curve, simulate, twr_skew_sweep, Figure, Fix,
    Scenario,
};
use crate::io::{
    read_calibrated, read_measurements, write_calibrated, write_json, write_matrix_csv, write_measurements,
    write_rejections, write_trace, EllipseKind, EllipseRecord,
};

pub const MEASUREMENTS_CSV: &str = "measurements.csv";
pub const CALIBRATED_CSV: &str = "calibrated.csv";
pub const REJECTIONS_CSV: &str = "rejections.csv";
pub const TRACE_CSV: &str = "rls_trace.csv";
pub const ESTIMATES_JSON: &str = "estimates.json";
pub const HCRB_JSON: &str = "hcrb.json";

impl Error {
    /// `true` for problems with the configuration rather than with data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::TooFewAnchors(_)
                | Error::CollinearAnchors
                | Error::NonFinite(_)
                | Error::ZeroRange(..)
                | Error::MissingListener
                | Error::InvalidClock(_)
                | Error::RepeatedSender { .. }
                | Error::InvalidSchedule(_)
                | Error::Config(_)
        )
    }
}

pub fn load_config(path: &Path) -> Result<experiment::ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    experiment::ExperimentConfig::from_json(&text)
}

/// A named pass/fail check against an acceptance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn create(&mut self, path: PathBuf) -> Result<BufWriter<File>> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = File::create(&path)?;
        self.artifacts.push(path);
        Ok(BufWriter::new(f))
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data {
            line: 0,
            msg: format!("cannot open {}: {e}", path.display()),
        })
}

fn ns(v: f64) -> f64 {
    v * 1e9
}

fn ppm(v: f64) -> f64 {
    v * 1e6
}

/// Writes `measurements.csv` and summarizes `y_k - delta` per measurement.
pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let batches = simulate(scenario)?;
    let mut w = report.create(out.join(MEASUREMENTS_CSV))?;
    write_measurements(&mut w, &batches, scenario.schedule())?;
    w.flush()?;

    let delta = scenario.schedule().nominal_delay();
    report.line(format!(
        "{} batches x {} measurements, delta = {} ms",
        batches.len(),
        scenario.matrices().n_measurements(),
        delta * 1e3
    ));
    for k in 0..scenario.matrices().n_measurements() {
        let (i, j) = scenario.schedule().pair(k);
        let v: Vec<f64> = batches.iter().map(|b| ns(b.y[k] - delta)).collect();
        let (m, s) = mean_std(&v);
        report.line(format!("  y_{k} ({i}->{j}) - delta: mean {m:.3} ns, std {s:.3} ns"));
    }
    Ok(report)
}

/// Reads a measurement CSV, writes calibrated rows, the rejection log and the
/// skew-estimator trace.
pub fn cmd_calibrate(scenario: &Scenario, input: &Path, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let batches = read_measurements(open(input)?, scenario.schedule())?;
    let windows = calibrate(scenario, &batches)?;
    let cal = calibrated_batches(&windows);

    let mut w = report.create(out.join(CALIBRATED_CSV))?;
    write_calibrated(&mut w, &cal, scenario.schedule())?;
    w.flush()?;
    let mut w = report.create(out.join(REJECTIONS_CSV))?;
    write_rejections(&mut w, &cal, scenario.calibration_options().outlier_threshold)?;
    w.flush()?;
    let traces: Vec<_> = windows.iter().map(|w| (w.window, w.outcome.trace.as_slice())).collect();
    let mut w = report.create(out.join(TRACE_CSV))?;
    write_trace(&mut w, &traces, scenario.geometry().n_anchors())?;
    w.flush()?;

    let rejected = cal.iter().filter(|b| b.rejected).count();
    report.line(format!(
        "{} batches in {} fix windows, {} rejected",
        cal.len(),
        windows.len(),
        rejected
    ));
    if rejected == cal.len() {
        report.warnings.push(format!("all {} batches rejected; no calibrated rows written", cal.len()));
    }
    let missing = cal.iter().filter(|b| !b.retrieved && !b.rejected).count();
    if scenario.calibration_options().retrieval && missing > 0 {
        report.warnings.push(format!("{missing} batches carried no delay payload; nominal delay used"));
    }
    if let Some(last) = windows.iter().rev().find(|w| w.outcome.state.n_updates > 0) {
        let est: Vec<String> = last.outcome.state.theta_hat.iter().map(|t| format!("{:.3}", ppm(*t))).collect();
        report.line(format!("window {} skew estimate (ppm): [{}]", last.window, est.join(", ")));
        if scenario.config().listener_m.is_some() {
            let truth: Vec<String> = scenario.relative_skews().iter().map(|t| format!("{:.3}", ppm(*t))).collect();
            report.line(format!("configured relative skews (ppm): [{}]", truth.join(", ")));
        }
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct EstimateRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    batches: usize,
    listener: Option<[f64; 2]>,
    converged: bool,
    iterations: usize,
    cost: Option<f64>,
}

impl EstimateRecord {
    fn new(window: Option<usize>, batches: usize, est: Option<&PositionEstimate>) -> Self {
        Self {
            window,
            batches,
            listener: est.map(|e| [e.listener.x, e.listener.y]),
            converged: est.is_some_and(|e| e.converged),
            iterations: est.map_or(0, |e| e.iterations),
            cost: est.map(|e| e.cost),
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimatesFile {
    kind: EllipseKind,
    batches_per_fix: usize,
    truth: Option<[f64; 2]>,
    fixes: Vec<EstimateRecord>,
    pooled: EstimateRecord,
    ellipses: Vec<EllipseRecord>,
}

/// Reads a calibrated CSV and writes per-fix and pooled estimates with the
/// scatter ellipse of the fixes.
pub fn cmd_localize(scenario: &Scenario, input: &Path, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let cal = read_calibrated(open(input)?, scenario.schedule())?;
    let loc = localize(scenario, &cal)?;
    let kind = if scenario.config().listener_m.is_some() {
        EllipseKind::Simulated
    } else {
        EllipseKind::MapExperimental
    };

    for f in &loc.fixes {
        match &f.estimate {
            Some(e) if e.converged => report.line(format!(
                "fix {} ({} batches): ({:.4}, {:.4}) m",
                f.window, f.n_batches, e.listener.x, e.listener.y
            )),
            Some(e) => report.warnings.push(format!(
                "fix {}: MAP did not converge after {} iterations",
                f.window, e.iterations
            )),
            None => report.warnings.push(format!("fix {}: no accepted batches", f.window)),
        }
    }
    if let Some(p) = &loc.pooled {
        report.line(format!("pooled ({} batches): ({:.4}, {:.4}) m", cal.len(), p.listener.x, p.listener.y));
    }
    let mut ellipses = Vec::new();
    if let Some(e) = loc.ellipse {
        report.line(format!(
            "{:.0}% scatter ellipse semi-axes {:.4} / {:.4} m",
            100.0 * e.confidence,
            e.semi_axes[0],
            e.semi_axes[1]
        ));
        ellipses.push(EllipseRecord::new(e, kind));
    }
    let file = EstimatesFile {
        kind,
        batches_per_fix: scenario.batches_per_fix(),
        truth: scenario.config().listener_m,
        fixes: loc
            .fixes
            .iter()
            .map(|f| EstimateRecord::new(Some(f.window), f.n_batches, f.estimate.as_ref()))
            .collect(),
        pooled: EstimateRecord::new(None, cal.len(), loc.pooled.as_ref()),
        ellipses,
    };
    let mut w = report.create(out.join(ESTIMATES_JSON))?;
    write_json(&mut w, &file)?;
    w.flush()?;
    Ok(report)
}

/// HCRB listener ellipse for one fix at the configured listener position,
/// plus the schedule matrices for inspection.
pub fn cmd_bound(scenario: &Scenario, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let e = bound(scenario)?;
    let mut w = report.create(out.join(HCRB_JSON))?;
    write_json(&mut w, &EllipseRecord::new(e, EllipseKind::Hcrb))?;
    w.flush()?;
    let m = scenario.matrices();
    for (name, mat) in [("S", m.s()), ("S_pinv", m.s_pinv()), ("Pi", m.pi()), ("G", m.g_nominal())] {
        let mut w = report.create(out.join("matrices").join(format!("{name}.csv")))?;
        write_matrix_csv(&mut w, mat)?;
        w.flush()?;
    }
    report.line(format!(
        "HCRB {:.0}% ellipse at ({}, {}): semi-axes {:.4} / {:.4} m, orientation {:.3} rad ({} batches per fix, sigma {} ns)",
        100.0 * e.confidence,
        e.center[0],
        e.center[1],
        e.semi_axes[0],
        e.semi_axes[1],
        e.orientation_rad,
        scenario.batches_per_fix(),
        scenario.config().estimation.sigma_ns
    ));
    Ok(report)
}

/// Runs a built-in preset end to end and checks it against its acceptance
/// thresholds. `seed` replaces the preset seed.
pub fn cmd_reproduce(figure: Figure, seed: Option<u64>, out: &Path) -> Result<Report> {
    let out = out.join(figure.to_string());
    let with_seed = |mut c: experiment::ExperimentConfig| {
        if let Some(s) = seed {
            c.rng_seed = s;
        }
        c
    };
    match figure {
        Figure::Fig2 => reproduce_fig2(&out),
        Figure::Fig3 => reproduce_fig3(&Scenario::new(with_seed(presets::fig3()))?, &out),
        Figure::Fig4 => reproduce_fig4(&Scenario::new(with_seed(presets::fig4()))?, &out),
        Figure::Fig6 => reproduce_fig6(seed, &out),
    }
}

pub const FIG2_SKEWS_PPM: [f64; 3] = [5.0, -3.0, 8.0];

fn reproduce_fig2(out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let skews = FIG2_SKEWS_PPM.map(|s| s * 1e-6);
    let deltas: Vec<f64> = (0..=34).map(|i| (3.0 + 0.5 * i as f64) * 1e-3).collect();
    let sweep = twr_skew_sweep(skews, 1.0, &deltas)?;
    let mut w = report.create(out.join("twr_skew_error.csv"))?;
    writeln!(w, "delta_ms,twr_error_ns")?;
    for (d, e) in &sweep {
        writeln!(w, "{},{}", d * 1e3, ns(*e))?;
    }
    w.flush()?;
    let fit = linear_fit(&sweep);
    let expected = 2.0 * skews[2] - skews[0] - skews[1];
    let rel = (fit.slope - expected).abs() / expected.abs();
    report.line(format!(
        "TWR error from {:.3} ns at 3 ms to {:.3} ns at 20 ms",
        ns(sweep[0].1),
        ns(sweep[sweep.len() - 1].1)
    ));
    report.checks.push(Check::new(
        "linearity",
        fit.r_squared > 0.999,
        format!("R^2 = {:.9} (> 0.999)", fit.r_squared),
    ));
    report.checks.push(Check::new(
        "slope",
        rel < 0.01,
        format!("slope {:.6} ppm vs 2th3-th1-th2 = {:.6} ppm (rel err {rel:.2e} < 1%)", ppm(fit.slope), ppm(expected)),
    ));
    Ok(report)
}

fn reproduce_fig3(scenario: &Scenario, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let batches = simulate(scenario)?;
    let mut w = report.create(out.join(MEASUREMENTS_CSV))?;
    write_measurements(&mut w, &batches, scenario.schedule())?;
    w.flush()?;
    let r = retrieval_residuals(scenario, &batches)?;
    let m = scenario.matrices().n_measurements();
    let mut w = report.create(out.join("residuals.csv"))?;
    writeln!(w, "batch,k,without_retrieval_ns,with_retrieval_ns")?;
    for (i, (a, b)) in r.without.iter().zip(&r.with).enumerate() {
        writeln!(w, "{},{},{},{}", i / m, i % m, ns(*a), ns(*b))?;
    }
    w.flush()?;
    let (_, s_without) = mean_std(&r.without);
    let (_, s_with) = mean_std(&r.with);
    report.line(format!("{} batches; residual std {:.4} ns -> {:.4} ns", batches.len(), ns(s_without), ns(s_with)));
    report.checks.push(Check::new(
        "std without retrieval",
        (2.6e-9..=4.0e-9).contains(&s_without),
        format!("{:.4} ns in [2.6, 4.0] ns", ns(s_without)),
    ));
    report.checks.push(Check::new(
        "std with retrieval",
        (0.24e-9..=0.38e-9).contains(&s_with),
        format!("{:.4} ns in [0.24, 0.38] ns", ns(s_with)),
    ));
    Ok(report)
}

pub const FIG4_SEEDS: u64 = 100;

fn reproduce_fig4(scenario: &Scenario, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let off = scenario.with_config(|c| c.calibration.retrieval = false)?;
    let n = scenario.geometry().n_anchors();
    let truth = scenario.relative_skews();
    for (name, s) in [("rls_trace_retrieval_on.csv", scenario), ("rls_trace_retrieval_off.csv", &off)] {
        let trace = rls_session(s)?;
        let mut w = report.create(out.join(name))?;
        write_trace(&mut w, &[(0, trace.as_slice())], n)?;
        w.flush()?;
        if std::ptr::eq(s, scenario) {
            let last = trace.last().ok_or_else(|| Error::Config("no skew updates".into()))?;
            let err = (&last.theta_hat - &truth).amax();
            report.checks.push(Check::new(
                "convergence",
                err < 1e-6,
                format!("max |theta_hat - theta| = {:.4} ppm after {} batches (< 1 ppm)", ppm(err), last.n),
            ));
        }
    }
    let v_on = rls_variance_curve(scenario, FIG4_SEEDS)?;
    let v_off = rls_variance_curve(&off, FIG4_SEEDS)?;
    let len = v_on.len().min(v_off.len());
    let mut w = report.create(out.join("rls_variance.csv"))?;
    writeln!(w, "n,variance_on_ppm2,variance_off_ppm2")?;
    for i in 0..len {
        writeln!(w, "{},{},{}", i + 1, v_on[i] * 1e12, v_off[i] * 1e12)?;
    }
    w.flush()?;
    let worse = (0..len).filter(|&i| v_on[i] >= v_off[i]).count();
    report.line(format!(
        "variance over {FIG4_SEEDS} seeds at n = {len}: {:.4e} ppm^2 (on) vs {:.4e} ppm^2 (off)",
        v_on[len - 1] * 1e12,
        v_off[len - 1] * 1e12
    ));
    report.checks.push(Check::new(
        "retrieval speeds convergence",
        worse == 0 && len > 0,
        format!("variance lower with retrieval at {}/{len} update counts", len - worse),
    ));
    Ok(report)
}

#[derive(Debug, Serialize)]
struct PositionSummary {
    truth: [f64; 2],
    fixes: usize,
    converged: usize,
    mean: [f64; 2],
    bias_m: f64,
    ellipses: Vec<EllipseRecord>,
}

pub const BENEFIT_SKEW_PPM: f64 = 20.0;

fn write_fixes(report: &mut Report, path: PathBuf, fixes: &[Fix]) -> Result<()> {
    let mut w = report.create(path)?;
    writeln!(w, "fix,x_m,y_m,converged,batches")?;
    for f in fixes {
        match &f.estimate {
            Some(e) => writeln!(w, "{},{},{},{},{}", f.window, e.listener.x, e.listener.y, u8::from(e.converged), f.n_batches)?,
            None => writeln!(w, "{},,,0,0", f.window)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn reproduce_fig6(seed: Option<u64>, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let mut summaries = Vec::new();
    for pos in 0..presets::FIG6_LISTENERS.len() {
        let mut cfg = presets::fig6(pos);
        if let Some(s) = seed {
            cfg.rng_seed = s;
        }
        let scenario = Scenario::new(cfg)?;
        let truth = Point2::from(presets::FIG6_LISTENERS[pos]);
        let label = format!("position {} ({}, {})", pos + 1, truth.x, truth.y);
        let n_fixes = scenario.config().estimation.monte_carlo_fixes;
        let fixes = monte_carlo(&scenario, n_fixes)?;
        write_fixes(&mut report, out.join(format!("fixes_position{}.csv", pos + 1)), &fixes)?;

        let stats = fix_statistics(&fixes, truth).ok_or_else(|| Error::Config(format!("{label}: no converged fixes")))?;
        let conf = scenario.confidence();
        let mc = error_ellipse(&stats.covariance, stats.mean, conf)?;
        let hcrb_cov = bound_covariance(&scenario)?;
        let hb = bound(&scenario)?;
        let gap = stats.covariance - hcrb_cov;
        let min_eig = gap.symmetric_eigenvalues().min();
        let trace = gap.trace();

        report.line(format!(
            "{label}: {}/{} fixes converged, mean ({:.4}, {:.4}), MC axes {:.4}/{:.4} m, HCRB axes {:.4}/{:.4} m",
            stats.n_converged, stats.n_fixes, stats.mean.x, stats.mean.y, mc.semi_axes[0], mc.semi_axes[1], hb.semi_axes[0], hb.semi_axes[1]
        ));
        report.checks.push(Check::new(
            format!("bias {label}"),
            stats.bias <= 0.02,
            format!("|mean - truth| = {:.4} cm (<= 2 cm)", stats.bias * 100.0),
        ));
        report.checks.push(Check::new(
            format!("HCRB area {label}"),
            hb.area() < mc.area(),
            format!("HCRB {:.4e} m^2 < MC {:.4e} m^2", hb.area(), mc.area()),
        ));
        report.checks.push(Check::new(
            format!("MC - HCRB PSD {label}"),
            min_eig > -0.05 * trace.abs(),
            format!("min eigenvalue {min_eig:.3e} > -5% of trace {trace:.3e}"),
        ));

        let raw_cfg = presets::random_skews(pos, BENEFIT_SKEW_PPM, seed.unwrap_or(scenario.config().rng_seed));
        let calibrated = Scenario::new(raw_cfg.clone())?;
        let raw = Scenario::new(presets::uncalibrated(raw_cfg))?;
        let cal_fixes = monte_carlo(&calibrated, n_fixes)?;
        let raw_fixes = monte_carlo(&raw, n_fixes)?;
        let cal_stats = fix_statistics(&cal_fixes, truth);
        let raw_stats = fix_statistics(&raw_fixes, truth);
        let raw_ok = raw_stats.as_ref().is_none_or(|s| s.bias > 0.5 || s.n_converged * 2 < s.n_fixes);
        report.checks.push(Check::new(
            format!("uncalibrated fails {label}"),
            raw_ok,
            match &raw_stats {
                Some(s) => format!("bias {:.3} m, {}/{} converged (> 0.5 m or no convergence)", s.bias, s.n_converged, s.n_fixes),
                None => "no converged fixes".into(),
            },
        ));
        report.checks.push(Check::new(
            format!("calibrated bias {label}"),
            cal_stats.as_ref().is_some_and(|s| s.bias < 0.10),
            match &cal_stats {
                Some(s) => format!("bias {:.4} m (< 0.10 m) at +-{BENEFIT_SKEW_PPM} ppm skews", s.bias),
                None => "no converged fixes".into(),
            },
        ));

        summaries.push(PositionSummary {
            truth: [truth.x, truth.y],
            fixes: stats.n_fixes,
            converged: stats.n_converged,
            mean: [stats.mean.x, stats.mean.y],
            bias_m: stats.bias,
            ellipses: vec![EllipseRecord::new(hb, EllipseKind::Hcrb), EllipseRecord::new(mc, EllipseKind::Simulated)],
        });
    }
    let mut w = report.create(out.join("ellipses.json"))?;
    write_json(&mut w, &summaries)?;
    w.flush()?;
    Ok(report)
}
