//! Broadcast schedules and the linear algebra that maps ranges to listener
//! measurements.
//!
//! A schedule is the order in which anchors transmit. Each consecutive pair
//! `i -> j` yields one listener measurement whose time-of-flight part is
//! `(rho_ij + rho_jL - rho_iL) / c`; the node `j` also contributes the
//! response delay it generated before transmitting.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{listener_column, n_pairs, n_ranges, pair_column};

/// Relative singular-value threshold below which a direction counts as kernel.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    order: Vec<usize>,
    n_anchors: usize,
    nominal_delay: f64,
}

impl Schedule {
    /// Validates the transmission order: at least two entries, anchors in
    /// `1..=n_anchors`, no node following itself, every anchor present.
    pub fn new(order: Vec<usize>, n_anchors: usize, nominal_delay: f64) -> Result<Self> {
        check_order(&order, n_anchors)?;
        for a in 1..=n_anchors {
            if !order.contains(&a) {
                return Err(Error::InvalidSchedule(format!("anchor {a} never transmits")));
            }
        }
        if !(nominal_delay.is_finite() && nominal_delay > 0.0) {
            return Err(Error::InvalidSchedule("nominal delay must be > 0".into()));
        }
        Ok(Self {
            order,
            n_anchors,
            nominal_delay,
        })
    }

    /// Random schedule that is valid by construction: a random walk over the
    /// anchors, stopped once every anchor pair has been traversed and the
    /// pairs traversed in both directions connect all anchors.
    pub fn random<R: Rng + ?Sized>(n_anchors: usize, nominal_delay: f64, rng: &mut R) -> Result<Self> {
        if n_anchors < 3 {
            return Err(Error::TooFewAnchors(n_anchors));
        }
        let mut order = vec![rng.gen_range(1..=n_anchors)];
        while !covers_pairs_both_ways(&order, n_anchors) {
            let last = *order.last().unwrap();
            let next: Vec<usize> = (1..=n_anchors).filter(|&a| a != last).collect();
            order.push(*next.choose(rng).unwrap());
        }
        Self::new(order, n_anchors, nominal_delay)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn n_anchors(&self) -> usize {
        self.n_anchors
    }

    pub fn nominal_delay(&self) -> f64 {
        self.nominal_delay
    }

    /// Number of listener measurements `M`.
    pub fn n_measurements(&self) -> usize {
        self.order.len() - 1
    }

    /// Transmission pair `(i, j)` behind measurement `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        (self.order[k], self.order[k + 1])
    }

    /// Node whose generated delay enters measurement `k`: the responder
    /// `order[k + 1]`, which waited `delta` after hearing `order[k]`.
    pub fn delay_holder(&self, k: usize) -> usize {
        self.order[k + 1]
    }

    pub fn delay_holders(&self) -> impl Iterator<Item = usize> + '_ {
        self.order[1..].iter().copied()
    }

    /// Length of a minimal valid schedule's measurement vector,
    /// `N(N-1)/2 + N - 1`.
    pub fn minimal_measurements(n_anchors: usize) -> usize {
        n_ranges(n_anchors) - 1
    }
}

fn check_order(order: &[usize], n_anchors: usize) -> Result<()> {
    if n_anchors < 3 {
        return Err(Error::TooFewAnchors(n_anchors));
    }
    if order.len() < 2 {
        return Err(Error::InvalidSchedule("at least two transmissions required".into()));
    }
    if let Some(&bad) = order.iter().find(|&&a| a == 0 || a > n_anchors) {
        return Err(Error::InvalidSchedule(format!(
            "anchor {bad} outside 1..={n_anchors}"
        )));
    }
    if let Some(k) = order.windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::RepeatedSender {
            node: order[k],
            position: k + 1,
        });
    }
    Ok(())
}

/// Combinatorial sufficient condition for `ker S = span(u)`: every anchor pair
/// appears as a consecutive transmission, and the pairs that appear in both
/// directions form a connected graph over all anchors.
pub fn covers_pairs_both_ways(order: &[usize], n_anchors: usize) -> bool {
    let mut seen = vec![vec![false; n_anchors + 1]; n_anchors + 1];
    for w in order.windows(2) {
        seen[w[0]][w[1]] = true;
    }
    let all_pairs = (1..=n_anchors)
        .flat_map(|i| (i + 1..=n_anchors).map(move |j| (i, j)))
        .all(|(i, j)| seen[i][j] || seen[j][i]);
    if !all_pairs {
        return false;
    }
    // flood fill over bidirectional edges
    let mut reached = vec![false; n_anchors + 1];
    let mut stack = vec![1];
    reached[1] = true;
    while let Some(a) = stack.pop() {
        for b in 1..=n_anchors {
            if !reached[b] && seen[a][b] && seen[b][a] {
                reached[b] = true;
                stack.push(b);
            }
        }
    }
    reached[1..].iter().all(|&r| r)
}

/// `M x (N(N-1)/2 + N)` map from ranges to listener time differences (in
/// meters). Row `k` has `+1` at `rho_ij`, `-1` at `rho_iL`, `+1` at `rho_jL`.
///
/// Only structural checks are applied here so that deficient orders (an
/// anchor that never transmits) can still be diagnosed by
/// [`validate_schedule`].
pub fn build_s_matrix(order: &[usize], n_anchors: usize) -> Result<DMatrix<f64>> {
    check_order(order, n_anchors)?;
    let m = order.len() - 1;
    let mut s = DMatrix::zeros(m, n_ranges(n_anchors));
    for (k, w) in order.windows(2).enumerate() {
        let (i, j) = (w[0], w[1]);
        s[(k, pair_column(i, j, n_anchors))] = 1.0;
        s[(k, listener_column(i, n_anchors))] = -1.0;
        s[(k, listener_column(j, n_anchors))] = 1.0;
    }
    Ok(s)
}

/// Kernel direction common to every schedule: a shared offset on all
/// listener ranges.
pub fn kernel_vector(n_anchors: usize) -> DVector<f64> {
    let p = n_pairs(n_anchors);
    DVector::from_fn(n_ranges(n_anchors), |r, _| if r < p { 0.0 } else { 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleDiagnosis {
    pub valid: bool,
    pub rank: usize,
    pub kernel_dim: usize,
}

pub fn validate_schedule(s: &DMatrix<f64>, n_anchors: usize) -> ScheduleDiagnosis {
    let cols = n_ranges(n_anchors);
    if s.ncols() != cols || s.nrows() == 0 {
        return ScheduleDiagnosis {
            valid: false,
            rank: 0,
            kernel_dim: cols,
        };
    }
    let sv = singular_values(s);
    let smax = sv.max();
    let rank = sv.iter().filter(|&&v| v > RANK_TOLERANCE * smax).count();
    let kernel_dim = cols - rank;
    let u = kernel_vector(n_anchors);
    let annihilates_u = (s * &u).amax() == 0.0;
    ScheduleDiagnosis {
        valid: kernel_dim == 1 && annihilates_u,
        rank,
        kernel_dim,
    }
}

/// Diagonal 0/1 projector onto the anchor-pair block.
pub fn build_projector(n_anchors: usize) -> DMatrix<f64> {
    let p = n_pairs(n_anchors);
    DMatrix::from_fn(n_ranges(n_anchors), n_ranges(n_anchors), |r, c| {
        if r == c && r < p {
            1.0
        } else {
            0.0
        }
    })
}

struct Svd {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v: DMatrix<f64>,
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

// nalgebra's SVD can return an inaccurate factorization (|U S V^T - A| ~ 0.1)
// for some rank-deficient schedule matrices; faer's does not.
fn thin_svd(a: &DMatrix<f64>) -> Svd {
    let svd = to_faer(a).thin_svd().expect("SVD of a finite matrix converges");
    let s = svd.S().column_vector();
    Svd {
        u: from_faer(svd.U()),
        sigma: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(svd.V()),
    }
}

/// Singular values, in no particular order.
pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.is_empty() {
        return DVector::zeros(0);
    }
    thin_svd(a).sigma
}

/// Moore–Penrose pseudoinverse through the SVD, discarding singular values
/// below `max(rows, cols) * eps * sigma_max`.
pub fn pseudoinverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let Svd { u, sigma, mut v } = thin_svd(a);
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * sigma.max();
    // V diag(1/s) U^T
    for (j, &s) in sigma.iter().enumerate() {
        v.column_mut(j).scale_mut(if s > cutoff { 1.0 / s } else { 0.0 });
    }
    v * u.transpose()
}

/// `M x N` indicator of which anchor's delay enters each measurement.
pub fn sender_selection(schedule: &Schedule) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(schedule.n_measurements(), schedule.n_anchors());
    for (k, holder) in schedule.delay_holders().enumerate() {
        a[(k, holder - 1)] = 1.0;
    }
    a
}

/// Precomputed schedule algebra, immutable once built.
#[derive(Debug, Clone)]
pub struct ScheduleMatrices {
    schedule: Schedule,
    s: DMatrix<f64>,
    s_pinv: DMatrix<f64>,
    pi: DMatrix<f64>,
    u: DVector<f64>,
    /// Rows of `S+` on the anchor-pair block, i.e. `Pi' S+`.
    pair_pinv: DMatrix<f64>,
    selection: DMatrix<f64>,
    g_nominal: DMatrix<f64>,
    diagnosis: ScheduleDiagnosis,
}

impl ScheduleMatrices {
    pub fn new(schedule: &Schedule) -> Result<Self> {
        let n = schedule.n_anchors();
        let s = build_s_matrix(schedule.order(), n)?;
        let diagnosis = validate_schedule(&s, n);
        if !diagnosis.valid {
            return Err(Error::InvalidSchedule(format!(
                "kernel dimension {} (need 1): anchor distances not identifiable",
                diagnosis.kernel_dim
            )));
        }
        let s_pinv = pseudoinverse(&s);
        let pair_pinv = s_pinv.rows(0, n_pairs(n)).into_owned();
        let selection = sender_selection(schedule);
        let nominal = DVector::from_element(schedule.n_measurements(), schedule.nominal_delay());
        let g_nominal = g_from_parts(&pair_pinv, &selection, &nominal);
        Ok(Self {
            schedule: schedule.clone(),
            s,
            s_pinv,
            pi: build_projector(n),
            u: kernel_vector(n),
            pair_pinv,
            selection,
            g_nominal,
            diagnosis,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
    pub fn s_pinv(&self) -> &DMatrix<f64> {
        &self.s_pinv
    }
    pub fn pi(&self) -> &DMatrix<f64> {
        &self.pi
    }
    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }
    pub fn pair_pinv(&self) -> &DMatrix<f64> {
        &self.pair_pinv
    }
    pub fn selection(&self) -> &DMatrix<f64> {
        &self.selection
    }
    pub fn diagnosis(&self) -> ScheduleDiagnosis {
        self.diagnosis
    }
    pub fn n_anchors(&self) -> usize {
        self.schedule.n_anchors()
    }
    pub fn n_measurements(&self) -> usize {
        self.schedule.n_measurements()
    }

    /// `G` for nominal delays `delta * 1`, computed once at construction.
    pub fn g_nominal(&self) -> &DMatrix<f64> {
        &self.g_nominal
    }

    /// `G` (`N x N(N-1)/2`) for per-measurement delays.
    pub fn g_matrix(&self, delays: &DVector<f64>) -> Result<DMatrix<f64>> {
        build_g_matrix(self, delays)
    }
}

fn g_from_parts(pair_pinv: &DMatrix<f64>, selection: &DMatrix<f64>, delays: &DVector<f64>) -> DMatrix<f64> {
    // G^T = Pi' S+ Diag(delays) A
    let mut weighted = selection.clone();
    for (k, d) in delays.iter().enumerate() {
        weighted.row_mut(k).scale_mut(*d);
    }
    (pair_pinv * weighted).transpose()
}

/// Matrix `G` such that `G^T theta` is the anchor-pair block of
/// `Pi S+ R D`, with `R = Diag(theta_{holder(k)})` and `D = delays`.
pub fn build_g_matrix(matrices: &ScheduleMatrices, delays: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = matrices.n_measurements();
    if delays.len() != m {
        return Err(Error::DimensionMismatch {
            what: "delay vector",
            expected: m,
            got: delays.len(),
        });
    }
    Ok(g_from_parts(&matrices.pair_pinv, &matrices.selection, delays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DELTA: f64 = 3e-3;

    #[test]
    fn s_rows_follow_pair_rule() {
        let s = build_s_matrix(&[1, 2, 3, 2, 1, 3], 3).unwrap();
        assert_eq!(s.shape(), (5, 6));
        let row = |k: usize| s.row(k).iter().copied().collect::<Vec<_>>();
        assert_eq!(row(0), vec![1.0, 0.0, 0.0, -1.0, 1.0, 0.0]);
        assert_eq!(row(1), vec![0.0, 0.0, 1.0, 0.0, -1.0, 1.0]);
        // 3 -> 2
        assert_eq!(row(2), vec![0.0, 0.0, 1.0, 0.0, 1.0, -1.0]);
        for k in 0..5 {
            let nz: Vec<f64> = s.row(k).iter().copied().filter(|v| *v != 0.0).collect();
            assert_eq!(nz.len(), 3);
            assert_eq!(nz.iter().sum::<f64>(), 1.0);
        }
        assert_eq!((s * kernel_vector(3)).amax(), 0.0);
    }

    #[test]
    fn repeated_sender_rejected() {
        let err = build_s_matrix(&[1, 1, 2], 3).unwrap_err();
        assert!(err.to_string().contains("repeated consecutive sender"), "{err}");
        assert!(Schedule::new(vec![1, 1, 2], 3, DELTA).is_err());
        assert!(Schedule::new(vec![1], 3, DELTA).is_err());
        assert!(Schedule::new(vec![1, 2, 1], 3, DELTA).is_err());
        assert!(Schedule::new(vec![1, 2, 3], 3, 0.0).is_err());
        assert!(Schedule::new(vec![1, 2, 4], 3, DELTA).is_err());
    }

    #[test]
    fn diagnosis_of_reference_schedules() {
        let d = validate_schedule(&build_s_matrix(&[1, 2, 3, 2, 1, 3], 3).unwrap(), 3);
        assert!(d.valid);
        assert_eq!(d.kernel_dim, 1);
        assert_eq!(d.rank, Schedule::minimal_measurements(3));

        let d = validate_schedule(&build_s_matrix(&[1, 2, 3, 2, 1, 3, 1], 3).unwrap(), 3);
        assert!(d.valid);
        assert_eq!(d.rank, 5);

        // anchor 3 silent: rows only span {rho12, rhoL1, rhoL2}; rank 2, kernel 4
        let d = validate_schedule(&build_s_matrix(&[1, 2, 1, 2], 3).unwrap(), 3);
        assert!(!d.valid);
        assert_eq!(d.rank, 2);
        assert_eq!(d.kernel_dim, 4);
    }

    #[test]
    fn projector_properties() {
        let pi = build_projector(3);
        assert_eq!(
            pi.diagonal().iter().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(&pi * &pi, pi);
        assert_eq!((&pi * kernel_vector(3)).amax(), 0.0);
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn pseudoinverse_identities() {
        let s = build_s_matrix(&[1, 2, 3, 2, 1, 3, 1], 3).unwrap();
        let p = pseudoinverse(&s);
        assert!(rel_frob(&(&s * &p * &s), &s) < 1e-10);
        assert!(rel_frob(&(&p * &s * &p), &p) < 1e-10);
        let sp = &s * &p;
        let ps = &p * &s;
        assert!(rel_frob(&sp.transpose(), &sp) < 1e-10);
        assert!(rel_frob(&ps.transpose(), &ps) < 1e-10);
        let pi = build_projector(3);
        assert!(rel_frob(&(&pi * &ps), &pi) < 1e-10);
    }

    #[test]
    fn pseudoinverse_of_invertible_is_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, -2.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let inv = a.clone().try_inverse().unwrap();
        assert!(rel_frob(&pseudoinverse(&a), &inv) < 1e-12);
    }

    #[test]
    fn holder_convention_matches_reference_rd_vector() {
        // RD = delta [theta_2, theta_3, theta_2, theta_1, theta_3]
        let sched = Schedule::new(vec![1, 2, 3, 2, 1, 3], 3, DELTA).unwrap();
        assert_eq!(sched.delay_holders().collect::<Vec<_>>(), vec![2, 3, 2, 1, 3]);
        let a = sender_selection(&sched);
        let theta = DVector::from_vec(vec![1e-5, -2e-5, 3e-5]);
        let rd = (&a * &theta) * DELTA;
        let expected = DVector::from_vec(vec![-2e-5, 3e-5, -2e-5, 1e-5, 3e-5]) * DELTA;
        assert_eq!(rd, expected);
    }

    #[test]
    fn g_matrix_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 3..=5 {
            let sched = Schedule::random(n, DELTA, &mut rng).unwrap();
            let mats = ScheduleMatrices::new(&sched).unwrap();
            let m = sched.n_measurements();
            let delays = DVector::from_fn(m, |_, _| DELTA + rng.gen_range(-5e-9..5e-9));
            let theta = DVector::from_fn(n, |_, _| rng.gen_range(-2e-5..2e-5));
            let g = mats.g_matrix(&delays).unwrap();
            assert_eq!(g.shape(), (n, n_pairs(n)));

            // element-wise Pi S+ R D, R from holders
            let rd = DVector::from_fn(m, |k, _| theta[sched.delay_holder(k) - 1] * delays[k]);
            let full = mats.pi() * mats.s_pinv() * rd;
            let got = g.transpose() * &theta;
            for r in 0..n_pairs(n) {
                assert!((got[r] - full[r]).abs() < 1e-12 * full.amax().max(1e-300) + 1e-20);
            }
            for r in n_pairs(n)..n_ranges(n) {
                assert_eq!(full[r], 0.0);
            }
            assert_eq!(g.transpose() * DVector::zeros(n), DVector::zeros(n_pairs(n)));
        }
    }

    #[test]
    fn g_matrix_dimension_mismatch() {
        let sched = Schedule::new(vec![1, 2, 3, 2, 1, 3], 3, DELTA).unwrap();
        let mats = ScheduleMatrices::new(&sched).unwrap();
        assert!(mats.g_matrix(&DVector::zeros(4)).is_err());
        assert_eq!(
            mats.g_matrix(&DVector::from_element(5, DELTA)).unwrap(),
            *mats.g_nominal()
        );
    }

    #[test]
    fn nominal_g_is_full_rank_for_reference_schedule() {
        let sched = Schedule::new(vec![1, 2, 3, 2, 1, 3], 3, DELTA).unwrap();
        let mats = ScheduleMatrices::new(&sched).unwrap();
        let sv = singular_values(mats.g_nominal());
        assert!(sv.min() > 1e-6 * sv.max());
    }

    proptest! {
        #[test]
        fn g_is_linear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..=5);
            let sched = Schedule::random(n, DELTA, &mut rng).unwrap();
            let mats = ScheduleMatrices::new(&sched).unwrap();
            let g = mats.g_nominal();
            let t1 = DVector::from_fn(n, |_, _| rng.gen_range(-1e-5..1e-5));
            let t2 = DVector::from_fn(n, |_, _| rng.gen_range(-1e-5..1e-5));
            let lhs = g.transpose() * (&t1 * a + &t2 * b);
            let rhs = g.transpose() * &t1 * a + g.transpose() * &t2 * b;
            prop_assert!((lhs - &rhs).amax() <= 1e-14 * rhs.amax().max(1e-12));
        }

        #[test]
        fn random_schedules_are_valid(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..=5);
            let sched = Schedule::random(n, DELTA, &mut rng).unwrap();
            let s = build_s_matrix(sched.order(), n).unwrap();
            let d = validate_schedule(&s, n);
            prop_assert!(d.valid);
            prop_assert_eq!(d.rank, Schedule::minimal_measurements(n));
        }
    }
}
