//! Node geometry, clock parameters and the canonical range ordering.
//!
//! All times are seconds, distances meters, skews dimensionless. Ranges are
//! ordered anchor pairs first (lexicographic `(1,2), (1,3), ..., (N-1,N)`),
//! followed by the listener-to-anchor ranges `(L,1), ..., (L,N)`.

use nalgebra::{DMatrix, DVector, Point2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A node in the network. Anchors are numbered `1..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeId {
    Anchor(usize),
    Listener,
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Anchor(i) => write!(f, "anchor {i}"),
            NodeId::Listener => write!(f, "listener"),
        }
    }
}

/// Number of anchor-pair ranges, `N(N-1)/2`.
pub fn n_pairs(n_anchors: usize) -> usize {
    n_anchors * (n_anchors - 1) / 2
}

/// Total length of the range vector, `N(N-1)/2 + N`.
pub fn n_ranges(n_anchors: usize) -> usize {
    n_pairs(n_anchors) + n_anchors
}

/// Column of the anchor pair `{i, j}` (1-based anchors, any order).
pub fn pair_column(i: usize, j: usize, n_anchors: usize) -> usize {
    debug_assert!(i != j && i >= 1 && j >= 1 && i <= n_anchors && j <= n_anchors);
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    // pairs starting with anchors 1..a-1 come first
    (1..a).map(|k| n_anchors - k).sum::<usize>() + (b - a - 1)
}

/// Column of the listener-to-anchor range `(L, i)`.
pub fn listener_column(i: usize, n_anchors: usize) -> usize {
    debug_assert!(i >= 1 && i <= n_anchors);
    n_pairs(n_anchors) + (i - 1)
}

/// Anchor positions plus the (possibly unknown) listener position.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGeometry {
    anchors: Vec<Point2<f64>>,
    listener: Option<Point2<f64>>,
}

impl NetworkGeometry {
    pub fn new(anchors: Vec<Point2<f64>>, listener: Option<Point2<f64>>) -> Result<Self> {
        if anchors.len() < 3 {
            return Err(Error::TooFewAnchors(anchors.len()));
        }
        let finite = |p: &Point2<f64>| p.x.is_finite() && p.y.is_finite();
        if !anchors.iter().all(finite) || !listener.iter().all(finite) {
            return Err(Error::NonFinite("node coordinate"));
        }
        for i in 0..anchors.len() {
            for j in i + 1..anchors.len() {
                if anchors[i] == anchors[j] {
                    return Err(Error::ZeroRange(
                        NodeId::Anchor(i + 1).to_string(),
                        NodeId::Anchor(j + 1).to_string(),
                    ));
                }
            }
        }
        if collinear(&anchors) {
            return Err(Error::CollinearAnchors);
        }
        Ok(Self { anchors, listener })
    }

    pub fn from_coords(anchors: &[[f64; 2]], listener: Option<[f64; 2]>) -> Result<Self> {
        Self::new(
            anchors.iter().map(|&[x, y]| Point2::new(x, y)).collect(),
            listener.map(|[x, y]| Point2::new(x, y)),
        )
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[Point2<f64>] {
        &self.anchors
    }

    pub fn listener(&self) -> Option<Point2<f64>> {
        self.listener
    }

    pub fn with_listener(&self, listener: Point2<f64>) -> Result<Self> {
        Self::new(self.anchors.clone(), Some(listener))
    }

    pub fn centroid(&self) -> Point2<f64> {
        let sum = self
            .anchors
            .iter()
            .fold(nalgebra::Vector2::zeros(), |acc, p| acc + p.coords);
        Point2::from(sum / self.anchors.len() as f64)
    }

    /// Stacked coordinates `[x1, y1, ..., xN, yN, xL, yL]`.
    pub fn stacked(&self) -> Result<DVector<f64>> {
        let listener = self.listener.ok_or(Error::MissingListener)?;
        Ok(stack(&self.anchors, listener))
    }

    /// Anchor-pair block of the range vector. Does not need the listener.
    pub fn anchor_pair_ranges(&self) -> DVector<f64> {
        let n = self.n_anchors();
        let mut out = DVector::zeros(n_pairs(n));
        for i in 1..=n {
            for j in i + 1..=n {
                out[pair_column(i, j, n)] = (self.anchors[i - 1] - self.anchors[j - 1]).norm();
            }
        }
        out
    }
}

fn collinear(anchors: &[Point2<f64>]) -> bool {
    let scale = anchors
        .iter()
        .flat_map(|a| anchors.iter().map(move |b| (a - b).norm()))
        .fold(0.0_f64, f64::max);
    let p0 = anchors[0];
    // twice the largest triangle area against the squared extent
    let max_area = anchors
        .iter()
        .flat_map(|a| anchors.iter().map(move |b| (a, b)))
        .map(|(a, b)| {
            let u = a - p0;
            let v = b - p0;
            (u.x * v.y - u.y * v.x).abs()
        })
        .fold(0.0_f64, f64::max);
    max_area <= 1e-9 * scale * scale
}

pub fn stack(anchors: &[Point2<f64>], listener: Point2<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(2 * (anchors.len() + 1));
    for (i, p) in anchors.iter().chain(std::iter::once(&listener)).enumerate() {
        x[2 * i] = p.x;
        x[2 * i + 1] = p.y;
    }
    x
}

/// Node position `i` (0-based, listener last) out of a stacked vector.
pub fn node_at(x: &DVector<f64>, i: usize) -> Point2<f64> {
    Point2::new(x[2 * i], x[2 * i + 1])
}

/// Listener position out of a stacked vector.
pub fn listener_of(x: &DVector<f64>) -> Point2<f64> {
    node_at(x, x.len() / 2 - 1)
}

fn node_pairs(n_anchors: usize) -> impl Iterator<Item = (usize, usize)> {
    // (0-based node index a, node index b) per range column
    let pairs = (0..n_anchors).flat_map(move |i| (i + 1..n_anchors).map(move |j| (i, j)));
    pairs.chain((0..n_anchors).map(move |i| (n_anchors, i)))
}

/// The position-to-range map `g(x)` over stacked coordinates. No validation.
pub fn ranges_from_stacked(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len() / 2 - 1;
    DVector::from_iterator(
        n_ranges(n),
        node_pairs(n).map(|(a, b)| (node_at(x, a) - node_at(x, b)).norm()),
    )
}

/// Jacobian of [`ranges_from_stacked`], `(N(N-1)/2 + N) x 2(N+1)`.
///
/// Each row holds the unit vector between the two nodes of that range, with
/// opposite signs on the two endpoints.
pub fn range_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len() / 2 - 1;
    let mut jac = DMatrix::zeros(n_ranges(n), x.len());
    for (row, (a, b)) in node_pairs(n).enumerate() {
        let d = node_at(x, a) - node_at(x, b);
        let unit = d / d.norm();
        jac[(row, 2 * a)] = unit.x;
        jac[(row, 2 * a + 1)] = unit.y;
        jac[(row, 2 * b)] = -unit.x;
        jac[(row, 2 * b + 1)] = -unit.y;
    }
    jac
}

/// Ranges in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeVector {
    values: DVector<f64>,
    n_anchors: usize,
}

impl RangeVector {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn n_anchors(&self) -> usize {
        self.n_anchors
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.values[pair_column(i, j, self.n_anchors)]
    }

    pub fn listener(&self, i: usize) -> f64 {
        self.values[listener_column(i, self.n_anchors)]
    }

    pub fn anchor_pairs(&self) -> DVector<f64> {
        self.values.rows(0, n_pairs(self.n_anchors)).into_owned()
    }
}

pub fn ranges_from_geometry(geom: &NetworkGeometry) -> Result<RangeVector> {
    let n = geom.n_anchors();
    if n < 3 {
        return Err(Error::TooFewAnchors(n));
    }
    let x = geom.stacked()?;
    let values = ranges_from_stacked(&x);
    if let Some((col, _)) = values.iter().enumerate().find(|(_, &r)| r <= 0.0) {
        let (a, b) = node_pairs(n).nth(col).expect("column in range");
        let name = |k: usize| {
            if k == n {
                NodeId::Listener
            } else {
                NodeId::Anchor(k + 1)
            }
        };
        return Err(Error::ZeroRange(name(a).to_string(), name(b).to_string()));
    }
    Ok(RangeVector { values, n_anchors: n })
}

/// Per-node oscillator model: `C = (1 + skew) t`, generated delays `delta + eps`
/// with `eps ~ N(0, delay_err_sigma^2)`, and white timestamp jitter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockParams {
    pub skew: f64,
    pub jitter_var: f64,
    pub delay_err_sigma: f64,
}

impl ClockParams {
    pub fn new(skew: f64, jitter_var: f64, delay_err_sigma: f64) -> Result<Self> {
        if !(skew.is_finite() && jitter_var.is_finite() && delay_err_sigma.is_finite()) {
            return Err(Error::NonFinite("clock parameter"));
        }
        if skew.abs() >= 1e-2 {
            return Err(Error::InvalidClock(format!("|skew| = {skew:e} exceeds 1e-2")));
        }
        if jitter_var < 0.0 {
            return Err(Error::InvalidClock("jitter variance must be >= 0".into()));
        }
        if delay_err_sigma < 0.0 {
            return Err(Error::InvalidClock("delay error sigma must be >= 0".into()));
        }
        Ok(Self {
            skew,
            jitter_var,
            delay_err_sigma,
        })
    }

    pub fn ideal() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseParams {
    pub channel_var: f64,
}

impl NoiseParams {
    pub fn new(channel_var: f64) -> Result<Self> {
        if !channel_var.is_finite() || channel_var < 0.0 {
            return Err(Error::InvalidClock("channel variance must be finite and >= 0".into()));
        }
        Ok(Self { channel_var })
    }

    /// Variance of one timing measurement between two clocks:
    /// `jitter_a + jitter_b + 2 channel_var`, i.e. `2 sigma_j^2 + 2 sigma_c^2`
    /// when both clocks share the same jitter.
    pub fn measurement_var(&self, a: &ClockParams, b: &ClockParams) -> f64 {
        a.jitter_var + b.jitter_var + 2.0 * self.channel_var
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> NetworkGeometry {
        NetworkGeometry::from_coords(&[[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]], Some([5.0, 2.887]))
            .unwrap()
    }

    #[test]
    fn canonical_ordering() {
        assert_eq!(pair_column(1, 2, 4), 0);
        assert_eq!(pair_column(1, 4, 4), 2);
        assert_eq!(pair_column(2, 3, 4), 3);
        assert_eq!(pair_column(4, 3, 4), 5);
        assert_eq!(listener_column(1, 4), 6);
        assert_eq!(n_ranges(3), 6);
    }

    #[test]
    fn example_ranges() {
        // frozen from an independent numpy evaluation
        let r = ranges_from_geometry(&example()).unwrap();
        assert!((r.pair(1, 2) - 10.0).abs() < 1e-12);
        assert!((r.pair(1, 3) - 9.999779997579946).abs() < 1e-12);
        assert!((r.pair(2, 3) - 9.999779997579946).abs() < 1e-12);
        assert!((r.listener(1) - 5.773627022938007).abs() < 1e-12);
        assert!((r.listener(2) - 5.773627022938007).abs() < 1e-12);
        assert!((r.listener(3) - 5.773).abs() < 1e-12);
    }

    #[test]
    fn listener_on_anchor_is_zero_range() {
        let g = NetworkGeometry::from_coords(&[[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]], Some([0.0, 0.0]))
            .unwrap();
        let err = ranges_from_geometry(&g).unwrap_err();
        assert!(err.to_string().contains("zero range"), "{err}");
    }

    #[test]
    fn two_anchors_rejected() {
        let err = NetworkGeometry::from_coords(&[[0.0, 0.0], [1.0, 0.0]], Some([0.5, 0.0])).unwrap_err();
        assert!(err.to_string().contains("N >= 3 required"));
    }

    #[test]
    fn collinear_rejected() {
        let err = NetworkGeometry::from_coords(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], None).unwrap_err();
        assert!(matches!(err, Error::CollinearAnchors));
    }

    #[test]
    fn jacobian_rows_are_unit_vectors() {
        let g = example();
        let x = g.stacked().unwrap();
        let jac = range_jacobian(&x);
        // d rho_L1 / d x_L is the unit vector from anchor 1 to the listener
        let row = listener_column(1, 3);
        let u = (g.listener().unwrap() - g.anchors()[0]).normalize();
        assert!((jac[(row, 6)] - u.x).abs() < 1e-15);
        assert!((jac[(row, 7)] - u.y).abs() < 1e-15);
    }

    #[test]
    fn clock_bounds() {
        assert!(ClockParams::new(2e-2, 0.0, 0.0).is_err());
        assert!(ClockParams::new(0.0, -1.0, 0.0).is_err());
        assert!(ClockParams::new(0.0, 0.0, -1.0).is_err());
        assert!(ClockParams::new(1e-5, 1e-18, 3e-9).is_ok());
        let n = NoiseParams::new(2e-18).unwrap();
        let c = ClockParams::new(0.0, 1e-18, 0.0).unwrap();
        assert!((n.measurement_var(&c, &c) - 6e-18).abs() < 1e-30);
    }

    fn geometry_strategy(n: usize) -> impl Strategy<Value = NetworkGeometry> {
        prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), n + 1).prop_filter_map(
            "degenerate",
            move |pts| {
                let anchors: Vec<_> = pts[..n].iter().map(|&(x, y)| Point2::new(x, y)).collect();
                let l = pts[n];
                let g = NetworkGeometry::new(anchors, Some(Point2::new(l.0, l.1))).ok()?;
                ranges_from_geometry(&g).ok().map(|_| g)
            },
        )
    }

    proptest! {
        #[test]
        fn triangle_inequality(g in geometry_strategy(4)) {
            let r = ranges_from_geometry(&g).unwrap();
            for i in 1..=4 {
                for j in i + 1..=4 {
                    let lhs = (r.listener(i) - r.listener(j)).abs();
                    prop_assert!(lhs <= r.pair(i, j) * (1.0 + 1e-12) + 1e-12);
                }
            }
        }

        #[test]
        fn relabeling_permutes_ranges(g in geometry_strategy(4), a in 0usize..4, b in 0usize..4) {
            prop_assume!(a != b);
            let mut anchors = g.anchors().to_vec();
            anchors.swap(a, b);
            let swapped = NetworkGeometry::new(anchors, g.listener()).unwrap();
            let r = ranges_from_geometry(&g).unwrap();
            let s = ranges_from_geometry(&swapped).unwrap();
            let relabel = |k: usize| if k == a + 1 { b + 1 } else if k == b + 1 { a + 1 } else { k };
            for i in 1..=4 {
                prop_assert_eq!(s.listener(i), r.listener(relabel(i)));
                for j in i + 1..=4 {
                    prop_assert_eq!(s.pair(i, j), r.pair(relabel(i), relabel(j)));
                }
            }
        }
    }
}
