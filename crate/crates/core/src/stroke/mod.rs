//! Pen strokes and traced contours turned into fixed-length path graphs.
//!
//! A stroke is resampled to `L` points evenly spaced by arc length. Each of
//! the `L` nodes gets an `L`-dimensional feature row: its own slot holds the
//! Freeman direction of the outgoing segment divided by the number of
//! direction bins (the last node reuses its incoming segment), and every
//! other slot `j` holds `0.1 · exp(-|i - j| / L)`.

mod image;
mod synthetic;

pub use image::{image_to_stroke, load_idx, GrayImage, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{make_synthetic_strokes, FAMILIES};

use std::f64::consts::TAU;

use crate::autodiff::Tensor;
use crate::data::Graph;
use crate::error::{Error, Result};

/// An ordered pen trajectory with no two consecutive points equal.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    points: Vec<[f64; 2]>,
}

impl Stroke {
    /// Drops consecutive duplicates; at least two distinct points must remain.
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let mut kept: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::invalid("stroke", "non-finite coordinate"));
            }
            if kept.last() != Some(&p) {
                kept.push(p);
            }
        }
        if kept.len() < 2 {
            return Err(Error::invalid("stroke", "needs at least two distinct points"));
        }
        Ok(Stroke { points: kept })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Stroke> {
        Stroke::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestConfig {
    /// Nodes per graph.
    pub length: usize,
    pub direction_bins: usize,
}

impl IngestConfig {
    pub fn new(length: usize, direction_bins: usize) -> Result<Self> {
        if length < 2 {
            return Err(Error::Config(format!("stroke length must be at least 2, got {length}")));
        }
        if direction_bins < 4 {
            return Err(Error::Config(format!(
                "direction bins must be at least 4, got {direction_bins}"
            )));
        }
        Ok(IngestConfig { length, direction_bins })
    }
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            length: 25,
            direction_bins: 8,
        }
    }
}

/// `length` points evenly spaced by arc length; both endpoints are copied
/// exactly.
pub fn resample_stroke(s: &Stroke, length: usize) -> Result<Vec<[f64; 2]>> {
    if length < 2 {
        return Err(Error::invalid(
            "resample",
            format!("length must be at least 2, got {length}"),
        ));
    }
    let pts = s.points();
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("resample", "stroke has zero length"));
    }
    let mut out = Vec::with_capacity(length);
    out.push(pts[0]);
    let mut seg = 0;
    for i in 1..length - 1 {
        let t = total * i as f64 / (length - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < t {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let u = ((t - cum[seg]) / span).clamp(0.0, 1.0);
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
    }
    out.push(*pts.last().unwrap());
    Ok(out)
}

/// Freeman code of the direction `(dx, dy)`: sector 0 is centered on +x,
/// sectors run counterclockwise, and an angle on a sector boundary goes to
/// the sector it closes (the lower index, except that the boundary between
/// the last sector and sector 0 goes to the last sector).
pub fn direction_code(dx: f64, dy: f64, bins: usize) -> Result<usize> {
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::invalid("chain_code", "zero-length segment"));
    }
    let mut theta = dy.atan2(dx);
    if theta < 0.0 {
        theta += TAU;
    }
    let w = TAU / bins as f64;
    let sector = ((theta + w / 2.0) / w).ceil() as usize;
    Ok((sector + bins - 1) % bins)
}

/// Direction codes of consecutive points, one per segment.
pub fn chain_code_points(points: &[[f64; 2]], bins: usize) -> Result<Vec<usize>> {
    points
        .windows(2)
        .map(|w| direction_code(w[1][0] - w[0][0], w[1][1] - w[0][1], bins))
        .collect()
}

pub fn chain_code(s: &Stroke, bins: usize) -> Result<Vec<usize>> {
    chain_code_points(s.points(), bins)
}

/// Node features for a resampled stroke with the given chain codes.
pub fn node_features(codes: &[usize], bins: usize) -> Tensor {
    let l = codes.len() + 1;
    let mut x = Tensor::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            let v = if i == j {
                codes[i.min(l - 2)] as f64 / bins as f64
            } else {
                0.1 * (-(i.abs_diff(j) as f64) / l as f64).exp()
            };
            x.set(i, j, v);
        }
    }
    x
}

/// Path graph of `cfg.length` nodes with chain-code features.
pub fn stroke_to_graph(s: &Stroke, cfg: &IngestConfig) -> Result<Graph> {
    let pts = resample_stroke(s, cfg.length)?;
    let codes = chain_code_points(&pts, cfg.direction_bins)?;
    let l = cfg.length;
    Graph::new(
        l,
        (1..l).map(|i| (i - 1, i)).collect(),
        node_features(&codes, cfg.direction_bins),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stroke(p: &[[f64; 2]]) -> Stroke {
        Stroke::new(p.to_vec()).unwrap()
    }

    #[test]
    fn stroke_invariants() {
        let s = stroke(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(s.len(), 2);
        assert!(Stroke::new(vec![[1.0, 1.0], [1.0, 1.0]]).is_err());
        assert!(Stroke::new(vec![[f64::NAN, 1.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn resample_examples() {
        let s = stroke(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(
            resample_stroke(&s, 3).unwrap(),
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
        );
        let zig = stroke(&[[0.3, 0.1], [5.0, 2.0], [-1.0, 7.0]]);
        assert_eq!(resample_stroke(&zig, 2).unwrap(), vec![[0.3, 0.1], [-1.0, 7.0]]);
        let square = stroke(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]);
        let r = resample_stroke(&square, 5).unwrap();
        let want = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        for (a, b) in r.iter().zip(want) {
            assert!(dist(*a, b) < 1e-12, "{a:?} vs {b:?}");
        }
        assert!(resample_stroke(&s, 1).is_err());
    }

    #[test]
    fn direction_examples() {
        assert_eq!(direction_code(1.0, 0.0, 8).unwrap(), 0);
        assert_eq!(direction_code(0.0, 1.0, 8).unwrap(), 2);
        assert_eq!(direction_code(1.0, 1.0, 8).unwrap(), 1);
        assert_eq!(direction_code(-1.0, 0.0, 8).unwrap(), 4);
        assert_eq!(direction_code(0.0, -1.0, 8).unwrap(), 6);
        assert_eq!(direction_code(1.0, -1e-12, 8).unwrap(), 0);
        assert_eq!(direction_code(1.0, 0.0, 4).unwrap(), 0);
        assert!(direction_code(0.0, 0.0, 8).is_err());
    }

    #[test]
    fn boundary_angles_round_down() {
        // 22.5° in 8 bins sits on the 0/1 boundary.
        let a = std::f64::consts::PI / 8.0;
        let code = direction_code(a.cos(), a.sin(), 8).unwrap();
        assert!(code == 0 || code == 1);
        // 45° in 4 bins is exactly representable as dx == dy.
        assert_eq!(direction_code(1.0, 1.0, 4).unwrap(), 0);
        assert_eq!(direction_code(-1.0, 1.0, 4).unwrap(), 1);
        assert_eq!(direction_code(1.0, -1.0, 4).unwrap(), 3);
    }

    #[test]
    fn graph_shape_contract() {
        let s = stroke(&[[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [4.0, 4.0]]);
        for l in [25, 31] {
            let g = stroke_to_graph(&s, &IngestConfig::new(l, 8).unwrap()).unwrap();
            assert_eq!(g.num_nodes, l);
            assert_eq!(g.edges.len(), l - 1);
            assert_eq!(g.num_features(), l);
        }
    }

    #[test]
    fn features_follow_layout() {
        let x = node_features(&[0, 2, 7], 8);
        assert_eq!(x.shape(), (4, 4));
        assert_eq!(x.get(0, 0), 0.0);
        assert_eq!(x.get(1, 1), 0.25);
        assert_eq!(x.get(2, 2), 7.0 / 8.0);
        assert_eq!(x.get(3, 3), 7.0 / 8.0);
        assert_eq!(x.get(0, 2), 0.1 * (-0.5f64).exp());
        assert_eq!(x.get(3, 1), x.get(1, 3));
    }

    #[test]
    fn ingest_config_bounds() {
        assert!(IngestConfig::new(1, 8).is_err());
        assert!(IngestConfig::new(5, 3).is_err());
    }
}
