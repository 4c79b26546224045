use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{stroke_to_graph, IngestConfig, Stroke};
use crate::data::{GraphTask, Split};
use crate::error::{Error, Result};

/// Curve families in label order.
pub const FAMILIES: [&str; 12] = [
    "line", "circle", "zigzag", "s-curve", "loop", "spiral", "v", "l", "wave", "arc", "triangle", "square",
];

const SAMPLES: usize = 64;

fn polyline(corners: &[[f64; 2]], t: f64) -> [f64; 2] {
    let segs = corners.len() - 1;
    let s = (t * segs as f64).min(segs as f64 - 1e-12);
    let i = s.floor() as usize;
    let u = s - i as f64;
    let (a, b) = (corners[i], corners[i + 1]);
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
}

/// Point of family `f` at parameter `t` in `[0, 1]`.
fn template(f: usize, t: f64) -> [f64; 2] {
    match f {
        0 => [t, 0.0],
        1 => {
            let a = -PI / 2.0 + TAU * t;
            [a.cos(), a.sin()]
        }
        2 => polyline(
            &[[0.0, 0.0], [0.2, 0.4], [0.4, 0.0], [0.6, 0.4], [0.8, 0.0], [1.0, 0.4]],
            t,
        ),
        3 => [0.3 * (TAU * t).sin(), t],
        4 => {
            let a = TAU * t;
            [a - 1.6 * a.sin(), -1.6 * a.cos()]
        }
        5 => {
            let a = 2.0 * TAU * t;
            let r = 0.2 + t;
            [r * a.cos(), r * a.sin()]
        }
        6 => polyline(&[[0.0, 1.0], [0.5, 0.0], [1.0, 1.0]], t),
        7 => polyline(&[[0.0, 1.0], [0.0, 0.0], [1.0, 0.0]], t),
        8 => [t, 0.15 * (2.0 * TAU * t).sin()],
        9 => {
            let a = PI * t;
            [a.cos(), a.sin()]
        }
        10 => polyline(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.9], [0.0, 0.0]], t),
        11 => polyline(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]], t),
        _ => unreachable!("family index checked by caller"),
    }
}

/// Seeded stroke benchmark: `per_class` strokes from each of the first
/// `classes` families, interleaved by class, all in the training split.
///
/// `jitter` scales a random rotation (radians), independent log-scale
/// factors per axis, and a smooth sinusoidal warp of the template. Zero
/// jitter reproduces each template exactly.
pub fn make_synthetic_strokes(
    classes: usize,
    per_class: usize,
    seed: u64,
    jitter: f64,
    cfg: &IngestConfig,
) -> Result<GraphTask> {
    if classes < 2 || classes > FAMILIES.len() {
        return Err(Error::Config(format!(
            "synthetic strokes need between 2 and {} classes, got {classes}",
            FAMILIES.len()
        )));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Config(format!(
            "jitter must be a finite non-negative number, got {jitter}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut graphs = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for f in 0..classes {
            let rot = jitter * normal();
            let (sx, sy) = ((jitter * normal()).exp(), (jitter * normal()).exp());
            let (wx, wy) = (jitter * normal(), jitter * normal());
            let phase = TAU * normal();
            let (c, s) = (rot.cos(), rot.sin());
            let pts = (0..SAMPLES)
                .map(|i| {
                    let t = i as f64 / (SAMPLES - 1) as f64;
                    let p = template(f, t);
                    let warp = (PI * t + phase).sin();
                    let (x, y) = (sx * p[0] + wx * warp, sy * p[1] + wy * warp);
                    [c * x - s * y, s * x + c * y]
                })
                .collect();
            let mut g = stroke_to_graph(&Stroke::new(pts)?, cfg)?;
            g.y = Some(f);
            graphs.push(g);
        }
    }
    let n = graphs.len();
    GraphTask::new(graphs, classes, vec![Split::Train; n])
}
