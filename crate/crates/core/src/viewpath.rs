//! Panoramic viewpoints sampled along street centerlines.

use crate::scene::{StreetGraph, Vec3};

/// Camera pose for one pipeline iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub position: Vec3,
    /// Horizontal unit street tangent.
    pub forward: Vec3,
    /// World upright axis.
    pub up: Vec3,
    pub iteration: usize,
}

impl Viewpoint {
    /// Camera looking along `forward` (projected to the horizontal plane).
    pub fn new(position: Vec3, forward: Vec3, iteration: usize) -> Self {
        let flat = Vec3::new(forward.x, forward.y, 0.0);
        let forward = if flat.norm() > 0.0 {
            flat.normalize()
        } else {
            Vec3::x()
        };
        Self {
            position,
            forward,
            up: Vec3::z(),
            iteration,
        }
    }

    /// Camera-frame right axis. Together with `up` and `forward` this is the
    /// (x, y, z) basis of the panorama's direction convention.
    pub fn right(&self) -> Vec3 {
        self.forward.cross(&self.up)
    }
}

fn horizontal_len(a: &Vec3, b: &Vec3) -> f64 {
    ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt()
}

/// Arc-length slack when deciding whether a sample still lies on the path.
const ARC_EPS: f64 = 1e-9;

/// Viewpoints every `spacing` meters of horizontal arc length along each
/// polyline, `height` meters above the street.
///
/// The final point is added when it lies at least `spacing / 2` beyond the
/// last regular sample. Samples at a polyline vertex take the tangent of the
/// segment leaving that vertex.
pub fn sample_viewpoints(streets: &StreetGraph, spacing: f64, height: f64) -> Vec<Viewpoint> {
    assert!(spacing > 0.0, "spacing must be positive");
    assert!(height >= 0.0, "camera height must be non-negative");
    let lift = Vec3::new(0.0, 0.0, height);
    let mut out = Vec::new();

    for line in &streets.polylines {
        if line.len() == 1 {
            out.push(Viewpoint::new(line[0] + lift, Vec3::x(), out.len()));
            continue;
        }
        // Segments with no horizontal extent carry no arc length.
        let segs: Vec<(Vec3, Vec3, f64)> = line
            .windows(2)
            .map(|w| (w[0], w[1], horizontal_len(&w[0], &w[1])))
            .filter(|s| s.2 > 0.0)
            .collect();
        if segs.is_empty() {
            out.push(Viewpoint::new(line[0] + lift, Vec3::x(), out.len()));
            continue;
        }
        let total: f64 = segs.iter().map(|s| s.2).sum();

        let point_at = |s: f64| -> (Vec3, Vec3) {
            let mut start = 0.0;
            for (k, &(a, b, len)) in segs.iter().enumerate() {
                let last = k + 1 == segs.len();
                if s < start + len || last {
                    let t = ((s - start) / len).clamp(0.0, 1.0);
                    return (a + (b - a) * t, b - a);
                }
                start += len;
            }
            unreachable!("segments are non-empty")
        };

        let mut k = 0usize;
        let mut last = 0.0;
        loop {
            let s = k as f64 * spacing;
            if s > total + ARC_EPS {
                break;
            }
            let (p, tangent) = point_at(s.min(total));
            out.push(Viewpoint::new(p + lift, tangent, out.len()));
            last = s;
            k += 1;
        }
        if total - last >= spacing / 2.0 {
            let (p, tangent) = point_at(total);
            out.push(Viewpoint::new(p + lift, tangent, out.len()));
        }
    }
    out
}
