//! Yaw-oriented 3D boxes: fitting, containment, distance and IoSV overlap.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{Vector2, Vector3};

use crate::taxonomy::ClassId;

/// Smallest extent a fitted box may have, in meters.
pub const MIN_EXTENT: f64 = 1e-3;

// Relative eigenvalue gap below which the horizontal covariance is treated as isotropic.
const ISOTROPY_TOL: f64 = 1e-9;

/// A 3D box free in yaw, translation and extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawBox {
    pub center: Vector3<f64>,
    /// Radians in `[-pi/2, pi/2)`; the box is symmetric under a half turn.
    pub yaw: f64,
    /// Length along the yaw axis, width across it, height.
    pub extents: Vector3<f64>,
    pub class_id: ClassId,
    pub instance_id: u32,
    pub support: usize,
}

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = (yaw + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if y >= FRAC_PI_2 {
        y - PI
    } else {
        y
    }
}

/// Absolute angular difference modulo a half turn.
pub fn yaw_distance(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b).abs()
}

impl YawBox {
    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    fn to_local(self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Containment with a small absolute tolerance for points on the faces.
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let l = self.to_local(p);
        let h = self.extents / 2.0;
        l.x.abs() <= h.x + tol && l.y.abs() <= h.y + tol && l.z.abs() <= h.z + tol
    }

    /// Euclidean distance from `p` to the solid box (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let l = self.to_local(p);
        let h = self.extents / 2.0;
        Vector3::new(
            (l.x.abs() - h.x).max(0.0),
            (l.y.abs() - h.y).max(0.0),
            (l.z.abs() - h.z).max(0.0),
        )
        .norm()
    }

    /// Footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let ax = Vector2::new(c, s) * (self.extents.x / 2.0);
        let ay = Vector2::new(-s, c) * (self.extents.y / 2.0);
        let o = self.center.xy();
        [o - ax - ay, o + ax - ay, o + ax + ay, o - ax + ay]
    }

    pub fn z_range(&self) -> (f64, f64) {
        (
            self.center.z - self.extents.z / 2.0,
            self.center.z + self.extents.z / 2.0,
        )
    }
}

/// Tight box around `points` at a fixed yaw.
pub fn fit_box_with_yaw(points: &[Vector3<f64>], yaw: f64) -> YawBox {
    assert!(!points.is_empty(), "box fit needs at least one point");
    let yaw = normalize_yaw(yaw);
    let (s, c) = yaw.sin_cos();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        let l = Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z);
        lo = lo.inf(&l);
        hi = hi.sup(&l);
    }
    let mid = (lo + hi) / 2.0;
    let extents = (hi - lo).map(|e| e.max(MIN_EXTENT));
    YawBox {
        center: Vector3::new(c * mid.x - s * mid.y, s * mid.x + c * mid.y, mid.z),
        yaw,
        extents,
        class_id: 0,
        instance_id: 0,
        support: points.len(),
    }
}

/// Principal horizontal direction of `points`.
///
/// Uses the first principal component of the xy covariance. When the
/// covariance is isotropic the direction is undefined, and the orientation of
/// the minimum-area bounding rectangle (folded into `[-pi/4, pi/4)`) is used
/// instead; coincident points give yaw 0.
pub fn principal_yaw(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p.xy()) / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p.xy() - mean;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    let trace = sxx + syy;
    if trace <= 1e-18 * n.max(1.0) {
        return 0.0;
    }
    let gap = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    if gap <= ISOTROPY_TOL * trace {
        return min_area_yaw(points);
    }
    normalize_yaw(0.5 * (2.0 * sxy).atan2(sxx - syy))
}

/// Yaw box from horizontal PCA and tight extents.
pub fn fit_yaw_box(points: &[Vector3<f64>]) -> YawBox {
    fit_box_with_yaw(points, principal_yaw(points))
}

fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn convex_hull(points: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.iter().map(|p| p.xy()).collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn min_area_yaw(points: &[Vector3<f64>]) -> f64 {
    let hull = convex_hull(points);
    if hull.len() < 2 {
        return 0.0;
    }
    let fold = |a: f64| (a + FRAC_PI_4).rem_euclid(FRAC_PI_2) - FRAC_PI_4;
    let mut options: Vec<(f64, f64)> = Vec::with_capacity(hull.len());
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()] - hull[i];
        if e.norm() == 0.0 {
            continue;
        }
        let yaw = fold(e.y.atan2(e.x));
        let (s, c) = yaw.sin_cos();
        let (mut ulo, mut uhi, mut vlo, mut vhi) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &hull {
            let u = c * p.x + s * p.y;
            let v = -s * p.x + c * p.y;
            ulo = ulo.min(u);
            uhi = uhi.max(u);
            vlo = vlo.min(v);
            vhi = vhi.max(v);
        }
        options.push(((uhi - ulo) * (vhi - vlo), yaw));
    }
    let min_area = options.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
    // Among (near-)minimal rectangles prefer the smallest rotation.
    options
        .into_iter()
        .filter(|o| o.0 <= min_area * (1.0 + 1e-9))
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.1.total_cmp(&a.1)))
        .map_or(0.0, |o| o.1)
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        let inside = |p: Vector2<f64>| cross(a, b, p) >= 0.0;
        let intersect = |p: Vector2<f64>, q: Vector2<f64>| {
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            p + (q - p) * (cp / (cp - cq))
        };
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(intersect(prev, cur)),
                (false, true) => {
                    out.push(intersect(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Intersection volume over the smaller box volume, in `[0, 1]`.
pub fn iosv(a: &YawBox, b: &YawBox) -> f64 {
    let smaller = a.volume().min(b.volume());
    if !(smaller > 0.0) {
        return 0.0;
    }
    let (alo, ahi) = a.z_range();
    let (blo, bhi) = b.z_range();
    let dz = ahi.min(bhi) - alo.max(blo);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = polygon_area(&clip_polygon(&a.footprint(), &b.footprint()));
    (area * dz / smaller).clamp(0.0, 1.0)
}
