//! Ground-plane extraction and alignment (pitch, roll and height).

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eigen::SymmetricEigen3;
use crate::error::{CalibError, Result};
use crate::geometry::{rodrigues_matrix, PointCloud, RigidTransform};
use crate::scalar::Real;

pub const DEFAULT_PLANE_EPSILON: f64 = 0.05;
pub const DEFAULT_RANSAC_ITERATIONS: usize = 500;
/// Smallest cloud accepted by [`fit_ground_plane`].
pub const MIN_GROUND_CLOUD: usize = 50;
/// Minimum share of the cloud the winning plane must explain.
pub const MIN_GROUND_FRACTION: f64 = 0.10;

/// Plane `a·x + b·y + c·z + d = 0` with unit normal `(a, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T: Real> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub inlier_count: usize,
    pub inlier_ids: Vec<usize>,
}

impl<T: Real> Plane<T> {
    /// Plane with the given normal (normalised here) and offset, no inliers.
    pub fn from_normal(normal: Vector3<T>, d: T) -> Self {
        let n = normal.normalize();
        Self { a: n.x, b: n.y, c: n.z, d, inlier_count: 0, inlier_ids: Vec::new() }
    }

    pub fn normal(&self) -> Vector3<T> {
        Vector3::new(self.a, self.b, self.c)
    }

    #[inline]
    pub fn signed_distance(&self, p: &Point3<T>) -> T {
        self.a * p.x + self.b * p.y + self.c * p.z + self.d
    }

    /// The plane as seen after moving every point by `t`.
    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        let n = t.rotation * self.normal();
        Self {
            a: n.x,
            b: n.y,
            c: n.z,
            d: self.d - n.dot(&t.translation),
            inlier_count: self.inlier_count,
            inlier_ids: self.inlier_ids.clone(),
        }
    }

    pub fn flipped(&self) -> Self {
        Self { a: -self.a, b: -self.b, c: -self.c, d: -self.d, inlier_count: self.inlier_count, inlier_ids: self.inlier_ids.clone() }
    }

    /// Fraction of `cloud` recorded as inliers.
    pub fn inlier_fraction(&self, cloud_len: usize) -> f64 {
        if cloud_len == 0 {
            0.0
        } else {
            self.inlier_count as f64 / cloud_len as f64
        }
    }
}

fn collect_inliers<T: Real>(points: &[Point3<T>], n: &Vector3<T>, d: T, eps: T) -> Vec<usize> {
    points.iter().enumerate().filter(|(_, p)| (n.dot(&p.coords) + d).abs() <= eps).map(|(i, _)| i).collect()
}

/// Total-least-squares plane through the selected points.
fn refit<T: Real>(points: &[Point3<T>], ids: &[usize]) -> (Vector3<T>, T) {
    let inv = T::one() / T::count(ids.len());
    let centroid = ids.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords) * inv;
    let cov = ids.iter().fold(Matrix3::zeros(), |acc, &i| {
        let d = points[i].coords - centroid;
        acc + d * d.transpose()
    });
    let n = SymmetricEigen3::new(&cov).min_vector();
    (n, -n.dot(&centroid))
}

/// RANSAC search for the plane holding the most points within `epsilon`,
/// refined by a least-squares refit on its inliers.
///
/// The normal is signed so the cloud's own origin (the sensor) lies on the
/// positive side. Deterministic for a given `seed`.
pub fn fit_ground_plane<T: Real>(cloud: &PointCloud<T>, epsilon: T, iterations: usize, seed: u64) -> Result<Plane<T>> {
    if !(epsilon > T::zero()) {
        return Err(CalibError::invalid("plane thickness must be positive"));
    }
    if cloud.len() < MIN_GROUND_CLOUD {
        return Err(CalibError::NoGroundFound(format!("cloud has {} points, need at least {MIN_GROUND_CLOUD}", cloud.len())));
    }
    let pts = cloud.points();
    let n_pts = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vector3<T>, T)> = None;
    let degenerate = T::tol(1e-12);

    for _ in 0..iterations.max(1) {
        let i = rng.random_range(0..n_pts);
        let mut j = rng.random_range(0..n_pts - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n_pts - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let cross = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
        let norm = cross.norm();
        let scale = (pts[j] - pts[i]).norm() * (pts[k] - pts[i]).norm();
        if norm <= degenerate * scale || norm == T::zero() {
            continue;
        }
        let n = cross / norm;
        let d = -n.dot(&pts[i].coords);
        let count = pts.iter().filter(|p| (n.dot(&p.coords) + d).abs() <= epsilon).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, n, d));
        }
    }

    let Some((count, n0, d0)) = best else {
        return Err(CalibError::NoGroundFound("fewer than 3 non-collinear points".into()));
    };
    if (count as f64) < MIN_GROUND_FRACTION * n_pts as f64 {
        return Err(CalibError::NoGroundFound(format!("best plane explains {count} of {n_pts} points")));
    }

    let mut ids = collect_inliers(pts, &n0, d0, epsilon);
    let (mut n, mut d) = (n0, d0);
    for _ in 0..2 {
        let (rn, rd) = refit(pts, &ids);
        let refit_ids = collect_inliers(pts, &rn, rd, epsilon);
        if refit_ids.len() < 3 {
            break;
        }
        n = rn;
        d = rd;
        ids = refit_ids;
    }
    if d < T::zero() {
        n = -n;
        d = -d;
    }
    Ok(Plane { a: n.x, b: n.y, c: n.z, d, inlier_count: ids.len(), inlier_ids: ids })
}

/// Rotation and translation bringing a slave ground plane onto the master's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundAlignment<T: Real> {
    pub transform: RigidTransform<T>,
    pub flip_applied: bool,
    /// Share of slave points on or above the master ground after alignment;
    /// filled in by [`verify_ground_side`].
    pub residual_inlier_fraction: f64,
}

/// Unit vector orthogonal to `n`, chosen by a fixed axis priority.
fn in_plane_axis<T: Real>(n: &Vector3<T>) -> Vector3<T> {
    let helper = match n.iamin() {
        0 => Vector3::x(),
        1 => Vector3::y(),
        _ => Vector3::z(),
    };
    n.cross(&helper).normalize()
}

/// Rotates the slave normal onto the master normal about their common
/// perpendicular, then shifts along the master normal so the planes coincide.
pub fn align_ground<T: Real>(master: &Plane<T>, slave: &Plane<T>) -> GroundAlignment<T> {
    let nm = master.normal().normalize();
    let ns = slave.normal().normalize();
    let axis = ns.cross(&nm);
    let sin = axis.norm();
    let cos = ns.dot(&nm);
    let (rotation, flip_applied) = if sin > T::tol(1e-12) {
        (rodrigues_matrix(&(axis / sin), sin.atan2(cos)), false)
    } else if cos > T::zero() {
        (Matrix3::identity(), false)
    } else {
        (rodrigues_matrix(&in_plane_axis(&nm), T::pi()), true)
    };
    let shift = slave.d - master.d;
    GroundAlignment { transform: RigidTransform { rotation, translation: nm * shift }, flip_applied, residual_inlier_fraction: 0.0 }
}

struct SideCheck {
    on_plane: usize,
    above: usize,
    below: usize,
}

impl SideCheck {
    fn supported(&self, total: usize) -> f64 {
        (self.on_plane + self.above) as f64 / total.max(1) as f64
    }
}

fn side_check<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>, master: &Plane<T>, eps: T) -> SideCheck {
    let mut s = SideCheck { on_plane: 0, above: 0, below: 0 };
    for p in cloud.points() {
        let dist = master.signed_distance(&t.transform_point(p));
        if dist.abs() <= eps {
            s.on_plane += 1;
        } else if dist > T::zero() {
            s.above += 1;
        } else {
            s.below += 1;
        }
    }
    s
}

/// Confirms the aligned slave sits on the master ground with its off-ground
/// structure above it, trying the ±π flip about an in-plane axis otherwise.
///
/// A candidate passes when the share of slave points on the master plane is
/// at least half the slave plane's own inlier share, and most off-ground
/// points lie on the sensor side.
pub fn verify_ground_side<T: Real>(
    cloud: &PointCloud<T>,
    alignment: &GroundAlignment<T>,
    master: &Plane<T>,
    slave: &Plane<T>,
    epsilon: T,
) -> Result<GroundAlignment<T>> {
    let n = cloud.len();
    if n == 0 {
        return Err(CalibError::AmbiguousGround("empty slave cloud".into()));
    }
    let pre = slave.inlier_fraction(n);
    let passes = |s: &SideCheck| {
        let on = s.on_plane as f64 / n as f64;
        let off = s.above + s.below;
        on > 0.0 && on >= 0.5 * pre && (off == 0 || s.above * 2 >= off)
    };

    let original = side_check(cloud, &alignment.transform, master, epsilon);
    if passes(&original) {
        return Ok(GroundAlignment { residual_inlier_fraction: original.supported(n), ..*alignment });
    }

    // Rotate by π about an in-plane line through the sensor's ground footprint.
    let nm = master.normal().normalize();
    let sensor = Point3::from(alignment.transform.translation);
    let foot = sensor - nm * master.signed_distance(&sensor);
    let flip = rodrigues_matrix(&in_plane_axis(&nm), T::pi());
    let about_foot = RigidTransform { rotation: flip, translation: foot.coords - flip * foot.coords };
    let flipped_t = about_foot.compose(&alignment.transform);
    let flipped = side_check(cloud, &flipped_t, master, epsilon);
    if passes(&flipped) {
        return Ok(GroundAlignment { transform: flipped_t, flip_applied: true, residual_inlier_fraction: flipped.supported(n) });
    }
    Err(CalibError::AmbiguousGround(format!(
        "neither orientation places the slave on the master ground ({} / {} points on plane)",
        original.on_plane.max(flipped.on_plane),
        n
    )))
}
