//! Yaw and horizontal-offset search on ground-free clouds.
//!
//! Once pitch, roll and height agree, the remaining freedom is a rotation
//! about the vertical axis plus an (x, y) shift. The search scans yaw on a
//! coarse grid, refines it by repeatedly halving the step around the best
//! candidate, then does the same for x and y at fixed yaw.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};

use crate::error::{CalibError, Result};
use crate::geometry::{rot_z, PointCloud};
use crate::ground::Plane;
use crate::scalar::Real;
use crate::spatial::NeighborIndex;

/// Fewest non-ground points a cloud may keep before the scene is declared
/// featureless.
pub const MIN_NON_GROUND_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarSearchConfig<T: Real> {
    /// Total width of the scanned yaw interval, centred on zero.
    pub yaw_range: T,
    pub coarse_step: T,
    pub refine_levels: usize,
    /// Half-width of the scanned x and y intervals.
    pub xy_range: T,
    pub xy_step: T,
    pub max_correspondence_dist: T,
    /// Voxel edge for thinning the slave before the search; zero disables it.
    pub downsample_voxel: T,
    /// Best-to-median coarse cost ratio above which the yaw is considered
    /// unobservable.
    pub low_confidence_ratio: f64,
}

impl<T: Real> Default for PlanarSearchConfig<T> {
    fn default() -> Self {
        Self {
            yaw_range: T::two_pi(),
            coarse_step: T::lit(2f64.to_radians()),
            refine_levels: 6,
            xy_range: T::lit(0.5),
            xy_step: T::lit(0.05),
            max_correspondence_dist: T::lit(1.0),
            downsample_voxel: T::lit(0.3),
            low_confidence_ratio: 0.8,
        }
    }
}

impl<T: Real> PlanarSearchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.yaw_range, self.coarse_step, self.xy_step, self.max_correspondence_dist].iter().all(|v| *v > T::zero());
        if !positive || self.xy_range < T::zero() || self.downsample_voxel < T::zero() {
            return Err(CalibError::invalid("planar search steps and ranges must be positive"));
        }
        if self.refine_levels < 1 {
            return Err(CalibError::invalid("planar search needs at least one refine level"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarEstimate<T: Real> {
    pub yaw: T,
    pub x: T,
    pub y: T,
    /// Mean squared nearest-neighbour distance over gated pairs.
    pub cost: T,
    pub correspondence_count: usize,
    /// Best coarse cost divided by the median coarse cost.
    pub confidence_ratio: f64,
    pub low_confidence: bool,
}

/// Drops the points within `epsilon` of `plane`.
pub fn remove_ground<T: Real>(cloud: &PointCloud<T>, plane: &Plane<T>, epsilon: T) -> Result<PointCloud<T>> {
    let kept = cloud.select(|_, p| plane.signed_distance(p).abs() > epsilon);
    if kept.len() < MIN_NON_GROUND_POINTS {
        return Err(CalibError::DegenerateScene(format!(
            "{} keeps only {} non-ground points (need {MIN_NON_GROUND_POINTS})",
            cloud.frame_id,
            kept.len()
        )));
    }
    Ok(kept)
}

/// Replaces the points of each occupied voxel by their centroid. Output is
/// ordered by voxel key.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, voxel: T) -> PointCloud<T> {
    if !(voxel > T::zero()) {
        return cloud.clone();
    }
    let inv = T::one() / voxel;
    let mut cells: BTreeMap<[i64; 3], (Vector3<T>, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let key = [0, 1, 2].map(|a| (p[a] * inv).floor().as_f64() as i64);
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    let pts = cells.into_values().map(|(sum, n)| Point3::from(sum / T::count(n))).collect();
    PointCloud::from_trusted(cloud.frame_id.clone(), pts)
}

/// Keeps, per occupied voxel, the member closest to the voxel centroid
/// (lowest index on ties). Output is ordered by voxel key.
pub fn voxel_subsample<T: Real>(cloud: &PointCloud<T>, voxel: T) -> PointCloud<T> {
    if !(voxel > T::zero()) {
        return cloud.clone();
    }
    let inv = T::one() / voxel;
    let key = |p: &Point3<T>| [0, 1, 2].map(|a| (p[a] * inv).floor().as_f64() as i64);
    let mut cells: BTreeMap<[i64; 3], (Vector3<T>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let e = cells.entry(key(p)).or_insert((Vector3::zeros(), Vec::new()));
        e.0 += p.coords;
        e.1.push(i);
    }
    let pts = cloud.points();
    let chosen = cells
        .into_values()
        .map(|(sum, members)| {
            let c = sum / T::count(members.len());
            let best = members
                .iter()
                .copied()
                .reduce(|b, i| if (pts[i].coords - c).norm_squared() < (pts[b].coords - c).norm_squared() { i } else { b })
                .expect("voxel has a member");
            pts[best]
        })
        .collect();
    PointCloud::from_trusted(cloud.frame_id.clone(), chosen)
}

/// Master index plus slave points, evaluated under (yaw, x, y) hypotheses.
#[derive(Debug, Clone)]
pub struct PlanarProblem<T: Real> {
    master: NeighborIndex<T>,
    slave: Vec<Point3<T>>,
    max_dist_sq: T,
}

impl<T: Real> PlanarProblem<T> {
    pub fn new(master: &PointCloud<T>, slave: &PointCloud<T>, max_correspondence_dist: T) -> Result<Self> {
        if slave.is_empty() {
            return Err(CalibError::DegenerateScene("slave cloud is empty".into()));
        }
        let master = NeighborIndex::build(master).map_err(|_| CalibError::DegenerateScene("master cloud is empty".into()))?;
        Ok(Self { master, slave: slave.points().to_vec(), max_dist_sq: max_correspondence_dist * max_correspondence_dist })
    }

    /// `(cost, pairs)`; the cost is `+∞` when no pair falls within the gate.
    pub fn cost(&self, yaw: T, x: T, y: T) -> (T, usize) {
        let r = rot_z(yaw);
        let shift = Vector3::new(x, y, T::zero());
        let mut sum = T::zero();
        let mut n = 0usize;
        for p in &self.slave {
            let q = Point3::from(r * p.coords + shift);
            if let Some(hit) = self.master.nearest_within(&q, self.max_dist_sq) {
                sum += hit.dist_sq;
                n += 1;
            }
        }
        if n == 0 {
            (T::max_value().unwrap(), 0)
        } else {
            (sum / T::count(n), n)
        }
    }
}

/// Mean squared distance from each slave point, rotated by `yaw` about z and
/// shifted by `(x, y, 0)`, to its nearest master point, over pairs closer
/// than the correspondence gate. Infinite when nothing matches.
pub fn reduced_cost<T: Real>(
    master_ng: &PointCloud<T>,
    slave_ng: &PointCloud<T>,
    yaw: T,
    x: T,
    y: T,
    cfg: &PlanarSearchConfig<T>,
) -> Result<T> {
    let problem = PlanarProblem::new(master_ng, slave_ng, cfg.max_correspondence_dist)?;
    Ok(problem.cost(yaw, x, y).0)
}

#[derive(Debug, Clone, Copy)]
struct Candidate<T: Real> {
    yaw: T,
    x: T,
    y: T,
    cost: T,
    pairs: usize,
}

impl<T: Real> Candidate<T> {
    /// Lower cost wins; ties go to smaller |yaw|, then |x|, then |y|.
    fn beats(&self, other: &Self) -> bool {
        let key = |c: &Self| [c.cost, c.yaw.abs(), c.x.abs(), c.y.abs()];
        let (a, b) = (key(self), key(other));
        for i in 0..4 {
            if a[i] < b[i] {
                return true;
            }
            if a[i] > b[i] {
                return false;
            }
        }
        false
    }
}

fn eval<T: Real>(p: &PlanarProblem<T>, yaw: T, x: T, y: T) -> Candidate<T> {
    let (cost, pairs) = p.cost(yaw, x, y);
    Candidate { yaw, x, y, cost, pairs }
}

#[derive(Clone, Copy)]
enum Axis {
    Yaw,
    X,
    Y,
}

fn halving_scan<T: Real>(p: &PlanarProblem<T>, mut best: Candidate<T>, axis: Axis, step: T, levels: usize) -> Candidate<T> {
    let mut step = step;
    for _ in 0..levels {
        step *= T::lit(0.5);
        let centre = best;
        for sign in [-T::one(), T::one()] {
            let d = step * sign;
            let cand = match axis {
                Axis::Yaw => eval(p, centre.yaw + d, centre.x, centre.y),
                Axis::X => eval(p, centre.yaw, centre.x + d, centre.y),
                Axis::Y => eval(p, centre.yaw, centre.x, centre.y + d),
            };
            if cand.beats(&best) {
                best = cand;
            }
        }
    }
    best
}

fn grid_scan<T: Real>(p: &PlanarProblem<T>, mut best: Candidate<T>, axis: Axis, half: T, step: T) -> Candidate<T> {
    let steps = (half / step).floor().as_f64() as i64;
    for k in -steps..=steps {
        let v = step * T::lit(k as f64);
        let cand = match axis {
            Axis::X => eval(p, best.yaw, v, best.y),
            Axis::Y => eval(p, best.yaw, best.x, v),
            Axis::Yaw => eval(p, v, best.x, best.y),
        };
        if cand.beats(&best) {
            best = cand;
        }
    }
    best
}

/// Coarse-to-fine search for the yaw and (x, y) offset that best overlay the
/// slave on the master. Both clouds are expected ground-free. The master is
/// used at full resolution; the slave is thinned to one real point per voxel.
pub fn search_planar<T: Real>(
    master_ng: &PointCloud<T>,
    slave_ng: &PointCloud<T>,
    cfg: &PlanarSearchConfig<T>,
) -> Result<PlanarEstimate<T>> {
    cfg.validate()?;
    let slave = voxel_subsample(slave_ng, cfg.downsample_voxel);
    let problem = PlanarProblem::new(master_ng, &slave, cfg.max_correspondence_dist)?;
    search_planar_problem(&problem, cfg)
}

/// [`search_planar`] on an already prepared (downsampled) problem.
pub fn search_planar_problem<T: Real>(problem: &PlanarProblem<T>, cfg: &PlanarSearchConfig<T>) -> Result<PlanarEstimate<T>> {
    let full_circle = cfg.yaw_range >= T::two_pi() - T::tol(1e-9);
    let k_max = ((cfg.yaw_range * T::lit(0.5)) / cfg.coarse_step).floor().as_f64() as i64;
    let k_min = if full_circle && (cfg.coarse_step * T::lit(k_max as f64) - T::pi()).abs() < T::tol(1e-9) { -k_max + 1 } else { -k_max };

    let mut coarse = Vec::with_capacity((k_max - k_min + 1) as usize);
    for k in k_min..=k_max {
        coarse.push(eval(problem, cfg.coarse_step * T::lit(k as f64), T::zero(), T::zero()));
    }
    let mut best = coarse.iter().copied().reduce(|b, c| if c.beats(&b) { c } else { b }).expect("coarse grid is non-empty");
    if best.pairs == 0 {
        return Err(CalibError::NoOverlap("no slave point lies within the correspondence gate at any yaw".into()));
    }

    let mut finite: Vec<f64> = coarse.iter().filter(|c| c.pairs > 0).map(|c| c.cost.as_f64()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = finite[finite.len() / 2];
    let confidence_ratio = if median > 0.0 { best.cost.as_f64() / median } else { 1.0 };

    best = halving_scan(problem, best, Axis::Yaw, cfg.coarse_step, cfg.refine_levels);
    best = grid_scan(problem, best, Axis::X, cfg.xy_range, cfg.xy_step);
    best = halving_scan(problem, best, Axis::X, cfg.xy_step, cfg.refine_levels);
    best = grid_scan(problem, best, Axis::Y, cfg.xy_range, cfg.xy_step);
    best = halving_scan(problem, best, Axis::Y, cfg.xy_step, cfg.refine_levels);
    // Second alternation, now that yaw is no longer biased by the offset.
    let fine_yaw = cfg.coarse_step / T::lit(2f64.powi(cfg.refine_levels as i32 / 2));
    best = halving_scan(problem, best, Axis::Yaw, fine_yaw, cfg.refine_levels);
    best = halving_scan(problem, best, Axis::X, cfg.xy_step, cfg.refine_levels);
    best = halving_scan(problem, best, Axis::Y, cfg.xy_step, cfg.refine_levels);

    Ok(PlanarEstimate {
        yaw: best.yaw,
        x: best.x,
        y: best.y,
        cost: best.cost,
        correspondence_count: best.pairs,
        confidence_ratio,
        low_confidence: confidence_ratio > cfg.low_confidence_ratio,
    })
}
