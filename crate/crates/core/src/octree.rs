//! Octree occupancy volume and the volume-minimising pose scan.
//!
//! The root cube is snapped to a lattice of leaf-sized cells anchored at the
//! coordinate origin, so a point always falls in the same leaf no matter how
//! the rest of the cloud moves. Leaves are stored as Morton codes: the three
//! bits taken per level are the octant chosen when a cube is cut into eight.

use nalgebra::{Point3, Vector3};

use crate::error::{CalibError, Result};
use crate::geometry::{euler_to_transform, EulerPose, PointCloud, RigidTransform};
use crate::scalar::Real;

/// Deepest tree a 64-bit Morton code can hold.
pub const MAX_SUPPORTED_DEPTH: usize = 21;
/// Relative padding applied to the bounding cube.
const ROOT_PADDING: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctreeScanConfig<T: Real> {
    pub max_depth: usize,
    pub target_leaf_side: T,
    pub angle_step_init: T,
    pub trans_step_init: T,
    pub halvings: usize,
    pub sweep_halfwidth: usize,
}

impl<T: Real> Default for OctreeScanConfig<T> {
    fn default() -> Self {
        Self {
            max_depth: 8,
            target_leaf_side: T::lit(0.1),
            angle_step_init: T::lit(0.5f64.to_radians()),
            trans_step_init: T::lit(0.05),
            halvings: 4,
            sweep_halfwidth: 4,
        }
    }
}

impl<T: Real> OctreeScanConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let steps = [self.target_leaf_side, self.angle_step_init, self.trans_step_init];
        if !steps.iter().all(|s| *s > T::zero() && s.is_finite_value()) {
            return Err(CalibError::invalid("octree leaf side and scan steps must be positive"));
        }
        if self.halvings < 1 || self.sweep_halfwidth < 1 {
            return Err(CalibError::invalid("octree scan needs halvings >= 1 and sweep_halfwidth >= 1"));
        }
        if self.max_depth < 1 || self.max_depth > MAX_SUPPORTED_DEPTH {
            return Err(CalibError::invalid(format!("octree max_depth must be in 1..={MAX_SUPPORTED_DEPTH}")));
        }
        Ok(())
    }
}

/// Axis-aligned root cube whose corner lies on the leaf lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCube<T: Real> {
    /// Lattice index of the minimum corner, in leaf units.
    base: [i64; 3],
    leaf_side: T,
    depth: usize,
}

impl<T: Real> RootCube<T> {
    /// Root cube with the given corner (rounded onto the lattice), side and depth.
    pub fn new(min_corner: Point3<T>, side: T, depth: usize) -> Result<Self> {
        if depth > MAX_SUPPORTED_DEPTH || !(side > T::zero()) || !side.is_finite_value() {
            return Err(CalibError::invalid("root cube needs a positive side and a supported depth"));
        }
        let leaf_side = side / T::count(1usize << depth);
        let base = [0, 1, 2].map(|i| (min_corner[i] / leaf_side).round().as_f64() as i64);
        Ok(Self { base, leaf_side, depth })
    }

    /// Smallest lattice-snapped cube enclosing `points` with 5% padding.
    ///
    /// The leaf side is `cfg.target_leaf_side` unless that would need more
    /// than `cfg.max_depth` levels, in which case it grows to the smallest
    /// side that fits at `cfg.max_depth`.
    pub fn enclosing(points: &[Point3<T>], cfg: &OctreeScanConfig<T>) -> Self {
        let (lo, hi) = bounds(points);
        let extent = (hi - lo).amax() * T::lit(ROOT_PADDING);
        // Snapping can shift the cube by up to one leaf on each side.
        let fits = |leaf: T, depth: usize| leaf * T::count((1usize << depth) - 2) >= extent;
        let mut leaf = cfg.target_leaf_side;
        let depth = (1..=cfg.max_depth).find(|&d| fits(leaf, d)).unwrap_or_else(|| {
            leaf = extent / T::count((1usize << cfg.max_depth) - 2);
            cfg.max_depth
        });
        let half = leaf * T::count(1usize << depth) * T::lit(0.5);
        let center = Point3::from((lo.coords + hi.coords) * T::lit(0.5));
        let base = [0, 1, 2].map(|i| ((center[i] - half) / leaf).floor().as_f64() as i64);
        Self { base, leaf_side: leaf, depth }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_side(&self) -> T {
        self.leaf_side
    }

    pub fn side(&self) -> T {
        self.leaf_side * T::count(1usize << self.depth)
    }

    pub fn min_corner(&self) -> Point3<T> {
        Point3::from(Vector3::from_fn(|i, _| T::lit(self.base[i] as f64) * self.leaf_side))
    }

    pub fn center(&self) -> Point3<T> {
        self.min_corner() + Vector3::repeat(self.side() * T::lit(0.5))
    }

    /// Leaf cell of `p` relative to the corner, or `None` outside the cube.
    pub fn cell(&self, p: &Point3<T>) -> Option<[u32; 3]> {
        let g = lattice_cell(p, self.leaf_side);
        let n = 1i64 << self.depth;
        let mut out = [0u32; 3];
        for i in 0..3 {
            let c = g[i] - self.base[i];
            if !(0..n).contains(&c) {
                return None;
            }
            out[i] = c as u32;
        }
        Some(out)
    }
}

/// Global lattice cell of `p` for leaves of side `leaf`.
#[inline]
pub fn lattice_cell<T: Real>(p: &Point3<T>, leaf: T) -> [i64; 3] {
    [0, 1, 2].map(|i| (p[i] / leaf).floor().as_f64() as i64)
}

fn bounds<T: Real>(points: &[Point3<T>]) -> (Point3<T>, Point3<T>) {
    let Some(first) = points.first() else {
        return (Point3::origin(), Point3::origin());
    };
    points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
}

/// Interleaves the bits of a cell index, most significant level first.
pub fn morton_encode(cell: [u32; 3], depth: usize) -> u64 {
    let mut code = 0u64;
    for level in (0..depth).rev() {
        let octant = (((cell[0] >> level) & 1) << 2) | (((cell[1] >> level) & 1) << 1) | ((cell[2] >> level) & 1);
        code = (code << 3) | octant as u64;
    }
    code
}

/// Linear octree: the sorted, distinct Morton codes of occupied leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Octree<T: Real> {
    root: RootCube<T>,
    leaves: Vec<u64>,
    outside: usize,
}

impl<T: Real> Octree<T> {
    /// Inserts every point into `root`; points outside it are counted, not stored.
    pub fn build(points: &[Point3<T>], root: RootCube<T>) -> Self {
        let mut outside = 0;
        let mut leaves: Vec<u64> = points
            .iter()
            .filter_map(|p| {
                let cell = root.cell(p);
                outside += usize::from(cell.is_none());
                cell.map(|c| morton_encode(c, root.depth))
            })
            .collect();
        leaves.sort_unstable();
        leaves.dedup();
        Self { root, leaves, outside }
    }

    pub fn root(&self) -> &RootCube<T> {
        &self.root
    }

    pub fn leaves(&self) -> &[u64] {
        &self.leaves
    }

    /// Points that fell outside the root cube.
    pub fn outside_count(&self) -> usize {
        self.outside
    }

    /// Occupied node codes at `level` (0 is the root, `depth` the leaves).
    pub fn occupied_at(&self, level: usize) -> Vec<u64> {
        let shift = 3 * (self.root.depth - level.min(self.root.depth));
        let mut nodes: Vec<u64> = self.leaves.iter().map(|c| c >> shift).collect();
        nodes.dedup();
        nodes
    }

    pub fn volume(&self) -> OctreeVolume<T> {
        let leaf = self.root.leaf_side;
        OctreeVolume {
            root_center: self.root.center(),
            root_side: self.root.side(),
            max_depth: self.root.depth,
            occupied_leaf_count: self.leaves.len(),
            leaf_side: leaf,
            occupied_volume: T::count(self.leaves.len()) * leaf * leaf * leaf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctreeVolume<T: Real> {
    pub root_center: Point3<T>,
    pub root_side: T,
    /// Depth actually used (at most the configured cap).
    pub max_depth: usize,
    pub occupied_leaf_count: usize,
    pub leaf_side: T,
    pub occupied_volume: T,
}

/// Occupied leaf volume of `merged` in a root cube fitted to it.
pub fn octree_volume<T: Real>(merged: &PointCloud<T>, cfg: &OctreeScanConfig<T>) -> OctreeVolume<T> {
    let root = RootCube::enclosing(merged.points(), cfg);
    Octree::build(merged.points(), root).volume()
}

/// Scan parameter order.
const AXES: [Axis; 6] = [Axis::Yaw, Axis::Pitch, Axis::Roll, Axis::X, Axis::Y, Axis::Z];

#[derive(Debug, Clone, Copy)]
enum Axis {
    Yaw,
    Pitch,
    Roll,
    X,
    Y,
    Z,
}

/// Occupied-leaf count of master ∪ moved slave on a fixed lattice.
///
/// The master cells are computed once; only the slave is re-binned per pose.
#[derive(Debug, Clone)]
pub struct MergedOccupancy<T: Real> {
    master_keys: Vec<u64>,
    slave: Vec<Point3<T>>,
    leaf: T,
}

impl<T: Real> MergedOccupancy<T> {
    pub fn new(master: &[Point3<T>], slave: &[Point3<T>], leaf: T) -> Self {
        let mut master_keys: Vec<u64> = master.iter().map(|p| pack(lattice_cell(p, leaf))).collect();
        master_keys.sort_unstable();
        master_keys.dedup();
        Self { master_keys, slave: slave.to_vec(), leaf }
    }

    pub fn leaf_side(&self) -> T {
        self.leaf
    }

    pub fn leaf_count(&self, pose: &RigidTransform<T>) -> usize {
        let mut keys: Vec<u64> = self.slave.iter().map(|p| pack(lattice_cell(&pose.transform_point(p), self.leaf))).collect();
        keys.sort_unstable();
        keys.dedup();
        // Both lists sorted: count slave cells missing from the master.
        let (mut i, mut extra) = (0, 0);
        for k in keys {
            while i < self.master_keys.len() && self.master_keys[i] < k {
                i += 1;
            }
            if i == self.master_keys.len() || self.master_keys[i] != k {
                extra += 1;
            }
        }
        self.master_keys.len() + extra
    }

    pub fn volume(&self, pose: &RigidTransform<T>) -> T {
        T::count(self.leaf_count(pose)) * self.leaf * self.leaf * self.leaf
    }
}

/// Packs a lattice cell into 21 bits per axis (cells beyond ±2^20 saturate).
fn pack(c: [i64; 3]) -> u64 {
    const OFF: i64 = 1 << 20;
    const MAX: i64 = (1 << 21) - 1;
    let f = |v: i64| (v + OFF).clamp(0, MAX) as u64;
    (f(c[0]) << 42) | (f(c[1]) << 21) | f(c[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeRefinement<T: Real> {
    pub transform: RigidTransform<T>,
    pub leaf_side: T,
    /// Incumbent leaf count after each full pass, starting with the input pose.
    pub leaf_count_history: Vec<usize>,
    pub initial_volume: T,
    pub final_volume: T,
}

/// Coordinate descent on occupied volume; returns the refined slave → master pose.
pub fn octree_refine<T: Real>(
    master: &PointCloud<T>,
    slave: &PointCloud<T>,
    initial: &RigidTransform<T>,
    cfg: &OctreeScanConfig<T>,
) -> Result<RigidTransform<T>> {
    octree_refine_traced(master, slave, initial, cfg).map(|r| r.transform)
}

/// [`octree_refine`] with the volume trace.
///
/// Rotations act about the slave origin: the candidate pose is
/// `(R(yaw, pitch, roll) · R0, t0 + (x, y, z))`.
pub fn octree_refine_traced<T: Real>(
    master: &PointCloud<T>,
    slave: &PointCloud<T>,
    initial: &RigidTransform<T>,
    cfg: &OctreeScanConfig<T>,
) -> Result<OctreeRefinement<T>> {
    cfg.validate()?;
    let moved = slave.transformed(initial);
    let mut all = master.points().to_vec();
    all.extend_from_slice(moved.points());
    let leaf = RootCube::enclosing(&all, cfg).leaf_side();
    let occupancy = MergedOccupancy::new(master.points(), slave.points(), leaf);

    let pose_of = |p: &EulerPose<T>| {
        let d = euler_to_transform(p);
        RigidTransform { rotation: d.rotation * initial.rotation, translation: initial.translation + d.translation }
    };

    let mut best = EulerPose::zero();
    let mut best_count = occupancy.leaf_count(initial);
    let initial_count = best_count;
    let mut history = vec![best_count];
    let mut angle_step = cfg.angle_step_init;
    let mut trans_step = cfg.trans_step_init;
    let half = cfg.sweep_halfwidth as i64;

    for _ in 0..cfg.halvings {
        for axis in AXES {
            let step = match axis {
                Axis::Yaw | Axis::Pitch | Axis::Roll => angle_step,
                _ => trans_step,
            };
            let centre = best;
            // Nearest offsets first so equal counts favour small moves.
            let mut offsets: Vec<i64> = (1..=half).flat_map(|k| [-k, k]).collect();
            offsets.sort_by_key(|k| k.abs());
            for k in offsets {
                let mut cand = centre;
                let v = step * T::lit(k as f64);
                match axis {
                    Axis::Yaw => cand.yaw += v,
                    Axis::Pitch => cand.pitch += v,
                    Axis::Roll => cand.roll += v,
                    Axis::X => cand.x += v,
                    Axis::Y => cand.y += v,
                    Axis::Z => cand.z += v,
                }
                let count = occupancy.leaf_count(&pose_of(&cand));
                if count < best_count {
                    best_count = count;
                    best = cand;
                }
            }
        }
        history.push(best_count);
        angle_step *= T::lit(0.5);
        trans_step *= T::lit(0.5);
    }

    let cube = leaf * leaf * leaf;
    Ok(OctreeRefinement {
        transform: if best_count < initial_count { pose_of(&best) } else { *initial },
        leaf_side: leaf,
        leaf_count_history: history,
        initial_volume: T::count(initial_count) * cube,
        final_volume: T::count(best_count) * cube,
    })
}
