//! Point-to-plane ICP using PCA normals on both clouds.
//!
//! Correspondences are nearest neighbours gated by distance and by the
//! angle between the master normal and the (rotated) slave normal. The
//! residual uses the master normal only. Each iteration solves the 6×6
//! normal equations of the small-angle linearisation and accepts a step
//! only if it does not raise the cost, halving it up to three times.

use nalgebra::{Matrix6, Point3, Vector3, Vector6};

use crate::error::{CalibError, Result};
use crate::geometry::{exp_so3, PointCloud, RigidTransform};
use crate::scalar::Real;
use crate::spatial::{estimate_normals, NeighborIndex, OrientedPoint, DEFAULT_NORMAL_K};

/// Fewest correspondences an iteration may work with.
pub const MIN_CORRESPONDENCES: usize = 10;
const STEP_HALVINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpnConfig<T: Real> {
    pub max_iterations: usize,
    pub max_correspondence_dist: T,
    /// Largest accepted angle between paired normals, in degrees.
    pub normal_angle_gate_deg: T,
    pub convergence_translation: T,
    pub convergence_rotation: T,
    pub normal_k: usize,
}

impl<T: Real> Default for IcpnConfig<T> {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            max_correspondence_dist: T::lit(0.5),
            normal_angle_gate_deg: T::lit(45.0),
            convergence_translation: T::lit(1e-4),
            convergence_rotation: T::lit(1e-5),
            normal_k: DEFAULT_NORMAL_K,
        }
    }
}

impl<T: Real> IcpnConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let gates = [self.max_correspondence_dist, self.normal_angle_gate_deg, self.convergence_translation, self.convergence_rotation];
        if !gates.iter().all(|g| *g > T::zero()) || self.max_iterations < 1 || self.normal_k < 3 {
            return Err(CalibError::invalid("ICPN gates must be positive and iterations >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpnResult<T: Real> {
    /// Increment composed on the left of the input pose: `pose = transform ∘ initial`.
    pub transform: RigidTransform<T>,
    /// Refined slave → master pose.
    pub pose: RigidTransform<T>,
    pub iterations_used: usize,
    /// Mean squared point-to-plane residual at `transform`.
    pub final_cost: T,
    pub converged: bool,
    /// Cost of every accepted pose, starting with the initial one.
    pub cost_history: Vec<T>,
}

/// One slave-to-master pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub slave: usize,
    pub master: usize,
}

/// Point-to-plane objective between a fixed master (with normals) and a
/// moving slave (with normals in its own frame).
#[derive(Debug, Clone)]
pub struct PointToPlane<T: Real> {
    master: Vec<OrientedPoint<T>>,
    index: NeighborIndex<T>,
    slave: Vec<OrientedPoint<T>>,
    max_dist_sq: T,
    cos_gate: T,
}

impl<T: Real> PointToPlane<T> {
    pub fn new(master: &[OrientedPoint<T>], slave: Vec<OrientedPoint<T>>, cfg: &IcpnConfig<T>) -> Result<Self> {
        let index = NeighborIndex::from_points(master.iter().map(|m| m.position).collect())?;
        if slave.is_empty() {
            return Err(CalibError::invalid("ICPN needs a non-empty slave cloud"));
        }
        Ok(Self {
            master: master.to_vec(),
            index,
            slave,
            max_dist_sq: cfg.max_correspondence_dist * cfg.max_correspondence_dist,
            cos_gate: (cfg.normal_angle_gate_deg * T::pi() / T::lit(180.0)).cos(),
        })
    }

    /// Gated nearest-neighbour pairs at pose `t`, in slave index order.
    pub fn correspondences(&self, t: &RigidTransform<T>) -> Vec<Correspondence> {
        self.slave
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let q = t.transform_point(&s.position);
                let hit = self.index.nearest_within(&q, self.max_dist_sq)?;
                let n_m = &self.master[hit.index].normal;
                ((t.rotation * s.normal).dot(n_m) >= self.cos_gate).then_some(Correspondence { slave: i, master: hit.index })
            })
            .collect()
    }

    #[inline]
    fn residual(&self, c: &Correspondence, t: &RigidTransform<T>) -> (T, Point3<T>, Vector3<T>) {
        let q = t.transform_point(&self.slave[c.slave].position);
        let m = &self.master[c.master];
        (m.normal.dot(&(q - m.position)), q, m.normal)
    }

    /// Mean squared residual for a fixed pairing.
    pub fn cost_with(&self, corr: &[Correspondence], t: &RigidTransform<T>) -> T {
        if corr.is_empty() {
            return T::max_value().unwrap();
        }
        let sum = corr.iter().fold(T::zero(), |s, c| {
            let r = self.residual(c, t).0;
            s + r * r
        });
        sum / T::count(corr.len())
    }

    /// Cost at `t` with freshly searched correspondences.
    pub fn cost(&self, t: &RigidTransform<T>) -> (T, usize) {
        let corr = self.correspondences(t);
        (self.cost_with(&corr, t), corr.len())
    }

    /// Gauss-Newton system `(H, g)` of the mean squared residual for a left
    /// perturbation `[ω, δt]`: the cost changes by about `2gᵀx + xᵀHx`.
    pub fn normal_equations(&self, corr: &[Correspondence], t: &RigidTransform<T>) -> (Matrix6<T>, Vector6<T>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in corr {
            let (r, q, n) = self.residual(c, t);
            let qxn = q.coords.cross(&n);
            let j = Vector6::new(qxn.x, qxn.y, qxn.z, n.x, n.y, n.z);
            h += j * j.transpose();
            g += j * r;
        }
        let inv = T::one() / T::count(corr.len().max(1));
        (h * inv, g * inv)
    }
}

/// Applies the left increment `x = [ω, δt]` to `t`.
pub fn apply_increment<T: Real>(t: &RigidTransform<T>, x: &Vector6<T>) -> RigidTransform<T> {
    let delta = RigidTransform { rotation: exp_so3(&Vector3::new(x[0], x[1], x[2])), translation: Vector3::new(x[3], x[4], x[5]) };
    delta.compose(t)
}

fn solve<T: Real>(h: &Matrix6<T>, g: &Vector6<T>) -> Option<Vector6<T>> {
    let damping = h.trace() * T::lit(1e-9) / T::lit(6.0) + T::tol(1e-15);
    let damped = h + Matrix6::identity() * damping;
    damped.cholesky().map(|c| -c.solve(g))
}

/// Refines `initial` (slave → master) by point-to-plane ICP.
///
/// `master` carries precomputed normals; slave normals are estimated here
/// with `cfg.normal_k` neighbours, facing the slave frame origin.
pub fn icpn_refine<T: Real>(
    master: &[OrientedPoint<T>],
    slave: &PointCloud<T>,
    initial: &RigidTransform<T>,
    cfg: &IcpnConfig<T>,
) -> Result<IcpnResult<T>> {
    cfg.validate()?;
    let k = cfg.normal_k.min(slave.len());
    if k < 3 {
        return Err(CalibError::CorrespondenceStarvation { found: slave.len(), required: MIN_CORRESPONDENCES });
    }
    let slave_normals = estimate_normals(slave, k, &Point3::origin())?;
    let problem = PointToPlane::new(master, slave_normals, cfg)?;
    icpn_refine_problem(&problem, initial, cfg)
}

pub fn icpn_refine_problem<T: Real>(problem: &PointToPlane<T>, initial: &RigidTransform<T>, cfg: &IcpnConfig<T>) -> Result<IcpnResult<T>> {
    let mut pose = *initial;
    let mut corr = problem.correspondences(&pose);
    let mut cost = problem.cost_with(&corr, &pose);
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if corr.len() < MIN_CORRESPONDENCES {
            return Err(CalibError::CorrespondenceStarvation { found: corr.len(), required: MIN_CORRESPONDENCES });
        }
        iterations += 1;
        let (h, g) = problem.normal_equations(&corr, &pose);
        let Some(step) = solve(&h, &g) else {
            break;
        };
        let rot_step = Vector3::new(step[0], step[1], step[2]).norm();
        let trans_step = Vector3::new(step[3], step[4], step[5]).norm();
        if rot_step < cfg.convergence_rotation && trans_step < cfg.convergence_translation {
            converged = true;
            break;
        }

        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=STEP_HALVINGS {
            let cand = apply_increment(&pose, &(step * scale)).orthonormalized();
            let cand_corr = problem.correspondences(&cand);
            if cand_corr.len() >= MIN_CORRESPONDENCES {
                let cand_cost = problem.cost_with(&cand_corr, &cand);
                if cand_cost <= cost {
                    accepted = Some((cand, cand_corr, cand_cost));
                    break;
                }
            }
            scale *= T::lit(0.5);
        }
        let Some((cand, cand_corr, cand_cost)) = accepted else {
            break;
        };
        pose = cand;
        corr = cand_corr;
        cost = cand_cost;
        history.push(cost);
        if rot_step * scale < cfg.convergence_rotation && trans_step * scale < cfg.convergence_translation {
            converged = true;
            break;
        }
    }

    Ok(IcpnResult {
        transform: pose.compose(&initial.inverse()),
        pose,
        iterations_used: iterations,
        final_cost: cost,
        converged,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply, euler_to_transform, EulerPose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A room corner: floor, two walls and a box, all planar.
    fn room(seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..3000 {
            pts.push(Point3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), -1.5));
        }
        for _ in 0..1500 {
            pts.push(Point3::new(6.0, rng.random_range(-6.0..6.0), rng.random_range(-1.5..2.0)));
        }
        for _ in 0..1500 {
            pts.push(Point3::new(rng.random_range(-6.0..5.0), 5.0, rng.random_range(-1.5..2.0)));
        }
        for _ in 0..600 {
            pts.push(Point3::new(rng.random_range(1.0..2.0), -3.0, rng.random_range(-1.5..0.0)));
            pts.push(Point3::new(1.0, rng.random_range(-4.0..-3.0), rng.random_range(-1.5..0.0)));
        }
        PointCloud::new("room", pts).unwrap()
    }

    fn master_normals(c: &PointCloud<f64>) -> Vec<OrientedPoint<f64>> {
        estimate_normals(c, 40, &Point3::origin()).unwrap()
    }

    #[test]
    fn identical_clouds_converge_immediately() {
        let c = room(1);
        let res = icpn_refine(&master_normals(&c), &c, &RigidTransform::identity(), &IcpnConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations_used <= 2);
        assert!(res.final_cost < 1e-20);
        assert!((res.transform.rotation - nalgebra::Matrix3::identity()).amax() < 1e-12);
        assert_eq!(res.pose, res.transform);
        assert!(res.transform.translation.amax() < 1e-12);
    }

    #[test]
    fn recovers_small_known_transform() {
        let master = room(2);
        let truth = euler_to_transform(&EulerPose::new(0.5f64.to_radians(), -1.0f64.to_radians(), 2f64.to_radians(), 0.05, -0.03, 0.02));
        // Slave points expressed in the slave frame; the normals face the slave origin.
        let slave = apply(&truth.inverse(), &master);
        let res = icpn_refine(&master_normals(&master), &slave, &RigidTransform::identity(), &IcpnConfig::default()).unwrap();
        let err = res.pose.compose(&truth.inverse());
        assert!(err.rotation_angle().to_degrees() < 0.1, "{}", err.rotation_angle().to_degrees());
        assert!((res.pose.translation - truth.translation).norm() < 0.005);
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn disjoint_start_starves() {
        let c = room(3);
        let far = RigidTransform::from_translation(Vector3::new(100.0, 0.0, 0.0));
        assert!(matches!(
            icpn_refine(&master_normals(&c), &c, &far, &IcpnConfig::default()),
            Err(CalibError::CorrespondenceStarvation { .. })
        ));
    }

    #[test]
    fn linearisation_matches_finite_difference() {
        let master = room(4);
        let truth = euler_to_transform(&EulerPose::new(0.004, -0.003, 0.006, 0.02, 0.01, -0.015));
        let slave = apply(&truth.inverse(), &master);
        let slave_n = estimate_normals(&slave, 40, &Point3::origin()).unwrap();
        let problem = PointToPlane::new(&master_normals(&master), slave_n, &IcpnConfig::default()).unwrap();
        let pose = RigidTransform::identity();
        let corr = problem.correspondences(&pose);
        let (h, g) = problem.normal_equations(&corr, &pose);
        let base = problem.cost_with(&corr, &pose);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01));
            let (lin, quad) = (2.0 * g.dot(&x), (x.transpose() * h * x)[0]);
            let predicted = lin + quad;
            let actual = problem.cost_with(&corr, &apply_increment(&pose, &x)) - base;
            // Scaled by the size of the model terms: the two may cancel.
            assert!((predicted - actual).abs() <= 0.1 * (lin.abs() + quad), "pred {predicted} actual {actual}");
        }
    }
}
