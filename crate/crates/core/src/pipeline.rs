//! Two-stage calibration of one slave against the master, and experiment
//! batches over a simulated rig.
//!
//! Frames used internally:
//! * the master frame `M`, in which results are reported;
//! * the levelled frame `L = level ∘ M`, where the master ground is `z = 0`
//!   with `+z` up;
//! * working frames parallel to `L` but centred on the slave sensor, so that
//!   yaw and the refinement increments rotate about the slave origin.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::load_toml;
use crate::error::{CalibError, Result};
use crate::geometry::{euler_angles, rodrigues_matrix, rot_z, EulerPose, PointCloud, RigidTransform};
use crate::ground::{align_ground, fit_ground_plane, verify_ground_side, Plane};
use crate::icpn::{icpn_refine_problem, IcpnConfig, PointToPlane};
use crate::octree::{octree_refine_traced, OctreeScanConfig};
use crate::planar::{remove_ground, search_planar, PlanarSearchConfig};
use crate::report::{AxisValues, CalibrationReport, FailureReason, StageRecord, SuccessThresholds, TrialRecord};
use crate::scalar::Real;
use crate::sim::{capture, generate_scene, perturb, PerturbationSpec, RigSpec, SceneSpec};
use crate::spatial::{estimate_normals, NeighborIndex, OrientedPoint};

/// One row of an experiment; the record doubles as the trial outcome.
pub type TrialOutcome = TrialRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundSettings {
    pub epsilon: f64,
    pub ransac_iterations: usize,
    /// Largest tilt the ground stage may apply to the initial guess.
    pub max_tilt_correction_deg: f64,
    /// Largest height change the ground stage may apply to the initial guess.
    pub max_height_correction_m: f64,
}

impl Default for GroundSettings {
    fn default() -> Self {
        Self {
            epsilon: crate::ground::DEFAULT_PLANE_EPSILON,
            ransac_iterations: crate::ground::DEFAULT_RANSAC_ITERATIONS,
            max_tilt_correction_deg: 70.0,
            max_height_correction_m: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarSettings {
    pub yaw_range_deg: f64,
    pub coarse_step_deg: f64,
    pub refine_levels: usize,
    pub xy_range: f64,
    pub xy_step: f64,
    pub max_correspondence_dist: f64,
    pub downsample_voxel: f64,
    pub low_confidence_ratio: f64,
}

impl Default for PlanarSettings {
    fn default() -> Self {
        let d = PlanarSearchConfig::<f64>::default();
        Self {
            yaw_range_deg: d.yaw_range.to_degrees(),
            coarse_step_deg: d.coarse_step.to_degrees(),
            refine_levels: d.refine_levels,
            xy_range: d.xy_range,
            xy_step: d.xy_step,
            max_correspondence_dist: d.max_correspondence_dist,
            downsample_voxel: d.downsample_voxel,
            low_confidence_ratio: d.low_confidence_ratio,
        }
    }
}

impl PlanarSettings {
    pub fn to_config<T: Real>(&self) -> PlanarSearchConfig<T> {
        PlanarSearchConfig {
            yaw_range: T::lit(self.yaw_range_deg.to_radians()),
            coarse_step: T::lit(self.coarse_step_deg.to_radians()),
            refine_levels: self.refine_levels,
            xy_range: T::lit(self.xy_range),
            xy_step: T::lit(self.xy_step),
            max_correspondence_dist: T::lit(self.max_correspondence_dist),
            downsample_voxel: T::lit(self.downsample_voxel),
            low_confidence_ratio: self.low_confidence_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpnSettings {
    pub max_iterations: usize,
    pub max_correspondence_dist: f64,
    pub normal_angle_gate_deg: f64,
    pub convergence_translation: f64,
    pub convergence_rotation: f64,
    pub normal_k: usize,
}

impl Default for IcpnSettings {
    fn default() -> Self {
        let d = IcpnConfig::<f64>::default();
        Self {
            max_iterations: d.max_iterations,
            max_correspondence_dist: d.max_correspondence_dist,
            normal_angle_gate_deg: d.normal_angle_gate_deg,
            convergence_translation: d.convergence_translation,
            convergence_rotation: d.convergence_rotation,
            normal_k: d.normal_k,
        }
    }
}

impl IcpnSettings {
    pub fn to_config<T: Real>(&self) -> IcpnConfig<T> {
        IcpnConfig {
            max_iterations: self.max_iterations,
            max_correspondence_dist: T::lit(self.max_correspondence_dist),
            normal_angle_gate_deg: T::lit(self.normal_angle_gate_deg),
            convergence_translation: T::lit(self.convergence_translation),
            convergence_rotation: T::lit(self.convergence_rotation),
            normal_k: self.normal_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctreeSettings {
    pub max_depth: usize,
    pub target_leaf_side: f64,
    pub angle_step_init_deg: f64,
    pub trans_step_init: f64,
    pub halvings: usize,
    pub sweep_halfwidth: usize,
}

impl Default for OctreeSettings {
    fn default() -> Self {
        let d = OctreeScanConfig::<f64>::default();
        Self {
            max_depth: d.max_depth,
            target_leaf_side: d.target_leaf_side,
            angle_step_init_deg: d.angle_step_init.to_degrees(),
            trans_step_init: d.trans_step_init,
            halvings: d.halvings,
            sweep_halfwidth: d.sweep_halfwidth,
        }
    }
}

impl OctreeSettings {
    pub fn to_config<T: Real>(&self) -> OctreeScanConfig<T> {
        OctreeScanConfig {
            max_depth: self.max_depth,
            target_leaf_side: T::lit(self.target_leaf_side),
            angle_step_init: T::lit(self.angle_step_init_deg.to_radians()),
            trans_step_init: T::lit(self.trans_step_init),
            halvings: self.halvings,
            sweep_halfwidth: self.sweep_halfwidth,
        }
    }
}

/// Final overlap check on the refined pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    /// Distance within which a slave point counts as matched (m).
    pub overlap_gate: f64,
    /// Share of non-ground slave points that must be matched.
    pub min_overlap_fraction: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { overlap_gate: 0.1, min_overlap_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub planar: bool,
    pub icpn: bool,
    pub octree: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { planar: true, icpn: true, octree: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master: String,
    /// Slaves to calibrate; empty means every slave of the rig.
    pub slaves: Vec<String>,
    pub seed: u64,
    pub ground: GroundSettings,
    pub planar: PlanarSettings,
    pub icpn: IcpnSettings,
    pub octree: OctreeSettings,
    pub verify: VerifySettings,
    pub stages: StageToggles,
    pub thresholds: SuccessThresholds,
    /// Adds wall-clock time per trial; reports are then no longer reproducible.
    pub report_timing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master: "top".into(),
            slaves: Vec::new(),
            seed: 0,
            ground: GroundSettings::default(),
            planar: PlanarSettings::default(),
            icpn: IcpnSettings::default(),
            octree: OctreeSettings::default(),
            verify: VerifySettings::default(),
            stages: StageToggles::default(),
            thresholds: SuccessThresholds::default(),
            report_timing: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.master.is_empty() {
            return Err(CalibError::invalid("pipeline needs a master id"));
        }
        let mut ids: Vec<&str> = self.slaves.iter().map(String::as_str).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || ids.contains(&self.master.as_str()) {
            return Err(CalibError::invalid("slave ids must be distinct and differ from the master"));
        }
        if !(self.ground.epsilon > 0.0) || self.ground.ransac_iterations == 0 {
            return Err(CalibError::invalid("ground epsilon and iterations must be positive"));
        }
        if !(self.ground.max_tilt_correction_deg > 0.0 && self.ground.max_height_correction_m > 0.0) {
            return Err(CalibError::invalid("ground correction limits must be positive"));
        }
        if !(self.verify.overlap_gate > 0.0) || !(0.0..=1.0).contains(&self.verify.min_overlap_fraction) {
            return Err(CalibError::invalid("verify gate must be positive and the fraction in [0, 1]"));
        }
        self.planar.to_config::<f64>().validate()?;
        self.icpn.to_config::<f64>().validate()?;
        self.octree.to_config::<f64>().validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Ground,
    Rough,
    Icpn,
    Octree,
    Verify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Ground => "ground",
            Stage::Rough => "rough",
            Stage::Icpn => "icpn",
            Stage::Octree => "octree",
            Stage::Verify => "verify",
        }
    }
}

/// Pose (slave → master) and alignment cost after one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageState<T: Real> {
    pub stage: Stage,
    pub pose: RigidTransform<T>,
    /// Mean squared nearest-neighbour distance over gated pairs.
    pub cost: T,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairCalibration<T: Real> {
    pub transform: RigidTransform<T>,
    /// The starting guess, scored like a stage.
    pub initial: StageState<T>,
    /// Ground, rough, ICPN and octree, in order; costs never increase.
    pub trace: Vec<StageState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFailure {
    pub stage: Stage,
    pub reason: FailureReason,
    pub message: String,
}

impl PairFailure {
    fn new(stage: Stage, err: CalibError) -> Self {
        let reason = match &err {
            CalibError::NoOverlap(_) => FailureReason::NoOverlap,
            CalibError::CorrespondenceStarvation { .. } => FailureReason::CorrespondenceStarvation,
            CalibError::AmbiguousGround(_) | CalibError::NoGroundFound(_) => FailureReason::AmbiguousGround,
            _ => FailureReason::DegenerateScene,
        };
        Self { stage, reason, message: err.to_string() }
    }
}

impl std::fmt::Display for PairFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at {}: {}", self.reason, self.stage.as_str(), self.message)
    }
}

type PairResult<T> = std::result::Result<T, PairFailure>;

fn at<T>(stage: Stage, r: Result<T>) -> PairResult<T> {
    r.map_err(|e| PairFailure::new(stage, e))
}

/// Rotation taking unit `from` onto `+z`.
fn rotation_to_up<T: Real>(from: &Vector3<T>) -> nalgebra::Matrix3<T> {
    let axis = from.cross(&Vector3::z());
    let sin = axis.norm();
    let cos = from.z;
    if sin > T::tol(1e-12) {
        rodrigues_matrix(&(axis / sin), sin.atan2(cos))
    } else if cos > T::zero() {
        nalgebra::Matrix3::identity()
    } else {
        rodrigues_matrix(&Vector3::x(), T::pi())
    }
}

/// Everything derived from the master cloud alone.
#[derive(Debug, Clone)]
pub struct MasterModel<T: Real> {
    /// Master frame → levelled frame.
    level: RigidTransform<T>,
    plane: Plane<T>,
    /// Master points in the levelled frame.
    levelled: PointCloud<T>,
    /// Non-ground master points in the levelled frame.
    levelled_ng: Result<PointCloud<T>, PairFailure>,
    ng_index: Option<NeighborIndex<T>>,
    /// Master points and normals in the levelled frame.
    oriented: Vec<OrientedPoint<T>>,
    /// Index over the master frame, for stage costs.
    index: NeighborIndex<T>,
}

impl<T: Real> MasterModel<T> {
    pub fn prepare(master: &PointCloud<T>, cfg: &PipelineConfig) -> PairResult<Self> {
        let eps = T::lit(cfg.ground.epsilon);
        let plane = at(Stage::Ground, fit_ground_plane(master, eps, cfg.ground.ransac_iterations, cfg.seed))?;
        let level = RigidTransform { rotation: rotation_to_up(&plane.normal()), translation: Vector3::new(T::zero(), T::zero(), plane.d) };
        let levelled = master.transformed(&level);
        let levelled_ng = remove_ground(master, &plane, eps).map(|c| c.transformed(&level)).map_err(|e| PairFailure::new(Stage::Rough, e));
        let ng_index = levelled_ng.as_ref().ok().and_then(|c| NeighborIndex::build(c).ok());
        let k = cfg.icpn.normal_k.min(master.len());
        let normals = at(Stage::Icpn, estimate_normals(master, k, &Point3::origin()))?;
        let oriented = normals
            .iter()
            .map(|o| OrientedPoint { position: level.transform_point(&o.position), normal: level.rotation * o.normal })
            .collect();
        let index = at(Stage::Ground, NeighborIndex::build(master))?;
        Ok(Self { level, plane, levelled, levelled_ng, ng_index, oriented, index })
    }

    pub fn ground_plane(&self) -> &Plane<T> {
        &self.plane
    }

    /// Mean squared gated nearest-neighbour distance of `slave` under `pose`.
    pub fn alignment_cost(&self, slave: &PointCloud<T>, pose: &RigidTransform<T>, gate: T) -> (T, usize) {
        let gate_sq = gate * gate;
        let (mut sum, mut n) = (T::zero(), 0usize);
        for p in slave.points() {
            if let Some(hit) = self.index.nearest_within(&pose.transform_point(p), gate_sq) {
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

/// Everything derived from one slave cloud alone.
#[derive(Debug, Clone)]
pub struct SlaveModel<T: Real> {
    cloud: PointCloud<T>,
    plane: PairResult<Plane<T>>,
    non_ground: PairResult<PointCloud<T>>,
    normals: PairResult<Vec<OrientedPoint<T>>>,
}

impl<T: Real> SlaveModel<T> {
    pub fn prepare(slave: &PointCloud<T>, cfg: &PipelineConfig) -> Self {
        let eps = T::lit(cfg.ground.epsilon);
        let plane = at(Stage::Ground, fit_ground_plane(slave, eps, cfg.ground.ransac_iterations, cfg.seed));
        let non_ground = match &plane {
            Ok(p) => at(Stage::Rough, remove_ground(slave, p, eps)),
            Err(e) => Err(e.clone()),
        };
        let k = cfg.icpn.normal_k.min(slave.len());
        let normals = at(Stage::Icpn, estimate_normals(slave, k.max(3), &Point3::origin()));
        Self { cloud: slave.clone(), plane, non_ground, normals }
    }
}

/// Calibrates `slave` against `master` starting from `initial` (slave → master).
pub fn calibrate_pair<T: Real>(
    master: &PointCloud<T>,
    slave: &PointCloud<T>,
    initial: &RigidTransform<T>,
    cfg: &PipelineConfig,
) -> PairResult<PairCalibration<T>> {
    at(Stage::Initial, cfg.validate())?;
    let m = MasterModel::prepare(master, cfg)?;
    calibrate_prepared(&m, &SlaveModel::prepare(slave, cfg), initial, cfg)
}

/// [`calibrate_pair`] with the per-cloud work already done.
pub fn calibrate_prepared<T: Real>(
    master: &MasterModel<T>,
    slave: &SlaveModel<T>,
    initial: &RigidTransform<T>,
    cfg: &PipelineConfig,
) -> PairResult<PairCalibration<T>> {
    let eps = T::lit(cfg.ground.epsilon);
    let gate = T::lit(cfg.planar.max_correspondence_dist);
    let level_inv = master.level.inverse();
    let score = |stage: Stage, pose_l: &RigidTransform<T>| {
        let pose = level_inv.compose(pose_l);
        let (cost, pairs) = master.alignment_cost(&slave.cloud, &pose, gate);
        StageState { stage, pose, cost, pairs }
    };
    let mut trace: Vec<StageState<T>> = Vec::with_capacity(4);
    // A later stage replaces the incumbent only if the alignment cost does not rise.
    let advance = |trace: &mut Vec<StageState<T>>, stage: Stage, candidate: &RigidTransform<T>, current: &RigidTransform<T>| {
        let s = score(stage, candidate);
        let keep = trace.last().is_some_and(|prev| s.cost > prev.cost);
        if keep {
            log::debug!("{} raised the alignment cost; keeping the previous pose", stage.as_str());
            let prev = trace[trace.len() - 1];
            trace.push(StageState { stage, ..prev });
            *current
        } else {
            trace.push(s);
            *candidate
        }
    };

    // Initial guess in the levelled frame.
    let a0 = master.level.compose(initial);
    let initial_state = score(Stage::Initial, &a0);

    // Ground: fix pitch, roll and height, rotating about the slave origin.
    let slave_plane = slave.plane.clone()?;
    let tilt = RigidTransform::from_rotation(a0.rotation);
    let slave_plane_c = slave_plane.transformed(&tilt);
    let ground_c = Plane::from_normal(Vector3::z(), a0.translation.z);
    let alignment = align_ground(&ground_c, &slave_plane_c);
    let slave_c = slave.cloud.transformed(&tilt);
    let alignment = at(Stage::Ground, verify_ground_side(&slave_c, &alignment, &ground_c, &slave_plane_c, eps))?;
    let a1 = RigidTransform {
        rotation: alignment.transform.rotation * a0.rotation,
        translation: a0.translation + alignment.transform.translation,
    };
    // A plane that needs a larger correction than any plausible initial
    // error is not the ground the master sees (e.g. a wall filling the view).
    let tilt_deg = alignment.transform.rotation_angle().as_f64().to_degrees();
    let lift_m = alignment.transform.translation.norm().as_f64();
    if tilt_deg > cfg.ground.max_tilt_correction_deg || lift_m > cfg.ground.max_height_correction_m {
        return Err(PairFailure {
            stage: Stage::Ground,
            reason: FailureReason::AmbiguousGround,
            message: format!(
                "slave ground plane implies a {tilt_deg:.1}° / {lift_m:.2} m correction of the initial guess (limits {}° / {} m)",
                cfg.ground.max_tilt_correction_deg, cfg.ground.max_height_correction_m
            ),
        });
    }
    trace.push(score(Stage::Ground, &a1));

    // Rough: yaw and horizontal offset.
    let a2 = if cfg.stages.planar {
        let master_ng = master.levelled_ng.clone()?;
        let slave_ng = slave.non_ground.clone()?;
        let t1 = a1.translation;
        let master_c = master_ng.transformed(&RigidTransform::from_translation(-t1));
        let slave_c = slave_ng.transformed(&RigidTransform::from_rotation(a1.rotation));
        let est = at(Stage::Rough, search_planar(&master_c, &slave_c, &cfg.planar.to_config()))?;
        if est.low_confidence {
            return Err(PairFailure {
                stage: Stage::Rough,
                reason: FailureReason::DegenerateScene,
                message: format!(
                    "yaw is unobservable: best/median cost ratio {:.3} exceeds {}",
                    est.confidence_ratio, cfg.planar.low_confidence_ratio
                ),
            });
        }
        let cand = RigidTransform { rotation: rot_z(est.yaw) * a1.rotation, translation: t1 + Vector3::new(est.x, est.y, T::zero()) };
        advance(&mut trace, Stage::Rough, &cand, &a1)
    } else {
        advance(&mut trace, Stage::Rough, &a1, &a1)
    };

    // ICPN about the slave origin.
    let a3 = if cfg.stages.icpn {
        let t2 = a2.translation;
        let oriented: Vec<OrientedPoint<T>> =
            master.oriented.iter().map(|o| OrientedPoint { position: o.position - t2, normal: o.normal }).collect();
        let icfg = cfg.icpn.to_config();
        let problem = at(Stage::Icpn, PointToPlane::new(&oriented, slave.normals.clone()?, &icfg))?;
        let res = at(Stage::Icpn, icpn_refine_problem(&problem, &RigidTransform::from_rotation(a2.rotation), &icfg))?;
        let cand = RigidTransform { rotation: res.pose.rotation, translation: t2 + res.pose.translation };
        advance(&mut trace, Stage::Icpn, &cand, &a2)
    } else {
        advance(&mut trace, Stage::Icpn, &a2, &a2)
    };

    // Octree volume scan, also about the slave origin.
    let a4 = if cfg.stages.octree {
        let cand = at(Stage::Octree, octree_refine_traced(&master.levelled, &slave.cloud, &a3, &cfg.octree.to_config()))?.transform;
        advance(&mut trace, Stage::Octree, &cand, &a3)
    } else {
        advance(&mut trace, Stage::Octree, &a3, &a3)
    };

    verify_overlap(master, slave, &a4, cfg)?;
    Ok(PairCalibration { transform: level_inv.compose(&a4), initial: initial_state, trace })
}

/// Rejects poses under which too little slave structure meets master structure.
fn verify_overlap<T: Real>(
    master: &MasterModel<T>,
    slave: &SlaveModel<T>,
    pose_l: &RigidTransform<T>,
    cfg: &PipelineConfig,
) -> PairResult<()> {
    let fail = |message: String| PairFailure { stage: Stage::Verify, reason: FailureReason::NoOverlap, message };
    let (Some(index), Ok(slave_ng)) = (&master.ng_index, &slave.non_ground) else {
        return Err(fail("no non-ground structure to compare".into()));
    };
    let gate = T::lit(cfg.verify.overlap_gate);
    let matched = slave_ng.points().iter().filter(|p| index.nearest_within(&pose_l.transform_point(p), gate * gate).is_some()).count();
    let fraction = matched as f64 / slave_ng.len().max(1) as f64;
    if fraction < cfg.verify.min_overlap_fraction {
        return Err(fail(format!(
            "only {:.1}% of non-ground slave points lie within {} m of the master",
            100.0 * fraction,
            cfg.verify.overlap_gate
        )));
    }
    Ok(())
}

/// Per-axis error of `estimate` against `truth`: Euler angles of
/// `R_est · R_gtᵀ` and `t_est − t_gt`.
pub fn pose_error<T: Real>(estimate: &RigidTransform<T>, truth: &RigidTransform<T>) -> EulerPose<T> {
    let (pitch, roll, yaw) = euler_angles(&(estimate.rotation * truth.rotation.transpose()));
    let d = estimate.translation - truth.translation;
    EulerPose::new(pitch, roll, yaw, d.x, d.y, d.z)
}

/// Pose of `t` as report axis values (Euler angles in degrees).
pub fn pose_values<T: Real>(t: &RigidTransform<T>) -> AxisValues {
    let (pitch, roll, yaw) = euler_angles(&t.rotation);
    AxisValues::from_pose(&EulerPose::new(pitch, roll, yaw, t.translation.x, t.translation.y, t.translation.z))
}

/// Turns a pair result into a report row. Success needs a finished pipeline
/// and, when `truth` is given, errors within `cfg.thresholds`.
pub fn trial_record<T: Real>(
    trial: usize,
    slave: &str,
    result: &PairResult<PairCalibration<T>>,
    truth: Option<&RigidTransform<T>>,
    injected: Option<&EulerPose<T>>,
    cfg: &PipelineConfig,
) -> TrialRecord {
    let injected = injected.map(AxisValues::from_pose);
    match result {
        Ok(cal) => {
            let errors = truth.map(|gt| AxisValues::from_pose(&pose_error(&cal.transform, gt)));
            let success = errors.is_none_or(|e| cfg.thresholds.accepts(&e));
            TrialRecord {
                trial,
                slave: slave.to_string(),
                success,
                failure_reason: if success { FailureReason::None } else { FailureReason::OutOfTolerance },
                failure_stage: None,
                message: None,
                injected,
                estimate: Some(pose_values(&cal.transform)),
                errors,
                stages: std::iter::once(&cal.initial)
                    .chain(&cal.trace)
                    .map(|s| StageRecord {
                        stage: s.stage.as_str().to_string(),
                        pose: pose_values(&s.pose),
                        cost: s.cost.as_f64(),
                        pairs: s.pairs,
                    })
                    .collect(),
                timing_ms: None,
            }
        }
        Err(f) => TrialRecord {
            trial,
            slave: slave.to_string(),
            success: false,
            failure_reason: f.reason,
            failure_stage: Some(f.stage.as_str().to_string()),
            message: Some(f.message.clone()),
            injected,
            estimate: None,
            errors: None,
            stages: Vec::new(),
            timing_ms: None,
        },
    }
}

/// Mixes a base seed with trial and slave indices (SplitMix64 finaliser).
pub fn derive_seed(base: u64, trial: u64, slot: u64) -> u64 {
    let mut z = base ^ trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates the rig once, then per trial perturbs every slave's ground
/// truth, calibrates it and scores the result.
pub fn run_experiment(
    scene: &SceneSpec,
    rig: &RigSpec,
    perturbation: &PerturbationSpec,
    trials: usize,
    cfg: &PipelineConfig,
) -> Result<CalibrationReport> {
    if trials == 0 {
        return Err(CalibError::invalid("an experiment needs at least one trial"));
    }
    cfg.validate()?;
    perturbation.validate()?;
    let scene_points = generate_scene(scene)?;
    let captures = capture(&scene_points, rig)?;
    let cloud_of = |id: &str| {
        rig.sensors
            .iter()
            .position(|s| s.frame_id == id)
            .map(|i| &captures[i].cloud)
            .ok_or_else(|| CalibError::invalid(format!("rig has no sensor {id:?}")))
    };
    let slaves: Vec<String> =
        if cfg.slaves.is_empty() { rig.slave_ids().into_iter().map(String::from).collect() } else { cfg.slaves.clone() };

    let master = MasterModel::prepare(cloud_of(&rig.master)?, cfg);
    let mut prepared = Vec::with_capacity(slaves.len());
    for id in &slaves {
        prepared.push((id.as_str(), SlaveModel::prepare(cloud_of(id)?, cfg), rig.ground_truth(id)?));
    }

    let mut records = Vec::with_capacity(trials * slaves.len());
    for trial in 0..trials {
        for (slot, (id, model, gt)) in prepared.iter().enumerate() {
            let spec = PerturbationSpec { seed: derive_seed(perturbation.seed, trial as u64, slot as u64), ..*perturbation };
            let (initial, injected) = perturb(gt, &spec)?;
            let start = Instant::now();
            let result = match &master {
                Ok(m) => calibrate_prepared(m, model, &initial, cfg),
                Err(f) => Err(f.clone()),
            };
            let mut row = trial_record(trial, id, &result, Some(gt), Some(&injected), cfg);
            if cfg.report_timing {
                row.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            }
            log::debug!("trial {trial} {id}: success={} reason={}", row.success, row.failure_reason);
            records.push(row);
        }
    }
    CalibrationReport::new(rig.master.clone(), cfg.thresholds, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euler_to_transform;
    use crate::sim::{standard_rig, standard_scene, SensorCapture};

    fn noiseless_captures() -> (RigSpec, Vec<SensorCapture>) {
        let mut scene = standard_scene();
        scene.noise_sigma = 0.0;
        let rig = standard_rig();
        let caps = capture(&generate_scene(&scene).unwrap(), &rig).unwrap();
        (rig, caps)
    }

    #[test]
    fn recovers_documented_perturbation() {
        let (rig, caps) = noiseless_captures();
        let gt = rig.ground_truth("front").unwrap();
        let dev = euler_to_transform(&EulerPose::new(20f64.to_radians(), -40f64.to_radians(), 30f64.to_radians(), 0.08, -0.05, 0.09));
        let initial = RigidTransform { rotation: dev.rotation * gt.rotation, translation: gt.translation + dev.translation };
        let cfg = PipelineConfig::default();
        let cal = calibrate_pair(&caps[0].cloud, &caps[1].cloud, &initial, &cfg).unwrap();
        let err = AxisValues::from_pose(&pose_error(&cal.transform, &gt));
        assert!(err.max_rotation_deg() < 0.5 && err.max_translation_m() < 0.05, "{err:?}");
        let stages: Vec<_> = cal.trace.iter().map(|s| s.stage).collect();
        assert_eq!(stages, [Stage::Ground, Stage::Rough, Stage::Icpn, Stage::Octree]);
        assert!(cal.trace[3].cost < cal.initial.cost);
    }

    #[test]
    fn zero_perturbation_is_exact_and_monotone() {
        let (rig, caps) = noiseless_captures();
        let cfg = PipelineConfig::default();
        for (i, id) in ["front", "back", "left", "right"].iter().enumerate() {
            let gt = rig.ground_truth(id).unwrap();
            let cal = calibrate_pair(&caps[0].cloud, &caps[i + 1].cloud, &gt, &cfg).unwrap();
            let err = AxisValues::from_pose(&pose_error(&cal.transform, &gt));
            assert!(err.max_rotation_deg() < 0.1 && err.max_translation_m() < 0.01, "{id}: {err:?}");
            for w in cal.trace.windows(2) {
                assert!(w[1].cost <= w[0].cost + 1e-12, "{id}: {:?} {} -> {:?} {}", w[0].stage, w[0].cost, w[1].stage, w[1].cost);
            }
        }
    }

    #[test]
    fn ground_only_scene_is_degenerate_at_rough() {
        let mut scene = standard_scene();
        scene.primitives.clear();
        scene.allow_degenerate = true;
        let rig = standard_rig();
        let caps = capture(&generate_scene(&scene).unwrap(), &rig).unwrap();
        let gt = rig.ground_truth("front").unwrap();
        let err = calibrate_pair(&caps[0].cloud, &caps[1].cloud, &gt, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.reason, FailureReason::DegenerateScene);
        assert_eq!(err.stage, Stage::Rough);
    }

    #[test]
    fn single_unperturbed_trial_succeeds() {
        let spec = PerturbationSpec { rotation_deg: 0.0, translation_m: 0.0, seed: 1 };
        let report = run_experiment(&standard_scene(), &standard_rig(), &spec, 1, &PipelineConfig::default()).unwrap();
        assert_eq!(report.trials.len(), 4);
        assert!(report.trials.iter().all(|t| t.success), "{:#?}", report.trials);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 0, 0);
        assert_ne!(a, derive_seed(7, 1, 0));
        assert_ne!(a, derive_seed(7, 0, 1));
        assert_ne!(a, derive_seed(8, 0, 0));
        assert_eq!(a, derive_seed(7, 0, 0));
    }

    #[test]
    fn pose_error_of_known_offset() {
        let gt = euler_to_transform(&EulerPose::<f64>::new(0.1, 0.2, 0.3, 1.0, 2.0, 3.0));
        let d = euler_to_transform(&EulerPose::new(0.01, -0.02, 0.03, 0.0, 0.0, 0.0));
        let est = RigidTransform { rotation: d.rotation * gt.rotation, translation: gt.translation + Vector3::new(0.01, -0.02, 0.03) };
        let e = pose_error(&est, &gt);
        assert!((e.pitch - 0.01).abs() < 1e-12 && (e.roll + 0.02).abs() < 1e-12 && (e.yaw - 0.03).abs() < 1e-12);
        assert!((e.x - 0.01).abs() < 1e-12 && (e.z - 0.03).abs() < 1e-12);
    }
}
