//! Synthetic road scenes, multi-sensor captures and pose perturbations.
//!
//! Scenes are sampled on their surfaces (no ray casting), so every sensor
//! that covers a region receives the very same world points.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{load_toml, parse_toml};
use crate::error::{CalibError, Result};
use crate::geometry::{euler_to_transform, EulerPose, PointCloud, RigidTransform};

/// Captures with fewer points raise a sparse-capture warning.
pub const SPARSE_CAPTURE_POINTS: usize = 200;

const STANDARD_SCENE: &str = include_str!("../data/standard_scene.toml");
const STANDARD_RIG: &str = include_str!("../data/standard_rig.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    /// Vertical rectangle; `size = [length, unused, height]`.
    Wall,
    /// Four sides and a lid; `size = [length, width, height]`.
    Box,
    /// Vertical cylinder mantle; `size = [diameter, unused, height]`.
    Pole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    /// Centre of the footprint at the base.
    pub center: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    pub size: [f64; 3],
    /// Points per m²; falls back to the scene's `primitive_density`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "one")]
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Ground rectangle `[x, y]` in meters, centred on the origin at z = 0.
    pub ground_extent: [f64; 2],
    pub ground_density: f64,
    #[serde(default = "default_primitive_density")]
    pub primitive_density: f64,
    /// Permits a scene with nothing but ground.
    #[serde(default)]
    pub allow_degenerate: bool,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

fn one() -> u32 {
    1
}

fn default_primitive_density() -> f64 {
    30.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.ground_density) || !positive(self.primitive_density) {
            return Err(CalibError::invalid("scene densities must be positive"));
        }
        if !self.ground_extent.iter().all(|e| positive(*e)) {
            return Err(CalibError::invalid("ground extent must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(CalibError::invalid("noise_sigma must be non-negative"));
        }
        if self.primitives.is_empty() && !self.allow_degenerate {
            return Err(CalibError::invalid("scene needs a non-ground primitive (set allow_degenerate to build one without)"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let sized = match p.kind {
                PrimitiveKind::Box => p.size.iter().all(|s| positive(*s)),
                _ => positive(p.size[0]) && positive(p.size[2]),
            };
            if !sized || !p.density.is_none_or(positive) || !p.center.iter().all(|c| c.is_finite()) {
                return Err(CalibError::invalid(format!("primitive {i} needs positive size and density")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = load_toml(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceLabel {
    Ground,
    Primitive(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<SurfaceLabel>,
}

/// Samples every surface uniformly at its density, then adds Gaussian noise.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();

    let [ex, ey] = spec.ground_extent;
    let n = sample_count(ex * ey, spec.ground_density);
    for _ in 0..n {
        points.push(Point3::new(ex * (rng.random::<f64>() - 0.5), ey * (rng.random::<f64>() - 0.5), 0.0));
    }
    labels.resize(points.len(), SurfaceLabel::Ground);

    for (id, prim) in spec.primitives.iter().enumerate() {
        let density = prim.density.unwrap_or(spec.primitive_density);
        let before = points.len();
        sample_primitive(prim, density, &mut rng, &mut points);
        labels.resize(labels.len() + points.len() - before, SurfaceLabel::Primitive(id));
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| CalibError::invalid(e.to_string()))?;
        for p in &mut points {
            *p += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    Ok(Scene { points, labels })
}

fn sample_count(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

fn sample_primitive(prim: &Primitive, density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<Point3<f64>>) {
    let yaw = prim.yaw_deg.to_radians();
    let u = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let v = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    let base = Point3::from(prim.center);
    let [l, w, h] = prim.size;
    match prim.kind {
        PrimitiveKind::Wall => {
            for _ in 0..sample_count(l * h, density) {
                let a = l * (rng.random::<f64>() - 0.5);
                out.push(base + u * a + Vector3::z() * (h * rng.random::<f64>()));
            }
        }
        PrimitiveKind::Pole => {
            let r = 0.5 * l;
            for _ in 0..sample_count(std::f64::consts::TAU * r * h, density) {
                let t = std::f64::consts::TAU * rng.random::<f64>();
                out.push(base + (u * t.cos() + v * t.sin()) * r + Vector3::z() * (h * rng.random::<f64>()));
            }
        }
        PrimitiveKind::Box => {
            // Faces: ±u sides (w × h), ±v sides (l × h), lid (l × w).
            let areas = [w * h, w * h, l * h, l * h, l * w];
            let total: f64 = areas.iter().sum();
            for _ in 0..sample_count(total, density) {
                let mut pick = total * rng.random::<f64>();
                let face = areas.iter().position(|a| {
                    pick -= a;
                    pick < 0.0
                });
                let (s, t) = (rng.random::<f64>() - 0.5, rng.random::<f64>());
                let p = match face.unwrap_or(4) {
                    0 => base + u * (0.5 * l) + v * (w * s) + Vector3::z() * (h * t),
                    1 => base - u * (0.5 * l) + v * (w * s) + Vector3::z() * (h * t),
                    2 => base + v * (0.5 * w) + u * (l * s) + Vector3::z() * (h * t),
                    3 => base - v * (0.5 * w) + u * (l * s) + Vector3::z() * (h * t),
                    _ => base + u * (l * s) + v * (w * (t - 0.5)) + Vector3::z() * h,
                };
                out.push(p);
            }
        }
    }
}

/// Sensor mounting pose (sensor → vehicle), angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MountPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl MountPose {
    pub fn transform(&self) -> RigidTransform<f64> {
        euler_to_transform(&EulerPose::new(
            self.pitch_deg.to_radians(),
            self.roll_deg.to_radians(),
            self.yaw_deg.to_radians(),
            self.x,
            self.y,
            self.z,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub frame_id: String,
    pub pose: MountPose,
    /// Horizontal field of view centred on the sensor's +x axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    /// Frame id of the master sensor.
    #[serde(default = "default_master")]
    pub master: String,
    pub max_range: f64,
    #[serde(default = "full_circle")]
    pub fov_deg: f64,
    pub sensors: Vec<SensorSpec>,
}

fn default_master() -> String {
    "top".into()
}

fn full_circle() -> f64 {
    360.0
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        let masters = self.sensors.iter().filter(|s| s.frame_id == self.master).count();
        if masters != 1 {
            return Err(CalibError::invalid(format!("rig needs exactly one sensor named {:?}", self.master)));
        }
        if self.sensors.len() < 2 {
            return Err(CalibError::invalid("rig needs at least one slave"));
        }
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.frame_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CalibError::invalid("sensor frame ids must be distinct"));
        }
        for s in &self.sensors {
            let (range, fov) = self.limits(s);
            if !(range > 0.0) || !(fov > 0.0 && fov <= 360.0) {
                return Err(CalibError::invalid(format!("sensor {} needs range > 0 and fov in (0, 360]", s.frame_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rig: Self = load_toml(path)?;
        rig.validate()?;
        Ok(rig)
    }

    fn limits(&self, s: &SensorSpec) -> (f64, f64) {
        (s.max_range.unwrap_or(self.max_range), s.fov_deg.unwrap_or(self.fov_deg))
    }

    pub fn sensor(&self, frame_id: &str) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.frame_id == frame_id)
    }

    pub fn slave_ids(&self) -> Vec<&str> {
        self.sensors.iter().filter(|s| s.frame_id != self.master).map(|s| s.frame_id.as_str()).collect()
    }

    /// Ground-truth slave → master transform.
    pub fn ground_truth(&self, slave: &str) -> Result<RigidTransform<f64>> {
        let find =
            |id: &str| self.sensor(id).map(|s| s.pose.transform()).ok_or_else(|| CalibError::invalid(format!("rig has no sensor {id:?}")));
        Ok(find(&self.master)?.inverse().compose(&find(slave)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorCapture {
    pub cloud: PointCloud<f64>,
    /// Scene index of each captured point.
    pub indices: Vec<usize>,
    pub labels: Vec<SurfaceLabel>,
    /// Set when fewer than [`SPARSE_CAPTURE_POINTS`] were seen.
    pub sparse: bool,
}

/// Per sensor (in rig order): the scene points within range and horizontal
/// field of view, expressed in the sensor frame.
pub fn capture(scene: &Scene, rig: &RigSpec) -> Result<Vec<SensorCapture>> {
    rig.validate()?;
    let mut out = Vec::with_capacity(rig.sensors.len());
    for s in &rig.sensors {
        let (range, fov) = rig.limits(s);
        let half_fov = 0.5 * fov.to_radians();
        let to_sensor = s.pose.transform().inverse();
        let (mut pts, mut indices, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (i, p) in scene.points.iter().enumerate() {
            let q = to_sensor.transform_point(p);
            if q.coords.norm() > range || (fov < 360.0 && q.y.atan2(q.x).abs() > half_fov) {
                continue;
            }
            pts.push(q);
            indices.push(i);
            labels.push(scene.labels[i]);
        }
        let sparse = pts.len() < SPARSE_CAPTURE_POINTS;
        if sparse {
            log::warn!("sensor {} captured only {} points", s.frame_id, pts.len());
        }
        out.push(SensorCapture { cloud: PointCloud::new(s.frame_id.clone(), pts)?, indices, labels, sparse });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Bound on each of pitch, roll and yaw, in degrees.
    #[serde(default = "default_rotation_bound")]
    pub rotation_deg: f64,
    /// Bound on each of x, y and z, in meters.
    #[serde(default = "default_translation_bound")]
    pub translation_m: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rotation_bound() -> f64 {
    45.0
}

fn default_translation_bound() -> f64 {
    0.10
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { rotation_deg: default_rotation_bound(), translation_m: default_translation_bound(), seed: 0 }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.translation_m >= 0.0) || !(self.rotation_deg < 90.0) {
            return Err(CalibError::invalid("perturbation bounds must be non-negative (rotation below 90°)"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = load_toml(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws a uniform deviation per axis and applies it to `gt`.
///
/// The rotation deviation multiplies from the left and the translation adds,
/// so the returned deviation is exactly the error of the initial guess.
pub fn perturb(gt: &RigidTransform<f64>, spec: &PerturbationSpec) -> Result<(RigidTransform<f64>, EulerPose<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rot = spec.rotation_deg.to_radians();
    let mut draw = |bound: f64| bound * (2.0 * rng.random::<f64>() - 1.0);
    let dev = EulerPose::new(draw(rot), draw(rot), draw(rot), 0.0, 0.0, 0.0);
    let dev = EulerPose { x: draw(spec.translation_m), y: draw(spec.translation_m), z: draw(spec.translation_m), ..dev };
    let d = euler_to_transform(&dev);
    let initial = RigidTransform { rotation: d.rotation * gt.rotation, translation: gt.translation + d.translation };
    Ok((initial, dev))
}

/// The shipped reference scene: ground, three walls, four boxes, six poles.
pub fn standard_scene() -> SceneSpec {
    parse_toml(STANDARD_SCENE, Path::new("standard_scene.toml")).expect("shipped scene parses")
}

/// The shipped reference rig: a top master and four slaves.
pub fn standard_rig() -> RigSpec {
    parse_toml(STANDARD_RIG, Path::new("standard_rig.toml")).expect("shipped rig parses")
}

pub fn standard_scene_text() -> &'static str {
    STANDARD_SCENE
}

pub fn standard_rig_text() -> &'static str {
    STANDARD_RIG
}
