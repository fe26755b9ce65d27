//! Command-line front end: simulate captures, calibrate clouds, run
//! perturbation experiments and score reports against a ground-truth rig.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidar_calib::geometry::{euler_angles, RigidTransform};
use lidar_calib::pcd::{read_cloud, write_cloud};
use lidar_calib::pipeline::{calibrate_pair, derive_seed, pose_error, pose_values, run_experiment, trial_record, PipelineConfig};
use lidar_calib::report::{write_report, AxisValues, CalibrationReport, FailureReason};
use lidar_calib::sim::{capture, generate_scene, perturb, standard_rig, standard_scene, MountPose, PerturbationSpec, RigSpec, SceneSpec};
use lidar_calib::{config, read_report, CalibError};

const EXIT_FAILED_TRIAL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "lidar-calib", version, about = "Multi-LiDAR extrinsic calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate slave clouds against a master cloud.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic scene and write one cloud per sensor.
    Simulate(SimulateArgs),
    /// Perturb, calibrate and score every slave over many trials.
    Experiment(ExperimentArgs),
    /// Fill in per-axis errors of a report from a ground-truth rig.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Master cloud (ASCII PCD).
    #[arg(long)]
    master: PathBuf,
    /// Slave clouds as `id=path` or `path` (id taken from the file name), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    slaves: Vec<String>,
    /// Rig whose poses supply the initial guesses; identity when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene spec (TOML); the built-in standard scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Rig spec (TOML); the built-in standard rig when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Perturbation spec for the initial-guess rig; default bounds when omitted.
    #[arg(long)]
    perturb: Option<PathBuf>,
    /// Overrides the scene and perturbation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    perturb: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Overrides the perturbation and pipeline seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Report holding the estimates.
    report: PathBuf,
    /// Ground-truth rig.
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CalibError> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn emit(report: &CalibrationReport, out: Option<&Path>) -> Result<(), CalibError> {
    match out {
        Some(p) => write_report(report, p),
        None => {
            print!("{}", report.to_toml_string()?);
            Ok(())
        }
    }
}

/// Splits `id=path`, or derives the id from the file stem.
fn slave_entry(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) => (id.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let id = path.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (id, path)
        }
    }
}

fn calibrate(a: CalibrateArgs) -> Result<ExitCode, CalibError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let rig = a.rig.as_deref().map(RigSpec::load).transpose()?;
    let master = read_cloud::<f64>(&a.master)?;
    let master_id = rig.as_ref().map_or_else(|| master.cloud.frame_id.clone(), |r| r.master.clone());

    let mut records = Vec::with_capacity(a.slaves.len());
    for (id, path) in a.slaves.iter().map(|s| slave_entry(s)) {
        let slave = read_cloud::<f64>(&path)?;
        let initial = match &rig {
            Some(r) => r.ground_truth(&id)?,
            None => RigidTransform::identity(),
        };
        let result = calibrate_pair(&master.cloud, &slave.cloud, &initial, &cfg);
        if let Err(f) = &result {
            log::warn!("{id}: {} at {}: {}", f.reason, f.stage.as_str(), f.message);
        }
        records.push(trial_record(0, &id, &result, None, None, &cfg));
    }
    let report = CalibrationReport::new(master_id, cfg.thresholds, records)?;
    emit(&report, a.out.as_deref())?;
    Ok(if report.trials.iter().all(|t| t.success) { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILED_TRIAL) })
}

fn mount_pose(t: &RigidTransform<f64>) -> MountPose {
    let (pitch, roll, yaw) = euler_angles(&t.rotation);
    MountPose {
        x: t.translation.x,
        y: t.translation.y,
        z: t.translation.z,
        yaw_deg: yaw.to_degrees(),
        pitch_deg: pitch.to_degrees(),
        roll_deg: roll.to_degrees(),
    }
}

fn simulate(a: SimulateArgs) -> Result<ExitCode, CalibError> {
    let mut scene = a.scene.as_deref().map_or_else(|| Ok(standard_scene()), SceneSpec::load)?;
    let rig = a.rig.as_deref().map_or_else(|| Ok(standard_rig()), RigSpec::load)?;
    let mut spec = a.perturb.as_deref().map_or_else(|| Ok(PerturbationSpec::default()), PerturbationSpec::load)?;
    if let Some(seed) = a.seed {
        scene.seed = seed;
        spec.seed = seed;
    }
    let captures = capture(&generate_scene(&scene)?, &rig)?;
    fs::create_dir_all(&a.out).map_err(|source| CalibError::Io { path: a.out.clone(), source })?;
    for c in &captures {
        write_cloud(&a.out.join(format!("{}.pcd", c.cloud.frame_id)), &c.cloud)?;
    }

    // Initial guesses: each slave's truth with a seeded deviation, placed in
    // the world through the master's mount.
    let master_pose = rig.sensor(&rig.master).expect("validated rig").pose.transform();
    let mut initial = rig.clone();
    for (slot, sensor) in initial.sensors.iter_mut().filter(|s| s.frame_id != rig.master).enumerate() {
        let gt = rig.ground_truth(&sensor.frame_id)?;
        let (guess, _) = perturb(&gt, &PerturbationSpec { seed: derive_seed(spec.seed, 0, slot as u64), ..spec })?;
        sensor.pose = mount_pose(&master_pose.compose(&guess));
    }
    config::save_toml(&rig, &a.out.join("rig_truth.toml"))?;
    config::save_toml(&initial, &a.out.join("rig_initial.toml"))?;
    println!("wrote {} clouds to {}", captures.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn experiment(a: ExperimentArgs) -> Result<ExitCode, CalibError> {
    let scene = a.scene.as_deref().map_or_else(|| Ok(standard_scene()), SceneSpec::load)?;
    let rig = a.rig.as_deref().map_or_else(|| Ok(standard_rig()), RigSpec::load)?;
    let mut spec = a.perturb.as_deref().map_or_else(|| Ok(PerturbationSpec::default()), PerturbationSpec::load)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
        cfg.seed = seed;
    }
    let report = run_experiment(&scene, &rig, &spec, a.trials, &cfg)?;
    emit(&report, a.out.as_deref())?;
    eprintln!("success rate {:.1}% over {} calibrations", 100.0 * report.success_rate(), report.trials.len());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode, CalibError> {
    let report = read_report(&a.report)?;
    let rig = RigSpec::load(&a.rig)?;
    let thresholds = match a.config.as_deref() {
        Some(p) => PipelineConfig::load(p)?.thresholds,
        None => report.thresholds,
    };
    let mut trials = report.trials;
    for t in &mut trials {
        let gt = rig.ground_truth(&t.slave)?;
        let Some(estimate) = &t.estimate else { continue };
        let est = lidar_calib::euler_to_transform(&estimate.to_pose());
        let errors = AxisValues::from_pose(&pose_error(&est, &gt));
        t.success = thresholds.accepts(&errors);
        t.failure_reason = if t.success { FailureReason::None } else { FailureReason::OutOfTolerance };
        t.errors = Some(errors);
        log::debug!("{}: truth {:?}", t.slave, pose_values(&gt));
    }
    let report = CalibrationReport::new(report.master, thresholds, trials)?;
    emit(&report, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}
