use std::path::{Path, PathBuf};

use orbit_mocap::camera::synthesize_tracks;
use orbit_mocap::dict::{learn_dictionary, learn_dictionary_up_to, LearnOptions};
use orbit_mocap::eval::{
    grouped_joint_table, reconstruction_error, run_sweep, Method, SweepConfig, SweepResult, DEFAULT_VELOCITIES,
};
use orbit_mocap::io;
use orbit_mocap::pipeline::{self, PipelineConfig};
use orbit_mocap::skeleton::Skeleton;
use orbit_mocap::synthetic::planted_sequence;
use serde::{Deserialize, Serialize};

use crate::config::{self, CliError, CliResult};
use crate::{EvalArgs, LearnDictArgs, ReconstructArgs, SweepArgs, SynthArgs};

/// Frame rate assumed for pose and track files when none is given.
const DEFAULT_FPS: f64 = 24.0;

/// Angular-velocity functions per bundled synthetic sequence.
const PLANTED_FUNCTIONS: usize = 4;

fn skeleton(path: Option<&PathBuf>) -> CliResult<Skeleton> {
    match path {
        Some(p) => Ok(io::read_skeleton(p)?),
        None => Ok(Skeleton::body15()),
    }
}

fn out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| {
        CliError::Lib(orbit_mocap::Error::Io {
            path: path.display().to_string(),
            source,
        })
    })
}

fn check_joint_count(what: &str, p: usize, sk: &Skeleton) -> CliResult<()> {
    if p != sk.num_joints() {
        return Err(orbit_mocap::Error::ShapeMismatch(format!(
            "{what} has {p} joints, the skeleton {}",
            sk.num_joints()
        ))
        .into());
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = config::load(args.config.as_deref())?.orbit;
    config::apply_orbit(&mut spec, &args.orbit)?;
    let sk = skeleton(args.skeleton.as_ref())?;
    let gt = io::read_poses3d(&args.poses, args.gt_fps.unwrap_or(spec.fps))?;
    check_joint_count("ground truth", gt.num_joints(), &sk)?;
    let syn = synthesize_tracks(&gt, &spec)?;
    out_dir(&args.out)?;
    io::write_tracks(&args.out.join("tracks2d.csv"), &syn.tracks)?;
    io::write_cameras(&args.out.join("cameras_gt.csv"), &syn.cameras)?;
    io::write_json(&args.out.join("spec.json"), &spec)?;
    println!(
        "{} frames, {} joints, {} outliers -> {}",
        syn.tracks.len(),
        syn.tracks.num_joints(),
        syn.outliers.iter().flatten().filter(|o| **o).count(),
        args.out.display()
    );
    Ok(())
}

pub fn learn_dict(args: &LearnDictArgs) -> CliResult<()> {
    let sk = skeleton(args.skeleton.as_ref())?;
    let corpus = io::read_corpus_dir(&args.corpus)?;
    if let Some(p) = corpus.first() {
        check_joint_count("corpus", p.num_joints(), &sk)?;
    }
    let mut opts = LearnOptions {
        align_rotation: !args.no_align,
        normalize_scale: !args.no_normalize,
        ..Default::default()
    };
    let dict = match args.k {
        Some(k) => {
            opts.k = k;
            learn_dictionary(&corpus, &sk, &opts)?
        }
        None => learn_dictionary_up_to(&corpus, &sk, &opts)?,
    };
    io::write_dictionary(&args.out, &dict)?;
    println!("{} poses, {} bases", corpus.len(), dict.bases.len());
    println!("basis  explained");
    for (i, v) in dict.explained.iter().enumerate().take(dict.bases.len()) {
        println!("{:5}  {:.4}", i + 1, v);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    /// Frames where the depth-flipped candidate was kept.
    pub flipped_frames: usize,
    pub mean_frame_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaSummary {
    pub alpha: f64,
    pub rounds: usize,
    pub objective_trace: Vec<f64>,
    pub inner_iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub tracks: String,
    pub dictionary: String,
    pub config: PipelineConfig,
    pub frames: usize,
    pub joints: usize,
    /// RMS track coordinate; the solver works in units of it.
    pub scale: f64,
    pub init: InitSummary,
    pub ba: Option<BaSummary>,
}

pub fn reconstruct(args: &ReconstructArgs) -> CliResult<()> {
    let mut cfg = config::load(args.config.as_deref())?.pipeline;
    config::apply_solver(&mut cfg, &args.solver)?;
    cfg.skip_ba |= args.skip_ba;
    let sk = skeleton(args.skeleton.as_ref())?;
    let dict = io::read_dictionary(&args.dict)?;
    let tracks = io::read_tracks(&args.tracks, args.fps.unwrap_or(DEFAULT_FPS))?;
    let rec = pipeline::reconstruct(&tracks, &dict, &sk, &cfg)?;
    out_dir(&args.out)?;
    io::write_poses3d(&args.out.join("poses3d.csv"), &rec.poses)?;
    io::write_cameras(&args.out.join("cameras.csv"), &rec.cameras)?;
    let est = &rec.init.estimates;
    let report = ReconstructReport {
        tracks: args.tracks.display().to_string(),
        dictionary: args.dict.display().to_string(),
        config: cfg,
        frames: tracks.len(),
        joints: tracks.num_joints(),
        scale: rec.scale,
        init: InitSummary {
            flipped_frames: rec.init.flipped.iter().filter(|f| **f).count(),
            mean_frame_objective: est.iter().map(|e| e.objective).sum::<f64>() / est.len() as f64,
        },
        ba: rec.ba.as_ref().map(|st| BaSummary {
            alpha: st.alpha,
            rounds: st.objective_trace.len() - 1,
            objective_trace: st.objective_trace.clone(),
            inner_iterations: st.inner_iterations.clone(),
        }),
    };
    io::write_json(&args.out.join("report.json"), &report)?;
    // Timings go to stdout only so that the written files are reproducible.
    match &report.ba {
        Some(ba) => println!(
            "{} frames: init {:.1} s, bundle adjustment {} rounds in {:.1} s",
            report.frames, rec.init_seconds, ba.rounds, rec.ba_seconds
        ),
        None => println!("{} frames: init {:.1} s", report.frames, rec.init_seconds),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointError {
    pub joint: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimate: String,
    pub ground_truth: String,
    pub sequence: String,
    pub frames: usize,
    pub mean: f64,
    pub per_joint: Vec<JointError>,
    /// Left and right joints merged.
    pub per_part: Vec<JointError>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let sk = skeleton(args.skeleton.as_ref())?;
    let joints = match &args.joints {
        None => sk.evaluation_joints(),
        Some(names) => names
            .iter()
            .map(|n| {
                sk.joint_index(n)
                    .ok_or_else(|| CliError::Usage(format!("unknown joint `{n}`")))
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    let est = io::read_poses3d(&args.est, DEFAULT_FPS)?;
    let gt = io::read_poses3d(&args.gt, DEFAULT_FPS)?;
    check_joint_count("ground truth", gt.num_joints(), &sk)?;
    let rep = reconstruction_error(&est, &gt, &joints, &args.name)?;
    out_dir(&args.out)?;
    io::write_errors(&args.out.join("errors.csv"), std::slice::from_ref(&rep))?;
    let names = sk.joint_names();
    let report = EvalReport {
        estimate: args.est.display().to_string(),
        ground_truth: args.gt.display().to_string(),
        sequence: args.name.clone(),
        frames: est.len(),
        mean: rep.mean,
        per_joint: rep
            .joints
            .iter()
            .zip(&rep.per_joint)
            .map(|(&j, &e)| JointError {
                joint: names[j].clone(),
                error: e,
            })
            .collect(),
        per_part: grouped_joint_table(&rep, &sk)
            .into_iter()
            .map(|(joint, error)| JointError { joint, error })
            .collect(),
    };
    io::write_json(&args.out.join("report.json"), &report)?;
    println!("mean error {:.3}", rep.mean);
    for p in &report.per_part {
        println!("  {:10} {:.3}", p.joint, p.error);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// BA error at the fastest velocity is below that at the slowest.
    pub motion_helps: bool,
    /// Sweep means satisfy BA <= BA-no-art <= Initial.
    pub ordering: bool,
}

impl Trend {
    fn of(result: &SweepResult, velocities: &[f64]) -> Trend {
        let (mut lo, mut hi) = (velocities[0], velocities[0]);
        for &v in velocities {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let ba = |v| result.error(v, Method::Ba).unwrap_or(f64::NAN);
        Trend {
            motion_helps: hi > lo && ba(hi) < ba(lo),
            ordering: result.sweep_mean(Method::Ba) <= result.sweep_mean(Method::BaNoArt)
                && result.sweep_mean(Method::BaNoArt) <= result.sweep_mean(Method::Initial),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMeans {
    #[serde(rename = "Initial")]
    pub initial: f64,
    #[serde(rename = "BA")]
    pub ba: f64,
    #[serde(rename = "BA-no-art")]
    pub ba_no_art: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    /// Input files, or `planted:<seed>` for generated sequences.
    pub sequences: Vec<String>,
    pub velocities: Vec<f64>,
    pub sweep_mean: MethodMeans,
    pub trend: Trend,
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let file = config::load(args.config.as_deref())?;
    let mut cfg = SweepConfig {
        orbit: file.orbit,
        pipeline: file.pipeline,
        joints: None,
    };
    config::apply_orbit(&mut cfg.orbit, &args.orbit)?;
    config::apply_solver(&mut cfg.pipeline, &args.solver)?;
    let velocities = args.velocities.clone().unwrap_or_else(|| DEFAULT_VELOCITIES.to_vec());
    if let Some(v) = velocities.iter().find(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!("velocity {v} is not finite")));
    }
    let fps = args.gt_fps.unwrap_or(cfg.orbit.fps);
    let sk = skeleton(args.skeleton.as_ref())?;
    let dict = io::read_dictionary(&args.dict)?;
    let (names, sequences) = match (args.planted, args.gt.is_empty()) {
        (Some(n), true) if n > 0 => {
            let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.orbit.seed.wrapping_add(i)).collect();
            let seqs = seeds
                .iter()
                .map(|&s| planted_sequence(args.frames, fps, PLANTED_FUNCTIONS, s))
                .collect::<Result<Vec<_>, _>>()?;
            (seeds.iter().map(|s| format!("planted:{s}")).collect::<Vec<_>>(), seqs)
        }
        (None, false) => {
            let seqs = args
                .gt
                .iter()
                .map(|p| io::read_poses3d(p, fps))
                .collect::<Result<Vec<_>, _>>()?;
            (args.gt.iter().map(|p| p.display().to_string()).collect(), seqs)
        }
        _ => return Err(CliError::Usage("give either --gt files or --planted N (N >= 1)".into())),
    };
    for s in &sequences {
        check_joint_count("ground truth", s.num_joints(), &sk)?;
    }
    let result = run_sweep(&sequences, &velocities, &dict, &sk, &cfg)?;
    out_dir(&args.out)?;
    io::write_sweep(&args.out, &result)?;
    let trend = Trend::of(&result, &velocities);
    let report = SweepReport {
        config: cfg,
        sequences: names,
        velocities: velocities.clone(),
        sweep_mean: MethodMeans {
            initial: result.sweep_mean(Method::Initial),
            ba: result.sweep_mean(Method::Ba),
            ba_no_art: result.sweep_mean(Method::BaNoArt),
        },
        trend: trend.clone(),
    };
    io::write_json(&args.out.join("report.json"), &report)?;
    println!("{:>8} {:>10} {:>10} {:>10}", "deg/s", "Initial", "BA", "BA-no-art");
    for &v in &velocities {
        let e = |m| result.error(v, m).unwrap_or(f64::NAN);
        println!(
            "{v:>8} {:>10.2} {:>10.2} {:>10.2}",
            e(Method::Initial),
            e(Method::Ba),
            e(Method::BaNoArt)
        );
    }
    let m = &report.sweep_mean;
    println!("{:>8} {:>10.2} {:>10.2} {:>10.2}", "mean", m.initial, m.ba, m.ba_no_art);
    if args.check_trend && !(trend.motion_helps && trend.ordering) {
        return Err(CliError::Check(format!(
            "trend check failed: motion helps = {}, ordering = {}",
            trend.motion_helps, trend.ordering
        )));
    }
    Ok(())
}
