//! Procrustes-aligned reconstruction error, error reports, and the
//! camera-velocity sweep.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::BAConfig;
use crate::camera::{synthesize_tracks, OrbitSpec};
use crate::dict::PoseDictionary;
use crate::error::{Error, Result};
use crate::pipeline::{adjust, reconstruct, PipelineConfig};
use crate::skeleton::{Pose3D, PoseSeq3D, Skeleton};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, pose: &Pose3D) -> Pose3D {
        let mut coords = self.rotation * &pose.coords * self.scale;
        for mut c in coords.column_iter_mut() {
            c += self.translation;
        }
        Pose3D { coords }
    }
}

fn centered(m: &Matrix3xX<f64>) -> (Matrix3xX<f64>, Vector3<f64>) {
    let mean = m.column_mean();
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    (c, mean)
}

/// Rotation `Q` maximising `tr(Q^T dst src^T)` for centred point sets, and the
/// attained trace. With `allow_reflection` the result may have `det = -1`.
pub(crate) fn best_rotation(src: &Matrix3xX<f64>, dst: &Matrix3xX<f64>, allow_reflection: bool) -> (Matrix3<f64>, f64) {
    let cov: Matrix3<f64> = dst * src.transpose();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if !allow_reflection && (u * v_t).determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let (imin, _) = svd.singular_values.argmin();
        d[imin] = -1.0;
    }
    let q = u * Matrix3::from_diagonal(&d) * v_t;
    let trace = svd.singular_values.component_mul(&d).sum();
    (q, trace)
}

/// Least-squares similarity taking `est` onto `gt`, and the transformed `est`.
pub fn procrustes_align(est: &Pose3D, gt: &Pose3D, allow_reflection: bool) -> Result<(Similarity, Pose3D)> {
    if est.num_joints() != gt.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} joints, ground truth {}",
            est.num_joints(),
            gt.num_joints()
        )));
    }
    let (x, mx) = centered(&est.coords);
    let (y, my) = centered(&gt.coords);
    let var_y = y.norm_squared();
    // Centring leaves round-off of the order of the centroid's magnitude.
    let floor = 1e-12 * (1.0 + my.norm());
    if !(var_y > floor * floor * y.ncols() as f64) || !var_y.is_finite() {
        return Err(Error::Degenerate("ground-truth pose has zero spread".into()));
    }
    let var_x = x.norm_squared();
    let (rotation, trace) = best_rotation(&x, &y, allow_reflection);
    let scale = if var_x > 0.0 { (trace / var_x).max(0.0) } else { 0.0 };
    let translation = my - rotation * mx * scale;
    let sim = Similarity {
        rotation,
        scale,
        translation,
    };
    let aligned = sim.apply(est);
    Ok((sim, aligned))
}

fn select(pose: &Pose3D, joints: &[usize]) -> Pose3D {
    Pose3D {
        coords: pose.coords.select_columns(joints),
    }
}

/// Errors of one sequence, in the units of the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub sequence_id: String,
    /// Indices of the evaluated joints.
    pub joints: Vec<usize>,
    /// Mean joint distance of each frame.
    pub per_frame: Vec<f64>,
    /// Mean over frames for each evaluated joint, in the order of `joints`.
    pub per_joint: Vec<f64>,
    /// `per_frame[t][i]`: distance of joint `joints[i]` in frame `t`.
    pub distances: Vec<Vec<f64>>,
    pub mean: f64,
}

/// Per-frame Procrustes alignment over `joints`, then mean Euclidean distance.
pub fn reconstruction_error(
    est: &PoseSeq3D,
    gt: &PoseSeq3D,
    joints: &[usize],
    sequence_id: &str,
) -> Result<ErrorReport> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} frames, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    if est.num_joints() != gt.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} joints, ground truth {}",
            est.num_joints(),
            gt.num_joints()
        )));
    }
    if joints.is_empty() || joints.iter().any(|&j| j >= gt.num_joints()) {
        return Err(Error::InvalidParameter(format!(
            "joint subset {joints:?} invalid for {} joints",
            gt.num_joints()
        )));
    }
    let mut distances = Vec::with_capacity(est.len());
    for (t, (e, g)) in est.frames.iter().zip(&gt.frames).enumerate() {
        let (e, g) = (select(e, joints), select(g, joints));
        let (_, aligned) = procrustes_align(&e, &g, false).map_err(|err| err.in_frame(t))?;
        let d: Vec<f64> = (0..joints.len())
            .map(|i| (aligned.coords.column(i) - g.coords.column(i)).norm())
            .collect();
        distances.push(d);
    }
    let n = distances.len() as f64;
    let per_frame: Vec<f64> = distances
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let per_joint: Vec<f64> = (0..joints.len())
        .map(|i| distances.iter().map(|d| d[i]).sum::<f64>() / n)
        .collect();
    let mean = per_frame.iter().sum::<f64>() / n;
    Ok(ErrorReport {
        sequence_id: sequence_id.to_string(),
        joints: joints.to_vec(),
        per_frame,
        per_joint,
        distances,
        mean,
    })
}

/// Per-joint table with left/right joints merged: one row per body part, the
/// value being the mean of its members' per-joint errors.
pub fn grouped_joint_table(report: &ErrorReport, sk: &Skeleton) -> Vec<(String, f64)> {
    sk.symmetric_groups(&report.joints)
        .into_iter()
        .map(|(name, members)| {
            let vals: Vec<f64> = members
                .iter()
                .map(|j| {
                    let i = report.joints.iter().position(|x| x == j).expect("member of the subset");
                    report.per_joint[i]
                })
                .collect();
            (name, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Mean of per-sequence means, each sequence weighted equally.
pub fn mean_over_sequences(reports: &[ErrorReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64
}

/// Method tags of a sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Initial,
    #[serde(rename = "BA")]
    Ba,
    #[serde(rename = "BA-no-art")]
    BaNoArt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Initial, Method::Ba, Method::BaNoArt];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Initial => "Initial",
            Method::Ba => "BA",
            Method::BaNoArt => "BA-no-art",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Default angular velocities of the sweep, deg/s.
pub const DEFAULT_VELOCITIES: [f64; 9] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Template for the synthetic camera; velocity, frame rate and duration
    /// are overridden per cell. Sequence `i` uses seed `orbit.seed + i`.
    pub orbit: OrbitSpec,
    pub pipeline: PipelineConfig,
    /// Evaluated joints; `None` means the skeleton's evaluation set.
    pub joints: Option<Vec<usize>>,
}

/// One evaluated (sequence, velocity, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub sequence: usize,
    pub velocity: f64,
    pub method: Method,
    pub report: ErrorReport,
}

/// Mean over sequences for one (velocity, method).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub velocity: f64,
    pub method: Method,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by velocity (input order), then method.
    pub rows: Vec<SweepRow>,
    /// Ordered by velocity, sequence, method.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn error(&self, velocity: f64, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.velocity == velocity && r.method == method)
            .map(|r| r.error)
    }

    /// Mean of a method's rows over all velocities.
    pub fn sweep_mean(&self, method: Method) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.error)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sweep_cell(
    gt: &PoseSeq3D,
    sequence: usize,
    velocity: f64,
    dict: &PoseDictionary,
    sk: &Skeleton,
    joints: &[usize],
    cfg: &SweepConfig,
) -> Result<Vec<SweepCell>> {
    let spec = OrbitSpec {
        omega_deg_s: velocity,
        fps: gt.fps,
        duration_s: gt.len() as f64 / gt.fps,
        seed: cfg.orbit.seed.wrapping_add(sequence as u64),
        ..cfg.orbit.clone()
    };
    let syn = synthesize_tracks(gt, &spec)?;
    let init_only = PipelineConfig {
        skip_ba: true,
        ..cfg.pipeline.clone()
    };
    let rec = reconstruct(&syn.tracks, dict, sk, &init_only)?;
    let id = format!("seq{sequence}@{velocity}");
    let mut out = vec![SweepCell {
        sequence,
        velocity,
        method: Method::Initial,
        report: reconstruction_error(&rec.poses, gt, joints, &id)?,
    }];
    for (method, gamma) in [(Method::Ba, cfg.pipeline.ba.gamma), (Method::BaNoArt, 0.0)] {
        let ba = BAConfig {
            gamma,
            ..cfg.pipeline.ba.clone()
        };
        let (poses, ..) = adjust(&syn.tracks, &rec.init, sk, &ba)?;
        out.push(SweepCell {
            sequence,
            velocity,
            method,
            report: reconstruction_error(&poses, gt, joints, &id)?,
        });
    }
    Ok(out)
}

/// Synthesises every sequence at every velocity, then evaluates the
/// initialisation, bundle adjustment, and bundle adjustment without the
/// articulation term (`gamma = 0`). Cells run in parallel; the result does
/// not depend on the thread count.
pub fn run_sweep(
    gt_sequences: &[PoseSeq3D],
    velocities: &[f64],
    dict: &PoseDictionary,
    sk: &Skeleton,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if gt_sequences.is_empty() || velocities.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one sequence and one velocity".into(),
        ));
    }
    if let Some(v) = velocities.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("velocity {v} is not finite")));
    }
    cfg.pipeline.validate()?;
    let joints = cfg.joints.clone().unwrap_or_else(|| sk.evaluation_joints());
    let jobs: Vec<(usize, f64)> = velocities
        .iter()
        .flat_map(|&v| (0..gt_sequences.len()).map(move |s| (s, v)))
        .collect();
    let results: Vec<Result<Vec<SweepCell>>> = jobs
        .par_iter()
        .map(|&(s, v)| {
            sweep_cell(&gt_sequences[s], s, v, dict, sk, &joints, cfg).map_err(|e| Error::SweepCell {
                sequence: s,
                velocity: v,
                source: Box::new(e),
            })
        })
        .collect();
    let mut cells = Vec::with_capacity(3 * jobs.len());
    for r in results {
        cells.extend(r?);
    }
    let mut rows = Vec::with_capacity(3 * velocities.len());
    for &v in velocities {
        for m in Method::ALL {
            let errs: Vec<f64> = cells
                .iter()
                .filter(|c| c.velocity == v && c.method == m)
                .map(|c| c.report.mean)
                .collect();
            rows.push(SweepRow {
                velocity: v,
                method: m,
                error: errs.iter().sum::<f64>() / errs.len() as f64,
            });
        }
    }
    Ok(SweepResult { rows, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_sequence, random_corpus};
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        Similarity {
            rotation: *Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).matrix(),
            scale: rng.random_range(0.2..5.0),
            translation: Vector3::new(
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            ),
        }
    }

    fn residual(a: &Pose3D, b: &Pose3D) -> f64 {
        (&a.coords - &b.coords).norm()
    }

    #[test]
    fn planted_similarity_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for gt in random_corpus(50, 2) {
            let sim = random_similarity(&mut rng);
            let est = sim.apply(&gt);
            let (_, aligned) = procrustes_align(&est, &gt, false).unwrap();
            assert!(residual(&aligned, &gt) <= 1e-9);
        }
    }

    #[test]
    fn identical_poses_give_identity() {
        let gt = random_corpus(1, 3).remove(0);
        let (sim, aligned) = procrustes_align(&gt, &gt, false).unwrap();
        assert!((sim.rotation - Matrix3::identity()).amax() <= 1e-12);
        assert!((sim.scale - 1.0).abs() <= 1e-12);
        assert!(sim.translation.norm() <= 1e-9);
        assert!(residual(&aligned, &gt) <= 1e-9);
    }

    #[test]
    fn alignment_beats_sampled_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut poses = random_corpus(2, 5);
        let gt = poses.pop().unwrap();
        let est = poses.pop().unwrap();
        let (_, aligned) = procrustes_align(&est, &gt, false).unwrap();
        let best = residual(&aligned, &gt);
        for _ in 0..100_000 {
            let cand = random_similarity(&mut rng).apply(&est);
            assert!(residual(&cand, &gt) >= best - 1e-9);
        }
    }

    #[test]
    fn reflection_is_excluded_unless_allowed() {
        let gt = random_corpus(1, 6).remove(0);
        let mirror = Pose3D {
            coords: Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)) * &gt.coords,
        };
        let (sim, aligned) = procrustes_align(&mirror, &gt, false).unwrap();
        assert!(sim.rotation.determinant() > 0.0);
        assert!(residual(&aligned, &gt) > 1.0);
        let (sim, aligned) = procrustes_align(&mirror, &gt, true).unwrap();
        assert!(sim.rotation.determinant() < 0.0);
        assert!(residual(&aligned, &gt) <= 1e-9);
    }

    #[test]
    fn degenerate_ground_truth_is_rejected() {
        let gt = Pose3D {
            coords: Matrix3xX::from_element(15, 2.0),
        };
        let est = random_corpus(1, 7).remove(0);
        assert!(matches!(procrustes_align(&est, &gt, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alignment_respects_joint_relabelling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut poses = random_corpus(2, 9);
        let (gt, est) = (poses.pop().unwrap(), poses.pop().unwrap());
        let mut perm: Vec<usize> = (0..15).collect();
        for i in (1..15).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let (_, a) = procrustes_align(&est, &gt, false).unwrap();
        let (_, b) = procrustes_align(&select(&est, &perm), &select(&gt, &perm), false).unwrap();
        assert!((residual(&a, &gt) - residual(&b, &select(&gt, &perm))).abs() <= 1e-9);
    }

    #[test]
    fn perfect_estimate_has_zero_error() {
        let sk = Skeleton::body15();
        let gt = planted_sequence(20, 24.0, 3, 1).unwrap();
        let rep = reconstruction_error(&gt, &gt, &sk.evaluation_joints(), "s").unwrap();
        assert!(rep.mean <= 1e-9);
        assert!(rep
            .per_frame
            .iter()
            .chain(&rep.per_joint)
            .all(|&v| (0.0..=1e-9).contains(&v)));
        assert_eq!(rep.per_frame.len(), 20);
        assert_eq!(rep.per_joint.len(), 12);
    }

    #[test]
    fn perturbed_joint_dominates_its_report() {
        let sk = Skeleton::body15();
        let joints = sk.evaluation_joints();
        let gt = planted_sequence(10, 24.0, 3, 2).unwrap();
        let target = joints[4];
        let mut est = gt.clone();
        for f in &mut est.frames {
            f.coords[(0, target)] += 10.0;
        }
        let rep = reconstruction_error(&est, &gt, &joints, "s").unwrap();
        let (imax, max) = rep
            .per_joint
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(imax, 4);
        let others = rep
            .per_joint
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 4)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        assert!(max > 3.0 * others, "{:?}", rep.per_joint);
        let avg = rep.per_frame.iter().sum::<f64>() / rep.per_frame.len() as f64;
        assert!((rep.mean - avg).abs() <= 1e-12);
    }

    #[test]
    fn error_is_invariant_to_similarities_of_the_estimate() {
        let sk = Skeleton::body15();
        let joints = sk.evaluation_joints();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = planted_sequence(10, 24.0, 3, 3).unwrap();
        let est = planted_sequence(10, 24.0, 3, 4).unwrap();
        let base = reconstruction_error(&est, &gt, &joints, "s").unwrap();
        let sim = random_similarity(&mut rng);
        let moved = PoseSeq3D::new(est.frames.iter().map(|p| sim.apply(p)).collect(), 24.0).unwrap();
        let rep = reconstruction_error(&moved, &gt, &joints, "s").unwrap();
        assert!((rep.mean - base.mean).abs() <= 1e-9);
        // A rigid motion of the ground truth leaves the error unchanged; a
        // scaling of it rescales the error.
        let rigid = Similarity { scale: 1.0, ..sim };
        let gt_moved = PoseSeq3D::new(gt.frames.iter().map(|p| rigid.apply(p)).collect(), 24.0).unwrap();
        let rep = reconstruction_error(&est, &gt_moved, &joints, "s").unwrap();
        assert!((rep.mean - base.mean).abs() <= 1e-9);
        let gt_scaled = PoseSeq3D::new(
            gt.frames
                .iter()
                .map(|p| Pose3D {
                    coords: &p.coords * 2.0,
                })
                .collect(),
            24.0,
        )
        .unwrap();
        let rep = reconstruction_error(&est, &gt_scaled, &joints, "s").unwrap();
        assert!((rep.mean - 2.0 * base.mean).abs() <= 1e-9);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let sk = Skeleton::body15();
        let a = planted_sequence(10, 24.0, 3, 1).unwrap();
        let b = planted_sequence(11, 24.0, 3, 1).unwrap();
        assert!(matches!(
            reconstruction_error(&a, &b, &sk.evaluation_joints(), "s"),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grouped_table_follows_the_published_arithmetic() {
        // Six body parts, left and right members straddling the part value;
        // the overall mean is the mean of the six rows.
        let sk = Skeleton::body15();
        let joints = sk.evaluation_joints();
        let parts = [
            ("hip", 70.4),
            ("knee", 62.8),
            ("ankle", 39.1),
            ("shoulder", 39.5),
            ("elbow", 57.6),
            ("wrist", 62.2),
        ];
        let per_joint: Vec<f64> = joints
            .iter()
            .map(|&j| {
                let name = &sk.joint_names()[j];
                let (_, v) = parts.iter().find(|(p, _)| name.ends_with(p)).unwrap();
                if name.starts_with("l_") {
                    v + 1.5
                } else {
                    v - 1.5
                }
            })
            .collect();
        let mean = per_joint.iter().sum::<f64>() / per_joint.len() as f64;
        let report = ErrorReport {
            sequence_id: "s".into(),
            joints: joints.clone(),
            per_frame: vec![mean],
            per_joint,
            distances: vec![],
            mean,
        };
        let table = grouped_joint_table(&report, &sk);
        assert_eq!(table.len(), 6);
        for (name, v) in &table {
            let (_, want) = parts.iter().find(|(p, _)| p == name).unwrap();
            assert!((v - want).abs() <= 1e-12, "{name}: {v}");
        }
        let table_mean = table.iter().map(|(_, v)| v).sum::<f64>() / 6.0;
        assert!((table_mean - report.mean).abs() <= 1e-12);
        assert_eq!(format!("{table_mean:.1}"), "55.3");
        let other = ErrorReport {
            mean: 45.3,
            ..report.clone()
        };
        assert!((mean_over_sequences(&[report, other]) - (table_mean + 45.3) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn method_tags_are_stable() {
        let tags: Vec<String> = Method::ALL.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        assert_eq!(tags, ["\"Initial\"", "\"BA\"", "\"BA-no-art\""]);
    }
}
