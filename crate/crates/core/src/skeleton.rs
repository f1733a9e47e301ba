//! Articulated body model and pose containers.
//!
//! A [`Skeleton`] is a set of named joints plus an undirected limb list. Poses
//! are stored column-per-joint: a 3D pose is a `3 x p` matrix, a 2D pose a
//! `2 x p` matrix with a per-joint confidence. The squared-limb-length map
//! `limb_lengths_sq` turns a sequence of `n` poses into an `m x n` matrix whose
//! columns are the squared lengths of the `m` limbs; for a body with fixed limb
//! ratios that matrix has rank one.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint names of the twelve-joint evaluation set (wrists, elbows, shoulders,
/// hips, knees, ankles) in the default body model.
pub const EVAL_JOINT_NAMES: [&str; 12] = [
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

/// Named joints connected by limbs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct Skeleton {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<SkeletonFile> for Skeleton {
    type Error = Error;

    fn try_from(file: SkeletonFile) -> Result<Self> {
        Skeleton::new(file.joints, file.edges.into_iter().map(|[i, j]| (i, j)).collect())
    }
}

impl From<Skeleton> for SkeletonFile {
    fn from(sk: Skeleton) -> Self {
        SkeletonFile {
            joints: sk.joint_names,
            edges: sk.edges.into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

impl Skeleton {
    /// Validates and builds a skeleton. Edges are stored with `i < j`.
    pub fn new(joint_names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let p = joint_names.len();
        if p < 2 {
            return Err(Error::InvalidSkeleton(format!("need at least 2 joints, got {p}")));
        }
        if edges.is_empty() {
            return Err(Error::InvalidSkeleton("need at least one edge".into()));
        }
        let mut seen = BTreeSet::new();
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= p || b >= p {
                return Err(Error::InvalidSkeleton(format!(
                    "edge ({a}, {b}) out of range for {p} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidSkeleton(format!("self edge at joint {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::InvalidSkeleton(format!("duplicate edge ({a}, {b})")));
            }
            canon.push(e);
        }

        let mut adj = vec![Vec::new(); p];
        for &(a, b) in &canon {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut visited = vec![false; p];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
        if let Some(lonely) = visited.iter().position(|v| !v) {
            return Err(Error::InvalidSkeleton(format!(
                "limb graph is disconnected (joint {lonely} '{}' unreachable)",
                joint_names[lonely]
            )));
        }

        Ok(Skeleton {
            joint_names,
            edges: canon,
        })
    }

    /// The bundled 15-joint, 14-limb body model.
    ///
    /// Joint order: pelvis, right leg (hip, knee, ankle), left leg, neck, head,
    /// left arm (shoulder, elbow, wrist), right arm.
    pub fn body15() -> Self {
        let names = [
            "pelvis",
            "r_hip",
            "r_knee",
            "r_ankle",
            "l_hip",
            "l_knee",
            "l_ankle",
            "neck",
            "head",
            "l_shoulder",
            "l_elbow",
            "l_wrist",
            "r_shoulder",
            "r_elbow",
            "r_wrist",
        ];
        let edges = vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (0, 4),
            (4, 5),
            (5, 6),
            (0, 7),
            (7, 8),
            (7, 9),
            (9, 10),
            (10, 11),
            (7, 12),
            (12, 13),
            (13, 14),
        ];
        Skeleton::new(names.iter().map(|s| s.to_string()).collect(), edges).expect("bundled skeleton is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Indices of the standard evaluation joints present in this skeleton,
    /// or every joint if none of the standard names occur.
    pub fn evaluation_joints(&self) -> Vec<usize> {
        let idx: Vec<usize> = EVAL_JOINT_NAMES.iter().filter_map(|n| self.joint_index(n)).collect();
        if idx.is_empty() {
            (0..self.num_joints()).collect()
        } else {
            let mut idx = idx;
            idx.sort_unstable();
            idx
        }
    }

    /// Groups joints that differ only by an `l_`/`r_` prefix.
    ///
    /// Returns `(group name, joint indices)` in order of first appearance.
    /// Joints without a side prefix form singleton groups.
    pub fn symmetric_groups(&self, joints: &[usize]) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for &j in joints {
            let name = &self.joint_names[j];
            let base = name
                .strip_prefix("l_")
                .or_else(|| name.strip_prefix("r_"))
                .unwrap_or(name)
                .to_string();
            match groups.iter_mut().find(|(g, _)| *g == base) {
                Some((_, members)) => members.push(j),
                None => groups.push((base, vec![j])),
            }
        }
        groups
    }

    pub(crate) fn check_joints(&self, p: usize) -> Result<()> {
        if p != self.num_joints() {
            return Err(Error::ShapeMismatch(format!(
                "pose has {p} joints, skeleton has {}",
                self.num_joints()
            )));
        }
        Ok(())
    }
}

/// One 3D pose, `3 x p`, millimetres by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Matrix3xX<f64>,
}

impl Pose3D {
    pub fn new(coords: Matrix3xX<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("3D pose has non-finite entries".into()));
        }
        Ok(Pose3D { coords })
    }

    pub fn num_joints(&self) -> usize {
        self.coords.ncols()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.coords.column_mean()
    }

    /// Copy with the (unweighted) joint centroid moved to the origin.
    pub fn centered(&self) -> Pose3D {
        let c = self.centroid();
        let mut coords = self.coords.clone();
        for mut col in coords.column_iter_mut() {
            col -= c;
        }
        Pose3D { coords }
    }
}

/// A sequence of 3D poses sharing one joint count.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq3D {
    pub frames: Vec<Pose3D>,
    pub fps: f64,
}

impl PoseSeq3D {
    pub fn new(frames: Vec<Pose3D>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidParameter("pose sequence is empty".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps must be positive, got {fps}")));
        }
        let p = frames[0].num_joints();
        if let Some(t) = frames.iter().position(|f| f.num_joints() != p) {
            return Err(Error::ShapeMismatch(format!(
                "frame {t} has {} joints, frame 0 has {p}",
                frames[t].num_joints()
            )));
        }
        Ok(PoseSeq3D { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.frames[0].num_joints()
    }

    /// The `3p x n` shape matrix whose column `t` is frame `t` vectorised
    /// column-major (x0, y0, z0, x1, ...).
    pub fn stacked(&self) -> DMatrix<f64> {
        let p = self.num_joints();
        DMatrix::from_fn(3 * p, self.len(), |r, t| self.frames[t].coords[(r % 3, r / 3)])
    }

    /// Inverse of [`PoseSeq3D::stacked`].
    pub fn from_stacked(stacked: &DMatrix<f64>, fps: f64) -> Result<Self> {
        if !stacked.nrows().is_multiple_of(3) || stacked.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "stacked shape matrix has {} rows, expected a multiple of 3",
                stacked.nrows()
            )));
        }
        let frames = stacked
            .column_iter()
            .map(|col| Pose3D::new(Matrix3xX::from_column_slice(col.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        PoseSeq3D::new(frames, fps)
    }
}

/// One 2D pose with per-joint confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub coords: Matrix2xX<f64>,
    pub conf: DVector<f64>,
}

impl Pose2D {
    pub fn new(coords: Matrix2xX<f64>, conf: DVector<f64>) -> Result<Self> {
        if coords.ncols() != conf.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} joints but {} confidences",
                coords.ncols(),
                conf.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("2D pose has non-finite entries".into()));
        }
        if conf.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidParameter(
                "confidences must be finite and nonnegative".into(),
            ));
        }
        Ok(Pose2D { coords, conf })
    }

    /// Pose with unit confidence on every joint.
    pub fn certain(coords: Matrix2xX<f64>) -> Self {
        let p = coords.ncols();
        Pose2D {
            coords,
            conf: DVector::from_element(p, 1.0),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.coords.ncols()
    }

    /// Confidence-weighted centroid; `None` when every confidence is zero.
    pub fn weighted_centroid(&self) -> Option<Vector2<f64>> {
        let total: f64 = self.conf.sum();
        if total <= 0.0 {
            return None;
        }
        let mut c = Vector2::zeros();
        for (col, w) in self.coords.column_iter().zip(self.conf.iter()) {
            c += col * *w;
        }
        Some(c / total)
    }

    /// Root-mean-square joint coordinate magnitude, used as the coordinate scale.
    pub fn scale(&self) -> f64 {
        let p = self.num_joints().max(1) as f64;
        (self.coords.norm_squared() / p).sqrt()
    }
}

/// A sequence of 2D poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq2D {
    pub frames: Vec<Pose2D>,
    pub fps: f64,
    pub centralized: bool,
    /// Centroids removed by [`centralize`], one per frame.
    pub centroids: Option<Vec<Vector2<f64>>>,
}

impl PoseSeq2D {
    pub fn new(frames: Vec<Pose2D>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidParameter("2D sequence is empty".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps must be positive, got {fps}")));
        }
        let p = frames[0].num_joints();
        if let Some(t) = frames.iter().position(|f| f.num_joints() != p) {
            return Err(Error::ShapeMismatch(format!(
                "frame {t} has {} joints, frame 0 has {p}",
                frames[t].num_joints()
            )));
        }
        Ok(PoseSeq2D {
            frames,
            fps,
            centralized: false,
            centroids: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.frames[0].num_joints()
    }

    /// Re-adds the centroids stored by [`centralize`].
    pub fn decentralized(&self) -> PoseSeq2D {
        let mut out = self.clone();
        if let Some(cs) = &self.centroids {
            for (f, c) in out.frames.iter_mut().zip(cs) {
                for mut col in f.coords.column_iter_mut() {
                    col += c;
                }
            }
        }
        out.centralized = false;
        out.centroids = None;
        out
    }
}

/// Relative tolerance for treating a 2D frame as already centred.
pub const CENTRALIZED_TOL: f64 = 1e-6;

pub(crate) fn is_centered(pose: &Pose2D) -> Option<f64> {
    let c = pose.weighted_centroid()?;
    let norm = c.norm();
    (norm > CENTRALIZED_TOL * pose.scale().max(f64::MIN_POSITIVE)).then_some(norm)
}

/// Subtracts each frame's confidence-weighted centroid.
///
/// Already-centred sequences come back unchanged, so the operation is idempotent.
/// Centroids accumulate so that [`PoseSeq2D::decentralized`] restores the input.
pub fn centralize(seq: &PoseSeq2D) -> Result<PoseSeq2D> {
    let mut frames = Vec::with_capacity(seq.len());
    let mut centroids = Vec::with_capacity(seq.len());
    for (t, f) in seq.frames.iter().enumerate() {
        let c = f.weighted_centroid().ok_or(Error::ZeroConfidence { frame: t })?;
        let mut coords = f.coords.clone();
        for mut col in coords.column_iter_mut() {
            col -= c;
        }
        let prev = seq.centroids.as_ref().map(|cs| cs[t]).unwrap_or_else(Vector2::zeros);
        frames.push(Pose2D {
            coords,
            conf: f.conf.clone(),
        });
        centroids.push(prev + c);
    }
    Ok(PoseSeq2D {
        frames,
        fps: seq.fps,
        centralized: true,
        centroids: Some(centroids),
    })
}

/// Squared limb lengths of a single pose, one entry per edge.
pub fn limb_lengths_sq_frame(pose: &Pose3D, sk: &Skeleton) -> DVector<f64> {
    DVector::from_iterator(
        sk.num_edges(),
        sk.edges()
            .iter()
            .map(|&(i, j)| (pose.coords.column(i) - pose.coords.column(j)).norm_squared()),
    )
}

/// The `m x n` matrix of squared limb lengths, column `t` for frame `t`.
pub fn limb_lengths_sq(seq: &PoseSeq3D, sk: &Skeleton) -> Result<DMatrix<f64>> {
    sk.check_joints(seq.num_joints())?;
    let mut out = DMatrix::zeros(sk.num_edges(), seq.len());
    for (t, f) in seq.frames.iter().enumerate() {
        out.set_column(t, &limb_lengths_sq_frame(f, sk));
    }
    Ok(out)
}

/// Gradient of `sum_e residual[e] * |s_i - s_j|^2` with respect to the pose.
pub fn limb_lengths_sq_grad(pose: &Pose3D, sk: &Skeleton, residual: &DVector<f64>) -> Result<Matrix3xX<f64>> {
    sk.check_joints(pose.num_joints())?;
    if residual.len() != sk.num_edges() {
        return Err(Error::ShapeMismatch(format!(
            "residual has {} entries, skeleton has {} edges",
            residual.len(),
            sk.num_edges()
        )));
    }
    let mut grad = Matrix3xX::zeros(pose.num_joints());
    accumulate_limb_grad(&pose.coords, sk, residual.as_slice(), 1.0, &mut grad);
    Ok(grad)
}

/// `grad += scale * sum_e residual[e] * d|s_i - s_j|^2 / dS` without shape checks.
pub(crate) fn accumulate_limb_grad(
    coords: &Matrix3xX<f64>,
    sk: &Skeleton,
    residual: &[f64],
    scale: f64,
    grad: &mut Matrix3xX<f64>,
) {
    for (&(i, j), &r) in sk.edges().iter().zip(residual) {
        if r == 0.0 {
            continue;
        }
        let d: Vector3<f64> = (coords.column(i) - coords.column(j)) * (2.0 * r * scale);
        let mut ci = grad.column_mut(i);
        ci += d;
        let mut cj = grad.column_mut(j);
        cj -= d;
    }
}
