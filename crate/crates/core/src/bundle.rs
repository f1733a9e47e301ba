//! Multi-frame bundle adjustment.
//!
//! Minimises over shapes `S_t`, cameras `R_t` and an auxiliary rank-1 matrix
//! `L` the sum of
//!
//! * `sum_t |(W_t - R_t S_t) diag(w_t)|^2` (weighted reprojection error),
//! * `gamma * |l(S) - L|^2`, where `l(S)` holds squared limb lengths,
//! * `alpha * |S#|_*`, the nuclear norm of the `3p x n` matrix whose column
//!   `t` is `S_t` stacked joint by joint.
//!
//! Each round updates `S` by accelerated proximal gradient with singular
//! value thresholding, every `R_t` by Riemannian descent, and `L` by a rank-1
//! truncated SVD.

use std::time::Instant;

use nalgebra::{DMatrix, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraMat, CameraSeq};
use crate::error::{Error, Result};
use crate::numopt::{apg_minimize, nuclear_norm, rank1_approx, stiefel_minimize, svt_gram, ProxConfig, StiefelOptions};
use crate::skeleton::{accumulate_limb_grad, limb_lengths_sq, PoseSeq2D, PoseSeq3D, Skeleton};

/// Settings for [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BAConfig {
    /// Nuclear-norm weight. `None` means `alpha_rel` times the largest
    /// singular value of the initial stacked shape matrix.
    pub alpha: Option<f64>,
    pub alpha_rel: f64,
    /// Articulation weight; `0` disables the limb term entirely.
    pub gamma: f64,
    pub outer_iters: usize,
    /// Stop once a round lowers the objective by less than this fraction.
    pub tol_rel: f64,
    /// Multiply the data weights by the initialiser's robust weights. Off by
    /// default: on clean input those weights mostly encode dictionary misfit,
    /// and carrying them freezes the joints that most need refinement.
    pub use_init_weights: bool,
    /// APG iteration cap and relative tolerance of each shape update.
    pub inner_iters: usize,
    pub inner_tol: f64,
    /// Riemannian step cap of each camera update, and its gradient tolerance
    /// relative to the largest eigenvalue of the frame's weighted second
    /// moment.
    pub camera_steps: usize,
    pub camera_grad_tol: f64,
}

impl Default for BAConfig {
    fn default() -> Self {
        BAConfig {
            alpha: None,
            alpha_rel: 0.01,
            gamma: 1.0,
            outer_iters: 50,
            tol_rel: 1e-6,
            use_init_weights: false,
            inner_iters: 200,
            inner_tol: 1e-6,
            camera_steps: 50,
            camera_grad_tol: 1e-8,
        }
    }
}

impl BAConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {a}")));
            }
        }
        if !(self.alpha_rel >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha_rel and gamma must be >= 0 (got {}, {})",
                self.alpha_rel, self.gamma
            )));
        }
        if !(self.tol_rel > 0.0) || !(self.inner_tol >= 0.0) {
            return Err(Error::InvalidParameter("tol_rel must be > 0 and inner_tol >= 0".into()));
        }
        Ok(())
    }
}

/// Full solver state.
#[derive(Debug, Clone)]
pub struct BAState {
    pub poses: PoseSeq3D,
    pub cameras: CameraSeq,
    /// Rank-1 approximation of the squared limb lengths, `m x n`.
    pub limbs: DMatrix<f64>,
    /// Objective at the start and after every round.
    pub objective_trace: Vec<f64>,
    /// The nuclear-norm weight actually used.
    pub alpha: f64,
    /// APG iterations of each shape update.
    pub inner_iterations: Vec<usize>,
    pub seconds: f64,
}

/// Data, weights and term weights of one problem instance.
#[derive(Debug, Clone)]
pub struct BAProblem<'a> {
    w: Vec<Matrix2xX<f64>>,
    /// Squared data weights, `p x n`.
    om2: DMatrix<f64>,
    sk: &'a Skeleton,
    pub alpha: f64,
    pub gamma: f64,
}

/// Frames per rayon task; the per-frame work is small.
const FRAME_CHUNK: usize = 16;

fn frame_view(x: &DMatrix<f64>, t: usize) -> Matrix3xX<f64> {
    Matrix3xX::from_column_slice(x.column(t).as_slice())
}

impl<'a> BAProblem<'a> {
    /// `weights` is `p x n`; without it the track confidences are used.
    pub fn new(
        tracks: &PoseSeq2D,
        sk: &'a Skeleton,
        alpha: f64,
        gamma: f64,
        weights: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        sk.check_joints(tracks.num_joints())?;
        let (p, n) = (tracks.num_joints(), tracks.len());
        let om = match weights {
            Some(wm) => {
                if wm.shape() != (p, n) {
                    return Err(Error::ShapeMismatch(format!(
                        "weight matrix is {}x{}, expected {p}x{n}",
                        wm.nrows(),
                        wm.ncols()
                    )));
                }
                if wm.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
                }
                wm.clone()
            }
            None => DMatrix::from_fn(p, n, |j, t| tracks.frames[t].conf[j]),
        };
        if !(alpha >= 0.0) || !(gamma >= 0.0) {
            return Err(Error::InvalidParameter("alpha and gamma must be >= 0".into()));
        }
        Ok(BAProblem {
            w: tracks.frames.iter().map(|f| f.coords.clone()).collect(),
            om2: om.map(|v| v * v),
            sk,
            alpha,
            gamma,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.w.len()
    }

    fn check_state(&self, x: &DMatrix<f64>, cams: &CameraSeq, limbs: &DMatrix<f64>) -> Result<()> {
        let (p, n) = (self.sk.num_joints(), self.num_frames());
        if x.shape() != (3 * p, n) || cams.len() != n || limbs.shape() != (self.sk.num_edges(), n) {
            return Err(Error::ShapeMismatch(format!(
                "state shapes: S# {}x{}, {} cameras, L {}x{}; expected S# {}x{n}, {n} cameras, L {}x{n}",
                x.nrows(),
                x.ncols(),
                cams.len(),
                limbs.nrows(),
                limbs.ncols(),
                3 * p,
                self.sk.num_edges()
            )));
        }
        Ok(())
    }

    fn frame_value(&self, x: &DMatrix<f64>, cams: &CameraSeq, limbs: &DMatrix<f64>, t: usize) -> f64 {
        let s = frame_view(x, t);
        let pred = cams.frames[t].rows() * &s;
        let mut v = 0.0;
        for j in 0..s.ncols() {
            v += self.om2[(j, t)] * (self.w[t].column(j) - pred.column(j)).norm_squared();
        }
        if self.gamma != 0.0 {
            let mut art = 0.0;
            for (e, &(i, k)) in self.sk.edges().iter().enumerate() {
                let d = (s.column(i) - s.column(k)).norm_squared() - limbs[(e, t)];
                art += d * d;
            }
            v += self.gamma * art;
        }
        v
    }

    /// Reprojection plus articulation terms at stacked shapes `x` (`3p x n`).
    pub fn smooth_value(&self, x: &DMatrix<f64>, cams: &CameraSeq, limbs: &DMatrix<f64>) -> f64 {
        let parts: Vec<f64> = (0..self.num_frames())
            .into_par_iter()
            .with_min_len(FRAME_CHUNK)
            .map(|t| self.frame_value(x, cams, limbs, t))
            .collect();
        parts.iter().sum()
    }

    fn frame_grad(&self, x: &DMatrix<f64>, cams: &CameraSeq, limbs: &DMatrix<f64>, t: usize) -> Matrix3xX<f64> {
        let s = frame_view(x, t);
        let r = cams.frames[t].rows();
        let mut res = r * &s - &self.w[t];
        for j in 0..s.ncols() {
            let mut c = res.column_mut(j);
            c *= 2.0 * self.om2[(j, t)];
        }
        let mut g = r.transpose() * res;
        if self.gamma != 0.0 {
            let resid: Vec<f64> = self
                .sk
                .edges()
                .iter()
                .enumerate()
                .map(|(e, &(i, k))| (s.column(i) - s.column(k)).norm_squared() - limbs[(e, t)])
                .collect();
            accumulate_limb_grad(&s, self.sk, &resid, 2.0 * self.gamma, &mut g);
        }
        g
    }

    /// Gradient of [`BAProblem::smooth_value`] with respect to `S#`.
    pub fn smooth_grad(&self, x: &DMatrix<f64>, cams: &CameraSeq, limbs: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<Matrix3xX<f64>> = (0..self.num_frames())
            .into_par_iter()
            .with_min_len(FRAME_CHUNK)
            .map(|t| self.frame_grad(x, cams, limbs, t))
            .collect();
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for (t, c) in cols.iter().enumerate() {
            g.column_mut(t).copy_from_slice(c.as_slice());
        }
        g
    }

    /// The full objective at `(poses, cameras, limbs)`.
    pub fn objective(&self, poses: &PoseSeq3D, cams: &CameraSeq, limbs: &DMatrix<f64>) -> Result<f64> {
        let x = poses.stacked();
        self.check_state(&x, cams, limbs)?;
        let nuc = if self.alpha != 0.0 {
            self.alpha * nuclear_norm(&x)
        } else {
            0.0
        };
        Ok(self.smooth_value(&x, cams, limbs) + nuc)
    }

    /// One APG solve for the shapes with cameras and `L` fixed. Returns the
    /// new shapes and the APG iteration count.
    pub fn update_s(
        &self,
        poses: &PoseSeq3D,
        cams: &CameraSeq,
        limbs: &DMatrix<f64>,
        cfg: &ProxConfig,
    ) -> Result<(PoseSeq3D, usize, f64)> {
        let x0 = poses.stacked();
        self.check_state(&x0, cams, limbs)?;
        let cfg = ProxConfig {
            alpha: self.alpha,
            ..cfg.clone()
        };
        let out = apg_minimize(
            |x| self.smooth_value(x, cams, limbs),
            |x| self.smooth_grad(x, cams, limbs),
            svt_gram,
            &x0,
            &cfg,
        )?;
        Ok((PoseSeq3D::from_stacked(&out.x, poses.fps)?, out.iterations, out.mu))
    }

    /// Per-frame camera refinement with shapes fixed. `grad_tol` is relative
    /// to each frame's largest weighted second-moment eigenvalue.
    pub fn update_r(&self, poses: &PoseSeq3D, cams: &CameraSeq, steps: usize, grad_tol: f64) -> Result<CameraSeq> {
        if poses.len() != self.num_frames() || cams.len() != self.num_frames() {
            return Err(Error::ShapeMismatch(
                "poses, cameras and tracks differ in length".into(),
            ));
        }
        let frames: Vec<CameraMat> = (0..self.num_frames())
            .into_par_iter()
            .with_min_len(FRAME_CHUNK)
            .map(|t| {
                let s = &poses.frames[t].coords;
                let mut c = Matrix3::<f64>::zeros();
                let mut b = Matrix2x3::<f64>::zeros();
                let mut k0 = 0.0;
                for j in 0..s.ncols() {
                    let o = self.om2[(j, t)];
                    let sj = s.column(j);
                    let wj = self.w[t].column(j);
                    c += sj * sj.transpose() * o;
                    b += wj * sj.transpose() * o;
                    k0 += o * wj.norm_squared();
                }
                let lmax = c.symmetric_eigenvalues().max();
                if !(lmax > 0.0) {
                    return Ok(cams.frames[t]);
                }
                let f = |r: &CameraMat| {
                    let rr = r.rows();
                    (rr * c).dot(rr) - 2.0 * rr.dot(&b) + k0
                };
                let egrad = |r: &CameraMat| (r.rows() * c - b) * 2.0;
                let opts = StiefelOptions {
                    max_steps: steps,
                    grad_tol: grad_tol * lmax,
                    initial_step: 0.5 / lmax,
                    armijo: 1e-4,
                };
                stiefel_minimize(&cams.frames[t], f, egrad, &opts)
                    .map(|o| o.camera)
                    .map_err(|e| e.in_frame(t))
            })
            .collect::<Result<_>>()?;
        Ok(CameraSeq { frames })
    }
}

/// Nearest rank-1 matrix to the squared limb lengths of `poses`.
pub fn update_l(poses: &PoseSeq3D, sk: &Skeleton) -> Result<DMatrix<f64>> {
    Ok(rank1_approx(&limb_lengths_sq(poses, sk)?))
}

/// Largest singular value of the stacked shape matrix.
pub fn leading_singular_value(poses: &PoseSeq3D) -> f64 {
    poses.stacked().singular_values().max()
}

/// Block-coordinate descent from `(init_s, init_r)` until the relative
/// decrease of a round drops below `cfg.tol_rel` or `cfg.outer_iters` rounds.
///
/// `weights` (`p x n`) replaces the track confidences as data weights.
pub fn solve(
    tracks: &PoseSeq2D,
    init_s: &PoseSeq3D,
    init_r: &CameraSeq,
    sk: &Skeleton,
    cfg: &BAConfig,
    weights: Option<&DMatrix<f64>>,
) -> Result<BAState> {
    let started = Instant::now();
    cfg.validate()?;
    if init_s.len() != tracks.len() || init_r.len() != tracks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames of tracks, {} poses, {} cameras",
            tracks.len(),
            init_s.len(),
            init_r.len()
        )));
    }
    let alpha = cfg
        .alpha
        .unwrap_or_else(|| cfg.alpha_rel * leading_singular_value(init_s));
    let problem = BAProblem::new(tracks, sk, alpha, cfg.gamma, weights)?;
    let mut poses = init_s.clone();
    let mut cams = init_r.clone();
    let mut limbs = update_l(&poses, sk)?;
    let mut obj = problem.objective(&poses, &cams, &limbs)?;
    let mut trace = vec![obj];
    let mut inner_iterations = Vec::new();
    let mut mu = 2.0;
    for round in 1..=cfg.outer_iters {
        let prox = ProxConfig {
            alpha,
            mu0: mu,
            backtrack_factor: 2.0,
            max_inner_iters: cfg.inner_iters,
            tol_rel: cfg.inner_tol,
        };
        let (next, iters, mu_used) = problem.update_s(&poses, &cams, &limbs, &prox)?;
        poses = next;
        inner_iterations.push(iters);
        // Let the step size grow back a little between rounds.
        mu = (mu_used / 4.0).max(1e-12);
        cams = problem.update_r(&poses, &cams, cfg.camera_steps, cfg.camera_grad_tol)?;
        limbs = update_l(&poses, sk)?;
        let new = problem.objective(&poses, &cams, &limbs)?;
        if !new.is_finite() {
            return Err(Error::NonFinite {
                iteration: round,
                what: "bundle adjustment objective".into(),
            });
        }
        trace.push(new);
        if new > obj + 1e-9 * obj.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                round,
                previous: obj,
                current: new,
                trace,
            });
        }
        let decrease = obj - new;
        obj = new;
        if decrease <= cfg.tol_rel * obj.abs() {
            break;
        }
    }
    Ok(BAState {
        poses,
        cameras: cams,
        limbs,
        objective_trace: trace,
        alpha,
        inner_iterations,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reprojection error `|(W_t - R_t S_t) diag(w_t)|^2` of every frame.
pub fn reprojection_errors(tracks: &PoseSeq2D, poses: &PoseSeq3D, cams: &CameraSeq) -> Vec<f64> {
    tracks
        .frames
        .iter()
        .zip(&poses.frames)
        .zip(&cams.frames)
        .map(|((w, s), r)| {
            let d = &w.coords - r.rows() * &s.coords;
            (0..d.ncols())
                .map(|j| w.conf[j] * w.conf[j] * d.column(j).norm_squared())
                .sum()
        })
        .collect()
}
