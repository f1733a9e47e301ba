//! Pose dictionaries and single-frame initialisation.
//!
//! A dictionary is a mean pose plus orthonormal basis poses learned by PCA
//! from a 3D corpus. A 2D frame is explained as
//! `W ~ R (a * mean + sum_i c_i B_i) + t 1^T` with a free mean scale `a`
//! (absorbing the unknown orthographic scale), sparse coefficients `c`, a
//! camera `R` and an image translation `t`. The fit alternates coefficient,
//! camera and translation updates, with Geman-McClure reweighting of joints
//! between rounds.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Rotation3, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{orbit_rotation, polar_retract, CameraMat, CameraSeq};
use crate::error::{Error, Result};
use crate::eval::best_rotation;
use crate::skeleton::{is_centered, Pose2D, Pose3D, PoseSeq2D, PoseSeq3D, Skeleton};

/// Mean pose plus basis poses, all `3 x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDictionary {
    pub mean: Matrix3xX<f64>,
    pub bases: Vec<Matrix3xX<f64>>,
    pub joint_names: Vec<String>,
    /// Cumulative fraction of corpus variance explained by the first `i + 1`
    /// bases. Empty when unknown (for instance for hand-built dictionaries).
    pub explained: Vec<f64>,
}

impl PoseDictionary {
    pub fn new(mean: Matrix3xX<f64>, bases: Vec<Matrix3xX<f64>>, joint_names: Vec<String>) -> Result<Self> {
        let p = mean.ncols();
        if bases.is_empty() {
            return Err(Error::InvalidParameter("dictionary needs at least one basis".into()));
        }
        if joint_names.len() != p || bases.iter().any(|b| b.ncols() != p) {
            return Err(Error::ShapeMismatch(format!(
                "dictionary mean has {p} joints; names and bases must match"
            )));
        }
        if mean
            .iter()
            .chain(bases.iter().flat_map(|b| b.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("dictionary contains non-finite values".into()));
        }
        Ok(PoseDictionary {
            mean,
            bases,
            joint_names,
            explained: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn num_joints(&self) -> usize {
        self.mean.ncols()
    }

    /// `mean_scale * mean + sum_i coeffs[i] * bases[i]`.
    pub fn compose(&self, mean_scale: f64, coeffs: &DVector<f64>) -> Matrix3xX<f64> {
        let mut s = &self.mean * mean_scale;
        for (b, &c) in self.bases.iter().zip(coeffs.iter()) {
            if c != 0.0 {
                s += b * c;
            }
        }
        s
    }

    /// Errors unless the dictionary joints are exactly the skeleton joints.
    pub fn check_skeleton(&self, sk: &Skeleton) -> Result<()> {
        if self.joint_names != sk.joint_names() {
            return Err(Error::ShapeMismatch(format!(
                "dictionary joints {:?} do not match skeleton joints {:?}",
                self.joint_names,
                sk.joint_names()
            )));
        }
        Ok(())
    }
}

/// Options for [`learn_dictionary`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnOptions {
    pub k: usize,
    /// Rotate every pose onto the first one before PCA.
    pub align_rotation: bool,
    /// Divide every pose by its mean limb length.
    pub normalize_scale: bool,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            k: 64,
            align_rotation: true,
            normalize_scale: true,
        }
    }
}

struct Pca {
    mean: DVector<f64>,
    /// Principal directions as columns, by decreasing variance.
    vectors: DMatrix<f64>,
    variances: Vec<f64>,
    rank: usize,
}

fn mean_limb_length(pose: &Pose3D, sk: &Skeleton) -> f64 {
    let total: f64 = sk
        .edges()
        .iter()
        .map(|&(i, j)| (pose.coords.column(i) - pose.coords.column(j)).norm())
        .sum();
    total / sk.num_edges() as f64
}

fn prepare_corpus(corpus: &[Pose3D], sk: &Skeleton, opts: &LearnOptions) -> Result<Vec<Matrix3xX<f64>>> {
    let mut out: Vec<Matrix3xX<f64>> = Vec::with_capacity(corpus.len());
    for (idx, pose) in corpus.iter().enumerate() {
        sk.check_joints(pose.num_joints()).map_err(|e| e.in_frame(idx))?;
        let mut c = pose.centered();
        if opts.normalize_scale {
            let l = mean_limb_length(&c, sk);
            if !(l > 0.0) {
                return Err(Error::Frame {
                    frame: idx,
                    source: Box::new(Error::Degenerate("pose has zero mean limb length".into())),
                });
            }
            c.coords /= l;
        }
        if opts.align_rotation {
            if let Some(reference) = out.first() {
                let (q, _) = best_rotation(&c.coords, reference, false);
                c.coords = q * c.coords;
            }
        }
        out.push(c.coords);
    }
    Ok(out)
}

fn pca(poses: &[Matrix3xX<f64>]) -> Pca {
    let dim = poses[0].len();
    let n = poses.len() as f64;
    let mut mean = DVector::zeros(dim);
    for p in poses {
        mean += DVector::from_column_slice(p.as_slice());
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut total_sq = 0.0;
    for p in poses {
        let x = DVector::from_column_slice(p.as_slice());
        total_sq += x.norm_squared();
        let d = x - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variances: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
    // Rank: the spread must be visible against the data magnitude, and each
    // component against the leading one.
    let lead = variances[0];
    let rank = if lead <= 1e-20 * total_sq / n {
        0
    } else {
        variances.iter().take_while(|&&v| v > 1e-12 * lead).count()
    };
    Pca {
        mean,
        vectors,
        variances,
        rank,
    }
}

fn build(pca: Pca, k: usize, sk: &Skeleton) -> PoseDictionary {
    let bases = (0..k)
        .map(|i| Matrix3xX::from_column_slice(pca.vectors.column(i).as_slice()))
        .collect();
    let total: f64 = pca.variances.iter().sum();
    let mut acc = 0.0;
    let explained = pca.variances[..pca.rank]
        .iter()
        .map(|v| {
            acc += v;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect();
    PoseDictionary {
        mean: Matrix3xX::from_column_slice(pca.mean.as_slice()),
        bases,
        joint_names: sk.joint_names().to_vec(),
        explained,
    }
}

/// PCA dictionary with exactly `opts.k` bases.
///
/// Poses are centred, optionally divided by their mean limb length, and
/// optionally rotated onto the first pose before PCA. Fails with
/// [`Error::InsufficientRank`] when the corpus spans fewer than `k` directions.
pub fn learn_dictionary(corpus: &[Pose3D], sk: &Skeleton, opts: &LearnOptions) -> Result<PoseDictionary> {
    learn(corpus, sk, opts, false)
}

/// Like [`learn_dictionary`], but uses `min(k, corpus rank)` bases.
pub fn learn_dictionary_up_to(corpus: &[Pose3D], sk: &Skeleton, opts: &LearnOptions) -> Result<PoseDictionary> {
    learn(corpus, sk, opts, true)
}

fn learn(corpus: &[Pose3D], sk: &Skeleton, opts: &LearnOptions, clamp: bool) -> Result<PoseDictionary> {
    if opts.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InsufficientRank {
            requested: opts.k,
            achievable: 0,
        });
    }
    let poses = prepare_corpus(corpus, sk, opts)?;
    let pca = pca(&poses);
    let k = if clamp { opts.k.min(pca.rank) } else { opts.k };
    if k == 0 || k > pca.rank {
        return Err(Error::InsufficientRank {
            requested: opts.k,
            achievable: pca.rank,
        });
    }
    Ok(build(pca, k, sk))
}

/// Settings for [`estimate_frame`] and [`initialize_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// L1 weight on the coefficients; `None` means `0.01` times the largest
    /// singular value of the frame's 2D pose matrix.
    pub lambda1: Option<f64>,
    /// Camera seeds, equally spaced in azimuth about the vertical axis.
    pub restarts: usize,
    /// Fitting rounds; joint weights are re-estimated between rounds.
    pub irls_rounds: usize,
    /// Disable to keep all robust weights at one.
    pub robust: bool,
    /// Robust scale as a multiple of the median joint residual.
    pub sigma_factor: f64,
    /// Gauss-Newton steps per round for the winning start.
    pub max_steps: usize,
    /// Steps given to every start before the best one is chosen.
    pub probe_steps: usize,
    /// Relative objective decrease below which a round stops.
    pub tol_rel: f64,
    /// Iteration cap and relative tolerance of the coefficient solver.
    pub coeff_iters: usize,
    pub coeff_tol: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            lambda1: None,
            restarts: 8,
            irls_rounds: 4,
            robust: true,
            sigma_factor: 1.5,
            max_steps: 100,
            probe_steps: 15,
            tol_rel: 1e-5,
            coeff_iters: 500,
            coeff_tol: 1e-6,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda1 {
            if !(l >= 0.0) {
                return Err(Error::InvalidParameter(format!("lambda1 must be >= 0, got {l}")));
            }
        }
        if self.restarts == 0 || self.irls_rounds == 0 {
            return Err(Error::InvalidParameter(
                "restarts and irls_rounds must be positive".into(),
            ));
        }
        if !(self.sigma_factor > 0.0) || !(self.coeff_tol >= 0.0) {
            return Err(Error::InvalidParameter(
                "sigma_factor > 0 and coeff_tol >= 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// Result of fitting one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    /// `mean_scale * mean + sum_i coeffs[i] * bases[i]`.
    pub pose: Pose3D,
    pub camera: CameraMat,
    pub mean_scale: f64,
    pub coeffs: DVector<f64>,
    /// Image-plane offset of the fit, nonzero when outliers pull the centroid.
    pub translation: Vector2<f64>,
    /// Robust joint weights in `[0, 1]`, excluding the input confidences.
    pub weights: DVector<f64>,
    /// `|(W - R S - t 1^T) diag(conf * weights)|^2 + lambda1 |coeffs|_1`.
    pub objective: f64,
    /// Objective after every accepted step, one list per fitting round.
    pub rounds: Vec<Vec<f64>>,
}

/// Fixed data of one frame fit.
struct Frame<'a> {
    w: &'a Matrix2xX<f64>,
    conf: &'a DVector<f64>,
    dict: &'a PoseDictionary,
    /// Mean followed by the bases.
    atoms: Vec<&'a Matrix3xX<f64>>,
    lambda1: f64,
    cfg: &'a InitConfig,
}

/// Linear parameters `[a, c_1, ..., c_k, t_x, t_y]` at a camera.
#[derive(Clone)]
struct Fit {
    r: CameraMat,
    x: DVector<f64>,
    s: Matrix3xX<f64>,
    value: f64,
}

impl Frame<'_> {
    fn k(&self) -> usize {
        self.atoms.len() - 1
    }

    fn shape(&self, x: &DVector<f64>) -> Matrix3xX<f64> {
        self.dict.compose(x[0], &x.rows(1, self.k()).into_owned())
    }

    fn translation(&self, x: &DVector<f64>) -> Vector2<f64> {
        let k = self.k();
        Vector2::new(x[k + 1], x[k + 2])
    }

    fn value(&self, r: &CameraMat, s: &Matrix3xX<f64>, x: &DVector<f64>, om2: &DVector<f64>) -> f64 {
        let pred = r.rows() * s;
        let t = self.translation(x);
        let mut data = 0.0;
        for j in 0..self.w.ncols() {
            data += om2[j] * (self.w.column(j) - pred.column(j) - t).norm_squared();
        }
        data + self.lambda1 * x.rows(1, self.k()).lp_norm(1)
    }

    fn residuals(&self, fit: &Fit) -> Vec<f64> {
        let pred = fit.r.rows() * &fit.s;
        let t = self.translation(&fit.x);
        (0..self.w.ncols())
            .map(|j| (self.w.column(j) - pred.column(j) - t).norm())
            .collect()
    }

    /// Weighted design matrix of the linear parameters at camera rows `rr`
    /// (first `k + 3` columns of `a`) and the weighted data vector.
    fn fill_linear(&self, rr: &Matrix2x3<f64>, om: &[f64], a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        let k = self.k();
        let p = self.w.ncols();
        for (i, atom) in self.atoms.iter().enumerate() {
            let proj = rr * *atom;
            for j in 0..p {
                a[(2 * j, i)] = om[j] * proj[(0, j)];
                a[(2 * j + 1, i)] = om[j] * proj[(1, j)];
            }
        }
        for j in 0..p {
            a[(2 * j, k + 1)] = om[j];
            a[(2 * j + 1, k + 2)] = om[j];
            b[2 * j] = om[j] * self.w[(0, j)];
            b[2 * j + 1] = om[j] * self.w[(1, j)];
        }
    }

    /// Minimises `|b - A v|^2 + sum_i damp_i (v_i - v0_i)^2 + lambda1 |v[1..=k]|_1`
    /// from `v0`: Cholesky when there is no L1 term, APG with soft-thresholding
    /// otherwise. Columns in `fixed` stay at zero.
    fn solve_l1_ls(
        &self,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        damp: &[f64],
        v0: &DVector<f64>,
        fixed: std::ops::Range<usize>,
    ) -> Result<DVector<f64>> {
        let k = self.k();
        let q = a.ncols();
        let mut a = a.clone();
        let mut v0 = v0.clone();
        for i in fixed.clone() {
            a.column_mut(i).fill(0.0);
            v0[i] = 0.0;
        }
        let g = a.tr_mul(&a);
        // Jacobi scaling; the L1 weights pick up the same factors.
        let d = DVector::from_iterator(
            q,
            (0..q).map(|i| {
                let gi = g[(i, i)] + damp[i];
                if gi > 0.0 {
                    1.0 / gi.sqrt()
                } else {
                    1.0
                }
            }),
        );
        let as_ = DMatrix::from_fn(a.nrows(), q, |r, c| a[(r, c)] * d[c]);
        let mut gs = as_.tr_mul(&as_);
        let ds: Vec<f64> = (0..q).map(|i| damp[i] * d[i] * d[i]).collect();
        for (i, di) in ds.iter().enumerate() {
            gs[(i, i)] += di;
        }
        let y0 = v0.component_div(&d);
        let hs = as_.tr_mul(b) + DVector::from_iterator(q, (0..q).map(|i| ds[i] * y0[i]));
        let value = |y: &DVector<f64>| {
            let r = b - &as_ * y;
            r.norm_squared() + (0..q).map(|i| ds[i] * (y[i] - y0[i]).powi(2)).sum::<f64>()
        };
        let in_fixed = |i: usize| fixed.contains(&i);

        let y = if self.lambda1 == 0.0 || fixed.start == 1 && fixed.end == k + 1 {
            let mut gsolve = gs.clone();
            let mut hsolve = hs.clone();
            for i in fixed.clone() {
                gsolve[(i, i)] = 1.0;
                hsolve[i] = 0.0;
            }
            let sol = match gsolve.clone().cholesky() {
                Some(ch) => ch.solve(&hsolve),
                None => {
                    let svd = gsolve.svd(true, true);
                    let tol = 1e-13 * svd.singular_values.max();
                    svd.solve(&hsolve, tol)
                        .map_err(|e| Error::RankDeficient(e.to_string()))?
                }
            };
            let l1 = |y: &DVector<f64>| (1..=k).map(|i| (y[i] / d[i]).abs()).sum::<f64>() * self.lambda1;
            if value(&sol) + l1(&sol) <= value(&y0) + l1(&y0) {
                sol
            } else {
                y0
            }
        } else {
            // FISTA on the scaled problem with a fixed step 1 / L, L the
            // Lipschitz constant of the gradient 2 (Gs y - hs); momentum
            // restarts when it points against the last step.
            let lip = 2.0 * lambda_max_bound(&gs);
            if !(lip > 0.0) || !lip.is_finite() {
                return Ok(v0.clone());
            }
            let step = 1.0 / lip;
            let thresholds: Vec<f64> = (0..q)
                .map(|i| {
                    if (1..=k).contains(&i) {
                        self.lambda1 * d[i] * step
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut x = y0.clone();
            for i in fixed.clone() {
                x[i] = 0.0;
            }
            let mut x_prev = x.clone();
            let mut z = x.clone();
            let mut grad = DVector::zeros(q);
            let mut t = 1.0f64;
            for _ in 0..self.cfg.coeff_iters.max(1) {
                grad.copy_from(&hs);
                grad.gemv(2.0, &gs, &z, -2.0);
                std::mem::swap(&mut x_prev, &mut x);
                let mut change = 0.0f64;
                for i in 0..q {
                    let v = z[i] - step * grad[i];
                    x[i] = if in_fixed(i) {
                        0.0
                    } else {
                        v.signum() * (v.abs() - thresholds[i]).max(0.0)
                    };
                    change = change.max((x[i] - x_prev[i]).abs());
                }
                let restart = (0..q).map(|i| (z[i] - x[i]) * (x[i] - x_prev[i])).sum::<f64>() > 0.0;
                let t_next = if restart {
                    1.0
                } else {
                    0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
                };
                let beta = if restart { 0.0 } else { (t - 1.0) / t_next };
                for i in 0..q {
                    z[i] = x[i] + beta * (x[i] - x_prev[i]);
                }
                t = t_next;
                if change <= self.cfg.coeff_tol * x.amax().max(1.0) {
                    break;
                }
            }
            let l1 = |y: &DVector<f64>| (1..=k).map(|i| (y[i] / d[i]).abs()).sum::<f64>() * self.lambda1;
            if value(&x) + l1(&x) <= value(&y0) + l1(&y0) {
                x
            } else {
                y0
            }
        };
        Ok(y.component_mul(&d))
    }

    /// Best linear parameters at camera `r`, starting from `warm`.
    fn solve_linear(&self, r: &CameraMat, om2: &DVector<f64>, warm: &DVector<f64>) -> Result<Fit> {
        let q = self.k() + 3;
        let p = self.w.ncols();
        let om: Vec<f64> = om2.iter().map(|v| v.sqrt()).collect();
        let mut a = DMatrix::<f64>::zeros(2 * p, q);
        let mut b = DVector::<f64>::zeros(2 * p);
        self.fill_linear(r.rows(), &om, &mut a, &mut b);
        let x = self.solve_l1_ls(&a, &b, &vec![0.0; q], warm, 0..0)?;
        let s = self.shape(&x);
        let value = self.value(r, &s, &x, om2);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "frame objective".into(),
            });
        }
        Ok(Fit { r: *r, x, s, value })
    }

    /// One fitting round at fixed weights: damped Gauss-Newton steps on the
    /// camera and the linear parameters jointly. Each step minimises the
    /// linearised residual plus the L1 term and a Marquardt damping term, and
    /// is kept only if the true objective drops.
    fn round(&self, start: Fit, om2: &DVector<f64>, max_steps: usize) -> Result<(Fit, Vec<f64>)> {
        self.round_with(start, om2, max_steps, true)
    }

    /// [`Frame::round`]; with `free_bases` unset the coefficients stay at zero
    /// and only camera, mean scale and translation move.
    fn round_with(
        &self,
        start: Fit,
        om2: &DVector<f64>,
        max_steps: usize,
        free_bases: bool,
    ) -> Result<(Fit, Vec<f64>)> {
        let k = self.k();
        let nx = k + 3;
        let nv = nx + 3;
        let p = self.w.ncols();
        let om: Vec<f64> = om2.iter().map(|v| v.sqrt()).collect();
        let mut fit = start;
        let mut trace = vec![fit.value];
        let mut damping = 1e-3;
        let mut steps = 0;
        while steps < max_steps {
            let rr = *fit.r.rows();
            let mut a = DMatrix::<f64>::zeros(2 * p, nv);
            let mut b = DVector::<f64>::zeros(2 * p);
            self.fill_linear(&rr, &om, &mut a, &mut b);
            // d(residual)/d(delta) for R <- R exp([delta]_x) is  w_j R [s_j]_x.
            for j in 0..p {
                let sx = fit.s.column(j).cross_matrix();
                let n = rr * sx * om[j];
                for c in 0..3 {
                    a[(2 * j, nx + c)] = -n[(0, c)];
                    a[(2 * j + 1, nx + c)] = -n[(1, c)];
                }
            }
            let g = a.tr_mul(&a);
            let mut v0 = DVector::<f64>::zeros(nv);
            v0.rows_mut(0, nx).copy_from(&fit.x);
            let gmax = g.diagonal().max();
            let diag: Vec<f64> = (0..nv).map(|i| g[(i, i)].max(1e-12 * gmax)).collect();
            let fixed = if free_bases { 0..0 } else { 1..k + 1 };

            let accepted = loop {
                let damp: Vec<f64> = diag.iter().map(|d| damping * d).collect();
                let v = self.solve_l1_ls(&a, &b, &damp, &v0, fixed.clone())?;
                let x = v.rows(0, nx).into_owned();
                let delta = nalgebra::Vector3::new(v[nx], v[nx + 1], v[nx + 2]);
                let rot = fit.r.to_rotation() * Rotation3::new(delta).into_inner();
                let r = polar_retract(&rot.fixed_rows::<2>(0).into_owned())?;
                let s = self.shape(&x);
                let value = self.value(&r, &s, &x, om2);
                if value < fit.value {
                    damping = (damping / 3.0).max(1e-12);
                    break Some(Fit { r, x, s, value });
                }
                damping *= 4.0;
                if damping > 1e12 {
                    break None;
                }
            };
            steps += 1;
            let Some(next) = accepted else { break };
            let decrease = fit.value - next.value;
            fit = next;
            trace.push(fit.value);
            if decrease <= self.cfg.tol_rel * fit.value || fit.value <= 1e-30 * (b.norm_squared() + 1.0) {
                break;
            }
        }
        if !fit.value.is_finite() {
            return Err(Error::NonFinite {
                iteration: steps,
                what: "frame objective".into(),
            });
        }
        Ok((fit, trace))
    }

    fn robust_weights(&self, fit: &Fit) -> DVector<f64> {
        let res = self.residuals(fit);
        let mut observed: Vec<f64> = res
            .iter()
            .zip(self.conf.iter())
            .filter(|(_, &c)| c > 0.0)
            .map(|(&r, _)| r)
            .collect();
        if observed.is_empty() {
            return DVector::from_element(res.len(), 1.0);
        }
        observed.sort_by(f64::total_cmp);
        let m = observed.len();
        let median = if m % 2 == 1 {
            observed[m / 2]
        } else {
            0.5 * (observed[m / 2 - 1] + observed[m / 2])
        };
        let scale = (self.w.norm_squared() / self.w.ncols() as f64).sqrt();
        let sigma = (self.cfg.sigma_factor * median)
            .max(1e-6 * scale)
            .max(f64::MIN_POSITIVE);
        let s2 = sigma * sigma;
        DVector::from_iterator(res.len(), res.iter().map(|r| s2 / (s2 + r * r)))
    }

    /// Mean pose scaled to the image at camera `r`, zero coefficients.
    fn rigid_seed(&self, r: CameraMat, om2: &DVector<f64>) -> Fit {
        let mut x = DVector::zeros(self.k() + 3);
        let pred = r.rows() * &self.dict.mean;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..self.w.ncols() {
            num += om2[j] * pred.column(j).dot(&self.w.column(j));
            den += om2[j] * pred.column(j).norm_squared();
        }
        x[0] = if den > 0.0 { num / den } else { 1.0 };
        let s = self.shape(&x);
        let value = self.value(&r, &s, &x, om2);
        Fit { r, x, s, value }
    }

    /// Linear parameters fitted at camera `r`, started from the scaled mean.
    fn seed(&self, r: CameraMat, om2: &DVector<f64>) -> Fit {
        let start = self.rigid_seed(r, om2);
        match self.solve_linear(&r, om2, &start.x) {
            Ok(fit) if fit.value <= start.value => fit,
            _ => start,
        }
    }

    fn finish(&self, fit: Fit, weights: DVector<f64>, rounds: Vec<Vec<f64>>) -> FrameEstimate {
        let k = self.k();
        FrameEstimate {
            pose: Pose3D { coords: fit.s },
            camera: fit.r,
            mean_scale: fit.x[0],
            coeffs: fit.x.rows(1, k).into_owned(),
            translation: Vector2::new(fit.x[k + 1], fit.x[k + 2]),
            weights,
            objective: fit.value,
            rounds,
        }
    }

    fn om2(&self, weights: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            weights.len(),
            weights.iter().zip(self.conf.iter()).map(|(w, c)| (w * c) * (w * c)),
        )
    }

    /// Full robust fit from the given camera seeds.
    fn solve(&self, seeds: &[CameraMat]) -> Result<FrameEstimate> {
        let p = self.w.ncols();
        let mut weights = DVector::from_element(p, 1.0);
        let om2 = self.om2(&weights);
        let mut best: Option<(Fit, Vec<f64>)> = None;
        for &r in seeds {
            let (rigid, _) = self.round_with(self.rigid_seed(r, &om2), &om2, self.cfg.probe_steps, false)?;
            let (fit, trace) = self.round(self.seed(rigid.r, &om2), &om2, self.cfg.probe_steps)?;
            if best.as_ref().is_none_or(|(b, _)| fit.value < b.value) {
                best = Some((fit, trace));
            }
        }
        let (mut fit, mut trace) = best.expect("at least one seed");
        if self.cfg.max_steps > self.cfg.probe_steps {
            let (more, extra) = self.round(fit, &om2, self.cfg.max_steps - self.cfg.probe_steps)?;
            fit = more;
            trace.extend_from_slice(&extra[1..]);
        }
        let mut rounds = vec![trace];
        if self.cfg.robust && self.cfg.irls_rounds > 1 {
            // First weights from a rigid fit of the mean at the chosen camera:
            // with few free parameters, outliers cannot be absorbed by the bases.
            let (rigid, trace) = self.round_with(self.rigid_seed(fit.r, &om2), &om2, self.cfg.max_steps, false)?;
            rounds.push(trace);
            weights = self.robust_weights(&rigid);
            let om2 = self.om2(&weights);
            let (rigid, trace) = self.round_with(rigid, &om2, self.cfg.max_steps, false)?;
            rounds.push(trace);
            weights = self.robust_weights(&rigid);
            let om2 = self.om2(&weights);
            let start = self.solve_linear(&rigid.r, &om2, &rigid.x)?;
            let (next, trace) = self.round(start, &om2, self.cfg.max_steps)?;
            fit = next;
            rounds.push(trace);
            for _ in 2..self.cfg.irls_rounds {
                weights = self.robust_weights(&fit);
                let om2 = self.om2(&weights);
                let (next, trace) = self.round(fit, &om2, self.cfg.max_steps)?;
                fit = next;
                rounds.push(trace);
            }
        }
        Ok(self.finish(fit, weights, rounds))
    }

    /// Refit from the mirror image of `est` under its own weights.
    fn flipped(&self, est: &FrameEstimate) -> Result<FrameEstimate> {
        let n = est.camera.axis();
        let mirror = Matrix3::identity() - n * n.transpose() * 2.0;
        let mirrored = mirror * &est.pose.coords;
        let target = &self.dict.mean * est.mean_scale;
        let (q, _) = best_rotation(&mirrored, &target, false);
        // R_f (Q H S) = R H S = R S.
        let r_f = polar_retract(&(est.camera.rows() * q.transpose()))?;
        let om2 = self.om2(&est.weights);
        let (fit, trace) = self.round(self.seed(r_f, &om2), &om2, self.cfg.max_steps)?;
        Ok(self.finish(fit, est.weights.clone(), vec![trace]))
    }
}

fn frame_problem<'a>(w: &'a Pose2D, dict: &'a PoseDictionary, cfg: &'a InitConfig) -> Result<Frame<'a>> {
    cfg.validate()?;
    if w.num_joints() != dict.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} joints, dictionary {}",
            w.num_joints(),
            dict.num_joints()
        )));
    }
    match w.weighted_centroid() {
        None => return Err(Error::ZeroConfidence { frame: 0 }),
        Some(_) => {
            if let Some(norm) = is_centered(w) {
                return Err(Error::NotCentralized { frame: 0, norm });
            }
        }
    }
    let lambda1 = match cfg.lambda1 {
        Some(l) => l,
        None => 0.01 * w.coords.singular_values().max(),
    };
    let mut atoms = vec![&dict.mean];
    atoms.extend(dict.bases.iter());
    Ok(Frame {
        w: &w.coords,
        conf: &w.conf,
        dict,
        atoms,
        lambda1,
        cfg,
    })
}

fn seeds(restarts: usize) -> Vec<CameraMat> {
    (0..restarts)
        .map(|i| CameraMat::from_rotation(&orbit_rotation(360.0 * i as f64 / restarts as f64, 0.0)))
        .collect()
}

/// Robust single-frame fit of pose and camera, best over `cfg.restarts`
/// azimuth-seeded starts.
///
/// The depth-mirrored refit of the winner counts as one more start.
pub fn estimate_frame(w: &Pose2D, dict: &PoseDictionary, cfg: &InitConfig) -> Result<FrameEstimate> {
    Ok(estimate_frame_with_flip(w, dict, cfg)?.0)
}

/// The lower-objective and the higher-objective member of the pair formed by
/// the multi-start fit and the refit of its depth-mirrored counterpart.
pub fn estimate_frame_with_flip(
    w: &Pose2D,
    dict: &PoseDictionary,
    cfg: &InitConfig,
) -> Result<(FrameEstimate, FrameEstimate)> {
    let frame = frame_problem(w, dict, cfg)?;
    let best = frame.solve(&seeds(cfg.restarts))?;
    let flipped = frame.flipped(&best)?;
    Ok(if flipped.objective < best.objective {
        (flipped, best)
    } else {
        (best, flipped)
    })
}

/// Output of [`initialize_sequence`].
#[derive(Debug, Clone)]
pub struct Initialization {
    pub poses: PoseSeq3D,
    pub cameras: CameraSeq,
    /// `p x n` data weights: input confidence times robust weight.
    pub weights: DMatrix<f64>,
    /// Image offsets of the chosen fits, one per frame.
    pub translations: Vec<Vector2<f64>>,
    pub estimates: Vec<FrameEstimate>,
    /// Frames where the higher-objective candidate was chosen.
    pub flipped: Vec<bool>,
}

/// Fits every frame independently (in parallel), then resolves the depth
/// ambiguity: frame 0 keeps the lower-objective candidate, later frames the
/// candidate whose camera is closest to the previous frame's.
pub fn initialize_sequence(w: &PoseSeq2D, dict: &PoseDictionary, cfg: &InitConfig) -> Result<Initialization> {
    cfg.validate()?;
    if !w.centralized {
        for (t, f) in w.frames.iter().enumerate() {
            if let Some(norm) = is_centered(f) {
                return Err(Error::NotCentralized { frame: t, norm });
            }
        }
    }
    let candidates: Vec<(FrameEstimate, FrameEstimate)> = w
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| estimate_frame_with_flip(f, dict, cfg).map_err(|e| e.in_frame(t)))
        .collect::<Result<_>>()?;

    let n = w.len();
    let p = w.num_joints();
    let mut estimates = Vec::with_capacity(n);
    let mut flipped = Vec::with_capacity(n);
    for (best, mirror) in candidates {
        let take_mirror = match estimates.last() {
            None => false,
            Some(prev) => {
                let prev: &FrameEstimate = prev;
                mirror.camera.angle_to(&prev.camera) < best.camera.angle_to(&prev.camera)
            }
        };
        flipped.push(take_mirror);
        estimates.push(if take_mirror { mirror } else { best });
    }

    let poses = PoseSeq3D::new(estimates.iter().map(|e| e.pose.clone()).collect(), w.fps)?;
    let cameras = CameraSeq {
        frames: estimates.iter().map(|e| e.camera).collect(),
    };
    let mut weights = DMatrix::zeros(p, n);
    for (t, (e, f)) in estimates.iter().zip(&w.frames).enumerate() {
        for j in 0..p {
            weights[(j, t)] = e.weights[j] * f.conf[j];
        }
    }
    let translations = estimates.iter().map(|e| e.translation).collect();
    Ok(Initialization {
        poses,
        cameras,
        weights,
        translations,
        estimates,
        flipped,
    })
}

/// Upper estimate of the largest eigenvalue of a symmetric PSD matrix: a few
/// power steps with a 10% margin, capped by the Gershgorin bound.
fn lambda_max_bound(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let gersh = (0..n)
        .map(|i| g.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    let mut w = DVector::zeros(n);
    let mut est = 0.0;
    for _ in 0..30 {
        let nv = v.norm();
        if !(nv > 0.0) {
            break;
        }
        v /= nv;
        w.gemv(1.0, g, &v, 0.0);
        est = v.dot(&w);
        std::mem::swap(&mut v, &mut w);
    }
    (1.1 * est).min(gersh).max(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orbit_cameras, project, synthesize_tracks, OrbitSpec};
    use crate::eval::procrustes_align;
    use crate::skeleton::centralize;
    use crate::synthetic::random_corpus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn body_dict(k: usize) -> PoseDictionary {
        let corpus = random_corpus(3000, 11);
        let opts = LearnOptions {
            k,
            ..Default::default()
        };
        learn_dictionary(&corpus, &Skeleton::body15(), &opts).unwrap()
    }

    /// Orbit-style view: any azimuth, mild elevation.
    fn random_camera(rng: &mut ChaCha8Rng) -> CameraMat {
        let az = rng.random_range(0.0..360.0);
        let el = rng.random_range(-10.0..10.0);
        CameraMat::from_rotation(&orbit_rotation(az, el))
    }

    fn chain(p: usize) -> Skeleton {
        let names = (0..p).map(|i| format!("j{i}")).collect();
        Skeleton::new(names, (1..p).map(|i| (i - 1, i)).collect()).unwrap()
    }

    fn no_prep(k: usize) -> LearnOptions {
        LearnOptions {
            k,
            align_rotation: false,
            normalize_scale: false,
        }
    }

    #[test]
    fn identical_corpus_has_rank_zero() {
        let sk = Skeleton::body15();
        let pose = random_corpus(1, 4).remove(0);
        let corpus = vec![pose.clone(); 20];
        let poses = prepare_corpus(&corpus, &sk, &LearnOptions::default()).unwrap();
        let pca = pca(&poses);
        assert_eq!(pca.rank, 0);
        let l = mean_limb_length(&pose, &sk);
        let mean = Matrix3xX::from_column_slice(pca.mean.as_slice());
        assert!((mean * l - &pose.coords).norm() < 1e-9 * pose.coords.norm());
        for k in [1, 5] {
            match learn_dictionary(
                &corpus,
                &sk,
                &LearnOptions {
                    k,
                    ..Default::default()
                },
            ) {
                Err(Error::InsufficientRank { requested, achievable }) => {
                    assert_eq!((requested, achievable), (k, 0));
                }
                other => panic!("expected rank error, got {other:?}"),
            }
        }
    }

    #[test]
    fn planted_subspace_is_recovered() {
        let sk = chain(15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gauss = || -> Matrix3xX<f64> { Matrix3xX::from_fn(15, |_, _| rng.sample(StandardNormal)) };
        let mean = gauss();
        let planted: Vec<Matrix3xX<f64>> = (0..3).map(|_| gauss()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sample = || {
            let mut s = mean.clone();
            for b in &planted {
                s += b * rng.sample::<f64, _>(StandardNormal);
            }
            Pose3D { coords: s }
        };
        // Keep the mean pose centred so centring is a no-op.
        let corpus: Vec<Pose3D> = (0..200).map(|_| sample().centered()).collect();
        let held_out: Vec<Pose3D> = (0..20).map(|_| sample().centered()).collect();
        let dict = learn_dictionary(&corpus, &sk, &no_prep(3)).unwrap();
        assert!(matches!(
            learn_dictionary(&corpus, &sk, &no_prep(4)),
            Err(Error::InsufficientRank { achievable: 3, .. })
        ));
        for x in held_out {
            let d = &x.coords - &dict.mean;
            let mut r = d.clone();
            for b in &dict.bases {
                r -= b * b.dot(&d);
            }
            assert!(r.norm() <= 1e-8, "residual {}", r.norm());
        }
        for (i, a) in dict.bases.iter().enumerate() {
            for (j, b) in dict.bases.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((a.dot(b) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn explained_variance_is_nondecreasing() {
        let sk = chain(25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scales: Vec<f64> = (0..75).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let corpus: Vec<Pose3D> = (0..10_000)
            .map(|_| Pose3D {
                coords: Matrix3xX::from_fn(25, |r, c| scales[3 * c + r] * rng.sample::<f64, _>(StandardNormal)),
            })
            .collect();
        let dict = learn_dictionary(&corpus, &sk, &no_prep(64)).unwrap();
        assert_eq!(dict.k(), 64);
        assert!(dict.explained.windows(2).all(|w| w[1] >= w[0]));
        assert!(*dict.explained.last().unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn up_to_clamps_to_rank() {
        let sk = Skeleton::body15();
        let corpus = random_corpus(500, 2);
        let d = learn_dictionary_up_to(&corpus, &sk, &LearnOptions::default()).unwrap();
        // Centred 15-joint poses span at most 42 directions.
        assert!(d.k() <= 42 && d.k() >= 30, "k = {}", d.k());
        assert!(learn_dictionary(&corpus, &sk, &LearnOptions::default()).is_err());
    }

    #[test]
    fn projected_mean_is_fit_exactly() {
        let dict = body_dict(10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = InitConfig {
            lambda1: Some(0.0),
            ..Default::default()
        };
        for _ in 0..5 {
            let r = random_camera(&mut rng);
            let w = project(
                &r,
                &Pose3D {
                    coords: &dict.mean * 250.0,
                },
            );
            let est = estimate_frame(&w, &dict, &cfg).unwrap();
            assert!(est.objective <= 1e-8, "objective {}", est.objective);
            let (sim, aligned) = procrustes_align(
                &est.pose,
                &Pose3D {
                    coords: dict.mean.clone(),
                },
                false,
            )
            .unwrap();
            assert!(sim.scale > 0.0);
            assert!((aligned.coords - &dict.mean).norm() <= 1e-6 * dict.mean.norm());
            assert!(crate::camera::stiefel_error(est.camera.rows()) <= 1e-9);
        }
    }

    fn planted_frame(dict: &PoseDictionary, rng: &mut ChaCha8Rng) -> (Pose3D, CameraMat) {
        let coeffs = DVector::from_fn(dict.k(), |_, _| 0.15 * rng.sample::<f64, _>(StandardNormal));
        let s = Pose3D {
            coords: dict.compose(1.0, &coeffs) * 250.0,
        };
        (s, random_camera(rng))
    }

    /// Defaults with the stopping tolerances tightened to near machine precision.
    fn tight() -> InitConfig {
        InitConfig {
            tol_rel: 1e-10,
            coeff_tol: 1e-12,
            ..Default::default()
        }
    }

    #[test]
    fn planted_coefficients_are_recovered() {
        let dict = body_dict(10);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let (s, r) = planted_frame(&dict, &mut rng);
            let w = project(&r, &s);
            let cfg = InitConfig {
                lambda1: Some(1e-9 * w.coords.singular_values().max()),
                ..tight()
            };
            let est = estimate_frame(&w, &dict, &cfg).unwrap();
            let (_, aligned) = procrustes_align(&est.pose, &s, false).unwrap();
            let err = (0..15)
                .map(|j| (aligned.coords.column(j) - s.coords.column(j)).norm())
                .sum::<f64>()
                / 15.0;
            worst = worst.max(err);
        }
        assert!(worst <= 1.0, "worst mean error {worst} mm");
    }

    #[test]
    fn outlier_joints_are_downweighted() {
        let dict = body_dict(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = InitConfig::default();
        let trials = 200;
        let mut flagged = 0;
        for _ in 0..trials {
            let (s, r) = planted_frame(&dict, &mut rng);
            let mut w = project(&r, &s);
            let mut idx: Vec<usize> = (0..15).collect();
            for i in 0..3 {
                let j = rng.random_range(i..15);
                idx.swap(i, j);
            }
            let bad = &idx[..3];
            for &j in bad {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mag = rng.random_range(200.0..600.0);
                w.coords[(0, j)] += mag * angle.cos();
                w.coords[(1, j)] += mag * angle.sin();
            }
            let c = w.weighted_centroid().unwrap();
            for mut col in w.coords.column_iter_mut() {
                col -= c;
            }
            let est = estimate_frame(&w, &dict, &cfg).unwrap();
            if bad.iter().all(|&j| est.weights[j] < 0.5) {
                flagged += 1;
            }
            for round in &est.rounds {
                for pair in round.windows(2) {
                    assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0));
                }
            }
        }
        assert!(flagged as f64 >= 0.9 * trials as f64, "flagged {flagged}/{trials}");
    }

    #[test]
    fn rejects_bad_input() {
        let dict = body_dict(5);
        let w = project(
            &CameraMat::identity(),
            &Pose3D {
                coords: &dict.mean * 100.0,
            },
        );
        let mut shifted = w.clone();
        for mut c in shifted.coords.column_iter_mut() {
            c[0] += 10.0;
        }
        let cfg = InitConfig::default();
        assert!(matches!(
            estimate_frame(&shifted, &dict, &cfg),
            Err(Error::NotCentralized { .. })
        ));
        let short = Pose2D::certain(w.coords.columns(0, 10).into_owned());
        assert!(matches!(
            estimate_frame(&short, &dict, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_frame_sequence_matches_estimate_frame() {
        let dict = body_dict(10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (s, r) = planted_frame(&dict, &mut rng);
        let w = project(&r, &s);
        let cfg = InitConfig::default();
        let est = estimate_frame(&w, &dict, &cfg).unwrap();
        let seq = PoseSeq2D::new(vec![w], 24.0).unwrap();
        let init = initialize_sequence(&seq, &dict, &cfg).unwrap();
        assert_eq!(init.estimates[0], est);
        assert_eq!(init.poses.frames[0], est.pose);
        assert_eq!(init.cameras.frames[0], est.camera);
    }

    #[test]
    fn orbit_increments_follow_the_camera() {
        let dict =
            learn_dictionary_up_to(&random_corpus(3000, 11), &Skeleton::body15(), &LearnOptions::default()).unwrap();
        let pose = random_corpus(1, 99).remove(0);
        let gt = PoseSeq3D::new(vec![pose; 12], 6.0).unwrap();
        let spec = OrbitSpec {
            omega_deg_s: 60.0,
            fps: 6.0,
            duration_s: 2.0,
            ..Default::default()
        };
        let tracks = synthesize_tracks(&gt, &spec).unwrap();
        let w = centralize(&tracks.tracks).unwrap();
        let cfg = InitConfig {
            lambda1: Some(0.0),
            ..tight()
        };
        let init = initialize_sequence(&w, &dict, &cfg).unwrap();
        let mut inc: Vec<f64> = init
            .cameras
            .frames
            .windows(2)
            .map(|c| c[0].angle_to(&c[1]).to_degrees())
            .collect();
        inc.sort_by(f64::total_cmp);
        let median = inc[inc.len() / 2];
        assert!((median - 10.0).abs() <= 2.0, "median increment {median}, all {inc:?}");
        assert_eq!(orbit_cameras(&spec).unwrap().len(), 12);
    }

    #[test]
    fn frame_errors_carry_the_index() {
        let dict = body_dict(5);
        let good = project(
            &CameraMat::identity(),
            &Pose3D {
                coords: &dict.mean * 100.0,
            },
        );
        let mut dead = good.clone();
        dead.conf.fill(0.0);
        let mut seq = PoseSeq2D::new(vec![good.clone(), good, dead], 24.0).unwrap();
        seq.centralized = true;
        match initialize_sequence(&seq, &dict, &InitConfig::default()) {
            Err(Error::Frame { frame, source }) => assert_eq!(frame, 2, "{source}"),
            other => panic!("expected frame error, got {other:?}"),
        }
    }
}
