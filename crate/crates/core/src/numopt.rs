//! Optimisation primitives: singular value thresholding, rank-1
//! approximation, accelerated proximal gradient, and first-order descent on
//! the Stiefel manifold of `2 x 3` row-orthonormal matrices.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3};
use serde::{Deserialize, Serialize};

use crate::camera::{polar_retract, CameraMat};
use crate::error::{Error, Result};

/// Settings for [`apg_minimize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxConfig {
    /// Weight of the nonsmooth term.
    pub alpha: f64,
    /// Initial inverse step size.
    pub mu0: f64,
    /// Factor applied to `mu` when the sufficient-decrease test fails.
    pub backtrack_factor: f64,
    pub max_inner_iters: usize,
    /// Stop once the relative decrease of the composite objective drops below this.
    pub tol_rel: f64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        ProxConfig {
            alpha: 0.0,
            mu0: 2.0,
            backtrack_factor: 2.0,
            max_inner_iters: 500,
            tol_rel: 1e-6,
        }
    }
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.mu0 > 0.0) || !(self.backtrack_factor > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "prox config needs alpha >= 0, mu0 > 0, backtrack_factor > 1 (got {}, {}, {})",
                self.alpha, self.mu0, self.backtrack_factor
            )));
        }
        if !(self.tol_rel >= 0.0) {
            return Err(Error::InvalidParameter("tol_rel must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Singular value thresholding: `U max(S - tau, 0) V^T`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    svt_with_norm(m, tau).0
}

/// [`svt`] that also returns the nuclear norm of its output.
pub fn svt_with_norm(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    if m.is_empty() {
        return (m.clone(), 0.0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut nuclear = 0.0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            continue;
        }
        nuclear += shrunk;
        out += u.column(i) * (v_t.row(i) * shrunk);
    }
    (out, nuclear)
}

/// [`svt_with_norm`] through an eigendecomposition of the smaller Gram
/// matrix, much cheaper than an SVD for wide or tall inputs. Singular values
/// below about `1e-8` of the largest are resolved only coarsely, which is
/// harmless as long as `tau` is above that level. `tau = 0` returns the input.
pub fn svt_gram(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    if m.is_empty() {
        return (m.clone(), 0.0);
    }
    let wide = m.nrows() <= m.ncols();
    let g = if wide { m * m.transpose() } else { m.transpose() * m };
    let eig = g.symmetric_eigen();
    if tau == 0.0 {
        let nuclear = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        return (m.clone(), nuclear);
    }
    let mut kept = Vec::new();
    let mut nuclear = 0.0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        if s > tau {
            kept.push((i, (s - tau) / s));
            nuclear += s - tau;
        }
    }
    if kept.is_empty() {
        return (DMatrix::zeros(m.nrows(), m.ncols()), 0.0);
    }
    let basis = DMatrix::from_fn(eig.eigenvectors.nrows(), kept.len(), |r, c| {
        eig.eigenvectors[(r, kept[c].0)]
    });
    let mut scaled = basis.clone();
    for (c, &(_, f)) in kept.iter().enumerate() {
        scaled.column_mut(c).scale_mut(f);
    }
    let out = if wide {
        scaled * (basis.transpose() * m)
    } else {
        (m * basis) * scaled.transpose()
    };
    (out, nuclear)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().sum()
}

/// Nearest rank-1 matrix in Frobenius norm. An all-zero input maps to zero.
///
/// The leading left singular vector comes from the eigendecomposition of the
/// smaller Gram matrix, polished by a few power iterations. nalgebra's SVD can
/// return inaccurate singular vectors for numerically rank-1 inputs, which is
/// exactly the regime the articulation term drives towards.
pub fn rank1_approx(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() || m.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    if m.nrows() > m.ncols() {
        return rank1_approx(&m.transpose()).transpose();
    }
    let eig = (m * m.transpose()).symmetric_eigen();
    let (lead, _) = eig.eigenvalues.argmax();
    let mut u: DVector<f64> = eig.eigenvectors.column(lead).into_owned();
    for _ in 0..3 {
        let next = m * (m.tr_mul(&u));
        let norm = next.norm();
        if !(norm > 0.0) {
            break;
        }
        u = next / norm;
    }
    &u * (u.tr_mul(m))
}

/// Result of [`apg_minimize`].
#[derive(Debug, Clone)]
pub struct ApgOutcome {
    pub x: DMatrix<f64>,
    /// Composite objective `f(x) + alpha * h(x)` at `x`.
    pub objective: f64,
    pub iterations: usize,
    /// Composite objective after each accepted iteration, starting with `x0`.
    pub trace: Vec<f64>,
    pub restarts: usize,
    /// Inverse step size in use at exit.
    pub mu: f64,
}

/// Accelerated proximal gradient for `f(X) + alpha * h(X)`.
///
/// `prox(V, tau)` must return `argmin_X 0.5 |X - V|^2 + tau * h(X)` together
/// with `h` at that minimiser; `prox(V, 0)` must return `V` itself.
///
/// Each iteration extrapolates with weight `(k - 1) / (k + 2)`, takes a
/// gradient step of length `1 / mu` and applies `prox` with `tau = alpha / mu`.
/// `mu` grows by `backtrack_factor` until the quadratic upper bound holds. If
/// the momentum step would raise the composite objective, momentum restarts
/// from the current iterate, so accepted iterates never increase it.
pub fn apg_minimize<F, G, P>(f: F, grad_f: G, prox: P, x0: &DMatrix<f64>, cfg: &ProxConfig) -> Result<ApgOutcome>
where
    F: Fn(&DMatrix<f64>) -> f64,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    P: Fn(&DMatrix<f64>, f64) -> (DMatrix<f64>, f64),
{
    cfg.validate()?;
    let mut x = x0.clone();
    let mut x_prev = x0.clone();
    let h0 = prox(&x, 0.0).1;
    let mut obj = f(&x) + cfg.alpha * h0;
    if !obj.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "objective".into(),
        });
    }
    let mut mu = cfg.mu0;
    let mut k = 1usize;
    let mut trace = vec![obj];
    let mut restarts = 0;
    let mut iterations = 0;

    for it in 1..=cfg.max_inner_iters {
        let mut from_momentum = k > 1;
        let (x_new, obj_new) = loop {
            let y = if from_momentum {
                let beta = (k as f64 - 1.0) / (k as f64 + 2.0);
                &x + (&x - &x_prev) * beta
            } else {
                x.clone()
            };
            let (cand, f_cand, h_cand) = backtracked_step(&f, &grad_f, &prox, &y, &mut mu, cfg, it)?;
            let obj_cand = f_cand + cfg.alpha * h_cand;
            if from_momentum && obj_cand > obj {
                from_momentum = false;
                k = 1;
                restarts += 1;
                continue;
            }
            break (cand, obj_cand);
        };
        iterations = it;
        if obj_new > obj {
            // A plain step can only lose to rounding here; keep the current point.
            break;
        }
        let decrease = obj - obj_new;
        x_prev = std::mem::replace(&mut x, x_new);
        obj = obj_new;
        trace.push(obj);
        k += 1;
        if decrease <= cfg.tol_rel * obj.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(ApgOutcome {
        x,
        objective: obj,
        iterations,
        trace,
        restarts,
        mu,
    })
}

#[allow(clippy::type_complexity)]
fn backtracked_step<F, G, P>(
    f: &F,
    grad_f: &G,
    prox: &P,
    y: &DMatrix<f64>,
    mu: &mut f64,
    cfg: &ProxConfig,
    iteration: usize,
) -> Result<(DMatrix<f64>, f64, f64)>
where
    F: Fn(&DMatrix<f64>) -> f64,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    P: Fn(&DMatrix<f64>, f64) -> (DMatrix<f64>, f64),
{
    let fy = f(y);
    let g = grad_f(y);
    if !fy.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration,
            what: "objective or gradient".into(),
        });
    }
    let slack = 1e-14 * fy.abs();
    for _ in 0..200 {
        let v = y - &g * (1.0 / *mu);
        let (cand, h) = prox(&v, cfg.alpha / *mu);
        let d = &cand - y;
        let f_cand = f(&cand);
        if f_cand.is_finite() && f_cand <= fy + g.dot(&d) + 0.5 * *mu * d.norm_squared() + slack {
            return Ok((cand, f_cand, h));
        }
        *mu *= cfg.backtrack_factor;
    }
    Err(Error::NonFinite {
        iteration,
        what: "backtracking did not find a descent step".into(),
    })
}

/// Projection of a Euclidean gradient onto the tangent space at `r`:
/// `G - sym(G R^T) R`.
pub fn stiefel_tangent(r: &CameraMat, egrad: &Matrix2x3<f64>) -> Matrix2x3<f64> {
    let rr = r.rows();
    let a: Matrix2<f64> = egrad * rr.transpose();
    let sym = (a + a.transpose()) * 0.5;
    egrad - sym * rr
}

/// One Riemannian gradient step with polar retraction.
pub fn stiefel_step(r: &CameraMat, egrad: &Matrix2x3<f64>, step: f64) -> Result<CameraMat> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let xi = stiefel_tangent(r, egrad);
    if xi.iter().all(|v| *v == 0.0) {
        return Ok(*r);
    }
    polar_retract(&(r.rows() - xi * step))
}

/// Settings for [`stiefel_minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiefelOptions {
    pub max_steps: usize,
    /// Stop once the Riemannian gradient norm is below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for StiefelOptions {
    fn default() -> Self {
        StiefelOptions {
            max_steps: 50,
            grad_tol: 1e-8,
            initial_step: 1.0,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StiefelOutcome {
    pub camera: CameraMat,
    pub value: f64,
    pub grad_norm: f64,
    pub steps: usize,
    /// Objective after each accepted step, starting at the input.
    pub trace: Vec<f64>,
}

/// Armijo-backtracked Riemannian gradient descent over `St(3, 2)`.
///
/// Accepted steps strictly decrease `f`; the loop ends at `max_steps`, when
/// the tangent gradient is below `grad_tol`, or when no step size in 40
/// halvings gives sufficient decrease.
pub fn stiefel_minimize<F, G>(r0: &CameraMat, f: F, egrad: G, opts: &StiefelOptions) -> Result<StiefelOutcome>
where
    F: Fn(&CameraMat) -> f64,
    G: Fn(&CameraMat) -> Matrix2x3<f64>,
{
    let mut r = *r0;
    let mut value = f(&r);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "camera objective".into(),
        });
    }
    let mut trace = vec![value];
    let mut step = opts.initial_step;
    let mut grad_norm = f64::INFINITY;
    let mut steps = 0;
    let mut last: Option<(Matrix2x3<f64>, Matrix2x3<f64>)> = None;
    for it in 0..opts.max_steps {
        let xi = stiefel_tangent(&r, &egrad(&r));
        grad_norm = xi.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                what: "camera gradient".into(),
            });
        }
        if grad_norm < opts.grad_tol {
            break;
        }
        // Barzilai-Borwein guess from the previous step, Armijo backtracking after.
        if let Some((r_prev, xi_prev)) = &last {
            let s = r.rows() - r_prev;
            let y = xi - xi_prev;
            let sy = s.dot(&y);
            if sy > 0.0 {
                step = s.norm_squared() / sy;
            }
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..40 {
            if let Ok(cand) = polar_retract(&(r.rows() - xi * t)) {
                let v = f(&cand);
                if v <= value - opts.armijo * t * grad_norm * grad_norm && v < value {
                    accepted = Some((cand, v));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else { break };
        step = t;
        last = Some((*r.rows(), xi));
        r = cand;
        value = v;
        trace.push(value);
        steps += 1;
    }
    Ok(StiefelOutcome {
        camera: r,
        value,
        grad_norm,
        steps,
        trace,
    })
}
