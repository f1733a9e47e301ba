//! Orthographic cameras on the Stiefel manifold and the virtual orbit rig.
//!
//! A camera is the first two rows of a rotation: a `2 x 3` matrix with
//! orthonormal rows. Projection of a centred pose is a plain matrix product.

use nalgebra::{DVector, Matrix2x3, Matrix2xX, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D, PoseSeq2D, PoseSeq3D};

/// Tolerance on `R R^T = I` for every camera we hand out.
pub const STIEFEL_TOL: f64 = 1e-9;

/// Row-orthonormal `2 x 3` camera matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMat(Matrix2x3<f64>);

impl CameraMat {
    /// Wraps `rows`, checking the Stiefel constraint.
    pub fn new(rows: Matrix2x3<f64>) -> Result<Self> {
        let err = stiefel_error(&rows);
        if !(err <= STIEFEL_TOL) {
            return Err(Error::InvalidParameter(format!(
                "camera rows are not orthonormal (|R R^T - I| = {err:.3e})"
            )));
        }
        Ok(CameraMat(rows))
    }

    pub fn identity() -> Self {
        CameraMat(Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0))
    }

    /// First two rows of a full rotation.
    pub fn from_rotation(rot: &Matrix3<f64>) -> Self {
        CameraMat(rot.fixed_rows::<2>(0).into_owned())
    }

    pub fn rows(&self) -> &Matrix2x3<f64> {
        &self.0
    }

    /// Viewing direction, the cross product of the two rows.
    pub fn axis(&self) -> Vector3<f64> {
        let r1: Vector3<f64> = self.0.row(0).transpose();
        let r2: Vector3<f64> = self.0.row(1).transpose();
        r1.cross(&r2)
    }

    /// The full rotation whose first two rows are this camera.
    pub fn to_rotation(&self) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        m.fixed_rows_mut::<2>(0).copy_from(&self.0);
        m.set_row(2, &self.axis().transpose());
        m
    }

    /// Geodesic angle in radians between the completed rotations.
    pub fn angle_to(&self, other: &CameraMat) -> f64 {
        let rel = self.to_rotation() * other.to_rotation().transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// `|R R^T - I|_F`.
pub fn stiefel_error(rows: &Matrix2x3<f64>) -> f64 {
    (rows * rows.transpose() - nalgebra::Matrix2::identity()).norm()
}

/// Per-frame cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSeq {
    pub frames: Vec<CameraMat>,
}

impl CameraSeq {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Virtual camera circling the subject, plus the corruption applied to its
/// synthetic 2D output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct OrbitSpec {
    /// Azimuth rate in degrees per second.
    pub omega_deg_s: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub elevation_deg: f64,
    /// Standard deviation of the isotropic Gaussian 2D noise.
    pub noise: f64,
    /// Probability that a joint observation is replaced by an outlier.
    pub outlier_rate: f64,
    /// Largest outlier displacement.
    pub outlier_mag: f64,
    pub seed: u64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            omega_deg_s: 25.0,
            fps: 24.0,
            duration_s: 10.0,
            elevation_deg: 0.0,
            noise: 0.0,
            outlier_rate: 0.0,
            outlier_mag: 0.0,
            seed: 0,
        }
    }
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration_s));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier rate must be in [0, 1), got {}", self.outlier_rate));
        }
        if !(self.noise >= 0.0 && self.outlier_mag >= 0.0) {
            return bad("noise and outlier magnitude must be nonnegative".into());
        }
        if !(self.omega_deg_s.is_finite() && self.elevation_deg.is_finite()) {
            return bad("angular velocity and elevation must be finite".into());
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.fps * self.duration_s).round() as usize
    }

    /// Azimuth of frame `t` in degrees.
    pub fn azimuth_deg(&self, t: usize) -> f64 {
        self.omega_deg_s * t as f64 / self.fps
    }
}

/// `W = R S` with unit confidence.
pub fn project(cam: &CameraMat, pose: &Pose3D) -> Pose2D {
    Pose2D::certain(cam.rows() * &pose.coords)
}

/// Nearest row-orthonormal matrix in Frobenius norm (`U V^T` of the thin SVD).
pub fn polar_retract(m: &Matrix2x3<f64>) -> Result<CameraMat> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient("non-finite camera matrix".into()));
    }
    let svd = m.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smax > 0.0) || smin <= 1e-12 * smax {
        return Err(Error::RankDeficient(format!(
            "camera matrix singular values {smax:.3e}, {smin:.3e}"
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    Ok(CameraMat(u * v_t))
}

/// Rotation for azimuth `azimuth_deg` about world +y followed by a tilt of
/// `elevation_deg` about the camera's horizontal axis.
pub fn orbit_rotation(azimuth_deg: f64, elevation_deg: f64) -> Matrix3<f64> {
    let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), elevation_deg.to_radians());
    let turn = Rotation3::from_axis_angle(&Vector3::y_axis(), azimuth_deg.to_radians());
    (tilt * turn).into_inner()
}

/// Cameras of the virtual orbit, `round(fps * duration)` frames.
pub fn orbit_cameras(spec: &OrbitSpec) -> Result<CameraSeq> {
    spec.validate()?;
    let frames = (0..spec.num_frames())
        .map(|t| CameraMat::from_rotation(&orbit_rotation(spec.azimuth_deg(t), spec.elevation_deg)))
        .collect();
    Ok(CameraSeq { frames })
}

/// Output of [`synthesize_tracks`].
#[derive(Debug, Clone)]
pub struct SyntheticTracks {
    pub tracks: PoseSeq2D,
    pub cameras: CameraSeq,
    /// `outliers[t][j]` is set when joint `j` of frame `t` was replaced.
    pub outliers: Vec<Vec<bool>>,
}

/// Projects ground truth through the orbit and corrupts it.
///
/// Ground-truth frames are resampled to the orbit frame rate by nearest
/// timestamp and centred before projection. Outliers keep confidence 1.
pub fn synthesize_tracks(gt: &PoseSeq3D, spec: &OrbitSpec) -> Result<SyntheticTracks> {
    spec.validate()?;
    let cameras = orbit_cameras(spec)?;
    let n = cameras.len();
    if n == 0 {
        return Err(Error::InvalidParameter("orbit has zero frames".into()));
    }
    let index_of = |t: usize| (t as f64 * gt.fps / spec.fps).round() as usize;
    if index_of(n - 1) >= gt.len() {
        return Err(Error::DurationMismatch {
            needed: (n - 1) as f64 / spec.fps,
            available: (gt.len() - 1) as f64 / gt.fps,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut frames = Vec::with_capacity(n);
    let mut outliers = Vec::with_capacity(n);
    for (t, cam) in cameras.frames.iter().enumerate() {
        let pose = gt.frames[index_of(t)].centered();
        let mut coords: Matrix2xX<f64> = cam.rows() * &pose.coords;
        let mut mask = vec![false; coords.ncols()];
        for (j, flag) in mask.iter_mut().enumerate() {
            let nx = normal.sample(&mut rng);
            let ny = normal.sample(&mut rng);
            if rng.random::<f64>() < spec.outlier_rate {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let r = spec.outlier_mag * rng.random::<f64>();
                coords[(0, j)] += r * phi.cos();
                coords[(1, j)] += r * phi.sin();
                *flag = true;
            } else {
                coords[(0, j)] += nx;
                coords[(1, j)] += ny;
            }
        }
        let p = coords.ncols();
        frames.push(Pose2D::new(coords, DVector::from_element(p, 1.0))?);
        outliers.push(mask);
    }
    Ok(SyntheticTracks {
        tracks: PoseSeq2D::new(frames, spec.fps)?,
        cameras,
        outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3xX;

    fn random_stiefel(rng: &mut ChaCha8Rng) -> CameraMat {
        let m = Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        polar_retract(&m).unwrap()
    }

    #[test]
    fn identity_truncates_depth() {
        let pose = Pose3D::new(Matrix3xX::from_column_slice(&[1.0, 2.0, 3.0])).unwrap();
        let w = project(&CameraMat::identity(), &pose);
        assert_eq!(w.coords.as_slice(), &[1.0, 2.0]);
        assert_eq!(w.conf[0], 1.0);
    }

    #[test]
    fn quarter_turn_puts_x_on_optical_axis() {
        let cam = CameraMat::from_rotation(&orbit_rotation(90.0, 0.0));
        let pose = Pose3D::new(Matrix3xX::from_column_slice(&[1.0, 0.0, 0.0])).unwrap();
        let w = project(&cam, &pose);
        assert!(w.coords.norm() < 1e-15);
    }

    #[test]
    fn projection_contracts_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cam = random_stiefel(&mut rng);
            let pose = Pose3D::new(Matrix3xX::from_fn(7, |_, _| rng.random_range(-5.0..5.0))).unwrap();
            let w = project(&cam, &pose);
            for j in 0..7 {
                assert!(w.coords.column(j).norm() <= pose.coords.column(j).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn polar_fixed_point_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = random_stiefel(&mut rng);
        let again = polar_retract(cam.rows()).unwrap();
        assert!((again.rows() - cam.rows()).norm() <= 1e-12);

        let m = Matrix2x3::new(2.0, 0.0, 0.0, 0.0, 3.0, 0.0);
        let r = polar_retract(&m).unwrap();
        assert_relative_eq!(*r.rows(), *CameraMat::identity().rows(), epsilon = 1e-14);
    }

    #[test]
    fn polar_rejects_rank_deficient() {
        let m = Matrix2x3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0);
        assert!(matches!(polar_retract(&m), Err(Error::RankDeficient(_))));
        assert!(polar_retract(&Matrix2x3::zeros()).is_err());
    }

    #[test]
    fn polar_is_nearest_among_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let m = Matrix2x3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let r = polar_retract(&m).unwrap();
            assert!(stiefel_error(r.rows()) < 1e-12);
            let best = (m - r.rows()).norm();
            for _ in 0..1000 {
                let other = random_stiefel(&mut rng);
                assert!((m - other.rows()).norm() >= best - 1e-12);
            }
        }
    }

    #[test]
    fn static_orbit_is_constant() {
        let spec = OrbitSpec {
            omega_deg_s: 0.0,
            duration_s: 2.0,
            ..Default::default()
        };
        let cams = orbit_cameras(&spec).unwrap();
        assert_eq!(cams.len(), 48);
        assert!(cams.frames.iter().all(|c| c == &cams.frames[0]));
    }

    #[test]
    fn one_fps_quarter_turns() {
        let spec = OrbitSpec {
            omega_deg_s: 90.0,
            fps: 1.0,
            duration_s: 3.0,
            ..Default::default()
        };
        let cams = orbit_cameras(&spec).unwrap();
        let rel = cams.frames[1].to_rotation() * cams.frames[0].to_rotation().transpose();
        let expected = Rotation3::from_axis_angle(&Vector3::y_axis(), 90f64.to_radians());
        assert_relative_eq!(rel, *expected.matrix(), epsilon = 1e-14);
        assert_relative_eq!(
            cams.frames[1].angle_to(&cams.frames[0]).to_degrees(),
            90.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn drone_orbit_frame_count_and_sweep() {
        let spec = OrbitSpec::default();
        let cams = orbit_cameras(&spec).unwrap();
        assert_eq!(cams.len(), 240);
        // 240 frames of 1/24 s each cover 25 deg/s * 10 s.
        assert_relative_eq!(spec.azimuth_deg(cams.len()), 250.0, epsilon = 1e-12);
        assert_relative_eq!(spec.azimuth_deg(239) + 25.0 / 24.0, 250.0, epsilon = 1e-12);
        for c in &cams.frames {
            assert!(stiefel_error(c.rows()) <= STIEFEL_TOL);
        }
    }

    #[test]
    fn elevation_tilts_about_camera_x() {
        let r = orbit_rotation(0.0, 30.0);
        let cam = CameraMat::from_rotation(&r);
        assert_relative_eq!(cam.axis().y, 30f64.to_radians().sin(), epsilon = 1e-14);
    }

    #[test]
    fn invalid_specs_rejected() {
        let zero = OrbitSpec {
            duration_s: 0.0,
            ..Default::default()
        };
        assert!(orbit_cameras(&zero).is_err());
        let rate = OrbitSpec {
            outlier_rate: 1.0,
            ..Default::default()
        };
        assert!(rate.validate().is_err());
    }

    #[test]
    fn orbit_spec_json_keys() {
        let json = r#"{"omega-deg-s": 45.0, "fps": 30.0, "outlier-rate": 0.1, "seed": 3}"#;
        let spec: OrbitSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.omega_deg_s, 45.0);
        assert_eq!(spec.fps, 30.0);
        assert_eq!(spec.duration_s, 10.0);
        assert_eq!(spec.seed, 3);
        assert!(serde_json::from_str::<OrbitSpec>(r#"{"omega": 1}"#).is_err());
    }

    #[test]
    fn commutes_with_rotating_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = Pose3D::new(Matrix3xX::from_fn(9, |_, _| rng.random_range(-800.0..800.0))).unwrap();
        let spec = OrbitSpec {
            omega_deg_s: 37.0,
            elevation_deg: 12.0,
            duration_s: 1.0,
            ..Default::default()
        };
        for t in [0usize, 5, 23] {
            let rot = orbit_rotation(spec.azimuth_deg(t), spec.elevation_deg);
            let cam = CameraMat::from_rotation(&rot);
            let a = project(&cam, &pose);
            let rotated = Pose3D::new(rot * &pose.coords).unwrap();
            let b = project(&CameraMat::identity(), &rotated);
            assert!((a.coords - b.coords).abs().max() <= 1e-10 * 800.0);
        }
    }

    fn gt_sequence(n: usize, p: usize, seed: u64) -> PoseSeq3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|_| Pose3D::new(Matrix3xX::from_fn(p, |_, _| rng.random_range(-500.0..500.0))).unwrap())
            .collect();
        PoseSeq3D::new(frames, 24.0).unwrap()
    }

    #[test]
    fn clean_synthesis_is_exact_projection() {
        let gt = gt_sequence(48, 6, 1);
        let spec = OrbitSpec {
            omega_deg_s: 30.0,
            duration_s: 2.0,
            ..Default::default()
        };
        let syn = synthesize_tracks(&gt, &spec).unwrap();
        assert_eq!(syn.tracks.len(), 48);
        for t in 0..48 {
            let expected = syn.cameras.frames[t].rows() * gt.frames[t].centered().coords;
            assert_eq!(syn.tracks.frames[t].coords, expected);
        }
        assert!(syn.outliers.iter().flatten().all(|o| !o));
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let gt = gt_sequence(24, 5, 2);
        let spec = OrbitSpec {
            duration_s: 1.0,
            noise: 3.0,
            outlier_rate: 0.2,
            outlier_mag: 200.0,
            seed: 99,
            ..Default::default()
        };
        let a = synthesize_tracks(&gt, &spec).unwrap();
        let b = synthesize_tracks(&gt, &spec).unwrap();
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.outliers, b.outliers);
        let c = synthesize_tracks(&gt, &OrbitSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.tracks, c.tracks);
    }

    #[test]
    fn noise_level_matches_sigma() {
        let gt = gt_sequence(240, 42, 3);
        let sigma = 4.0;
        let spec = OrbitSpec {
            noise: sigma,
            seed: 7,
            ..Default::default()
        };
        let syn = synthesize_tracks(&gt, &spec).unwrap();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for t in 0..syn.tracks.len() {
            let clean = syn.cameras.frames[t].rows() * gt.frames[t].centered().coords;
            let diff = &syn.tracks.frames[t].coords - clean;
            sum_sq += diff.norm_squared();
            count += diff.len();
        }
        assert!(count >= 10_000);
        let std = (sum_sq / count as f64).sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "empirical std {std}");
    }

    #[test]
    fn short_ground_truth_rejected() {
        let gt = gt_sequence(10, 4, 4);
        let spec = OrbitSpec {
            duration_s: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            synthesize_tracks(&gt, &spec),
            Err(Error::DurationMismatch { .. })
        ));
    }

    #[test]
    fn ground_truth_resampled_to_orbit_rate() {
        let gt = PoseSeq3D::new(gt_sequence(100, 4, 5).frames, 48.0).unwrap();
        let spec = OrbitSpec {
            omega_deg_s: 0.0,
            duration_s: 2.0,
            ..Default::default()
        };
        let syn = synthesize_tracks(&gt, &spec).unwrap();
        let expected = CameraMat::identity().rows() * gt.frames[10].centered().coords;
        assert_eq!(syn.tracks.frames[5].coords, expected);
    }
}
