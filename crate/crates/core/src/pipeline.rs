//! Tracks in, poses and cameras out: centralisation, per-frame
//! initialisation and bundle adjustment.
//!
//! Bundle adjustment runs on tracks divided by their RMS coordinate, so that
//! the articulation weight does not depend on the input units; results are
//! scaled back before they are returned.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, BAConfig, BAState};
use crate::camera::CameraSeq;
use crate::dict::{initialize_sequence, InitConfig, Initialization, PoseDictionary};
use crate::error::{Error, Result};
use crate::skeleton::{centralize, Pose2D, Pose3D, PoseSeq2D, PoseSeq3D, Skeleton};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub init: InitConfig,
    pub ba: BAConfig,
    /// Stop after the per-frame initialisation.
    pub skip_ba: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.init.validate()?;
        self.ba.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Per-frame initialisation, in input units.
    pub init: Initialization,
    /// Final poses (bundle-adjusted unless skipped), in input units.
    pub poses: PoseSeq3D,
    pub cameras: CameraSeq,
    /// Solver state in normalised units (tracks divided by `scale`).
    pub ba: Option<BAState>,
    /// RMS coordinate of the centred tracks.
    pub scale: f64,
    pub init_seconds: f64,
    pub ba_seconds: f64,
}

/// Confidence-weighted RMS coordinate of a centred sequence.
pub fn track_scale(tracks: &PoseSeq2D) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for f in &tracks.frames {
        for j in 0..f.num_joints() {
            num += f.conf[j] * f.coords.column(j).norm_squared();
            den += f.conf[j];
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Checks that the skeleton, dictionary and tracks describe the same joints.
pub fn check_compatible(tracks: &PoseSeq2D, dict: &PoseDictionary, sk: &Skeleton) -> Result<()> {
    dict.check_skeleton(sk)?;
    if tracks.num_joints() != sk.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "tracks have {} joints, skeleton {}",
            tracks.num_joints(),
            sk.num_joints()
        )));
    }
    Ok(())
}

/// Data weights for bundle adjustment: the initialiser's weights if
/// enabled, the track confidences otherwise.
pub fn ba_weights(tracks: &PoseSeq2D, init: &Initialization, cfg: &BAConfig) -> DMatrix<f64> {
    if cfg.use_init_weights {
        init.weights.clone()
    } else {
        DMatrix::from_fn(tracks.num_joints(), tracks.len(), |j, t| tracks.frames[t].conf[j])
    }
}

/// Bundle adjustment of an initialisation, in normalised units.
pub fn adjust(
    tracks: &PoseSeq2D,
    init: &Initialization,
    sk: &Skeleton,
    cfg: &BAConfig,
) -> Result<(PoseSeq3D, CameraSeq, BAState, f64)> {
    let scale = track_scale(tracks);
    if !(scale > 0.0) {
        return Err(Error::Degenerate("tracks have zero spread".into()));
    }
    // Recentre each frame on the robust fit's image offset.
    let frames = tracks
        .frames
        .iter()
        .zip(&init.translations)
        .map(|(f, t)| {
            let mut coords = f.coords.clone();
            for mut c in coords.column_iter_mut() {
                c -= t;
            }
            Pose2D {
                coords: coords / scale,
                conf: f.conf.clone(),
            }
        })
        .collect();
    let normalized = PoseSeq2D {
        frames,
        fps: tracks.fps,
        centralized: true,
        centroids: None,
    };
    let poses0 = PoseSeq3D::new(
        init.poses
            .frames
            .iter()
            .map(|p| Pose3D {
                coords: &p.coords / scale,
            })
            .collect(),
        init.poses.fps,
    )?;
    let mut cfg = cfg.clone();
    if let Some(a) = cfg.alpha {
        cfg.alpha = Some(a / scale);
    }
    let weights = ba_weights(tracks, init, &cfg);
    let state = bundle::solve(&normalized, &poses0, &init.cameras, sk, &cfg, Some(&weights))?;
    let poses = PoseSeq3D::new(
        state
            .poses
            .frames
            .iter()
            .map(|p| Pose3D {
                coords: &p.coords * scale,
            })
            .collect(),
        tracks.fps,
    )?;
    let cameras = state.cameras.clone();
    Ok((poses, cameras, state, scale))
}

/// Centralises `tracks` (if needed), initialises every frame, and runs
/// bundle adjustment unless `cfg.skip_ba`.
pub fn reconstruct(
    tracks: &PoseSeq2D,
    dict: &PoseDictionary,
    sk: &Skeleton,
    cfg: &PipelineConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    check_compatible(tracks, dict, sk)?;
    let centred = if tracks.centralized {
        tracks.clone()
    } else {
        centralize(tracks)?
    };
    let t0 = Instant::now();
    let init = initialize_sequence(&centred, dict, &cfg.init)?;
    let init_seconds = t0.elapsed().as_secs_f64();
    let scale = track_scale(&centred);
    log::debug!("initialised {} frames in {init_seconds:.2} s", centred.len());
    if cfg.skip_ba {
        return Ok(Reconstruction {
            poses: init.poses.clone(),
            cameras: init.cameras.clone(),
            init,
            ba: None,
            scale,
            init_seconds,
            ba_seconds: 0.0,
        });
    }
    let t1 = Instant::now();
    let (poses, cameras, state, scale) = adjust(&centred, &init, sk, &cfg.ba)?;
    log::debug!(
        "bundle adjustment: objective {:?} -> {:?}",
        state.objective_trace.first(),
        state.objective_trace.last()
    );
    Ok(Reconstruction {
        init,
        poses,
        cameras,
        ba: Some(state),
        scale,
        init_seconds,
        ba_seconds: t1.elapsed().as_secs_f64(),
    })
}
