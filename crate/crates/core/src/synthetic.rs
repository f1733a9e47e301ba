//! Synthetic ground truth for the bundled 15-joint body.
//!
//! Every limb direction is its rest direction rotated about a fixed axis by
//! an angle `sign * f_k(t) + offset`, where the `f_k` are a handful of shared
//! sinusoids. Limb lengths are therefore constant, and the stacked shape
//! matrix has rank at most `1 + 2K` for `K` angle functions, since each
//! coordinate is a combination of `1, cos f_k(t), sin f_k(t)`.

use std::f64::consts::TAU;

use nalgebra::{Matrix3xX, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::skeleton::{Pose3D, PoseSeq3D, Skeleton};

/// Parent joint, rest direction and nominal length (mm) for each non-root
/// joint of [`Skeleton::body15`], listed parent-first.
const SEGMENTS: [(usize, usize, [f64; 3], f64); 14] = [
    (1, 0, [-1.0, 0.0, 0.0], 110.0),
    (2, 1, [0.0, -1.0, 0.0], 440.0),
    (3, 2, [0.0, -1.0, 0.0], 420.0),
    (4, 0, [1.0, 0.0, 0.0], 110.0),
    (5, 4, [0.0, -1.0, 0.0], 440.0),
    (6, 5, [0.0, -1.0, 0.0], 420.0),
    (7, 0, [0.0, 1.0, 0.0], 480.0),
    (8, 7, [0.0, 1.0, 0.0], 200.0),
    (9, 7, [1.0, 0.0, 0.0], 170.0),
    (10, 9, [0.0, -1.0, 0.0], 290.0),
    (11, 10, [0.0, -1.0, 0.0], 250.0),
    (12, 7, [-1.0, 0.0, 0.0], 170.0),
    (13, 12, [0.0, -1.0, 0.0], 290.0),
    (14, 13, [0.0, -1.0, 0.0], 250.0),
];

#[derive(Debug, Clone, Copy)]
enum Axis {
    /// Forward/backward swing (about the body's left-right axis).
    Sagittal,
    /// Sideways swing (about the front-back axis).
    Coronal,
}

impl Axis {
    fn unit(self) -> Unit<Vector3<f64>> {
        match self {
            Axis::Sagittal => Vector3::x_axis(),
            Axis::Coronal => Vector3::z_axis(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Drive {
    axis: Axis,
    func: usize,
    sign: f64,
    offset: f64,
}

#[derive(Debug, Clone, Copy)]
struct AngleFn {
    amplitude: f64,
    freq_hz: f64,
    phase: f64,
}

impl AngleFn {
    fn at(&self, time: f64) -> f64 {
        self.amplitude * (TAU * self.freq_hz * time + self.phase).sin()
    }
}

/// Random limb lengths around the nominal body, scaled by up to +-10% per limb.
fn random_lengths(rng: &mut ChaCha8Rng) -> [f64; 14] {
    let overall = rng.random_range(0.9..1.1);
    let mut out = [0.0; 14];
    for (o, seg) in out.iter_mut().zip(SEGMENTS.iter()) {
        *o = seg.3 * overall * rng.random_range(0.92..1.08);
    }
    // Keep left and right limbs symmetric.
    for (r, l) in [(0, 3), (1, 4), (2, 5), (8, 11), (9, 12), (10, 13)] {
        out[l] = out[r];
    }
    out
}

fn build_pose(lengths: &[f64; 14], angle: impl Fn(usize) -> (Axis, f64)) -> Pose3D {
    let mut coords = Matrix3xX::zeros(15);
    for (s, &(child, parent, dir, _)) in SEGMENTS.iter().enumerate() {
        let (axis, theta) = angle(s);
        let rot = Rotation3::from_axis_angle(&axis.unit(), theta);
        let d = rot * Vector3::from(dir) * lengths[s];
        let base = coords.column(parent).into_owned();
        coords.set_column(child, &(base + d));
    }
    Pose3D { coords }.centered()
}

/// Default range of the driver amplitudes, in degrees.
pub const DEFAULT_AMPLITUDE_DEG: (f64, f64) = (10.0, 25.0);

/// A sequence whose joints follow `num_functions` shared sinusoidal angle
/// drivers: constant limb lengths, stacked rank at most `1 + 2 * num_functions`.
pub fn planted_sequence(n: usize, fps: f64, num_functions: usize, seed: u64) -> Result<PoseSeq3D> {
    planted_sequence_with(n, fps, num_functions, DEFAULT_AMPLITUDE_DEG, seed)
}

/// [`planted_sequence`] with driver amplitudes drawn from `amplitude_deg`.
pub fn planted_sequence_with(
    n: usize,
    fps: f64,
    num_functions: usize,
    amplitude_deg: (f64, f64),
    seed: u64,
) -> Result<PoseSeq3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = random_lengths(&mut rng);
    let k = num_functions.max(1);
    let funcs: Vec<AngleFn> = (0..k)
        .map(|_| AngleFn {
            amplitude: rng.random_range(amplitude_deg.0..amplitude_deg.1).to_radians(),
            freq_hz: rng.random_range(0.3..1.2),
            phase: rng.random_range(0.0..TAU),
        })
        .collect();

    // Walking-like defaults: legs and arms in antiphase, shins and forearms
    // follow with a bend; the remaining functions pick limbs at random.
    let mut drives: Vec<Drive> = (0..14)
        .map(|_| Drive {
            axis: Axis::Sagittal,
            func: 0,
            sign: 1.0,
            offset: 0.0,
        })
        .collect();
    let legs = [(1usize, 1.0), (2, 1.0), (4, -1.0), (5, -1.0)];
    for (s, sign) in legs {
        drives[s] = Drive {
            axis: Axis::Sagittal,
            func: 0,
            sign,
            offset: if s == 2 || s == 5 {
                -rng.random_range(0.0f64..25.0).to_radians()
            } else {
                0.0
            },
        };
    }
    let arms = [(9usize, 1.0), (10, 1.0), (12, -1.0), (13, -1.0)];
    for (s, sign) in arms {
        drives[s] = Drive {
            axis: Axis::Sagittal,
            func: 1.min(k - 1),
            sign,
            offset: if s == 10 || s == 13 {
                rng.random_range(10f64..50.0).to_radians()
            } else {
                0.0
            },
        };
    }
    // Hips, collarbones and torso hold a small fixed tilt; the head nods
    // with one of the drivers. A scaled driver angle would leave the
    // span of `cos f_k, sin f_k`, so nothing is damped.
    for s in [0usize, 3, 6, 8, 11] {
        let axis = if rng.random::<bool>() {
            Axis::Sagittal
        } else {
            Axis::Coronal
        };
        drives[s] = Drive {
            axis,
            func: 0,
            sign: 0.0,
            offset: rng.random_range(-6.0f64..6.0).to_radians(),
        };
    }
    drives[7] = Drive {
        axis: if rng.random::<bool>() {
            Axis::Sagittal
        } else {
            Axis::Coronal
        },
        func: rng.random_range(0..k),
        sign: if rng.random::<bool>() { 1.0 } else { -1.0 },
        offset: 0.0,
    };
    if k > 2 {
        for s in [10usize, 13, 2, 5] {
            if rng.random::<f64>() < 0.5 {
                drives[s].func = rng.random_range(2..k);
            }
        }
    }

    let frames = (0..n)
        .map(|t| {
            let time = t as f64 / fps;
            build_pose(&lengths, |s| {
                let d = drives[s];
                (d.axis, d.sign * funcs[d.func].at(time) + d.offset)
            })
        })
        .collect();
    PoseSeq3D::new(frames, fps)
}

/// Independent random poses with per-limb random swings and random body
/// proportions. Used as a training corpus that does not share the planted
/// subspace of [`planted_sequence`].
pub fn random_corpus(count: usize, seed: u64) -> Vec<Pose3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let lengths = random_lengths(&mut rng);
            let angles: Vec<(Axis, f64)> = (0..14)
                .map(|s| {
                    let range: f64 = match s {
                        1 | 4 | 9 | 12 => 55.0,
                        2 | 5 | 10 | 13 => 45.0,
                        6 => 15.0,
                        _ => 10.0,
                    };
                    let axis = if rng.random::<f64>() < 0.75 {
                        Axis::Sagittal
                    } else {
                        Axis::Coronal
                    };
                    (axis, rng.random_range(-range..range).to_radians())
                })
                .collect();
            build_pose(&lengths, |s| angles[s])
        })
        .collect()
}

/// The skeleton the generators are built for.
pub fn skeleton() -> Skeleton {
    Skeleton::body15()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::limb_lengths_sq;

    #[test]
    fn planted_sequence_is_low_rank_and_articulated() {
        let sk = skeleton();
        for seed in 0..5 {
            let seq = planted_sequence(240, 24.0, 4, seed).unwrap();
            let sv = seq.stacked().singular_values();
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            assert!(sv[9] <= 1e-9 * sv[0], "rank above 9: {:?}", &sv[..11]);
            let l = limb_lengths_sq(&seq, &sk).unwrap();
            for t in 1..seq.len() {
                for e in 0..sk.num_edges() {
                    assert!((l[(e, t)] - l[(e, 0)]).abs() <= 1e-9 * l[(e, 0)]);
                }
            }
            let height = seq.frames[0].coords.row(1).max() - seq.frames[0].coords.row(1).min();
            assert!((1300.0..2000.0).contains(&height), "height {height}");
        }
    }

    #[test]
    fn corpus_is_deterministic_and_centered() {
        let a = random_corpus(10, 3);
        let b = random_corpus(10, 3);
        assert_eq!(a, b);
        for p in &a {
            assert!(p.centroid().norm() < 1e-9);
        }
    }
}
