use orbit_mocap::camera::{stiefel_error, synthesize_tracks, OrbitSpec};
use orbit_mocap::dict::{learn_dictionary_up_to, LearnOptions, PoseDictionary};
use orbit_mocap::eval::{reconstruction_error, run_sweep, Method, SweepConfig};
use orbit_mocap::pipeline::{reconstruct, PipelineConfig};
use orbit_mocap::skeleton::{PoseSeq3D, Skeleton};
use orbit_mocap::synthetic::{planted_sequence, random_corpus};
use orbit_mocap::Error;

fn setup() -> (Skeleton, PoseDictionary, PoseSeq3D) {
    let sk = Skeleton::body15();
    let dict = learn_dictionary_up_to(&random_corpus(800, 7), &sk, &LearnOptions::default()).unwrap();
    (sk, dict, planted_sequence(72, 24.0, 4, 21).unwrap())
}

#[test]
fn bundle_adjustment_improves_a_moving_camera_reconstruction() {
    let (sk, dict, gt) = setup();
    let spec = OrbitSpec {
        omega_deg_s: 30.0,
        duration_s: 3.0,
        noise: 2.0,
        ..Default::default()
    };
    let syn = synthesize_tracks(&gt, &spec).unwrap();
    let rec = reconstruct(&syn.tracks, &dict, &sk, &PipelineConfig::default()).unwrap();
    let joints = sk.evaluation_joints();
    let init = reconstruction_error(&rec.init.poses, &gt, &joints, "").unwrap().mean;
    let ba = reconstruction_error(&rec.poses, &gt, &joints, "").unwrap().mean;
    assert!(ba < init, "BA {ba} vs init {init}");
    assert!(rec.cameras.frames.iter().all(|c| stiefel_error(c.rows()) <= 1e-9));
    let trace = &rec.ba.as_ref().unwrap().objective_trace;
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0]));

    let skip = PipelineConfig {
        skip_ba: true,
        ..Default::default()
    };
    let only_init = reconstruct(&syn.tracks, &dict, &sk, &skip).unwrap();
    assert!(only_init.ba.is_none());
    assert_eq!(only_init.poses, rec.init.poses);
}

#[test]
fn mismatched_dictionary_is_rejected() {
    let (_, dict, gt) = setup();
    let names: Vec<String> = (0..15).map(|i| format!("j{i}")).collect();
    let edges = Skeleton::body15().edges().to_vec();
    let other = Skeleton::new(names, edges).unwrap();
    let syn = synthesize_tracks(
        &gt,
        &OrbitSpec {
            duration_s: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    let err = reconstruct(&syn.tracks, &dict, &other, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let (sk, dict, gt) = setup();
    let seqs = vec![gt];
    let cfg = SweepConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_sweep(&seqs, &[0.0, 30.0], &dict, &sk, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.rows.len(), 2 * Method::ALL.len());
    for m in Method::ALL {
        assert!(a.sweep_mean(m).is_finite());
    }
}
