// Temporary probe: pose-only convergence trace. --ignored.

use fieldsplat::field::*;
use fieldsplat::geometry::*;
use fieldsplat::scene::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn pose_only_trace() {
    let scene = generate_scene(0);
    let intr = CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
    let (gt, _) = generate_trajectory(&TrajectorySpec::default(), &scene, 0);
    let frames: Vec<RGBDFrame> = (0..8)
        .map(|i| {
            let mut f = oracle_render(&scene, &gt.entries()[i].1, &intr).unwrap();
            f.index = i;
            f
        })
        .collect();
    let mut hyper = FieldHyper::for_bounds(&scene.room);
    hyper.lambda_depth = 1.0;
    hyper.n_samples = 48;
    let mut field = RadianceField::new(scene.room, &[16, 32, 64]);
    let mut trainer = FieldTrainer::new(&field, hyper.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..1600 {
        let pick = step % frames.len();
        let batch = sample_batch(&frames[pick], &gt.entries()[pick].1, &intr, 1024, &mut rng);
        trainer.step(&mut field, &batch).unwrap();
    }

    let frame = &frames[4];
    let truth = gt.entries()[4].1;
    for lr_pose in [1e-3, 2e-3] {
        for mag in [0.01f64, 0.02] {
            let mut h2 = hyper.clone();
            h2.lr_pose = lr_pose;
            let tracker = Tracker::new(h2, 99);
            let init = Pose::exp(&[mag * 0.7, mag * 0.5, -mag * 0.5, 0.0, 0.0, 0.0]).compose(&truth);
            let mut line = format!(
                "lr {lr_pose} perturb {:.1} mm:",
                (init.translation - truth.translation).norm() * 1000.0
            );
            for iters in [10usize, 20, 40, 60] {
                let pose = tracker.refine_pose(&field, frame, &intr, &init, iters, 7).unwrap();
                line += &format!(" {:.1}", (pose.translation - truth.translation).norm() * 1000.0);
            }
            println!("{line}");
        }
    }
}
