// Temporary probe: decompose pose-loss bias by term and resolution. --ignored.

use fieldsplat::field::*;
use fieldsplat::geometry::*;
use fieldsplat::scene::*;
use nalgebra::Vector3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sweep(
    field: &RadianceField,
    frame: &RGBDFrame,
    truth: &Pose,
    intr: &CameraIntrinsics,
    hyper: &FieldHyper,
    label: &str,
) {
    println!("{label}: offset mm | color-term | depth-term");
    for k in -3i32..=3 {
        let off = k as f64 * 0.01;
        let pose = Pose::exp(&[off, 0.0, 0.0, 0.0, 0.0, 0.0]).compose(truth);
        let mut lc = 0.0;
        let mut ld = 0.0;
        let mut n = 0;
        for v in (0..64).step_by(2) {
            for u in (0..64).step_by(2) {
                let z = frame.depth.get(u, v);
                if z <= 0.0 {
                    continue;
                }
                let dir_cam = Vector3::new(
                    (u as f64 + 0.5 - intr.cx) / intr.fx,
                    (v as f64 + 0.5 - intr.cy) / intr.fy,
                    1.0,
                );
                let ray = intr.pixel_ray(u as f64 + 0.5, v as f64 + 0.5, &pose);
                let (c, d, _o) = render_ray(field, &ray, 96, hyper.near, hyper.far);
                let gtc = frame.color.get(u, v);
                for ch in 0..3 {
                    lc += (c[ch] - gtc[ch]).powi(2);
                }
                ld += (d - z * dir_cam.norm()).powi(2);
                n += 1;
            }
        }
        println!(
            "  {:+3.0} | {:.6} | {:.6}",
            off * 1000.0,
            lc / n as f64,
            ld / n as f64
        );
    }
}

#[test]
#[ignore]
fn bias_decomposition() {
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

    for (label, levels) in [
        ("16/32/64", vec![16usize, 32, 64]),
        ("32/64/128", vec![32usize, 64, 128]),
    ] {
        let mut hyper = FieldHyper::for_bounds(&scene.room);
        hyper.lambda_depth = 1.0;
        hyper.n_samples = 48;
        let mut field = RadianceField::new(scene.room, &levels);
        let mut trainer = FieldTrainer::new(&field, hyper.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t0 = std::time::Instant::now();
        for step in 0..1600 {
            let pick = step % frames.len();
            let batch = sample_batch(&frames[pick], &gt.entries()[pick].1, &intr, 1024, &mut rng);
            trainer.step(&mut field, &batch).unwrap();
        }
        println!("{label}: 1600 steps took {:?}", t0.elapsed());
        sweep(&field, &frames[4], &gt.entries()[4].1, &intr, &hyper, label);
    }
}
