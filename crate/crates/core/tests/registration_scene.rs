use vdd_core::raster::channel_at;
use vdd_core::registration::{register_images, warp, Homography, Point2, RegistrationParams};
use vdd_core::synthvine::{generate_misaligned_pair, SceneConfig};

#[test]
fn recovers_synthetic_camera_offset() {
    for seed in 0..3u64 {
        let a = 0.02 * (seed as f64 + 1.0);
        let h = Homography::from_rows([
            [a.cos(), -a.sin(), 10.0 - 4.0 * seed as f64],
            [a.sin(), a.cos(), -6.0],
            [1e-5, -5e-6, 1.0],
        ])
        .unwrap();
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        let pair = generate_misaligned_pair(&cfg, &h, 2.0).unwrap();
        let reference = channel_at(&pair.scene.rgb, 0).unwrap();
        let moving = channel_at(&pair.moving, 0).unwrap();
        let out = register_images(&reference, &moving, &RegistrationParams::default()).unwrap();
        for (x, y) in [(0.0, 0.0), (511.0, 0.0), (0.0, 511.0), (511.0, 511.0), (256.0, 256.0)] {
            let p = Point2::new(x, y);
            let err = out.homography.apply(p).dist(pair.truth.apply(p));
            assert!(err < 1.0, "seed {seed}: ({x},{y}) off by {err}");
        }
        assert!(out.rmse_history.windows(2).all(|w| w[1] <= w[0]));
        // the aligned NIR plane matches the scene's own NIR away from the borders
        let aligned = warp(&pair.moving, &out.homography, 512, 512).unwrap();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for y in 64..448 {
            for x in 64..448 {
                sum += (aligned.get(x, y, 2) - pair.scene.nir.get(x, y, 0)).abs() as f64;
                n += 1;
            }
        }
        assert!(sum / (n as f64) < 8.0, "seed {seed}: mean NIR error {}", sum / n as f64);
    }
}
