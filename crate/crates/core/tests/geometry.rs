use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sconv_core::geometry::{
    denormalize_spatial, depth_to_coords, depth_to_hha, hha_raw, normalize_spatial, sanitize_depth, CameraIntrinsics,
    DepthMap, DEFAULT_GRAVITY,
};
use sconv_core::Tensor;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(60.0, 58.0, 15.5, 11.5).unwrap()
}

fn holey(rng: &mut ChaCha8Rng, h: usize, w: usize, p_hole: f64) -> DepthMap {
    let mut v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.5..6.0)).collect();
    for x in v.iter_mut() {
        if rng.gen_bool(p_hole) {
            *x = if rng.gen_bool(0.5) { 0.0 } else { f64::NAN };
        }
    }
    v[rng.gen_range(0..h * w)] = 1.0;
    DepthMap::new(h, w, v).unwrap()
}

#[test]
fn sanitize_fills_holes_and_keeps_valid_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (h, w, ph) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(0.0..0.9));
        let d = holey(&mut rng, h, w, ph);
        let s = sanitize_depth(&d).unwrap();
        assert!(s.is_fully_valid());
        for (i, &ok) in d.validity().iter().enumerate() {
            if ok {
                assert_eq!(s.meters[i], d.meters[i]);
            } else {
                assert!(d.meters.iter().any(|&v| v == s.meters[i]), "filled value must come from a valid pixel");
            }
        }
        assert_eq!(sanitize_depth(&s).unwrap(), s);
    }
}

#[test]
fn hole_free_map_is_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = holey(&mut rng, 6, 7, 0.0);
    assert_eq!(sanitize_depth(&d).unwrap(), d);
}

#[test]
fn coordinates_match_pinhole_formula_and_scale_with_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = intrinsics();
    let d = holey(&mut rng, 24, 32, 0.0);
    let xyz = depth_to_coords(&d, &k).unwrap();
    let d2 = DepthMap::new(24, 32, d.meters.iter().map(|v| 2.0 * v).collect()).unwrap();
    let xyz2 = depth_to_coords(&d2, &k).unwrap();
    let p = 24 * 32;
    for _ in 0..50 {
        let (v, u) = (rng.gen_range(0..24), rng.gen_range(0..32));
        let i = v * 32 + u;
        let z = d.meters[i];
        let expect = [(u as f64 - 15.5) * z / 60.0, (v as f64 - 11.5) * z / 58.0, z];
        for c in 0..3 {
            assert!((xyz.data()[c * p + i] - expect[c]).abs() <= 1e-12);
            assert_eq!(xyz2.data()[c * p + i], 2.0 * xyz.data()[c * p + i]);
        }
    }
}

#[test]
fn disparity_decreases_with_depth() {
    let k = intrinsics();
    let d = DepthMap::new(4, 8, (0..32).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
    let raw = hha_raw(&d, &k, DEFAULT_GRAVITY).unwrap();
    let disp = &raw.data()[..32];
    assert!(disp.windows(2).all(|w| w[1] < w[0]));
    let hha = depth_to_hha(&d, &k, DEFAULT_GRAVITY).unwrap();
    assert!(hha.data()[..32].windows(2).all(|w| w[1] < w[0]));
}

/// Plane `Z = a + b Y` tilted about the camera X axis: its camera-facing normal is
/// `(0, b, -1) / sqrt(1 + b^2)`, so the angle to gravity `+Y` is `acos(b / sqrt(1 + b^2))`.
#[test]
fn tilted_plane_normal_angle_is_recovered() {
    let k = intrinsics();
    for &(a, b) in &[(3.0, 0.4), (2.0, -0.7), (4.0, 1.2)] {
        let (h, w) = (24, 32);
        let meters: Vec<f64> = (0..h * w)
            .map(|i| {
                let v = (i / w) as f64;
                a / (1.0 - b * (v - k.cy) / k.fy)
            })
            .collect();
        let d = DepthMap::new(h, w, meters).unwrap();
        let raw = hha_raw(&d, &k, DEFAULT_GRAVITY).unwrap();
        let expect = (b / (1.0f64 + b * b).sqrt()).acos();
        let p = h * w;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let got = raw.data()[2 * p + y * w + x];
                assert!((got - expect).abs() < 1e-3, "b={b}: {got} vs {expect}");
            }
        }
    }
}

#[test]
fn hha_is_bounded_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = holey(&mut rng, 16, 16, 0.0);
    let hha = depth_to_hha(&d, &intrinsics(), DEFAULT_GRAVITY).unwrap();
    assert!(hha.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(hha, depth_to_hha(&d, &intrinsics(), DEFAULT_GRAVITY).unwrap());
}

proptest! {
    #[test]
    fn normalized_channels_have_zero_mean_unit_variance(
        c in 1usize..4, h in 2usize..9, w in 2usize..9, seed in any::<u64>(), spread in 0.01f64..100.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0) * spread + 3.0);
        let (n, stats) = normalize_spatial(&t).unwrap();
        let p = h * w;
        for plane in n.data().chunks(p) {
            let m = plane.iter().sum::<f64>() / p as f64;
            let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p as f64;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
        let (twice, _) = normalize_spatial(&n).unwrap();
        prop_assert!(twice.max_abs_diff(&n) <= 1e-6);
        prop_assert!(denormalize_spatial(&n, &stats).unwrap().max_abs_diff(&t) <= 1e-9 * spread.max(1.0) * 10.0);
    }
}
