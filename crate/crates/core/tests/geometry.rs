mod common;

use nalgebra::Vector3;
use ou3d_core::render::{self, rasterize, NO_POINT};
use ou3d_core::scene::{bounding_box, PointCloud};
use ou3d_core::viewgen::{all_rigs, CameraRig, ViewParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(0.0..20.0),
                rng.random_range(0.0..15.0),
                rng.random_range(0.0..6.0),
            )
        })
        .collect();
    PointCloud::from_positions(positions).unwrap()
}

fn rigs_for(cloud: &PointCloud, size: u32) -> Vec<CameraRig> {
    let params = ViewParams {
        k: 2,
        a_deg: 90,
        height: size,
        width: size + 8,
        ..ViewParams::default()
    };
    all_rigs(&bounding_box(cloud), &params).unwrap()
}

/// Per-pixel scan over every point: nearest depth wins, then lowest index.
fn brute_force(cloud: &PointCloud, rig: &CameraRig, splat: i64) -> (Vec<f32>, Vec<u32>) {
    let (w, h) = (i64::from(rig.width), i64::from(rig.height));
    let k = rig.intrinsic;
    let projected: Vec<Option<(i64, i64, f64)>> = cloud
        .positions()
        .iter()
        .map(|p| {
            let c = rig.to_camera(p);
            if c.z <= render::Z_NEAR {
                return None;
            }
            let u = k[(0, 0)] * c.x / c.z + k[(0, 1)] * c.y / c.z + k[(0, 2)];
            let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
            if !(u.abs() < 1e9 && v.abs() < 1e9) {
                return None;
            }
            Some((u.floor() as i64, v.floor() as i64, c.z))
        })
        .collect();
    let half = splat / 2;
    let mut depth = vec![f32::INFINITY; (w * h) as usize];
    let mut index = vec![NO_POINT; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, u32)> = None;
            for (i, pr) in projected.iter().enumerate() {
                let Some((px, py, z)) = *pr else { continue };
                if (px - x).abs() > half || (py - y).abs() > half {
                    continue;
                }
                let cand = (z, i as u32);
                if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
                    best = Some(cand);
                }
            }
            if let Some((z, i)) = best {
                let o = (y * w + x) as usize;
                depth[o] = z as f32;
                index[o] = i;
            }
        }
    }
    (depth, index)
}

#[test]
fn zbuffer_matches_brute_force() {
    let cloud = random_cloud(1000, 3);
    let rigs = rigs_for(&cloud, 40);
    for rig in rigs.iter().step_by(3) {
        for splat in [1u32, 3] {
            let view = rasterize(&cloud, rig, splat).unwrap();
            let (depth, index) = brute_force(&cloud, rig, i64::from(splat));
            assert!(index.iter().filter(|&&i| i != NO_POINT).count() > 100);
            assert_eq!(view.point_index, index, "rig {} splat {splat}", rig.id);
            let same = view
                .depth
                .iter()
                .zip(&depth)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "depth differs on rig {}", rig.id);
            for (o, &i) in view.point_index.iter().enumerate() {
                let expected = if i == NO_POINT { [0, 0, 0] } else { cloud.colors()[i as usize] };
                assert_eq!(view.rgb[o * 3..o * 3 + 3], expected);
            }
        }
    }
}

#[test]
fn rendering_is_deterministic_across_thread_counts() {
    let cloud = common::two_class_cloud(20.0);
    let rigs = rigs_for(&cloud, 64);
    let one = common::pool(1).install(|| render::render_all(&cloud, &rigs, 3).unwrap());
    let many = common::pool(4).install(|| render::render_all(&cloud, &rigs, 3).unwrap());
    assert_eq!(one, many);
    let cov1 = common::pool(1).install(|| render::coverage_ratio(&cloud, &one, &rigs).unwrap());
    let cov4 = common::pool(4).install(|| render::coverage_ratio(&cloud, &many, &rigs).unwrap());
    assert_eq!(cov1, cov4);
}

#[test]
fn visible_points_agree_with_the_depth_map() {
    let cloud = random_cloud(800, 9);
    let rig = &rigs_for(&cloud, 48)[0];
    let view = rasterize(&cloud, rig, 1).unwrap();
    let visible = render::visible_points(&cloud, &view, rig, 1e-2);
    // Every Z-buffer winner is itself visible at its own pixel.
    for (o, &i) in view.point_index.iter().enumerate() {
        if i != NO_POINT {
            assert!(visible.contains(&(i, o as u32)));
        }
    }
    for &(i, o) in &visible {
        let pr = render::project_point(&cloud.positions()[i as usize], rig).unwrap();
        let z32 = f64::from(pr.depth as f32);
        assert!((z32 - f64::from(view.depth[o as usize])).abs() <= 1e-2 * z32);
    }
}

fn rig_strategy() -> impl Strategy<Value = CameraRig> {
    (1.0f64..200.0, 1.0f64..200.0, 0.5f64..40.0, 0usize..20, 16u32..700, 16u32..700).prop_map(
        |(w, l, h, pick, height, width)| {
            let cloud = PointCloud::from_positions(vec![Vector3::zeros(), Vector3::new(w, l, h)]).unwrap();
            let params = ViewParams {
                k: 2,
                a_deg: 90,
                height,
                width,
                ..ViewParams::default()
            };
            let rigs = all_rigs(&bounding_box(&cloud), &params).unwrap();
            rigs[pick % rigs.len()].clone()
        },
    )
}

proptest! {
    #[test]
    fn pinhole_round_trip(rig in rig_strategy(), fu in 0.0f64..1.0, fv in 0.0f64..1.0, depth in 0.1f64..500.0) {
        let u = fu * f64::from(rig.width - 1);
        let v = fv * f64::from(rig.height - 1);
        let world = render::unproject(u, v, depth, &rig);
        let pr = render::project_point(&world, &rig).expect("in view");
        prop_assert!((pr.u - u).abs() < 1e-6 && (pr.v - v).abs() < 1e-6, "{} {} vs {} {}", pr.u, pr.v, u, v);
        prop_assert!((pr.depth - depth).abs() <= 1e-9 * depth);
    }

    #[test]
    fn extrinsics_are_rigid(rig in rig_strategy()) {
        let r = rig.extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let rtr = r.transpose() * r;
        prop_assert!((rtr - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        prop_assert!(rig.to_camera(&rig.eye).norm() < 1e-9 * (1.0 + rig.eye.norm()));
    }
}
