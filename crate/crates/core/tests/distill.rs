mod common;

use nalgebra::Vector3;
use ou3d_core::distill::{train, TrainConfig, VoxelFeatureField};
use ou3d_core::liftfuse::FeatureLibrary;
use ou3d_core::scene::PointCloud;
use ou3d_core::vlmio::cosine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;

fn one_hot(class: u32) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    v[class as usize] = 1.0;
    v
}

/// Teacher library holding each point's one-hot class embedding where
/// `covered` is set.
fn teacher(cloud: &PointCloud, covered: &[bool]) -> FeatureLibrary {
    let labels = cloud.labels().unwrap();
    let mut features = vec![0.0f32; cloud.len() * DIM];
    for (p, &c) in covered.iter().enumerate() {
        if c {
            features[p * DIM..(p + 1) * DIM].copy_from_slice(&one_hot(labels[p]));
        }
    }
    let views = covered.iter().map(|&c| u32::from(c)).collect();
    FeatureLibrary::new(DIM, covered.to_vec(), views, features).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 80,
        batch_size: 64,
        lr: 1e-2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn fit(cloud: &PointCloud, lib: &FeatureLibrary, cfg: &TrainConfig) -> ou3d_core::distill::Trained {
    let field = VoxelFeatureField::for_cloud(cloud, cfg.voxel_size, DIM, cfg.init_std, cfg.seed);
    train(field, cloud, lib, cfg).unwrap()
}

#[test]
fn converges_on_the_tiny_scene() {
    let cloud = common::two_class_cloud(7.5);
    assert!((900..=1100).contains(&cloud.len()), "{} points", cloud.len());
    let lib = teacher(&cloud, &vec![true; cloud.len()]);
    let trained = fit(&cloud, &lib, &config());
    let f3d = trained.field.field_features(cloud.positions());
    let mean_cos = (0..cloud.len())
        .map(|p| cosine(&f3d[p * DIM..(p + 1) * DIM], lib.feature(p)))
        .sum::<f64>()
        / cloud.len() as f64;
    assert!(mean_cos >= 0.99, "mean cosine {mean_cos}");
    assert!(trained.loss_curve.last().unwrap() < &0.02);

    for w in trained.loss_curve.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "loss rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cloud = common::two_class_cloud(5.0);
    let lib = teacher(&cloud, &vec![true; cloud.len()]);
    let cfg = TrainConfig {
        lr: 0.0,
        fill_untrained: false,
        ..config()
    };
    let field = VoxelFeatureField::for_cloud(&cloud, cfg.voxel_size, DIM, cfg.init_std, cfg.seed);
    let before = field.params().to_vec();
    let trained = train(field, &cloud, &lib, &cfg).unwrap();
    assert_eq!(trained.field.params(), &before[..]);
}

#[test]
fn training_is_deterministic() {
    let cloud = common::two_class_cloud(5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let covered: Vec<bool> = (0..cloud.len()).map(|_| rng.random::<f64>() < 0.7).collect();
    let lib = teacher(&cloud, &covered);
    let cfg = TrainConfig { epochs: 10, ..config() };
    let a = common::pool(1).install(|| fit(&cloud, &lib, &cfg));
    let b = common::pool(4).install(|| fit(&cloud, &lib, &cfg));
    assert_eq!(a.field.params(), b.field.params());
    assert_eq!(a.field.to_bytes(), b.field.to_bytes());
    let other = fit(&cloud, &lib, &TrainConfig { seed: 6, ..cfg });
    assert_ne!(a.field.params(), other.field.params());
}

#[test]
fn half_covered_plane_generalizes() {
    // Two classes side by side on a plane; only the strip y < 2 is covered.
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        for j in 0..40 {
            let (x, y) = (0.05 + 0.1 * f64::from(i), 0.05 + 0.1 * f64::from(j));
            positions.push(Vector3::new(x, y, 0.0));
            labels.push(u32::from(x >= 5.0));
        }
    }
    let n = positions.len();
    let names = vec!["left".to_owned(), "right".to_owned()];
    let cloud = PointCloud::new(positions, vec![[0, 0, 0]; n], Some(labels), names).unwrap();
    let covered: Vec<bool> = cloud.positions().iter().map(|p| p.y < 2.0).collect();
    let lib = teacher(&cloud, &covered);
    let trained = fit(&cloud, &lib, &TrainConfig { epochs: 40, ..config() });
    let f3d = trained.field.field_features(cloud.positions());
    let labels = cloud.labels().unwrap();
    let mut checked = 0;
    for (p, pos) in cloud.positions().iter().enumerate() {
        if covered[p] || (pos.x - 5.0).abs() < 0.5 {
            continue;
        }
        let f = &f3d[p * DIM..(p + 1) * DIM];
        let own = cosine(f, &one_hot(labels[p]));
        let other = cosine(f, &one_hot(1 - labels[p]));
        assert!(own > other, "point {p} at {pos:?}: {own} vs {other}");
        checked += 1;
    }
    assert!(checked > 1500);
}

#[test]
fn field_gradient_matches_finite_differences() {
    let cloud = common::two_class_cloud(3.0);
    let lib = teacher(&cloud, &vec![true; cloud.len()]);
    let field = VoxelFeatureField::for_cloud(&cloud, 0.5, DIM, 0.3, 9);
    let points: Vec<usize> = (0..cloud.len()).step_by(7).collect();
    let stencils: Vec<_> = points.iter().map(|&p| field.stencil(&cloud.positions()[p]).0).collect();
    let teacher_rows: Vec<f32> = points.iter().flat_map(|&p| lib.feature(p).to_vec()).collect();
    let (_, grad) = field.loss_and_param_grad(&stencils, &teacher_rows).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..200 {
        let j = rng.random_range(0..grad.len());
        if grad[j].abs() < 1e-6 {
            continue;
        }
        let h = 1e-6;
        let at = |delta: f64| {
            let mut f = field.clone();
            let slot = j / DIM;
            f.slot_params_mut(slot)[j % DIM] += delta;
            f.loss_and_param_grad(&stencils, &teacher_rows).unwrap().0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-8);
        assert!(rel < 1e-3, "param {j}: analytic {} vs numeric {fd}", grad[j]);
        checked += 1;
    }
    assert!(checked > 20);
}
