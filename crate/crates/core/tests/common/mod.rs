#![allow(dead_code)]

use ou3d_core::pipeline::{PipelineConfig, SceneSource};
use ou3d_core::scene::{generate_scene, BoxPrim, ClassSpec, GroundPatch, PointCloud, SceneSpec};
use ou3d_core::viewgen::ViewParams;

pub fn classes(names: &[&str]) -> Vec<ClassSpec> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| ClassSpec {
            name: (*n).to_owned(),
            color: [40 * i as u8 + 30, 200 - 30 * i as u8, 90],
        })
        .collect()
}

/// A 10 m square of ground with one box on it.
pub fn two_class_spec(density: f64) -> SceneSpec {
    SceneSpec {
        classes: classes(&["ground", "building"]),
        ground_z: 0.0,
        ground: vec![GroundPatch {
            min: [0.0, 0.0],
            size: [10.0, 10.0],
            class: 0,
        }],
        buildings: vec![BoxPrim {
            min: [3.0, 4.0, 0.0],
            size: [3.0, 2.5, 3.0],
            class: 1,
        }],
        trees: Vec::new(),
        vehicles: Vec::new(),
        density,
        color_jitter: 0,
        seed: 7,
    }
}

pub fn two_class_cloud(density: f64) -> PointCloud {
    generate_scene(&two_class_spec(density)).unwrap()
}

/// A fast configuration on the two-class scene.
pub fn small_config(out: &std::path::Path) -> PipelineConfig {
    let mut c = PipelineConfig {
        scene: SceneSource::Spec {
            spec: two_class_spec(12.0),
        },
        out: out.to_path_buf(),
        views: ViewParams {
            k: 2,
            a_deg: 120,
            r: 0.5,
            seed: 0,
            height: 96,
            width: 96,
        },
        seed: 11,
        ..PipelineConfig::default()
    };
    c.train.epochs = 20;
    c.train.batch_size = 128;
    c.train.lr = 1e-2;
    c
}

pub fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}
