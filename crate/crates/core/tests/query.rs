mod common;

use ou3d_core::pipeline::{build_scene, run_from_scene, Provider, RunOutput, SceneArtifacts};
use ou3d_core::query::{self, heatmap, parse_query, ramp, segment, FusionMode, FusionParams, Lexicon, UNPREDICTED};
use ou3d_core::scene::load_cloud;
use ou3d_core::vlmio::{cosine, OracleParams};

fn run(noise: f64) -> (SceneArtifacts, RunOutput) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(dir.path());
    cfg.provider = Provider::Oracle(OracleParams { noise, min_mask_px: 1 });
    let scene = build_scene(&cfg).unwrap();
    let out = run_from_scene(&cfg, &scene, None).unwrap();
    (scene, out)
}

fn fusion(alpha: f64) -> FusionParams {
    FusionParams {
        alpha,
        mode: FusionMode::Fusion,
    }
}

#[test]
fn alpha_endpoints_reproduce_single_source_predictions() {
    let (scene, out) = run(0.5);
    let lib = &out.upstream.lift.library;
    let f3d = out.segment.f3d.as_deref().unwrap();
    let table = &scene.table;

    let two_d = segment(lib, None, table, &fusion(0.0), "").unwrap();
    let at0 = segment(lib, Some(f3d), table, &fusion(0.0), "").unwrap();
    let at1 = segment(lib, Some(f3d), table, &fusion(1.0), "").unwrap();
    let mut covered = 0;
    for p in 0..lib.len() {
        if lib.is_covered(p) {
            covered += 1;
            assert_eq!(at0.predicted[p], two_d.predicted[p]);
            assert_eq!(at0.point_scores(p), two_d.point_scores(p));
        } else {
            assert_eq!(two_d.predicted[p], UNPREDICTED);
        }
        let f = &f3d[p * table.dim()..(p + 1) * table.dim()];
        let own: Vec<f32> = (0..table.len()).map(|k| cosine(f, table.embedding(k)) as f32).collect();
        assert_eq!(at1.point_scores(p), &own[..]);
        assert_eq!(at1.predicted[p], query::argmax(&own));
    }
    assert!(covered > 0 && covered < lib.len());
}

#[test]
fn ensemble_takes_the_larger_score() {
    let (scene, out) = run(0.5);
    let lib = &out.upstream.lift.library;
    let f3d = out.segment.f3d.as_deref().unwrap();
    let params = FusionParams {
        alpha: 0.1,
        mode: FusionMode::Ensemble,
    };
    let ens = segment(lib, Some(f3d), &scene.table, &params, "").unwrap();
    let two = segment(lib, None, &scene.table, &fusion(0.0), "").unwrap();
    let three = segment(lib, Some(f3d), &scene.table, &fusion(1.0), "").unwrap();
    for p in 0..lib.len() {
        for k in 0..scene.table.len() {
            let expect = if lib.is_covered(p) {
                two.point_scores(p)[k].max(three.point_scores(p)[k])
            } else {
                three.point_scores(p)[k]
            };
            assert_eq!(ens.point_scores(p)[k], expect);
        }
    }
}

#[test]
fn segmentation_is_deterministic_across_thread_counts() {
    let (scene, out) = run(0.5);
    let lib = &out.upstream.lift.library;
    let f3d = out.segment.f3d.as_deref().unwrap();
    let go = || segment(lib, Some(f3d), &scene.table, &fusion(0.1), "q").unwrap();
    let one = common::pool(1).install(go);
    let many = common::pool(4).install(go);
    assert_eq!(one, many);
}

#[test]
fn heatmap_is_hotter_inside_the_queried_class() {
    let (scene, out) = run(0.0);
    let lib = &out.upstream.lift.library;
    let f3d = out.segment.f3d.as_deref().unwrap();
    let dim = scene.table.dim();
    let fused: Vec<f32> = (0..lib.len())
        .flat_map(|p| query::fuse_features(lib.feature(p), &f3d[p * dim..(p + 1) * dim], lib.is_covered(p), 0.1).unwrap())
        .collect();
    let k = scene.table.index_of("building").unwrap();
    let (sims, colored) = heatmap(&scene.cloud, &fused, scene.table.embedding(k)).unwrap();
    let labels = scene.cloud.labels().unwrap();
    let mean = |inside: bool| {
        let v: Vec<f64> = sims
            .iter()
            .zip(labels)
            .filter(|(_, &l)| (l as usize == k) == inside)
            .map(|(s, _)| *s)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > 0.8 && mean(false) < 0.2, "{} vs {}", mean(true), mean(false));
    assert!(sims.iter().all(|s| (-1.0..=1.0).contains(s)));
    for (c, s) in colored.colors().iter().zip(&sims) {
        assert_eq!(*c, ramp(*s));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.ply");
    query::write_heatmap(&path, &colored).unwrap();
    assert_eq!(load_cloud(&path).unwrap(), colored);
}

#[test]
fn ramp_runs_blue_to_red() {
    assert_eq!(ramp(-1.0), [0, 0, 255]);
    assert_eq!(ramp(1.0), [255, 0, 0]);
    assert_eq!(ramp(5.0), ramp(1.0));
    let mid = ramp(0.0);
    assert!(mid[0].abs_diff(mid[2]) <= 1 && mid[1] == 0);
    let reds: Vec<u8> = (-10..=10).map(|i| ramp(f64::from(i) / 10.0)[0]).collect();
    assert!(reds.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn query_parsing_prefers_longest_phrases() {
    let mut lex = Lexicon::new();
    lex.insert("street furniture", &["bench", "lamp"]);
    lex.insert("street", &["road"]);
    lex.insert("green", &["tree", "grass"]);
    let lex = lex.with_class_names(&["building", "road"]);
    assert_eq!(parse_query("Show me the street furniture near buildings", &lex), ["bench", "lamp"]);
    assert_eq!(parse_query("street, green and BUILDING", &lex), ["road", "tree", "grass", "building"]);
    assert!(parse_query("nothing relevant", &lex).is_empty());
    let json = Lexicon::from_json(r#"{"Street Furniture": ["bench"]}"#).unwrap();
    assert_eq!(parse_query("street furniture", &json), ["bench"]);
}
