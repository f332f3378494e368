mod common;

use std::collections::BTreeMap;

use ou3d_core::metrics::{self, evaluate, run_sweep, sweep_paths, SweepCell, SweepGrid, SweepRow};
use ou3d_core::pipeline::{self, build_scene, cell_config, run_from_scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts each quantity with its own pass over the points.
fn brute_force(pred: &[u32], truth: &[u32], classes: u32, filter: Option<&[bool]>) -> (f64, f64, f64) {
    let keep = |i: usize| filter.is_none_or(|f| f[i]);
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| keep(i)).collect();
    let mut ious = Vec::new();
    let mut accs = Vec::new();
    for c in 0..classes {
        let tp = idx.iter().filter(|&&i| pred[i] == c && truth[i] == c).count();
        let fp = idx.iter().filter(|&&i| pred[i] == c && truth[i] != c).count();
        let fneg = idx.iter().filter(|&&i| pred[i] != c && truth[i] == c).count();
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
        if tp + fneg > 0 {
            accs.push(tp as f64 / (tp + fneg) as f64);
        }
    }
    let correct = idx.iter().filter(|&&i| pred[i] == truth[i]).count();
    (
        ious.iter().sum::<f64>() / ious.len() as f64,
        accs.iter().sum::<f64>() / accs.len() as f64,
        correct as f64 / idx.len() as f64,
    )
}

#[test]
fn metrics_match_brute_force_on_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, classes) in [(100_000usize, 13u32), (50_000, 2), (1_000, 40)] {
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        // Mostly right, with a skew so classes differ.
        let pred: Vec<u32> = truth
            .iter()
            .map(|&t| if rng.random::<f64>() < 0.7 { t } else { rng.random_range(0..classes / 2 + 1) })
            .collect();
        let filter: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
        for f in [None, Some(&filter[..])] {
            let e = evaluate(&pred, &truth, classes as usize, f).unwrap();
            let (miou, macc, oa) = brute_force(&pred, &truth, classes, f);
            assert_eq!(e.miou, miou);
            assert_eq!(e.macc, macc);
            assert_eq!(e.oa, oa);
            assert_eq!(e.evaluated, f.map_or(n, |f| f.iter().filter(|&&b| b).count()));
        }
    }
}

proptest! {
    #[test]
    fn metrics_match_brute_force(
        pairs in prop::collection::vec((0u32..6, 0u32..6), 1..400),
        mask in prop::collection::vec(any::<bool>(), 400),
    ) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let filter = &mask[..pred.len()];
        let e = evaluate(&pred, &truth, 6, None).unwrap();
        prop_assert_eq!((e.miou, e.macc, e.oa), brute_force(&pred, &truth, 6, None));
        prop_assert!((0.0..=1.0).contains(&e.miou) && e.miou <= e.macc.max(e.oa) + 1.0);
        if filter.iter().any(|&b| b) {
            let e = evaluate(&pred, &truth, 6, Some(filter)).unwrap();
            prop_assert_eq!((e.miou, e.macc, e.oa), brute_force(&pred, &truth, 6, Some(filter)));
        }
        let perfect = evaluate(&truth, &truth, 6, None).unwrap();
        prop_assert_eq!((perfect.miou, perfect.macc, perfect.oa), (1.0, 1.0, 1.0));
    }
}

fn row(cell: &SweepCell, seed: u64) -> SweepRow {
    SweepRow {
        cell: *cell,
        s_r: 1.0,
        miou: (seed % 1000) as f64 / 1000.0,
        macc: cell.alpha,
        oa: 0.5,
        wall_seconds: 0.0,
        per_class_iou: BTreeMap::from([("a".to_owned(), Some(0.25))]),
    }
}

#[test]
fn sweep_records_failures_and_retries_them() {
    let dir = tempfile::tempdir().unwrap();
    let grid = SweepGrid {
        alpha: vec![0.0, 0.5],
        sbff: vec![false, true],
        ..SweepGrid::default()
    };
    let flaky = |cells: &[SweepCell], seed: u64| -> Vec<Result<SweepRow, String>> {
        cells
            .iter()
            .map(|c| if c.sbff { Err("boom".to_owned()) } else { Ok(row(c, seed)) })
            .collect()
    };
    let first = run_sweep(&grid, dir.path(), 3, 2, &flaky).unwrap();
    assert_eq!((first.rows.len(), first.failures.len(), first.skipped), (2, 2, 0));
    let (csv, report, errors) = sweep_paths(dir.path());
    assert_eq!(metrics::read_sweep_csv(&csv).unwrap().len(), 2);
    assert!(std::fs::read_to_string(&errors).unwrap().contains("boom"));
    assert!(report.exists());

    let fine = |cells: &[SweepCell], seed: u64| -> Vec<Result<SweepRow, String>> { cells.iter().map(|c| Ok(row(c, seed))).collect() };
    let second = run_sweep(&grid, dir.path(), 3, 2, &fine).unwrap();
    assert_eq!((second.rows.len(), second.failures.len(), second.skipped), (4, 0, 2));
    let rows = metrics::read_sweep_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    // Cells of one upstream group share a seed.
    let seeds: Vec<f64> = rows.iter().filter(|r| !r.cell.sbff).map(|r| r.miou).collect();
    assert_eq!(seeds[0], seeds[1]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(metrics::CSV_HEADER));
}

#[test]
fn sweep_cell_matches_direct_run_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let base = common::small_config(dir.path());
    let grid = SweepGrid {
        k: vec![2],
        a_deg: vec![120],
        alpha: vec![0.0, 0.3],
        ..SweepGrid::default()
    };
    let sweep_dir = dir.path().join("sweep");
    let first = pipeline::sweep(&base, &grid, &sweep_dir, 1).unwrap();
    assert_eq!((first.rows.len(), first.skipped), (2, 0));
    assert!(first.failures.is_empty());

    let scene = build_scene(&base).unwrap();
    for r in &first.rows {
        let cfg = cell_config(&base, &r.cell, r.cell.seed(base.seed));
        let direct = run_from_scene(&cfg, &scene, None).unwrap().report;
        assert_eq!(r.miou, direct.miou);
        assert_eq!(r.macc, direct.macc);
        assert_eq!(r.oa, direct.oa);
        assert_eq!(r.s_r, direct.s_r);
    }

    let again = pipeline::sweep(&base, &grid, &sweep_dir, 1).unwrap();
    assert_eq!((again.rows.len(), again.skipped), (2, 2));

    // Drop one row, as if the sweep was interrupted, and resume.
    let (csv, _, _) = sweep_paths(&sweep_dir);
    let rows = metrics::read_sweep_csv(&csv).unwrap();
    metrics::write_sweep_csv(&csv, &rows[..1]).unwrap();
    let resumed = pipeline::sweep(&base, &grid, &sweep_dir, 1).unwrap();
    assert_eq!(resumed.skipped, 1);
    let after = metrics::read_sweep_csv(&csv).unwrap();
    assert_eq!(after.len(), 2);
    for (a, b) in after.iter().zip(&rows) {
        assert!(a.cell.same(&b.cell));
        assert_eq!((a.miou, a.macc, a.oa, a.s_r), (b.miou, b.macc, b.oa, b.s_r));
    }
}
