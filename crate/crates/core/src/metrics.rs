//! Segmentation metrics and the ablation sweep harness.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction has {pred} labels but truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("filter has {filter} entries for {points} points")]
    FilterMismatch { filter: usize, points: usize },
    #[error("label {label} at point {point} is outside 0..{classes}")]
    LabelOutOfRange { point: usize, label: u32, classes: usize },
    #[error("no points selected for evaluation")]
    NothingEvaluated,
    #[error("invalid sweep grid: {0}")]
    InvalidGrid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sweep file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: u32, pred: u32) {
        self.counts[truth as usize * self.classes + pred as usize] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.tp(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub macc: f64,
    pub oa: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` for classes with no ground-truth points.
    pub per_class_acc: Vec<Option<f64>>,
    pub evaluated: usize,
    pub confusion: ConfusionMatrix,
}

/// Score `pred` against `truth` over the points selected by `filter` (all
/// points when `None`).
///
/// IoU is `TP / (TP + FP + FN)`, accuracy `TP / (TP + FN)`, OA the trace over
/// the total. Classes with `TP + FP + FN = 0` are left out of both means, and
/// classes without ground-truth points are left out of the accuracy mean.
pub fn evaluate(pred: &[u32], truth: &[u32], classes: usize, filter: Option<&[bool]>) -> Result<Evaluation, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if let Some(f) = filter {
        if f.len() != pred.len() {
            return Err(MetricsError::FilterMismatch {
                filter: f.len(),
                points: pred.len(),
            });
        }
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if filter.is_some_and(|f| !f[i]) {
            continue;
        }
        for label in [p, t] {
            if label as usize >= classes {
                return Err(MetricsError::LabelOutOfRange {
                    point: i,
                    label,
                    classes,
                });
            }
        }
        cm.add(t, p);
    }
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::NothingEvaluated);
    }
    let mut ious = Vec::with_capacity(classes);
    let mut accs = Vec::with_capacity(classes);
    for c in 0..classes {
        let (tp, fp, fneg) = (cm.tp(c) as f64, cm.fp(c) as f64, cm.fn_(c) as f64);
        ious.push((tp + fp + fneg > 0.0).then(|| tp / (tp + fp + fneg)));
        accs.push((tp + fneg > 0.0).then(|| tp / (tp + fneg)));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    let trace: u64 = (0..classes).map(|c| cm.tp(c)).sum();
    Ok(Evaluation {
        miou: mean(&ious),
        macc: mean(&accs),
        oa: trace as f64 / total as f64,
        per_class_iou: ious,
        per_class_acc: accs,
        evaluated: total as usize,
        confusion: cm,
    })
}

/// Axes of the ablation grid. Every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    #[serde(rename = "K")]
    pub k: Vec<u32>,
    #[serde(rename = "A")]
    pub a_deg: Vec<u32>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sbff: Vec<bool>,
    pub k_topk: Vec<usize>,
    pub splat_px: Vec<u32>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            k: vec![4],
            a_deg: vec![90],
            r: vec![0.5],
            alpha: vec![0.1],
            sbff: vec![true],
            k_topk: vec![5],
            splat_px: vec![3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(rename = "K")]
    pub k: u32,
    #[serde(rename = "A_deg")]
    pub a_deg: u32,
    #[serde(rename = "R")]
    pub r: f64,
    pub alpha: f64,
    pub sbff: bool,
    pub k_topk: usize,
    pub splat_px: u32,
}

impl SweepCell {
    /// Cell with alpha cleared: everything before the final scoring step.
    pub fn upstream(&self) -> UpstreamKey {
        UpstreamKey {
            k: self.k,
            a_deg: self.a_deg,
            r_bits: self.r.to_bits(),
            sbff: self.sbff,
            k_topk: self.k_topk,
            splat_px: self.splat_px,
        }
    }

    /// Seed for this cell. Cells that differ only in alpha share it, so
    /// they are scored on the same trained student.
    pub fn seed(&self, base: u64) -> u64 {
        base ^ self.upstream().hash64()
    }

    fn sort_key(&self) -> (u32, u32, f64, f64, bool, usize, u32) {
        (self.k, self.a_deg, self.r, self.alpha, self.sbff, self.k_topk, self.splat_px)
    }

    /// Equal in every setting, comparing floats by bit pattern.
    pub fn same(&self, other: &SweepCell) -> bool {
        self.upstream() == other.upstream() && self.alpha.to_bits() == other.alpha.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UpstreamKey {
    k: u32,
    a_deg: u32,
    r_bits: u64,
    sbff: bool,
    k_topk: usize,
    splat_px: u32,
}

impl UpstreamKey {
    fn hash64(&self) -> u64 {
        let text = format!(
            "{}|{}|{}|{}|{}|{}",
            self.k, self.a_deg, self.r_bits, self.sbff, self.k_topk, self.splat_px
        );
        rng::fnv1a(text.as_bytes())
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let axes = [
            ("K", self.k.len()),
            ("A", self.a_deg.len()),
            ("R", self.r.len()),
            ("alpha", self.alpha.len()),
            ("sbff", self.sbff.len()),
            ("k_topk", self.k_topk.len()),
            ("splat_px", self.splat_px.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(MetricsError::InvalidGrid(format!("axis {name} is empty")));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(MetricsError::InvalidGrid("alpha outside [0, 1]".into()));
        }
        Ok(())
    }

    /// All cells, sorted by key, duplicates removed.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &k in &self.k {
            for &a_deg in &self.a_deg {
                for &r in &self.r {
                    for &alpha in &self.alpha {
                        for &sbff in &self.sbff {
                            for &k_topk in &self.k_topk {
                                for &splat_px in &self.splat_px {
                                    out.push(SweepCell {
                                        k,
                                        a_deg,
                                        r,
                                        alpha,
                                        sbff,
                                        k_topk,
                                        splat_px,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        sort_cells(&mut out);
        out.dedup_by(|a, b| a.same(b));
        out
    }
}

fn sort_cells(cells: &mut [SweepCell]) {
    cells.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
}

/// One finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub s_r: f64,
    pub miou: f64,
    pub macc: f64,
    pub oa: f64,
    pub wall_seconds: f64,
    /// Per-class IoU by class name; `None` when the class was dropped.
    pub per_class_iou: BTreeMap<String, Option<f64>>,
}

pub const CSV_HEADER: &str = "K,A_deg,R,alpha,sbff,k_topk,splat_px,S_R,mIoU,mAcc,OA,wall_seconds";

impl SweepRow {
    fn csv_line(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.k, c.a_deg, c.r, c.alpha, c.sbff, c.k_topk, c.splat_px, self.s_r, self.miou, self.macc, self.oa, self.wall_seconds
        )
    }

    fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return None;
        }
        Some(Self {
            cell: SweepCell {
                k: f[0].parse().ok()?,
                a_deg: f[1].parse().ok()?,
                r: f[2].parse().ok()?,
                alpha: f[3].parse().ok()?,
                sbff: f[4].parse().ok()?,
                k_topk: f[5].parse().ok()?,
                splat_px: f[6].parse().ok()?,
            },
            s_r: f[7].parse().ok()?,
            miou: f[8].parse().ok()?,
            macc: f[9].parse().ok()?,
            oa: f[10].parse().ok()?,
            wall_seconds: f[11].parse().ok()?,
            per_class_iou: BTreeMap::new(),
        })
    }
}

/// A failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub cell: SweepCell,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    /// Cells skipped because the CSV already held them.
    pub skipped: usize,
}

/// Files of a sweep in `dir`.
pub fn sweep_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("sweep.csv"), dir.join("sweep_report.json"), dir.join("sweep_errors.json"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, MetricsError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(MetricsError::Malformed {
            path: path.to_owned(),
            message: "unexpected header".into(),
        });
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            SweepRow::parse_csv(l).ok_or_else(|| MetricsError::Malformed {
                path: path.to_owned(),
                message: format!("bad row `{l}`"),
            })
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MetricsError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Write rows sorted by cell key.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), MetricsError> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.cell.sort_key().partial_cmp(&b.cell.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Runs every cell of one upstream group (cells differing only in alpha)
/// and returns one result per cell, in order.
pub trait CellRunner: Sync {
    fn run_group(&self, cells: &[SweepCell], seed: u64) -> Vec<Result<SweepRow, String>>;
}

impl<F> CellRunner for F
where
    F: Fn(&[SweepCell], u64) -> Vec<Result<SweepRow, String>> + Sync,
{
    fn run_group(&self, cells: &[SweepCell], seed: u64) -> Vec<Result<SweepRow, String>> {
        self(cells, seed)
    }
}

/// Run `grid` into `dir`, skipping cells already present in its CSV.
///
/// Groups of cells sharing everything but alpha run together, at most
/// `max_concurrent` groups at a time. The CSV, the per-class JSON report and
/// the error list are rewritten after each group, so an interrupted sweep
/// resumes where it stopped. Failed cells are recorded and retried on the
/// next run.
pub fn run_sweep(
    grid: &SweepGrid,
    dir: &Path,
    base_seed: u64,
    max_concurrent: usize,
    runner: &dyn CellRunner,
) -> Result<SweepOutcome, MetricsError> {
    grid.validate()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (csv, report, errors) = sweep_paths(dir);
    let mut rows = read_sweep_csv(&csv)?;
    if let Ok(text) = std::fs::read_to_string(&report) {
        if let Ok(prev) = serde_json::from_str::<Vec<SweepRow>>(&text) {
            for r in rows.iter_mut() {
                if let Some(p) = prev.iter().find(|p| p.cell.same(&r.cell)) {
                    r.per_class_iou = p.per_class_iou.clone();
                }
            }
        }
    }
    let todo: Vec<SweepCell> = grid
        .cells()
        .into_iter()
        .filter(|c| !rows.iter().any(|r| r.cell.same(c)))
        .collect();
    let skipped = grid.cells().len() - todo.len();

    let mut groups: Vec<Vec<SweepCell>> = Vec::new();
    let mut index: HashMap<UpstreamKey, usize> = HashMap::new();
    for c in todo {
        let slot = *index.entry(c.upstream()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(c);
    }

    let state = Mutex::new((rows, Vec::<SweepFailure>::new(), 0usize));
    let persist = |rows: &[SweepRow], failures: &[SweepFailure]| -> Result<(), MetricsError> {
        write_sweep_csv(&csv, rows)?;
        let mut sorted = rows.to_vec();
        sorted.sort_by(|a, b| a.cell.sort_key().partial_cmp(&b.cell.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
        write_atomic(&report, &serde_json::to_vec_pretty(&sorted).expect("serializable"))?;
        write_atomic(&errors, &serde_json::to_vec_pretty(failures).expect("serializable"))
    };
    let next = Mutex::new(0usize);
    let first_error: Mutex<Option<MetricsError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..max_concurrent.max(1).min(groups.len().max(1)) {
            s.spawn(|| loop {
                let g = {
                    let mut n = next.lock().expect("lock");
                    if *n >= groups.len() || first_error.lock().expect("lock").is_some() {
                        return;
                    }
                    *n += 1;
                    *n - 1
                };
                let cells = &groups[g];
                let results = runner.run_group(cells, cells[0].seed(base_seed));
                let mut st = state.lock().expect("lock");
                for (cell, res) in cells.iter().zip(results) {
                    match res {
                        Ok(mut row) => {
                            row.cell = *cell;
                            st.0.push(row);
                            st.2 += 1;
                        }
                        Err(error) => {
                            log::warn!("sweep cell {cell:?} failed: {error}");
                            st.1.push(SweepFailure { cell: *cell, error });
                        }
                    }
                }
                if let Err(e) = persist(&st.0, &st.1) {
                    first_error.lock().expect("lock").get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    let (mut rows, failures, _) = state.into_inner().expect("lock");
    persist(&rows, &failures)?;
    rows.sort_by(|a, b| a.cell.sort_key().partial_cmp(&b.cell.sort_key()).unwrap_or(std::cmp::Ordering::Equal));
    Ok(SweepOutcome {
        rows,
        failures,
        skipped,
    })
}
