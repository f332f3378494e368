//! Open-vocabulary labeling: hybrid 2D/3D feature fusion, cosine scoring
//! against text embeddings, the keyword query parser and similarity heatmaps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liftfuse::FeatureLibrary;
use crate::scene::{write_cloud, PlyFormat};
use crate::scene::{PointCloud, SceneError};
use crate::vlmio::{cosine, TextEmbeddingTable};

/// Predicted id of a point that has no feature to score (2D-only runs).
pub const UNPREDICTED: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("point {point}: both 2D and 3D features are zero")]
    ZeroFeature { point: usize },
    #[error("feature dimension {found} does not match the text table ({expected})")]
    DimMismatch { expected: usize, found: usize },
    #[error("{what}: expected {expected} rows, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("text table is empty")]
    EmptyTable,
    #[error("unknown class `{0}` in query")]
    UnknownClass(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid lexicon: {0}")]
    Lexicon(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted average of the features, then cosine scoring.
    #[default]
    Fusion,
    /// Per-class maximum of the 2D and 3D cosine scores.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Weight of the 3D feature.
    pub alpha: f64,
    pub mode: FusionMode,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: FusionMode::Fusion,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), QueryError> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(QueryError::InvalidAlpha(self.alpha))
        }
    }
}

/// `alpha * f3d + (1 - alpha) * f2d`, L2-normalized. Uncovered points take
/// `f3d` alone. At `alpha == 0` a covered point returns `f2d` unchanged and
/// at `alpha == 1` every point returns `f3d` unchanged.
pub fn fuse_features(f2d: &[f32], f3d: &[f32], covered: bool, alpha: f64) -> Result<Vec<f32>, QueryError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QueryError::InvalidAlpha(alpha));
    }
    if f2d.len() != f3d.len() {
        return Err(QueryError::DimMismatch {
            expected: f2d.len(),
            found: f3d.len(),
        });
    }
    let zero = |v: &[f32]| v.iter().all(|&x| x == 0.0);
    let pick = |v: &[f32]| if zero(v) { Err(QueryError::ZeroFeature { point: 0 }) } else { Ok(v.to_vec()) };
    if !covered || alpha == 1.0 {
        return pick(f3d);
    }
    if alpha == 0.0 {
        return pick(f2d);
    }
    let mixed: Vec<f64> = f2d
        .iter()
        .zip(f3d)
        .map(|(&a, &b)| alpha * f64::from(b) + (1.0 - alpha) * f64::from(a))
        .collect();
    let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(QueryError::ZeroFeature { point: 0 });
    }
    Ok(mixed.iter().map(|x| (x / n) as f32).collect())
}

/// Per-point labels and class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// Class names in score-column order.
    pub classes: Vec<String>,
    /// Argmax of each score row (lowest index on ties), or [`UNPREDICTED`].
    pub predicted: Vec<u32>,
    /// `n_points * classes.len()` similarity scores.
    pub scores: Vec<f32>,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn point_scores(&self, p: usize) -> &[f32] {
        let c = self.classes.len();
        &self.scores[p * c..(p + 1) * c]
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(scores: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best as u32
}

/// Label every point against `table`.
///
/// `f3d` holds normalized student features for all points. Without it only
/// covered points are scored (from 2D features) and the rest are left
/// [`UNPREDICTED`].
pub fn segment(
    f2d: &FeatureLibrary,
    f3d: Option<&[f32]>,
    table: &TextEmbeddingTable,
    params: &FusionParams,
    query: &str,
) -> Result<QueryResult, QueryError> {
    params.validate()?;
    if table.is_empty() {
        return Err(QueryError::EmptyTable);
    }
    let dim = table.dim();
    if f2d.dim() != dim {
        return Err(QueryError::DimMismatch {
            expected: dim,
            found: f2d.dim(),
        });
    }
    let n = f2d.len();
    if let Some(f) = f3d {
        if f.len() != n * dim {
            return Err(QueryError::LengthMismatch {
                what: "3D features",
                expected: n * dim,
                found: f.len(),
            });
        }
    }
    let c = table.len();
    let mut scores = vec![0.0f32; n * c];
    let mut predicted = vec![UNPREDICTED; n];
    scores
        .par_chunks_mut(c)
        .zip(predicted.par_iter_mut())
        .enumerate()
        .try_for_each(|(p, (row, pred))| -> Result<(), QueryError> {
            let covered = f2d.is_covered(p);
            let r3 = f3d.map(|f| &f[p * dim..(p + 1) * dim]);
            let r2 = f2d.feature(p);
            match (params.mode, r3) {
                (_, None) => {
                    if !covered {
                        return Ok(());
                    }
                    score_row(r2, table, row);
                }
                (FusionMode::Fusion, Some(r3)) => {
                    let fused = fuse_features(r2, r3, covered, params.alpha).map_err(|e| match e {
                        QueryError::ZeroFeature { .. } => QueryError::ZeroFeature { point: p },
                        other => other,
                    })?;
                    score_row(&fused, table, row);
                }
                (FusionMode::Ensemble, Some(r3)) => {
                    score_row(r3, table, row);
                    if covered {
                        for (k, s) in row.iter_mut().enumerate() {
                            *s = s.max(cosine(r2, table.embedding(k)) as f32);
                        }
                    }
                }
            }
            *pred = argmax(row);
            Ok(())
        })?;
    Ok(QueryResult {
        query: query.to_owned(),
        classes: table.names().to_vec(),
        predicted,
        scores,
    })
}

fn score_row(feature: &[f32], table: &TextEmbeddingTable, row: &mut [f32]) {
    for (k, s) in row.iter_mut().enumerate() {
        *s = cosine(feature, table.embedding(k)) as f32;
    }
}

/// Restrict `table` to `names`, in the given order.
pub fn subset_table(table: &TextEmbeddingTable, names: &[String]) -> Result<TextEmbeddingTable, QueryError> {
    if names.is_empty() {
        return Err(QueryError::EmptyTable);
    }
    let mut vectors = Vec::with_capacity(names.len() * table.dim());
    for n in names {
        let i = table.index_of(n).ok_or_else(|| QueryError::UnknownClass(n.clone()))?;
        vectors.extend_from_slice(table.embedding(i));
    }
    TextEmbeddingTable::new(names.to_vec(), table.dim(), vectors).map_err(|_| QueryError::EmptyTable)
}

/// Phrase to class-name mapping used by [`parse_query`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: &str, classes: &[&str]) {
        self.entries
            .insert(words(phrase).join(" "), classes.iter().map(|s| s.to_string()).collect());
    }

    /// Every class name maps to itself unless already present.
    pub fn with_class_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for n in names {
            let key = words(n.as_ref()).join(" ");
            self.entries
                .entry(key)
                .or_insert_with(|| vec![n.as_ref().to_owned()]);
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self, QueryError> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        Ok(Self {
            entries: raw.into_iter().map(|(k, v)| (words(&k).join(" "), v)).collect(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, QueryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| QueryError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn longest_phrase(&self) -> usize {
        self.entries.keys().map(|k| k.split(' ').count()).max().unwrap_or(0)
    }
}

/// Scan `text` word by word, taking the longest lexicon phrase starting at
/// each position. Returns the union of matched class lists in first-seen
/// order without duplicates.
pub fn parse_query(text: &str, lexicon: &Lexicon) -> Vec<String> {
    let ws = words(text);
    let max = lexicon.longest_phrase();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let mut matched = 0;
        for len in (1..=max.min(ws.len() - i)).rev() {
            if let Some(classes) = lexicon.entries.get(&ws[i..i + len].join(" ")) {
                for c in classes {
                    if !out.contains(c) {
                        out.push(c.clone());
                    }
                }
                matched = len;
                break;
            }
        }
        i += matched.max(1);
    }
    out
}

/// Blue (-1) to red (+1) through purple.
pub fn ramp(similarity: f64) -> [u8; 3] {
    let t = ((similarity.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Per-point cosine with `text` and the cloud recolored by [`ramp`].
pub fn heatmap(cloud: &PointCloud, features: &[f32], text: &[f32]) -> Result<(Vec<f64>, PointCloud), QueryError> {
    let dim = text.len();
    if dim == 0 || features.len() != cloud.len() * dim {
        return Err(QueryError::DimMismatch {
            expected: cloud.len() * dim,
            found: features.len(),
        });
    }
    let sims: Vec<f64> = features.par_chunks(dim).map(|f| cosine(f, text)).collect();
    let colored = cloud.with_colors(sims.iter().map(|&s| ramp(s)).collect())?;
    Ok((sims, colored))
}

pub fn write_heatmap(path: impl AsRef<Path>, colored: &PointCloud) -> Result<(), QueryError> {
    write_cloud(path, colored, PlyFormat::BinaryLittleEndian)?;
    Ok(())
}

/// The four feature/evaluation combinations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fused 2D features only, scored on covered points.
    TwoD,
    /// Student features only, scored on all points.
    ThreeD,
    /// Fused features, scored on covered points.
    FusedVisible,
    /// Fused features with the student filling uncovered points, all points.
    FusedAll,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TwoD, Variant::ThreeD, Variant::FusedVisible, Variant::FusedAll];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoD => "2d_only",
            Variant::ThreeD => "3d_only",
            Variant::FusedVisible => "fused_visible",
            Variant::FusedAll => "fused_all",
        }
    }

    pub fn covered_only(self) -> bool {
        matches!(self, Variant::TwoD | Variant::FusedVisible)
    }

    /// Run the variant; `alpha` applies to the fused variants.
    pub fn segment(
        self,
        f2d: &FeatureLibrary,
        f3d: &[f32],
        table: &TextEmbeddingTable,
        alpha: f64,
    ) -> Result<QueryResult, QueryError> {
        let fusion = |alpha| FusionParams {
            alpha,
            mode: FusionMode::Fusion,
        };
        match self {
            Variant::TwoD => segment(f2d, None, table, &fusion(0.0), self.name()),
            Variant::ThreeD => segment(f2d, Some(f3d), table, &fusion(1.0), self.name()),
            Variant::FusedVisible | Variant::FusedAll => segment(f2d, Some(f3d), table, &fusion(alpha), self.name()),
        }
    }
}
