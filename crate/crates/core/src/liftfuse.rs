//! Lifting mask features onto points and fusing them across views.
//!
//! For each view a point receives the feature of the mask under its
//! projection, provided the Z-buffer confirms the point is the visible
//! surface there. Sample balancing then caps, per view, how many points any
//! one mask may contribute: the cap `tau` is the mean size of the `k`
//! smallest masks, and larger masks are randomly cut down to `floor(tau)`
//! points. The surviving per-view features are averaged per point.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{self, RenderedView};
use crate::rng::{self, tag};
use crate::scene::PointCloud;
use crate::viewgen::CameraRig;
use crate::vlmio::MaskSet;

pub const LIBRARY_MAGIC: [u8; 4] = *b"OU3F";
pub const LIBRARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"OU3F\", found {0:?}")]
    BadMagic(String),
    #[error("unsupported feature library version {0}")]
    Version(u32),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("feature library invariant violated at point {point}: {message}")]
    Invariant { point: usize, message: String },
    #[error("view {view}: mask set is {mh}x{mw} but the render is {vh}x{vw}")]
    ShapeMismatch {
        view: u32,
        mh: u32,
        mw: u32,
        vh: u32,
        vw: u32,
    },
    #[error("mask sets disagree on feature dimension ({0} vs {1})")]
    DimMismatch(u32, u32),
    #[error("no mask set for view {0}")]
    MissingMasks(u32),
}

/// Sample-balancing settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbffParams {
    /// Number of smallest masks averaged into `tau`.
    pub k: usize,
    pub enabled: bool,
    pub seed: u64,
}

impl Default for SbffParams {
    fn default() -> Self {
        Self {
            k: 5,
            enabled: true,
            seed: 0,
        }
    }
}

/// A depth-validated projection of a point into a mask of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Lift {
    pub point: u32,
    /// Row-major pixel offset.
    pub pixel: u32,
    /// 1-based mask id.
    pub mask: u32,
}

/// Depth-validated projections of every point that lands in a mask,
/// in point order. Background pixels (mask 0) are dropped.
pub fn valid_projections(
    cloud: &PointCloud,
    view: &RenderedView,
    rig: &CameraRig,
    masks: &MaskSet,
    eps_rel: f64,
) -> Result<Vec<Lift>, LiftError> {
    if (masks.height, masks.width) != (view.height, view.width) {
        return Err(LiftError::ShapeMismatch {
            view: view.rig_id,
            mh: masks.height,
            mw: masks.width,
            vh: view.height,
            vw: view.width,
        });
    }
    Ok(render::visible_points(cloud, view, rig, eps_rel)
        .into_iter()
        .filter_map(|(point, pixel)| {
            let mask = masks.mask_map[pixel as usize];
            (mask != 0).then_some(Lift { point, pixel, mask })
        })
        .collect())
}

/// Projected-point count per mask id (index 0 unused).
pub fn mask_counts(lifts: &[Lift], num_masks: u32) -> Vec<usize> {
    let mut counts = vec![0usize; num_masks as usize + 1];
    for l in lifts {
        counts[l.mask as usize] += 1;
    }
    counts
}

/// Mean of the `k` smallest non-zero counts, or of all of them when fewer
/// than `k` masks received points. `None` when no mask has a point.
pub fn tau(counts: &[usize], k: usize) -> Option<f64> {
    let mut nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.is_empty() || k == 0 {
        return None;
    }
    nonzero.sort_unstable();
    let take = k.min(nonzero.len());
    Some(nonzero[..take].iter().sum::<usize>() as f64 / take as f64)
}

/// Per-view mask counts and the resulting threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SbffCounts {
    pub counts: Vec<usize>,
    pub tau: Option<f64>,
}

pub fn sbff_counts(lifts: &[Lift], num_masks: u32, k: usize) -> SbffCounts {
    let counts = mask_counts(lifts, num_masks);
    let tau = tau(&counts, k);
    SbffCounts { counts, tau }
}

/// Cut every mask holding more than `tau` projections down to `floor(tau)`
/// uniformly chosen ones. Sampling for mask `j` of view `v` is seeded by
/// `(seed, v, j)` alone. Output keeps the input order.
pub fn balanced_sample(lifts: &[Lift], counts: &[usize], tau: f64, view_id: u32, seed: u64) -> Vec<Lift> {
    let cap = tau.floor() as usize;
    let mut keep = vec![true; lifts.len()];
    let mut by_mask: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, l) in lifts.iter().enumerate() {
        if (counts[l.mask as usize] as f64) > tau {
            by_mask[l.mask as usize].push(i);
        }
    }
    for (mask, members) in by_mask.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = rng::rng_for(seed, &[tag::SBFF, u64::from(view_id), mask as u64]);
        let chosen = index::sample(&mut rng, members.len(), cap.min(members.len()));
        let mut selected = vec![false; members.len()];
        for c in chosen {
            selected[c] = true;
        }
        for (m, sel) in members.iter().zip(selected) {
            keep[*m] = sel;
        }
    }
    lifts
        .iter()
        .zip(keep)
        .filter_map(|(l, k)| k.then_some(*l))
        .collect()
}

/// Apply sample balancing to one view's projections; identity when disabled.
pub fn balance_view(lifts: Vec<Lift>, num_masks: u32, view_id: u32, params: &SbffParams) -> Vec<Lift> {
    if !params.enabled {
        return lifts;
    }
    let SbffCounts { counts, tau } = sbff_counts(&lifts, num_masks, params.k);
    match tau {
        Some(tau) => balanced_sample(&lifts, &counts, tau, view_id, params.seed),
        None => lifts,
    }
}

/// Per-point fused 2D features (the teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLibrary {
    dim: usize,
    covered: Vec<bool>,
    view_count: Vec<u32>,
    features: Vec<f32>,
}

impl FeatureLibrary {
    pub fn new(
        dim: usize,
        covered: Vec<bool>,
        view_count: Vec<u32>,
        features: Vec<f32>,
    ) -> Result<Self, LiftError> {
        let n = covered.len();
        if view_count.len() != n || features.len() != n * dim {
            return Err(LiftError::Invariant {
                point: 0,
                message: "field lengths disagree".into(),
            });
        }
        let lib = Self {
            dim,
            covered,
            view_count,
            features,
        };
        for p in 0..n {
            let bad = |message: &str| {
                Err(LiftError::Invariant {
                    point: p,
                    message: message.into(),
                })
            };
            let row = lib.feature(p);
            if lib.covered[p] != (lib.view_count[p] >= 1) {
                return bad("covered flag disagrees with view count");
            }
            if lib.covered[p] {
                let norm = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return bad("covered feature is not unit norm");
                }
            } else if row.iter().any(|&x| x != 0.0) {
                return bad("uncovered feature is not zero");
            }
        }
        Ok(lib)
    }

    pub fn uncovered(n: usize, dim: usize) -> Self {
        Self {
            dim,
            covered: vec![false; n],
            view_count: vec![0; n],
            features: vec![0.0; n * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.covered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covered.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covered(&self) -> &[bool] {
        &self.covered
    }

    pub fn is_covered(&self, p: usize) -> bool {
        self.covered[p]
    }

    pub fn view_count(&self, p: usize) -> u32 {
        self.view_count[p]
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    pub fn feature(&self, p: usize) -> &[f32] {
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(20 + n * (5 + 4 * self.dim));
        out.extend_from_slice(&LIBRARY_MAGIC);
        out.extend_from_slice(&LIBRARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for p in 0..n {
            out.push(u8::from(self.covered[p]));
            out.extend_from_slice(&self.view_count[p].to_le_bytes());
            for f in self.feature(p) {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LiftError> {
        if bytes.len() < 4 || bytes[..4] != LIBRARY_MAGIC {
            return Err(LiftError::BadMagic(
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            ));
        }
        if bytes.len() < 20 {
            return Err(LiftError::SizeMismatch {
                expected: 20,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != LIBRARY_VERSION {
            return Err(LiftError::Version(version));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let record = 5 + 4 * dim;
        let expected = n
            .checked_mul(record)
            .and_then(|b| b.checked_add(20))
            .unwrap_or(usize::MAX);
        if bytes.len() != expected {
            return Err(LiftError::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let mut covered = Vec::with_capacity(n);
        let mut view_count = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        for rec in bytes[20..].chunks_exact(record) {
            covered.push(rec[0] != 0);
            view_count.push(u32::from_le_bytes(rec[1..5].try_into().unwrap()));
            features.extend(
                rec[5..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        Self::new(dim, covered, view_count, features)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LiftError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| LiftError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LiftError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| LiftError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// One view's retained projections together with its mask set.
#[derive(Debug, Clone, Copy)]
pub struct ViewContribution<'a> {
    pub lifts: &'a [Lift],
    pub masks: &'a MaskSet,
}

/// Average, per point, the features of the masks it was retained in, then
/// normalize. Contributions are reduced in ascending view-id order whatever
/// order they are passed in. A point whose features cancel exactly is left
/// uncovered.
pub fn fuse(n_points: usize, views: &[ViewContribution<'_>]) -> Result<FeatureLibrary, LiftError> {
    let Some(first) = views.first() else {
        return Ok(FeatureLibrary::uncovered(n_points, 0));
    };
    let dim = first.masks.dim;
    if let Some(v) = views.iter().find(|v| v.masks.dim != dim) {
        return Err(LiftError::DimMismatch(dim, v.masks.dim));
    }
    let dim = dim as usize;
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].masks.view_id);

    // CSR over points: entries are (view slot, mask id) in view-id order.
    let mut offsets = vec![0usize; n_points + 1];
    for v in views {
        for l in v.lifts {
            offsets[l.point as usize + 1] += 1;
        }
    }
    for p in 0..n_points {
        offsets[p + 1] += offsets[p];
    }
    let mut cursor = offsets.clone();
    let mut entries = vec![(0usize, 0u32); offsets[n_points]];
    for &slot in &order {
        for l in views[slot].lifts {
            let c = &mut cursor[l.point as usize];
            entries[*c] = (slot, l.mask);
            *c += 1;
        }
    }

    let mut features = vec![0.0f32; n_points * dim];
    let mut view_count = vec![0u32; n_points];
    features
        .par_chunks_mut(dim.max(1))
        .zip(view_count.par_iter_mut())
        .enumerate()
        .for_each(|(p, (row, count))| {
            let mine = &entries[offsets[p]..offsets[p + 1]];
            if mine.is_empty() || dim == 0 {
                return;
            }
            let mut sum = vec![0.0f64; dim];
            for &(slot, mask) in mine {
                for (s, &f) in sum.iter_mut().zip(views[slot].masks.feature(mask)) {
                    *s += f64::from(f);
                }
            }
            let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (r, s) in row.iter_mut().zip(&sum) {
                    *r = (s / norm) as f32;
                }
                *count = mine.len() as u32;
            }
        });
    let covered = view_count.iter().map(|&c| c > 0).collect();
    FeatureLibrary::new(dim, covered, view_count, features)
}
