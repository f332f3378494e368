//! Mask-level vision-language features: the provider contract, a
//! deterministic oracle provider, synthetic text embeddings and the binary
//! interchange formats shared with external feature extractors.
//!
//! `view_<id>.ou3d` layout (all little-endian):
//!
//! ```text
//! "OU3D" | u32 version = 1 | u32 h | u32 w | u32 K | u32 C
//! h*w x u32 mask id (0 = no mask)
//! K*C x f32 features, row-major
//! ```
//!
//! Text tables (`.ou3t`): `"OU3T" | u32 version | u32 C | u32 n`, then per
//! class `u16 name_len | utf-8 name | C x f32`.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{RenderedView, NO_POINT};
use crate::rng::{self, tag};
use crate::scene::PointCloud;

pub const MASK_MAGIC: [u8; 4] = *b"OU3D";
pub const TEXT_MAGIC: [u8; 4] = *b"OU3T";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a stored feature's L2 norm from 1.
pub const NORM_TOLERANCE: f32 = 1e-4;
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("mask set invariant violated: {0}")]
    Invariant(String),
    #[error("point cloud has no ground-truth labels")]
    Unlabeled,
    #[error("class `{0}` has no text embedding")]
    UnknownClass(String),
    #[error("orthogonal table needs dim >= classes ({classes} > {dim})")]
    TooManyClasses { classes: usize, dim: usize },
    #[error("could not draw {0} well-separated random embeddings")]
    RejectionExhausted(usize),
    #[error("cannot derive a view id from {0}")]
    ViewId(PathBuf),
}

fn unit_norm_ok(row: &[f32]) -> bool {
    let n = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    (n - 1.0).abs() <= f64::from(NORM_TOLERANCE)
}

/// Normalize in f64 and round back to f32.
pub fn normalized(row: &[f64]) -> Vec<f32> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    row.iter().map(|&x| (x / n) as f32).collect()
}

/// Masks and mask features for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub view_id: u32,
    pub height: u32,
    pub width: u32,
    /// Row-major `h * w`; 0 is background, `k` is mask `k` (1-based).
    pub mask_map: Vec<u32>,
    pub num_masks: u32,
    pub dim: u32,
    /// Row-major `num_masks * dim`, each row unit norm.
    pub features: Vec<f32>,
}

impl MaskSet {
    pub fn new(
        view_id: u32,
        height: u32,
        width: u32,
        mask_map: Vec<u32>,
        num_masks: u32,
        dim: u32,
        features: Vec<f32>,
    ) -> Result<Self, VlmError> {
        let set = Self {
            view_id,
            height,
            width,
            mask_map,
            num_masks,
            dim,
            features,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        let bad = |m: String| Err(VlmError::Invariant(m));
        if self.mask_map.len() != self.height as usize * self.width as usize {
            return bad(format!(
                "mask map has {} entries for {}x{}",
                self.mask_map.len(),
                self.height,
                self.width
            ));
        }
        if self.features.len() != self.num_masks as usize * self.dim as usize {
            return bad(format!(
                "{} feature values for {} masks of dim {}",
                self.features.len(),
                self.num_masks,
                self.dim
            ));
        }
        if let Some(&id) = self.mask_map.iter().find(|&&m| m > self.num_masks) {
            return bad(format!("mask id {id} exceeds mask count {}", self.num_masks));
        }
        if self.dim > 0 {
            for (k, row) in self.features.chunks_exact(self.dim as usize).enumerate() {
                if !unit_norm_ok(row) {
                    return bad(format!("feature {} is not unit norm", k + 1));
                }
            }
        }
        Ok(())
    }

    /// Feature of mask `k` (1-based).
    pub fn feature(&self, k: u32) -> &[f32] {
        let c = self.dim as usize;
        let start = (k as usize - 1) * c;
        &self.features[start..start + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * (self.mask_map.len() + self.features.len()));
        out.extend_from_slice(&MASK_MAGIC);
        for v in [FORMAT_VERSION, self.height, self.width, self.num_masks, self.dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.mask_map {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], view_id: u32) -> Result<Self, VlmError> {
        let header = read_header(bytes, MASK_MAGIC, 24)?;
        let [h, w, k, c] = [header[0], header[1], header[2], header[3]];
        let pixels = h as usize * w as usize;
        let expected = 24 + 4 * pixels + 4 * k as usize * c as usize;
        if bytes.len() != expected {
            return Err(VlmError::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let words = |from: usize, n: usize| {
            bytes[from..from + 4 * n]
                .chunks_exact(4)
                .map(|b| <[u8; 4]>::try_from(b).unwrap())
        };
        let mask_map = words(24, pixels).map(u32::from_le_bytes).collect();
        let features = words(24 + 4 * pixels, k as usize * c as usize)
            .map(f32::from_le_bytes)
            .collect();
        Self::new(view_id, h, w, mask_map, k, c, features)
    }
}

/// Check magic and version, return the u32 header words after them.
fn read_header(bytes: &[u8], magic: [u8; 4], len: usize) -> Result<Vec<u32>, VlmError> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(VlmError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < len {
        return Err(VlmError::SizeMismatch {
            expected: len,
            found: bytes.len(),
        });
    }
    let words: Vec<u32> = bytes[4..len]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if words[0] != FORMAT_VERSION {
        return Err(VlmError::Version { found: words[0] });
    }
    Ok(words[1..].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, VlmError> {
    std::fs::read(path).map_err(|source| VlmError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), VlmError> {
    std::fs::write(path, bytes).map_err(|source| VlmError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn maskset_path(dir: &Path, view_id: u32) -> PathBuf {
    dir.join(format!("view_{view_id}.ou3d"))
}

pub fn write_maskset(path: impl AsRef<Path>, set: &MaskSet) -> Result<(), VlmError> {
    write_file(path.as_ref(), &set.to_bytes())
}

/// Read `view_<id>.ou3d`; the view id comes from the file name.
pub fn read_maskset(path: impl AsRef<Path>) -> Result<MaskSet, VlmError> {
    let path = path.as_ref();
    let view_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("view_"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VlmError::ViewId(path.to_owned()))?;
    MaskSet::from_bytes(&read_file(path)?, view_id)
}

/// Class names mapped to unit text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    names: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    #[default]
    Orthogonal,
    SeededRandom,
}

impl TextEmbeddingTable {
    pub fn new(names: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self, VlmError> {
        if names.is_empty() || dim == 0 {
            return Err(VlmError::Invariant("text table is empty".into()));
        }
        if vectors.len() != names.len() * dim {
            return Err(VlmError::Invariant(format!(
                "{} values for {} classes of dim {dim}",
                vectors.len(),
                names.len()
            )));
        }
        for (name, row) in names.iter().zip(vectors.chunks_exact(dim)) {
            if !unit_norm_ok(row) {
                return Err(VlmError::Invariant(format!("embedding of `{name}` is not unit norm")));
            }
        }
        Ok(Self { names, dim, vectors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn embedding(&self, class: usize) -> &[f32] {
        &self.vectors[class * self.dim..(class + 1) * self.dim]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&TEXT_MAGIC);
        for v in [FORMAT_VERSION, self.dim as u32, self.names.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (i, name) in self.names.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for f in self.embedding(i) {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VlmError> {
        let header = read_header(bytes, TEXT_MAGIC, 16)?;
        let (dim, n) = (header[0] as usize, header[1] as usize);
        let mut at = 16;
        let short = |at: usize, need: usize| VlmError::SizeMismatch {
            expected: at + need,
            found: bytes.len(),
        };
        let mut names = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let len_bytes = bytes.get(at..at + 2).ok_or_else(|| short(at, 2))?;
            let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            at += 2;
            let name = bytes.get(at..at + len).ok_or_else(|| short(at, len))?;
            names.push(
                String::from_utf8(name.to_vec())
                    .map_err(|_| VlmError::Invariant("class name is not utf-8".into()))?,
            );
            at += len;
            let row = bytes.get(at..at + 4 * dim).ok_or_else(|| short(at, 4 * dim))?;
            vectors.extend(
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
            at += 4 * dim;
        }
        if at != bytes.len() {
            return Err(VlmError::SizeMismatch {
                expected: at,
                found: bytes.len(),
            });
        }
        Self::new(names, dim, vectors)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), VlmError> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, VlmError> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Desk-scale stand-in for a text encoder.
///
/// `Orthogonal` gives class `i` the basis vector `e_i`. `SeededRandom` draws
/// Gaussian directions and rejects any with `|cos| >= 0.5` to an earlier one.
pub fn synthetic_text_table(
    names: &[String],
    dim: usize,
    mode: TableMode,
    seed: u64,
) -> Result<TextEmbeddingTable, VlmError> {
    let n = names.len();
    let vectors = match mode {
        TableMode::Orthogonal => {
            if n > dim {
                return Err(VlmError::TooManyClasses { classes: n, dim });
            }
            let mut v = vec![0.0f32; n * dim];
            for i in 0..n {
                v[i * dim + i] = 1.0;
            }
            v
        }
        TableMode::SeededRandom => {
            let mut rng = rng::rng_for(seed, &[tag::TEXT]);
            let mut accepted: Vec<Vec<f32>> = Vec::with_capacity(n);
            let mut attempts = 0;
            while accepted.len() < n {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(VlmError::RejectionExhausted(n));
                }
                let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let cand = normalized(&raw);
                let separated = accepted.iter().all(|a| cosine(a, &cand).abs() < 0.5);
                if separated {
                    accepted.push(cand);
                }
            }
            accepted.concat()
        }
    };
    TextEmbeddingTable::new(names.to_vec(), dim, vectors)
}

/// Cosine similarity computed in f64; 0 when either side is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Settings of the oracle provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    /// Expected norm of the Gaussian perturbation added to each mask's class
    /// embedding before renormalization (per-component deviation `noise / sqrt(dim)`).
    pub noise: f64,
    /// Connected components smaller than this many pixels are not emitted.
    pub min_mask_px: u32,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            noise: 0.0,
            min_mask_px: 1,
        }
    }
}

/// Ground-truth mask provider: every 4-connected region of pixels whose
/// winning points share a label becomes one mask carrying that label's
/// (optionally perturbed) text embedding.
pub fn oracle_masks(
    view: &RenderedView,
    cloud: &PointCloud,
    table: &TextEmbeddingTable,
    params: &OracleParams,
    seed: u64,
) -> Result<MaskSet, VlmError> {
    let labels = cloud.labels().ok_or(VlmError::Unlabeled)?;
    let class_rows: Vec<usize> = cloud
        .class_names()
        .iter()
        .map(|n| table.index_of(n).ok_or_else(|| VlmError::UnknownClass(n.clone())))
        .collect::<Result<_, _>>()?;

    let (w, h) = (view.width as usize, view.height as usize);
    let pixel_label = |o: usize| {
        let i = view.point_index[o];
        (i != NO_POINT).then(|| labels[i as usize])
    };

    let mut mask_map = vec![0u32; w * h];
    let mut visited = vec![false; w * h];
    let mut mask_labels = Vec::new();
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let Some(label) = pixel_label(start) else {
            continue;
        };
        component.clear();
        queue.push_back(start);
        while let Some(o) = queue.pop_front() {
            component.push(o);
            let (x, y) = (o % w, o / w);
            let mut visit = |n: usize| {
                if !visited[n] && pixel_label(n) == Some(label) {
                    visited[n] = true;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                visit(o - 1);
            }
            if x + 1 < w {
                visit(o + 1);
            }
            if y > 0 {
                visit(o - w);
            }
            if y + 1 < h {
                visit(o + w);
            }
        }
        if component.len() >= params.min_mask_px as usize {
            mask_labels.push(label);
            let id = mask_labels.len() as u32;
            for &o in &component {
                mask_map[o] = id;
            }
        }
    }

    let dim = table.dim();
    let mut features = Vec::with_capacity(mask_labels.len() * dim);
    for (k, &label) in mask_labels.iter().enumerate() {
        let t = table.embedding(class_rows[label as usize]);
        if params.noise == 0.0 {
            features.extend_from_slice(t);
        } else {
            let mut rng = rng::rng_for(seed, &[tag::ORACLE, u64::from(view.rig_id), k as u64 + 1]);
            let sigma = params.noise / (dim as f64).sqrt();
            let raw: Vec<f64> = t
                .iter()
                .map(|&x| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    f64::from(x) + sigma * g
                })
                .collect();
            features.extend(normalized(&raw));
        }
    }
    MaskSet::new(
        view.rig_id,
        view.height,
        view.width,
        mask_map,
        mask_labels.len() as u32,
        dim as u32,
        features,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn orthogonal_tables() {
        let t = synthetic_text_table(&names(3), 8, TableMode::Orthogonal, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let c = cosine(t.embedding(i), t.embedding(j));
                assert_eq!(c, if i == j { 1.0 } else { 0.0 });
            }
        }
        let one = synthetic_text_table(&names(1), 4, TableMode::Orthogonal, 0).unwrap();
        assert_eq!(one.embedding(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            synthetic_text_table(&names(5), 4, TableMode::Orthogonal, 0),
            Err(VlmError::TooManyClasses { .. })
        ));
    }

    #[test]
    fn random_tables_are_separated_and_seeded() {
        let t = synthetic_text_table(&names(5), 64, TableMode::SeededRandom, 3).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(cosine(t.embedding(i), t.embedding(j)).abs() < 0.5);
            }
        }
        assert_eq!(t, synthetic_text_table(&names(5), 64, TableMode::SeededRandom, 3).unwrap());
    }

    #[test]
    fn wrong_magic_names_both() {
        let mut bytes = MaskSet::new(0, 1, 1, vec![0], 0, 4, vec![]).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"PNG!");
        let err = MaskSet::from_bytes(&bytes, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("OU3D") && msg.contains("PNG!"), "{msg}");
    }

    #[test]
    fn extra_feature_row_is_size_error() {
        let set = MaskSet::new(0, 1, 2, vec![1, 2], 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut bytes = set.to_bytes();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(
            MaskSet::from_bytes(&bytes, 0),
            Err(VlmError::SizeMismatch { .. })
        ));
        let mut v2 = set.to_bytes();
        v2[4] = 2;
        assert!(matches!(MaskSet::from_bytes(&v2, 0), Err(VlmError::Version { found: 2 })));
    }

    #[test]
    fn invariants_enforced() {
        assert!(MaskSet::new(0, 1, 2, vec![0, 3], 2, 1, vec![1.0, 1.0]).is_err());
        assert!(MaskSet::new(0, 1, 1, vec![1], 1, 2, vec![0.5, 0.5]).is_err());
        assert!(TextEmbeddingTable::new(vec!["a".into()], 2, vec![2.0, 0.0]).is_err());
    }

    #[test]
    fn read_maskset_takes_id_from_name() {
        let dir = tempfile::tempdir().unwrap();
        let set = MaskSet::new(17, 2, 2, vec![0, 1, 1, 0], 1, 2, vec![0.6, 0.8]).unwrap();
        let path = maskset_path(dir.path(), 17);
        write_maskset(&path, &set).unwrap();
        assert_eq!(read_maskset(&path).unwrap(), set);
        let odd = dir.path().join("features.ou3d");
        std::fs::copy(&path, &odd).unwrap();
        assert!(matches!(read_maskset(&odd), Err(VlmError::ViewId(_))));
    }

    fn arb_maskset() -> impl Strategy<Value = MaskSet> {
        (1u32..6, 1u32..6, 0u32..4, 1u32..5).prop_flat_map(|(h, w, k, c)| {
            (
                prop::collection::vec(0..=k, (h * w) as usize),
                prop::collection::vec(-1.0f64..1.0, (k * c) as usize),
            )
                .prop_map(move |(map, raw)| {
                    let feats: Vec<f32> = raw
                        .chunks(c as usize)
                        .flat_map(|r| {
                            let mut r = r.to_vec();
                            r[0] += 2.0;
                            normalized(&r)
                        })
                        .collect();
                    MaskSet::new(0, h, w, map, k, c, feats).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn maskset_bytes_round_trip(set in arb_maskset()) {
            let bytes = set.to_bytes();
            let back = MaskSet::from_bytes(&bytes, 0).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, set);
        }

        #[test]
        fn text_table_round_trip(n in 1usize..6, seed in any::<u64>()) {
            let mut ns = names(n);
            ns[0] = "vehicle — ünïcode".into();
            let t = synthetic_text_table(&ns, 16, TableMode::SeededRandom, seed).unwrap();
            let back = TextEmbeddingTable::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
