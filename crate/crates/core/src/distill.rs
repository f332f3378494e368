//! The 3D student: a voxel feature field trained to reproduce the fused 2D
//! features under a cosine loss.
//!
//! Parameters live on the lattice of voxel centers and are interpolated
//! trilinearly, then L2-normalized, to give a feature anywhere in the grid.
//! Only lattice points that are corners of some cloud point's cell are
//! allocated; absent corners contribute zero. The teacher features are
//! constants of the loss: no gradient is ever formed for them.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liftfuse::FeatureLibrary;
use crate::rng::{self, tag};
use crate::scene::{bounding_box, PointCloud};

pub const FIELD_MAGIC: [u8; 4] = *b"OU3V";
pub const FIELD_VERSION: u32 = 1;
const INACTIVE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature library covers no points")]
    NothingCovered,
    #[error("library has {library} points but the cloud has {cloud}")]
    LengthMismatch { library: usize, cloud: usize },
    #[error("feature dimension mismatch: field {field}, teacher {teacher}")]
    DimMismatch { field: usize, teacher: usize },
    #[error("training diverged at epoch {epoch}: loss {loss} > 10 x initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad field checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak learning rate; decays along a cosine to `final_lr_ratio * lr`.
    pub lr: f64,
    pub final_lr_ratio: f64,
    /// Points per optimization step.
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Edge length of a voxel in meters.
    pub voxel_size: f64,
    /// Standard deviation of the initial parameters.
    pub init_std: f64,
    /// After training, give lattice points that no covered point reaches
    /// the mean of their trained neighbors, layer by layer.
    pub fill_untrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            final_lr_ratio: 0.1,
            batch_size: 1024,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            voxel_size: 0.2,
            init_std: 1e-2,
            fill_untrained: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad("final_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.voxel_size > 0.0 && self.init_std >= 0.0) {
            return bad("adam_eps and voxel_size must be positive, init_std non-negative");
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let progress = if total <= 1 {
            0.0
        } else {
            step as f64 / (total - 1) as f64
        };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cosine)
    }
}

/// Interpolation stencil of one query point: 8 corner slots and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub slots: [u32; 8],
    pub weights: [f64; 8],
}

/// Sparse trilinear feature field over a voxel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureField {
    voxel_size: f64,
    /// World position of lattice point `(0, 0, 0)`.
    origin: Vector3<f64>,
    dims: [u32; 3],
    dim: usize,
    /// Sorted linear lattice indices of allocated points.
    keys: Vec<u64>,
    /// `keys.len() * dim` parameters, each exactly representable as f32.
    params: Vec<f64>,
}

fn snap(x: f64) -> f64 {
    f64::from(x as f32)
}

impl VoxelFeatureField {
    /// Field covering `cloud`'s bounding box inflated by one voxel, with
    /// every corner of every point's cell allocated and initialized from a
    /// seeded Gaussian.
    pub fn for_cloud(cloud: &PointCloud, voxel_size: f64, dim: usize, init_std: f64, seed: u64) -> Self {
        let bbox = bounding_box(cloud);
        let origin = bbox.origin.map(|c| c - voxel_size);
        let dims = [0, 1, 2].map(|a| ((bbox.extents[a] + 2.0 * voxel_size) / voxel_size).ceil() as u32 + 1);
        let mut field = Self {
            voxel_size,
            origin,
            dims,
            dim,
            keys: Vec::new(),
            params: Vec::new(),
        };
        let mut keys: Vec<u64> = cloud
            .positions()
            .par_iter()
            .flat_map_iter(|p| {
                let (base, _, _) = field.locate(p);
                field.corner_keys(base)
            })
            .collect();
        keys.par_sort_unstable();
        keys.dedup();
        let mut rng = rng::rng_for(seed, &[tag::TRAIN_INIT]);
        let normal = Normal::new(0.0, init_std.max(0.0)).expect("finite std");
        field.params = (0..keys.len() * dim)
            .map(|_| snap(normal.sample(&mut rng)))
            .collect();
        field.keys = keys;
        field
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn active_voxels(&self) -> usize {
        self.keys.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Lattice coordinates of the lattice point `key`.
    pub fn key_coords(&self, key: u64) -> [u32; 3] {
        let (nx, ny) = (u64::from(self.dims[0]), u64::from(self.dims[1]));
        [(key % nx) as u32, ((key / nx) % ny) as u32, (key / (nx * ny)) as u32]
    }

    /// World position of lattice point `key`.
    pub fn key_position(&self, key: u64) -> Vector3<f64> {
        let c = self.key_coords(key);
        self.origin + Vector3::new(f64::from(c[0]), f64::from(c[1]), f64::from(c[2])) * self.voxel_size
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    /// Parameter row of allocated lattice point `slot`.
    pub fn slot_params(&self, slot: usize) -> &[f64] {
        &self.params[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn slot_params_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.params[slot * self.dim..(slot + 1) * self.dim]
    }

    fn linear(&self, c: [u32; 3]) -> u64 {
        let (nx, ny) = (u64::from(self.dims[0]), u64::from(self.dims[1]));
        u64::from(c[0]) + nx * (u64::from(c[1]) + ny * u64::from(c[2]))
    }

    /// Base cell, fractional offsets and whether clamping occurred.
    fn locate(&self, p: &Vector3<f64>) -> ([u32; 3], [f64; 3], bool) {
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        let mut clamped = false;
        for a in 0..3 {
            let hi = f64::from(self.dims[a] - 1);
            let g = (p[a] - self.origin[a]) / self.voxel_size;
            let gc = g.clamp(0.0, hi);
            clamped |= gc != g || !g.is_finite();
            let gc = if gc.is_finite() { gc } else { 0.0 };
            let i = (gc.floor() as u32).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = gc - f64::from(i);
        }
        (base, frac, clamped)
    }

    fn corner_keys(&self, base: [u32; 3]) -> impl Iterator<Item = u64> + '_ {
        (0..8u32).map(move |c| {
            self.linear([base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)])
        })
    }

    fn slot_of(&self, key: u64) -> u32 {
        self.keys
            .binary_search(&key)
            .map_or(INACTIVE, |s| s as u32)
    }

    /// Interpolation stencil; the flag reports clamping to the grid.
    pub fn stencil(&self, p: &Vector3<f64>) -> (Stencil, bool) {
        let (base, f, clamped) = self.locate(p);
        let mut slots = [INACTIVE; 8];
        let mut weights = [0.0; 8];
        for (c, key) in self.corner_keys(base).enumerate() {
            let bit = |b: usize| (c >> b) & 1 == 1;
            let w = |a: usize| if bit(a) { f[a] } else { 1.0 - f[a] };
            slots[c] = self.slot_of(key);
            weights[c] = w(0) * w(1) * w(2);
        }
        (Stencil { slots, weights }, clamped)
    }

    /// Unnormalized interpolated feature.
    pub fn interpolate(&self, s: &Stencil, out: &mut [f64]) {
        out.fill(0.0);
        for (&slot, &w) in s.slots.iter().zip(&s.weights) {
            if slot == INACTIVE || w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.slot_params(slot as usize)) {
                *o += w * p;
            }
        }
    }

    /// Normalized features at `points`, row-major. Queries outside the grid
    /// are clamped onto it and counted in the warning log. Zero
    /// interpolants stay zero.
    pub fn field_features(&self, points: &[Vector3<f64>]) -> Vec<f32> {
        let dim = self.dim;
        let mut out = vec![0.0f32; points.len() * dim];
        let clamped: usize = out
            .par_chunks_mut(dim.max(1))
            .zip(points.par_iter())
            .map(|(row, p)| {
                let (s, clamped) = self.stencil(p);
                let mut raw = vec![0.0; dim];
                self.interpolate(&s, &mut raw);
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (r, x) in row.iter_mut().zip(&raw) {
                        *r = (x / n) as f32;
                    }
                }
                usize::from(clamped)
            })
            .sum();
        if clamped > 0 {
            log::warn!("{clamped} feature queries fell outside the voxel grid and were clamped");
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.keys.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        for c in self.origin.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for k in &self.keys {
            out.extend_from_slice(&k.to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DistillError> {
        const HEADER: usize = 4 + 4 + 8 + 24 + 12 + 4 + 8;
        let bad = |m: String| DistillError::Format(m);
        if bytes.len() < 4 || bytes[..4] != FIELD_MAGIC {
            return Err(bad(format!(
                "expected magic \"OU3V\", found {:?}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
            )));
        }
        if bytes.len() < HEADER {
            return Err(bad("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FIELD_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let voxel_size = f64_at(8);
        let origin = Vector3::new(f64_at(16), f64_at(24), f64_at(32));
        let dims = [u32_at(40), u32_at(44), u32_at(48)];
        let dim = u32_at(52) as usize;
        let n = u64::from_le_bytes(bytes[56..64].try_into().unwrap()) as usize;
        let expected = HEADER + n * 8 + n * dim * 4;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        if !(voxel_size > 0.0) || dims.iter().any(|&d| d < 2) {
            return Err(bad("degenerate grid".into()));
        }
        let keys: Vec<u64> = bytes[HEADER..HEADER + n * 8]
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("voxel keys are not strictly increasing".into()));
        }
        let params: Vec<f64> = bytes[HEADER + n * 8..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(Self {
            voxel_size,
            origin,
            dims,
            dim,
            keys,
            params,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DistillError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| DistillError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DistillError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DistillError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

impl VoxelFeatureField {
    /// Slots of the allocated lattice points among the 26 neighbors of `slot`.
    fn neighbor_slots(&self, slot: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.key_coords(self.keys[slot]);
        (0..27).filter(|&o| o != 13).filter_map(move |o| {
            let d = [o % 3, (o / 3) % 3, o / 9];
            let mut n = [0u32; 3];
            for a in 0..3 {
                let v = i64::from(c[a]) + d[a] as i64 - 1;
                if v < 0 || v >= i64::from(self.dims[a]) {
                    return None;
                }
                n[a] = v as u32;
            }
            let s = self.slot_of(self.linear(n));
            (s != INACTIVE).then_some(s as usize)
        })
    }

    /// Replace every slot not flagged in `known` by the mean of its known
    /// neighbors, growing outward one neighbor ring per pass until nothing
    /// changes. Slots with no known slot in their connected component keep
    /// their values. Returns the number of slots filled.
    pub fn fill_from_neighbors(&mut self, mut known: Vec<bool>) -> usize {
        let dim = self.dim;
        let mut filled = 0;
        loop {
            let updates: Vec<(usize, Vec<f64>)> = (0..self.keys.len())
                .into_par_iter()
                .filter(|&s| !known[s])
                .filter_map(|s| {
                    let mut acc = vec![0.0; dim];
                    let mut n = 0usize;
                    for nb in self.neighbor_slots(s).filter(|&nb| known[nb]) {
                        for (a, &p) in acc.iter_mut().zip(self.slot_params(nb)) {
                            *a += p;
                        }
                        n += 1;
                    }
                    (n > 0).then(|| (s, acc.into_iter().map(|a| a / n as f64).collect()))
                })
                .collect();
            if updates.is_empty() {
                return filled;
            }
            filled += updates.len();
            for (s, v) in updates {
                self.slot_params_mut(s).copy_from_slice(&v);
                known[s] = true;
            }
        }
    }
}

/// Mean cosine distance between unnormalized student rows and teacher rows,
/// with its gradient with respect to the student rows.
///
/// `loss = mean_i (1 - cos(s_i, t_i))`. The teacher only enters as a
/// constant.
pub fn distill_loss(student: &[f64], teacher: &[f32], dim: usize) -> Result<(f64, Vec<f64>), DistillError> {
    if dim == 0 || student.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    if student.len() != teacher.len() || student.len() % dim != 0 {
        return Err(DistillError::DimMismatch {
            field: student.len(),
            teacher: teacher.len(),
        });
    }
    let b = student.len() / dim;
    let mut grad = vec![0.0; student.len()];
    let mut total = 0.0;
    for ((s, t), g) in student
        .chunks_exact(dim)
        .zip(teacher.chunks_exact(dim))
        .zip(grad.chunks_exact_mut(dim))
    {
        total += row_loss_grad(s, t, g, 1.0 / b as f64);
    }
    Ok((total / b as f64, grad))
}

/// `1 - cos(s, t)` for one row; writes `scale * d/ds` into `g`.
fn row_loss_grad(s: &[f64], t: &[f32], g: &mut [f64], scale: f64) -> f64 {
    let tn = t.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let sn = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sn == 0.0 || tn == 0.0 {
        g.fill(0.0);
        return 1.0;
    }
    let dot: f64 = s.iter().zip(t).map(|(a, &b)| a * f64::from(b)).sum::<f64>() / tn;
    let mut cos = (dot / sn).clamp(-1.0, 1.0);
    if 1.0 - cos.abs() <= 4.0 * f64::EPSILON {
        cos = cos.signum();
    }
    for ((gi, &si), &ti) in g.iter_mut().zip(s).zip(t) {
        // d(1 - cos)/ds = -(t_hat / |s| - cos * s / |s|^2)
        *gi = -scale * (f64::from(ti) / tn / sn - cos * si / (sn * sn));
    }
    1.0 - cos
}

impl VoxelFeatureField {
    /// Loss over `stencils` against `teacher` rows and its gradient with
    /// respect to every parameter (dense, `params().len()` long).
    pub fn loss_and_param_grad(&self, stencils: &[Stencil], teacher: &[f32]) -> Result<(f64, Vec<f64>), DistillError> {
        let dim = self.dim;
        let mut raw = vec![0.0; stencils.len() * dim];
        for (s, r) in stencils.iter().zip(raw.chunks_exact_mut(dim)) {
            self.interpolate(s, r);
        }
        let (loss, g) = distill_loss(&raw, teacher, dim)?;
        let mut grad = vec![0.0; self.params.len()];
        for (s, gr) in stencils.iter().zip(g.chunks_exact(dim)) {
            scatter(&mut grad, dim, s, gr);
        }
        Ok((loss, grad))
    }
}

fn scatter(grad: &mut [f64], dim: usize, s: &Stencil, g: &[f64]) {
    for (&slot, &w) in s.slots.iter().zip(&s.weights) {
        if slot == INACTIVE || w == 0.0 {
            continue;
        }
        let row = &mut grad[slot as usize * dim..(slot as usize + 1) * dim];
        for (r, &x) in row.iter_mut().zip(g) {
            *r += w * x;
        }
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub field: VoxelFeatureField,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Loss over all covered points before the first step.
    pub initial_loss: f64,
}

/// Fit `field` to the covered features of `library` with mini-batch Adam.
///
/// Batches are drawn from a seeded shuffle of the covered points each
/// epoch. Only lattice points touched by a batch are updated in that step
/// (the usual sparse-Adam rule, with bias correction from the global step).
/// Per-point gradients run in parallel and are accumulated in batch order,
/// so results are reproducible. Parameters are rounded to f32 at the end so
/// a checkpoint round trip is lossless.
pub fn train(
    mut field: VoxelFeatureField,
    cloud: &PointCloud,
    library: &FeatureLibrary,
    cfg: &TrainConfig,
) -> Result<Trained, DistillError> {
    cfg.validate()?;
    if library.len() != cloud.len() {
        return Err(DistillError::LengthMismatch {
            library: library.len(),
            cloud: cloud.len(),
        });
    }
    if library.dim() != field.dim {
        return Err(DistillError::DimMismatch {
            field: field.dim,
            teacher: library.dim(),
        });
    }
    let covered: Vec<usize> = (0..cloud.len()).filter(|&p| library.is_covered(p)).collect();
    if covered.is_empty() {
        return Err(DistillError::NothingCovered);
    }
    let dim = field.dim;
    let stencils: Vec<Stencil> = covered
        .par_iter()
        .map(|&p| field.stencil(&cloud.positions()[p]).0)
        .collect();

    let batch_loss = |field: &VoxelFeatureField, idx: &[usize], grads: Option<&mut [f64]>| -> f64 {
        let scale = 1.0 / idx.len() as f64;
        let per_point = |(&i, g): (&usize, &mut [f64])| {
            let mut raw = vec![0.0; dim];
            field.interpolate(&stencils[i], &mut raw);
            row_loss_grad(&raw, library.feature(covered[i]), g, scale)
        };
        match grads {
            Some(g) => idx.par_iter().zip(g.par_chunks_mut(dim)).map(per_point).sum::<f64>() * scale,
            None => {
                let mut scratch = vec![0.0; idx.len() * dim];
                idx.par_iter()
                    .zip(scratch.par_chunks_mut(dim))
                    .map(per_point)
                    .sum::<f64>()
                    * scale
            }
        }
    };

    let all: Vec<usize> = (0..covered.len()).collect();
    let initial_loss = batch_loss(&field, &all, None);

    let steps_per_epoch = covered.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut m = vec![0.0; field.params.len()];
    let mut v = vec![0.0; field.params.len()];
    let mut grad = vec![0.0; field.params.len()];
    let mut touched_flag = vec![false; field.keys.len()];
    let mut touched = Vec::new();
    let mut point_grads = vec![0.0; cfg.batch_size * dim];
    let mut order = all.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = rng::rng_for(cfg.seed, &[tag::TRAIN_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let pg = &mut point_grads[..batch.len() * dim];
            let loss = batch_loss(&field, batch, Some(&mut *pg));
            epoch_loss += loss * batch.len() as f64;

            for (&i, g) in batch.iter().zip(pg.chunks_exact(dim)) {
                let s = &stencils[i];
                scatter(&mut grad, dim, s, g);
                for (&slot, &w) in s.slots.iter().zip(&s.weights) {
                    if slot != INACTIVE && w != 0.0 && !touched_flag[slot as usize] {
                        touched_flag[slot as usize] = true;
                        touched.push(slot as usize);
                    }
                }
            }

            step += 1;
            let lr = cfg.lr_at(step - 1, total_steps);
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for &slot in &touched {
                let range = slot * dim..(slot + 1) * dim;
                for j in range {
                    let g = grad[j];
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                    field.params[j] -= update;
                    grad[j] = 0.0;
                }
                touched_flag[slot] = false;
            }
            touched.clear();
        }
        let epoch_loss = epoch_loss / covered.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        if !epoch_loss.is_finite() || epoch_loss > 10.0 * initial_loss {
            return Err(DistillError::Diverged {
                epoch,
                loss: epoch_loss,
                initial: initial_loss,
            });
        }
        curve.push(epoch_loss);
    }

    if cfg.fill_untrained {
        let mut trained = vec![false; field.keys.len()];
        for s in &stencils {
            for (&slot, &w) in s.slots.iter().zip(&s.weights) {
                if slot != INACTIVE && w != 0.0 {
                    trained[slot as usize] = true;
                }
            }
        }
        field.fill_from_neighbors(trained);
    }
    for p in field.params.iter_mut() {
        *p = snap(*p);
    }
    Ok(Trained {
        field,
        loss_curve: curve,
        initial_loss,
    })
}

/// Write `epoch,loss` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<(), DistillError> {
    let path = path.as_ref();
    let io = |source| DistillError::Io {
        path: path.to_owned(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "epoch,loss").map_err(io)?;
    for (e, l) in curve.iter().enumerate() {
        writeln!(f, "{e},{l}").map_err(io)?;
    }
    f.flush().map_err(io)
}
