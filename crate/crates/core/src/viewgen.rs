//! Virtual camera placement: global orbits above the whole scene and local
//! orbits above a `K x K` grid of anchors.
//!
//! Conventions: world z is up. Extrinsics map world to camera coordinates;
//! the camera looks along its +z axis with image x to the right and image y
//! down. All heights are measured from the bounding box floor `z0`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tag};
use crate::scene::BoundingBox;

/// Widest field of view accepted for a virtual camera, in degrees.
pub const MAX_FOV_DEG: f64 = 179.0;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("invalid view parameters: {0}")]
    InvalidParams(String),
    #[error("lookat eye and target coincide at {0:?}")]
    DegenerateLookat([f64; 3]),
    #[error("field of view {fov_deg:.2} deg is not below {MAX_FOV_DEG} deg")]
    DegenerateFov { fov_deg: f64 },
    #[error("rig {id}: {message}")]
    InvalidRig { id: u32, message: String },
    #[error("rig bundle i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("rig bundle json: {0}")]
    Json(#[from] serde_json::Error),
}

/// View sampling hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewParams {
    /// Local grid granularity `K`.
    #[serde(rename = "K")]
    pub k: u32,
    /// Angular interval `A` in degrees; must divide 360.
    #[serde(rename = "A")]
    pub a_deg: u32,
    /// Radius divisor `R` for local orbits.
    #[serde(rename = "R")]
    pub r: f64,
    pub seed: u64,
    pub height: u32,
    pub width: u32,
}

impl Default for ViewParams {
    fn default() -> Self {
        Self {
            k: 4,
            a_deg: 90,
            r: 0.5,
            seed: 0,
            height: 512,
            width: 512,
        }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<(), ViewError> {
        let bad = |m: String| Err(ViewError::InvalidParams(m));
        if self.a_deg == 0 || 360 % self.a_deg != 0 {
            return bad(format!("A={} does not divide 360", self.a_deg));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad(format!("R must be positive, got {}", self.r));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("image {}x{} is smaller than 16x16", self.height, self.width));
        }
        Ok(())
    }

    /// Views per orbit, `360 / A`.
    pub fn views_per_orbit(&self) -> u32 {
        360 / self.a_deg
    }

    pub fn total_rigs(&self) -> usize {
        (self.views_per_orbit() * (1 + self.k * self.k)) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigKind {
    Global,
    /// Local orbit around anchor `(i, j)`, both in `1..=K`.
    Local { i: u32, j: u32 },
}

/// One virtual camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub id: u32,
    pub kind: RigKind,
    pub theta_deg: f64,
    pub eye: Vector3<f64>,
    pub target: Vector3<f64>,
    /// World-to-camera rigid transform.
    pub extrinsic: Matrix4<f64>,
    pub intrinsic: Matrix3<f64>,
    pub height: u32,
    pub width: u32,
}

impl CameraRig {
    /// World point to camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.extrinsic * p.push(1.0);
        Vector3::new(h.x, h.y, h.z)
    }

    /// Camera coordinates back to world.
    pub fn to_world(&self, c: &Vector3<f64>) -> Vector3<f64> {
        let r = self.extrinsic.fixed_view::<3, 3>(0, 0);
        let t = self.extrinsic.fixed_view::<3, 1>(0, 3);
        r.transpose() * (c - t)
    }
}

/// Build a world-to-camera transform looking from `eye` toward `target`.
///
/// If the view direction is (anti)parallel to `up`, the first of +z, +y, +x
/// that is not is used instead.
pub fn lookat(
    eye: &Vector3<f64>,
    target: &Vector3<f64>,
    up: &Vector3<f64>,
) -> Result<Matrix4<f64>, ViewError> {
    let dir = target - eye;
    let dist = dir.norm();
    if !(dist > 0.0) {
        return Err(ViewError::DegenerateLookat([eye.x, eye.y, eye.z]));
    }
    let forward = dir / dist;
    let parallel = |u: &Vector3<f64>| forward.dot(&u.normalize()).abs() > 1.0 - 1e-6;
    let up = if parallel(up) {
        [Vector3::z(), Vector3::y(), Vector3::x()]
            .into_iter()
            .find(|u| !parallel(u))
            .expect("three axes cannot all be parallel to one direction")
    } else {
        up.normalize()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(rot * eye);
    let mut e = Matrix4::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(e)
}

/// Pinhole intrinsics for a square-pixel camera with the given field of view
/// spanning the shorter image side.
pub fn intrinsics_from_fov(fov_rad: f64, height: u32, width: u32) -> Result<Matrix3<f64>, ViewError> {
    let fov_deg = fov_rad.to_degrees();
    if !(fov_deg > 0.0 && fov_deg < MAX_FOV_DEG) {
        return Err(ViewError::DegenerateFov { fov_deg });
    }
    let half_min = f64::from(height.min(width)) / 2.0;
    let f = half_min / (fov_rad / 2.0).tan();
    Ok(Matrix3::new(
        f,
        0.0,
        f64::from(width) / 2.0,
        0.0,
        f,
        f64::from(height) / 2.0,
        0.0,
        0.0,
        1.0,
    ))
}

/// Field of view (radians) of the virtual nadir camera for a rig family.
///
/// Global: the camera sits at the global anchor and must see the whole
/// `W x L` footprint. Local: it sits at a local anchor and must see one
/// `W/K x L/K` grid cell.
pub fn fov_for(kind: RigKind, bbox: &BoundingBox, params: &ViewParams) -> f64 {
    let (w, l, h) = (bbox.width(), bbox.length(), bbox.height());
    let s = bbox.footprint_scale();
    match kind {
        RigKind::Global => 2.0 * ((w.hypot(l) / 2.0) / (h + s)).atan(),
        RigKind::Local { .. } => {
            let k = f64::from(params.k);
            let d_local = h + s / (2.0 * k);
            2.0 * (((w / k).hypot(l / k) / 2.0) / d_local).atan()
        }
    }
}

pub fn intrinsics_for(
    kind: RigKind,
    bbox: &BoundingBox,
    params: &ViewParams,
) -> Result<Matrix3<f64>, ViewError> {
    intrinsics_from_fov(fov_for(kind, bbox, params), params.height, params.width)
}

/// Global anchor above the box center.
pub fn global_anchor(bbox: &BoundingBox) -> Vector3<f64> {
    let c = bbox.center();
    Vector3::new(c.x, c.y, bbox.origin.z + bbox.height() + bbox.footprint_scale())
}

pub fn global_radius(bbox: &BoundingBox) -> f64 {
    bbox.footprint_scale() / 4.0
}

pub fn global_target(bbox: &BoundingBox) -> Vector3<f64> {
    let c = bbox.center();
    Vector3::new(
        c.x,
        c.y,
        bbox.origin.z + (bbox.height() + bbox.footprint_scale()) / 2.0,
    )
}

/// Local anchor `(i, j)`, `1 <= i, j <= K`.
pub fn local_anchor(bbox: &BoundingBox, k: u32, i: u32, j: u32) -> Vector3<f64> {
    let kk = f64::from(k);
    Vector3::new(
        bbox.origin.x + f64::from(i) * bbox.width() / (kk + 1.0),
        bbox.origin.y + f64::from(j) * bbox.length() / (kk + 1.0),
        bbox.origin.z + bbox.height() + bbox.footprint_scale() / (2.0 * kk),
    )
}

/// Local target: mid-height of the scene straight below the anchor.
pub fn local_target(bbox: &BoundingBox, anchor: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(anchor.x, anchor.y, bbox.origin.z + bbox.height() / 2.0)
}

pub fn local_radius(bbox: &BoundingBox, params: &ViewParams) -> f64 {
    bbox.footprint_scale() / (params.r * f64::from(params.k))
}

/// Random initial orbit angle in `[0, A)` degrees for one rig family.
/// Family 0 is the global orbit; local anchor `(i, j)` is family
/// `1 + (i - 1) * K + (j - 1)`.
pub fn initial_angle(params: &ViewParams, family: u64) -> f64 {
    let mut rng = rng::rng_for(params.seed, &[tag::VIEWS, family]);
    rng.random::<f64>() * f64::from(params.a_deg)
}

#[allow(clippy::too_many_arguments)]
fn orbit(
    first_id: u32,
    kind: RigKind,
    center: &Vector3<f64>,
    radius: f64,
    target: &Vector3<f64>,
    theta0: f64,
    intrinsic: &Matrix3<f64>,
    params: &ViewParams,
) -> Result<Vec<CameraRig>, ViewError> {
    (0..params.views_per_orbit())
        .map(|k| {
            let theta_deg = theta0 + f64::from(k) * f64::from(params.a_deg);
            let t = theta_deg.to_radians();
            let eye = Vector3::new(
                center.x + radius * t.cos(),
                center.y + radius * t.sin(),
                center.z,
            );
            Ok(CameraRig {
                id: first_id + k,
                kind,
                theta_deg,
                eye,
                target: *target,
                extrinsic: lookat(&eye, target, &Vector3::z())?,
                intrinsic: *intrinsic,
                height: params.height,
                width: params.width,
            })
        })
        .collect()
}

/// `360 / A` rigs orbiting the global anchor.
pub fn global_rigs(bbox: &BoundingBox, params: &ViewParams) -> Result<Vec<CameraRig>, ViewError> {
    params.validate()?;
    let intrinsic = intrinsics_for(RigKind::Global, bbox, params)?;
    orbit(
        0,
        RigKind::Global,
        &global_anchor(bbox),
        global_radius(bbox),
        &global_target(bbox),
        initial_angle(params, 0),
        &intrinsic,
        params,
    )
}

/// `K^2 * 360 / A` rigs orbiting the local anchors, ids starting at
/// `first_id`, ordered by `(i, j, k)`.
pub fn local_rigs_from(
    bbox: &BoundingBox,
    params: &ViewParams,
    first_id: u32,
) -> Result<Vec<CameraRig>, ViewError> {
    params.validate()?;
    let intrinsic = intrinsics_for(RigKind::Local { i: 1, j: 1 }, bbox, params)?;
    let radius = local_radius(bbox, params);
    let per = params.views_per_orbit();
    let mut rigs = Vec::with_capacity((params.k * params.k * per) as usize);
    for i in 1..=params.k {
        for j in 1..=params.k {
            let family = 1 + u64::from(i - 1) * u64::from(params.k) + u64::from(j - 1);
            let anchor = local_anchor(bbox, params.k, i, j);
            rigs.extend(orbit(
                first_id + rigs.len() as u32,
                RigKind::Local { i, j },
                &anchor,
                radius,
                &local_target(bbox, &anchor),
                initial_angle(params, family),
                &intrinsic,
                params,
            )?);
        }
    }
    Ok(rigs)
}

pub fn local_rigs(bbox: &BoundingBox, params: &ViewParams) -> Result<Vec<CameraRig>, ViewError> {
    local_rigs_from(bbox, params, params.views_per_orbit())
}

/// Global rigs followed by local rigs, ids `0..total_rigs()`.
pub fn all_rigs(bbox: &BoundingBox, params: &ViewParams) -> Result<Vec<CameraRig>, ViewError> {
    let mut rigs = global_rigs(bbox, params)?;
    rigs.extend(local_rigs(bbox, params)?);
    Ok(rigs)
}

/// One rig as exported in a rig bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigRecord {
    pub id: u32,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub i: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j: Option<u32>,
    pub theta_deg: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    /// Row-major 4x4.
    #[serde(rename = "E")]
    pub extrinsic: Vec<f64>,
    /// Row-major 3x3.
    #[serde(rename = "I")]
    pub intrinsic: Vec<f64>,
    pub h: u32,
    pub w: u32,
}

impl From<&CameraRig> for RigRecord {
    fn from(r: &CameraRig) -> Self {
        let (kind, i, j) = match r.kind {
            RigKind::Global => ("global", None, None),
            RigKind::Local { i, j } => ("local", Some(i), Some(j)),
        };
        Self {
            id: r.id,
            kind: kind.into(),
            i,
            j,
            theta_deg: r.theta_deg,
            eye: r.eye.into(),
            target: r.target.into(),
            extrinsic: r.extrinsic.transpose().iter().copied().collect(),
            intrinsic: r.intrinsic.transpose().iter().copied().collect(),
            h: r.height,
            w: r.width,
        }
    }
}

impl TryFrom<RigRecord> for CameraRig {
    type Error = ViewError;

    fn try_from(rec: RigRecord) -> Result<Self, ViewError> {
        let bad = |message: &str| ViewError::InvalidRig {
            id: rec.id,
            message: message.into(),
        };
        let kind = match (rec.kind.as_str(), rec.i, rec.j) {
            ("global", _, _) => RigKind::Global,
            ("local", Some(i), Some(j)) => RigKind::Local { i, j },
            _ => return Err(bad("kind must be `global` or `local` with i and j")),
        };
        if rec.extrinsic.len() != 16 || rec.intrinsic.len() != 9 {
            return Err(bad("E needs 16 values and I needs 9"));
        }
        Ok(Self {
            id: rec.id,
            kind,
            theta_deg: rec.theta_deg,
            eye: rec.eye.into(),
            target: rec.target.into(),
            extrinsic: Matrix4::from_row_slice(&rec.extrinsic),
            intrinsic: Matrix3::from_row_slice(&rec.intrinsic),
            height: rec.h,
            width: rec.w,
        })
    }
}

/// JSON document describing one rig set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigBundle {
    pub params: ViewParams,
    pub rigs: Vec<RigRecord>,
}

impl RigBundle {
    pub fn new(params: &ViewParams, rigs: &[CameraRig]) -> Self {
        Self {
            params: params.clone(),
            rigs: rigs.iter().map(RigRecord::from).collect(),
        }
    }

    pub fn camera_rigs(&self) -> Result<Vec<CameraRig>, ViewError> {
        self.rigs.iter().cloned().map(CameraRig::try_from).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ViewError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ViewError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
