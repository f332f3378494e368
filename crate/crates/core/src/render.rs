//! Point-splat rasterizer with a Z-buffer and per-pixel point indices.
//!
//! Depth is camera-space z. Each point covers a `splat_px x splat_px` square
//! centered on the pixel its center projects into; per pixel the point with
//! the smallest `(depth, index)` pair wins.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::PointCloud;
use crate::viewgen::CameraRig;

/// Near clipping distance in meters.
pub const Z_NEAR: f64 = 1e-3;
/// Index-map sentinel for pixels no point covers.
pub const NO_POINT: u32 = u32::MAX;
/// Default relative depth tolerance for the visibility test.
pub const DEFAULT_EPS_REL: f64 = 1e-2;
pub const DEFAULT_SPLAT_PX: u32 = 3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("splat size must be odd and at least 1, got {0}")]
    InvalidSplat(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("png decoding: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("no rendered view for rig {0}")]
    MissingView(u32),
}

/// The RGB image, depth map and point-index map of one rig.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rig_id: u32,
    pub height: u32,
    pub width: u32,
    /// Row-major `h * w * 3`.
    pub rgb: Vec<u8>,
    /// Row-major `h * w`; `+inf` where empty.
    pub depth: Vec<f32>,
    /// Row-major `h * w`; [`NO_POINT`] where empty.
    pub point_index: Vec<u32>,
}

impl RenderedView {
    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn offset(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

/// A point's image position and camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Pixel containing the projection (pixel `x` spans `[x, x + 1)`).
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

/// Project without bounds checks; `None` only when behind the near plane.
fn project_unbounded(p: &Vector3<f64>, rig: &CameraRig) -> Option<Projection> {
    let c = rig.to_camera(p);
    if c.z <= Z_NEAR {
        return None;
    }
    let k = &rig.intrinsic;
    let u = k[(0, 0)] * c.x / c.z + k[(0, 1)] * c.y / c.z + k[(0, 2)];
    let v = k[(1, 1)] * c.y / c.z + k[(1, 2)];
    Some(Projection { u, v, depth: c.z })
}

/// Pinhole projection of a world point; `None` when the point is behind the
/// near plane or outside `[0, w) x [0, h)`.
pub fn project_point(p: &Vector3<f64>, rig: &CameraRig) -> Option<Projection> {
    project_unbounded(p, rig).filter(|pr| {
        pr.u >= 0.0 && pr.v >= 0.0 && pr.u < f64::from(rig.width) && pr.v < f64::from(rig.height)
    })
}

/// World point at image position `(u, v)` and camera-space depth `depth`.
pub fn unproject(u: f64, v: f64, depth: f64, rig: &CameraRig) -> Vector3<f64> {
    let k = &rig.intrinsic;
    let y = (v - k[(1, 2)]) / k[(1, 1)];
    let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
    rig.to_world(&Vector3::new(x * depth, y * depth, depth))
}

pub fn check_splat(splat_px: u32) -> Result<(), RenderError> {
    if splat_px == 0 || splat_px % 2 == 0 {
        return Err(RenderError::InvalidSplat(splat_px));
    }
    Ok(())
}

/// Render one view.
pub fn rasterize(
    cloud: &PointCloud,
    rig: &CameraRig,
    splat_px: u32,
) -> Result<RenderedView, RenderError> {
    check_splat(splat_px)?;
    let (w, h) = (rig.width as i64, rig.height as i64);
    let n = (w * h) as usize;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut index = vec![NO_POINT; n];
    let half = i64::from(splat_px / 2);

    for (i, p) in cloud.positions().iter().enumerate() {
        let Some(pr) = project_unbounded(p, rig) else {
            continue;
        };
        let (cu, cv) = (pr.u.floor(), pr.v.floor());
        // Far outside the image: skip before casting to integers.
        if cu < -(half as f64) - 1.0
            || cv < -(half as f64) - 1.0
            || cu > (w + half) as f64
            || cv > (h + half) as f64
        {
            continue;
        }
        let (cu, cv) = (cu as i64, cv as i64);
        let i = i as u32;
        for y in (cv - half).max(0)..=(cv + half).min(h - 1) {
            let row = (y * w) as usize;
            for x in (cu - half).max(0)..=(cu + half).min(w - 1) {
                let o = row + x as usize;
                let z = zbuf[o];
                if pr.depth < z || (pr.depth == z && i < index[o]) {
                    zbuf[o] = pr.depth;
                    index[o] = i;
                }
            }
        }
    }

    let colors = cloud.colors();
    let mut rgb = vec![0u8; n * 3];
    for (o, &i) in index.iter().enumerate() {
        if i != NO_POINT {
            rgb[o * 3..o * 3 + 3].copy_from_slice(&colors[i as usize]);
        }
    }
    Ok(RenderedView {
        rig_id: rig.id,
        height: rig.height,
        width: rig.width,
        rgb,
        depth: zbuf.iter().map(|&z| z as f32).collect(),
        point_index: index,
    })
}

/// Render every rig; views are independent so this runs in parallel and is
/// identical to rendering them one by one.
pub fn render_all(
    cloud: &PointCloud,
    rigs: &[CameraRig],
    splat_px: u32,
) -> Result<Vec<RenderedView>, RenderError> {
    rigs.par_iter().map(|r| rasterize(cloud, r, splat_px)).collect()
}

/// Whether a point at camera depth `z` agrees with a stored depth.
pub fn depth_matches(z: f64, stored: f32, eps_rel: f64) -> bool {
    if !stored.is_finite() {
        return false;
    }
    let z32 = f64::from(z as f32);
    (z32 - f64::from(stored)).abs() <= eps_rel * z32
}

/// Points whose own projection lands in-bounds on a pixel whose Z-buffer
/// depth matches theirs, as `(point id, pixel offset)`, in point order.
pub fn visible_points(
    cloud: &PointCloud,
    view: &RenderedView,
    rig: &CameraRig,
    eps_rel: f64,
) -> Vec<(u32, u32)> {
    cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let pr = project_point(p, rig)?;
            let (x, y) = pr.pixel();
            let o = view.offset(x, y);
            depth_matches(pr.depth, view.depth[o], eps_rel).then_some((i as u32, o as u32))
        })
        .collect()
}

/// Fraction of scene points observed by at least one view, with the
/// membership bitmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub ratio: f64,
    pub visible: Vec<bool>,
}

impl Coverage {
    pub fn from_visible(visible: Vec<bool>) -> Self {
        let seen = visible.iter().filter(|&&v| v).count();
        let ratio = if visible.is_empty() {
            0.0
        } else {
            seen as f64 / visible.len() as f64
        };
        Self { ratio, visible }
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Coverage of `cloud` by `views`, each matched to its rig by id.
pub fn coverage_ratio(
    cloud: &PointCloud,
    views: &[RenderedView],
    rigs: &[CameraRig],
) -> Result<Coverage, RenderError> {
    coverage_ratio_with(cloud, views, rigs, DEFAULT_EPS_REL)
}

pub fn coverage_ratio_with(
    cloud: &PointCloud,
    views: &[RenderedView],
    rigs: &[CameraRig],
    eps_rel: f64,
) -> Result<Coverage, RenderError> {
    let per_view: Vec<Vec<(u32, u32)>> = views
        .par_iter()
        .map(|v| {
            let rig = rigs
                .iter()
                .find(|r| r.id == v.rig_id)
                .ok_or(RenderError::MissingView(v.rig_id))?;
            Ok(visible_points(cloud, v, rig, eps_rel))
        })
        .collect::<Result<_, RenderError>>()?;
    let mut visible = vec![false; cloud.len()];
    for (p, _) in per_view.iter().flatten() {
        visible[*p as usize] = true;
    }
    Ok(Coverage::from_visible(visible))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RenderError + '_ {
    move |source| RenderError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn view_stem(dir: &Path, rig_id: u32) -> PathBuf {
    dir.join(format!("view_{rig_id}"))
}

fn write_raw(path: &Path, h: u32, w: u32, words: impl Iterator<Item = [u8; 4]>) -> Result<(), RenderError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut put = |b: &[u8]| out.write_all(b).map_err(io_err(path));
    put(&h.to_le_bytes())?;
    put(&w.to_le_bytes())?;
    for word in words {
        put(&word)?;
    }
    out.flush().map_err(io_err(path))
}

fn read_raw(path: &Path) -> Result<(u32, u32, Vec<[u8; 4]>), RenderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let fmt = |message: String| RenderError::Format {
        path: path.to_owned(),
        message,
    };
    if bytes.len() < 8 {
        return Err(fmt("missing 8-byte header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let expected = 8 + 4 * h as usize * w as usize;
    if bytes.len() != expected {
        return Err(fmt(format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len())));
    }
    let words = bytes[8..].chunks_exact(4).map(|c| c.try_into().unwrap()).collect();
    Ok((h, w, words))
}

/// Write `view_<id>.png`, `view_<id>.depth` and `view_<id>.idx` into `dir`.
///
/// The raw files start with `u32 h, u32 w` (little-endian) followed by the
/// row-major payload: `f32` depths or `u32` indices.
pub fn write_view(dir: &Path, view: &RenderedView) -> Result<(), RenderError> {
    let stem = view_stem(dir, view.rig_id);
    let png_path = stem.with_extension("png");
    let file = std::fs::File::create(&png_path).map_err(io_err(&png_path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), view.width, view.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&view.rgb)?;
    writer.finish()?;

    write_raw(
        &stem.with_extension("depth"),
        view.height,
        view.width,
        view.depth.iter().map(|d| d.to_le_bytes()),
    )?;
    write_raw(
        &stem.with_extension("idx"),
        view.height,
        view.width,
        view.point_index.iter().map(|i| i.to_le_bytes()),
    )
}

pub fn read_view(dir: &Path, rig_id: u32) -> Result<RenderedView, RenderError> {
    let stem = view_stem(dir, rig_id);
    let depth_path = stem.with_extension("depth");
    let (h, w, depth) = read_raw(&depth_path)?;
    let idx_path = stem.with_extension("idx");
    let (hi, wi, index) = read_raw(&idx_path)?;
    if (hi, wi) != (h, w) {
        return Err(RenderError::Format {
            path: idx_path,
            message: format!("size {hi}x{wi} differs from depth map {h}x{w}"),
        });
    }
    let png_path = stem.with_extension("png");
    let file = std::fs::File::open(&png_path).map_err(io_err(&png_path))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RenderError::Format {
            path: png_path.clone(),
            message: "image too large".into(),
        })?;
    let mut rgb = vec![0; size];
    let info = reader.next_frame(&mut rgb)?;
    if (info.height, info.width) != (h, w) || info.color_type != png::ColorType::Rgb {
        return Err(RenderError::Format {
            path: png_path,
            message: "png size or color type does not match the depth map".into(),
        });
    }
    rgb.truncate(info.buffer_size());
    Ok(RenderedView {
        rig_id,
        height: h,
        width: w,
        rgb,
        depth: depth.into_iter().map(f32::from_le_bytes).collect(),
        point_index: index.into_iter().map(u32::from_le_bytes).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viewgen::{intrinsics_from_fov, lookat, RigKind};
    use proptest::prelude::*;

    pub(crate) fn rig(eye: [f64; 3], target: [f64; 3], size: u32) -> CameraRig {
        let eye = Vector3::from(eye);
        let target = Vector3::from(target);
        CameraRig {
            id: 0,
            kind: RigKind::Global,
            theta_deg: 0.0,
            eye,
            target,
            extrinsic: lookat(&eye, &target, &Vector3::z()).unwrap(),
            intrinsic: intrinsics_from_fov(60f64.to_radians(), size, size).unwrap(),
            height: size,
            width: size,
        }
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_positions(points.iter().map(|p| Vector3::from(*p)).collect()).unwrap()
    }

    #[test]
    fn on_axis_point_hits_principal_pixel() {
        let r = rig([0.0, -10.0, 0.0], [0.0, 0.0, 0.0], 32);
        let view = rasterize(&cloud(&[[0.0, 0.0, 0.0]]), &r, 1).unwrap();
        let o = view.offset(16, 16);
        assert_eq!(view.point_index[o], 0);
        assert_eq!(view.depth[o], 10.0);
        assert_eq!(view.point_index.iter().filter(|&&i| i != NO_POINT).count(), 1);
    }

    #[test]
    fn nearer_point_wins_shared_pixels() {
        let r = rig([0.0, -10.0, 0.0], [0.0, 0.0, 0.0], 32);
        // z = 5 listed first so the win is not an ordering accident.
        let c = cloud(&[[0.0, -5.0, 0.0], [0.0, -8.0, 0.0]]);
        let view = rasterize(&c, &r, 3).unwrap();
        let hits: Vec<_> = view.point_index.iter().filter(|&&i| i != NO_POINT).collect();
        assert_eq!(hits.len(), 9);
        assert!(hits.iter().all(|&&i| i == 1));
        assert!(view.depth.iter().filter(|d| d.is_finite()).all(|&d| d == 2.0));
    }

    #[test]
    fn points_behind_camera_are_culled() {
        let r = rig([0.0, -10.0, 0.0], [0.0, 0.0, 0.0], 32);
        let view = rasterize(&cloud(&[[0.0, -12.0, 0.0], [0.0, -10.0, 0.0]]), &r, 5).unwrap();
        assert!(view.point_index.iter().all(|&i| i == NO_POINT));
        assert!(view.depth.iter().all(|d| d.is_infinite()));
        assert!(view.rgb.iter().all(|&b| b == 0));
    }

    #[test]
    fn even_splat_rejected() {
        let r = rig([0.0, -10.0, 0.0], [0.0, 0.0, 0.0], 32);
        assert!(matches!(
            rasterize(&cloud(&[[0.0, 0.0, 0.0]]), &r, 2),
            Err(RenderError::InvalidSplat(2))
        ));
    }

    #[test]
    fn target_projects_to_center_and_corner_bounds() {
        let r = rig([3.0, -7.0, 4.0], [1.0, 2.0, 0.5], 64);
        let p = project_point(&r.target, &r).unwrap();
        assert!((p.u - 32.0).abs() < 0.5 && (p.v - 32.0).abs() < 0.5);
        // Rays through pixel corners: the left edge is inclusive, the right
        // edge exclusive.
        let at = |u: f64, v: f64| project_point(&unproject(u, v, 5.0, &r), &r);
        assert_eq!(at(0.0, 10.0).map(|p| p.pixel().0), Some(0));
        assert_eq!(at(63.999, 10.0).map(|p| p.pixel().0), Some(63));
        assert!(at(64.001, 10.0).is_none());
        assert!(at(-0.001, 10.0).is_none());
    }

    #[test]
    fn depth_invariants_hold() {
        let r = rig([0.0, -10.0, 3.0], [0.0, 0.0, 0.0], 48);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let t = f64::from(i);
                [(t * 0.37).sin() * 3.0, (t * 0.11).cos() * 3.0, (t * 0.23).sin()]
            })
            .collect();
        let view = rasterize(&cloud(&pts), &r, 3).unwrap();
        for (d, &i) in view.depth.iter().zip(&view.point_index) {
            assert_eq!(d.is_finite(), i != NO_POINT);
            if i != NO_POINT {
                assert!(*d > 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn unproject_then_project_round_trips(
            u in 0.0f64..64.0, v in 0.0f64..64.0, depth in 0.5f64..200.0,
            eye in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let r = rig(eye, [0.0, 0.0, 0.0], 64);
            prop_assume!((Vector3::from(eye)).norm() > 1.0);
            let w = unproject(u, v, depth, &r);
            let p = project_unbounded(&w, &r).unwrap();
            prop_assert!((p.u - u).abs() < 1e-6 && (p.v - v).abs() < 1e-6);
            prop_assert!((p.depth - depth).abs() < 1e-9 * depth.max(1.0));
        }
    }

    #[test]
    fn view_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rig([0.0, -10.0, 3.0], [0.0, 0.0, 0.0], 20);
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.5], [-1.0, 1.0, 0.0]]);
        let view = rasterize(&c, &r, 3).unwrap();
        write_view(dir.path(), &view).unwrap();
        assert_eq!(read_view(dir.path(), 0).unwrap(), view);
        let depth = std::fs::read(dir.path().join("view_0.depth")).unwrap();
        assert_eq!(depth.len(), 8 + 20 * 20 * 4);
        std::fs::write(dir.path().join("view_0.idx"), &depth[..100]).unwrap();
        assert!(matches!(read_view(dir.path(), 0), Err(RenderError::Format { .. })));
    }
}
