//! Point-cloud data model, PLY I/O, bounding boxes and the synthetic urban
//! scene generator.

mod generate;
mod ply;

use std::path::PathBuf;

use nalgebra::Vector3;
use thiserror::Error;

pub use generate::{generate_scene, BoxPrim, ClassSpec, GroundPatch, SceneSpec, TreePrim};
pub use ply::{load_cloud, read_cloud, write_cloud, write_cloud_to, PlyFormat};

/// Extent assigned to a bounding-box axis with zero spread.
pub const EPS_BOX: f64 = 1e-6;

/// Color given to points loaded from files without color properties.
pub const DEFAULT_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY header at line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("PLY vertex element is missing required property `{0}`")]
    MissingProperty(&'static str),
    #[error("PLY payload truncated at vertex {index} (byte offset {offset})")]
    Truncated { index: usize, offset: usize },
    #[error("PLY vertex {index} (byte offset {offset}): {message}")]
    BadValue {
        index: usize,
        offset: usize,
        message: String,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("point cloud has no points")]
    Empty,
    #[error("point {index} has label {label} but only {classes} class names")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        classes: usize,
    },
    #[error("{what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

/// An immutable colored point cloud with optional ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    colors: Vec<[u8; 3]>,
    labels: Option<Vec<u32>>,
    class_names: Vec<String>,
}

impl PointCloud {
    /// Build a cloud, checking every invariant.
    ///
    /// When labels are given without class names, names `class_<i>` are
    /// synthesized so that labels always index into `class_names`.
    pub fn new(
        positions: Vec<Vector3<f64>>,
        colors: Vec<[u8; 3]>,
        labels: Option<Vec<u32>>,
        mut class_names: Vec<String>,
    ) -> Result<Self, SceneError> {
        if positions.is_empty() {
            return Err(SceneError::Empty);
        }
        if colors.len() != positions.len() {
            return Err(SceneError::LengthMismatch {
                what: "colors",
                found: colors.len(),
                expected: positions.len(),
            });
        }
        if let Some(index) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(SceneError::NonFinite { index });
        }
        if let Some(labels) = &labels {
            if labels.len() != positions.len() {
                return Err(SceneError::LengthMismatch {
                    what: "labels",
                    found: labels.len(),
                    expected: positions.len(),
                });
            }
            if class_names.is_empty() {
                let max = labels.iter().copied().max().unwrap_or(0);
                class_names = (0..=max).map(|i| format!("class_{i}")).collect();
            }
            if let Some(index) = labels
                .iter()
                .position(|&l| l as usize >= class_names.len())
            {
                return Err(SceneError::LabelOutOfRange {
                    index,
                    label: labels[index],
                    classes: class_names.len(),
                });
            }
        }
        Ok(Self {
            positions,
            colors,
            labels,
            class_names,
        })
    }

    /// Cloud with default gray color and no labels.
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Result<Self, SceneError> {
        let colors = vec![DEFAULT_COLOR; positions.len()];
        Self::new(positions, colors, None, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false: a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Same geometry and labels with new colors.
    pub fn with_colors(&self, colors: Vec<[u8; 3]>) -> Result<Self, SceneError> {
        Self::new(
            self.positions.clone(),
            colors,
            self.labels.clone(),
            self.class_names.clone(),
        )
    }
}

/// Axis-aligned box. `W` is the x-extent, `L` the y-extent and `H` the
/// z-extent (z is up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub origin: Vector3<f64>,
    pub extents: Vector3<f64>,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.extents.x
    }

    pub fn length(&self) -> f64 {
        self.extents.y
    }

    pub fn height(&self) -> f64 {
        self.extents.z
    }

    pub fn center(&self) -> Vector3<f64> {
        self.origin + self.extents / 2.0
    }

    pub fn max(&self) -> Vector3<f64> {
        self.origin + self.extents
    }

    /// `sqrt(L * W)`, the horizontal scale every view placement derives from.
    pub fn footprint_scale(&self) -> f64 {
        (self.length() * self.width()).sqrt()
    }
}

/// Tight axis-aligned bounds of the cloud. Zero-spread axes are inflated to
/// [`EPS_BOX`] with a warning.
pub fn bounding_box(cloud: &PointCloud) -> BoundingBox {
    let first = cloud.positions[0];
    let (min, max) = cloud
        .positions
        .iter()
        .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let mut extents = max - min;
    for (axis, e) in extents.iter_mut().enumerate() {
        if *e <= 0.0 {
            log::warn!("bounding box has zero extent along axis {axis}; inflating to {EPS_BOX}");
            *e = EPS_BOX;
        }
    }
    BoundingBox {
        origin: min,
        extents,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_positions(points.iter().map(|p| Vector3::from(*p)).collect()).unwrap()
    }

    #[test]
    fn unit_cube_box() {
        let b = bounding_box(&cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]));
        assert_eq!(b.origin, Vector3::zeros());
        assert_eq!(b.extents, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(b.center(), Vector3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn single_point_is_inflated() {
        let b = bounding_box(&cloud(&[[3.0, -2.0, 7.0]]));
        assert_eq!(b.extents, Vector3::new(EPS_BOX, EPS_BOX, EPS_BOX));
        assert_eq!(b.origin, Vector3::new(3.0, -2.0, 7.0));
    }

    #[test]
    fn translated_cube() {
        let b = bounding_box(&cloud(&[[10.0, 20.0, 30.0], [11.0, 21.0, 31.0]]));
        assert_eq!(b.extents, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(b.origin, Vector3::new(10.0, 20.0, 30.0));
    }

    #[test]
    fn rejects_bad_clouds() {
        assert!(matches!(
            PointCloud::from_positions(vec![]),
            Err(SceneError::Empty)
        ));
        assert!(matches!(
            PointCloud::from_positions(vec![Vector3::new(0.0, f64::NAN, 0.0)]),
            Err(SceneError::NonFinite { index: 0 })
        ));
        let err = PointCloud::new(
            vec![Vector3::zeros()],
            vec![[0; 3]],
            Some(vec![2]),
            vec!["a".into(), "b".into()],
        );
        assert!(matches!(err, Err(SceneError::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn labels_without_names_get_synthesized_names() {
        let c = PointCloud::new(vec![Vector3::zeros(); 2], vec![[0; 3]; 2], Some(vec![0, 2]), vec![])
            .unwrap();
        assert_eq!(c.class_names(), ["class_0", "class_1", "class_2"]);
    }

    proptest! {
        #[test]
        fn box_is_translation_equivariant_and_order_invariant(
            pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 2..40),
            shift in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let base = bounding_box(&cloud(&pts));
            let mut rev = pts.clone();
            rev.reverse();
            prop_assert_eq!(bounding_box(&cloud(&rev)), base);

            let moved: Vec<[f64; 3]> = pts
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect();
            let b = bounding_box(&cloud(&moved));
            let s = Vector3::from(shift);
            prop_assert!((b.origin - (base.origin + s)).amax() < 1e-9);
            prop_assert!((b.extents - base.extents).amax() < 1e-9);
        }
    }
}
