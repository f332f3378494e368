//! Deterministic synthetic urban scenes with exact ground-truth labels.
//!
//! A scene is a set of labeled surfaces: ground patches (with the
//! footprints of boxes standing on them cut out), the four walls and roof of
//! every building or vehicle box, and trees made of a cylindrical trunk and
//! a spherical crown. Points are spread uniformly by area: the total count is
//! `round(density * total_area)`, split across surfaces by largest remainder.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PointCloud, SceneError};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub color: [u8; 3],
}

/// Axis-aligned rectangle of ground at the scene's ground height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPatch {
    pub min: [f64; 2],
    pub size: [f64; 2],
    pub class: u32,
}

/// Axis-aligned box; walls and roof are sampled, the floor is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrim {
    pub min: [f64; 3],
    pub size: [f64; 3],
    pub class: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePrim {
    /// Trunk base (x, y, z).
    pub base: [f64; 3],
    pub trunk_height: f64,
    pub trunk_radius: f64,
    pub crown_radius: f64,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub ground_z: f64,
    #[serde(default)]
    pub ground: Vec<GroundPatch>,
    #[serde(default)]
    pub buildings: Vec<BoxPrim>,
    #[serde(default)]
    pub trees: Vec<TreePrim>,
    #[serde(default)]
    pub vehicles: Vec<BoxPrim>,
    /// Points per square meter of surface.
    pub density: f64,
    /// Per-channel uniform color jitter in `[-jitter, jitter]`.
    #[serde(default)]
    pub color_jitter: u8,
    pub seed: u64,
}

enum Surface {
    Ground { patch: GroundPatch, holes: Vec<[f64; 4]> },
    /// Parallelogram `origin + s * u + t * v`, `s, t` in `[0, 1)`.
    Quad { origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64> },
    Cylinder { base: Vector3<f64>, radius: f64, height: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

struct LabeledSurface {
    surface: Surface,
    area: f64,
    class: u32,
}

fn rect_overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let l = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * l
}

fn footprint(b: &BoxPrim) -> [f64; 4] {
    [b.min[0], b.min[1], b.min[0] + b.size[0], b.min[1] + b.size[1]]
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.ground.is_empty()
            && self.buildings.is_empty()
            && self.trees.is_empty()
            && self.vehicles.is_empty()
        {
            return bad("scene has no surfaces".into());
        }
        if self.classes.is_empty() {
            return bad("scene has no classes".into());
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.color == b.color {
                    return bad(format!("classes `{}` and `{}` share a color", a.name, b.name));
                }
            }
        }
        let n = self.classes.len() as u32;
        let classes = self
            .ground
            .iter()
            .map(|g| g.class)
            .chain(self.buildings.iter().map(|b| b.class))
            .chain(self.vehicles.iter().map(|b| b.class))
            .chain(self.trees.iter().map(|t| t.class));
        for c in classes {
            if c >= n {
                return bad(format!("class id {c} out of range ({n} classes)"));
            }
        }
        for g in &self.ground {
            if !(g.size[0] > 0.0 && g.size[1] > 0.0) {
                return bad("ground patch with non-positive size".into());
            }
        }
        let boxes: Vec<_> = self.buildings.iter().chain(&self.vehicles).collect();
        for b in &boxes {
            if !b.size.iter().all(|&s| s > 0.0) {
                return bad("box with non-positive size".into());
            }
        }
        for (i, a) in boxes.iter().enumerate() {
            for b in &boxes[i + 1..] {
                if rect_overlap(footprint(a), footprint(b)) > 0.0 {
                    return bad("box footprints overlap".into());
                }
            }
        }
        for t in &self.trees {
            if !(t.trunk_height > 0.0 && t.trunk_radius > 0.0 && t.crown_radius > 0.0) {
                return bad("tree with non-positive dimensions".into());
            }
        }
        Ok(())
    }

    fn surfaces(&self) -> Vec<LabeledSurface> {
        let mut out = Vec::new();
        let grounded: Vec<[f64; 4]> = self
            .buildings
            .iter()
            .chain(&self.vehicles)
            .filter(|b| (b.min[2] - self.ground_z).abs() < 1e-9)
            .map(footprint)
            .collect();
        for g in &self.ground {
            let rect = [g.min[0], g.min[1], g.min[0] + g.size[0], g.min[1] + g.size[1]];
            let holes: Vec<_> = grounded
                .iter()
                .copied()
                .filter(|h| rect_overlap(rect, *h) > 0.0)
                .collect();
            let cut: f64 = holes.iter().map(|h| rect_overlap(rect, *h)).sum();
            let area = g.size[0] * g.size[1] - cut;
            if area > 0.0 {
                out.push(LabeledSurface {
                    surface: Surface::Ground { patch: *g, holes },
                    area,
                    class: g.class,
                });
            }
        }
        for b in self.buildings.iter().chain(&self.vehicles) {
            let o = Vector3::from(b.min);
            let [sx, sy, sz] = b.size;
            let ex = Vector3::new(sx, 0.0, 0.0);
            let ey = Vector3::new(0.0, sy, 0.0);
            let ez = Vector3::new(0.0, 0.0, sz);
            let faces = [
                (o, ex, ez),
                (o + ey, ex, ez),
                (o, ey, ez),
                (o + ex, ey, ez),
                (o + ez, ex, ey),
            ];
            for (origin, u, v) in faces {
                out.push(LabeledSurface {
                    area: u.cross(&v).norm(),
                    surface: Surface::Quad { origin, u, v },
                    class: b.class,
                });
            }
        }
        for t in &self.trees {
            let base = Vector3::from(t.base);
            out.push(LabeledSurface {
                surface: Surface::Cylinder {
                    base,
                    radius: t.trunk_radius,
                    height: t.trunk_height,
                },
                area: 2.0 * PI * t.trunk_radius * t.trunk_height,
                class: t.class,
            });
            out.push(LabeledSurface {
                surface: Surface::Sphere {
                    center: base + Vector3::new(0.0, 0.0, t.trunk_height + t.crown_radius * 0.8),
                    radius: t.crown_radius,
                },
                area: 4.0 * PI * t.crown_radius * t.crown_radius,
                class: t.class,
            });
        }
        out
    }

    /// Sum of sampled surface areas in square meters.
    pub fn total_area(&self) -> f64 {
        self.surfaces().iter().map(|s| s.area).sum()
    }
}

/// Largest-remainder split of `round(density * sum(areas))` points.
fn allocate(areas: &[f64], density: f64) -> Vec<usize> {
    let total = (density * areas.iter().sum::<f64>()).round() as usize;
    let exact: Vec<f64> = areas.iter().map(|a| a * density).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample(surface: &Surface, rng: &mut impl Rng) -> Vector3<f64> {
    match surface {
        Surface::Ground { patch, holes } => loop {
            let x = patch.min[0] + rng.random::<f64>() * patch.size[0];
            let y = patch.min[1] + rng.random::<f64>() * patch.size[1];
            let inside = holes
                .iter()
                .any(|h| x >= h[0] && x < h[2] && y >= h[1] && y < h[3]);
            if !inside {
                return Vector3::new(x, y, 0.0);
            }
        },
        Surface::Quad { origin, u, v } => origin + u * rng.random::<f64>() + v * rng.random::<f64>(),
        Surface::Cylinder { base, radius, height } => {
            let a = rng.random::<f64>() * 2.0 * PI;
            base + Vector3::new(radius * a.cos(), radius * a.sin(), height * rng.random::<f64>())
        }
        Surface::Sphere { center, radius } => {
            let d = loop {
                let d = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let n: f64 = d.norm();
                if n > 1e-12 {
                    break d / n;
                }
            };
            center + d * *radius
        }
    }
}

/// Generate the labeled cloud described by `spec`.
///
/// Positions are rounded to 32-bit precision so they survive a PLY round
/// trip bit-for-bit.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud, SceneError> {
    spec.validate()?;
    let surfaces = spec.surfaces();
    let counts = allocate(&surfaces.iter().map(|s| s.area).collect::<Vec<_>>(), spec.density);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(SceneError::InvalidSpec("scene yields zero points".into()));
    }

    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let jitter = i16::from(spec.color_jitter);
    for (index, (s, &count)) in surfaces.iter().zip(&counts).enumerate() {
        let mut rng = rng::rng_for(spec.seed, &[tag::SCENE, index as u64]);
        let base = spec.classes[s.class as usize].color;
        for _ in 0..count {
            let mut p = sample(&s.surface, &mut rng);
            if matches!(s.surface, Surface::Ground { .. }) {
                p.z = spec.ground_z;
            }
            positions.push(p.map(|c| f64::from(c as f32)));
            let color = if jitter > 0 {
                base.map(|c| (i16::from(c) + rng.random_range(-jitter..=jitter)).clamp(0, 255) as u8)
            } else {
                base
            };
            colors.push(color);
            labels.push(s.class);
        }
    }
    let names = spec.classes.iter().map(|c| c.name.clone()).collect();
    PointCloud::new(positions, colors, Some(labels), names)
}

impl SceneSpec {
    /// Class list used by [`SceneSpec::urban`].
    pub fn urban_classes() -> Vec<ClassSpec> {
        [
            ("ground", [110, 160, 90]),
            ("road", [70, 70, 75]),
            ("building", [200, 120, 80]),
            ("tree", [30, 110, 40]),
            ("vehicle", [40, 80, 200]),
        ]
        .into_iter()
        .map(|(n, c)| ClassSpec {
            name: n.into(),
            color: c,
        })
        .collect()
    }

    /// A square city block of side `side` meters: a road cross through the
    /// middle, one building per quadrant, trees along the roads and vehicles
    /// parked on the road arms. The layout is drawn from `seed`.
    pub fn urban(seed: u64, side: f64, density: f64) -> Self {
        const ROAD: f64 = 8.0;
        let mut rng = rng::rng_for(seed, &[tag::SCENE, u64::MAX]);
        let c = side / 2.0;
        let (r0, r1) = (c - ROAD / 2.0, c + ROAD / 2.0);
        let quadrants = [
            [0.0, 0.0, r0, r0],
            [r1, 0.0, side, r0],
            [0.0, r1, r0, side],
            [r1, r1, side, side],
        ];
        let mut ground: Vec<GroundPatch> = quadrants
            .iter()
            .map(|q| GroundPatch {
                min: [q[0], q[1]],
                size: [q[2] - q[0], q[3] - q[1]],
                class: 0,
            })
            .collect();
        ground.push(GroundPatch {
            min: [0.0, r0],
            size: [side, ROAD],
            class: 1,
        });
        ground.push(GroundPatch {
            min: [r0, 0.0],
            size: [ROAD, r0],
            class: 1,
        });
        ground.push(GroundPatch {
            min: [r0, r1],
            size: [ROAD, side - r1],
            class: 1,
        });

        let mut buildings = Vec::new();
        let mut trees = Vec::new();
        for q in &quadrants {
            let (qw, ql) = (q[2] - q[0], q[3] - q[1]);
            let bw = (qw * rng.random_range(0.35..0.5)).max(1.0);
            let bl = (ql * rng.random_range(0.35..0.5)).max(1.0);
            let bh = rng.random_range(8.0..20.0);
            let margin = 2.5;
            let bx = q[0] + margin + rng.random::<f64>() * (qw - bw - 2.0 * margin).max(0.0);
            let by = q[1] + margin + rng.random::<f64>() * (ql - bl - 2.0 * margin).max(0.0);
            let building = BoxPrim {
                min: [bx, by, 0.0],
                size: [bw, bl, bh],
                class: 2,
            };
            buildings.push(building);
            let fp = footprint(&building);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < 3 && attempts < 200 {
                attempts += 1;
                let x = q[0] + 3.0 + rng.random::<f64>() * (qw - 6.0).max(0.0);
                let y = q[1] + 3.0 + rng.random::<f64>() * (ql - 6.0).max(0.0);
                let crown = rng.random_range(1.5..2.5);
                let clear = x < fp[0] - crown - 1.0
                    || x > fp[2] + crown + 1.0
                    || y < fp[1] - crown - 1.0
                    || y > fp[3] + crown + 1.0;
                let spaced = trees.iter().all(|t: &TreePrim| {
                    let dx = t.base[0] - x;
                    let dy = t.base[1] - y;
                    (dx * dx + dy * dy).sqrt() > t.crown_radius + crown + 1.0
                });
                if clear && spaced {
                    trees.push(TreePrim {
                        base: [x, y, 0.0],
                        trunk_height: rng.random_range(2.0..3.5),
                        trunk_radius: 0.2,
                        crown_radius: crown,
                        class: 3,
                    });
                    placed += 1;
                }
            }
        }

        let mut vehicles = Vec::new();
        let arm = (r0 - 2.0 - 6.5).max(0.0);
        for lane in [c - 3.0, c + 1.2] {
            for start in [2.0, r1 + 2.0] {
                let t = start + rng.random::<f64>() * arm;
                vehicles.push(BoxPrim {
                    min: [t, lane, 0.0],
                    size: [4.5, 1.8, 1.5],
                    class: 4,
                });
            }
        }
        for start in [2.0, r1 + 2.0] {
            let t = start + rng.random::<f64>() * arm;
            vehicles.push(BoxPrim {
                min: [c - 3.0, t, 0.0],
                size: [1.8, 4.5, 1.5],
                class: 4,
            });
        }

        Self {
            classes: Self::urban_classes(),
            ground_z: 0.0,
            ground,
            buildings,
            trees,
            vehicles,
            density,
            color_jitter: 12,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::bounding_box;

    fn plane_and_building(density: f64) -> SceneSpec {
        SceneSpec {
            classes: vec![
                ClassSpec { name: "ground".into(), color: [0, 255, 0] },
                ClassSpec { name: "building".into(), color: [255, 0, 0] },
            ],
            ground_z: 0.0,
            ground: vec![GroundPatch { min: [0.0, 0.0], size: [20.0, 10.0], class: 0 }],
            buildings: vec![BoxPrim { min: [2.0, 2.0, 0.0], size: [4.0, 3.0, 5.0], class: 1 }],
            trees: vec![],
            vehicles: vec![],
            density,
            color_jitter: 0,
            seed: 9,
        }
    }

    #[test]
    fn count_matches_area_arithmetic() {
        // Exposed ground 20*10 - 4*3 = 188; walls 2*(4*5) + 2*(3*5) = 70; roof 12.
        let area = 188.0 + 70.0 + 12.0;
        for density in [1.0, 3.7, 10.0] {
            let spec = plane_and_building(density);
            assert!((spec.total_area() - area).abs() < 1e-9);
            let n = generate_scene(&spec).unwrap().len() as f64;
            assert!((n - density * area).abs() <= 1.0, "n={n} expected {}", density * area);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec::urban(5, 40.0, 2.0);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 6, ..spec.clone() };
        assert_ne!(generate_scene(&spec).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn disjoint_classes_have_disjoint_boxes() {
        let spec = SceneSpec {
            ground: vec![],
            vehicles: vec![BoxPrim { min: [20.0, 20.0, 0.0], size: [2.0, 2.0, 1.0], class: 0 }],
            ..plane_and_building(4.0)
        };
        let cloud = generate_scene(&spec).unwrap();
        let labels = cloud.labels().unwrap();
        let boxes: Vec<_> = (0..2)
            .map(|c| {
                let pts: Vec<_> = cloud
                    .positions()
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| *p)
                    .collect();
                bounding_box(&PointCloud::from_positions(pts).unwrap())
            })
            .collect();
        let (a, b) = (boxes[0], boxes[1]);
        let separated = (0..3).any(|k| a.max()[k] < b.origin[k] || b.max()[k] < a.origin[k]);
        assert!(separated);
    }

    #[test]
    fn ground_points_avoid_footprints() {
        let cloud = generate_scene(&plane_and_building(5.0)).unwrap();
        for (p, &l) in cloud.positions().iter().zip(cloud.labels().unwrap()) {
            if l == 0 {
                assert_eq!(p.z, 0.0);
                assert!(!(p.x >= 2.0 && p.x < 6.0 && p.y >= 2.0 && p.y < 5.0));
            }
        }
    }

    #[test]
    fn empty_and_invalid_specs_fail() {
        let empty = SceneSpec {
            ground: vec![],
            buildings: vec![],
            ..plane_and_building(1.0)
        };
        assert!(matches!(generate_scene(&empty), Err(SceneError::InvalidSpec(_))));
        let mut same_color = plane_and_building(1.0);
        same_color.classes[1].color = same_color.classes[0].color;
        assert!(generate_scene(&same_color).is_err());
    }

    #[test]
    fn urban_scene_is_fully_labeled_with_distinct_colors() {
        let spec = SceneSpec::urban(3, 64.0, 1.0);
        let cloud = generate_scene(&spec).unwrap();
        let labels = cloud.labels().unwrap();
        for class in 0..5 {
            assert!(labels.contains(&class), "class {class} missing");
        }
        assert_eq!(cloud.class_names().len(), 5);
    }
}
