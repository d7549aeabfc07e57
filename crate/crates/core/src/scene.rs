//! Synthetic scenes built from parametric templates or loaded meshes, and
//! collision queries against them.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{PointCloud, SpatialGrid};
use crate::geometry::Pose;
use crate::kinematics::{RobotBody, RobotModel};
use crate::mesh::{Mesh, MeshError};
use crate::rng::SeedStream;
use crate::shapes::Obb;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown object template '{0}'")]
    UnknownTemplate(String),
    #[error("duplicate object id {0}")]
    DuplicateId(u32),
    #[error("object {id}: {message}")]
    InvalidObject { id: u32, message: String },
    #[error("no object with id {0}")]
    MissingObject(u32),
    #[error("label '{0}' not visible in any view")]
    EmptyCloud(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("scene spec: {0}")]
    Spec(String),
}

fn default_friction() -> f64 {
    0.5
}

/// One object entry in a scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: u32,
    pub label: String,
    /// `table`, `chair`, `box` or `mesh`.
    pub template: String,
    /// Bounding-box extents (x, y, z) for the parametric templates.
    #[serde(default)]
    pub dimensions: [f64; 3],
    /// Mesh file (`.stl` / `.obj`) for the `mesh` template, relative to the
    /// spec file.
    #[serde(default)]
    pub mesh_path: Option<String>,
    pub position: [f64; 3],
    /// Roll, pitch, yaw in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
    pub mass: f64,
    #[serde(default = "default_friction")]
    pub friction: f64,
    /// Relative uniform perturbation of the template dimensions, drawn from
    /// the scene seed.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub floor_height: f64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        serde_json::from_str(s).map_err(|e| SceneError::Spec(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub label: String,
    pub template: String,
    /// Object-frame mesh.
    pub mesh: Mesh,
    /// Object-frame collision boxes.
    pub shapes: Vec<Obb>,
    pub pose: Pose,
    pub mass: f64,
    pub friction: f64,
    pub watertight: bool,
    /// Centre of mass in the object frame (uniform density).
    pub com_local: Vector3<f64>,
}

impl SceneObject {
    pub fn world_shapes(&self) -> Vec<Obb> {
        self.shapes
            .iter()
            .map(|b| b.transformed(&self.pose))
            .collect()
    }

    pub fn world_shapes_at(&self, pose: &Pose) -> Vec<Obb> {
        self.shapes.iter().map(|b| b.transformed(pose)).collect()
    }

    pub fn world_mesh(&self) -> Mesh {
        self.mesh.transformed(&self.pose)
    }

    pub fn com_world(&self) -> Vector3<f64> {
        self.pose.transform_point(&self.com_local)
    }

    /// Object-frame bounding box of the mesh.
    pub fn extents(&self) -> Vector3<f64> {
        let (lo, hi) = self.mesh.bounds();
        hi - lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub floor_height: f64,
}

pub const TABLE_TOP_THICKNESS: f64 = 0.04;
const TABLE_LEG: f64 = 0.05;
const TABLE_LEG_INSET: f64 = 0.05;
const CHAIR_SEAT_HEIGHT: f64 = 0.45;
const CHAIR_SEAT_THICKNESS: f64 = 0.04;
const CHAIR_BACK_THICKNESS: f64 = 0.04;
const CHAIR_LEG: f64 = 0.04;

fn slab(lo: [f64; 3], hi: [f64; 3]) -> Obb {
    Obb::axis_aligned(Vector3::from(lo), Vector3::from(hi))
}

/// Top slab and four legs; origin at the floor centre, top surface at `h`.
pub fn table_boxes(l: f64, w: f64, h: f64) -> Vec<Obb> {
    let (hx, hy) = (l * 0.5, w * 0.5);
    let under = h - TABLE_TOP_THICKNESS;
    let mut out = vec![slab([-hx, -hy, under], [hx, hy, h])];
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let cx = sx * (hx - TABLE_LEG_INSET - TABLE_LEG * 0.5);
        let cy = sy * (hy - TABLE_LEG_INSET - TABLE_LEG * 0.5);
        let r = TABLE_LEG * 0.5;
        out.push(slab([cx - r, cy - r, 0.0], [cx + r, cy + r, under]));
    }
    out
}

/// Seat, backrest (on the -y side) and four legs.
pub fn chair_boxes(w: f64, d: f64, h: f64) -> Vec<Obb> {
    let (hx, hy) = (w * 0.5, d * 0.5);
    let seat_top = CHAIR_SEAT_HEIGHT.min(h * 0.6);
    let seat_bottom = seat_top - CHAIR_SEAT_THICKNESS;
    let mut out = vec![
        slab([-hx, -hy, seat_bottom], [hx, hy, seat_top]),
        slab([-hx, -hy, seat_top], [hx, -hy + CHAIR_BACK_THICKNESS, h]),
    ];
    let r = CHAIR_LEG * 0.5;
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let cx = sx * (hx - r);
        let cy = sy * (hy - r);
        out.push(slab([cx - r, cy - r, 0.0], [cx + r, cy + r, seat_bottom]));
    }
    out
}

pub fn box_boxes(l: f64, w: f64, h: f64) -> Vec<Obb> {
    vec![slab([-l * 0.5, -w * 0.5, 0.0], [l * 0.5, w * 0.5, h])]
}

/// What a collision query is tested against.
#[derive(Clone, Debug, Default)]
pub struct CollisionFilter {
    /// Object ids to skip.
    pub ignore: BTreeSet<u32>,
    /// Whether the floor plane counts as an obstacle.
    pub floor: bool,
}

impl CollisionFilter {
    pub fn all() -> Self {
        CollisionFilter {
            ignore: BTreeSet::new(),
            floor: true,
        }
    }

    pub fn ignoring(ids: impl IntoIterator<Item = u32>, floor: bool) -> Self {
        CollisionFilter {
            ignore: ids.into_iter().collect(),
            floor,
        }
    }
}

/// Geometry that can be posed and tested for collision.
#[derive(Clone, Copy, Debug)]
pub enum CollisionGeometry<'a> {
    /// Boxes in the geometry frame.
    Boxes(&'a [Obb]),
    /// A mesh, tested through its bounding box.
    Mesh(&'a Mesh),
    /// Fingers and palm at the given opening, with the approach corridor
    /// swept `sweep` metres back along -z.
    Gripper {
        robot: &'a RobotModel,
        opening: f64,
        sweep: f64,
    },
}

impl CollisionGeometry<'_> {
    /// Boxes in the frame given by `pose`.
    pub fn posed_boxes(&self, pose: &Pose) -> Vec<Obb> {
        let local: Vec<Obb> = match self {
            CollisionGeometry::Boxes(b) => b.to_vec(),
            CollisionGeometry::Mesh(m) => {
                let (lo, hi) = m.bounds();
                vec![Obb::axis_aligned(lo, hi)]
            }
            CollisionGeometry::Gripper {
                robot,
                opening,
                sweep,
            } => robot
                .gripper_jaw_boxes_at(*opening)
                .into_iter()
                .map(|mut b| {
                    if *sweep > 0.0 {
                        b.half_extents.z += sweep * 0.5;
                        b.center.z -= sweep * 0.5;
                    }
                    b
                })
                .collect(),
        };
        local.iter().map(|b| b.transformed(pose)).collect()
    }
}

impl Scene {
    /// Builds a scene; deterministic in `spec` (including its seed).
    pub fn generate(spec: &SceneSpec) -> Result<Scene, SceneError> {
        Scene::generate_in(spec, Path::new("."))
    }

    /// Like [`Scene::generate`], resolving mesh paths against `base_dir`.
    pub fn generate_in(spec: &SceneSpec, base_dir: &Path) -> Result<Scene, SceneError> {
        let seeds = SeedStream::new(spec.seed);
        let mut seen = BTreeSet::new();
        let mut objects = Vec::with_capacity(spec.objects.len());
        for o in &spec.objects {
            if !seen.insert(o.id) {
                return Err(SceneError::DuplicateId(o.id));
            }
            let bad = |m: &str| SceneError::InvalidObject {
                id: o.id,
                message: m.to_string(),
            };
            if !(o.friction > 0.0) {
                return Err(bad("friction must be positive"));
            }
            if !(o.mass > 0.0) {
                return Err(bad("mass must be positive"));
            }
            let mut dims = o.dimensions;
            if o.jitter > 0.0 {
                let mut rng = seeds.child("scene-jitter", o.id as u64).rng("dims");
                for d in &mut dims {
                    *d *= 1.0 + rng.random_range(-o.jitter..=o.jitter);
                }
            }
            let parametric = matches!(o.template.as_str(), "table" | "chair" | "box");
            if parametric && dims.iter().any(|d| !(*d > 0.0)) {
                return Err(bad("dimensions must be positive"));
            }
            let (mesh, shapes) = match o.template.as_str() {
                "table" => {
                    if dims[2] <= TABLE_TOP_THICKNESS {
                        return Err(bad("table height must exceed the top thickness"));
                    }
                    let b = table_boxes(dims[0], dims[1], dims[2]);
                    (Mesh::from_boxes(&b), b)
                }
                "chair" => {
                    let b = chair_boxes(dims[0], dims[1], dims[2]);
                    (Mesh::from_boxes(&b), b)
                }
                "box" => {
                    let b = box_boxes(dims[0], dims[1], dims[2]);
                    (Mesh::from_boxes(&b), b)
                }
                "mesh" => {
                    let rel = o
                        .mesh_path
                        .as_deref()
                        .ok_or_else(|| bad("mesh template needs mesh_path"))?;
                    let mesh = Mesh::load(&base_dir.join(rel))?;
                    if mesh.triangles.is_empty() {
                        return Err(bad("mesh has no triangles"));
                    }
                    let (lo, hi) = mesh.bounds();
                    let shapes = vec![Obb::axis_aligned(lo, hi)];
                    (mesh, shapes)
                }
                other => return Err(SceneError::UnknownTemplate(other.to_string())),
            };
            let watertight = mesh.is_watertight();
            let com_local = if watertight {
                mesh.volume_and_centroid().1
            } else {
                let (lo, hi) = mesh.bounds();
                (lo + hi) * 0.5
            };
            objects.push(SceneObject {
                id: o.id,
                label: o.label.clone(),
                template: o.template.clone(),
                mesh,
                shapes,
                pose: Pose::from_xyz_rpy(o.position, o.rpy),
                mass: o.mass,
                friction: o.friction,
                watertight,
                com_local,
            });
        }
        Ok(Scene {
            objects,
            floor_height: spec.floor_height,
        })
    }

    pub fn load(path: &Path) -> Result<Scene, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::Spec(format!("{}: {e}", path.display())))?;
        let spec = SceneSpec::from_json(&text)?;
        Scene::generate_in(&spec, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn object(&self, id: u32) -> Result<&SceneObject, SceneError> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or(SceneError::MissingObject(id))
    }

    pub fn object_by_label(&self, label: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.label == label)
    }

    /// Copy of the scene with one object moved.
    pub fn with_object_pose(&self, id: u32, pose: Pose) -> Result<Scene, SceneError> {
        let mut s = self.clone();
        let idx = s
            .objects
            .iter()
            .position(|o| o.id == id)
            .ok_or(SceneError::MissingObject(id))?;
        s.objects[idx].pose = pose;
        Ok(s)
    }

    /// Whether the posed geometry comes within `clearance` of any object or
    /// the floor.
    pub fn collides(&self, geometry: &CollisionGeometry, pose: &Pose, clearance: f64) -> bool {
        self.boxes_collide(
            &geometry.posed_boxes(pose),
            clearance,
            &CollisionFilter::all(),
        )
    }

    pub fn collides_filtered(
        &self,
        geometry: &CollisionGeometry,
        pose: &Pose,
        clearance: f64,
        filter: &CollisionFilter,
    ) -> bool {
        self.boxes_collide(&geometry.posed_boxes(pose), clearance, filter)
    }

    /// World-frame boxes against the scene.
    pub fn boxes_collide(&self, boxes: &[Obb], clearance: f64, filter: &CollisionFilter) -> bool {
        if filter.floor
            && boxes
                .iter()
                .any(|b| b.min_z() < self.floor_height + clearance)
        {
            return true;
        }
        for o in &self.objects {
            if filter.ignore.contains(&o.id) {
                continue;
            }
            for s in &o.shapes {
                let s = s.transformed(&o.pose);
                if boxes.iter().any(|b| b.intersects(&s, clearance)) {
                    return true;
                }
            }
        }
        false
    }

    /// Robot body against the scene. The base may rest on the floor; links
    /// and gripper may not touch it. `gripper_ignore` skips objects for the
    /// gripper boxes only (the object being held).
    pub fn robot_collides(
        &self,
        body: &RobotBody,
        clearance: f64,
        ignore: &BTreeSet<u32>,
        gripper_ignore: &BTreeSet<u32>,
    ) -> bool {
        let floor = self.floor_height;
        if body
            .links
            .iter()
            .any(|s| s.center.z - s.radius < floor + clearance)
        {
            return true;
        }
        if body.gripper.iter().any(|b| b.min_z() < floor + clearance) {
            return true;
        }
        for o in &self.objects {
            if ignore.contains(&o.id) {
                continue;
            }
            let skip_gripper = gripper_ignore.contains(&o.id);
            for s in &o.shapes {
                let s = s.transformed(&o.pose);
                if s.intersects(&body.base, clearance)
                    || body.links.iter().any(|l| s.intersects_sphere(l, clearance))
                    || (!skip_gripper && body.gripper.iter().any(|g| g.intersects(&s, clearance)))
                {
                    return true;
                }
            }
        }
        false
    }
}

/// Point obstacles (typically the fused object cloud) with a grid index.
#[derive(Clone, Debug)]
pub struct CloudObstacle {
    pub points: Vec<Vector3<f64>>,
    grid: SpatialGrid,
}

impl CloudObstacle {
    pub fn new(cloud: &PointCloud) -> Self {
        CloudObstacle {
            points: cloud.points.clone(),
            grid: SpatialGrid::new(&cloud.points, 0.02),
        }
    }

    /// Whether any point lies inside one of the posed boxes grown by
    /// `clearance`.
    pub fn collides(&self, geometry: &CollisionGeometry, pose: &Pose, clearance: f64) -> bool {
        geometry
            .posed_boxes(pose)
            .iter()
            .any(|b| self.box_hits(b, clearance))
    }

    pub fn box_hits(&self, b: &Obb, clearance: f64) -> bool {
        let (lo, hi) = b.aabb();
        let c = Vector3::repeat(clearance);
        self.grid.any_in_region(&(lo - c), &(hi + c), |i| {
            b.contains_point(&self.points[i], clearance)
        })
    }
}
