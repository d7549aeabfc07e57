//! Oriented boxes and spheres used for every collision query.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

/// Oriented bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub half_extents: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Obb {
    pub fn new(center: Vector3<f64>, rotation: Rotation3<f64>, half_extents: Vector3<f64>) -> Self {
        Self {
            center,
            rotation,
            half_extents,
        }
    }

    pub fn axis_aligned(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self::new((min + max) * 0.5, Rotation3::identity(), (max - min) * 0.5)
    }

    /// The box seen from the frame in which `pose` is expressed.
    pub fn transformed(&self, pose: &Pose) -> Obb {
        Obb::new(
            pose.transform_point(&self.center),
            pose.rotation * self.rotation,
            self.half_extents,
        )
    }

    pub fn local_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.center)
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let l = self.local_point(p);
        let d = Vector3::new(
            (l.x.abs() - self.half_extents.x).max(0.0),
            (l.y.abs() - self.half_extents.y).max(0.0),
            (l.z.abs() - self.half_extents.z).max(0.0),
        );
        d.norm()
    }

    /// Nearest point of the box to `p`.
    pub fn closest_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let l = self.local_point(p);
        let c = Vector3::new(
            l.x.clamp(-self.half_extents.x, self.half_extents.x),
            l.y.clamp(-self.half_extents.y, self.half_extents.y),
            l.z.clamp(-self.half_extents.z, self.half_extents.z),
        );
        self.rotation * c + self.center
    }

    pub fn contains_point(&self, p: &Vector3<f64>, clearance: f64) -> bool {
        let l = self.local_point(p);
        if l.x.abs() > self.half_extents.x + clearance
            || l.y.abs() > self.half_extents.y + clearance
            || l.z.abs() > self.half_extents.z + clearance
        {
            return false;
        }
        self.distance_to_point(p) <= clearance
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.center + self.rotation * s.component_mul(&self.half_extents);
        }
        out
    }

    pub fn min_z(&self) -> f64 {
        let m = self.rotation.matrix();
        let extent: f64 = (0..3).map(|i| m[(2, i)].abs() * self.half_extents[i]).sum();
        self.center.z - extent
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let m = self.rotation.matrix();
        let mut e = Vector3::zeros();
        for r in 0..3 {
            e[r] = (0..3).map(|i| m[(r, i)].abs() * self.half_extents[i]).sum();
        }
        (self.center - e, self.center + e)
    }

    /// Separating-axis test with both boxes grown by `clearance / 2` per face
    /// (so touching at `clearance` counts as a hit). Monotone in `clearance`.
    pub fn intersects(&self, other: &Obb, clearance: f64) -> bool {
        let ha = self.half_extents.add_scalar(clearance * 0.5);
        let hb = other.half_extents.add_scalar(clearance * 0.5);
        let dc = other.center - self.center;
        if dc.norm() > ha.norm() + hb.norm() {
            return false;
        }
        let ra: Matrix3<f64> = *self.rotation.matrix();
        let rb: Matrix3<f64> = *other.rotation.matrix();
        // rotation of b in a's frame
        let r = ra.transpose() * rb;
        let t = ra.transpose() * dc;
        let abs_r = r.map(|v| v.abs() + 1e-12);

        for i in 0..3 {
            let rb_proj = hb.x * abs_r[(i, 0)] + hb.y * abs_r[(i, 1)] + hb.z * abs_r[(i, 2)];
            if t[i].abs() > ha[i] + rb_proj {
                return false;
            }
        }
        for j in 0..3 {
            let ra_proj = ha.x * abs_r[(0, j)] + ha.y * abs_r[(1, j)] + ha.z * abs_r[(2, j)];
            let tj = t.x * r[(0, j)] + t.y * r[(1, j)] + t.z * r[(2, j)];
            if tj.abs() > ra_proj + hb[j] {
                return false;
            }
        }
        for i in 0..3 {
            let i1 = (i + 1) % 3;
            let i2 = (i + 2) % 3;
            for j in 0..3 {
                let j1 = (j + 1) % 3;
                let j2 = (j + 2) % 3;
                let ra_proj = ha[i1] * abs_r[(i2, j)] + ha[i2] * abs_r[(i1, j)];
                let rb_proj = hb[j1] * abs_r[(i, j2)] + hb[j2] * abs_r[(i, j1)];
                let tl = t[i2] * r[(i1, j)] - t[i1] * r[(i2, j)];
                if tl.abs() > ra_proj + rb_proj {
                    return false;
                }
            }
        }
        true
    }

    pub fn intersects_sphere(&self, s: &Sphere, clearance: f64) -> bool {
        self.distance_to_point(&s.center) <= s.radius + clearance
    }

    /// Ray/box slab test; returns the entry distance along `dir`.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.local_point(origin);
        let d = self.rotation.inverse() * dir;
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i].abs() > self.half_extents[i] {
                    return None;
                }
            } else {
                let a = (-self.half_extents[i] - o[i]) / d[i];
                let b = (self.half_extents[i] - o[i]) / d[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t0 <= t1 && t1 >= 0.0 {
            Some(t0.max(0.0))
        } else {
            None
        }
    }
}

impl Sphere {
    pub fn intersects(&self, other: &Sphere, clearance: f64) -> bool {
        (self.center - other.center).norm() <= self.radius + other.radius + clearance
    }
}
