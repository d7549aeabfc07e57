//! Wrench-space grasp metrics: grasp matrix, force-closure relaxation ω,
//! minimum singular value and the minimum-norm contact-force program.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, GraspPose};
use crate::mesh::Mesh;

pub const GRAVITY: f64 = 9.81;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_FRICTION: f64 = 0.5;
/// Relative shrink of each friction cone so returned forces are strictly
/// inside it.
pub const CONE_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty contact set")]
    Empty,
    #[error("invalid contact {index}: {message}")]
    InvalidContact { index: usize, message: String },
    #[error("degenerate grasp: external wrench not attainable (min eigenvalue of GG' = {min_eigenvalue:.3e})")]
    Degenerate { min_eigenvalue: f64 },
    #[error("equilibrium infeasible: residual {residual:.3e} after {iterations} iterations")]
    Infeasible { residual: f64, iterations: usize },
    #[error("gravity wrench has zero force")]
    ZeroGravity,
    #[error("grasp does not touch the object: {0}")]
    NoContact(String),
}

/// Hard-finger point contact. `normal` points into the object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    pub com: Vector3<f64>,
    /// Wrench (force, torque about `com`) the contacts must supply. For a
    /// held object this is the negated gravity load: `(0, 0, m g, 0, 0, 0)`.
    pub f_ext: Vector6<f64>,
}

impl ContactSet {
    /// Contacts holding an object of `mass` against gravity.
    pub fn under_gravity(contacts: Vec<Contact>, com: Vector3<f64>, mass: f64) -> Self {
        ContactSet {
            contacts,
            com,
            f_ext: Vector6::new(0.0, 0.0, mass * GRAVITY, 0.0, 0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.contacts.is_empty() {
            return Err(MetricsError::Empty);
        }
        for (index, c) in self.contacts.iter().enumerate() {
            let bad = |m: &str| MetricsError::InvalidContact {
                index,
                message: m.to_string(),
            };
            if !(c.mu > 0.0) {
                return Err(bad("friction coefficient must be positive"));
            }
            if (c.normal.norm() - 1.0).abs() > 1e-6 {
                return Err(bad("normal is not unit length"));
            }
            if !c.position.iter().all(|x| x.is_finite()) {
                return Err(bad("non-finite position"));
            }
        }
        if !self.f_ext.iter().all(|x| x.is_finite()) || !self.com.iter().all(|x| x.is_finite()) {
            return Err(MetricsError::InvalidContact {
                index: 0,
                message: "non-finite wrench or centre of mass".into(),
            });
        }
        Ok(())
    }
}

/// 6×3n map from stacked contact forces to the wrench about the centre of
/// mass.
pub fn grasp_matrix(cs: &ContactSet) -> DMatrix<f64> {
    let n = cs.contacts.len();
    let mut g = DMatrix::zeros(6, 3 * n);
    for (i, c) in cs.contacts.iter().enumerate() {
        g.fixed_view_mut::<3, 3>(0, 3 * i).fill_with_identity();
        g.fixed_view_mut::<3, 3>(3, 3 * i)
            .copy_from(&skew(&(c.position - cs.com)));
    }
    g
}

/// ‖G c‖ with `c` the stacked inward contact normals.
pub fn omega(cs: &ContactSet) -> f64 {
    let mut w = Vector6::zeros();
    for c in &cs.contacts {
        let r = c.position - cs.com;
        w.fixed_rows_mut::<3>(0).add_assign(&c.normal);
        w.fixed_rows_mut::<3>(3).add_assign(&r.cross(&c.normal));
    }
    w.norm()
}

/// Smallest of the six singular values; 0 when G has fewer than six columns.
pub fn min_singular_value(g: &DMatrix<f64>) -> f64 {
    if g.ncols() < g.nrows() {
        return 0.0;
    }
    let sv = g.singular_values();
    sv.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactForces {
    pub forces: Vec<Vector3<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl ContactForces {
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.forces.len(),
            self.forces.iter().flat_map(|f| f.iter().copied()),
        )
    }

    pub fn squared_norm(&self) -> f64 {
        self.forces.iter().map(|f| f.norm_squared()).sum()
    }
}

/// Effective friction coefficient after applying [`CONE_MARGIN`].
pub fn effective_mu(mu: f64) -> f64 {
    let cos = (1.0 + CONE_MARGIN) / (1.0 + mu * mu).sqrt();
    if cos >= 1.0 {
        return 0.0;
    }
    (1.0 - cos * cos).sqrt() / cos
}

/// Whether `f` lies in the cone `f·c ≥ (1 + margin)|f| / sqrt(1 + μ²)`.
/// The zero force counts as inside.
pub fn in_cone(f: &Vector3<f64>, c: &Contact, margin: f64) -> bool {
    let n = f.norm();
    n == 0.0
        || f.dot(&c.normal) >= (1.0 + margin) * n / (1.0 + c.mu * c.mu).sqrt() - 1e-15 * (1.0 + n)
}

/// Euclidean projection onto `{‖f_t‖ ≤ μ f_n}` and its Jacobian.
fn project_cone(
    y: &Vector3<f64>,
    n: &Vector3<f64>,
    mu: f64,
) -> (Vector3<f64>, nalgebra::Matrix3<f64>) {
    let s = y.dot(n);
    let t = y - n * s;
    let r = t.norm();
    if r <= mu * s {
        return (*y, nalgebra::Matrix3::identity());
    }
    if mu * r <= -s {
        return (Vector3::zeros(), nalgebra::Matrix3::zeros());
    }
    let u = t / r;
    let k = 1.0 + mu * mu;
    let alpha = (s + mu * r) / k;
    let e = n + u * mu;
    let p = e * alpha;
    let pt = nalgebra::Matrix3::identity() - n * n.transpose() - u * u.transpose();
    let jac = e * e.transpose() / k + pt * (alpha * mu / r);
    (p, jac)
}

/// Minimum-norm contact forces with `G f = f_ext` and every force inside its
/// (margin-shrunk) friction cone.
///
/// Solved in the dual: maximise `λᵀw − ½‖Π_K(Gᵀλ)‖²` by regularised
/// semismooth Newton with backtracking; the primal is `f = Π_K(Gᵀλ)`.
pub fn solve_contact_forces(cs: &ContactSet, epsilon: f64) -> Result<ContactForces, MetricsError> {
    cs.validate()?;
    let g = grasp_matrix(cs);
    let w = cs.f_ext;
    let wn = w.norm();
    let n = cs.contacts.len();
    let zero = ContactForces {
        forces: vec![Vector3::zeros(); n],
        iterations: 0,
        residual: 0.0,
    };
    if wn == 0.0 {
        return Ok(zero);
    }

    // wrench attainability: w must lie in the span of singular directions
    // with σ² ≥ ε
    let ggt: Matrix6<f64> = (&g * g.transpose()).fixed_view::<6, 6>(0, 0).into_owned();
    let eig = ggt.symmetric_eigen();
    let min_eig = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut outside = 0.0;
    for k in 0..6 {
        if eig.eigenvalues[k] < epsilon {
            outside += eig.eigenvectors.column(k).dot(&w).powi(2);
        }
    }
    if outside.sqrt() > 1e-9 * (1.0 + wn) {
        return Err(MetricsError::Degenerate {
            min_eigenvalue: min_eig,
        });
    }

    let mus: Vec<f64> = cs.contacts.iter().map(|c| effective_mu(c.mu)).collect();
    let primal = |lambda: &Vector6<f64>| -> (Vec<Vector3<f64>>, Vec<nalgebra::Matrix3<f64>>) {
        let mut fs = Vec::with_capacity(n);
        let mut js = Vec::with_capacity(n);
        for (i, c) in cs.contacts.iter().enumerate() {
            let r = c.position - cs.com;
            // block i of Gᵀλ
            let y = lambda.fixed_rows::<3>(0) + lambda.fixed_rows::<3>(3).cross(&r);
            let (f, j) = project_cone(&y, &c.normal, mus[i]);
            fs.push(f);
            js.push(j);
        }
        (fs, js)
    };
    let wrench_of = |fs: &[Vector3<f64>]| -> Vector6<f64> {
        let mut out = Vector6::zeros();
        for (c, f) in cs.contacts.iter().zip(fs) {
            out.fixed_rows_mut::<3>(0).add_assign(f);
            out.fixed_rows_mut::<3>(3)
                .add_assign(&(c.position - cs.com).cross(f));
        }
        out
    };
    let dual = |lambda: &Vector6<f64>, fs: &[Vector3<f64>]| -> f64 {
        lambda.dot(&w) - 0.5 * fs.iter().map(|f| f.norm_squared()).sum::<f64>()
    };

    let tol = 1e-11 * (1.0 + wn);
    let scale = ggt.trace().max(1e-12);
    let mut lambda = Vector6::zeros();
    let (mut fs, mut js) = primal(&lambda);
    let mut value = dual(&lambda, &fs);
    let max_iter = 500;
    for it in 0..max_iter {
        let grad = w - wrench_of(&fs);
        let res = grad.norm();
        if res <= tol {
            return Ok(ContactForces {
                forces: fs,
                iterations: it,
                residual: res,
            });
        }
        // H = G J Gᵀ
        let mut h = Matrix6::zeros();
        for (i, c) in cs.contacts.iter().enumerate() {
            let mut gi = nalgebra::Matrix6x3::zeros();
            gi.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
            gi.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&skew(&(c.position - cs.com)));
            h += gi * js[i] * gi.transpose();
        }
        let reg = (1e-12 * scale).max(1e-3 * res.min(1.0) * scale * 1e-3);
        let mut step = None;
        for boost in [1.0, 1e3, 1e6] {
            let hr = h + Matrix6::identity() * reg * boost;
            if let Some(chol) = hr.cholesky() {
                step = Some(chol.solve(&grad));
                break;
            }
        }
        let dir = match step {
            Some(d) if d.dot(&grad) > 0.0 => d,
            _ => grad / scale,
        };
        let slope = dir.dot(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = lambda + dir * t;
            let (cf, cj) = primal(&cand);
            let cv = dual(&cand, &cf);
            // near the optimum the dual value change drowns in roundoff, so a
            // residual decrease also counts as progress
            let shrinks = || (w - wrench_of(&cf)).norm() < (1.0 - 1e-4 * t) * res;
            if cv >= value + 1e-4 * t * slope || shrinks() {
                lambda = cand;
                fs = cf;
                js = cj;
                value = cv;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // stalled: gradient step
            let cand = lambda + grad / scale;
            let (cf, cj) = primal(&cand);
            lambda = cand;
            value = dual(&lambda, &cf);
            fs = cf;
            js = cj;
        }
        if !lambda.iter().all(|x| x.is_finite()) || lambda.norm() > 1e12 * (1.0 + wn) {
            return Err(MetricsError::Infeasible {
                residual: res,
                iterations: it + 1,
            });
        }
    }
    let res = (w - wrench_of(&fs)).norm();
    if res <= 1e-6 * (1.0 + wn) {
        return Ok(ContactForces {
            forces: fs,
            iterations: max_iter,
            residual: res,
        });
    }
    Err(MetricsError::Infeasible {
        residual: res,
        iterations: max_iter,
    })
}

/// Largest optimal contact force relative to the gravity force magnitude.
pub fn f_max_of(cs: &ContactSet, forces: &ContactForces) -> Result<f64, MetricsError> {
    let fg = cs.f_ext.fixed_rows::<3>(0).norm();
    if fg == 0.0 {
        return Err(MetricsError::ZeroGravity);
    }
    Ok(forces.forces.iter().map(|f| f.norm()).fold(0.0, f64::max) / fg)
}

pub fn f_max(cs: &ContactSet) -> Result<f64, MetricsError> {
    let forces = solve_contact_forces(cs, DEFAULT_EPSILON)?;
    f_max_of(cs, &forces)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub omega: f64,
    pub msv: f64,
    pub f_max: Option<f64>,
    pub per_contact_forces: Option<Vec<Vector3<f64>>>,
    pub solver_iterations: Option<usize>,
    /// Solver error text when `f_max` is absent.
    pub error: Option<String>,
}

pub fn evaluate(cs: &ContactSet) -> Result<MetricReport, MetricsError> {
    cs.validate()?;
    let g = grasp_matrix(cs);
    let mut report = MetricReport {
        omega: omega(cs),
        msv: min_singular_value(&g),
        f_max: None,
        per_contact_forces: None,
        solver_iterations: None,
        error: None,
    };
    match solve_contact_forces(cs, DEFAULT_EPSILON).and_then(|f| Ok((f_max_of(cs, &f)?, f))) {
        Ok((fm, f)) => {
            report.f_max = Some(fm);
            report.solver_iterations = Some(f.iterations);
            report.per_contact_forces = Some(f.forces);
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    Ok(report)
}

/// The two finger contacts of a grasp on `mesh` (world frame): rays from
/// each finger toward the grasp centre along the closing axis. Normals are
/// the inward surface normals of the hit triangles.
pub fn contacts_from_grasp(
    grasp: &GraspPose,
    mesh: &Mesh,
    max_opening: f64,
    mu: f64,
) -> Result<[Contact; 2], MetricsError> {
    let x = grasp.closing_axis();
    let half = max_opening * 0.5;
    let mut out = [Contact {
        position: Vector3::zeros(),
        normal: Vector3::z(),
        mu,
    }; 2];
    for (k, side) in [1.0, -1.0].into_iter().enumerate() {
        let origin = grasp.translation + x * (side * half);
        let dir = -x * side;
        let hit = mesh
            .ray_cast(&origin, &dir)
            .filter(|h| h.distance <= max_opening)
            .ok_or_else(|| {
                MetricsError::NoContact(format!("finger {} closes on nothing", k + 1))
            })?;
        out[k] = Contact {
            position: origin + dir * hit.distance,
            normal: -mesh.triangle_normal(hit.triangle),
            mu,
        };
    }
    Ok(out)
}
