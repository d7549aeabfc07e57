//! Reference solver for the contact-force program with each friction cone
//! replaced by an inscribed 8-edge pyramid.

use collab_core::metrics::{effective_mu, grasp_matrix, ContactSet};
use nalgebra::{DMatrix, DVector, Vector3};

pub const EDGES: usize = 8;

/// Lawson–Hanson non-negative least squares: min ‖A x − b‖, x ≥ 0.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    for _ in 0..3 * n {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match cand {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(&idx);
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-14)
                .expect("svd solve");
            let mut s = DVector::zeros(n);
            for (k, &j) in idx.iter().enumerate() {
                s[j] = sol[k];
            }
            if idx.iter().all(|&j| s[j] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &idx {
                if s[j] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - s[j]));
                }
            }
            x += (s - &x) * alpha;
            for &j in &idx {
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = n.cross(&a).normalize();
    (t1, n.cross(&t1))
}

/// Columns: the pyramid edge generators of every contact (3n × 8n).
pub fn edge_matrix(cs: &ContactSet) -> DMatrix<f64> {
    let n = cs.contacts.len();
    let mut e = DMatrix::zeros(3 * n, EDGES * n);
    for (i, c) in cs.contacts.iter().enumerate() {
        let mu = effective_mu(c.mu);
        let (t1, t2) = tangent_basis(&c.normal);
        for k in 0..EDGES {
            let phi = k as f64 * std::f64::consts::TAU / EDGES as f64;
            let g = c.normal + (t1 * phi.cos() + t2 * phi.sin()) * mu;
            e.fixed_view_mut::<3, 1>(3 * i, EDGES * i + k).copy_from(&g);
        }
    }
    e
}

/// Optimal fᵀf over the pyramids, or `None` when no pyramid solution meets
/// the wrench equality.
pub fn pyramid_optimum(cs: &ContactSet) -> Option<f64> {
    let e = edge_matrix(cs);
    let ge = grasp_matrix(cs) * &e;
    let w = DVector::from_column_slice(cs.f_ext.as_slice());
    let weight = 1e4;
    let rows = 6 + e.nrows();
    let mut m = DMatrix::zeros(rows, e.ncols());
    m.view_mut((0, 0), (6, e.ncols()))
        .copy_from(&(&ge * weight));
    m.view_mut((6, 0), (e.nrows(), e.ncols())).copy_from(&e);
    let mut b = DVector::zeros(rows);
    b.rows_mut(0, 6).copy_from(&(&w * weight));
    let a = nnls(&m, &b);

    // re-solve exactly on the support found by the penalised problem
    let support: Vec<usize> = (0..a.len())
        .filter(|&j| a[j] > 1e-12 * (1.0 + w.norm()))
        .collect();
    if support.is_empty() {
        return (w.norm() < 1e-12).then_some(0.0);
    }
    let es = e.select_columns(&support);
    let gs = ge.select_columns(&support);
    let s = support.len();
    let mut kkt = DMatrix::zeros(s + 6, s + 6);
    kkt.view_mut((0, 0), (s, s))
        .copy_from(&(es.transpose() * &es * 2.0));
    kkt.view_mut((0, s), (s, 6)).copy_from(&gs.transpose());
    kkt.view_mut((s, 0), (6, s)).copy_from(&gs);
    let mut rhs = DVector::zeros(s + 6);
    rhs.rows_mut(s, 6).copy_from(&w);
    let sol = kkt.svd(true, true).solve(&rhs, 1e-13).ok()?;
    let x = sol.rows(0, s).into_owned();
    let residual = (&gs * &x - &w).norm();
    if x.iter().all(|v| *v >= -1e-12) && residual <= 1e-9 * (1.0 + w.norm()) {
        return Some((&es * &x).norm_squared());
    }
    let r = (&ge * &a - &w).norm();
    (r <= 1e-6 * (1.0 + w.norm())).then(|| (&e * &a).norm_squared())
}
