mod common;

use collab_core::geometry::random_rotation;
use collab_core::metrics::{
    grasp_matrix, in_cone, min_singular_value, omega, solve_contact_forces, Contact, ContactSet,
    CONE_MARGIN, DEFAULT_EPSILON,
};
use common::pyramid::pyramid_optimum;
use nalgebra::{DVector, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Contacts on a sphere around the origin with normals tilted toward it,
/// loaded by the wrench of a random interior force set (so it is feasible).
fn random_feasible(rng: &mut ChaCha8Rng, n: usize) -> ContactSet {
    let mut contacts = Vec::new();
    let mut f0 = Vec::new();
    for _ in 0..n {
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let p = dir * rng.random_range(0.2..1.0);
        let tilt = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let normal = (-dir + tilt).normalize();
        let mu = rng.random_range(0.3..1.0);
        // a force well inside the cone
        let t = normal.cross(&Vector3::new(0.3, 0.5, 0.7)).normalize();
        let f = (normal + t * (mu * rng.random_range(0.0..0.8))) * rng.random_range(0.5..20.0);
        contacts.push(Contact {
            position: p,
            normal,
            mu,
        });
        f0.push(f);
    }
    let mut cs = ContactSet {
        contacts,
        com: Vector3::zeros(),
        f_ext: Vector6::zeros(),
    };
    let g = grasp_matrix(&cs);
    let stacked = DVector::from_iterator(3 * n, f0.iter().flat_map(|f| f.iter().copied()));
    cs.f_ext = Vector6::from_column_slice((g * stacked).as_slice());
    cs
}

#[test]
fn solver_beats_pyramid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..60 {
        let n = 2 + trial % 3;
        let cs = random_feasible(&mut rng, n);
        let Ok(f) = solve_contact_forces(&cs, DEFAULT_EPSILON) else {
            // rank-deficient two-contact sets may fall outside the attainable span
            assert_eq!(n, 2, "trial {trial}");
            continue;
        };
        let g = grasp_matrix(&cs);
        let wn = cs.f_ext.norm();
        let res = (&g * f.stacked() - DVector::from_column_slice(cs.f_ext.as_slice())).norm();
        assert!(res <= 1e-6 * (1.0 + wn), "trial {trial}: residual {res}");
        for (fi, c) in f.forces.iter().zip(&cs.contacts) {
            assert!(in_cone(fi, c, CONE_MARGIN * 0.5), "trial {trial}");
        }
        let oracle = pyramid_optimum(&cs).expect("interior load is feasible for the pyramid");
        assert!(
            f.squared_norm() <= oracle * (1.0 + 1e-7) + 1e-9,
            "trial {trial}: {} > {oracle}",
            f.squared_norm()
        );
    }
}

#[test]
fn extra_contact_never_increases_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let cs = random_feasible(&mut rng, 3);
        let base = solve_contact_forces(&cs, DEFAULT_EPSILON)
            .unwrap()
            .squared_norm();
        let mut more = cs.clone();
        let extra = random_feasible(&mut rng, 1).contacts[0];
        more.contacts.push(extra);
        let grown = solve_contact_forces(&more, DEFAULT_EPSILON)
            .unwrap()
            .squared_norm();
        assert!(grown <= base * (1.0 + 1e-7) + 1e-9, "{grown} > {base}");
    }
}

proptest! {
    #[test]
    fn omega_and_msv_rotation_invariant(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = random_feasible(&mut rng, n);
        let r = random_rotation(&mut rng);
        let mut rot = cs.clone();
        for c in &mut rot.contacts {
            c.position = r * c.position;
            c.normal = r * c.normal;
        }
        prop_assert!((omega(&cs) - omega(&rot)).abs() < 1e-9);
        let a = min_singular_value(&grasp_matrix(&cs));
        let b = min_singular_value(&grasp_matrix(&rot));
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn grasp_matrix_matches_wrench_sum(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = random_feasible(&mut rng, n);
        let fs: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let stacked = DVector::from_iterator(3 * n, fs.iter().flat_map(|f| f.iter().copied()));
        let w = grasp_matrix(&cs) * stacked;
        let mut force = Vector3::zeros();
        let mut torque = Vector3::zeros();
        for (c, f) in cs.contacts.iter().zip(&fs) {
            force += f;
            torque += (c.position - cs.com).cross(f);
        }
        for k in 0..3 {
            prop_assert!((w[k] - force[k]).abs() < 1e-12);
            prop_assert!((w[k + 3] - torque[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_scaling_only_touches_torque_rows(seed in any::<u64>(), s in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = random_feasible(&mut rng, 3);
        let mut scaled = cs.clone();
        for c in &mut scaled.contacts {
            c.position *= s;
        }
        let force: Vector3<f64> = cs.contacts.iter().map(|c| c.normal).sum();
        let torque: Vector3<f64> = cs.contacts.iter().map(|c| c.position.cross(&c.normal)).sum();
        let expect = (force.norm_squared() + (torque * s).norm_squared()).sqrt();
        prop_assert!((omega(&scaled) - expect).abs() < 1e-9);
    }
}
