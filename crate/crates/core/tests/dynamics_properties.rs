mod common;

use brachiation::dynamics::*;
use common::*;
use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use proptest::prelude::*;

const H: f64 = 1e-6;

/// `Ṁ` by central differences of M along the velocity.
fn mass_matrix_rate(params: &RobotParams, q: &JointConfig, dq: &Vector3<f64>) -> Matrix3<f64> {
    (mass_matrix(params, &(q + dq * H)) - mass_matrix(params, &(q - dq * H))) / (2.0 * H)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mass_matrix_is_symmetric_positive_definite(params in robot(), q in joint_config()) {
        let m = mass_matrix(&params, &q);
        prop_assert_eq!(m, m.transpose());
        let eig = m.symmetric_eigenvalues();
        prop_assert!(eig.min() > 0.0, "eigenvalues {eig}");
    }

    #[test]
    fn mdot_minus_two_c_is_skew(params in robot(), x in state()) {
        let n = mass_matrix_rate(&params, &x.q, &x.dq) - 2.0 * coriolis_matrix(&params, &x.q, &x.dq);
        let scale = 1.0 + x.dq.norm();
        prop_assert!((n + n.transpose()).amax() <= 1e-8 * scale, "{}", n + n.transpose());
    }

    #[test]
    fn gravity_is_potential_gradient(params in robot(), q in joint_config()) {
        let g = gravity_vector(&params, &q);
        let fd = gradient(|q| potential_energy(&params, q), &q, H);
        prop_assert!((g - fd).norm() <= 1e-6 * g.norm().max(1e-3), "{g} vs {fd}");
    }

    #[test]
    fn coriolis_matches_lagrangian_residual(params in robot(), x in state()) {
        // C q̇ = Ṁ q̇ − ½ ∂(q̇ᵀ M q̇)/∂q
        let kinetic_gradient = gradient(|q| x.dq.dot(&(mass_matrix(&params, q) * x.dq)), &x.q, H);
        let expected = mass_matrix_rate(&params, &x.q, &x.dq) * x.dq - 0.5 * kinetic_gradient;
        let c = coriolis_vector(&params, &x.q, &x.dq);
        prop_assert!((c - expected).norm() <= 1e-6 * (1.0 + c.norm()), "{c} vs {expected}");
    }

    #[test]
    fn jacobian_matches_kinematics(params in robot(), q in joint_config()) {
        let j = jacobian_hand(&params, &q);
        let fd = Matrix2x3::from_fn(|r, c| {
            let mut plus = q;
            let mut minus = q;
            plus[c] += H;
            minus[c] -= H;
            (fk_hand(&params, &plus) - fk_hand(&params, &minus))[r] / (2.0 * H)
        });
        prop_assert!((j - fd).amax() <= 1e-8, "{j} vs {fd}");
    }

    #[test]
    fn jacobian_rate_matches_difference(params in robot(), x in state()) {
        let jd = jacobian_dot(&params, &x.q, &x.dq);
        let fd = (jacobian_hand(&params, &(x.q + x.dq * H)) - jacobian_hand(&params, &(x.q - x.dq * H)))
            / (2.0 * H);
        prop_assert!((jd - fd).amax() <= 1e-7 * (1.0 + x.dq.norm()), "{jd} vs {fd}");
    }

    #[test]
    fn forward_inverts_inverse_dynamics(params in robot(), x in state(), u in (-3.0..3.0f64, -3.0..3.0f64)) {
        let u = Vector2::new(u.0, u.1);
        let ddq = forward_dynamics(&params, &x, &u, &Vector3::zeros()).unwrap();
        let tau = inverse_dynamics(&params, &x.q, &x.dq, &ddq);
        let applied = actuation_matrix() * u;
        prop_assert!((tau - applied).norm() <= 1e-9 * (1.0 + tau.norm()));
    }

    #[test]
    fn linearization_matches_euler_structure(params in robot(), x in state()) {
        let u = Vector2::new(0.1, -0.2);
        let dt = 0.002;
        let (a, b) = linearize_discrete(&params, &x, &u, dt).unwrap();
        prop_assert!((a.fixed_view::<3, 3>(0, 0) - Matrix3::identity()).amax() <= 1e-9);
        prop_assert!((a.fixed_view::<3, 3>(0, 3) - Matrix3::identity() * dt).amax() <= 1e-9);
        prop_assert!(b.fixed_view::<3, 2>(0, 0).amax() <= 1e-12);
    }
}

#[test]
fn free_swing_conserves_energy() {
    let params = paper();
    let mut x = FullState::at_rest(JointConfig::new(0.9, 0.4, -1.1));
    let e0 = total_energy(&params, &x).total();
    let mut drift: f64 = 0.0;
    for _ in 0..20_000 {
        x = step(
            &params,
            &x,
            &Vector2::zeros(),
            1e-4,
            Integrator::Rk4,
            &Vector3::zeros(),
        )
        .unwrap();
        let e = total_energy(&params, &x).total();
        drift = drift.max((e - e0).abs() / e0.abs().max(1.0));
    }
    assert!(drift < 1e-4, "relative drift {drift}");
}

#[test]
fn constant_torque_work_balances_energy() {
    // With u constant, ∫ q̇ᵀ B u dt = u₂ Δq₂ + u₃ Δq₃ exactly.
    let params = paper();
    let u = Vector2::new(0.15, -0.1);
    let start = FullState::new(
        JointConfig::new(0.3, -0.2, 0.8),
        Vector3::new(0.5, 0.0, -1.0),
    );
    let mut x = start;
    for _ in 0..10_000 {
        x = step(&params, &x, &u, 1e-4, Integrator::Rk4, &Vector3::zeros()).unwrap();
    }
    let delta_e = total_energy(&params, &x).total() - total_energy(&params, &start).total();
    let work = u[0] * (x.q[1] - start.q[1]) + u[1] * (x.q[2] - start.q[2]);
    assert!((delta_e - work).abs() < 1e-3, "ΔE {delta_e} vs work {work}");
}

#[test]
fn euler_converges_at_first_order() {
    let params = paper();
    let x = FullState::new(
        JointConfig::new(0.4, 0.1, -0.9),
        Vector3::new(0.3, -0.2, 0.5),
    );
    let u = Vector2::new(0.05, 0.02);
    let defect = |dt: f64| {
        let full = step(&params, &x, &u, dt, Integrator::Euler, &Vector3::zeros()).unwrap();
        let half = step(
            &params,
            &x,
            &u,
            dt / 2.0,
            Integrator::Euler,
            &Vector3::zeros(),
        )
        .unwrap();
        let halves = step(
            &params,
            &half,
            &u,
            dt / 2.0,
            Integrator::Euler,
            &Vector3::zeros(),
        )
        .unwrap();
        (full.to_vector() - halves.to_vector()).norm()
    };
    // The one-step defect between dt and two dt/2 steps is O(dt²).
    let ratio = defect(1e-3) / defect(5e-4);
    assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn rk4_is_bitwise_repeatable() {
    let params = paper();
    let run = || {
        let mut x = FullState::at_rest(JointConfig::new(0.7, 0.0, -1.2));
        for _ in 0..1000 {
            x = step(
                &params,
                &x,
                &Vector2::new(0.1, 0.0),
                1e-4,
                Integrator::Rk4,
                &Vector3::zeros(),
            )
            .unwrap();
        }
        x
    };
    assert_eq!(run(), run());
}
