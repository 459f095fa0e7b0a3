//! Helpers and independent oracles shared by the integration tests.

#![allow(dead_code)]

use brachiation::dynamics::{FullState, JointConfig, RobotParams};
use brachiation::trajopt::{CostWeights, LinearPlant};
use nalgebra::{Matrix2, Matrix2x6, Matrix6, Vector2, Vector3, Vector6};
use proptest::prelude::*;

pub fn paper() -> RobotParams {
    RobotParams::paper_robot()
}

pub fn angle() -> impl Strategy<Value = f64> {
    -std::f64::consts::PI..std::f64::consts::PI
}

pub fn joint_config() -> impl Strategy<Value = JointConfig> {
    (angle(), angle(), angle()).prop_map(|(a, b, c)| JointConfig::new(a, b, c))
}

pub fn velocity() -> impl Strategy<Value = Vector3<f64>> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

pub fn state() -> impl Strategy<Value = FullState> {
    (joint_config(), velocity()).prop_map(|(q, dq)| FullState::new(q, dq))
}

/// Plausible robots around the paper design, including a body-less hub.
pub fn robot() -> impl Strategy<Value = RobotParams> {
    (
        0.1..0.6f64,
        0.1..2.0f64,
        0.0..0.5f64,
        0.2..5.0f64,
        0.3..0.7f64,
        0.3..0.7f64,
    )
        .prop_map(|(l, m, lb, mb, arm_frac, body_frac)| RobotParams {
            arm_length: l,
            arm_mass: m,
            arm_com_offset: arm_frac * l,
            arm_inertia: m * l * l / 12.0,
            body_length: lb,
            body_mass: mb,
            body_com_offset: body_frac * lb,
            body_inertia: mb * (lb * lb + 0.05) / 12.0,
            ..RobotParams::paper_robot()
        })
}

/// Central difference of a scalar function of a configuration.
pub fn gradient(f: impl Fn(&JointConfig) -> f64, q: &JointConfig, h: f64) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let mut plus = *q;
        let mut minus = *q;
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

/// Finite-horizon LQR with the optimizer's cost convention,
/// `Σ xᵀQx + uᵀRu + (x_N − x*)ᵀQf(x_N − x*)`, solved by the Riccati
/// recursion on `V_k(x) = xᵀP x + 2pᵀx + c`.
pub struct RiccatiSolution {
    /// `u_k = −K_k x_k − d_k`.
    pub gain: Vec<Matrix2x6<f64>>,
    pub offset: Vec<Vector2<f64>>,
    pub states: Vec<Vector6<f64>>,
    pub controls: Vec<Vector2<f64>>,
    pub cost: f64,
}

pub fn riccati(
    plant: &LinearPlant,
    weights: &CostWeights,
    x0: &Vector6<f64>,
    target: &Vector6<f64>,
    steps: usize,
) -> RiccatiSolution {
    let (a, b) = (plant.a, plant.b);
    let q = Matrix6::from_diagonal(&Vector6::from_row_slice(&weights.q));
    let r = Matrix2::from_diagonal(&Vector2::from_row_slice(&weights.r));
    let qf = Matrix6::from_diagonal(&Vector6::from_row_slice(&weights.qf));

    let mut p = qf;
    let mut p_lin = -(qf * target);
    let mut gain = vec![Matrix2x6::zeros(); steps];
    let mut offset = vec![Vector2::zeros(); steps];
    for k in (0..steps).rev() {
        let s = r + b.transpose() * p * b;
        let s_inv = s.try_inverse().expect("R + BᵀPB is invertible");
        let kk = s_inv * b.transpose() * p * a;
        let d = s_inv * b.transpose() * p_lin;
        let p_next = q + a.transpose() * p * a - a.transpose() * p * b * kk;
        let p_lin_next = a.transpose() * p_lin - a.transpose() * p * b * d;
        p = (p_next + p_next.transpose()) * 0.5;
        p_lin = p_lin_next;
        gain[k] = kk;
        offset[k] = d;
    }

    let mut x = *x0;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(steps);
    let mut cost = 0.0;
    for k in 0..steps {
        let u = -(gain[k] * x) - offset[k];
        cost += (x.transpose() * q * x)[0] + (u.transpose() * r * u)[0];
        x = a * x + b * u;
        states.push(x);
        controls.push(u);
    }
    let e = x - target;
    cost += (e.transpose() * qf * e)[0];
    RiccatiSolution {
        gain,
        offset,
        states,
        controls,
        cost,
    }
}
