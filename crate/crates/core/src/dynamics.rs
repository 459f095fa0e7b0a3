//! Planar rigid-body model of the three-link chain.
//!
//! Joint 1 pins the holding arm to the bar (unactuated), joint 2 is the
//! holding shoulder and joint 3 the swing shoulder. Link directions are
//! measured as absolute angles from the downward vertical:
//!
//! ```text
//! θ1 = q1,  θ2 = q1 + q2,  θ3 = q1 + q2 + q3 + π,   dir(θ) = (sin θ, −cos θ)
//! ```
//!
//! so `q = 0` is the folded home posture with both hands at the bar
//! (exactly so when the body length is zero). Positions are expressed in
//! the frame of the holding bar, X forward and Z up.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x2, Matrix6, Matrix6x2, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type JointConfig = Vector3<f64>;
pub type ControlInput = Vector2<f64>;
pub type StateVector = Vector6<f64>;
pub type Point = Vector2<f64>;

/// Step used for the central-difference discrete linearization.
pub const LINEARIZATION_STEP: f64 = 1e-6;

fn default_gravity() -> f64 {
    9.81
}

/// Physical description of the robot. Both arms share one set of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    pub arm_length: f64,
    pub arm_mass: f64,
    /// Distance of the arm COM from its proximal joint.
    pub arm_com_offset: f64,
    /// Planar inertia about the arm COM.
    pub arm_inertia: f64,
    pub body_length: f64,
    pub body_mass: f64,
    /// Distance of the body COM from the holding shoulder.
    pub body_com_offset: f64,
    pub body_inertia: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Symmetric shoulder torque bound; `None` means unlimited.
    #[serde(default)]
    pub torque_limit: Option<f64>,
}

impl RobotParams {
    /// The built robot: 309.8 mm arms of 0.384 kg, an 81.82 mm body of
    /// 2.111 kg, and the CAD "(X)" inertias. COMs sit at mid-length.
    pub fn paper_robot() -> Self {
        let arm_length = 0.3098;
        let body_length = 0.08182;
        Self {
            arm_length,
            arm_mass: 0.384,
            arm_com_offset: arm_length / 2.0,
            arm_inertia: 0.001694,
            body_length,
            body_mass: 2.111,
            body_com_offset: body_length / 2.0,
            body_inertia: 0.01712,
            gravity: 9.81,
            torque_limit: None,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.body_mass + 2.0 * self.arm_mass
    }

    /// Maximum hand distance from the bar.
    pub fn reach(&self) -> f64 {
        2.0 * self.arm_length + self.body_length
    }

    /// Parameters of the same robot with the chain traversed from the other
    /// hand. Only the body COM offset changes, because it is measured from
    /// the holding shoulder. Arm offsets are measured from each arm's
    /// proximal joint, so the result describes the same physical robot only
    /// when [`RobotParams::has_symmetric_arms`] holds.
    pub fn reversed(&self) -> Self {
        Self {
            body_com_offset: self.body_length - self.body_com_offset,
            ..*self
        }
    }

    /// Whether each arm's COM sits at mid-length, which is what lets the two
    /// arms trade roles without changing the model.
    pub fn has_symmetric_arms(&self) -> bool {
        (self.arm_com_offset - self.arm_length / 2.0).abs() <= 1e-12 * self.arm_length.max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, field: &'static str, reason: impl Into<String>) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParams {
                    field,
                    reason: reason.into(),
                })
            }
        }
        let fields = [
            ("arm_length", self.arm_length),
            ("arm_mass", self.arm_mass),
            ("arm_com_offset", self.arm_com_offset),
            ("arm_inertia", self.arm_inertia),
            ("body_length", self.body_length),
            ("body_mass", self.body_mass),
            ("body_com_offset", self.body_com_offset),
            ("body_inertia", self.body_inertia),
            ("gravity", self.gravity),
        ];
        for (field, value) in fields {
            check(value.is_finite(), field, "must be finite")?;
        }
        check(self.arm_length > 0.0, "arm_length", "must be > 0")?;
        check(self.body_length >= 0.0, "body_length", "must be >= 0")?;
        check(self.arm_mass > 0.0, "arm_mass", "must be > 0")?;
        check(self.body_mass > 0.0, "body_mass", "must be > 0")?;
        check(self.arm_inertia >= 0.0, "arm_inertia", "must be >= 0")?;
        check(self.body_inertia >= 0.0, "body_inertia", "must be >= 0")?;
        check(
            (0.0..=self.arm_length).contains(&self.arm_com_offset),
            "arm_com_offset",
            format!("must lie in [0, arm_length = {}]", self.arm_length),
        )?;
        check(
            (0.0..=self.body_length).contains(&self.body_com_offset),
            "body_com_offset",
            format!("must lie in [0, body_length = {}]", self.body_length),
        )?;
        // A zero-length body without rotational inertia leaves q2 massless.
        check(
            self.body_length > 0.0 || self.body_inertia > 0.0,
            "body_inertia",
            "must be > 0 when body_length is 0",
        )?;
        if let Some(limit) = self.torque_limit {
            check(
                limit > 0.0 && !limit.is_nan(),
                "torque_limit",
                "must be > 0",
            )?;
        }
        Ok(())
    }

    pub fn saturate(&self, u: ControlInput) -> ControlInput {
        match self.torque_limit {
            Some(limit) => u.map(|v| v.clamp(-limit, limit)),
            None => u,
        }
    }

    fn chain(&self) -> Chain {
        Chain {
            length: [self.arm_length, self.body_length, self.arm_length],
            com: [
                self.arm_com_offset,
                self.body_com_offset,
                self.arm_com_offset,
            ],
            mass: [self.arm_mass, self.body_mass, self.arm_mass],
            inertia: [self.arm_inertia, self.body_inertia, self.arm_inertia],
        }
    }
}

/// Joint positions and velocities, `x = [q, q̇]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState {
    pub q: JointConfig,
    pub dq: Vector3<f64>,
}

impl FullState {
    pub fn new(q: JointConfig, dq: Vector3<f64>) -> Self {
        Self { q, dq }
    }

    pub fn at_rest(q: JointConfig) -> Self {
        Self {
            q,
            dq: Vector3::zeros(),
        }
    }

    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            q: x.fixed_rows::<3>(0).into_owned(),
            dq: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.q);
        x.fixed_rows_mut::<3>(3).copy_from(&self.dq);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.dq.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Selection matrix mapping the two shoulder torques onto the joints.
pub fn actuation_matrix() -> Matrix3x2<f64> {
    Matrix3x2::new(0.0, 0.0, 1.0, 0.0, 0.0, 1.0)
}

/// `θ = S q + (0, 0, π)`.
fn angle_map() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0)
}

pub fn link_angles(q: &JointConfig) -> Vector3<f64> {
    Vector3::new(q[0], q[0] + q[1], q[0] + q[1] + q[2] + PI)
}

/// Sines and cosines of the absolute angles. The half-turn on link 3 is
/// applied as an exact sign flip so the home posture has no rounding.
#[derive(Clone, Copy)]
struct LinkTrig {
    sin: [f64; 3],
    cos: [f64; 3],
}

impl LinkTrig {
    fn new(q: &JointConfig) -> Self {
        let (s1, c1) = q[0].sin_cos();
        let (s2, c2) = (q[0] + q[1]).sin_cos();
        let (s3, c3) = (q[0] + q[1] + q[2]).sin_cos();
        Self {
            sin: [s1, s2, -s3],
            cos: [c1, c2, -c3],
        }
    }

    /// cos(θj − θk)
    #[inline]
    fn cos_diff(&self, j: usize, k: usize) -> f64 {
        if j == k {
            1.0
        } else {
            self.cos[j] * self.cos[k] + self.sin[j] * self.sin[k]
        }
    }

    /// sin(θj − θk)
    #[inline]
    fn sin_diff(&self, j: usize, k: usize) -> f64 {
        if j == k {
            0.0
        } else {
            self.sin[j] * self.cos[k] - self.cos[j] * self.sin[k]
        }
    }

    /// Unit vector along link j, from its proximal to its distal end.
    #[inline]
    fn dir(&self, j: usize) -> Point {
        Point::new(self.sin[j], -self.cos[j])
    }

    /// `d dir / dθ` for link j.
    #[inline]
    fn dir_prime(&self, j: usize) -> Point {
        Point::new(self.cos[j], self.sin[j])
    }
}

struct Chain {
    length: [f64; 3],
    com: [f64; 3],
    mass: [f64; 3],
    inertia: [f64; 3],
}

impl Chain {
    /// Lever of absolute angle `j` in the COM position of link `i`.
    #[inline]
    fn lever(&self, i: usize, j: usize) -> f64 {
        use std::cmp::Ordering::*;
        match j.cmp(&i) {
            Less => self.length[j],
            Equal => self.com[i],
            Greater => 0.0,
        }
    }

    /// Σ_i m_i λ_ij λ_ik, the coefficient of cos(θj − θk) in the inertia.
    fn coupling(&self, j: usize, k: usize) -> f64 {
        (0..3)
            .map(|i| self.mass[i] * self.lever(i, j) * self.lever(i, k))
            .sum()
    }

    /// Σ_i m_i λ_ij, the gravity moment arm of absolute angle j.
    fn moment(&self, j: usize) -> f64 {
        (0..3).map(|i| self.mass[i] * self.lever(i, j)).sum()
    }
}

/// Inertia matrix in absolute-angle coordinates.
fn absolute_mass_matrix(chain: &Chain, trig: &LinkTrig) -> Matrix3<f64> {
    Matrix3::from_fn(|j, k| {
        let c = chain.coupling(j, k) * trig.cos_diff(j, k);
        if j == k {
            c + chain.inertia[j]
        } else {
            c
        }
    })
}

pub fn mass_matrix(params: &RobotParams, q: &JointConfig) -> Matrix3<f64> {
    let s = angle_map();
    let m_abs = absolute_mass_matrix(&params.chain(), &LinkTrig::new(q));
    let m = s.transpose() * m_abs * s;
    // Symmetrize so M = Mᵀ holds bitwise.
    (m + m.transpose()) * 0.5
}

/// `∂M/∂q_k` for k = 1, 2, 3.
pub fn mass_matrix_partials(params: &RobotParams, q: &JointConfig) -> [Matrix3<f64>; 3] {
    let chain = params.chain();
    let trig = LinkTrig::new(q);
    let s = angle_map();
    // ∂M_abs[j][k]/∂θ_l = −c_jk sin(θj − θk) (δ_lj − δ_lk)
    let by_angle: [Matrix3<f64>; 3] = std::array::from_fn(|l| {
        Matrix3::from_fn(|j, k| {
            let weight = (l == j) as i32 - (l == k) as i32;
            if weight == 0 {
                0.0
            } else {
                -(weight as f64) * chain.coupling(j, k) * trig.sin_diff(j, k)
            }
        })
    });
    std::array::from_fn(|m| {
        let d_abs = (0..3).fold(Matrix3::zeros(), |acc, l| acc + by_angle[l] * s[(l, m)]);
        s.transpose() * d_abs * s
    })
}

/// Christoffel-form Coriolis matrix; `C(q, q̇)·q̇` is the velocity-product
/// torque and `Ṁ − 2C` is skew-symmetric.
pub fn coriolis_matrix(params: &RobotParams, q: &JointConfig, dq: &Vector3<f64>) -> Matrix3<f64> {
    let dm = mass_matrix_partials(params, q);
    Matrix3::from_fn(|i, j| {
        (0..3)
            .map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * dq[k])
            .sum()
    })
}

pub fn coriolis_vector(params: &RobotParams, q: &JointConfig, dq: &Vector3<f64>) -> Vector3<f64> {
    coriolis_matrix(params, q, dq) * dq
}

/// Gravitational potential energy, zero at `q = 0`.
pub fn potential_energy(params: &RobotParams, q: &JointConfig) -> f64 {
    let chain = params.chain();
    let height =
        |trig: &LinkTrig| -> f64 { (0..3).map(|j| -chain.moment(j) * trig.cos[j]).sum::<f64>() };
    let reference = LinkTrig::new(&JointConfig::zeros());
    params.gravity * (height(&LinkTrig::new(q)) - height(&reference))
}

/// `G(q) = ∂V/∂q`.
pub fn gravity_vector(params: &RobotParams, q: &JointConfig) -> Vector3<f64> {
    let chain = params.chain();
    let trig = LinkTrig::new(q);
    let d_abs = Vector3::from_fn(|j, _| params.gravity * chain.moment(j) * trig.sin[j]);
    angle_map().transpose() * d_abs
}

pub fn inverse_dynamics(
    params: &RobotParams,
    q: &JointConfig,
    dq: &Vector3<f64>,
    ddq: &Vector3<f64>,
) -> Vector3<f64> {
    mass_matrix(params, q) * ddq + coriolis_vector(params, q, dq) + gravity_vector(params, q)
}

/// Solves `M q̈ + C q̇ + G = B u + τ_ext` for `q̈`.
pub fn forward_dynamics(
    params: &RobotParams,
    x: &FullState,
    u: &ControlInput,
    tau_ext: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let m = mass_matrix(params, &x.q);
    let rhs = actuation_matrix() * u + tau_ext
        - coriolis_vector(params, &x.q, &x.dq)
        - gravity_vector(params, &x.q);
    let chol = m.cholesky().ok_or(Error::LinearSolveFailure)?;
    Ok(chol.solve(&rhs))
}

/// Positions along the chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainPoints {
    /// The bar pivot, always the origin of the base frame.
    pub joint1: Point,
    pub shoulder1: Point,
    pub shoulder2: Point,
    pub hand: Point,
}

pub fn fk_all(params: &RobotParams, q: &JointConfig) -> ChainPoints {
    let trig = LinkTrig::new(q);
    let joint1 = Point::zeros();
    let shoulder1 = joint1 + params.arm_length * trig.dir(0);
    let shoulder2 = shoulder1 + params.body_length * trig.dir(1);
    let hand = shoulder2 + params.arm_length * trig.dir(2);
    ChainPoints {
        joint1,
        shoulder1,
        shoulder2,
        hand,
    }
}

pub fn fk_hand(params: &RobotParams, q: &JointConfig) -> Point {
    fk_all(params, q).hand
}

/// Absolute-angle Jacobian columns `l_j · dir'(θ_j)`.
fn angle_jacobian(params: &RobotParams, trig: &LinkTrig) -> Matrix2x3<f64> {
    let lengths = params.chain().length;
    Matrix2x3::from_columns(&[0, 1, 2].map(|j| lengths[j] * trig.dir_prime(j)))
}

pub fn jacobian_hand(params: &RobotParams, q: &JointConfig) -> Matrix2x3<f64> {
    angle_jacobian(params, &LinkTrig::new(q)) * angle_map()
}

/// `J̇(q, q̇)`, so that `J̇·q̇` is the velocity-product term of the hand
/// acceleration.
pub fn jacobian_dot(params: &RobotParams, q: &JointConfig, dq: &Vector3<f64>) -> Matrix2x3<f64> {
    let trig = LinkTrig::new(q);
    let dtheta = angle_map() * dq;
    let lengths = params.chain().length;
    // d/dt dir'(θ) = −dir(θ) θ̇
    let cols = [0, 1, 2].map(|j| -lengths[j] * dtheta[j] * trig.dir(j));
    Matrix2x3::from_columns(&cols) * angle_map()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub potential: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

pub fn total_energy(params: &RobotParams, x: &FullState) -> Energy {
    let kinetic = 0.5 * x.dq.dot(&(mass_matrix(params, &x.q) * x.dq));
    Energy {
        kinetic,
        potential: potential_energy(params, &x.q),
    }
}

/// Continuous-time vector field `ẋ = f(x, u)` with an external joint torque.
pub fn state_derivative(
    params: &RobotParams,
    x: &StateVector,
    u: &ControlInput,
    tau_ext: &Vector3<f64>,
) -> Result<StateVector> {
    let state = FullState::from_vector(x);
    let ddq = forward_dynamics(params, &state, u, tau_ext)?;
    Ok(FullState::new(state.dq, ddq).to_vector())
}

/// One integration step with a constant external torque.
pub fn step(
    params: &RobotParams,
    x: &FullState,
    u: &ControlInput,
    dt: f64,
    method: Integrator,
    tau_ext: &Vector3<f64>,
) -> Result<FullState> {
    step_with(params, x, u, dt, method, |_, _| *tau_ext)
}

/// One integration step where the external torque may depend on the stage
/// time offset within the step and the stage state.
pub fn step_with<F>(
    params: &RobotParams,
    x: &FullState,
    u: &ControlInput,
    dt: f64,
    method: Integrator,
    tau_ext: F,
) -> Result<FullState>
where
    F: Fn(f64, &FullState) -> Vector3<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidProblem(format!(
            "step size must be > 0, got {dt}"
        )));
    }
    let f = |offset: f64, xv: &StateVector| -> Result<StateVector> {
        let tau = tau_ext(offset, &FullState::from_vector(xv));
        state_derivative(params, xv, u, &tau)
    };
    let x0 = x.to_vector();
    let next = match method {
        Integrator::Euler => x0 + f(0.0, &x0)? * dt,
        Integrator::Rk4 => {
            let k1 = f(0.0, &x0)?;
            let k2 = f(0.5 * dt, &(x0 + k1 * (0.5 * dt)))?;
            let k3 = f(0.5 * dt, &(x0 + k2 * (0.5 * dt)))?;
            let k4 = f(dt, &(x0 + k3 * dt))?;
            x0 + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
        }
    };
    let next = FullState::from_vector(&next);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::NonFiniteState { time: None })
    }
}

/// Euler step on raw state vectors, the discretization used by the planner.
pub fn euler_step(
    params: &RobotParams,
    x: &StateVector,
    u: &ControlInput,
    dt: f64,
) -> Result<StateVector> {
    let next = x + state_derivative(params, x, u, &Vector3::zeros())? * dt;
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState { time: None })
    }
}

/// Jacobians `(∂x'/∂x, ∂x'/∂u)` of the Euler step by central differences.
pub fn linearize_discrete(
    params: &RobotParams,
    x: &FullState,
    u: &ControlInput,
    dt: f64,
) -> Result<(Matrix6<f64>, Matrix6x2<f64>)> {
    central_difference_jacobians(&x.to_vector(), u, |xv, uv| euler_step(params, xv, uv, dt))
}

pub(crate) fn central_difference_jacobians<F>(
    x: &StateVector,
    u: &ControlInput,
    step: F,
) -> Result<(Matrix6<f64>, Matrix6x2<f64>)>
where
    F: Fn(&StateVector, &ControlInput) -> Result<StateVector>,
{
    let h = LINEARIZATION_STEP;
    let mut a = Matrix6::zeros();
    for i in 0..6 {
        let mut plus = *x;
        let mut minus = *x;
        plus[i] += h;
        minus[i] -= h;
        a.set_column(i, &((step(&plus, u)? - step(&minus, u)?) / (2.0 * h)));
    }
    let mut b = Matrix6x2::zeros();
    for i in 0..2 {
        let mut plus = *u;
        let mut minus = *u;
        plus[i] += h;
        minus[i] -= h;
        b.set_column(i, &((step(x, &plus)? - step(x, &minus)?) / (2.0 * h)));
    }
    Ok((a, b))
}
