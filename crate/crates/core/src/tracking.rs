//! Trajectory tracking: `u = u_config + α·u_task`.
//!
//! `u_config` runs a cascaded PID (position loop feeding the velocity loop)
//! on each shoulder. `u_task` linearizes the hand-position error
//! `y = p_d − FK(q)` through the actuated channels so that `ÿ = v` with
//! `v = −Kp y − Kd ẏ`, using a truncated pseudo-inverse of `−J M⁻¹ B`.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    actuation_matrix, coriolis_vector, fk_hand, gravity_vector, jacobian_dot, jacobian_hand,
    mass_matrix, ControlInput, FullState, JointConfig, Point, RobotParams,
};
use crate::error::{Error, Result};
use crate::trajopt::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidParams {
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    #[serde(default)]
    pub integral_limit: Option<f64>,
    #[serde(default)]
    pub output_limit: Option<f64>,
}

impl PidParams {
    pub fn p(kp: f64) -> Self {
        Self {
            kp,
            ki: 0.0,
            kd: 0.0,
            integral_limit: None,
            output_limit: None,
        }
    }

    pub fn validate(&self, field: &'static str) -> Result<()> {
        let gains_ok = [self.kp, self.ki, self.kd]
            .iter()
            .all(|g| g.is_finite() && *g >= 0.0);
        let limits_ok = [self.integral_limit, self.output_limit]
            .iter()
            .flatten()
            .all(|l| *l > 0.0);
        if gains_ok && limits_ok {
            Ok(())
        } else {
            Err(Error::InvalidParams {
                field,
                reason: "gains must be >= 0 and limits > 0".into(),
            })
        }
    }
}

/// Integral and previous error carried between PID samples.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

impl PidState {
    /// Positional PID with a clamped integral and derivative on error.
    pub fn step(&mut self, error: f64, params: &PidParams, dt: f64) -> f64 {
        let mut integral = self.integral + error * dt;
        if let Some(limit) = params.integral_limit {
            integral = integral.clamp(-limit, limit);
        }
        let derivative = (error - self.prev_error) / dt;
        self.integral = integral;
        self.prev_error = error;
        let out = params.kp * error + params.ki * integral + params.kd * derivative;
        match params.output_limit {
            Some(limit) => out.clamp(-limit, limit),
            None => out,
        }
    }
}

/// Functional form of [`PidState::step`].
pub fn pid_step(state: PidState, error: f64, params: &PidParams, dt: f64) -> (f64, PidState) {
    let mut next = state;
    let out = next.step(error, params, dt);
    (out, next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Outer position loops for joints 2 and 3.
    pub pos_pid: [PidParams; 2],
    /// Inner velocity loops for joints 2 and 3.
    pub vel_pid: [PidParams; 2],
    pub alpha: f64,
    /// Diagonal of the task-space stiffness `Kp`.
    pub kp_task: [f64; 2],
    /// Diagonal of the task-space damping `Kd`.
    pub kd_task: [f64; 2],
    /// Singular values below `pinv_tolerance · σ_max` are truncated.
    pub pinv_tolerance: f64,
    pub control_dt: f64,
}

impl Default for TrackerConfig {
    /// Gains tuned on the paper robot: a soft joint cascade that mostly
    /// damps the internal motion, and a stiff, critically damped hand loop.
    fn default() -> Self {
        let pos = PidParams::p(15.0);
        let vel = PidParams::p(0.2);
        Self {
            pos_pid: [pos; 2],
            vel_pid: [vel; 2],
            alpha: 1.0,
            kp_task: [2500.0, 2500.0],
            kd_task: [100.0, 100.0],
            pinv_tolerance: 1e-2,
            control_dt: 1e-3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for pid in &self.pos_pid {
            pid.validate("tracker.pos_pid")?;
        }
        for pid in &self.vel_pid {
            pid.validate("tracker.vel_pid")?;
        }
        let bad = |field, reason: &str| {
            Err(Error::InvalidParams {
                field,
                reason: reason.into(),
            })
        };
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("tracker.alpha", "must be >= 0");
        }
        if !self.kp_task.iter().all(|k| *k > 0.0 && k.is_finite()) {
            return bad("tracker.kp_task", "diagonal entries must be > 0");
        }
        if !self.kd_task.iter().all(|k| *k > 0.0 && k.is_finite()) {
            return bad("tracker.kd_task", "diagonal entries must be > 0");
        }
        if !(self.pinv_tolerance >= 0.0 && self.pinv_tolerance < 1.0) {
            return bad("tracker.pinv_tolerance", "must lie in [0, 1)");
        }
        if !(self.control_dt > 0.0 && self.control_dt.is_finite()) {
            return bad("tracker.control_dt", "must be > 0");
        }
        Ok(())
    }
}

/// Desired joint and hand signals at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceSample {
    pub q: JointConfig,
    pub dq: nalgebra::Vector3<f64>,
    pub p: Point,
    pub dp: Point,
    pub ddp: Point,
}

/// Reference built from a planned trajectory: joint signals are linearly
/// interpolated between knots, the hand signals follow from kinematics and
/// the hand acceleration is a central difference over the knot grid.
#[derive(Clone, Debug)]
pub struct Reference {
    params: RobotParams,
    times: Vec<f64>,
    states: Vec<FullState>,
    hand_accel: Vec<Point>,
}

pub fn build_reference(params: &RobotParams, traj: &Trajectory) -> Result<Reference> {
    let n = traj.states.len();
    if n < 2 || traj.times.len() != n {
        return Err(Error::InvalidProblem(
            "reference needs at least two knots with matching times".into(),
        ));
    }
    if traj.times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidProblem(
            "reference knot times must be strictly increasing".into(),
        ));
    }
    let velocity: Vec<Point> = traj
        .states
        .iter()
        .map(|x| jacobian_hand(params, &x.q) * x.dq)
        .collect();
    let hand_accel = (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (velocity[hi] - velocity[lo]) / (traj.times[hi] - traj.times[lo])
        })
        .collect();
    Ok(Reference {
        params: *params,
        times: traj.times.clone(),
        states: traj.states.clone(),
        hand_accel,
    })
}

impl Reference {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn sample(&self, t: f64) -> Result<ReferenceSample> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::OutOfRange { t, end: self.end() });
        }
        Ok(self.interpolate(t))
    }

    /// Like [`Reference::sample`] but holds the endpoint values outside the
    /// reference interval.
    pub fn sample_clamped(&self, t: f64) -> ReferenceSample {
        self.interpolate(t.clamp(self.start(), self.end()))
    }

    fn interpolate(&self, t: f64) -> ReferenceSample {
        let hi = self
            .times
            .partition_point(|&k| k <= t)
            .clamp(1, self.times.len() - 1);
        let lo = hi - 1;
        let span = self.times[hi] - self.times[lo];
        let w = ((t - self.times[lo]) / span).clamp(0.0, 1.0);
        let (a, b) = (&self.states[lo], &self.states[hi]);
        let (q, dq, ddp) = if w == 0.0 {
            (a.q, a.dq, self.hand_accel[lo])
        } else if w == 1.0 {
            (b.q, b.dq, self.hand_accel[hi])
        } else {
            (
                a.q + (b.q - a.q) * w,
                a.dq + (b.dq - a.dq) * w,
                self.hand_accel[lo] + (self.hand_accel[hi] - self.hand_accel[lo]) * w,
            )
        };
        ReferenceSample {
            q,
            dq,
            p: fk_hand(&self.params, &q),
            dp: jacobian_hand(&self.params, &q) * dq,
            ddp,
        }
    }
}

/// Hand error `y = p_d − FK(q)` and its rate `ẏ = ṗ_d − J q̇`.
pub fn task_error(
    params: &RobotParams,
    x: &FullState,
    reference: &ReferenceSample,
) -> (Point, Point) {
    let y = reference.p - fk_hand(params, &x.q);
    let dy = reference.dp - jacobian_hand(params, &x.q) * x.dq;
    (y, dy)
}

/// PID states of the two cascades.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CascadeStates {
    pub pos: [PidState; 2],
    pub vel: [PidState; 2],
}

/// Cascaded joint-space PID on joints 2 and 3; joint 1 gets nothing.
pub fn u_config(
    x: &FullState,
    reference: &ReferenceSample,
    cfg: &TrackerConfig,
    states: &mut CascadeStates,
) -> ControlInput {
    let dt = cfg.control_dt;
    ControlInput::from_fn(|i, _| {
        let joint = i + 1;
        let outer = states.pos[i].step(reference.q[joint] - x.q[joint], &cfg.pos_pid[i], dt);
        let velocity_error = outer + reference.dq[joint] - x.dq[joint];
        states.vel[i].step(velocity_error, &cfg.vel_pid[i], dt)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskTorque {
    pub u: ControlInput,
    /// Set when the pseudo-inverse truncated a direction.
    pub singular: bool,
}

/// Input-output linearizing torque for the hand position.
pub fn u_task(
    x: &FullState,
    reference: &ReferenceSample,
    params: &RobotParams,
    cfg: &TrackerConfig,
) -> TaskTorque {
    let (y, dy) = task_error(params, x, reference);
    let v = -Vector2::from(cfg.kp_task).component_mul(&y)
        - Vector2::from(cfg.kd_task).component_mul(&dy);

    let j = jacobian_hand(params, &x.q);
    let m = mass_matrix(params, &x.q);
    let bias = coriolis_vector(params, &x.q, &x.dq) + gravity_vector(params, &x.q);
    let Some(chol) = m.cholesky() else {
        return TaskTorque {
            u: ControlInput::zeros(),
            singular: true,
        };
    };
    let gain: Matrix2<f64> = -(j * chol.solve(&actuation_matrix()));
    let rhs = v - reference.ddp - j * chol.solve(&bias) + jacobian_dot(params, &x.q, &x.dq) * x.dq;

    let (inverse, singular) = truncated_pinv(&gain, cfg.pinv_tolerance);
    let u = inverse * rhs;
    if u.iter().all(|c| c.is_finite()) {
        TaskTorque { u, singular }
    } else {
        TaskTorque {
            u: ControlInput::zeros(),
            singular: true,
        }
    }
}

fn truncated_pinv(a: &Matrix2<f64>, rel_tol: f64) -> (Matrix2<f64>, bool) {
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sigma_max = svd.singular_values.max();
    let cutoff = rel_tol * sigma_max;
    let mut inverse = Matrix2::zeros();
    let mut truncated = false;
    for i in 0..2 {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            inverse += v_t.row(i).transpose() * u.column(i).transpose() / s;
        } else {
            truncated = true;
        }
    }
    (inverse, truncated)
}

/// Everything a controller produced at one sample.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ControlOutput {
    pub u: ControlInput,
    pub u_config: ControlInput,
    pub u_task: ControlInput,
    pub singular: bool,
}

pub trait Controller {
    fn control(&mut self, t: f64, x: &FullState, reference: &ReferenceSample) -> ControlOutput;
}

/// Applies no torque.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn control(&mut self, _t: f64, _x: &FullState, _reference: &ReferenceSample) -> ControlOutput {
        ControlOutput::default()
    }
}

/// The hybrid tracker. Owns its PID state.
#[derive(Clone, Debug)]
pub struct TrackingController {
    params: RobotParams,
    cfg: TrackerConfig,
    states: CascadeStates,
}

impl TrackingController {
    pub fn new(params: RobotParams, cfg: TrackerConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        Ok(Self {
            params,
            cfg,
            states: CascadeStates::default(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }
}

impl Controller for TrackingController {
    fn control(&mut self, _t: f64, x: &FullState, reference: &ReferenceSample) -> ControlOutput {
        control(x, reference, &self.params, &self.cfg, &mut self.states)
    }
}

/// `u = sat(u_config + α·u_task)`.
pub fn control(
    x: &FullState,
    reference: &ReferenceSample,
    params: &RobotParams,
    cfg: &TrackerConfig,
    states: &mut CascadeStates,
) -> ControlOutput {
    let config_part = u_config(x, reference, cfg, states);
    let (task_part, singular) = if cfg.alpha > 0.0 {
        let t = u_task(x, reference, params, cfg);
        (t.u, t.singular)
    } else {
        (ControlInput::zeros(), false)
    };
    ControlOutput {
        u: params.saturate(config_part + task_part * cfg.alpha),
        u_config: config_part,
        u_task: task_part,
        singular,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn still_reference(q: JointConfig) -> ReferenceSample {
        let p = RobotParams::paper_robot();
        ReferenceSample {
            q,
            dq: Vector3::zeros(),
            p: fk_hand(&p, &q),
            dp: Point::zeros(),
            ddp: Point::zeros(),
        }
    }

    #[test]
    fn pid_zero_error_zero_output() {
        let (out, _) = pid_step(PidState::default(), 0.0, &PidParams::p(5.0), 1e-3);
        assert_eq!(out, 0.0);
    }

    #[test]
    fn pid_proportional_only() {
        let (out, _) = pid_step(PidState::default(), 2.0, &PidParams::p(3.0), 1e-3);
        assert_eq!(out, 6.0);
    }

    #[test]
    fn pid_integral_clamps() {
        let params = PidParams {
            kp: 0.0,
            ki: 1.0,
            kd: 0.0,
            integral_limit: Some(0.05),
            output_limit: None,
        };
        let mut state = PidState::default();
        let dt = 1e-3;
        let error = 2.0;
        for k in 1..=100 {
            let out = state.step(error, &params, dt);
            // Closed form: ∫e = e·k·dt until it saturates.
            let expected = (error * k as f64 * dt).min(0.05);
            assert!((out - expected).abs() < 1e-12, "k={k}: {out} vs {expected}");
        }
        assert_eq!(state.integral, 0.05);
    }

    #[test]
    fn pid_output_limit() {
        let params = PidParams {
            output_limit: Some(1.0),
            ..PidParams::p(10.0)
        };
        let (out, _) = pid_step(PidState::default(), -3.0, &params, 1e-3);
        assert_eq!(out, -1.0);
    }

    #[test]
    fn u_config_zero_at_perfect_tracking() {
        let q = JointConfig::new(0.3, 0.1, -1.0);
        let x = FullState::at_rest(q);
        let mut states = CascadeStates::default();
        let u = u_config(
            &x,
            &still_reference(q),
            &TrackerConfig::default(),
            &mut states,
        );
        assert_eq!(u, ControlInput::zeros());
    }

    #[test]
    fn u_config_decouples_joints() {
        let q = JointConfig::new(0.3, 0.1, -1.0);
        let mut x = FullState::at_rest(q);
        x.q[1] += 0.05;
        let mut states = CascadeStates::default();
        let u = u_config(
            &x,
            &still_reference(q),
            &TrackerConfig::default(),
            &mut states,
        );
        assert_ne!(u[0], 0.0);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn u_config_composes_p_cascades() {
        let q = JointConfig::new(0.3, 0.1, -1.0);
        let mut x = FullState::at_rest(q);
        let e = 0.04;
        x.q[1] -= e;
        x.q[2] -= e;
        let cfg = TrackerConfig {
            pos_pid: [PidParams::p(7.0); 2],
            vel_pid: [PidParams::p(0.5); 2],
            ..TrackerConfig::default()
        };
        let mut states = CascadeStates::default();
        let u = u_config(&x, &still_reference(q), &cfg, &mut states);
        for i in 0..2 {
            assert!((u[i] - 0.5 * (7.0 * e)).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_zero_is_pure_u_config() {
        let p = RobotParams::paper_robot();
        let q = JointConfig::new(0.3, 0.1, -1.0);
        let mut x = FullState::at_rest(q);
        x.q[2] += 0.1;
        let cfg = TrackerConfig {
            alpha: 0.0,
            ..TrackerConfig::default()
        };
        let r = still_reference(q);
        let mut s1 = CascadeStates::default();
        let mut s2 = CascadeStates::default();
        let out = control(&x, &r, &p, &cfg, &mut s1);
        assert_eq!(out.u, u_config(&x, &r, &cfg, &mut s2));
    }

    #[test]
    fn feedforward_gives_zero_hand_acceleration() {
        // With y = ẏ = 0 the task torque must make ÿ = 0, i.e. J q̈ + J̇ q̇ = p̈_d.
        let p = RobotParams::paper_robot();
        let q = JointConfig::new(0.4, -0.2, -1.2);
        let dq = Vector3::new(0.5, -0.3, 1.0);
        let x = FullState::new(q, dq);
        let r = ReferenceSample {
            q,
            dq,
            p: fk_hand(&p, &q),
            dp: jacobian_hand(&p, &q) * dq,
            ddp: Point::new(0.3, -0.1),
        };
        let t = u_task(&x, &r, &p, &TrackerConfig::default());
        assert!(!t.singular);
        let ddq = crate::dynamics::forward_dynamics(&p, &x, &t.u, &Vector3::zeros()).unwrap();
        let hand_acc = jacobian_hand(&p, &q) * ddq + jacobian_dot(&p, &q, &dq) * dq;
        assert!((hand_acc - r.ddp).norm() < 1e-9, "{hand_acc:?}");
    }

    #[test]
    fn pinv_truncates_rank_deficient() {
        let a = Matrix2::new(1.0, 2.0, 2.0, 4.0);
        let (inv, truncated) = truncated_pinv(&a, 1e-6);
        assert!(truncated);
        // Moore-Penrose: A A⁺ A = A
        assert!((a * inv * a - a).norm() < 1e-12);
        let (inv, truncated) = truncated_pinv(&Matrix2::new(2.0, 0.0, 0.0, 4.0), 1e-6);
        assert!(!truncated);
        assert!((inv - Matrix2::new(0.5, 0.0, 0.0, 0.25)).norm() < 1e-15);
    }

    #[test]
    fn reference_interpolates_knots() {
        let p = RobotParams::paper_robot();
        let a = FullState::new(
            JointConfig::new(0.1, 0.0, 0.5),
            Vector3::new(1.0, 0.0, -1.0),
        );
        let b = FullState::new(JointConfig::new(0.3, 0.2, 0.1), Vector3::new(0.0, 1.0, 1.0));
        let traj = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![a, b],
            controls: vec![ControlInput::zeros()],
            cost: 0.0,
        };
        let r = build_reference(&p, &traj).unwrap();
        assert_eq!(r.sample(0.0).unwrap().q, a.q);
        assert_eq!(r.sample(0.1).unwrap().dq, b.dq);
        let mid = r.sample(0.05).unwrap();
        assert!((mid.q - (a.q + b.q) / 2.0).norm() < 1e-15);
        assert!((mid.p - fk_hand(&p, &mid.q)).norm() < 1e-15);
        assert!(matches!(r.sample(0.2), Err(Error::OutOfRange { .. })));
        assert_eq!(r.sample_clamped(0.2).q, b.q);
    }

    #[test]
    fn constant_reference_has_no_motion() {
        let p = RobotParams::paper_robot();
        let a = FullState::at_rest(JointConfig::new(0.1, 0.0, 0.5));
        let traj = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![a; 3],
            controls: vec![ControlInput::zeros(); 2],
            cost: 0.0,
        };
        let r = build_reference(&p, &traj).unwrap();
        let s = r.sample(0.73).unwrap();
        assert_eq!(s.dp, Point::zeros());
        assert_eq!(s.ddp, Point::zeros());
        assert_eq!(s.p, fk_hand(&p, &a.q));
    }
}
