//! Swing trajectory optimization with iLQR.
//!
//! The problem is the finite-horizon
//!
//! ```text
//! J = (x_N − x*)ᵀ Qf (x_N − x*) + Σ_{i<N} (x_iᵀ Q x_i + u_iᵀ R u_i)
//! ```
//!
//! over Euler-discretized dynamics. Note the running state term is taken
//! about the origin, which with the default weights only damps joint
//! velocities.

use nalgebra::{Matrix2, Matrix2x6, Matrix6, Matrix6x2, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configspace::SwingEndpoints;
use crate::dynamics::{
    self, central_difference_jacobians, ControlInput, FullState, Integrator, RobotParams,
    StateVector,
};
use crate::error::{Error, Result};

pub const MU_MIN: f64 = 1e-9;
pub const MU_MAX: f64 = 1e6;
const MU_GROWTH: f64 = 10.0;
const MU_DECAY: f64 = 2.0;
/// Step lengths tried on the feedforward term, 1 down to 2⁻¹⁰.
pub const LINE_SEARCH_LADDER: usize = 11;
/// Knots per swing used with the horizon rule.
pub const DEFAULT_STEPS: usize = 300;

/// Discrete-time plant seen by the optimizer.
pub trait DiscreteDynamics: Sync {
    fn step(&self, x: &StateVector, u: &ControlInput, dt: f64) -> Result<StateVector>;

    fn linearize(
        &self,
        x: &StateVector,
        u: &ControlInput,
        dt: f64,
    ) -> Result<(Matrix6<f64>, Matrix6x2<f64>)> {
        central_difference_jacobians(x, u, |xv, uv| self.step(xv, uv, dt))
    }
}

impl DiscreteDynamics for RobotParams {
    fn step(&self, x: &StateVector, u: &ControlInput, dt: f64) -> Result<StateVector> {
        dynamics::euler_step(self, x, u, dt)
    }
}

/// `x' = A x + B u`, independent of the step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPlant {
    pub a: Matrix6<f64>,
    pub b: Matrix6x2<f64>,
}

impl LinearPlant {
    /// Three Euler-discretized double integrators; inputs drive the last two.
    pub fn double_integrator(dt: f64) -> Self {
        let mut a = Matrix6::identity();
        a.fixed_view_mut::<3, 3>(0, 3).fill_diagonal(dt);
        let mut b = Matrix6x2::zeros();
        b[(4, 0)] = dt;
        b[(5, 1)] = dt;
        // Couple the unactuated coordinate so it is still controllable.
        a[(3, 4)] = 0.5 * dt;
        a[(3, 5)] = -0.3 * dt;
        Self { a, b }
    }
}

impl DiscreteDynamics for LinearPlant {
    fn step(&self, x: &StateVector, u: &ControlInput, _dt: f64) -> Result<StateVector> {
        Ok(self.a * x + self.b * u)
    }

    fn linearize(
        &self,
        _x: &StateVector,
        _u: &ControlInput,
        _dt: f64,
    ) -> Result<(Matrix6<f64>, Matrix6x2<f64>)> {
        Ok((self.a, self.b))
    }
}

/// Diagonals of the Q, R and Qf weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q: [f64; 6],
    pub r: [f64; 2],
    pub qf: [f64; 6],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            q: [0.0, 0.0, 0.0, 0.02, 0.02, 0.02],
            r: [0.3, 0.3],
            qf: [6400.0, 6400.0, 6400.0, 1e-5, 1e-5, 1e-5],
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.q.iter().chain(&self.r).chain(&self.qf);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidProblem(
                "cost weights must be finite and >= 0".into(),
            ));
        }
        if self.r.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidProblem(
                "control weights R must be > 0".into(),
            ));
        }
        Ok(())
    }

    fn q(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.q)
    }

    fn r(&self) -> Vector2<f64> {
        Vector2::from_row_slice(&self.r)
    }

    fn qf(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.qf)
    }
}

#[derive(Clone, Debug)]
pub struct IlqrProblem<D = RobotParams> {
    pub model: D,
    pub x0: FullState,
    pub x_target: FullState,
    pub horizon: f64,
    pub dt: f64,
    /// `round(horizon / dt)`.
    pub steps: usize,
    pub weights: CostWeights,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl<D: DiscreteDynamics> IlqrProblem<D> {
    pub fn new(
        model: D,
        x0: FullState,
        x_target: FullState,
        horizon: f64,
        dt: f64,
        weights: CostWeights,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidProblem(format!("dt must be > 0, got {dt}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 {
            return Err(Error::InvalidProblem(format!(
                "horizon {horizon} s is shorter than one step of {dt} s"
            )));
        }
        if !x0.is_finite() || !x_target.is_finite() {
            return Err(Error::InvalidProblem(
                "endpoint states must be finite".into(),
            ));
        }
        weights.validate()?;
        Ok(Self {
            model,
            x0,
            x_target,
            horizon,
            dt,
            steps: steps as usize,
            weights,
            max_iters: 100,
            rel_tol: 1e-6,
        })
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    /// Rediscretizes the same horizon into `steps` equal steps.
    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidProblem("steps must be ≥ 1".into()));
        }
        self.steps = steps;
        self.dt = self.horizon / steps as f64;
        Ok(self)
    }
}

impl IlqrProblem<RobotParams> {
    /// One swing between rest endpoints, discretized into 300 steps.
    pub fn swing(
        params: RobotParams,
        endpoints: &SwingEndpoints,
        horizon: f64,
        weights: CostWeights,
    ) -> Result<Self> {
        params.validate()?;
        Self::new(
            params,
            endpoints.x0(),
            endpoints.x_target(),
            horizon,
            horizon / DEFAULT_STEPS as f64,
            weights,
        )
    }
}

/// Time-indexed states (N + 1) and controls (N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FullState>,
    pub controls: Vec<ControlInput>,
    pub cost: f64,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn final_state(&self) -> &FullState {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }
}

/// Feedforward `k_i` and feedback `K_i` per step.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule {
    pub feedforward: Vec<Vector2<f64>>,
    pub feedback: Vec<Matrix2x6<f64>>,
}

impl GainSchedule {
    pub fn zeros(steps: usize) -> Self {
        Self {
            feedforward: vec![Vector2::zeros(); steps],
            feedback: vec![Matrix2x6::zeros(); steps],
        }
    }
}

/// Predicted cost change of the quadratic model, `α·linear + α²·quadratic`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ExpectedDecrease {
    pub linear: f64,
    pub quadratic: f64,
}

impl ExpectedDecrease {
    pub fn at(&self, alpha: f64) -> f64 {
        alpha * self.linear + alpha * alpha * self.quadratic
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub controls: Vec<ControlInput>,
    pub trajectory: Trajectory,
    /// Cost after the initial rollout and after each accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Solution {
    pub fn cost(&self) -> f64 {
        self.trajectory.cost
    }

    pub fn initial_cost(&self) -> f64 {
        self.history[0]
    }
}

fn running_cost(w: &CostWeights, x: &StateVector, u: &ControlInput) -> f64 {
    x.component_mul(&w.q()).dot(x) + u.component_mul(&w.r()).dot(u)
}

fn terminal_cost(w: &CostWeights, x: &StateVector, target: &StateVector) -> f64 {
    let e = x - target;
    e.component_mul(&w.qf()).dot(&e)
}

pub fn total_cost<D>(problem: &IlqrProblem<D>, traj: &Trajectory) -> f64 {
    let w = &problem.weights;
    let running: f64 = traj
        .states
        .iter()
        .zip(&traj.controls)
        .map(|(x, u)| running_cost(w, &x.to_vector(), u))
        .sum();
    running
        + terminal_cost(
            w,
            &traj.final_state().to_vector(),
            &problem.x_target.to_vector(),
        )
}

/// Open-loop rollout from `x0`.
pub fn rollout<D: DiscreteDynamics>(
    problem: &IlqrProblem<D>,
    controls: &[ControlInput],
) -> Result<Trajectory> {
    if controls.len() != problem.steps {
        return Err(Error::InvalidProblem(format!(
            "expected {} controls, got {}",
            problem.steps,
            controls.len()
        )));
    }
    let mut states = Vec::with_capacity(problem.steps + 1);
    let mut x = problem.x0.to_vector();
    states.push(problem.x0);
    for (i, u) in controls.iter().enumerate() {
        x = problem
            .model
            .step(&x, u, problem.dt)
            .map_err(|e| with_time(e, (i + 1) as f64 * problem.dt))?;
        states.push(FullState::from_vector(&x));
    }
    finish(problem, states, controls.to_vec())
}

fn with_time(err: Error, t: f64) -> Error {
    match err {
        Error::NonFiniteState { .. } => Error::NonFiniteState { time: Some(t) },
        other => other,
    }
}

fn finish<D>(
    problem: &IlqrProblem<D>,
    states: Vec<FullState>,
    controls: Vec<ControlInput>,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        times: (0..states.len()).map(|i| i as f64 * problem.dt).collect(),
        states,
        controls,
        cost: 0.0,
    };
    traj.cost = total_cost(problem, &traj);
    Ok(traj)
}

type Jacobians = Vec<(Matrix6<f64>, Matrix6x2<f64>)>;

fn linearize_along<D: DiscreteDynamics>(
    problem: &IlqrProblem<D>,
    traj: &Trajectory,
) -> Result<Jacobians> {
    traj.states[..problem.steps]
        .par_iter()
        .zip(&traj.controls)
        .map(|(x, u)| problem.model.linearize(&x.to_vector(), u, problem.dt))
        .collect()
}

/// Value recursion around `traj` with `μI` added to `Q_uu`.
pub fn backward_pass<D: DiscreteDynamics>(
    problem: &IlqrProblem<D>,
    traj: &Trajectory,
    mu: f64,
) -> Result<(GainSchedule, ExpectedDecrease)> {
    let jacobians = linearize_along(problem, traj)?;
    backward_with(problem, traj, &jacobians, mu)
}

fn backward_with<D>(
    problem: &IlqrProblem<D>,
    traj: &Trajectory,
    jacobians: &Jacobians,
    mu: f64,
) -> Result<(GainSchedule, ExpectedDecrease)> {
    let w = &problem.weights;
    let q2 = Matrix6::from_diagonal(&(w.q() * 2.0));
    let r2 = Matrix2::from_diagonal(&(w.r() * 2.0));
    let qf2 = Matrix6::from_diagonal(&(w.qf() * 2.0));

    let x_n = traj.final_state().to_vector();
    let mut v_x = qf2 * (x_n - problem.x_target.to_vector());
    let mut v_xx = qf2;
    let mut gains = GainSchedule::zeros(problem.steps);
    let mut expected = ExpectedDecrease::default();

    for i in (0..problem.steps).rev() {
        let (a, b) = &jacobians[i];
        let x = traj.states[i].to_vector();
        let u = traj.controls[i];

        let q_x = q2 * x + a.transpose() * v_x;
        let q_u = r2 * u + b.transpose() * v_x;
        let q_xx = q2 + a.transpose() * v_xx * a;
        let q_uu = r2 + b.transpose() * v_xx * b;
        let q_ux = b.transpose() * v_xx * a;

        let regularized = q_uu + Matrix2::identity() * mu;
        let chol = regularized
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { step: i })?;
        let k = -chol.solve(&q_u);
        let big_k = -chol.solve(&q_ux);

        expected.linear += k.dot(&q_u);
        expected.quadratic += 0.5 * k.dot(&(q_uu * k));

        v_x = q_x + big_k.transpose() * q_uu * k + big_k.transpose() * q_u + q_ux.transpose() * k;
        v_xx = q_xx
            + big_k.transpose() * q_uu * big_k
            + big_k.transpose() * q_ux
            + q_ux.transpose() * big_k;
        v_xx = (v_xx + v_xx.transpose()) * 0.5;

        gains.feedforward[i] = k;
        gains.feedback[i] = big_k;
    }
    Ok((gains, expected))
}

/// Closed-loop rollout of `u_i' = u_i + α k_i + K_i (x_i' − x_i)`.
pub fn forward_pass<D: DiscreteDynamics>(
    problem: &IlqrProblem<D>,
    traj: &Trajectory,
    gains: &GainSchedule,
    alpha: f64,
) -> Result<Trajectory> {
    if gains.feedforward.len() != problem.steps || gains.feedback.len() != problem.steps {
        return Err(Error::InvalidProblem(format!(
            "gain schedule length {} does not match {} steps",
            gains.feedforward.len(),
            problem.steps
        )));
    }
    let mut states = Vec::with_capacity(problem.steps + 1);
    let mut controls = Vec::with_capacity(problem.steps);
    let mut x = problem.x0.to_vector();
    states.push(problem.x0);
    for i in 0..problem.steps {
        let dx = x - traj.states[i].to_vector();
        let u = traj.controls[i] + gains.feedforward[i] * alpha + gains.feedback[i] * dx;
        x = problem
            .model
            .step(&x, &u, problem.dt)
            .map_err(|e| with_time(e, (i + 1) as f64 * problem.dt))?;
        controls.push(u);
        states.push(FullState::from_vector(&x));
    }
    finish(problem, states, controls)
}

/// Runs iLQR from the zero control sequence.
///
/// Steps are accepted only when they lower the cost. The loop ends when an
/// accepted step changes the cost by less than `rel_tol` (relative), when
/// the model predicts no further decrease, or after `max_iters`
/// iterations. If no step length helps even at the largest regularization
/// the best trajectory so far is returned inside [`Error::Diverged`].
pub fn solve<D: DiscreteDynamics>(problem: &IlqrProblem<D>) -> Result<Solution> {
    let mut traj = rollout(problem, &vec![ControlInput::zeros(); problem.steps])?;
    let mut history = vec![traj.cost];
    let mut mu = MU_MIN;
    let mut iterations = 0;
    let mut converged = false;

    let snapshot = |traj: &Trajectory, history: &Vec<f64>, iterations, converged| Solution {
        controls: traj.controls.clone(),
        trajectory: traj.clone(),
        history: history.clone(),
        iterations,
        converged,
    };

    while iterations < problem.max_iters {
        iterations += 1;
        let jacobians = linearize_along(problem, &traj)?;
        let (gains, expected) = loop {
            match backward_with(problem, &traj, &jacobians, mu) {
                Ok(result) => break result,
                Err(Error::NotPositiveDefinite { .. }) => {
                    mu *= MU_GROWTH;
                    if mu > MU_MAX {
                        return Err(Error::Diverged(Box::new(snapshot(
                            &traj, &history, iterations, false,
                        ))));
                    }
                }
                Err(other) => return Err(other),
            }
        };

        if -expected.at(1.0) <= problem.rel_tol * traj.cost.abs() + f64::MIN_POSITIVE {
            converged = true;
            break;
        }

        let accepted = (0..LINE_SEARCH_LADDER)
            .map(|j| 0.5f64.powi(j as i32))
            .filter_map(|alpha| forward_pass(problem, &traj, &gains, alpha).ok())
            .find(|candidate| candidate.cost < traj.cost);

        match accepted {
            Some(candidate) => {
                let change = (traj.cost - candidate.cost) / traj.cost.abs();
                traj = candidate;
                history.push(traj.cost);
                mu = (mu / MU_DECAY).max(MU_MIN);
                if change < problem.rel_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                mu *= MU_GROWTH;
                if mu > MU_MAX {
                    return Err(Error::Diverged(Box::new(snapshot(
                        &traj, &history, iterations, false,
                    ))));
                }
            }
        }
    }

    Ok(snapshot(&traj, &history, iterations, converged))
}

/// Result of [`solve`] whether or not it diverged.
pub fn solve_best_effort<D: DiscreteDynamics>(problem: &IlqrProblem<D>) -> Result<Solution> {
    match solve(problem) {
        Err(Error::Diverged(best)) => Ok(*best),
        other => other,
    }
}

/// Plant step and search window used by [`freefall_time`].
pub const FREEFALL_DT: f64 = 1e-4;
pub const FREEFALL_WINDOW: f64 = 10.0;

/// Time for the swing hand to reach its first height minimum under zero
/// control, located by the sign change of the hand's vertical velocity and
/// refined by linear interpolation between RK4 steps.
pub fn freefall_time(params: &RobotParams, x0: &FullState) -> Result<f64> {
    let vertical_speed = |x: &FullState| (dynamics::jacobian_hand(params, &x.q) * x.dq)[1];
    let dt = FREEFALL_DT;
    let mut x = *x0;
    let mut prev = vertical_speed(&x);
    let start_at_rest = prev == 0.0;
    let steps = (FREEFALL_WINDOW / dt).round() as usize;
    for i in 1..=steps {
        x = dynamics::step(
            params,
            &x,
            &ControlInput::zeros(),
            dt,
            Integrator::Rk4,
            &Vector3::zeros(),
        )
        .map_err(|e| with_time(e, i as f64 * dt))?;
        let speed = vertical_speed(&x);
        if i == 1 && start_at_rest && speed >= 0.0 {
            return Ok(0.0);
        }
        if prev < 0.0 && speed >= 0.0 {
            let fraction = -prev / (speed - prev);
            return Ok((i as f64 - 1.0 + fraction) * dt);
        }
        prev = speed;
    }
    Err(Error::NoMinimumFound {
        horizon: FREEFALL_WINDOW,
    })
}

/// Swing horizon `T = 2·T_freefall`.
pub fn freefall_horizon(params: &RobotParams, x0: &FullState) -> Result<f64> {
    Ok(2.0 * freefall_time(params, x0)?)
}

/// How a swing's duration is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonRule {
    Fixed(f64),
    /// `T = 2·T_freefall` from the swing's initial configuration.
    TwiceFreefall,
}

impl HorizonRule {
    pub fn horizon(&self, params: &RobotParams, x0: &FullState) -> Result<f64> {
        match *self {
            HorizonRule::Fixed(t) if t > 0.0 && t.is_finite() => Ok(t),
            HorizonRule::Fixed(t) => Err(Error::InvalidProblem(format!("horizon {t} must be > 0"))),
            HorizonRule::TwiceFreefall => freefall_horizon(params, x0),
        }
    }
}
