//! Smooth unconstrained minimization (L-BFGS with Armijo backtracking),
//! quaternion slerp, and finite-difference gradient verification.

use std::collections::VecDeque;

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("numerical failure at objective value {value}")]
    NumericalFailure {
        /// Last iterate with a finite objective and gradient.
        x: Vec<f64>,
        value: f64,
    },
}

#[derive(Debug, Clone)]
pub struct MinimizerConfig {
    /// L-BFGS history size.
    pub memory_pairs: usize,
    /// Stop when ‖∇f‖∞ falls below this.
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    /// Step contraction factor of the backtracking line search.
    pub contraction: f64,
    /// Weak Wolfe curvature constant; steps whose directional derivative is
    /// still below `curvature`·slope are extended. Keeps sᵀy > 0 so the
    /// history pairs stay usable.
    pub curvature: f64,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self {
            memory_pairs: 8,
            grad_tolerance: 1e-8,
            max_iterations: 100,
            sufficient_decrease: 1e-4,
            contraction: 0.5,
            curvature: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// True iff the gradient tolerance was met.
    pub converged: bool,
}

const MIN_STEP: f64 = 1e-20;

/// Minimizes a smooth function with analytic gradient.
///
/// The objective writes its gradient into the provided buffer and returns the
/// value. Backtracking only ever accepts strictly non-increasing steps, so the
/// result satisfies f(x*) ≤ f(x0). Deterministic for fixed inputs.
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    cfg: &MinimizerConfig,
) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if cfg.memory_pairs == 0 || cfg.grad_tolerance <= 0.0 {
        return Err(OptimError::InvalidArgument("memory_pairs ≥ 1 and grad_tolerance > 0 required"));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut value = objective(&x, &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NumericalFailure { x, value });
    }
    if inf_norm(&grad) <= cfg.grad_tolerance {
        return Ok(Minimum { x, value, iterations: 0, converged: true });
    }

    // (s, y, 1/sᵀy) pairs, oldest first
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iterations {
        iterations = iter;
        let mut direction = two_loop_direction(&history, &grad);
        if dot(&direction, &grad) >= 0.0 {
            // not a descent direction; restart from steepest descent
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
        }

        let mut accepted = false;
        loop {
            match line_search(&mut objective, &x, value, &grad, &direction, cfg, &mut trial, &mut trial_grad)? {
                LineSearchOutcome::Accepted { value: trial_value } => {
                    let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
                    let y: Vec<f64> = (0..n).map(|i| trial_grad[i] - grad[i]).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * norm(&s) * norm(&y) {
                        if history.len() == cfg.memory_pairs {
                            history.pop_front();
                        }
                        history.push_back((s, y, 1.0 / sy));
                    }
                    x.copy_from_slice(&trial);
                    grad.copy_from_slice(&trial_grad);
                    value = trial_value;
                    accepted = true;
                    break;
                }
                LineSearchOutcome::NoDecrease => {
                    if history.is_empty() {
                        break;
                    }
                    // quasi-Newton step failed outright; retry along −∇f
                    history.clear();
                    direction = grad.iter().map(|g| -g).collect();
                }
            }
        }

        if !accepted {
            break; // no representable decrease left
        }
        if inf_norm(&grad) <= cfg.grad_tolerance {
            converged = true;
            break;
        }
    }

    Ok(Minimum { x, value, iterations, converged })
}

enum LineSearchOutcome {
    Accepted { value: f64 },
    NoDecrease,
}

const MAX_LINE_SEARCH_ROUNDS: usize = 64;

/// Weak Wolfe line search by bisection: contract on an Armijo failure, extend
/// while the directional derivative stays below `curvature`·slope. On success
/// `trial`/`trial_grad` hold the accepted point. When the curvature condition
/// cannot be met within the round budget, the best Armijo point is accepted
/// so progress is still monotone.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    value: f64,
    grad: &[f64],
    direction: &[f64],
    cfg: &MinimizerConfig,
    trial: &mut [f64],
    trial_grad: &mut [f64],
) -> Result<LineSearchOutcome, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let slope = dot(grad, direction);
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut step = 1.0f64;
    let mut best_armijo: Option<f64> = None;

    for _ in 0..MAX_LINE_SEARCH_ROUNDS {
        for i in 0..n {
            trial[i] = x[i] + step * direction[i];
        }
        let trial_value = objective(trial, trial_grad);
        let armijo = trial_value.is_finite()
            && trial_value <= value + cfg.sufficient_decrease * step * slope;
        if !armijo {
            hi = step;
        } else if trial_grad.iter().all(|g| g.is_finite())
            && dot(trial_grad, direction) < cfg.curvature * slope
        {
            // decrease is fine but the step is too short; extend
            lo = step;
            best_armijo = Some(step);
        } else {
            if trial_grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NumericalFailure { x: x.to_vec(), value });
            }
            return Ok(LineSearchOutcome::Accepted { value: trial_value });
        }
        step = if hi.is_finite() { lo + (hi - lo) * cfg.contraction } else { step * 2.0 };
        if step < MIN_STEP || !step.is_finite() {
            break;
        }
    }

    if let Some(step) = best_armijo {
        for i in 0..n {
            trial[i] = x[i] + step * direction[i];
        }
        let trial_value = objective(trial, trial_grad);
        if trial_grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NumericalFailure { x: x.to_vec(), value });
        }
        return Ok(LineSearchOutcome::Accepted { value: trial_value });
    }
    Ok(LineSearchOutcome::NoDecrease)
}

fn two_loop_direction(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, grad: &[f64]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= alpha * y[i];
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += (alpha - beta) * s[i];
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Spherical linear interpolation between two unit quaternions.
///
/// Uses the shortest arc (negates `q_j` when the 4D dot is negative) and
/// falls back to normalized linear interpolation for nearly parallel inputs.
pub fn slerp(
    q_i: Quaternion<f64>,
    q_j: Quaternion<f64>,
    t: f64,
) -> Result<UnitQuaternion<f64>, OptimError> {
    let ni = q_i.norm();
    let nj = q_j.norm();
    if ni < 1e-12 || nj < 1e-12 {
        return Err(OptimError::InvalidArgument("zero quaternion"));
    }
    if !t.is_finite() {
        return Err(OptimError::InvalidArgument("non-finite interpolation parameter"));
    }
    let a = q_i / ni;
    let mut b = q_j / nj;
    let mut dot = a.coords.dot(&b.coords);
    if dot < 0.0 {
        b = -b;
        dot = -dot;
    }
    let blended = if dot > 1.0 - 1e-9 {
        a * (1.0 - t) + b * t
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        a * (((1.0 - t) * theta).sin() / sin_theta) + b * ((t * theta).sin() / sin_theta)
    };
    Ok(UnitQuaternion::from_quaternion(blended))
}

/// Max relative error between the objective's analytic gradient and a
/// central-difference estimate with step `h`.
pub fn check_gradient<F>(mut objective: F, x: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    objective(x, &mut grad);
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        point[i] = x[i] + h;
        let f_plus = objective(&point, &mut scratch);
        point[i] = x[i] - h;
        let f_minus = objective(&point, &mut scratch);
        point[i] = x[i];
        let fd = (f_plus - f_minus) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / (grad[i].abs() + 1e-12));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use std::f64::consts::FRAC_PI_2;

    fn quadratic_bowl(target: [f64; 3]) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
        move |x, g| {
            let mut f = 0.0;
            for i in 0..3 {
                let d = x[i] - target[i];
                f += d * d;
                g[i] = 2.0 * d;
            }
            f
        }
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn quadratic_reaches_minimum() {
        let res = minimize(quadratic_bowl([1.0, 2.0, 3.0]), &[0.0; 3], &MinimizerConfig::default()).unwrap();
        assert!(res.converged);
        for (xi, ti) in res.x.iter().zip([1.0, 2.0, 3.0]) {
            assert_relative_eq!(*xi, ti, epsilon = 1e-8);
        }
        assert!(res.value < 1e-15);
    }

    #[test]
    fn rosenbrock_classic_start() {
        let cfg = MinimizerConfig { max_iterations: 500, ..Default::default() };
        let res = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(res.x[1], 1.0, epsilon = 1e-5);
        assert!(res.value < 1e-10);
    }

    #[test]
    fn already_optimal_returns_immediately() {
        let res = minimize(quadratic_bowl([1.0, 2.0, 3.0]), &[1.0, 2.0, 3.0], &MinimizerConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 1);
        assert_eq!(res.x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn iterates_are_monotone() {
        // truncated runs reveal the accepted-iterate sequence
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let cfg = MinimizerConfig { max_iterations: k, grad_tolerance: 1e-14, ..Default::default() };
            let res = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
            assert!(res.value <= prev + 1e-15, "objective rose at iteration {k}");
            prev = res.value;
        }
    }

    #[test]
    fn non_finite_objective_reports_last_good_iterate() {
        // objective becomes NaN everywhere except the start
        let res = minimize(
            |x, g| {
                g[0] = 1.0;
                if x[0] == 0.0 {
                    0.0
                } else {
                    f64::NAN
                }
            },
            &[0.0],
            &MinimizerConfig::default(),
        );
        // the search cannot decrease anywhere; it must not panic and must
        // keep the starting iterate
        let min = res.unwrap();
        assert_eq!(min.x, vec![0.0]);
        assert!(!min.converged);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let res = minimize(
            |_x, g| {
                g[0] = f64::NAN;
                f64::NAN
            },
            &[0.5],
            &MinimizerConfig::default(),
        );
        assert!(matches!(res, Err(OptimError::NumericalFailure { .. })));
    }

    #[test]
    fn slerp_identical_endpoints() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.8).into_inner();
        let r = slerp(q, q, 0.5).unwrap();
        assert_relative_eq!(r.into_inner().coords, q.coords, epsilon = 1e-12);
    }

    #[test]
    fn slerp_halfway_about_z() {
        let qi = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        let qj = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2).into_inner();
        let r = slerp(qi, qj, 0.5).unwrap();
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2 / 2.0);
        assert_relative_eq!(r.into_inner().coords, expected.into_inner().coords, epsilon = 1e-12);
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let qi = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3).into_inner();
        // opposite-sign representation of a nearby rotation
        let qj = -UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.5).into_inner();
        let r = slerp(qi, qj, 0.25).unwrap();
        assert!(r.into_inner().coords.dot(&qi.coords) >= 0.0);
        // must match interpolating the un-negated representation
        let expected = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3 + 0.25 * 0.2);
        assert_relative_eq!(r.into_inner().coords, expected.into_inner().coords, epsilon = 1e-12);
    }

    #[test]
    fn slerp_stays_on_geodesic() {
        let qi = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2).into_inner();
        let qj = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 1.4).into_inner();
        let full_arc_cos = qi.coords.dot(&qj.coords);
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let r = slerp(qi, qj, t).unwrap().into_inner();
            assert_relative_eq!(r.norm(), 1.0, epsilon = 1e-12);
            assert!(r.coords.dot(&qi.coords) >= full_arc_cos - 1e-9);
            assert!(r.coords.dot(&qj.coords) >= full_arc_cos - 1e-9);
        }
    }

    #[test]
    fn slerp_rejects_zero_quaternion() {
        let q = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        assert!(slerp(Quaternion::new(0.0, 0.0, 0.0, 0.0), q, 0.5).is_err());
    }

    #[test]
    fn gradient_check_quadratic() {
        let err = check_gradient(quadratic_bowl([0.0; 3]), &[0.3, -0.7, 1.1], 1e-5);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradient_check_constant() {
        let err = check_gradient(
            |_x, g| {
                g.fill(0.0);
                7.5
            },
            &[0.1, 0.2],
            1e-5,
        );
        assert_eq!(err, 0.0);
    }
}
