//! Time discretizations of natural policy gradient flows.
//!
//! `integrate_flow` runs explicit Euler in parameter space with an adaptive
//! step. The state-action counterparts (`riemannian_flow_step_state_action`,
//! `projected_newton_step`) work directly on the polytope and serve as
//! independent references for the parameter-space iterations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Potential;
use crate::linalg;
use crate::mdp::{self, Mdp, StateActionFrequency};
use crate::npg::{self, GeometrySpec, Objective, PolicyState, SoftmaxParams};

/// Entries of `eta` below this count as contact with a face of the polytope.
pub const BOUNDARY_THRESHOLD: f64 = 1e-9;
/// Errors below this are treated as converged to machine precision when
/// judging the tail of a Newton-type iteration.
pub const NEWTON_FLOOR: f64 = 1e-12;
/// Largest admissible constant in `e_{k+1} <= C e_k^2`.
pub const QUADRATIC_CONSTANT_MAX: f64 = 1e3;
/// Fraction of the distance to the boundary a damped Newton step may cover.
pub const NEWTON_DAMPING: f64 = 0.99;

const MONOTONE_SLACK: f64 = 1e-13;
const DIVERGENCE_RUN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct StepController {
    pub base_dt: f64,
    /// Cap on `||dt * d_theta||`.
    pub max_param_step: f64,
    /// Cap on the first-order estimate `||dt * J d_theta||`.
    pub max_eta_step: f64,
    pub min_dt: f64,
}

impl Default for StepController {
    fn default() -> Self {
        StepController {
            base_dt: 0.1,
            max_param_step: 1.0,
            max_eta_step: 0.05,
            min_dt: 1e-10,
        }
    }
}

impl StepController {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_dt > 0.0
            && self.max_param_step > 0.0
            && self.max_eta_step > 0.0
            && self.min_dt > 0.0
            && self.min_dt <= self.base_dt
            && [self.base_dt, self.max_param_step, self.max_eta_step].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid step controller {self:?}")))
        }
    }

    fn initial_dt(&self, d: &DVector<f64>, d_eta: &DVector<f64>) -> f64 {
        let mut dt = self.base_dt;
        let nd = d.norm();
        if nd > 0.0 {
            dt = dt.min(self.max_param_step / nd);
        }
        let ne = d_eta.norm();
        if ne > 0.0 {
            dt = dt.min(self.max_eta_step / ne);
        }
        dt.max(self.min_dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct StopCriteria {
    pub max_iters: usize,
    /// Stop once `reference - objective <= gap_tol`; ignored without a reference.
    pub gap_tol: f64,
    /// Stop once the parameter gradient norm drops to this value.
    pub grad_tol: f64,
    /// Optimal objective value `R*` (or `R*_lambda`), used for the gap.
    pub reference: Option<f64>,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            max_iters: 10_000,
            gap_tol: 1e-12,
            grad_tol: 1e-14,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    /// First contact with the boundary: the state-action indices whose
    /// frequency dropped below [`BOUNDARY_THRESHOLD`] and the flow time.
    BoundaryHit { face: Vec<usize>, time: f64 },
    Diverged { reason: String },
}

impl Status {
    pub fn label(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::BoundaryHit { .. } => "boundary_hit",
            Status::Diverged { .. } => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Accumulated step sizes.
    pub t: f64,
    pub theta: DVector<f64>,
    pub eta: DVector<f64>,
    pub pi: Vec<f64>,
    pub reward: f64,
    pub objective: f64,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub status: Status,
}

impl Trajectory {
    pub fn final_record(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectories have at least one record")
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn gaps(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.gap).collect()
    }
}

fn record(t: f64, st: &PolicyState, reference: Option<f64>) -> TrajectoryRecord {
    TrajectoryRecord {
        t,
        theta: st.params.theta.clone(),
        eta: st.eta.clone(),
        pi: st.policy.probs.clone(),
        reward: st.reward,
        objective: st.objective,
        gap: reference.map(|r| r - st.objective),
    }
}

fn face_of(eta: &DVector<f64>) -> Vec<usize> {
    eta.iter()
        .enumerate()
        .filter(|(_, &e)| e < BOUNDARY_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

/// Explicit Euler integration of `d theta/dt = G(theta)^+ grad R_lambda(theta)`.
///
/// Each step starts from
/// `dt = min(base_dt, max_param_step/||d||, max_eta_step/||J d||)` and is
/// halved while the objective would decrease, down to `min_dt`.
///
/// For geometries whose flow can reach the boundary in finite time, the
/// first record with an entry of `eta` below [`BOUNDARY_THRESHOLD`] fixes the
/// face and the hit time. Coordinates that touch the boundary are frozen
/// from then on and integration continues with the flow restricted to the
/// face until a stop criterion fires or the restricted direction vanishes;
/// the final status is `BoundaryHit`. A non-finite direction for such a
/// geometry also counts as a boundary hit.
pub fn integrate_flow(
    m: &Mdp,
    theta0: &SoftmaxParams,
    geo: &GeometrySpec,
    obj: &Objective,
    ctrl: &StepController,
    stop: &StopCriteria,
) -> Result<Trajectory> {
    ctrl.validate()?;
    let watch_boundary = geo.can_hit_boundary();
    let mut st = PolicyState::new(m, theta0, obj)?;
    let mut t = 0.0;
    let mut records = Vec::new();
    let mut contact: Option<(Vec<usize>, f64)> = None;
    let mut face: Vec<usize> = Vec::new();

    let finish = |base: Status, contact: Option<(Vec<usize>, f64)>| match (base, contact) {
        (Status::Diverged { reason }, None) => Status::Diverged { reason },
        (_, Some((face, time))) => Status::BoundaryHit { face, time },
        (s, None) => s,
    };

    for iter in 0.. {
        let rec = record(t, &st, stop.reference);
        let gap = rec.gap;
        records.push(rec);
        if watch_boundary {
            for i in face_of(&st.eta) {
                if !face.contains(&i) {
                    face.push(i);
                }
            }
            if contact.is_none() && !face.is_empty() {
                contact = Some((face.clone(), t));
            }
        }
        if gap.is_some_and(|g| g <= stop.gap_tol) || st.gradient.norm() <= stop.grad_tol {
            return Ok(Trajectory {
                records,
                status: finish(Status::Converged, contact),
            });
        }
        if iter >= stop.max_iters {
            return Ok(Trajectory {
                records,
                status: finish(Status::MaxIters, contact),
            });
        }

        // Once every state is down to one free action the face is a vertex
        // and the restricted direction is rounding noise.
        if !face.is_empty() && face.len() + m.n_states >= m.n_sa() {
            return Ok(Trajectory {
                records,
                status: finish(Status::Converged, contact),
            });
        }
        let d = match st.direction_on_face(m, geo, &face) {
            Ok(d) if d.iter().all(|x| x.is_finite()) => d,
            other => {
                let reason = match other {
                    Err(e) => e.to_string(),
                    Ok(_) => "non-finite natural gradient".to_string(),
                };
                if watch_boundary && contact.is_none() {
                    contact = Some((face_of(&st.eta), t));
                }
                return Ok(Trajectory {
                    records,
                    status: finish(Status::Diverged { reason }, contact),
                });
            }
        };
        if !face.is_empty() && d.norm() <= stop.grad_tol {
            return Ok(Trajectory {
                records,
                status: finish(Status::Converged, contact),
            });
        }
        let d_eta = &st.jacobian * &d;
        let mut dt = ctrl.initial_dt(&d, &d_eta);
        let next = loop {
            let theta = &st.params.theta + &d * dt;
            let trial = SoftmaxParams::new(theta, m.n_actions);
            let candidate = PolicyState::new(m, &trial, obj).ok();
            let improves = candidate
                .as_ref()
                .is_some_and(|c| c.objective.is_finite() && c.objective >= st.objective - MONOTONE_SLACK);
            if improves || dt <= ctrl.min_dt {
                break candidate.map(|c| (c, dt));
            }
            dt = (dt * 0.5).max(ctrl.min_dt);
        };
        match next {
            Some((c, dt)) => {
                st = c;
                t += dt;
            }
            None => {
                return Ok(Trajectory {
                    records,
                    status: finish(
                        Status::Diverged {
                            reason: "objective not finite after step".to_string(),
                        },
                        contact,
                    ),
                })
            }
        }
    }
    unreachable!()
}

/// One explicit Euler step of the state-action flow
/// `d eta/dt = P_g(hess phi(eta)^{-1} grad R_lambda(eta))`.
pub fn riemannian_flow_step_state_action(
    m: &Mdp,
    eta: &StateActionFrequency,
    phi: &Potential,
    obj: &Objective,
    dt: f64,
) -> Result<StateActionFrequency> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let u = npg::riemannian_gradient(m, &eta.eta, phi, obj)?;
    let next = &eta.eta + u * dt;
    if let Some(i) = next.iter().position(|&x| x <= 0.0) {
        return Err(Error::BoundaryExit { coordinate: i });
    }
    Ok(StateActionFrequency::new(next))
}

#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub eta: StateActionFrequency,
    /// Undamped Newton increment.
    pub increment: DVector<f64>,
    /// True when the increment was shortened to stay in the positive orthant.
    pub damped: bool,
    /// Norm of the Euclidean projection of the gradient onto the tangent space.
    pub projected_gradient: f64,
}

/// Exact Newton step for `<r, eta> - lambda phi(eta)` on the affine hull of
/// the polytope, computed in an orthonormal basis of its tangent space.
pub fn projected_newton_step(
    m: &Mdp,
    eta: &StateActionFrequency,
    phi: &Potential,
    lambda: f64,
) -> Result<NewtonStep> {
    let basis = m.tangent_basis();
    newton_step_in_basis(m, &basis, &eta.eta, phi, lambda)
}

fn newton_step_in_basis(
    m: &Mdp,
    basis: &DMatrix<f64>,
    eta: &DVector<f64>,
    phi: &Potential,
    lambda: f64,
) -> Result<NewtonStep> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let obj = Objective::regularized(lambda, phi.clone());
    let g = obj.gradient(m, eta)?;
    let projected = (basis.transpose() * &g).norm();
    let c = m.constraint_matrix();
    let increment = match phi.diagonal_hessian(eta)? {
        Some(h) => diagonal_newton_increment(&c, &(h * lambda), &g)?,
        None => constrained_newton_increment(&c, &obj.curvature(eta)?, &g)?,
    };
    let mut scale = 1.0_f64;
    for (x, dx) in eta.iter().zip(increment.iter()) {
        if x + dx <= 0.0 {
            scale = scale.min(NEWTON_DAMPING * x / -dx);
        }
    }
    let damped = scale < 1.0;
    Ok(NewtonStep {
        eta: StateActionFrequency::new(eta + &increment * scale),
        increment,
        damped,
        projected_gradient: projected,
    })
}

/// Newton increment for a diagonal curvature `h`: `d = (g - C^T y) / h`
/// with `y` solving `C diag(1/h) C^T y = C diag(1/h) g`.
fn diagonal_newton_increment(c: &DMatrix<f64>, h: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if !h.iter().all(|x| x.is_finite() && *x > 0.0) || !g.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularReducedHessian);
    }
    let inv = h.map(|x| 1.0 / x);
    let cw = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * inv[j]);
    let y = linalg::solve(&cw * c.transpose(), &(&cw * g), "constraint multipliers")
        .map_err(|_| Error::SingularReducedHessian)?;
    Ok((g - c.transpose() * y).component_mul(&inv))
}

/// Solves `H d + C^T y = g`, `C d = 0` for the Newton increment `d`.
///
/// This is the reduced system `(B^T H B) c = B^T g`, `d = B c` written in
/// saddle-point form. Near the boundary `H` has entries many orders of
/// magnitude apart and `B^T H B` loses the small eigenvalues to rounding, so
/// the saddle-point matrix is first equilibrated with `diag(H)^(-1/2)`.
fn constrained_newton_increment(c: &DMatrix<f64>, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let k = c.nrows();
    if !linalg::all_finite(h) || !g.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularReducedHessian);
    }
    let scale = DVector::from_fn(n, |i, _| {
        let d = h[(i, i)];
        if d > 0.0 {
            1.0 / d.sqrt()
        } else {
            1.0
        }
    });
    let mut kkt = DMatrix::zeros(n + k, n + k);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = scale[i] * h[(i, j)] * scale[j];
        }
        for r in 0..k {
            let v = c[(r, i)] * scale[i];
            kkt[(n + r, i)] = v;
            kkt[(i, n + r)] = v;
        }
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&g.component_mul(&scale));
    let sol = kkt.clone().lu().solve(&rhs).ok_or(Error::SingularReducedHessian)?;
    let residual = (&kkt * &sol - &rhs).norm();
    if !sol.iter().all(|x| x.is_finite()) || residual > 1e-8 * (rhs.norm() + 1e-300) + 1e-14 * kkt.amax() * sol.norm() {
        return Err(Error::SingularReducedHessian);
    }
    Ok(sol.rows(0, n).component_mul(&scale))
}

/// Damped Newton iteration with backtracking from `eta0` until the projected
/// gradient drops to `tol * max(1, lambda)`.
pub fn newton_fixed_point(
    m: &Mdp,
    eta0: &DVector<f64>,
    phi: &Potential,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let basis = m.tangent_basis();
    let obj = Objective::regularized(lambda, phi.clone());
    let mut eta = eta0.clone();
    let mut value = obj.value(m, &eta)?;
    let mut best = f64::INFINITY;
    let tol = tol * lambda.max(1.0);
    for _ in 0..max_iters {
        let step = newton_step_in_basis(m, &basis, &eta, phi, lambda)?;
        best = best.min(step.projected_gradient);
        if step.projected_gradient <= tol {
            return Ok(eta);
        }
        let delta = &step.eta.eta - &eta;
        let mut s = 1.0;
        loop {
            let trial = &eta + &delta * s;
            let v = obj.value(m, &trial)?;
            if v >= value - MONOTONE_SLACK * value.abs().max(1.0) || s < 1e-12 {
                eta = trial;
                value = v;
                break;
            }
            s *= 0.5;
        }
    }
    Err(Error::NoConvergence(format!(
        "projected Newton reached projected gradient {best:e}, needed {tol:e}"
    )))
}

#[derive(Debug, Clone, Serialize)]
pub struct NewtonReport {
    pub step: f64,
    /// State-action iterates.
    #[serde(skip)]
    pub iterates: Vec<DVector<f64>>,
    #[serde(skip)]
    pub thetas: Vec<DVector<f64>>,
    /// Euclidean distance of each iterate to the reference optimum.
    pub errors: Vec<f64>,
    /// `(projected gradient at eta_k, ||NPG increment - Newton increment||)`.
    pub newton_deviation: Vec<(f64, f64)>,
    pub tail_constant: Option<f64>,
    pub quadratic_flag: bool,
    pub diverged: bool,
    #[serde(skip)]
    pub reference: DVector<f64>,
}

/// Regularized NPG `theta <- theta + G_phi^+ grad R_lambda / lambda`.
///
/// With step `1/lambda` the induced state-action update agrees with the
/// projected Newton step of `R_lambda` up to second order, which gives local
/// quadratic convergence.
pub fn regularized_npg_newton(
    m: &Mdp,
    theta0: &SoftmaxParams,
    phi: &Potential,
    lambda: f64,
    max_iters: usize,
) -> Result<NewtonReport> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    regularized_npg_iteration(m, theta0, phi, lambda, 1.0 / lambda, max_iters)
}

/// Regularized NPG with a fixed step size.
pub fn regularized_npg_iteration(
    m: &Mdp,
    theta0: &SoftmaxParams,
    phi: &Potential,
    lambda: f64,
    step: f64,
    max_iters: usize,
) -> Result<NewtonReport> {
    let reference = crate::oracle::regularized_optimum(m, phi, lambda)?.eta;
    let geo = GeometrySpec::HessianOf(phi.clone());
    let obj = Objective::regularized(lambda, phi.clone());
    let basis = m.tangent_basis();

    let mut params = theta0.clone();
    let mut iterates: Vec<DVector<f64>> = Vec::new();
    let mut thetas = Vec::new();
    let mut errors: Vec<f64> = Vec::new();
    let mut newton_deviation = Vec::new();
    let mut diverged = false;
    let mut rising = 0;
    let mut pending: Option<(DVector<f64>, f64)> = None;

    for k in 0..=max_iters {
        let st = match PolicyState::new(m, &params, &obj) {
            Ok(st) => st,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        let e = (&st.eta - &reference).norm();
        if let Some((newton, pg)) = pending.take() {
            let prev = iterates.last().expect("previous iterate");
            let actual = &st.eta - prev;
            newton_deviation.push((pg, (actual - newton).norm()));
        }
        if let Some(&last) = errors.last() {
            rising = if e > last { rising + 1 } else { 0 };
        }
        iterates.push(st.eta.clone());
        thetas.push(params.theta.clone());
        errors.push(e);
        if !e.is_finite() || rising >= DIVERGENCE_RUN {
            diverged = true;
            break;
        }
        if e < NEWTON_FLOOR * 0.1 || k == max_iters {
            break;
        }
        let d = match st.direction(m, &geo) {
            Ok(d) if d.iter().all(|x| x.is_finite()) => d,
            _ => {
                diverged = true;
                break;
            }
        };
        if let Ok(ns) = newton_step_in_basis(m, &basis, &st.eta, phi, lambda) {
            pending = Some((ns.increment, ns.projected_gradient));
        }
        params = SoftmaxParams::new(&params.theta + d * step, m.n_actions);
    }

    let tail_constant = quadratic_tail_constant(&errors);
    Ok(NewtonReport {
        step,
        iterates,
        thetas,
        quadratic_flag: !diverged && tail_constant.is_some_and(|c| c <= QUADRATIC_CONSTANT_MAX),
        errors,
        newton_deviation,
        tail_constant,
        diverged,
        reference,
    })
}

/// Smallest `C` with `e_{k+1} <= C e_k^2` over the last three iterations up
/// to and including the first error below [`NEWTON_FLOOR`].
pub fn quadratic_tail_constant(errors: &[f64]) -> Option<f64> {
    let hit = errors.iter().position(|&e| e < NEWTON_FLOOR)?;
    if hit < 3 {
        return None;
    }
    let c = (hit - 3..hit)
        .map(|k| errors[k + 1] / (errors[k] * errors[k]))
        .fold(0.0_f64, f64::max);
    Some(c)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Feasibility of a recorded state-action vector.
pub fn record_is_feasible(m: &Mdp, eta: &DVector<f64>) -> bool {
    mdp::polytope_residuals(m, eta).amax() <= 1e-8 && eta.iter().all(|&x| x >= -1e-10)
}
