//! Tabular softmax policies, exact policy gradients and the Gram matrices of
//! the natural policy gradient variants.
//!
//! Every variant except vanilla PG is a pull back of a metric on state-action
//! space along `theta -> eta_theta`, so its Gram matrix is
//! `J^T hess phi(eta) J` with `J` the Jacobian of the state-action frequency.
//! Kakade's and Morimura's matrices also have policy-space formulas, which
//! are assembled independently so the two routes can be compared.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Potential;
use crate::linalg::{self, PINV_RELATIVE_CUTOFF};
use crate::mdp::{self, Mdp, Policy};

/// Softmax parameters `theta(s, a)` flattened as `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams {
    pub theta: DVector<f64>,
    pub n_actions: usize,
}

impl SoftmaxParams {
    pub fn new(theta: DVector<f64>, n_actions: usize) -> Self {
        debug_assert!(n_actions > 0 && theta.len().is_multiple_of(n_actions));
        SoftmaxParams { theta, n_actions }
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::new(DVector::zeros(n_states * n_actions), n_actions)
    }

    pub fn n_states(&self) -> usize {
        self.theta.len() / self.n_actions
    }

    /// Adds `shift[s]` to every entry of row `s`; the policy is unchanged.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut theta = self.theta.clone();
        for (i, t) in theta.iter_mut().enumerate() {
            *t += shift[i / self.n_actions];
        }
        Self::new(theta, self.n_actions)
    }
}

/// Which Gram matrix defines the natural gradient.
#[derive(Debug, Clone)]
pub enum GeometrySpec {
    Vanilla,
    Kakade,
    Morimura,
    Sigma(f64),
    HessianOf(Potential),
}

impl fmt::Display for GeometrySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometrySpec::Vanilla => write!(f, "vanilla"),
            GeometrySpec::Kakade => write!(f, "kakade"),
            GeometrySpec::Morimura => write!(f, "morimura"),
            GeometrySpec::Sigma(s) => write!(f, "sigma:{s}"),
            GeometrySpec::HessianOf(p) => write!(f, "hessian:{p}"),
        }
    }
}

impl GeometrySpec {
    /// Parses `vanilla`, `kakade`, `morimura`, `sigma:<float>` and
    /// `hessian:<potential>`.
    pub fn parse(spec: &str, n_states: usize, n_actions: usize) -> Result<Self> {
        let spec = spec.trim();
        match spec {
            "vanilla" => return Ok(GeometrySpec::Vanilla),
            "kakade" => return Ok(GeometrySpec::Kakade),
            "morimura" => return Ok(GeometrySpec::Morimura),
            _ => {}
        }
        if let Some(rest) = spec.strip_prefix("hessian:") {
            return Ok(GeometrySpec::HessianOf(Potential::parse(rest, n_states, n_actions)?));
        }
        if spec.starts_with("sigma:") {
            if let Potential::Sigma(s) = Potential::parse(spec, n_states, n_actions)? {
                return Ok(GeometrySpec::Sigma(s));
            }
        }
        Err(Error::Parse(format!(
            "unknown geometry {spec:?}; expected vanilla, kakade, morimura, sigma:<float> or hessian:<potential>"
        )))
    }

    /// The state-action potential whose Hessian metric this geometry pulls
    /// back, if any.
    pub fn potential(&self, n_states: usize, n_actions: usize) -> Option<Potential> {
        match self {
            GeometrySpec::Vanilla => None,
            GeometrySpec::Kakade => Some(Potential::conditional_entropy(n_states, n_actions)),
            GeometrySpec::Morimura => Some(Potential::Sigma(1.0)),
            GeometrySpec::Sigma(s) => Some(Potential::Sigma(*s)),
            GeometrySpec::HessianOf(p) => Some(p.clone()),
        }
    }

    /// True when the state-action flow can reach the boundary of the polytope
    /// in finite time (non-Legendre potentials).
    pub fn can_hit_boundary(&self) -> bool {
        match self {
            GeometrySpec::Vanilla | GeometrySpec::Kakade | GeometrySpec::Morimura => false,
            GeometrySpec::Sigma(s) => *s < 1.0,
            GeometrySpec::HessianOf(p) => !p.is_legendre(),
        }
    }
}

/// `R_lambda(eta) = <r, eta> - lambda * phi(eta)`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub lambda: f64,
    pub regularizer: Option<Potential>,
}

impl Objective {
    pub fn unregularized() -> Self {
        Objective {
            lambda: 0.0,
            regularizer: None,
        }
    }

    pub fn regularized(lambda: f64, regularizer: Potential) -> Self {
        Objective {
            lambda,
            regularizer: Some(regularizer),
        }
    }

    /// The regularizer when it contributes, that is when `lambda != 0`.
    pub fn active(&self) -> Option<&Potential> {
        match &self.regularizer {
            Some(p) if self.lambda != 0.0 => Some(p),
            _ => None,
        }
    }

    pub fn value(&self, m: &Mdp, eta: &DVector<f64>) -> Result<f64> {
        let linear = eta.dot(&m.reward_vector());
        match self.active() {
            Some(p) => Ok(linear - self.lambda * p.value(eta)?),
            None => Ok(linear),
        }
    }

    /// Gradient in state-action coordinates.
    pub fn gradient(&self, m: &Mdp, eta: &DVector<f64>) -> Result<DVector<f64>> {
        let r = m.reward_vector();
        match self.active() {
            Some(p) => Ok(r - p.gradient(eta)? * self.lambda),
            None => Ok(r),
        }
    }

    /// Hessian of the regularizer scaled by `lambda` (the negated Hessian of
    /// the objective).
    pub fn curvature(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self.active() {
            Some(p) => Ok(p.hessian(eta)? * self.lambda),
            None => Ok(DMatrix::zeros(eta.len(), eta.len())),
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_policy(params: &SoftmaxParams) -> Policy {
    let na = params.n_actions;
    let ns = params.n_states();
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = params.theta.rows(s * na, na);
        let top = row.max();
        let exps: Vec<f64> = row.iter().map(|&t| (t - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    Policy {
        n_states: ns,
        n_actions: na,
        probs,
    }
}

/// Everything the flows need at one parameter value.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub params: SoftmaxParams,
    pub policy: Policy,
    pub eta: DVector<f64>,
    pub rho: DVector<f64>,
    /// `d eta / d theta`.
    pub jacobian: DMatrix<f64>,
    pub reward: f64,
    pub objective: f64,
    /// Gradient of the objective in state-action coordinates.
    pub sa_gradient: DVector<f64>,
    /// Gradient of the objective in parameter coordinates.
    pub gradient: DVector<f64>,
}

impl PolicyState {
    pub fn new(m: &Mdp, params: &SoftmaxParams, obj: &Objective) -> Result<Self> {
        check_param_dims(m, params)?;
        let policy = softmax_policy(params);
        let eta = mdp::state_action_frequency(m, &policy)?.eta;
        let rho = mdp::state_marginal(&eta, m.n_actions);
        let jacobian = jacobian_from_parts(m, &policy, &rho)?;
        let reward = eta.dot(&m.reward_vector());
        let objective = obj.value(m, &eta)?;
        let sa_gradient = obj.gradient(m, &eta)?;
        let gradient = jacobian.transpose() * &sa_gradient;
        Ok(PolicyState {
            params: params.clone(),
            policy,
            eta,
            rho,
            jacobian,
            reward,
            objective,
            sa_gradient,
            gradient,
        })
    }

    pub fn gram(&self, m: &Mdp, geo: &GeometrySpec) -> Result<DMatrix<f64>> {
        match geo {
            GeometrySpec::Vanilla => Ok(DMatrix::identity(m.n_sa(), m.n_sa())),
            GeometrySpec::Kakade => Ok(kakade_policy_space(m, &self.policy, &self.rho)),
            GeometrySpec::Morimura => Ok(morimura_log_derivative(m, &self.policy, &self.eta, &self.rho, &self.jacobian)),
            GeometrySpec::Sigma(s) => hessian_gram(&self.jacobian, &Potential::Sigma(*s), &self.eta),
            GeometrySpec::HessianOf(p) => hessian_gram(&self.jacobian, p, &self.eta),
        }
    }

    /// Natural gradient `G^+ grad R_lambda`.
    ///
    /// `G d = J^T g` holds exactly when `J d` is the natural gradient `v` of
    /// the state-action objective, and the kernel of `G` consists of the row
    /// shifts. For softmax, `d log pi(a|s) = v/eta - E_pi[v/eta]`, so `d` is
    /// `v / eta` with its row means removed. The closed forms below never
    /// divide by small frequencies, which keeps the direction accurate for
    /// nearly deterministic policies where a pseudoinverse of `G` is not.
    ///
    /// * Kakade and the conditional entropy: `v / eta` is, up to row shifts,
    ///   the state-action value `(I - gamma P_pi)^{-1} g` of the gradient.
    /// * Diagonal metrics `diag(eta^-sigma)`: `v / eta = eta^(sigma-1)
    ///   (g - C^T mu)` with `mu` the multiplier of the constraints `C`.
    ///
    /// Other potentials use a Jacobi-scaled pseudoinverse of `G`.
    pub fn direction(&self, m: &Mdp, geo: &GeometrySpec) -> Result<DVector<f64>> {
        self.direction_on_face(m, geo, &[])
    }

    /// Natural gradient of the flow restricted to the face `eta_i = const`
    /// for the indices in `face`. Only diagonal metrics support a face; the
    /// other geometries ignore it.
    pub fn direction_on_face(&self, m: &Mdp, geo: &GeometrySpec, face: &[usize]) -> Result<DVector<f64>> {
        let raw = match geo {
            GeometrySpec::Vanilla => return Ok(self.gradient.clone()),
            GeometrySpec::Kakade | GeometrySpec::HessianOf(Potential::ConditionalEntropy { .. }) => {
                let (big, _) = mdp::transition_kernels(m, &self.policy)?;
                let n = m.n_sa();
                linalg::solve(DMatrix::identity(n, n) - big * m.gamma, &self.sa_gradient, "state-action values")?
            }
            GeometrySpec::Morimura => self.diagonal_direction(m, 1.0, face)?,
            GeometrySpec::Sigma(s) | GeometrySpec::HessianOf(Potential::Sigma(s)) => self.diagonal_direction(m, *s, face)?,
            GeometrySpec::HessianOf(Potential::Custom(_)) => {
                let g = self.gram(m, geo)?;
                let scale = DVector::from_iterator(g.ncols(), g.diagonal().iter().map(|&x| inverse_or_zero(x.max(0.0).sqrt())));
                let scaled = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| scale[i] * g[(i, j)] * scale[j]);
                (linalg::pseudo_inverse(&scaled, PINV_RELATIVE_CUTOFF) * self.gradient.component_mul(&scale)).component_mul(&scale)
            }
        };
        Ok(remove_row_shifts(raw, m.n_actions))
    }

    fn diagonal_direction(&self, m: &Mdp, sigma: f64, face: &[usize]) -> Result<DVector<f64>> {
        let c = m.constraint_matrix();
        let mut weight = self.eta.map(|x| x.abs().powf(sigma));
        for &i in face {
            weight[i] = 0.0;
        }
        let cw = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * weight[j]);
        let mu = linalg::solve(&cw * c.transpose(), &(&cw * &self.sa_gradient), "constraint multipliers")?;
        let residual = &self.sa_gradient - c.transpose() * mu;
        Ok(DVector::from_fn(self.eta.len(), |i, _| {
            if residual[i] == 0.0 || weight[i] == 0.0 {
                0.0
            } else {
                self.eta[i].abs().powf(sigma - 1.0) * residual[i]
            }
        }))
    }
}

fn inverse_or_zero(x: f64) -> f64 {
    if x > 0.0 && x.is_finite() && (1.0 / x).is_finite() {
        1.0 / x
    } else {
        0.0
    }
}

/// Subtracts the per-state mean, the Euclidean projection orthogonal to
/// the row shifts.
pub fn remove_row_shifts(mut d: DVector<f64>, n_actions: usize) -> DVector<f64> {
    for row in d.as_mut_slice().chunks_mut(n_actions) {
        let mean = row.iter().sum::<f64>() / n_actions as f64;
        for x in row.iter_mut() {
            *x -= mean;
        }
    }
    d
}

fn check_param_dims(m: &Mdp, params: &SoftmaxParams) -> Result<()> {
    if params.n_actions != m.n_actions || params.theta.len() != m.n_sa() {
        return Err(Error::Dimension(format!(
            "parameters have {} entries with {} actions, MDP needs {} with {}",
            params.theta.len(),
            params.n_actions,
            m.n_sa(),
            m.n_actions
        )));
    }
    if let Some(i) = params.theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::Domain {
            index: i,
            value: params.theta[i],
        });
    }
    Ok(())
}

/// `delta_ab - pi(b|s)`, with `1 - pi(a|s)` summed from the other actions so
/// that it stays accurate when `pi(a|s)` rounds to one.
fn softmax_derivative(pi: &Policy, s: usize, a: usize, b: usize) -> f64 {
    if a == b {
        (0..pi.n_actions).filter(|&c| c != a).map(|c| pi.prob(s, c)).sum()
    } else {
        -pi.prob(s, b)
    }
}

/// `(I - gamma P_pi^T)^{-1} S` where column `(s, b)` of `S` is the softmax
/// derivative of `pi(.|s)` scaled by `rho(s)`.
fn jacobian_from_parts(m: &Mdp, pi: &Policy, rho: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = m.n_sa();
    let na = m.n_actions;
    let (big, _) = mdp::transition_kernels(m, pi)?;
    let lhs = DMatrix::identity(n, n) - big.transpose() * m.gamma;
    let mut rhs = DMatrix::zeros(n, n);
    for s in 0..m.n_states {
        for b in 0..na {
            let col = m.sa(s, b);
            for a in 0..na {
                rhs[(m.sa(s, a), col)] = rho[s] * pi.prob(s, a) * softmax_derivative(pi, s, a, b);
            }
        }
    }
    linalg::solve_matrix(lhs, &rhs, "state-action Jacobian")
}

fn kakade_policy_space(m: &Mdp, pi: &Policy, rho: &DVector<f64>) -> DMatrix<f64> {
    // d log pi(a|s) / d theta(s, b) = delta_ab - pi(b|s), so the Fisher matrix
    // of state s is diag(pi_s) - pi_s pi_s^T.
    let na = m.n_actions;
    let mut g = DMatrix::zeros(m.n_sa(), m.n_sa());
    for s in 0..m.n_states {
        for a in 0..na {
            for b in 0..na {
                g[(m.sa(s, a), m.sa(s, b))] = rho[s] * pi.prob(s, a) * softmax_derivative(pi, s, a, b);
            }
        }
    }
    g
}

/// `sum eta (d log eta)(d log eta)^T` with `log eta = log rho + log pi`.
fn morimura_log_derivative(
    m: &Mdp,
    pi: &Policy,
    eta: &DVector<f64>,
    rho: &DVector<f64>,
    jacobian: &DMatrix<f64>,
) -> DMatrix<f64> {
    let na = m.n_actions;
    let n = m.n_sa();
    let d_rho = marginal_jacobian(jacobian, m.n_states, na);
    let mut g = DMatrix::zeros(n, n);
    for s in 0..m.n_states {
        for a in 0..na {
            let i = m.sa(s, a);
            let mut score = d_rho.row(s).transpose() / rho[s];
            for b in 0..na {
                score[m.sa(s, b)] += softmax_derivative(pi, s, a, b);
            }
            g += &score * score.transpose() * eta[i];
        }
    }
    g
}

fn marginal_jacobian(jacobian: &DMatrix<f64>, n_states: usize, n_actions: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n_states, jacobian.ncols());
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = jacobian.row(s * n_actions + a);
            let mut target = d.row_mut(s);
            target += row;
        }
    }
    d
}

fn hessian_gram(jacobian: &DMatrix<f64>, phi: &Potential, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let g = match phi.diagonal_hessian(eta)? {
        Some(h) => {
            let mut scaled = jacobian.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= h[i];
            }
            jacobian.transpose() * scaled
        }
        None => jacobian.transpose() * phi.hessian(eta)? * jacobian,
    };
    Ok(linalg::symmetrize(&g))
}

/// Exact gradient of `R_lambda(theta)`.
///
/// The reward part uses the policy gradient theorem,
/// `dR/dtheta(s,b) = rho(s) pi(b|s) (Q(s,b) - V(s))`; the regularizer part
/// is the chain rule `J^T grad phi(eta)`.
pub fn policy_gradient(m: &Mdp, params: &SoftmaxParams, obj: &Objective) -> Result<DVector<f64>> {
    check_param_dims(m, params)?;
    let pi = softmax_policy(params);
    let b = mdp::bellman_data(m, &pi)?;
    let mut grad = DVector::from_iterator(
        m.n_sa(),
        (0..m.n_sa()).map(|i| {
            let s = i / m.n_actions;
            // Q(s,a) - V(s) as sum_c pi(c|s) (Q(s,a) - Q(s,c)) avoids cancelling
            // two nearly equal values when pi(.|s) is almost deterministic.
            let adv: f64 = (0..m.n_actions)
                .map(|c| pi.prob(s, c) * (b.q[i] - b.q[m.sa(s, c)]))
                .sum();
            b.rho[s] * pi.probs[i] * adv
        }),
    );
    if let Some(p) = obj.active() {
        let eta = mdp::state_action_frequency(m, &pi)?.eta;
        let jac = jacobian_from_parts(m, &pi, &b.rho)?;
        grad -= jac.transpose() * p.gradient(&eta)? * obj.lambda;
    }
    Ok(grad)
}

/// Jacobian of `theta -> eta_theta`; rows are indexed by `(s, a)` of `eta`,
/// columns by `(s, a)` of `theta`.
pub fn jacobian_eta(m: &Mdp, params: &SoftmaxParams) -> Result<DMatrix<f64>> {
    check_param_dims(m, params)?;
    let pi = softmax_policy(params);
    let rho = mdp::discounted_state_distribution(m, &pi)?;
    jacobian_from_parts(m, &pi, &rho)
}

pub fn gram_matrix(m: &Mdp, params: &SoftmaxParams, geo: &GeometrySpec) -> Result<DMatrix<f64>> {
    PolicyState::new(m, params, &Objective::unregularized())?.gram(m, geo)
}

/// Fisher information of the state distribution,
/// `sum_s (d rho(s))(d rho(s))^T / rho(s)`.
pub fn state_fisher(m: &Mdp, params: &SoftmaxParams) -> Result<DMatrix<f64>> {
    let st = PolicyState::new(m, params, &Objective::unregularized())?;
    let d_rho = marginal_jacobian(&st.jacobian, m.n_states, m.n_actions);
    let mut f = DMatrix::zeros(m.n_sa(), m.n_sa());
    for s in 0..m.n_states {
        let row = d_rho.row(s);
        f += row.transpose() * row / st.rho[s];
    }
    Ok(f)
}

pub fn npg_direction(
    m: &Mdp,
    params: &SoftmaxParams,
    geo: &GeometrySpec,
    obj: &Objective,
) -> Result<DVector<f64>> {
    PolicyState::new(m, params, obj)?.direction(m, geo)
}

/// Riemannian gradient of the objective on the polytope for the Hessian
/// metric of `phi`: the unique `u` in the tangent space with
/// `u^T hess phi v = grad^T v` for all tangent `v`.
pub fn riemannian_gradient(
    m: &Mdp,
    eta: &DVector<f64>,
    phi: &Potential,
    obj: &Objective,
) -> Result<DVector<f64>> {
    let basis = m.tangent_basis();
    let h = phi.hessian(eta)?;
    let reduced = basis.transpose() * h * &basis;
    let rhs = basis.transpose() * obj.gradient(m, eta)?;
    let coords = linalg::solve(reduced, &rhs, "reduced metric")?;
    Ok(basis * coords)
}
