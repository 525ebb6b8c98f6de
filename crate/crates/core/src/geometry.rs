//! Convex potentials on the positive orthant and the Hessian geometries they
//! induce on the state-action polytope.
//!
//! All potentials are stored as convex functions:
//!
//! * `Sigma(s)`: `sum x log x` for `s = 1`, `-sum log x` for `s = 2` and
//!   `sum x^(2-s) / ((2-s)(1-s))` otherwise. The Hessian is `diag(x^-s)`.
//! * `ConditionalEntropy`: `sum_{s,a} eta log(eta / rho)`, the negative
//!   conditional entropy of the state-action distribution given the state.
//! * `Custom`: user supplied value, gradient and Hessian.
//!
//! `0 log 0` is taken to be exactly zero.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Callbacks for a user-defined potential. Implementations must be reentrant.
pub trait CustomPotential: Send + Sync {
    fn name(&self) -> String {
        "custom".to_string()
    }
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Clone)]
pub enum Potential {
    Sigma(f64),
    ConditionalEntropy { n_states: usize, n_actions: usize },
    Custom(Arc<dyn CustomPotential>),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Sigma(s) => write!(f, "Sigma({s})"),
            Potential::ConditionalEntropy { n_states, n_actions } => {
                write!(f, "ConditionalEntropy({n_states}x{n_actions})")
            }
            Potential::Custom(c) => write!(f, "Custom({})", c.name()),
        }
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Sigma(s) => write!(f, "sigma:{s}"),
            Potential::ConditionalEntropy { .. } => write!(f, "conditional_entropy"),
            Potential::Custom(c) => write!(f, "{}", c.name()),
        }
    }
}

/// A Bregman divergence value; `+inf` when the first argument lies where the
/// potential is infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BregmanValue(pub f64);

impl BregmanValue {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl Potential {
    /// Parses `sigma:<float>` or `conditional_entropy`.
    pub fn parse(spec: &str, n_states: usize, n_actions: usize) -> Result<Self> {
        let spec = spec.trim();
        if spec == "conditional_entropy" {
            return Ok(Potential::ConditionalEntropy { n_states, n_actions });
        }
        if let Some(rest) = spec.strip_prefix("sigma:") {
            let s: f64 = rest
                .parse()
                .map_err(|_| Error::Parse(format!("bad sigma value in {spec:?}")))?;
            if !s.is_finite() {
                return Err(Error::Parse(format!("sigma must be finite in {spec:?}")));
            }
            return Ok(Potential::Sigma(s));
        }
        Err(Error::Parse(format!(
            "unknown potential {spec:?}; expected sigma:<float> or conditional_entropy"
        )))
    }

    pub fn conditional_entropy(n_states: usize, n_actions: usize) -> Self {
        Potential::ConditionalEntropy { n_states, n_actions }
    }

    /// Whether the gradient blows up at the boundary of the polytope, which
    /// keeps the induced flows in the interior for all time.
    pub fn is_legendre(&self) -> bool {
        match self {
            Potential::Sigma(s) => *s >= 1.0,
            Potential::ConditionalEntropy { .. } => true,
            Potential::Custom(_) => false,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            Potential::Sigma(s) => {
                let v = sigma_value(*s, x)?;
                if v.is_infinite() {
                    let i = x.iter().position(|&xi| xi <= 0.0).unwrap_or(0);
                    return Err(Error::Domain { index: i, value: x[i] });
                }
                Ok(v)
            }
            Potential::ConditionalEntropy { n_actions, .. } => {
                self.check_layout(x)?;
                conditional_entropy_value(x, *n_actions)
            }
            Potential::Custom(c) => c.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Potential::Sigma(s) => {
                let s = *s;
                if s > 0.0 {
                    require_positive(x)?;
                }
                Ok(x.map(|xi| sigma_derivative(s, xi)))
            }
            Potential::ConditionalEntropy { n_actions, .. } => {
                self.check_layout(x)?;
                require_positive(x)?;
                let rho = crate::mdp::state_marginal(x, *n_actions);
                Ok(DVector::from_iterator(
                    x.len(),
                    (0..x.len()).map(|i| (x[i] / rho[i / n_actions]).ln()),
                ))
            }
            Potential::Custom(c) => c.gradient(x),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Potential::Sigma(s) => {
                let s = *s;
                if s > 0.0 {
                    require_positive(x)?;
                }
                Ok(DMatrix::from_diagonal(&x.map(|xi| xi.abs().powf(-s))))
            }
            Potential::ConditionalEntropy { n_actions, .. } => {
                self.check_layout(x)?;
                require_positive(x)?;
                let na = *n_actions;
                let rho = crate::mdp::state_marginal(x, na);
                let mut h = DMatrix::zeros(x.len(), x.len());
                for s in 0..rho.len() {
                    for a in 0..na {
                        for b in 0..na {
                            let (i, j) = (s * na + a, s * na + b);
                            h[(i, j)] = if a == b { 1.0 / x[i] } else { 0.0 } - 1.0 / rho[s];
                        }
                    }
                }
                Ok(h)
            }
            Potential::Custom(c) => c.hessian(x),
        }
    }

    /// Diagonal of the Hessian when it is diagonal (the sigma family).
    pub fn diagonal_hessian(&self, x: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        match self {
            Potential::Sigma(s) => {
                if *s > 0.0 {
                    require_positive(x)?;
                }
                Ok(Some(x.map(|xi| xi.abs().powf(-*s))))
            }
            _ => Ok(None),
        }
    }

    /// Value on the closure of the domain: zero entries are allowed and may
    /// produce `+inf`.
    fn closure_value(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            Potential::Sigma(s) => sigma_value(*s, x),
            Potential::ConditionalEntropy { n_actions, .. } => {
                self.check_layout(x)?;
                conditional_entropy_value(x, *n_actions)
            }
            Potential::Custom(c) => c.value(x),
        }
    }

    fn check_layout(&self, x: &DVector<f64>) -> Result<()> {
        if let Potential::ConditionalEntropy { n_states, n_actions } = self {
            if x.len() != n_states * n_actions {
                return Err(Error::Dimension(format!(
                    "conditional entropy expects {} entries, got {}",
                    n_states * n_actions,
                    x.len()
                )));
            }
        }
        Ok(())
    }
}

fn require_positive(x: &DVector<f64>) -> Result<()> {
    match x.iter().position(|&v| !(v > 0.0)) {
        Some(i) => Err(Error::Domain { index: i, value: x[i] }),
        None => Ok(()),
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn sigma_value(s: f64, x: &DVector<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() || (xi < 0.0 && s > 0.0) {
            return Err(Error::Domain { index: i, value: xi });
        }
        total += if s == 1.0 {
            xlogx(xi)
        } else if s == 2.0 {
            if xi == 0.0 {
                f64::INFINITY
            } else {
                -xi.ln()
            }
        } else {
            // |x| extends the power to negative entries for s <= 0
            let p = 2.0 - s;
            if xi == 0.0 && p < 0.0 {
                f64::INFINITY
            } else {
                xi.abs().powf(p) / (p * (1.0 - s))
            }
        };
    }
    Ok(total)
}

fn sigma_derivative(s: f64, xi: f64) -> f64 {
    if s == 1.0 {
        xi.ln() + 1.0
    } else if s == 2.0 {
        -1.0 / xi
    } else {
        xi.signum() * xi.abs().powf(1.0 - s) / (1.0 - s)
    }
}

fn conditional_entropy_value(x: &DVector<f64>, n_actions: usize) -> Result<f64> {
    if let Some(i) = x.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain { index: i, value: x[i] });
    }
    let rho = crate::mdp::state_marginal(x, n_actions);
    Ok(x.iter().copied().map(xlogx).sum::<f64>() - rho.iter().copied().map(xlogx).sum::<f64>())
}

pub fn potential_value(phi: &Potential, x: &DVector<f64>) -> Result<f64> {
    phi.value(x)
}

pub fn potential_gradient(phi: &Potential, x: &DVector<f64>) -> Result<DVector<f64>> {
    phi.gradient(x)
}

pub fn potential_hessian(phi: &Potential, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    phi.hessian(x)
}

/// `D(x, y) = phi(x) - phi(y) - <grad phi(y), x - y>`.
///
/// `x` may sit on the boundary of the domain; the divergence is `+inf`
/// where `phi(x)` is.
pub fn bregman_divergence(phi: &Potential, x: &DVector<f64>, y: &DVector<f64>) -> Result<BregmanValue> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {} entries", x.len(), y.len())));
    }
    let value = match phi {
        Potential::Sigma(s) if *s == 1.0 => {
            require_positive(y)?;
            if let Some(i) = x.iter().position(|&v| v < 0.0) {
                return Err(Error::Domain { index: i, value: x[i] });
            }
            x.iter()
                .zip(y.iter())
                .map(|(&xi, &yi)| xlogx(xi) - xi * yi.ln() - xi + yi)
                .sum()
        }
        Potential::ConditionalEntropy { n_actions, .. } => {
            phi.check_layout(x)?;
            require_positive(y)?;
            conditional_relative_entropy(x, y, *n_actions)?
        }
        _ => {
            let fx = phi.closure_value(x)?;
            if fx.is_infinite() {
                return Ok(BregmanValue(f64::INFINITY));
            }
            let fy = phi.value(y)?;
            let gy = phi.gradient(y)?;
            fx - fy - gy.dot(&(x - y))
        }
    };
    Ok(BregmanValue(value.max(0.0)))
}

/// `sum_s rho_x(s) KL(pi_x(.|s) || pi_y(.|s))`, written per entry as
/// `x log((x / rho_x) / (y / rho_y))`.
fn conditional_relative_entropy(x: &DVector<f64>, y: &DVector<f64>, na: usize) -> Result<f64> {
    if let Some(i) = x.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Domain { index: i, value: x[i] });
    }
    let rx = crate::mdp::state_marginal(x, na);
    let ry = crate::mdp::state_marginal(y, na);
    let mut total = 0.0;
    for i in 0..x.len() {
        if x[i] > 0.0 {
            let s = i / na;
            total += x[i] * ((x[i] / rx[s]) / (y[i] / ry[s])).ln();
        }
    }
    Ok(total)
}

/// `v^T hess phi(x) w`.
pub fn metric_inner(phi: &Potential, x: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
    Ok(v.dot(&(phi.hessian(x)? * w)))
}

/// Finite-difference step used by the check utilities.
pub fn fd_step(xi: f64) -> f64 {
    1e-5 * xi.abs().max(1.0)
}

/// Central finite-difference Hessian of a scalar function.
pub fn fd_hessian<F>(f: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (hi, hj) = (fd_step(x[i]), fd_step(x[j]));
            let eval = |si: f64, sj: f64| -> Result<f64> {
                let mut y = x.clone();
                y[i] += si * hi;
                y[j] += sj * hj;
                f(&y)
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?)
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Finite-difference Hessians of `y -> D(x, y)` and `y -> D(y, x)` at
/// `y = x`. Both equal the Hessian of the potential at `x`.
pub fn hessian_of_bregman_check(phi: &Potential, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let second = fd_hessian(|y| bregman_raw(phi, x, y), x)?;
    let first = fd_hessian(|y| bregman_raw(phi, y, x), x)?;
    Ok((second, first))
}

/// Unclamped generic Bregman formula; finite differences need the signed
/// rounding noise around zero rather than a clamp.
fn bregman_raw(phi: &Potential, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(phi.value(x)? - phi.value(y)? - phi.gradient(y)?.dot(&(x - y)))
}
