//! Finite discounted MDPs, tabular policies and state-action frequencies.
//!
//! State-action pairs are flattened as `s * n_actions + a` everywhere in the
//! crate. The state-action frequency of a policy is the normalized discounted
//! occupancy measure
//!
//! ```text
//! eta(s, a) = (1 - gamma) * sum_t gamma^t P(s_t = s, a_t = a)
//! ```
//!
//! so that the reward `R(pi) = <r, eta>` is normalized and the set of all
//! frequencies is a polytope cut out by one linear equation per state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for row-stochastic checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance for polytope feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// A finite MDP with discount `gamma` and initial distribution `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Transition probabilities, flattened as `[(s * n_actions + a) * n_states + s']`.
    pub alpha: Vec<f64>,
    /// Instantaneous rewards indexed by `s * n_actions + a`.
    pub r: Vec<f64>,
    pub gamma: f64,
    pub mu: Vec<f64>,
}

/// JSON layout of an MDP: nested arrays `alpha[s][a][s']` and `r[s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    pub mu: Vec<f64>,
}

impl TryFrom<MdpDocument> for Mdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if doc.alpha.len() != ns || doc.r.len() != ns {
            return Err(Error::Dimension(format!(
                "alpha and r need {ns} state rows, got {} and {}",
                doc.alpha.len(),
                doc.r.len()
            )));
        }
        let mut alpha = Vec::with_capacity(ns * na * ns);
        let mut r = Vec::with_capacity(ns * na);
        for s in 0..ns {
            if doc.alpha[s].len() != na || doc.r[s].len() != na {
                return Err(Error::Dimension(format!("state {s} needs {na} action entries")));
            }
            for a in 0..na {
                if doc.alpha[s][a].len() != ns {
                    return Err(Error::Dimension(format!(
                        "alpha[{s}][{a}] needs {ns} next-state entries"
                    )));
                }
                alpha.extend_from_slice(&doc.alpha[s][a]);
                r.push(doc.r[s][a]);
            }
        }
        Mdp::new(ns, na, alpha, r, doc.gamma, doc.mu)
    }
}

impl From<Mdp> for MdpDocument {
    fn from(m: Mdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        let alpha = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let base = (s * na + a) * ns;
                        m.alpha[base..base + ns].to_vec()
                    })
                    .collect()
            })
            .collect();
        let r = (0..ns).map(|s| m.r[s * na..(s + 1) * na].to_vec()).collect();
        MdpDocument {
            n_states: ns,
            n_actions: na,
            alpha,
            r,
            gamma: m.gamma,
            mu: m.mu,
        }
    }
}

/// Which sufficient condition for strictly positive state marginals holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositivityCondition {
    /// `mu > 0` entrywise.
    InitialDistribution,
    /// `alpha > 0` entrywise (with `gamma > 0`).
    Transitions,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        alpha: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let m = Mdp {
            n_states,
            n_actions,
            alpha,
            r,
            gamma,
            mu,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serializes")
    }

    #[inline]
    pub fn n_sa(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.alpha[self.sa(s, a) * self.n_states + next]
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.r)
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::Dimension("need at least one state and one action".into()));
        }
        if self.alpha.len() != ns * na * ns {
            return Err(Error::Dimension(format!(
                "alpha has {} entries, expected {}",
                self.alpha.len(),
                ns * na * ns
            )));
        }
        if self.r.len() != ns * na {
            return Err(Error::Dimension(format!(
                "r has {} entries, expected {}",
                self.r.len(),
                ns * na
            )));
        }
        if self.mu.len() != ns {
            return Err(Error::Dimension(format!(
                "mu has {} entries, expected {ns}",
                self.mu.len()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::DiscountOutOfRange(self.gamma));
        }
        if let Some(i) = self.r.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                index: i,
                value: self.r[i],
            });
        }
        for row in 0..ns * na {
            let slice = &self.alpha[row * ns..(row + 1) * ns];
            check_probability_row(slice, "alpha", row)?;
        }
        check_probability_row(&self.mu, "mu", 0)?;
        Ok(())
    }

    /// Reports which sufficient condition guarantees positive state marginals
    /// for every policy, if any.
    pub fn positivity_condition(&self) -> Option<PositivityCondition> {
        if self.mu.iter().all(|&m| m > 0.0) {
            Some(PositivityCondition::InitialDistribution)
        } else if self.alpha.iter().all(|&p| p > 0.0) {
            Some(PositivityCondition::Transitions)
        } else {
            None
        }
    }

    /// Matrix `C` with `(C eta)_s = sum_a eta(s,a) - gamma sum_{s',a'} eta(s',a') alpha(s|s',a')`.
    ///
    /// The polytope is `{eta >= 0 : C eta = (1 - gamma) mu}` and its tangent
    /// space is `ker C`.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut c = DMatrix::zeros(ns, ns * na);
        for s_from in 0..ns {
            for a in 0..na {
                let col = self.sa(s_from, a);
                c[(s_from, col)] += 1.0;
                for s in 0..ns {
                    c[(s, col)] -= self.gamma * self.transition(s_from, a, s);
                }
            }
        }
        c
    }

    /// Orthonormal basis of the tangent space of the state-action polytope.
    pub fn tangent_basis(&self) -> DMatrix<f64> {
        linalg::kernel_basis(&self.constraint_matrix())
    }
}

fn check_probability_row(row: &[f64], field: &'static str, index: usize) -> Result<()> {
    for (i, &p) in row.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::NegativeEntry {
                field,
                index: index * row.len() + i,
                value: p,
            });
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::RowNotStochastic {
            field,
            row: index,
            sum,
        });
    }
    Ok(())
}

/// Free-function form of [`Mdp::validate`].
pub fn validate_mdp(m: &Mdp) -> Result<()> {
    m.validate()
}

/// A tabular policy `pi(a|s)`, stored row-major by state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            check_probability_row(&probs[s * n_actions..(s + 1) * n_actions], "policy", s)?;
        }
        Ok(Policy {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Parses a nested `[s][a]` array.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ns = rows.len();
        let na = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != na) {
            return Err(Error::Dimension("ragged policy rows".into()));
        }
        Self::new(ns, na, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.n_actions).map(<[f64]>::to_vec).collect()
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// The deterministic policy choosing `choices[s]` in state `s`.
    pub fn deterministic(n_actions: usize, choices: &[usize]) -> Self {
        let mut probs = vec![0.0; choices.len() * n_actions];
        for (s, &a) in choices.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Policy {
            n_states: choices.len(),
            n_actions,
            probs,
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.probs)
    }

    fn check_dims(&self, m: &Mdp) -> Result<()> {
        if self.n_states != m.n_states || self.n_actions != m.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, m.n_states, m.n_actions
            )));
        }
        Ok(())
    }
}

/// A point of the state-action polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionFrequency {
    pub eta: DVector<f64>,
}

impl StateActionFrequency {
    pub fn new(eta: DVector<f64>) -> Self {
        StateActionFrequency { eta }
    }

    /// State marginal `rho(s) = sum_a eta(s,a)`.
    pub fn marginal(&self, n_actions: usize) -> DVector<f64> {
        state_marginal(&self.eta, n_actions)
    }

    /// Checks nonnegativity, normalization and the polytope equations.
    pub fn check(&self, m: &Mdp, tol: f64) -> bool {
        self.eta.len() == m.n_sa()
            && self.eta.iter().all(|&v| v >= -tol)
            && (self.eta.sum() - 1.0).abs() <= tol
            && polytope_residuals(m, &self.eta).amax() <= tol
    }

    pub fn is_interior(&self) -> bool {
        self.eta.iter().all(|&v| v > 0.0)
    }
}

pub fn state_marginal(eta: &DVector<f64>, n_actions: usize) -> DVector<f64> {
    let ns = eta.len() / n_actions;
    DVector::from_iterator(
        ns,
        (0..ns).map(|s| eta.rows(s * n_actions, n_actions).sum()),
    )
}

/// Value functions and state marginal of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanData {
    /// `Q = (I - gamma P_pi)^{-1} r`, not normalized by `1 - gamma`.
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub rho: DVector<f64>,
}

/// State-action kernel `P((s',a')|(s,a)) = alpha(s'|s,a) pi(a'|s')` and state
/// kernel `p(s'|s) = sum_a pi(a|s) alpha(s'|s,a)`.
pub fn transition_kernels(m: &Mdp, pi: &Policy) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    pi.check_dims(m)?;
    let (ns, na) = (m.n_states, m.n_actions);
    let mut big = DMatrix::zeros(ns * na, ns * na);
    let mut small = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let row = m.sa(s, a);
            for s2 in 0..ns {
                let p = m.transition(s, a, s2);
                if p == 0.0 {
                    continue;
                }
                small[(s, s2)] += pi.prob(s, a) * p;
                for a2 in 0..na {
                    big[(row, m.sa(s2, a2))] = p * pi.prob(s2, a2);
                }
            }
        }
    }
    Ok((big, small))
}

/// Discounted state-action frequency of `pi`.
///
/// Solves the state-level system `rho = (1 - gamma)(I - gamma p_pi^T)^{-1} mu`
/// and sets `eta(s,a) = rho(s) pi(a|s)`, which is equivalent to the
/// state-action resolvent but keeps exact zeros for deterministic actions.
pub fn state_action_frequency(m: &Mdp, pi: &Policy) -> Result<StateActionFrequency> {
    let rho = discounted_state_distribution(m, pi)?;
    let na = m.n_actions;
    let eta = DVector::from_iterator(m.n_sa(), (0..m.n_sa()).map(|i| rho[i / na] * pi.probs[i]));
    Ok(StateActionFrequency { eta })
}

pub(crate) fn discounted_state_distribution(m: &Mdp, pi: &Policy) -> Result<DVector<f64>> {
    pi.check_dims(m)?;
    let ns = m.n_states;
    let mut lhs = DMatrix::identity(ns, ns);
    for s in 0..ns {
        for a in 0..m.n_actions {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for s2 in 0..ns {
                // (I - gamma p^T)[s2, s]
                lhs[(s2, s)] -= m.gamma * w * m.transition(s, a, s2);
            }
        }
    }
    let rhs = DVector::from_column_slice(&m.mu) * (1.0 - m.gamma);
    let rho = linalg::solve(lhs, &rhs, "discounted state distribution")?;
    Ok(rho.map(|v| v.max(0.0)))
}

/// Residuals `l_s(eta)` of the polytope equations.
pub fn polytope_residuals(m: &Mdp, eta: &DVector<f64>) -> DVector<f64> {
    m.constraint_matrix() * eta - DVector::from_column_slice(&m.mu) * (1.0 - m.gamma)
}

/// Inverse of `pi -> eta^pi`: `pi(a|s) = eta(s,a) / rho(s)`.
pub fn conditioning(m: &Mdp, eta: &StateActionFrequency) -> Result<Policy> {
    if eta.eta.len() != m.n_sa() {
        return Err(Error::Dimension(format!(
            "eta has {} entries, expected {}",
            eta.eta.len(),
            m.n_sa()
        )));
    }
    let na = m.n_actions;
    let rho = eta.marginal(na);
    let mut probs = Vec::with_capacity(m.n_sa());
    for s in 0..m.n_states {
        if !(rho[s] > 0.0) {
            return Err(Error::ZeroMarginal { state: s });
        }
        for a in 0..na {
            probs.push(eta.eta[m.sa(s, a)].max(0.0) / rho[s]);
        }
    }
    Ok(Policy {
        n_states: m.n_states,
        n_actions: na,
        probs,
    })
}

/// Q, V and the state marginal of `pi`.
pub fn bellman_data(m: &Mdp, pi: &Policy) -> Result<BellmanData> {
    let (big, _) = transition_kernels(m, pi)?;
    let n = m.n_sa();
    let lhs = DMatrix::identity(n, n) - big * m.gamma;
    let q = linalg::solve(lhs, &m.reward_vector(), "state-action values")?;
    let v = DVector::from_iterator(
        m.n_states,
        (0..m.n_states).map(|s| (0..m.n_actions).map(|a| pi.prob(s, a) * q[m.sa(s, a)]).sum()),
    );
    let rho = discounted_state_distribution(m, pi)?;
    Ok(BellmanData { q, v, rho })
}

/// Normalized discounted reward `<r, eta^pi>`.
pub fn reward(m: &Mdp, pi: &Policy) -> Result<f64> {
    Ok(state_action_frequency(m, pi)?.eta.dot(&m.reward_vector()))
}

/// The two-state, two-action example MDP with `gamma = 0.9` and
/// `mu = (0.2, 0.8)`.
pub const KAKADE_TWO_STATE_JSON: &str = include_str!("../data/kakade_two_state.json");

pub fn kakade_two_state() -> Mdp {
    Mdp::from_json_str(KAKADE_TWO_STATE_JSON).expect("bundled MDP is valid")
}

/// A random MDP with strictly positive transitions and initial
/// distribution, rewards uniform in `[0, 1)`.
pub fn random_mdp<R: rand::Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<Mdp> {
    let mut alpha = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = row.iter().sum();
        alpha.extend(row.iter().map(|x| x / total));
    }
    let r = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    let mu: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = mu.iter().sum();
    Mdp::new(n_states, n_actions, alpha, r, gamma, mu.iter().map(|x| x / total).collect())
}
