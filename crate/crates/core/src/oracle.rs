//! Ground truth by brute force: the unregularized optimum is attained at a
//! vertex of the state-action polytope, and vertices are the frequencies of
//! deterministic policies.

use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics;
use crate::error::{Error, Result};
use crate::geometry::Potential;
use crate::mdp::{self, Mdp, Policy};
use crate::npg::Objective;

pub const MAX_DETERMINISTIC_POLICIES: f64 = 1e6;
/// Values within this distance of the best count as ties.
pub const TIE_TOL: f64 = 1e-12;
/// Projected-gradient tolerance for [`regularized_optimum`].
pub const REGULARIZED_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Serialize)]
pub struct Maximizer {
    /// Chosen action per state.
    pub actions: Vec<usize>,
    #[serde(serialize_with = "serialize_vector")]
    pub eta: DVector<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub optimal_value: f64,
    pub maximizers: Vec<Maximizer>,
    pub is_unique: bool,
}

fn serialize_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Number of deterministic policies, or an error above the scale guard.
pub fn deterministic_policy_count(m: &Mdp) -> Result<usize> {
    let count = (m.n_actions as f64).powi(m.n_states as i32);
    if count > MAX_DETERMINISTIC_POLICIES {
        return Err(Error::ScaleGuard(count));
    }
    Ok(count as usize)
}

fn decode(mut index: usize, n_states: usize, n_actions: usize) -> Vec<usize> {
    (0..n_states)
        .map(|_| {
            let a = index % n_actions;
            index /= n_actions;
            a
        })
        .collect()
}

/// Frequencies of all deterministic policies, in enumeration order.
pub fn vertices(m: &Mdp) -> Result<Vec<(Vec<usize>, DVector<f64>)>> {
    let count = deterministic_policy_count(m)?;
    (0..count)
        .map(|i| {
            let actions = decode(i, m.n_states, m.n_actions);
            let eta = mdp::state_action_frequency(m, &Policy::deterministic(m.n_actions, &actions))?.eta;
            Ok((actions, eta))
        })
        .collect()
}

pub fn enumerate_optimum(m: &Mdp) -> Result<OracleResult> {
    let r = m.reward_vector();
    let scored: Vec<(Vec<usize>, DVector<f64>, f64)> = vertices(m)?
        .into_iter()
        .map(|(a, eta)| {
            let v = eta.dot(&r);
            (a, eta, v)
        })
        .collect();
    let best = scored.iter().map(|x| x.2).fold(f64::NEG_INFINITY, f64::max);
    let maximizers: Vec<Maximizer> = scored
        .into_iter()
        .filter(|x| x.2 >= best - TIE_TOL)
        .map(|(actions, eta, _)| Maximizer { actions, eta })
        .collect();
    Ok(OracleResult {
        optimal_value: best,
        is_unique: maximizers.len() == 1,
        maximizers,
    })
}

#[derive(Debug, Clone)]
pub struct RegularizedOptimum {
    pub eta: DVector<f64>,
    pub value: f64,
}

/// Maximizer of `<r, eta> - lambda phi(eta)` over the polytope, by damped
/// projected Newton from the frequency of the uniform policy.
pub fn regularized_optimum(m: &Mdp, phi: &Potential, lambda: f64) -> Result<RegularizedOptimum> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let start = mdp::state_action_frequency(m, &Policy::uniform(m.n_states, m.n_actions))?.eta;
    let eta = dynamics::newton_fixed_point(m, &start, phi, lambda, REGULARIZED_TOL, 500)?;
    let value = Objective::regularized(lambda, phi.clone()).value(m, &eta)?;
    Ok(RegularizedOptimum { eta, value })
}
