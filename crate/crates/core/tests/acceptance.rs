//! Acceptance gates on the two-state example and on random small MDPs.
//!
//! Prints one PASS/FAIL line per criterion and fails if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use npg_core::dynamics::{self, Status, StepController, StopCriteria, Trajectory};
use npg_core::geometry;
use npg_core::harness::{fit_rate, random_initializations, run_method, RateModel};
use npg_core::mdp::{self, Mdp, Policy};
use npg_core::npg::{self, PolicyState};
use npg_core::{bregman_divergence, kakade_two_state, oracle, GeometrySpec, Objective, Potential, SoftmaxParams};

const N_INITS: usize = 30;
const SEED: u64 = 7;
const R_STAR: f64 = 1.84;

struct Gate {
    passed: Vec<bool>,
    records_checked: usize,
    infeasible_records: usize,
}

impl Gate {
    fn report(&mut self, n: usize, name: &str, ok: bool, elapsed: Duration, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict}  {name} [{:.3?}] {detail}", elapsed);
        self.passed.push(ok);
    }

    fn check_feasible(&mut self, m: &Mdp, trajectories: &[Trajectory]) {
        for tr in trajectories {
            for r in &tr.records {
                self.records_checked += 1;
                if !dynamics::record_is_feasible(m, &r.eta) {
                    self.infeasible_records += 1;
                }
            }
        }
    }
}

fn flows(m: &Mdp, geo: &GeometrySpec, obj: &Objective, reference: f64) -> Vec<Trajectory> {
    let inits = random_initializations(N_INITS, m.n_states, m.n_actions, SEED);
    let stop = StopCriteria {
        reference: Some(reference),
        ..StopCriteria::default()
    };
    run_method(m, geo, obj, &inits, &StepController::default(), &stop)
        .into_iter()
        .map(|r| r.expect("flow runs"))
        .collect()
}

/// Exponential fit with r^2 >= 0.98 and slope < -0.01, plus
/// `gap(t) <= 1.05 D_phi(eta*, eta_0) / t` on every record.
fn linear_rate_gate(gate: &mut Gate, n: usize, name: &str, geo: GeometrySpec, phi: Potential) {
    let start = Instant::now();
    let m = kakade_two_state();
    let eta_star = oracle::enumerate_optimum(&m).unwrap().maximizers[0].eta.clone();
    let trs = flows(&m, &geo, &Objective::unregularized(), R_STAR);
    let elapsed = start.elapsed();
    gate.check_feasible(&m, &trs);
    let mut fitted = 0;
    let mut bound_ok = 0;
    let mut worst_ratio = 0.0_f64;
    for tr in &trs {
        if fit_rate(tr, RateModel::Exponential).is_ok_and(|f| f.r_squared >= 0.98 && f.slope < -0.01) {
            fitted += 1;
        }
        let d = bregman_divergence(&phi, &eta_star, &tr.records[0].eta).unwrap().value();
        let ratio = tr
            .records
            .iter()
            .filter(|r| r.t > 0.0)
            .map(|r| r.gap.unwrap() * r.t / d)
            .fold(0.0_f64, f64::max);
        worst_ratio = worst_ratio.max(ratio);
        if ratio <= 1.05 {
            bound_ok += 1;
        }
    }
    let ok = fitted >= 27 && bound_ok == N_INITS && elapsed < Duration::from_secs(10);
    gate.report(
        n,
        name,
        ok,
        elapsed,
        format!("exponential fits {fitted}/30 (need 27), Bregman bound held on {bound_ok}/30, max gap*t/D = {worst_ratio:.3}"),
    );
}

fn criterion_1(gate: &mut Gate) {
    let m = kakade_two_state();
    let start = Instant::now();
    let res = oracle::enumerate_optimum(&m).unwrap();
    let elapsed = start.elapsed();
    let expect = [0.0, 0.92, 0.08, 0.0];
    let eta_ok = res.maximizers.first().is_some_and(|x| {
        x.eta.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1e-10)
    });
    let ok = (res.optimal_value - R_STAR).abs() <= 1e-10 && res.is_unique && eta_ok && elapsed < Duration::from_millis(1);
    gate.report(
        1,
        "oracle ground truth",
        ok,
        elapsed,
        format!("R* = {}, unique = {}, eta* = {:?}", res.optimal_value, res.is_unique, res.maximizers[0].eta.as_slice()),
    );
}

fn criterion_4(gate: &mut Gate) {
    let start = Instant::now();
    let m = kakade_two_state();
    let mut ok = true;
    let mut detail = Vec::new();
    for sigma in [1.5, 2.0, 3.0] {
        let trs = flows(&m, &GeometrySpec::Sigma(sigma), &Objective::unregularized(), R_STAR);
        gate.check_feasible(&m, &trs);
        let target = -1.0 / (sigma - 1.0);
        let hits = trs
            .iter()
            .filter(|tr| fit_rate(tr, RateModel::PowerLaw).is_ok_and(|f| (f.slope - target).abs() <= 0.3))
            .count();
        ok &= hits >= 24;
        detail.push(format!("sigma {sigma}: {hits}/30 slopes within 0.3 of {target:.2}"));
    }
    gate.report(4, "sigma-NPG power-law rates", ok, start.elapsed(), detail.join(", "));
}

fn criterion_5(gate: &mut Gate) {
    let start = Instant::now();
    let m = kakade_two_state();
    let trs = flows(&m, &GeometrySpec::Vanilla, &Objective::unregularized(), R_STAR);
    gate.check_feasible(&m, &trs);
    let hits = trs
        .iter()
        .filter(|tr| fit_rate(tr, RateModel::PowerLaw).is_ok_and(|f| (f.slope + 1.0).abs() <= 0.3))
        .count();
    gate.report(
        5,
        "vanilla PG sublinear rate",
        hits >= 24,
        start.elapsed(),
        format!("{hits}/30 power-law slopes within 0.3 of -1 (need 24)"),
    );
}

fn criterion_6(gate: &mut Gate) {
    let start = Instant::now();
    let m = kakade_two_state();
    let mut ok = true;
    let mut detail = Vec::new();
    for sigma in [-0.5, 0.0, 0.5] {
        let trs = flows(&m, &GeometrySpec::Sigma(sigma), &Objective::unregularized(), R_STAR);
        gate.check_feasible(&m, &trs);
        let hits = trs
            .iter()
            .filter(|tr| {
                matches!(tr.status, Status::BoundaryHit { time, .. } if time.is_finite())
                    && tr.final_record().gap.is_some_and(|g| g <= 1e-6)
            })
            .count();
        ok &= hits >= 27;
        detail.push(format!("sigma {sigma}: {hits}/30"));
    }
    gate.report(
        6,
        "boundary hit and finite-time convergence for sigma < 1",
        ok,
        start.elapsed(),
        detail.join(", "),
    );
}

fn criterion_7(gate: &mut Gate) {
    let start = Instant::now();
    let m = kakade_two_state();
    let lambda = 0.1;
    let mut ok = true;
    let mut detail = Vec::new();
    for phi in [Potential::Sigma(1.0), Potential::conditional_entropy(2, 2)] {
        let reference = oracle::regularized_optimum(&m, &phi, lambda).unwrap().value;
        let obj = Objective::regularized(lambda, phi.clone());
        let trs = flows(&m, &GeometrySpec::HessianOf(phi.clone()), &obj, reference);
        gate.check_feasible(&m, &trs);
        let fits: Vec<_> = trs.iter().map(|tr| fit_rate(tr, RateModel::Exponential).ok()).collect();
        let good = fits
            .iter()
            .filter(|f| f.as_ref().is_some_and(|f| f.r_squared >= 0.98 && -f.slope >= 0.5 * lambda))
            .count();
        let slowest = fits.iter().flatten().map(|f| -f.slope).fold(f64::INFINITY, f64::min);
        ok &= good == N_INITS;
        detail.push(format!("{phi}: {good}/30, slowest decay {slowest:.3}"));
    }
    gate.report(7, "regularized linear convergence", ok, start.elapsed(), detail.join(", "));
}

fn criterion_8(gate: &mut Gate) {
    let start = Instant::now();
    let m = kakade_two_state();
    let mut ok = true;
    let mut detail = Vec::new();
    for phi in [Potential::Sigma(1.0), Potential::conditional_entropy(2, 2)] {
        for lambda in [0.05, 0.1] {
            let rep = dynamics::regularized_npg_newton(&m, &SoftmaxParams::zeros(2, 2), &phi, lambda, 50).unwrap();
            ok &= rep.quadratic_flag;
            detail.push(format!(
                "{phi} lambda {lambda}: flag {} C {:.3e} after {} iterations",
                rep.quadratic_flag,
                rep.tail_constant.unwrap_or(f64::NAN),
                rep.errors.len() - 1
            ));
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    // Informational: the step size taken literally as lambda.
    let literal = dynamics::regularized_npg_iteration(&m, &SoftmaxParams::zeros(2, 2), &Potential::Sigma(1.0), 0.1, 0.1, 50).unwrap();
    detail.push(format!(
        "(info: step = lambda = 0.1 for sigma:1 leaves error {:.2e} after 50 iterations, flag {})",
        literal.errors.last().unwrap(),
        literal.quadratic_flag
    ));
    gate.report(8, "locally quadratic convergence of regularized NPG", ok, elapsed, detail.join(", "));
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Mdp, SoftmaxParams) {
    let n_states = rng.random_range(1..=4);
    let n_actions = rng.random_range(2..=4);
    let gamma = rng.random_range(0.5..0.95);
    let m = mdp::random_mdp(rng, n_states, n_actions, gamma).unwrap();
    let theta = random_initializations(1, n_states, n_actions, rng.random()).remove(0);
    (m, theta)
}

fn criterion_9(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut fisher_err, mut pullback_err, mut push_err) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let (m, theta) = random_instance(&mut rng);
        let ce = Potential::conditional_entropy(m.n_states, m.n_actions);
        let g_k = npg::gram_matrix(&m, &theta, &GeometrySpec::Kakade).unwrap();
        let g_m = npg::gram_matrix(&m, &theta, &GeometrySpec::Morimura).unwrap();
        let f_rho = npg::state_fisher(&m, &theta).unwrap();
        fisher_err = fisher_err.max((&g_k - (g_m - f_rho)).amax());
        let g_ce = npg::gram_matrix(&m, &theta, &GeometrySpec::HessianOf(ce.clone())).unwrap();
        pullback_err = pullback_err.max((&g_k - g_ce).amax());

        let obj = Objective::unregularized();
        let st = PolicyState::new(&m, &theta, &obj).unwrap();
        let geos = [
            (GeometrySpec::Kakade, ce.clone()),
            (GeometrySpec::Morimura, Potential::Sigma(1.0)),
            (GeometrySpec::Sigma(-0.5), Potential::Sigma(-0.5)),
            (GeometrySpec::Sigma(0.0), Potential::Sigma(0.0)),
            (GeometrySpec::Sigma(0.5), Potential::Sigma(0.5)),
            (GeometrySpec::Sigma(1.5), Potential::Sigma(1.5)),
            (GeometrySpec::Sigma(2.0), Potential::Sigma(2.0)),
            (GeometrySpec::HessianOf(ce.clone()), ce.clone()),
        ];
        for (geo, phi) in geos {
            let pushed = &st.jacobian * st.direction(&m, &geo).unwrap();
            let u = npg::riemannian_gradient(&m, &st.eta, &phi, &obj).unwrap();
            push_err = push_err.max((pushed - &u).amax() / u.amax().max(1.0));
        }
    }
    let ok = fisher_err <= 1e-9 && pullback_err <= 1e-9 && push_err <= 1e-7;
    gate.report(
        9,
        "structural identities on 50 random instances",
        ok,
        start.elapsed(),
        format!("G_K - (G_M - F_rho): {fisher_err:.1e}, G_K - G_CE: {pullback_err:.1e}, pushforward: {push_err:.1e}"),
    );
}

fn fd_gradient(m: &Mdp, theta: &SoftmaxParams, obj: &Objective) -> DVector<f64> {
    let value = |th: &DVector<f64>| {
        let pi = npg::softmax_policy(&SoftmaxParams::new(th.clone(), m.n_actions));
        obj.value(m, &mdp::state_action_frequency(m, &pi).unwrap().eta).unwrap()
    };
    DVector::from_fn(theta.theta.len(), |i, _| {
        let h = 1e-5;
        let mut plus = theta.theta.clone();
        let mut minus = theta.theta.clone();
        plus[i] += h;
        minus[i] -= h;
        (value(&plus) - value(&minus)) / (2.0 * h)
    })
}

/// Central differences of a vector function, one column per coordinate.
fn fd_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> npg_core::Result<DVector<f64>>,
{
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|i| {
            let h = geometry::fd_step(x[i]);
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus).unwrap() - f(&minus).unwrap()) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> Policy {
    let rows = (0..n_states)
        .map(|_| {
            let row: Vec<f64> = (0..n_actions).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = row.iter().sum();
            row.iter().map(|x| x / total).collect()
        })
        .collect();
    Policy::from_rows(rows).unwrap()
}

fn criterion_10(gate: &mut Gate, suite_start: Instant) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut failures = Vec::new();

    let mut grad_err = 0.0_f64;
    let mut roundtrip_err = 0.0_f64;
    for k in 0..50 {
        let (m, theta) = random_instance(&mut rng);
        let obj = if k % 2 == 0 {
            Objective::unregularized()
        } else {
            Objective::regularized(0.3, Potential::conditional_entropy(m.n_states, m.n_actions))
        };
        let g = npg::policy_gradient(&m, &theta, &obj).unwrap();
        let fd = fd_gradient(&m, &theta, &obj);
        grad_err = grad_err.max((&g - fd).norm() / g.norm().max(1e-3));

        let pi = random_policy(&mut rng, m.n_states, m.n_actions);
        let eta = mdp::state_action_frequency(&m, &pi).unwrap();
        let back = mdp::conditioning(&m, &eta).unwrap();
        roundtrip_err = roundtrip_err.max((back.as_vector() - pi.as_vector()).amax());
    }

    // Interior points away from zero: for sigma = 3 the central-difference
    // truncation error of x^-3 exceeds the absolute tolerance below x ~ 0.1.
    let (mut phi_grad_err, mut hess_err, mut bregman_err) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let (n_states, n_actions) = (rng.random_range(1..=3), rng.random_range(2..=3));
        let x = DVector::from_fn(n_states * n_actions, |_, _| rng.random_range(0.2..1.0));
        for phi in [
            Potential::Sigma(-0.5),
            Potential::Sigma(0.5),
            Potential::Sigma(1.0),
            Potential::Sigma(1.5),
            Potential::Sigma(2.0),
            Potential::Sigma(3.0),
            Potential::conditional_entropy(n_states, n_actions),
        ] {
            let grad = phi.gradient(&x).unwrap();
            let fd = fd_jacobian(|y| Ok(DVector::from_element(1, phi.value(y)?)), &x).transpose().column(0).into_owned();
            phi_grad_err = phi_grad_err.max((&grad - fd).norm() / grad.norm().max(1e-3));
            let h = phi.hessian(&x).unwrap();
            let fd_h = fd_jacobian(|y| phi.gradient(y), &x);
            hess_err = hess_err.max((fd_h - &h).amax());
            let (second, first) = geometry::hessian_of_bregman_check(&phi, &x).unwrap();
            bregman_err = bregman_err.max((second - &h).amax().max((first - &h).amax()));
        }
    }
    if grad_err > 1e-6 {
        failures.push(format!("policy gradient FD error {grad_err:.1e}"));
    }
    if phi_grad_err > 1e-6 {
        failures.push(format!("potential gradient FD error {phi_grad_err:.1e}"));
    }
    if hess_err > 1e-5 {
        failures.push(format!("Hessian FD error {hess_err:.1e}"));
    }
    if bregman_err > 1e-4 {
        failures.push(format!("Bregman-Hessian error {bregman_err:.1e}"));
    }
    if roundtrip_err > 1e-10 {
        failures.push(format!("conditioning round trip error {roundtrip_err:.1e}"));
    }

    // Euler consistency: a parameter step and a state-action step agree to
    // second order in dt.
    let m = kakade_two_state();
    let obj = Objective::unregularized();
    let mut ratios = Vec::new();
    for phi in [Potential::Sigma(1.0), Potential::Sigma(2.0), Potential::conditional_entropy(2, 2)] {
        let geo = GeometrySpec::HessianOf(phi.clone());
        for theta in random_initializations(5, 2, 2, SEED + 2) {
            let st = PolicyState::new(&m, &theta, &obj).unwrap();
            let d = st.direction(&m, &geo).unwrap();
            let gaps: Vec<f64> = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
                .iter()
                .map(|&dt| {
                    let p = SoftmaxParams::new(&theta.theta + &d * dt, 2);
                    let param = mdp::state_action_frequency(&m, &npg::softmax_policy(&p)).unwrap().eta;
                    let direct = dynamics::riemannian_flow_step_state_action(&m, &mdp::StateActionFrequency::new(st.eta.clone()), &phi, &obj, dt)
                        .unwrap()
                        .eta;
                    (param - direct).norm()
                })
                .collect();
            ratios.extend(gaps.windows(2).map(|w| w[0] / w[1]));
        }
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if mean_ratio < 3.5 {
        failures.push(format!("Euler consistency ratio {mean_ratio:.2}"));
    }
    if gate.infeasible_records > 0 {
        failures.push(format!("{} infeasible trajectory records", gate.infeasible_records));
    }
    let suite = suite_start.elapsed();
    if suite > Duration::from_secs(60) {
        failures.push(format!("suite took {suite:.1?}"));
    }
    let detail = format!(
        "policy gradient FD {grad_err:.1e}, potential gradient FD {phi_grad_err:.1e}, Hessian FD {hess_err:.1e}, Bregman-Hessian {bregman_err:.1e}, round trip {roundtrip_err:.1e}, \
         Euler halving ratio {mean_ratio:.2}, {} trajectory records feasible{}",
        gate.records_checked - gate.infeasible_records,
        if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
    );
    gate.report(10, "property suite", failures.is_empty(), start.elapsed(), detail);
}

#[test]
fn acceptance_criteria() {
    let suite_start = Instant::now();
    let mut gate = Gate {
        passed: Vec::new(),
        records_checked: 0,
        infeasible_records: 0,
    };
    criterion_1(&mut gate);
    let m = kakade_two_state();
    linear_rate_gate(
        &mut gate,
        2,
        "Kakade NPG linear rate",
        GeometrySpec::Kakade,
        Potential::conditional_entropy(m.n_states, m.n_actions),
    );
    linear_rate_gate(&mut gate, 3, "Morimura NPG linear rate", GeometrySpec::Sigma(1.0), Potential::Sigma(1.0));
    criterion_4(&mut gate);
    criterion_5(&mut gate);
    criterion_6(&mut gate);
    criterion_7(&mut gate);
    criterion_8(&mut gate);
    criterion_9(&mut gate);
    criterion_10(&mut gate, suite_start);
    let failed: Vec<usize> = gate
        .passed
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
