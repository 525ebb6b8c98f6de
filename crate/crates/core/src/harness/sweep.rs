use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::fit::{fit_rate, RateFit, RateModel};
use crate::dynamics::{integrate_flow, Status, StepController, StopCriteria, Trajectory};
use crate::error::Result;
use crate::mdp::Mdp;
use crate::npg::{GeometrySpec, Objective, SoftmaxParams};
use crate::oracle;

/// `n` parameter vectors with i.i.d. standard normal entries.
pub fn random_initializations(n: usize, n_states: usize, n_actions: usize, seed: u64) -> Vec<SoftmaxParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let theta = nalgebra::DVector::from_fn(n_states * n_actions, |_, _| StandardNormal.sample(&mut rng));
            SoftmaxParams::new(theta, n_actions)
        })
        .collect()
}

/// Integrates one geometry from every initialization, in parallel.
pub fn run_method(
    m: &Mdp,
    geo: &GeometrySpec,
    obj: &Objective,
    inits: &[SoftmaxParams],
    ctrl: &StepController,
    stop: &StopCriteria,
) -> Vec<Result<Trajectory>> {
    inits
        .par_iter()
        .map(|theta0| integrate_flow(m, theta0, geo, obj, ctrl, stop))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub init: usize,
    pub status: Option<Status>,
    pub error: Option<String>,
    pub records: usize,
    pub final_t: Option<f64>,
    pub final_gap: Option<f64>,
    pub exponential: Option<RateFit>,
    pub power_law: Option<RateFit>,
    pub csv: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Number of runs per status label (`error` for failed runs).
    pub status_counts: BTreeMap<String, usize>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub mdp_path: PathBuf,
    pub lambda: f64,
    pub regularizer: Option<String>,
    pub seed: u64,
    pub n_inits: usize,
    /// `R*` from enumeration, or `R*_lambda` from the regularized oracle.
    pub reference: f64,
    pub methods: Vec<MethodSummary>,
}

/// Optimal value used for gaps: `R*` for `lambda = 0`, else `R*_lambda`.
pub fn reference_value(m: &Mdp, obj: &Objective) -> Result<f64> {
    match obj.active() {
        Some(phi) => Ok(oracle::regularized_optimum(m, phi, obj.lambda)?.value),
        None => Ok(oracle::enumerate_optimum(m)?.optimal_value),
    }
}

/// Runs every method from the same initializations, writes one CSV per run
/// and `summary.json` into the output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let m = Mdp::from_path(&cfg.mdp_path)?;
    let geos = cfg.geometries(m.n_states, m.n_actions)?;
    let obj = cfg.objective(m.n_states, m.n_actions)?;
    let reference = reference_value(&m, &obj)?;
    let stop = cfg.stop.with_reference(Some(reference));
    let inits = random_initializations(cfg.n_inits, m.n_states, m.n_actions, cfg.seed);
    std::fs::create_dir_all(&cfg.output_dir)?;

    let jobs: Vec<(usize, usize)> = (0..geos.len())
        .flat_map(|g| (0..inits.len()).map(move |i| (g, i)))
        .collect();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(g, i)| {
            let name = format!("{}_init{:03}.csv", file_stem(&cfg.methods[g]), i);
            match integrate_flow(&m, &inits[i], &geos[g], &obj, &cfg.controller, &stop) {
                Ok(traj) => summarize(i, &traj, m.n_actions, &cfg.output_dir.join(&name), name),
                Err(e) => failed(i, e.to_string()),
            }
        })
        .collect();

    let mut runs = runs.into_iter();
    let methods = cfg
        .methods
        .iter()
        .map(|method| {
            let runs: Vec<RunSummary> = runs.by_ref().take(inits.len()).collect();
            let mut status_counts = BTreeMap::new();
            for r in &runs {
                let label = r.status.as_ref().map_or("error", Status::label);
                *status_counts.entry(label.to_string()).or_insert(0) += 1;
            }
            MethodSummary {
                method: method.clone(),
                status_counts,
                runs,
            }
        })
        .collect();

    let summary = SweepSummary {
        mdp_path: cfg.mdp_path.clone(),
        lambda: cfg.lambda,
        regularizer: cfg.regularizer.clone(),
        seed: cfg.seed,
        n_inits: cfg.n_inits,
        reference,
        methods,
    };
    std::fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn summarize(init: usize, traj: &Trajectory, n_actions: usize, path: &Path, name: String) -> RunSummary {
    let last = traj.final_record();
    let (csv, error) = match write_trajectory_csv(traj, n_actions, path) {
        Ok(()) => (Some(name), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunSummary {
        init,
        status: Some(traj.status.clone()),
        error,
        records: traj.records.len(),
        final_t: Some(last.t),
        final_gap: last.gap,
        exponential: fit_rate(traj, RateModel::Exponential).ok(),
        power_law: fit_rate(traj, RateModel::PowerLaw).ok(),
        csv,
    }
}

fn failed(init: usize, error: String) -> RunSummary {
    RunSummary {
        init,
        status: None,
        error: Some(error),
        records: 0,
        final_t: None,
        final_gap: None,
        exponential: None,
        power_law: None,
        csv: None,
    }
}

fn file_stem(method: &str) -> String {
    method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Columns `t, theta_s_a..., eta_s_a..., pi_s_a..., reward, gap`.
pub fn write_trajectory_csv(traj: &Trajectory, n_actions: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_sa = traj.records[0].theta.len();
    let mut header = vec!["t".to_string()];
    for prefix in ["theta", "eta", "pi"] {
        header.extend((0..n_sa).map(|i| format!("{prefix}_{}_{}", i / n_actions, i % n_actions)));
    }
    header.push("reward".into());
    header.push("gap".into());
    w.write_record(&header)?;
    for r in &traj.records {
        let mut row = vec![format!("{:e}", r.t)];
        row.extend(r.theta.iter().map(|x| format!("{x:e}")));
        row.extend(r.eta.iter().map(|x| format!("{x:e}")));
        row.extend(r.pi.iter().map(|x| format!("{x:e}")));
        row.push(format!("{:e}", r.reward));
        row.push(r.gap.map_or(String::new(), |g| format!("{g:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
