use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use npg_core::dynamics::{self, StepController};
use npg_core::harness::{run_sweep, ExperimentConfig, RunSummary, StopSettings, SweepSummary};
use npg_core::mdp::{self, Mdp, Policy};
use npg_core::{oracle, Error, GeometrySpec, Potential, Result, SoftmaxParams};

#[derive(Parser)]
#[command(name = "npg-lab", version, about = "Natural policy gradient experiments on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a policy: state-action frequency, reward, Q and V.
    Solve {
        mdp: PathBuf,
        /// JSON array of per-state action distributions.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Optimal reward and maximizers by enumerating deterministic policies.
    Oracle { mdp: PathBuf },
    /// Integrate a natural policy gradient flow from random initializations.
    Flow {
        mdp: PathBuf,
        #[command(flatten)]
        run: FlowArgs,
    },
    /// Regularized NPG with step 1/lambda, reporting the error per iteration.
    Newton {
        mdp: PathBuf,
        /// Geometry whose potential is also the regularizer, e.g. `sigma:1`.
        #[arg(long, default_value = "sigma:1")]
        geometry: String,
        #[arg(long)]
        lambda: f64,
        /// Fixed step size instead of 1/lambda.
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
    },
    /// Run an experiment sweep described by a TOML config.
    Sweep { config: PathBuf },
}

#[derive(Args)]
struct FlowArgs {
    /// `vanilla`, `kakade`, `morimura`, `sigma:<s>` or `hessian:<potential>`.
    #[arg(long, default_value = "kakade")]
    geometry: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// `sigma:<s>` or `conditional_entropy`; required when lambda > 0.
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long, default_value_t = 30)]
    inits: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "flow_out")]
    out: PathBuf,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    gap_tol: Option<f64>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    base_dt: Option<f64>,
    /// Cap on the parameter step length.
    #[arg(long)]
    max_step: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("JSON output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Solve { mdp, policy } => solve(&mdp, &policy),
        Command::Oracle { mdp } => {
            let m = Mdp::from_path(&mdp)?;
            Ok(serde_json::to_value(oracle::enumerate_optimum(&m)?)?)
        }
        Command::Flow { mdp, run } => flow(mdp, run),
        Command::Newton {
            mdp,
            geometry,
            lambda,
            step,
            max_iters,
        } => newton(&mdp, &geometry, lambda, step, max_iters),
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            Ok(sweep_overview(&cfg, &run_sweep(&cfg)?))
        }
    }
}

fn solve(mdp_path: &Path, policy_path: &Path) -> Result<serde_json::Value> {
    let m = Mdp::from_path(mdp_path)?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(policy_path)?)?;
    let pi = Policy::from_rows(rows)?;
    let eta = mdp::state_action_frequency(&m, &pi)?.eta;
    let b = mdp::bellman_data(&m, &pi)?;
    Ok(json!({
        "eta": eta.as_slice(),
        "reward": eta.dot(&m.reward_vector()),
        "q": b.q.as_slice(),
        "v": b.v.as_slice(),
        "rho": b.rho.as_slice(),
    }))
}

fn flow(mdp_path: PathBuf, a: FlowArgs) -> Result<serde_json::Value> {
    let mut controller = StepController::default();
    if let Some(dt) = a.base_dt {
        controller.base_dt = dt;
    }
    if let Some(step) = a.max_step {
        controller.max_param_step = step;
    }
    let d = StopSettings::default();
    let cfg = ExperimentConfig {
        mdp_path,
        methods: vec![a.geometry],
        lambda: a.lambda,
        regularizer: a.regularizer,
        n_inits: a.inits,
        seed: a.seed,
        controller,
        stop: StopSettings {
            max_iters: a.max_iters.unwrap_or(d.max_iters),
            gap_tol: a.gap_tol.unwrap_or(d.gap_tol),
            grad_tol: a.grad_tol.unwrap_or(d.grad_tol),
        },
        output_dir: a.out,
    };
    Ok(sweep_overview(&cfg, &run_sweep(&cfg)?))
}

fn sweep_overview(cfg: &ExperimentConfig, s: &SweepSummary) -> serde_json::Value {
    let methods: Vec<_> = s
        .methods
        .iter()
        .map(|m| {
            let median = |pick: &dyn Fn(&RunSummary) -> Option<f64>| {
                let mut xs: Vec<f64> = m.runs.iter().filter_map(pick).collect();
                xs.sort_by(f64::total_cmp);
                xs.get(xs.len() / 2).copied()
            };
            json!({
                "method": m.method,
                "status_counts": m.status_counts,
                "median_exponential_slope": median(&|r| r.exponential.as_ref().map(|f| f.slope)),
                "median_power_law_slope": median(&|r| r.power_law.as_ref().map(|f| f.slope)),
            })
        })
        .collect();
    json!({
        "reference": s.reference,
        "output_dir": cfg.output_dir,
        "summary": cfg.output_dir.join("summary.json"),
        "methods": methods,
    })
}

fn newton(mdp_path: &Path, geometry: &str, lambda: f64, step: Option<f64>, max_iters: usize) -> Result<serde_json::Value> {
    let m = Mdp::from_path(mdp_path)?;
    let geo = GeometrySpec::parse(geometry, m.n_states, m.n_actions)?;
    let phi: Potential = geo
        .potential(m.n_states, m.n_actions)
        .ok_or_else(|| Error::Config(format!("geometry {geometry} has no potential to regularize with")))?;
    let theta0 = SoftmaxParams::zeros(m.n_states, m.n_actions);
    let report = match step {
        None => dynamics::regularized_npg_newton(&m, &theta0, &phi, lambda, max_iters)?,
        Some(step) => {
            if step.is_nan() || step <= 0.0 {
                return Err(Error::Config(format!("step must be positive, got {step}")));
            }
            dynamics::regularized_npg_iteration(&m, &theta0, &phi, lambda, step, max_iters)?
        }
    };
    let mut out = serde_json::to_value(&report)?;
    out["regularizer"] = json!(phi.to_string());
    out["lambda"] = json!(lambda);
    out["optimum"] = json!(report.reference.as_slice());
    Ok(out)
}

