use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regmdp::analysis::BoundKind;
use regmdp::bellman::{optimal_value, EvalContext};
use regmdp::experiment::{
    check_diagnostics, check_trace, read_diagnostics_csv, run_experiment, BoundCheck, ExperimentConfig, SavedTrace,
};
use regmdp::extensions::{gradient_check, irl_round_trip, random_logits};
use regmdp::mdp::{generate_garnet, parse_mdp, serialize_mdp, GarnetParams, TabularMdp};
use regmdp::regularizer::{Regularizer, RegularizerKind};
use regmdp::Error;
use serde_json::json;

const EXIT_ERROR: u8 = 1;
const EXIT_VIOLATED: u8 = 2;
const GRADIENT_TOL: f64 = 1e-5;
const IRL_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "regmdp", version, about = "Regularized MDP solvers and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write traces, diagnostics and bound reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run this single seed instead of the config's list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print the regularized optimal value and policy.
    Solve {
        #[command(flatten)]
        mdp: MdpArgs,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Emit a Garnet MDP as JSON.
    Garnet {
        #[command(flatten)]
        garnet: GarnetArgs,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate bound reports from a saved trace, or from a diagnostics CSV and its report file.
    CheckBounds {
        #[arg(long, conflicts_with_all = ["csv", "report"])]
        trace: Option<PathBuf>,
        #[arg(long, requires = "report")]
        csv: Option<PathBuf>,
        #[arg(long, requires = "csv")]
        report: Option<PathBuf>,
        /// Comma-separated report names; defaults to those saved with the input.
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<String>>,
    },
    /// Compare the policy gradient with central finite differences at random logits.
    Gradcheck {
        #[command(flatten)]
        mdp: MdpArgs,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long, default_value_t = 0)]
        theta_seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Recover a reward from the regularized optimal policy and solve it again.
    Irl {
        #[command(flatten)]
        mdp: MdpArgs,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
}

#[derive(Args)]
struct GarnetArgs {
    #[arg(long)]
    states: usize,
    #[arg(long)]
    actions: usize,
    #[arg(long)]
    branching: usize,
    #[arg(long)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
}

impl GarnetArgs {
    fn build(&self) -> regmdp::Result<TabularMdp> {
        let params = GarnetParams::new(self.states, self.actions, self.branching, self.sparsity).gamma(self.gamma);
        generate_garnet(&params, self.seed)
    }
}

/// An MDP file, or Garnet parameters.
#[derive(Args)]
struct MdpArgs {
    #[arg(long, conflicts_with = "states")]
    mdp: Option<PathBuf>,
    #[arg(long, requires_all = ["actions", "branching", "sparsity"])]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
}

impl MdpArgs {
    fn build(&self) -> regmdp::Result<TabularMdp> {
        match (&self.mdp, self.states) {
            (Some(path), _) => parse_mdp(&read(path)?),
            (None, Some(states)) => GarnetArgs {
                states,
                actions: self.actions.unwrap_or_default(),
                branching: self.branching.unwrap_or_default(),
                sparsity: self.sparsity.unwrap_or_default(),
                seed: self.seed,
                gamma: self.gamma,
            }
            .build(),
            (None, None) => Err(Error::Config("give --mdp FILE or Garnet parameters".into())),
        }
    }
}

#[derive(Args)]
struct RegArgs {
    #[arg(long, value_enum, default_value = "entropy")]
    regularizer: RegName,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RegName {
    Entropy,
    KlUniform,
    Tsallis,
}

impl RegArgs {
    fn build(&self) -> regmdp::Result<Regularizer> {
        let kind = match self.regularizer {
            RegName::Entropy => RegularizerKind::NegativeEntropy,
            RegName::KlUniform => RegularizerKind::KlUniform,
            RegName::Tsallis => RegularizerKind::Tsallis,
        };
        Regularizer::new(kind, self.scale)
    }
}

fn read(path: &Path) -> regmdp::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> regmdp::Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_kinds(names: &[String]) -> regmdp::Result<Vec<BoundKind>> {
    names
        .iter()
        .map(|n| {
            serde_json::from_value(json!(n.trim())).map_err(|_| Error::Config(format!("unknown bound report `{n}`")))
        })
        .collect()
}

fn verdict(passed: bool) -> u8 {
    if passed {
        0
    } else {
        EXIT_VIOLATED
    }
}

fn report_check(check: &BoundCheck) -> u8 {
    print!("{}", check.to_json());
    for r in check.reports.iter().filter(|r| !r.holds) {
        eprintln!("violated: {} (lhs {:e} > rhs {:e})", r.bound.name(), r.lhs, r.rhs);
    }
    for msg in &check.inconsistencies {
        eprintln!("inconsistent: {msg}");
    }
    verdict(check.passed())
}

fn run(cli: Cli) -> regmdp::Result<u8> {
    match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
            let outcome = run_experiment(&cfg, &out, jobs)?;
            for seed in &outcome.seeds {
                let status = if seed.check.passed() { "pass" } else { "FAIL" };
                println!("seed {}: {status}", seed.seed);
                for r in &seed.check.reports {
                    println!("  {:<24} lhs {:>14.6e}  rhs {:>14.6e}  holds {}", r.bound.name(), r.lhs, r.rhs, r.holds);
                }
                for msg in &seed.check.inconsistencies {
                    println!("  inconsistent: {msg}");
                }
            }
            Ok(verdict(outcome.passed()))
        }
        Command::Solve { mdp, reg, tol } => {
            let mdp = mdp.build()?;
            let reg = reg.build()?;
            let (v, pi) = optimal_value(&EvalContext::new(&mdp, reg)?, tol)?;
            let policy: Vec<Vec<f64>> = pi.clone().into();
            let text = serde_json::to_string_pretty(&json!({ "value": v.0, "policy": policy }))?;
            println!("{text}");
            Ok(0)
        }
        Command::Garnet { garnet, out } => {
            let mdp = garnet.build()?;
            write_out(out.as_deref(), &serialize_mdp(&mdp))?;
            Ok(0)
        }
        Command::CheckBounds {
            trace,
            csv,
            report,
            bounds,
        } => {
            let kinds = bounds.as_deref().map(parse_kinds).transpose()?;
            let check = match (trace, csv, report) {
                (Some(path), _, _) => {
                    let saved = SavedTrace::from_json(&read(&path)?)?;
                    let kinds = kinds.unwrap_or_else(|| saved.bounds.clone());
                    check_trace(&saved.mdp()?, &saved.trace, &kinds)?
                }
                (None, Some(csv), Some(report)) => {
                    let stored = BoundCheck::from_json(&read(&report)?)?;
                    let rows = read_diagnostics_csv(&read(&csv)?)?;
                    let kinds = kinds.unwrap_or_else(|| stored.reports.iter().map(|r| r.bound).collect());
                    check_diagnostics(&stored.inputs, rows, &kinds)?
                }
                _ => return Err(Error::Config("give --trace FILE, or --csv FILE with --report FILE".into())),
            };
            Ok(report_check(&check))
        }
        Command::Gradcheck {
            mdp,
            reg,
            theta_seed,
            step,
        } => {
            let mdp = mdp.build()?;
            let reg = reg.build()?;
            let theta = random_logits(mdp.n_states(), mdp.n_actions(), theta_seed);
            let nu = vec![1.0 / mdp.n_states() as f64; mdp.n_states()];
            let check = gradient_check(&mdp, &reg, &theta, &nu, step)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "max_relative_error": check.max_relative_error,
                    "max_absolute_error": check.max_absolute_error,
                    "tolerance": GRADIENT_TOL,
                }))?
            );
            Ok(verdict(check.max_relative_error <= GRADIENT_TOL))
        }
        Command::Irl { mdp, reg, tol } => {
            let mdp = mdp.build()?;
            let reg = reg.build()?;
            let trip = irl_round_trip(&mdp, &reg, tol)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "max_tv": trip.max_tv,
                    "tolerance": IRL_TOL,
                    "canonical": trip.recovered.canonical,
                    "reward": trip.recovered.reward,
                }))?
            );
            Ok(verdict(trip.max_tv <= IRL_TOL))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("REGMDP_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
