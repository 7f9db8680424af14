//! Experiment runner: configs in, traces, diagnostics CSVs and bound reports out.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    best_policy_report, bound_inputs, check_recursions, compute_diagnostics, evaluate_bounds, fill_prefix_bounds,
    sandwich_report, BoundInputs, BoundKind, BoundReport, BoundScalars, DiagnosticsRow, HOLD_TOL,
};
use crate::error::{Error, Result};
use crate::mdp::{fmt_f64, generate_garnet, mdp_to_value, parse_mdp, parse_mdp_value, GarnetParams, TabularMdp};
use crate::regularizer::PolicyRegularizer;
use crate::schemes::{run_scheme, IterationTrace, SchemeConfig, SchemeKind};

pub const CSV_HEADER: [&str; 9] = [
    "k",
    "loss_sup",
    "regret_sup",
    "eps_sup",
    "eps_prime_sup",
    "eps_prime_gap",
    "bellman_residual_sup",
    "bound_rhs",
    "alpha_k",
];

/// Garnet parameters; without `seed` each run uses its own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarnetSource {
    #[serde(flatten)]
    pub params: GarnetParams,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    Garnet(GarnetSource),
    /// Path to an MDP JSON file, relative to the config file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    pub scheme: SchemeConfig,
    /// Reports to evaluate; the scheme's defaults when absent.
    #[serde(default)]
    pub bounds: Option<Vec<BoundKind>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative MDP file paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let MdpSource::File(p) = &mut cfg.mdp {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.scheme.validate()?;
        if let MdpSource::Garnet(g) = &self.mdp {
            if !(g.params.gamma >= 0.0 && g.params.gamma < 1.0) {
                return Err(Error::Range(format!("gamma must lie in [0,1), got {}", g.params.gamma)));
            }
        }
        Ok(())
    }

    pub fn bound_kinds(&self) -> Vec<BoundKind> {
        self.bounds
            .clone()
            .unwrap_or_else(|| BoundKind::defaults(self.scheme.scheme, self.scheme.error.is_exact()))
    }

    pub fn build_mdp(&self, seed: u64) -> Result<TabularMdp> {
        match &self.mdp {
            MdpSource::Garnet(g) => generate_garnet(&g.params, g.seed.unwrap_or(seed)),
            MdpSource::File(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
                parse_mdp(&text)
            }
        }
    }
}

/// A trace together with what is needed to re-check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedTrace {
    pub mdp: serde_json::Value,
    pub bounds: Vec<BoundKind>,
    pub trace: IterationTrace,
}

impl SavedTrace {
    pub fn new(mdp: &TabularMdp, bounds: Vec<BoundKind>, trace: IterationTrace) -> Self {
        SavedTrace {
            mdp: mdp_to_value(mdp),
            bounds,
            trace,
        }
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        parse_mdp_value(self.mdp.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// Contents of a bound-report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub inputs: BoundScalars,
    pub reports: Vec<BoundReport>,
    /// Rows whose values contradict each other or their own prefix bound.
    pub inconsistencies: Vec<String>,
}

impl BoundCheck {
    pub fn passed(&self) -> bool {
        self.inconsistencies.is_empty() && self.reports.iter().all(|r| r.holds)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Row-level checks that need nothing beyond the diagnostics table.
pub fn row_inconsistencies(inputs: &BoundInputs) -> Vec<String> {
    let mut out = Vec::new();
    let mut recomputed = inputs.clone();
    fill_prefix_bounds(&mut recomputed);
    let mut prev_regret = 0.0;
    for (row, fresh) in inputs.rows.iter().zip(&recomputed.rows) {
        let k = row.k;
        if row.bound_rhs.to_bits() != fresh.bound_rhs.to_bits() {
            out.push(format!("k={k}: bound_rhs {} does not match recomputed {}", row.bound_rhs, fresh.bound_rhs));
        }
        let bounded = match inputs.scalars.scheme {
            SchemeKind::RegMpi => row.loss_sup,
            _ => row.regret_sup,
        };
        if bounded > fresh.bound_rhs + HOLD_TOL {
            out.push(format!("k={k}: {bounded} exceeds its prefix bound {}", fresh.bound_rhs));
        }
        if inputs.scalars.scheme != SchemeKind::RegMpi {
            // losses are nonnegative, so the regret dominates each loss and grows by at most it
            if row.loss_sup > row.regret_sup + HOLD_TOL {
                out.push(format!("k={k}: loss {} exceeds regret {}", row.loss_sup, row.regret_sup));
            }
            if row.regret_sup > prev_regret + row.loss_sup + HOLD_TOL {
                out.push(format!("k={k}: regret grew by more than the loss"));
            }
            prev_regret = row.regret_sup;
        }
    }
    out
}

/// Evaluates every requested report from a full trace.
pub fn check_trace(mdp: &TabularMdp, trace: &IterationTrace, kinds: &[BoundKind]) -> Result<BoundCheck> {
    let diag = compute_diagnostics(trace, mdp)?;
    let inputs = bound_inputs(trace, &diag)?;
    if diag.degenerate_optimum {
        log::info!("seed {}: the unregularized optimum has ties", trace.seed);
    }
    let direct: Vec<BoundKind> = kinds.iter().copied().filter(|k| k.from_inputs()).collect();
    let mut direct_reports = evaluate_bounds(&inputs, &direct)?.into_iter();
    let mut recursions: Option<Vec<BoundReport>> = None;
    let mut sandwich: Option<(BoundReport, BoundReport)> = None;
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let report = match kind {
            k if k.from_inputs() => direct_reports.next().expect("one report per direct kind"),
            BoundKind::BestPolicyLoss => best_policy_report(&diag, None)?,
            BoundKind::ResidualRecursion | BoundKind::ShiftRecursion | BoundKind::DistanceRecursion => {
                if recursions.is_none() {
                    recursions = Some(check_recursions(trace, mdp, &diag)?);
                }
                recursions
                    .as_ref()
                    .and_then(|rs| rs.iter().find(|r| r.bound == kind))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("{} is unavailable for this run", kind.name())))?
            }
            BoundKind::ValueSandwich | BoundKind::OriginalMdpPerformance => {
                if sandwich.is_none() {
                    let reg = PolicyRegularizer::Fixed(trace.base_regularizer()?);
                    let last = trace.policy(trace.len());
                    sandwich = Some(sandwich_report(mdp, &reg, last, trace.config.tol)?);
                }
                let (a, b) = sandwich.as_ref().expect("filled above");
                if kind == BoundKind::ValueSandwich { a.clone() } else { b.clone() }
            }
            _ => unreachable!("direct kinds handled above"),
        };
        reports.push(report);
    }
    let inconsistencies = row_inconsistencies(&inputs);
    Ok(BoundCheck {
        inputs: inputs.scalars,
        reports,
        inconsistencies,
    })
}

/// Re-evaluates the reports of a bound file against a diagnostics table.
pub fn check_diagnostics(scalars: &BoundScalars, rows: Vec<DiagnosticsRow>, kinds: &[BoundKind]) -> Result<BoundCheck> {
    if rows.is_empty() {
        return Err(Error::Shape("diagnostics table has no rows".into()));
    }
    let inputs = BoundInputs {
        scalars: scalars.clone(),
        rows,
    };
    let reports = evaluate_bounds(&inputs, kinds)?;
    let inconsistencies = row_inconsistencies(&inputs);
    Ok(BoundCheck {
        inputs: inputs.scalars,
        reports,
        inconsistencies,
    })
}

pub fn write_diagnostics_csv(rows: &[DiagnosticsRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        let fields = [
            r.k.to_string(),
            fmt_f64(r.loss_sup),
            fmt_f64(r.regret_sup),
            fmt_f64(r.eps_sup),
            fmt_f64(r.eps_prime_sup),
            fmt_f64(r.eps_prime_gap),
            fmt_f64(r.bellman_residual_sup),
            fmt_f64(r.bound_rhs),
            fmt_f64(r.alpha_k),
        ];
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        column: 0,
        message: e.to_string(),
    }
}

pub fn read_diagnostics_csv(text: &str) -> Result<Vec<DiagnosticsRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_error)?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            column: 0,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub check: BoundCheck,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.seeds.iter().all(|s| s.check.passed())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Runs one seed and writes its three files into `out`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedOutcome> {
    let mdp = config.build_mdp(seed)?;
    let mut scheme = config.scheme.clone();
    scheme.seed = seed;
    let kinds = config.bound_kinds();
    let trace = run_scheme(&mdp, &scheme)?;
    let check = check_trace(&mdp, &trace, &kinds)?;
    let diag = compute_diagnostics(&trace, &mdp)?;
    let rows = bound_inputs(&trace, &diag)?.rows;

    let trace_path = out.join(format!("trace_seed{seed}.json"));
    let csv_path = out.join(format!("diagnostics_seed{seed}.csv"));
    let bounds_path = out.join(format!("bounds_seed{seed}.json"));
    write_file(&trace_path, &SavedTrace::new(&mdp, kinds, trace).to_json())?;
    write_file(&csv_path, &write_diagnostics_csv(&rows))?;
    write_file(&bounds_path, &check.to_json())?;
    for r in &check.reports {
        log::info!("seed {seed}: {} margin {:e} holds {}", r.bound.name(), r.margin, r.holds);
    }
    Ok(SeedOutcome {
        seed,
        check,
        files: vec![trace_path, csv_path, bounds_path],
    })
}

/// Runs every seed on a pool of `jobs` threads; seeds never share output files.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let seeds = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(config, seed, out))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentOutcome { seeds })
}
