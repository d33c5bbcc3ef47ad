//! Command-line driver: scenario loading, subcommands and artifact output.

pub mod criteria;
pub mod pipeline;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hypoflow_core::bogovskii::{poincare_constant, Slab, SlabWeights};
use hypoflow_core::coercivity::{build_test_functions, cutoff_gram_floor, lambda1_global};
use hypoflow_core::decay::recursion_verify;
use hypoflow_core::evolution::evolve;
use hypoflow_core::grid::fmt17;
use hypoflow_core::ledger::ledger_csv;
use hypoflow_core::scenario::{default_initial, ScenarioConfig};
use hypoflow_core::steady::hypothesis1_constants;
use hypoflow_core::{compute_stationary, HypoError, SpaceTimeVectorField};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] HypoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("acceptance criteria failed: {0:?}")]
    SelftestFailed(Vec<u8>),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "Io",
            CliError::ThreadPool(_) => "ThreadPool",
            CliError::SelftestFailed(_) => "SelftestFailed",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

/// TOML record written to stderr on failure.
pub fn error_record(e: &CliError) -> String {
    let rec = ErrorRecord { error: ErrorBody { kind: e.kind(), message: e.to_string() } };
    toml::to_string(&rec).expect("error record serializes")
}

#[derive(Debug, Parser)]
#[command(name = "hypoflow", version, about = "Decay certificates for 1D kinetic Fokker-Planck and BGK equations")]
pub struct Cli {
    /// Scenario file; the bundled default when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for randomized checks; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Halve all mesh widths this many times.
    #[arg(long, global = true, default_value_t = 0)]
    pub refine: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Stationary state, weight and background constants.
    Steady,
    /// Trajectory over `run.windows` windows with energy balance.
    Evolve,
    /// Local coercivity constant and test function report.
    Coercivity,
    /// Space-time divergence solve and `lambda_2` under refinement.
    Bogovskii,
    /// Full decay certificate with a fitted rate for comparison.
    Certify,
    /// Synthetic recursion checks and the weak confinement scenario.
    Recursion,
    /// Acceptance criteria 1 to 9.
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Steady => "steady",
            Command::Evolve => "evolve",
            Command::Coercivity => "coercivity",
            Command::Bogovskii => "bogovskii",
            Command::Certify => "certify",
            Command::Recursion => "recursion",
            Command::Selftest => "selftest",
        }
    }
}

/// Scenario with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    Ok(cfg.refined(cli.refine))
}

/// Writes artifacts into one directory, each stamped with the config hash.
pub struct Output {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path, cfg: &ScenarioConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), hash: cfg.hash(), files: Vec::new() })
    }

    /// Text file with a leading `# config_hash = ...` comment line.
    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let mut s = format!("# config_hash = {}\n", self.hash);
        s.push_str(body);
        std::fs::write(self.dir.join(name), s)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn field(&mut self, name: &str, f: &hypoflow_core::PhaseField) -> Result<()> {
        f.save(&self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes the resolved config and a manifest naming every artifact.
    pub fn finish(mut self, command: Command, cfg: &ScenarioConfig) -> Result<()> {
        self.text("config.toml", &cfg.to_toml())?;
        let mut m = String::new();
        let _ = writeln!(m, "command = \"{}\"", command.name());
        let _ = writeln!(m, "config_hash = \"{}\"", self.hash);
        let _ = writeln!(m, "seed = {}", cfg.run.seed);
        let list: Vec<String> = self.files.iter().map(|f| format!("\"{f}\"")).collect();
        let _ = writeln!(m, "files = [{}]", list.join(", "));
        std::fs::write(self.dir.join("manifest.toml"), m)?;
        Ok(())
    }
}

struct Kv(String);

impl Kv {
    fn new() -> Self {
        Kv(String::new())
    }

    fn num(mut self, k: &str, v: f64) -> Self {
        let _ = writeln!(self.0, "{k} = {}", fmt17(v));
        self
    }

    fn int(mut self, k: &str, v: usize) -> Self {
        let _ = writeln!(self.0, "{k} = {v}");
        self
    }

    fn flag(mut self, k: &str, v: bool) -> Self {
        let _ = writeln!(self.0, "{k} = {v}");
        self
    }
}

/// Parse-free entry point used by `main` and the tests.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::ThreadPool(e.to_string()))?
            .install(|| dispatch(cli.command, &cfg, &out)),
        None => dispatch(cli.command, &cfg, &out),
    }
}

pub fn dispatch(command: Command, cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    log::info!("{} with config {}", command.name(), cfg.hash());
    let mut out = Output::new(dir, cfg)?;
    match command {
        Command::Steady => steady(cfg, &mut out)?,
        Command::Evolve => evolve_cmd(cfg, &mut out)?,
        Command::Coercivity => coercivity(cfg, &mut out)?,
        Command::Bogovskii => bogovskii(cfg, &mut out)?,
        Command::Certify => certify_cmd(cfg, &mut out)?,
        Command::Recursion => recursion(cfg, &mut out)?,
        Command::Selftest => return selftest(cfg, out),
    }
    out.finish(command, cfg)
}

fn state(cfg: &ScenarioConfig) -> Result<(hypoflow_core::KineticModel, hypoflow_core::StationaryState)> {
    let model = cfg.model()?;
    let state = compute_stationary(&model, cfg.run.steady_method, &cfg.steady_options())?;
    Ok((model, state))
}

fn steady(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let (model, s) = state(cfg)?;
    let (c_inf, c_reg) = hypothesis1_constants(&s, &model)?;
    out.text("steady.csv", &s.to_csv())?;
    let mut summary = s.summary();
    summary.push_str(&Kv::new().num("c_inf_check", c_inf).num("c_reg_check", c_reg).0);
    out.text("steady.toml", &summary)?;
    out.field("f_inf.bin", &s.f_inf)
}

fn evolve_cmd(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let (model, s) = state(cfg)?;
    let dt = cfg.time_step(&model);
    let steps = (cfg.grid.t_window / dt).round() as usize * cfg.run.windows;
    let f0 = default_initial(&s);
    let traj = evolve(&f0, &model, &s.f_inf, dt, steps, steps)?;
    out.text("trajectory.csv", &traj.to_csv())?;
    let last = traj.norm_sq.len() - 1;
    let kv = Kv::new()
        .num("dt", dt)
        .int("steps", steps)
        .num("initial_norm_sq", traj.norm_sq[0])
        .num("final_norm_sq", traj.norm_sq[last])
        .num("max_balance_defect", traj.max_balance_defect())
        .num("initial_mass_ratio", traj.initial_mass_ratio);
    out.text("evolve.toml", &kv.0)?;
    if let Some(f) = traj.final_field() {
        out.field("final.bin", f)?;
    }
    Ok(())
}

fn coercivity(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let (model, s) = state(cfg)?;
    let (lambda1, per) = lambda1_global(&s, &model)?;
    let tf = build_test_functions(&s, &model)?;
    let mut csv = String::from("x,lambda1\n");
    for (i, l) in per.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", fmt17(model.grid.x(i)), fmt17(*l));
    }
    out.text("lambda1.csv", &csv)?;
    let b = tf.bounds;
    let kv = Kv::new()
        .num("lambda1", lambda1)
        .num("c_inf", s.c_inf)
        .num("moment_defect", tf.moment_defect(&s))
        .num("moment_floor", tf.moment_floor())
        .num("cutoff_gram_floor", cutoff_gram_floor(&model.grid))
        .flag("support_in_unit_ball", tf.support_in_unit_ball())
        .num("sup_psi", b.sup_psi)
        .num("sup_dv_psi", b.sup_dv)
        .num("sup_dvv_psi", b.sup_dvv)
        .num("sup_dx_psi_over_sqrt_w", b.sup_dx_over_sqrt_w);
    out.text("coercivity.toml", &kv.0)
}

fn field_csv(f: &SpaceTimeVectorField) -> String {
    let s = &f.slab;
    let mut csv = String::from("component,k,i,t,x,value\n");
    for k in 0..=s.nt {
        for i in 0..s.nx {
            let _ = writeln!(csv, "0,{k},{i},{},{},{}", fmt17(k as f64 * s.tau()), fmt17(s.x(i)), fmt17(f.f0[k * s.nx + i]));
        }
    }
    let nf = s.n_xfaces();
    for k in 0..s.nt {
        for i in 0..nf {
            let _ = writeln!(csv, "1,{k},{i},{},{},{}", fmt17(s.t(k)), fmt17(s.x_face(i)), fmt17(f.f1[k * nf + i]));
        }
    }
    csv
}

fn bogovskii(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let mut csv = String::from("nx,lambda2,divergence_residual,boundary_max,patches\n");
    let mut finest = None;
    for shift in [2u32, 1, 0] {
        let r = criteria::bogovskii_level(cfg, shift)?;
        let lambda2 = r.lambda2.unwrap_or(f64::NAN);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            cfg.grid.nx >> shift,
            fmt17(lambda2),
            fmt17(r.divergence_residual),
            fmt17(r.boundary_max),
            r.patch_count
        );
        finest = Some(r);
    }
    let r = finest.expect("three levels");
    out.text("lambda2.csv", &csv)?;
    out.text("bogovskii_field.csv", &field_csv(&r.field))?;
    out.text("bogovskii_ledger.csv", &ledger_csv(&r.ledger))?;
    let model = cfg.model()?;
    let slab = Slab::over(&model.grid, Slab::default_nt(&model.grid))?;
    let cp = poincare_constant(&slab, &SlabWeights::uniform(&slab), &vec![1.0; slab.nx])?;
    let kv = Kv::new()
        .num("lambda2", r.lambda2.unwrap_or(f64::NAN))
        .num("mass_term", r.mass_term)
        .num("gradient_term", r.gradient_term)
        .num("source_norm_sq", r.source_norm_sq)
        .num("max_patch_mean", r.max_patch_mean)
        .int("poisson_iterations", r.poisson_iterations)
        .num("poincare_flat", cp.c_p);
    out.text("bogovskii.toml", &kv.0)
}

fn certify_cmd(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let (model, s) = state(cfg)?;
    let run = pipeline::certify_scenario(cfg, &model, &s)?;
    let cert = &run.certificate;
    let mut report = cert.report();
    report.push_str(&Kv::new().num("fit_residual", run.fit.residual).flag("fit_misfit", run.fit.misfit).0);
    out.text("certificate.toml", &report)?;
    out.text("certificate_ledger.csv", &cert.ledger_csv())?;
    let mut csv = String::from("t,relative_norm\n");
    for (t, y) in run.times.iter().zip(&run.y) {
        let _ = writeln!(csv, "{},{}", fmt17(*t), fmt17(*y));
    }
    out.text("rate_series.csv", &csv)
}

fn recursion(cfg: &ScenarioConfig, out: &mut Output) -> Result<()> {
    let mut csv = String::from("a,epsilon,implied_slack,telescoping_slack,tail_slope,target_slope,holds\n");
    for a in [0.25, 0.5, 1.0] {
        for eps in [0.1, 0.5] {
            let r = recursion_verify(1.0, eps, a, 10_000)?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                fmt17(a),
                fmt17(eps),
                fmt17(r.implied_slack),
                fmt17(r.telescoping_slack),
                fmt17(r.tail_slope),
                fmt17(r.target_slope()),
                r.inequalities_hold()
            );
            out.text(&format!("recursion_a{a}_eps{eps}.csv"), &r.to_csv())?;
        }
    }
    out.text("recursion_summary.csv", &csv)?;
    let rep = cfg.weak_scenario().run()?;
    out.text("weak_series.csv", &rep.series.to_csv())?;
    let kv = Kv::new()
        .num("fit_lambda", rep.fit.lambda)
        .num("fit_residual", rep.fit.residual)
        .flag("fit_misfit", rep.fit.misfit)
        .flag("monotone", rep.series.is_monotone())
        .num("epsilon", rep.epsilon)
        .num("interpolation_slack", rep.interpolation_slack)
        .num("moment_bound", rep.moments.c_k)
        .flag("moment_growing_at_end", rep.moments.growing_at_end);
    out.text("weak.toml", &kv.0)
}

/// Runs criteria 1 to 9 and writes their artifacts through `out`.
pub fn write_selftest(cfg: &ScenarioConfig, mut out: Output) -> Result<Vec<criteria::Outcome>> {
    let outcomes = criteria::run_suite(cfg)?;
    out.text("selftest.csv", &criteria::outcomes_csv(&outcomes))?;
    for o in &outcomes {
        for (name, body) in &o.artifacts {
            out.text(name, body)?;
        }
    }
    out.finish(Command::Selftest, cfg)?;
    Ok(outcomes)
}

fn selftest(cfg: &ScenarioConfig, out: Output) -> Result<()> {
    let outcomes = write_selftest(cfg, out)?;
    for o in &outcomes {
        println!("{}", o.summary_line());
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelftestFailed(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_record_round_trips() {
        let e = CliError::Core(HypoError::CflViolation { dt: 1.0, limit: 0.5 });
        let rec: toml::Table = toml::from_str(&error_record(&e)).unwrap();
        assert_eq!(rec["error"]["kind"].as_str(), Some("CflViolation"));
        assert!(rec["error"]["message"].as_str().unwrap().contains("CFL"));
        assert_eq!(CliError::SelftestFailed(vec![3]).kind(), "SelftestFailed");
    }

    #[test]
    fn flags_apply_to_the_config() {
        let cli = Cli::try_parse_from(["hypoflow", "certify", "--seed", "9", "--refine", "1", "--jobs", "3"]).unwrap();
        assert_eq!(cli.command, Command::Certify);
        assert_eq!(cli.jobs, Some(3));
        let cfg = resolve_config(&cli).unwrap();
        let base = ScenarioConfig::default();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.grid.nx, 2 * base.grid.nx);
        assert!(Cli::try_parse_from(["hypoflow", "frobnicate"]).is_err());
    }

    #[test]
    fn outcome_csv_is_timing_free() {
        let mut o = criteria::Outcome {
            id: 2,
            title: "t",
            lines: vec![hypoflow_core::LedgerLine::le("x", 1.0, 2.0)],
            budget: Some((60.0, true)),
            artifacts: Vec::new(),
        };
        let csv = criteria::outcomes_csv(std::slice::from_ref(&o));
        assert!(csv.contains("2,runtime_s,le,,6.0000000000000000e1,,true"));
        assert!(o.passed());
        o.budget = Some((60.0, false));
        assert!(!o.passed());
        assert!(o.summary_line().contains("fail"));
    }
}
