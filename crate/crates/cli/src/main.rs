//! `cascade`: command-line driver.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 solver or I/O
//! failure, 3 verification failure.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use cascade_smp::adjoint::{write_adjoint_csv, write_adjoint_diag_csv, write_basis_csv};
use cascade_smp::control::standard_directions;
use cascade_smp::model::num;
use cascade_smp::riccati::write_riccati_csv;
use cascade_smp::rng::StreamDomain;
use cascade_smp::simulate::{estimate_cost_with, simulate_paths, write_paths_csv};
use cascade_smp::verify::{
    adjoint_under, bsde_row, check_partition, default_trials, stitch_rows, tower_row, ReportRow,
};
use cascade_smp::*;

const SCHEMA_VERSION: u32 = 1;
const PERTURBATION_MAGNITUDES: [f64; 2] = [0.05, 0.1];
const SUFFICIENT_SAMPLES: usize = 2000;
const CROSSCHECK_REL: f64 = 0.05;

#[derive(Parser)]
#[command(name = "cascade", version, about = "Maximum-principle solver for LQ control of networks with cascading defaults")]
struct Cli {
    /// Problem configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides mc.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides mc.num_paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Overrides mc.dt.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Worker threads. Changes speed only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paths under a named policy and write paths.csv.
    Simulate {
        #[arg(long, value_enum, default_value_t = PolicyName::Zero)]
        policy: PolicyName,
    },
    /// Solve the adjoint system and/or the recursive Riccati system.
    Solve {
        #[arg(long, value_enum, default_value_t = Method::Both)]
        method: Method,
        /// Use the Riccati drivers exactly as printed in the source derivation.
        #[arg(long)]
        paper_generators: bool,
    },
    /// Estimate the cost of a named policy on evaluation paths.
    Evaluate {
        #[arg(long, value_enum, default_value_t = PolicyName::Riccati)]
        policy: PolicyName,
    },
    /// Run the full verification suite and write verify_report.csv.
    Verify,
    /// Summarize the CSVs already present in the output directory.
    Report,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Adjoint,
    Riccati,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    Zero,
    Riccati,
    Adjoint,
    Glued,
}

impl PolicyName {
    fn label(self) -> &'static str {
        match self {
            PolicyName::Zero => "zero",
            PolicyName::Riccati => "riccati_feedback",
            PolicyName::Adjoint => "adjoint_feedback",
            PolicyName::Glued => "glued",
        }
    }
}

enum Failure {
    Validation(String),
    Solver(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Solver(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Solver(format!("io: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Run {
    spec: ProblemSpec,
    config_hash: String,
    out: PathBuf,
    timings: Vec<(String, f64)>,
}

impl Run {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&ProblemSpec) -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let r = f(&self.spec);
        self.timings.push((stage.to_string(), start.elapsed().as_secs_f64()));
        r
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_manifest(&self, subcommand: &str, outputs: &[&str]) -> CliResult<()> {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand = {subcommand}");
        let _ = writeln!(s, "config_sha256 = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.spec.mc.seed);
        let _ = writeln!(s, "num_paths = {}", self.spec.mc.num_paths);
        let _ = writeln!(s, "dt = {}", num(self.spec.dt()));
        let _ = writeln!(s, "steps = {}", self.spec.steps());
        let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
        let _ = writeln!(s, "cascade_version = {}", env!("CARGO_PKG_VERSION"));
        for o in outputs {
            let _ = writeln!(s, "output = {o}");
        }
        for (stage, secs) in &self.timings {
            let _ = writeln!(s, "timing.{stage}_s = {secs:.3}");
        }
        fs::write(self.out.join("manifest.txt"), s)?;
        fs::write(self.out.join("config.toml"), self.spec.emit_spec())?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load(cli: &Cli) -> CliResult<Run> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation("cli: --config is required for this subcommand".into()))?;
    let bytes = fs::read(path).map_err(|e| Failure::Validation(format!("cli: cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Failure::Validation("model: config is not UTF-8".into()))?;
    let mut spec = load_spec(&text)?;
    if cli.seed.is_some() || cli.paths.is_some() || cli.dt.is_some() {
        spec = spec.with_overrides(cli.seed, cli.paths, cli.dt)?;
    }
    fs::create_dir_all(&cli.out)?;
    Ok(Run { spec, config_hash: sha256_hex(&bytes), out: cli.out.clone(), timings: Vec::new() })
}

fn build_policy(spec: &ProblemSpec, name: PolicyName) -> CliResult<Policy> {
    let model = LqModel::new(spec);
    Ok(match name {
        PolicyName::Zero => Policy::Zero,
        PolicyName::Riccati => Policy::Riccati(Arc::new(solve_riccati(&model, true)?)),
        PolicyName::Adjoint => Policy::Adjoint(Arc::new(solve_adjoint_picard(&model, true)?)),
        PolicyName::Glued => build_glued(Policy::Riccati(Arc::new(solve_riccati(&model, false)?)))?,
    })
}

fn write_rounds(out: &mut dyn Write, method: &str, rounds: &[PicardRound]) -> std::io::Result<()> {
    for r in rounds {
        writeln!(out, "{method},{},{},{},{}", r.round, num(r.cost), num(r.std_error), num(r.policy_change))?;
    }
    Ok(())
}

fn simulate(cli: &Cli, policy: PolicyName) -> CliResult<()> {
    let mut run = load(cli)?;
    let pol = run.timed("policy", |spec| build_policy(spec, policy))?;
    let set = run.timed("simulate", |spec| Ok(simulate_paths(&LqModel::new(spec), &pol, StreamDomain::Evaluation, spec.mc.num_paths)?))?;
    let mut f = run.create("paths.csv")?;
    write_paths_csv(&run.spec, &set, &mut f)?;
    f.flush()?;
    println!("simulate: {} paths under {} ({} invalid)", set.paths.len(), policy.label(), set.invalid);
    run.write_manifest("simulate", &["paths.csv"])
}

fn solve(cli: &Cli, method: Method, paper_generators: bool) -> CliResult<()> {
    let mut run = load(cli)?;
    if paper_generators {
        let mut solver = run.spec.solver.clone();
        solver.paper_generators = true;
        run.spec = run.spec.with_solver(solver)?;
    }
    let mut outputs = vec!["picard.csv"];
    let mut rounds = Vec::new();
    writeln!(rounds, "method,round,cost,std_error,policy_change")?;
    if method != Method::Riccati {
        let sol = run.timed("adjoint", |spec| Ok(solve_adjoint_picard(&LqModel::new(spec), true)?))?;
        let mut f = run.create("adjoint.csv")?;
        write_adjoint_csv(&run.spec, &sol, &mut f)?;
        f.flush()?;
        let mut f = run.create("adjoint_diag.csv")?;
        write_adjoint_diag_csv(&run.spec, &sol, &mut f)?;
        f.flush()?;
        let mut f = run.create("basis.csv")?;
        write_basis_csv(&run.spec, &sol.tables, &mut f)?;
        f.flush()?;
        write_rounds(&mut rounds, "adjoint", &sol.rounds)?;
        outputs.extend(["adjoint.csv", "adjoint_diag.csv", "basis.csv"]);
        let y0 = evaluate_adjoint(&sol, &Regime::root(run.spec.n), 0.0, &run.spec.x0)?;
        println!("solve: adjoint converged in {} rounds, Y(0) = {:?}", sol.rounds.len(), y0.y);
    }
    if method != Method::Adjoint {
        let sol = run.timed("riccati", |spec| Ok(solve_riccati(&LqModel::new(spec), true)?))?;
        let mut f = run.create("riccati.csv")?;
        write_riccati_csv(&run.spec, &sol, &mut f)?;
        f.flush()?;
        write_rounds(&mut rounds, "riccati", &sol.rounds)?;
        outputs.push("riccati.csv");
        println!("solve: riccati converged in {} rounds", sol.rounds.len());
    }
    fs::write(run.out.join("picard.csv"), rounds)?;
    run.write_manifest("solve", &outputs)
}

fn evaluate(cli: &Cli, policy: PolicyName) -> CliResult<()> {
    let mut run = load(cli)?;
    let pol = run.timed("policy", |spec| build_policy(spec, policy))?;
    let est = run.timed("evaluate", |spec| {
        Ok(estimate_cost_with(&LqModel::new(spec), &pol, StreamDomain::Evaluation, spec.mc.num_paths)?)
    })?;
    let mut f = run.create("cost.csv")?;
    writeln!(f, "policy,mean,std_error,num_paths,invalid")?;
    writeln!(f, "{},{},{},{},{}", policy.label(), num(est.mean), num(est.std_error), est.num_paths, est.invalid)?;
    f.flush()?;
    println!("evaluate: J({}) = {} ± {}", policy.label(), num(est.mean), num(est.std_error));
    run.write_manifest("evaluate", &["cost.csv"])
}

fn verify(cli: &Cli) -> CliResult<()> {
    let mut run = load(cli)?;
    let instance = cli
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map_or("config".to_string(), |s| s.to_string_lossy().into_owned());
    let spec = run.spec.clone();
    let model = LqModel::new(&spec);
    let count = spec.mc.num_paths;
    let mut report = VerificationReport::default();

    let adjoint = run.timed("adjoint", |spec| Ok(Arc::new(solve_adjoint_picard(&LqModel::new(spec), true)?)))?;
    let riccati = run.timed("riccati", |spec| Ok(Arc::new(solve_riccati(&LqModel::new(spec), true)?)))?;
    let policy = Arc::new(Policy::Adjoint(Arc::clone(&adjoint)));

    let (under, set) = run.timed("adjoint_under", |_| Ok(adjoint_under(&model, &policy)?))?;
    let trials = default_trials(&spec, &set.paths);
    report.extend(run.timed("necessary", |_| Ok(check_necessary(&model, &policy, &under, &trials, count, &instance)?))?);
    report.extend(run.timed("sufficient", |_| Ok(check_sufficient_conditions(&model, SUFFICIENT_SAMPLES, &instance)))?);

    let directions = standard_directions(spec.horizon, 1.0);
    let rows = run.timed("perturbation", |_| Ok(perturbation_test(&model, &policy, &directions, &PERTURBATION_MAGNITUDES, count)?))?;
    for r in rows {
        report.rows.push(ReportRow::new(
            format!("perturbation[{} h={}]", r.direction.label(), num(r.h)),
            &instance,
            r.diff,
            -2.0 * r.std_error,
            r.pass(),
            r.count,
        ));
    }

    let cmp = run.timed("glued", |spec| {
        let glued = build_glued(Policy::Riccati(Arc::new(solve_riccati(&LqModel::new(spec), false)?)))?;
        Ok(compare(&model, &Policy::Riccati(Arc::clone(&riccati)), &glued, count)?)
    })?;
    report.rows.push(ReportRow::new(
        "glued_minus_recursive",
        &instance,
        cmp.mean_diff,
        -2.0 * cmp.std_error,
        cmp.mean_diff >= -2.0 * cmp.std_error,
        cmp.count,
    ));

    let organic: Vec<Trajectory> = set.organic().cloned().collect();
    for row in crosscheck_vs_adjoint(&spec, &riccati, &under, &organic)? {
        let tol = CROSSCHECK_REL * (1.0 + row.mean_abs_y);
        report.rows.push(ReportRow::new(
            format!("crosscheck[{} node={}]", row.regime, row.node + 1),
            &instance,
            row.mean_abs,
            tol,
            row.mean_abs <= tol,
            row.samples,
        ));
    }

    let p: Vec<StitchCheck> = riccati.stitches.iter().filter(|s| s.channel % 2 == 0).cloned().collect();
    let phi: Vec<StitchCheck> = riccati.stitches.iter().filter(|s| s.channel % 2 == 1).cloned().collect();
    report.rows.push(stitch_rows(&under.stitches, "stitch_Y", &instance));
    report.rows.push(stitch_rows(&p, "stitch_P", &instance));
    report.rows.push(stitch_rows(&phi, "stitch_phi", &instance));

    let (violations, points) = check_partition(&set.paths);
    report.rows.push(ReportRow::new("partition", &instance, violations as f64, 0.0, violations == 0, points));
    report.rows.push(run.timed("tower", |_| Ok(tower_row(&model, &under, &policy, count, &instance)?))?);
    report.rows.push(run.timed("bsde", |_| Ok(bsde_row(&model, &under, &policy, count, &instance)?))?);

    let mut f = run.create("verify_report.csv")?;
    report.write_csv(&mut f)?;
    f.flush()?;
    run.write_manifest("verify", &["verify_report.csv"])?;
    let failed: Vec<&str> = report.rows.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    println!("verify: {}/{} checks pass", report.rows.len() - failed.len(), report.rows.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("verify: failing checks: {}", failed.join(", "))))
    }
}

fn report(cli: &Cli) -> CliResult<()> {
    let out = &cli.out;
    let manifest = fs::read_to_string(out.join("manifest.txt"))
        .map_err(|e| Failure::Validation(format!("cli: no manifest in {}: {e}", out.display())))?;
    let mut summary = String::new();
    let _ = writeln!(summary, "== manifest ==\n{manifest}");
    if let Ok(text) = fs::read_to_string(out.join("cost.csv")) {
        let _ = writeln!(summary, "== cost ==\n{text}");
    }
    if let Ok(text) = fs::read_to_string(out.join("picard.csv")) {
        let _ = writeln!(summary, "== picard rounds ==\n{text}");
    }
    if let Ok(text) = fs::read_to_string(out.join("verify_report.csv")) {
        let (mut pass, mut total) = (0, 0);
        let mut failing = Vec::new();
        for line in text.lines().skip(1) {
            total += 1;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 6 && cols[cols.len() - 2] == "true" {
                pass += 1;
            } else {
                failing.push(line.to_string());
            }
        }
        let _ = writeln!(summary, "== verification ==\n{pass}/{total} checks pass");
        for f in failing {
            let _ = writeln!(summary, "FAIL {f}");
        }
    }
    print!("{summary}");
    fs::write(out.join("summary.txt"), summary)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Solver(format!("cli: thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { policy } => simulate(cli, policy),
        Command::Solve { method, paper_generators } => solve(cli, method, paper_generators),
        Command::Evaluate { policy } => evaluate(cli, policy),
        Command::Verify => verify(cli),
        Command::Report => report(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("{m}");
            ExitCode::from(3)
        }
    }
}
