use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use eblup::checks::{run_checks, CheckOptions, Suite};
use eblup::simulation::{preset, run_study, McConfig, McReport, PRESETS};
use eblup::{eblup, fit, mse_estimators, FamilyKind, FitOptions, FitResult, Method, Warning};

use crate::input::{area_targets, read_dataset, read_targets, Dataset, NamedTarget};
use crate::report::{FitSummary, InputEcho, Prediction, RunReport, TargetMse};
use crate::{CliError, EXIT_FAILURE, EXIT_NO_CONVERGENCE, EXIT_OK, EXIT_SINGULAR};

#[derive(Debug, Parser)]
#[command(name = "eblup", version, about = "EBLUP, variance components and MSE estimation for linear mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate variance components and fixed effects.
    Fit(ModelArgs),
    /// EBLUP of the requested targets.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        targets: TargetArgs,
    },
    /// EBLUP and MSE estimators of the requested targets.
    Mse {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        targets: TargetArgs,
        /// Also report the data-specific g3 and estimator.
        #[arg(long)]
        data_specific: bool,
    },
    /// Run a Monte Carlo study from a JSON config or a named preset.
    Simulate(SimulateArgs),
    /// Run the built-in derivative, Kronecker, projection and moment checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// fay-herriot, nested-error or anova.
    #[arg(long)]
    pub family: FamilyKind,
    /// Data CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Design JSON (anova only).
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// reml or ml.
    #[arg(long, default_value = "reml")]
    pub method: Method,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    /// Targets CSV with columns name,l1..lp,m1..mr.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Area (group) mean by 1-based position; repeatable.
    #[arg(long)]
    pub area: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// harville-jeske-balanced, unbalanced-small or unbalanced-large.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// all, derivatives, kron, projection or moments.
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    /// Restrict the derivative checks to one family.
    #[arg(long)]
    pub family: Option<FamilyKind>,
    /// Largest number of crossed factors in random balanced designs.
    #[arg(long, default_value_t = 3)]
    pub w: usize,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

pub(crate) fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Fit(m) => cmd_model("fit", &m, None, false),
        Command::Predict { model, targets } => cmd_model("predict", &model, Some(&targets), false),
        Command::Mse { model, targets, data_specific } => cmd_model("mse", &model, Some(&targets), data_specific),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Check(a) => cmd_check(&a),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut so = std::io::stdout().lock();
            writeln!(so, "{text}").map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn targets_for(args: &TargetArgs, ds: &Dataset) -> Result<Vec<NamedTarget>, CliError> {
    let mut out = match &args.targets {
        Some(p) => read_targets(p, &ds.model)?,
        None => Vec::new(),
    };
    out.extend(area_targets(&args.area, ds)?);
    if out.is_empty() {
        return Err(CliError::input("no targets given; use --targets or --area"));
    }
    Ok(out)
}

fn fit_warnings(f: &FitResult) -> Vec<Warning> {
    let mut w = Vec::new();
    if f.boundary_hit {
        w.push(Warning::BoundaryEstimate);
    }
    if !f.converged {
        w.push(Warning::NotConverged);
    }
    w
}

fn cmd_model(command: &str, args: &ModelArgs, targets: Option<&TargetArgs>, data_specific: bool) -> Result<i32, CliError> {
    if args.family == FamilyKind::Anova && args.design.is_none() {
        return Err(CliError::input("anova models need --design"));
    }
    let ds = read_dataset(args.family, &args.data, args.design.as_deref())?;
    let named = targets.map(|t| targets_for(t, &ds)).transpose()?.unwrap_or_default();
    let opts = FitOptions { max_iter: args.max_iter, tol: args.tol, ..FitOptions::default() };
    let f = fit(&ds.model, &ds.y, args.method, &opts)?;

    let mut warnings = fit_warnings(&f);
    let mut predictions = Vec::new();
    let mut mse = Vec::new();
    for nt in &named {
        let value = eblup(&ds.model, &f, &ds.y, &nt.target)?.value;
        if command == "mse" {
            let report = mse_estimators(&ds.model, &f, &ds.y, &nt.target, data_specific)?;
            for w in &report.warnings {
                if !warnings.contains(w) {
                    warnings.push(*w);
                }
            }
            mse.push(TargetMse { target: nt.name.clone(), eblup: value, report });
        } else {
            predictions.push(Prediction { target: nt.name.clone(), eblup: value });
        }
    }
    let report = RunReport {
        command: command.to_string(),
        input: InputEcho {
            family: args.family,
            data: args.data.display().to_string(),
            design: args.design.as_ref().map(|p| p.display().to_string()),
            method: args.method,
            n: ds.model.n(),
            p: ds.model.p(),
            r: ds.model.r(),
            s: ds.model.s(),
            max_iter: args.max_iter,
            tol: args.tol,
            data_specific,
        },
        fit: FitSummary::from(&f),
        predictions,
        mse,
        warnings,
    };
    write_output(args.out.as_deref(), &to_json(&report))?;
    if !f.converged {
        return Ok(crate::emit_error(
            "no-convergence",
            format!("estimation stopped after {} iterations without converging", f.iterations),
            EXIT_NO_CONVERGENCE,
        ));
    }
    if report.warnings.contains(&Warning::SingularInformation) {
        return Ok(crate::emit_error(
            "singular-information",
            "information matrix is singular at the estimate; only the naive MSE is reported".into(),
            EXIT_SINGULAR,
        ));
    }
    Ok(EXIT_OK)
}

fn load_config(args: &SimulateArgs) -> Result<McConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), None) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::input(format!("cannot open {}: {e}", p.display())))?;
            serde_json::from_str::<McConfig>(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
        }
        (None, Some(name)) => preset(name).map_err(|e| CliError::input(e.to_string()))?,
        _ => {
            return Err(CliError::input(format!("pass --config or --preset ({})", PRESETS.join(", "))));
        }
    };
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    cfg.validate().map_err(|e| CliError::input(e.to_string()))?;
    Ok(cfg)
}

fn summary_table(rep: &McReport) -> String {
    let mut s = format!(
        "{:<16} {:<5} {:<14} {:>12} {:>10} {:>12} {:>10}\n",
        "target", "method", "estimator", "mean", "se", "emp_mse", "emp_se"
    );
    for row in rep.csv_rows() {
        s.push_str(&format!(
            "{:<16} {:<5} {:<14} {:>12.6} {:>10.6} {:>12.6} {:>10.6}\n",
            row.target,
            row.method.name(),
            row.estimator.name(),
            row.mean,
            row.se,
            row.empirical_mse,
            row.empirical_mse_se
        ));
    }
    s
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    let rep = run_study(&cfg)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let json_path = args.out_dir.join("mc_report.json");
    let csv_path = args.out_dir.join("mc_report.csv");
    write_output(Some(&json_path), &to_json(&rep))?;
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", csv_path.display())))?;
    for row in rep.csv_rows() {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    print!("{}", summary_table(&rep));
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(EXIT_OK)
}

fn cmd_check(args: &CheckArgs) -> Result<i32, CliError> {
    let opts =
        CheckOptions { suite: args.suite, family: args.family, max_w: args.w, instances: args.instances, seed: args.seed };
    let rep = run_checks(&opts).map_err(|e| match e {
        eblup::EblupError::InvalidConfig(m) => CliError::Input(m),
        other => CliError::Model(other),
    })?;
    write_output(None, &to_json(&rep))?;
    Ok(if rep.passed { EXIT_OK } else { EXIT_FAILURE })
}
