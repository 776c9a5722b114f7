//! `flatconv`: command-line access to the library and its bundled
//! experiments.
//!
//! Exit status is 0 when every check passes, 1 when a check fails and 2 on
//! errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use flatconv_core::jets::verify_region;
use flatconv_core::pipeline::{
    bundled_names, kernel_curves_csv, run_pipeline, ExperimentConfig, PipelineReport,
    ProblemConfig, SCHEMA_VERSION,
};
use flatconv_core::supconv::{self, CheckReport, ConvolutionResult};
use flatconv_core::{FlatKernel, Hamiltonian, KernelParams, SampledFunction, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "flatconv",
    version,
    about = "Flat sup-convolutions and feeble viscosity checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CheckName {
    All,
    Ordering,
    Localization,
    Semiconvexity,
    Magic,
    GradientBound,
    Lipschitz,
    Flatness,
}

#[derive(Subcommand)]
enum Command {
    /// Build the flat kernel of an integrand and dump its tables.
    Flatness {
        /// Integrand config (JSON).
        #[arg(long)]
        hamiltonian: PathBuf,
        #[arg(long)]
        diam: f64,
        /// Annulus radius; omit for an unbounded annulus.
        #[arg(long)]
        upper_radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write sampled curves for plotting.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Sup-convolve a grid function and run the nodewise checks.
    Supconv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[arg(long, value_enum, default_value = "all")]
        check: CheckName,
        /// Defaults to 10 h.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Write u^ε of the last ε here.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Minimize the discrete Dirichlet energy.
    Minimize {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Energy per accepted iterate.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Feeble viscosity check at every interior node.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        hamiltonian: PathBuf,
        #[arg(long)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an end-to-end experiment.
    Pipeline {
        /// Experiment config (JSON).
        #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
        config: Option<PathBuf>,
        /// Name of a bundled config.
        #[arg(long)]
        bundled: Option<String>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize a pipeline `summary.json`.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Also write the checks as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn selected(
    res: &ConvolutionResult,
    u: &SampledFunction,
    check: CheckName,
    tol: f64,
) -> Result<Vec<CheckReport>> {
    Ok(match check {
        CheckName::All => supconv::run_checks(res, u, tol)?.checks,
        CheckName::Ordering => vec![supconv::check_ordering(res, u)],
        CheckName::Localization => vec![supconv::check_localization(res)],
        CheckName::Semiconvexity => vec![supconv::check_semiconvexity(res, tol)?],
        CheckName::Magic => vec![supconv::check_magic(res, tol)?],
        CheckName::GradientBound => vec![supconv::check_gradient_bound(res, tol)?],
        CheckName::Lipschitz => vec![supconv::check_lipschitz(res, u, 0.0, tol)?],
        CheckName::Flatness => vec![supconv::check_flatness(res, tol)?],
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Flatness {
            hamiltonian,
            diam,
            upper_radius,
            out,
            curves,
        } => {
            let h: Hamiltonian = read_json(&hamiltonian)?;
            let params = KernelParams {
                upper_radius,
                ..KernelParams::new(diam)
            };
            let kernel = FlatKernel::build(&h, &params)?;
            write(&out, &kernel.to_json()?)?;
            if let Some(path) = curves {
                write(&path, &kernel_curves_csv(&kernel, 200))?;
            }
            let id = kernel.check_identities(100);
            eprintln!(
                "identities: {:.3e} (first order), {:.3e} (second order)",
                id.max_rel_theta_prime, id.max_rel_second_order
            );
            Ok(id.max_rel_theta_prime <= 1e-6 && id.max_rel_second_order <= 1e-5)
        }
        Command::Supconv {
            input,
            kernel,
            eps,
            check,
            tol,
            out,
            field,
        } => {
            let u = SampledFunction::load(&input)?;
            let kernel = FlatKernel::from_json(&fs::read_to_string(&kernel)?)?;
            let tol = tol.unwrap_or(10.0 * u.grid.h());
            let mut reports = Vec::new();
            let mut passed = true;
            let mut last = None;
            for &e in &eps {
                let res = supconv::sup_convolve(&u, &kernel, e)?;
                let checks = selected(&res, &u, check, tol)?;
                passed &= checks.iter().all(|c| c.passed);
                for c in &checks {
                    eprintln!(
                        "eps {e}: {:<14} {}",
                        c.check,
                        if c.passed { "pass" } else { "FAIL" }
                    );
                }
                reports.push(json!({ "eps": e, "loc_radius": res.loc_radius, "warnings": res.warnings, "checks": checks }));
                last = Some(res.u_eps);
            }
            let doc = json!({ "schema_version": SCHEMA_VERSION, "tol": tol, "passed": passed, "reports": reports });
            write(&out, &serde_json::to_string_pretty(&doc)?)?;
            if let (Some(path), Some(ue)) = (field, last) {
                ue.save(path)?;
            }
            Ok(passed)
        }
        Command::Minimize { problem, out, log } => {
            let cfg = ProblemConfig::load(&problem)?;
            let (r, stages) = cfg.solve()?;
            r.u.save(&out)?;
            if let Some(path) = log {
                let mut text = String::from("iteration,energy\n");
                for (i, e) in r.energies.iter().enumerate() {
                    let _ = writeln!(text, "{i},{e:e}");
                }
                write(&path, &text)?;
            }
            for s in &stages {
                eprintln!(
                    "delta {:<6} energy {:.10e} -> {:.10e} ({} iterations)",
                    s.delta, s.energy_start, s.energy_end, s.iterations
                );
            }
            eprintln!(
                "energy {:.12e}, |grad| {:.3e} (tol {:.3e}), {} iterations, converged: {}",
                r.energy, r.grad_norm, r.grad_tol, r.iterations, r.converged
            );
            Ok(r.converged)
        }
        Command::Verify {
            input,
            hamiltonian,
            tol,
            out,
        } => {
            let u = SampledFunction::load(&input)?;
            let h: Hamiltonian = read_json(&hamiltonian)?;
            let report = verify_region(&u, &h, &VerifyOptions::for_function(&u, tol))?;
            eprintln!(
                "pass {} fail {} vacuous {}",
                report.pass, report.fail, report.vacuous
            );
            let doc = json!({ "schema_version": SCHEMA_VERSION, "report": report });
            write(&out, &serde_json::to_string_pretty(&doc)?)?;
            Ok(report.passed())
        }
        Command::Pipeline {
            config,
            bundled,
            out_dir,
        } => {
            let cfg = match (config, bundled) {
                (Some(path), _) => ExperimentConfig::load(path)?,
                (None, Some(name)) => ExperimentConfig::bundled(&name)?,
                (None, None) => bail!(
                    "need --config or --bundled (bundled: {:?})",
                    bundled_names()
                ),
            };
            let dir = out_dir
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let bundle = run_pipeline(&cfg)?;
            bundle.write(&dir)?;
            print_checks(&bundle.report);
            eprintln!("wrote {}", dir.display());
            Ok(bundle.report.passed)
        }
        Command::Report { input, csv } => {
            let report: PipelineReport = read_json(&input)?;
            if report.schema_version != SCHEMA_VERSION {
                bail!(
                    "schema version {} not supported (expected {SCHEMA_VERSION})",
                    report.schema_version
                );
            }
            print_checks(&report);
            if let Some(path) = csv {
                let mut w = String::from("check,passed,detail\n");
                for c in &report.checks {
                    let _ = writeln!(
                        w,
                        "{},{},\"{}\"",
                        c.name,
                        c.passed,
                        c.detail.replace('"', "'")
                    );
                }
                write(&path, &w)?;
            }
            Ok(report.passed)
        }
    }
}

fn print_checks(report: &PipelineReport) {
    println!("{} (seed {})", report.name, report.seed);
    for c in &report.checks {
        println!(
            "  {:<5} {:<28} {}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if !report.orders.is_empty() {
        println!("  refinement orders {:?}", report.orders);
    }
    println!(
        "{}",
        if report.passed {
            "all checks passed"
        } else {
            "some checks failed"
        }
    );
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
