//! End-to-end experiment: kernel build, minimization, jet verification,
//! sup-convolution checks on the minimizer and weak residuals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatness::{FlatKernel, IdentityReport, KernelParams, PhiVariant, TableSpec};
use crate::grid::{Grid, SampledFunction};
use crate::hamiltonian::Hamiltonian;
use crate::jets::{verify_region, VerifyOptions, VerifyReport};
use crate::monotone::log_spaced;
use crate::solver::{
    caccioppoli_diagnostic, coercivity_check, continuation_minimize, convexity_gap,
    minimality_certificate, minimize, residual_basis, BoundaryData, Certificate, Coercivity,
    DirichletProblem, MinimizeOptions, MinimizeResult, ResidualReport, StageLog,
};
use crate::supconv::{run_checks, sup_convolve, SupconvReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis, one run per entry.
    pub resolutions: Vec<usize>,
}

/// Kernel parameters; the diameter comes from the domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    #[serde(default)]
    pub upper_radius: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub table: TableSpec,
    #[serde(default)]
    pub variant: PhiVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Defaults to the solver's own `1e-8 E / h`.
    pub grad_tol: Option<f64>,
    /// Sup-convolution checks use `supconv_h * h`.
    pub supconv_h: f64,
    /// Jet verification uses `verify_h2 * h²`.
    pub verify_h2: f64,
    /// Bump radii in multiples of `h`.
    pub residual_radii_h: Vec<f64>,
    pub certificate_slack: f64,
    pub convexity_slack: f64,
    pub max_sup_error: Option<f64>,
    pub min_order: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            grad_tol: None,
            supconv_h: 10.0,
            verify_h2: 10.0,
            residual_radii_h: vec![2.0, 3.0, 4.0],
            certificate_slack: 1e-9,
            convexity_slack: 1e-9,
            max_sup_error: None,
            min_order: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaccioppoliConfig {
    pub r_exp: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub hamiltonian: Hamiltonian,
    pub domain: DomainConfig,
    pub boundary: BoundaryData,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub eps: Vec<f64>,
    /// Runs continuation when present.
    #[serde(default)]
    pub delta_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub coercivity: Option<Coercivity>,
    #[serde(default)]
    pub caccioppoli: Option<CaccioppoliConfig>,
    #[serde(default = "default_perturbations")]
    pub certificate_perturbations: usize,
    #[serde(default = "default_pairs")]
    pub convexity_pairs: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_max_iter() -> usize {
    100_000
}
fn default_perturbations() -> usize {
    100
}
fn default_pairs() -> usize {
    1000
}

const BUNDLED: [(&str, &str); 2] = [
    ("p15_1d", include_str!("../configs/p15_1d.json")),
    ("harmonic_2d", include_str!("../configs/harmonic_2d.json")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

impl ExperimentConfig {
    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!(
                "no bundled config named {name:?} (have {:?})",
                bundled_names()
            ))
        })?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hamiltonian.dim();
        let d = &self.domain;
        if d.lo.len() != n || d.hi.len() != n {
            return Err(Error::Config(format!(
                "domain corners must have {n} coordinates"
            )));
        }
        if d.resolutions.is_empty() {
            return Err(Error::Config("at least one resolution is required".into()));
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("eps values must be positive".into()));
        }
        if let BoundaryData::Affine { slope, .. } = &self.boundary {
            if slope.len() != n {
                return Err(Error::Config(format!("affine slope must have {n} entries")));
            }
        }
        Ok(())
    }

    fn grid(&self, cells: usize) -> Result<Grid> {
        Grid::new(
            self.domain.lo.clone(),
            self.domain.hi.clone(),
            vec![cells; self.hamiltonian.dim()],
        )
    }
}

/// A single Dirichlet problem, as read by the `minimize` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub hamiltonian: Hamiltonian,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: usize,
    pub boundary: BoundaryData,
    #[serde(default)]
    pub options: MinimizeOptions,
    #[serde(default)]
    pub delta_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub coercivity: Option<Coercivity>,
}

impl ProblemConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn problem(&self) -> Result<DirichletProblem> {
        let n = self.hamiltonian.dim();
        let grid = Grid::new(self.lo.clone(), self.hi.clone(), vec![self.cells; n])?;
        let prob = DirichletProblem::new(self.hamiltonian.clone(), &self.boundary.sample(&grid)?)?;
        match self.coercivity {
            Some(c) => prob.with_coercivity(c.s, c.c),
            None => Ok(prob),
        }
    }

    /// Minimizes, with continuation when a schedule is given.
    pub fn solve(&self) -> Result<(MinimizeResult, Vec<StageLog>)> {
        let prob = self.problem()?;
        match &self.delta_schedule {
            Some(s) => {
                let c = continuation_minimize(&prob, s, &self.options)?;
                Ok((c.result, c.stages))
            }
            None => Ok((minimize(&prob, &self.options)?, Vec::new())),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimizeSummary {
    pub energy: f64,
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub iterations: usize,
    pub converged: bool,
    pub energy_monotone: bool,
    pub stages: Vec<StageLog>,
}

impl MinimizeSummary {
    fn new(r: &MinimizeResult, stages: Vec<StageLog>) -> Self {
        let monotone = if stages.is_empty() {
            r.energies.windows(2).all(|w| w[1] <= w[0])
        } else {
            stages.iter().all(|s| s.monotone)
        };
        Self {
            energy: r.energy,
            grad_norm: r.grad_norm,
            grad_tol: r.grad_tol,
            iterations: r.iterations,
            converged: r.converged,
            energy_monotone: monotone,
            stages,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub cells: usize,
    pub h: f64,
    pub minimize: MinimizeSummary,
    /// Against the boundary data extended to `Ω`, when that is an exact solution.
    pub sup_error: Option<f64>,
    pub verify: VerifyReport,
    pub supconv: Vec<SupconvReport>,
    pub residuals: ResidualReport,
    pub certificate: Certificate,
    pub caccioppoli: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub pairs: usize,
    pub min_gap: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub kernel_identities: IdentityReport,
    pub coercivity: Option<bool>,
    pub convexity: ConvexityReport,
    pub runs: Vec<RunReport>,
    /// `log2(e_k / e_{k+1})` between consecutive resolutions.
    pub orders: Vec<f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The report together with data files.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub report: PipelineReport,
    pub fields: Vec<(String, SampledFunction)>,
    /// `t, Φ, T, T', Θ, Θ'` on log-spaced points.
    pub kernel_curves: String,
    /// `cells, iteration, energy` for every accepted iterate.
    pub energy_log: String,
}

impl Bundle {
    /// Writes `summary.json`, `u_<cells>.csv`, `kernel_curves.csv` and
    /// `energy_log.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), self.report.to_json()?)?;
        for (name, u) in &self.fields {
            u.save(dir.join(format!("{name}.csv")))?;
        }
        fs::write(dir.join("kernel_curves.csv"), &self.kernel_curves)?;
        fs::write(dir.join("energy_log.csv"), &self.energy_log)?;
        Ok(())
    }
}

pub fn kernel_curves_csv(kernel: &FlatKernel, points: usize) -> String {
    let (lo, hi) = kernel.t.domain();
    let mut out = String::from("t,phi,T,Tprime,theta,thetaprime\n");
    for t in log_spaced(lo, hi, points) {
        let phi = kernel.phi(t).unwrap_or(f64::NAN);
        let s = t * t;
        let _ = writeln!(
            out,
            "{t:e},{phi:e},{:e},{:e},{:e},{:e}",
            kernel.t.eval(t),
            kernel.tprime.eval(t),
            kernel.theta(s),
            kernel.thetaprime.eval(s)
        );
    }
    out
}

fn convexity(h: &Hamiltonian, pairs: usize, seed: u64, slack: f64) -> Result<ConvexityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h.dim();
    let k = h.singular_set();
    let mut min_gap = f64::INFINITY;
    let mut done = 0;
    while done < pairs {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        if k.distance(&a) < 1e-9 {
            continue;
        }
        min_gap = min_gap.min(convexity_gap(h, &a, &b)?);
        done += 1;
    }
    Ok(ConvexityReport {
        pairs,
        min_gap,
        passed: min_gap >= -slack,
    })
}

fn check(
    checks: &mut Vec<Check>,
    name: impl Into<String>,
    passed: bool,
    detail: impl Into<String>,
) {
    checks.push(Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    });
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<Bundle> {
    config.validate()?;
    let h = &config.hamiltonian;
    let tols = &config.tolerances;
    let mut checks = Vec::new();

    let first = config.grid(config.domain.resolutions[0])?;
    let params = KernelParams {
        diam: first.diam(),
        upper_radius: config.kernel.upper_radius,
        c: config.kernel.c,
        table: config.kernel.table,
        variant: config.kernel.variant,
    };
    let kernel = FlatKernel::build(h, &params)?;
    let identities = kernel.check_identities(100);
    check(
        &mut checks,
        "kernel_identities",
        identities.max_rel_theta_prime <= 1e-6 && identities.max_rel_second_order <= 1e-5,
        format!(
            "{:.3e} / {:.3e}",
            identities.max_rel_theta_prime, identities.max_rel_second_order
        ),
    );

    let coercivity = match config.coercivity {
        Some(c) => {
            let ok = coercivity_check(h, c.s, c.c, 1e3)?;
            check(
                &mut checks,
                "coercivity",
                ok,
                format!("s = {}, c = {}", c.s, c.c),
            );
            Some(ok)
        }
        None => None,
    };
    let convexity = convexity(h, config.convexity_pairs, config.seed, tols.convexity_slack)?;
    check(
        &mut checks,
        "convexity",
        convexity.passed,
        format!("min gap {:.3e}", convexity.min_gap),
    );

    let mut runs = Vec::new();
    let mut fields = Vec::new();
    let mut energy_log = String::from("cells,iteration,energy\n");
    for &cells in &config.domain.resolutions {
        let grid = config.grid(cells)?;
        let hh = grid.h();
        let data = config.boundary.sample(&grid)?;
        let mut prob = DirichletProblem::new(h.clone(), &data)?;
        if let Some(c) = config.coercivity {
            prob = prob.with_coercivity(c.s, c.c)?;
        }
        let opts = MinimizeOptions {
            max_iter: config.max_iter,
            grad_tol: tols.grad_tol,
        };
        let (result, stages) = match &config.delta_schedule {
            Some(s) => {
                let c = continuation_minimize(&prob, s, &opts)?;
                (c.result, c.stages)
            }
            None => (minimize(&prob, &opts)?, Vec::new()),
        };
        for (i, e) in result.energies.iter().enumerate() {
            let _ = writeln!(energy_log, "{cells},{i},{e:e}");
        }
        let summary = MinimizeSummary::new(&result, stages);
        check(
            &mut checks,
            format!("minimize[{cells}]"),
            summary.converged && summary.energy_monotone,
            format!(
                "|grad| {:.3e} vs {:.3e} after {} iterations",
                summary.grad_norm, summary.grad_tol, summary.iterations
            ),
        );
        let u = result.u;

        let sup_error = config
            .boundary
            .is_exact_for(h)
            .then(|| u.max_abs_diff(&data));
        if let (Some(e), Some(max)) = (sup_error, tols.max_sup_error) {
            check(
                &mut checks,
                format!("sup_error[{cells}]"),
                e <= max,
                format!("{e:.3e} vs {max:.1e}"),
            );
        }

        let verify = verify_region(
            &u,
            h,
            &VerifyOptions::for_function(&u, tols.verify_h2 * hh * hh),
        )?;
        check(
            &mut checks,
            format!("verify[{cells}]"),
            verify.passed(),
            format!(
                "pass {} fail {} vacuous {}",
                verify.pass, verify.fail, verify.vacuous
            ),
        );

        let mut supconv = Vec::new();
        for &eps in &config.eps {
            let res = sup_convolve(&u, &kernel, eps)?;
            let rep = run_checks(&res, &u, tols.supconv_h * hh)?;
            let failed: Vec<&str> = rep
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.check.as_str())
                .collect();
            check(
                &mut checks,
                format!("supconv[{cells}, eps={eps}]"),
                rep.passed(),
                format!("failed: {failed:?}"),
            );
            supconv.push(rep);
        }

        let radii: Vec<f64> = tols.residual_radii_h.iter().map(|r| r * hh).collect();
        let residuals = residual_basis(&u, h, &radii, result.grad_tol)?;
        check(
            &mut checks,
            format!("residuals[{cells}]"),
            residuals.passed,
            format!(
                "{} bumps, worst ratio {:.3}",
                residuals.count, residuals.max_ratio
            ),
        );

        let certificate = minimality_certificate(
            &prob,
            &u,
            config.certificate_perturbations,
            config.seed,
            tols.certificate_slack,
        )?;
        check(
            &mut checks,
            format!("certificate[{cells}]"),
            certificate.passed,
            format!("min gap {:.3e}", certificate.min_gap),
        );

        let caccioppoli = match &config.caccioppoli {
            Some(c) => Some(caccioppoli_diagnostic(&u, c.r_exp, c.radius)?),
            None => None,
        };

        fields.push((format!("u_{cells}"), u));
        runs.push(RunReport {
            cells,
            h: hh,
            minimize: summary,
            sup_error,
            verify,
            supconv,
            residuals,
            certificate,
            caccioppoli,
        });
    }

    let mut orders = Vec::new();
    for w in runs.windows(2) {
        if let (Some(e0), Some(e1)) = (w[0].sup_error, w[1].sup_error) {
            orders.push((e0 / e1).ln() / (w[0].h / w[1].h).ln());
        }
    }
    if let Some(min) = tols.min_order {
        let ok = !orders.is_empty() && orders.iter().all(|o| *o >= min);
        check(
            &mut checks,
            "refinement_order",
            ok,
            format!("{orders:?} vs {min}"),
        );
    }

    let passed = checks.iter().all(|c| c.passed);
    let report = PipelineReport {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone(),
        seed: config.seed,
        config: config.clone(),
        kernel_identities: identities,
        coercivity,
        convexity,
        runs,
        orders,
        checks,
        passed,
    };
    Ok(Bundle {
        report,
        fields,
        kernel_curves: kernel_curves_csv(&kernel, 200),
        energy_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        for name in bundled_names() {
            let c = ExperimentConfig::bundled(name).unwrap();
            assert_eq!(c.name, name);
        }
        assert!(matches!(
            ExperimentConfig::bundled("nope"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = ExperimentConfig::bundled("p15_1d").unwrap();
        c.domain.lo = vec![0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::bundled("p15_1d").unwrap();
        c.eps = vec![];
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json("{\"name\": 1}").is_err());
    }

    #[test]
    fn small_run_is_deterministic() {
        let mut c = ExperimentConfig::bundled("p15_1d").unwrap();
        c.domain.resolutions = vec![64];
        c.eps = vec![0.2];
        let a = run_pipeline(&c).unwrap();
        let b = run_pipeline(&c).unwrap();
        assert!(a.report.passed, "{:#?}", a.report.checks);
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.kernel_curves, b.kernel_curves);
    }
}
