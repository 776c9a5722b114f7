//! Direct-method Dirichlet minimization of the discrete energy `Σ F(∇u)|s|`,
//! the mollified integrands `F^δ`, weak residuals and a few diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Diagonal, Grid, SampledFunction, SimplexMesh};
use crate::hamiltonian::{norm, Hamiltonian, Model, SingularSet};

/// Named boundary data, evaluated at grid coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryData {
    /// `offset + slope·x`
    Affine { slope: Vec<f64>, offset: f64 },
    /// `x² - y²`
    Saddle,
    /// `e^x sin y`
    Harmonic,
    /// `|x|` in the first coordinate
    Cone,
}

impl BoundaryData {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BoundaryData::Affine { slope, offset } => {
                offset + slope.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            }
            BoundaryData::Saddle => x[0] * x[0] - x.get(1).map_or(0.0, |y| y * y),
            BoundaryData::Harmonic => x[0].exp() * x.get(1).map_or(0.0, |y| y.sin()),
            BoundaryData::Cone => x[0].abs(),
        }
    }

    /// Whether the data is an exact solution of the Euler-Lagrange equation
    /// of `h` in the whole domain.
    pub fn is_exact_for(&self, h: &Hamiltonian) -> bool {
        match self {
            BoundaryData::Affine { .. } => true,
            BoundaryData::Saddle | BoundaryData::Harmonic => {
                matches!(h.model(), Model::Quadratic)
                    || matches!(h.model(), Model::PDirichlet { p } if *p == 2.0)
            }
            BoundaryData::Cone => false,
        }
    }

    pub fn sample(&self, grid: &Grid) -> Result<SampledFunction> {
        if let BoundaryData::Affine { slope, .. } = self {
            if slope.len() != grid.dim() {
                return Err(Error::DimensionMismatch {
                    expected: grid.dim(),
                    got: slope.len(),
                });
            }
        }
        SampledFunction::from_fn(grid.clone(), |x| self.eval(x))
    }
}

/// `F(A) >= c|A|^s - 1/c` with `s > n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coercivity {
    pub s: f64,
    pub c: f64,
}

#[derive(Clone, Debug)]
pub struct DirichletProblem {
    pub hamiltonian: Hamiltonian,
    pub grid: Grid,
    /// Nodal values; only boundary entries are used.
    pub boundary: Vec<f64>,
    pub coercivity: Option<Coercivity>,
}

impl DirichletProblem {
    pub fn new(hamiltonian: Hamiltonian, data: &SampledFunction) -> Result<Self> {
        if hamiltonian.dim() != data.grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.grid.dim(),
                got: hamiltonian.dim(),
            });
        }
        Ok(Self {
            hamiltonian,
            grid: data.grid.clone(),
            boundary: data.values.clone(),
            coercivity: None,
        })
    }

    pub fn with_coercivity(mut self, s: f64, c: f64) -> Result<Self> {
        let n = self.grid.dim() as f64;
        if !(s > n) || !(c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coercivity needs s > n = {n} and c > 0, got s = {s}, c = {c}"
            )));
        }
        self.coercivity = Some(Coercivity { s, c });
        Ok(self)
    }

    /// Boundary values with a Coons-patch interior (linear interpolation in 1D).
    pub fn initial_guess(&self) -> SampledFunction {
        let g = &self.grid;
        let b = &self.boundary;
        let mut v = b.clone();
        if g.dim() == 1 {
            let n = g.shape()[0];
            for (i, slot) in v.iter_mut().enumerate().take(n - 1).skip(1) {
                let s = i as f64 / (n - 1) as f64;
                *slot = (1.0 - s) * b[0] + s * b[n - 1];
            }
        } else {
            let (nx, ny) = (g.shape()[0], g.shape()[1]);
            let at = |i: usize, j: usize| b[i + nx * j];
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let s = i as f64 / (nx - 1) as f64;
                    let t = j as f64 / (ny - 1) as f64;
                    let edges = (1.0 - s) * at(0, j)
                        + s * at(nx - 1, j)
                        + (1.0 - t) * at(i, 0)
                        + t * at(i, ny - 1);
                    let corners = (1.0 - s) * (1.0 - t) * at(0, 0)
                        + s * (1.0 - t) * at(nx - 1, 0)
                        + (1.0 - s) * t * at(0, ny - 1)
                        + s * t * at(nx - 1, ny - 1);
                    v[i + nx * j] = edges - corners;
                }
            }
        }
        SampledFunction {
            grid: g.clone(),
            values: v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Target for the largest interior component of the energy gradient.
    /// Defaults to `1e-8 E(u_0) / h`.
    pub grad_tol: Option<f64>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            grad_tol: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub u: SampledFunction,
    pub energy: f64,
    /// Largest interior component of the energy gradient at `u`.
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Iterations taken by the subgradient fallback.
    pub subgradient_steps: usize,
    /// Iterations of the gradient-only phase, entered once energy decreases
    /// fall below the rounding of `E`.
    pub fine_steps: usize,
    /// Energy after every accepted iterate of the energy-tested phases,
    /// starting with the initial guess.
    pub energies: Vec<f64>,
}

fn interior_max(grad: &[f64], boundary: &[bool]) -> f64 {
    grad.iter()
        .zip(boundary)
        .filter(|(_, &b)| !b)
        .fold(0.0, |m, (g, _)| m.max(g.abs()))
}

struct Objective<'a> {
    mesh: SimplexMesh,
    h: &'a Hamiltonian,
    boundary: Vec<bool>,
}

impl Objective<'_> {
    fn energy(&self, v: &[f64]) -> f64 {
        self.mesh.energy(v, self.h)
    }
    fn grad(&self, v: &[f64]) -> Vec<f64> {
        let mut g = self.mesh.energy_gradient(v, self.h);
        for (gi, &b) in g.iter_mut().zip(&self.boundary) {
            if b {
                *gi = 0.0;
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accelerated gradient descent with backtracking and function-value
/// restarts, finishing with gradient-tested steps once `E` can no longer
/// resolve the decrease. When backtracking cannot find a step (a kink of `F` on a set of
/// positive measure), it switches to diminishing subgradient steps and keeps
/// the best iterate.
pub fn minimize_from(
    prob: &DirichletProblem,
    start: &SampledFunction,
    opts: &MinimizeOptions,
) -> Result<MinimizeResult> {
    if start.grid != prob.grid {
        return Err(Error::InvalidParameter(
            "start grid differs from the problem grid".into(),
        ));
    }
    let boundary = prob.grid.boundary_mask();
    let obj = Objective {
        mesh: SimplexMesh::new(&prob.grid, Diagonal::Forward),
        h: &prob.hamiltonian,
        boundary,
    };
    let mut x: Vec<f64> = start.values.clone();
    for (i, &b) in obj.boundary.iter().enumerate() {
        if b {
            x[i] = prob.boundary[i];
        }
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite start or boundary value at node {i}"
        )));
    }
    let mut fx = obj.energy(&x);
    let tol = opts.grad_tol.unwrap_or(1e-8 * fx.abs() / prob.grid.h());
    let mut energies = vec![fx];
    let mut gx = obj.grad(&x);
    let mut gnorm = interior_max(&gx, &obj.boundary);
    let (mut y, mut fy, mut gy) = (x.clone(), fx, gx.clone());
    let mut t: f64 = 1.0;
    let mut lip = 1.0;
    let (mut iterations, mut restarts, mut sub_steps) = (0, 0, 0);
    let mut stalled = false;
    // y == x, so a rejected step cannot be blamed on momentum
    let mut at_x = true;
    let mut fine = false;
    while gnorm > tol && iterations < opts.max_iter {
        iterations += 1;
        // backtracking on the step from y
        let gy2 = dot(&gy, &gy);
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - g / lip).collect();
            let fc = obj.energy(&cand);
            if fc <= fy - 0.5 * gy2 / lip + 1e-15 * fy.abs() {
                accepted = Some((cand, fc));
                break;
            }
            lip *= 2.0;
        }
        let Some((cand, fc)) = accepted else {
            stalled = true;
            break;
        };
        if fc > fx {
            if at_x {
                // the decrease is below the rounding of E itself
                fine = true;
                break;
            }
            // momentum overshoot: restart from the last accepted iterate
            restarts += 1;
            t = 1.0;
            y.clone_from(&x);
            fy = fx;
            gy.clone_from(&gx);
            at_x = true;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = cand
            .iter()
            .zip(&x)
            .map(|(c, old)| c + beta * (c - old))
            .collect();
        at_x = beta == 0.0;
        x = cand;
        fx = fc;
        t = t_next;
        gx = obj.grad(&x);
        gnorm = interior_max(&gx, &obj.boundary);
        energies.push(fx);
        fy = obj.energy(&y);
        gy = obj.grad(&y);
        lip *= 0.9;
    }
    let mut fine_steps = 0;
    if fine {
        // Gradient-only phase. E is convex along y - s∇E(y), so a step whose
        // endpoint still has non-positive slope does not raise E above E(y);
        // restarts use the gradient test instead of energy values.
        t = 1.0;
        y.clone_from(&x);
        gy.clone_from(&gx);
        while gnorm > tol && iterations < opts.max_iter {
            iterations += 1;
            fine_steps += 1;
            let mut cand = Vec::new();
            for _ in 0..60 {
                cand = y.iter().zip(&gy).map(|(a, g)| a - g / lip).collect();
                if dot(&obj.grad(&cand), &gy) >= 0.0 {
                    break;
                }
                lip *= 2.0;
            }
            let dx: Vec<f64> = cand.iter().zip(&x).map(|(c, old)| c - old).collect();
            if dot(&gy, &dx) > 0.0 {
                restarts += 1;
                t = 1.0;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = cand.iter().zip(&dx).map(|(c, d)| c + beta * d).collect();
            x = cand;
            t = t_next;
            gx = obj.grad(&x);
            gnorm = interior_max(&gx, &obj.boundary);
            gy = obj.grad(&y);
            lip *= 0.9;
        }
        fx = obj.energy(&x);
    }
    if stalled {
        // diminishing-step subgradient phase, keeping the best iterate
        let scale = gnorm.max(f64::MIN_POSITIVE);
        let mut cur = x.clone();
        let step0 = prob.grid.h() * prob.grid.h() / scale;
        while gnorm > tol && iterations < opts.max_iter {
            iterations += 1;
            sub_steps += 1;
            let g = obj.grad(&cur);
            let a = step0 / (sub_steps as f64).sqrt();
            for (c, gi) in cur.iter_mut().zip(&g) {
                *c -= a * gi;
            }
            let fc = obj.energy(&cur);
            if fc < fx {
                x.clone_from(&cur);
                fx = fc;
                gx = obj.grad(&x);
                gnorm = interior_max(&gx, &obj.boundary);
                energies.push(fx);
            }
        }
    }
    Ok(MinimizeResult {
        u: SampledFunction {
            grid: prob.grid.clone(),
            values: x,
        },
        energy: fx,
        grad_norm: gnorm,
        grad_tol: tol,
        iterations,
        converged: gnorm <= tol,
        restarts,
        subgradient_steps: sub_steps,
        fine_steps,
        energies,
    })
}

pub fn minimize(prob: &DirichletProblem, opts: &MinimizeOptions) -> Result<MinimizeResult> {
    minimize_from(prob, &prob.initial_guess(), opts)
}

/// `F^δ = ζ(|a|/δ) F`: zero on `B_{δ/2}`, equal to `F` outside `B_δ`, `C²`.
pub fn mollify(h: &Hamiltonian, delta: f64) -> Result<Hamiltonian> {
    if h.singular_set() != SingularSet::Origin {
        return Err(Error::InvalidParameter(
            "mollification needs K = {0}".into(),
        ));
    }
    let model = Model::Mollified {
        base: Box::new(h.model().clone()),
        delta,
    };
    Hamiltonian::new(model, h.dim())?.with_singular_set(SingularSet::Empty)
}

pub const DEFAULT_DELTA_SCHEDULE: [f64; 5] = [0.1, 0.03, 0.01, 0.003, 0.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLog {
    pub delta: f64,
    pub energy_start: f64,
    pub energy_end: f64,
    /// Energy of the stage end under the unmollified `F`.
    pub true_energy_end: f64,
    pub iterations: usize,
    pub converged: bool,
    pub monotone: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationResult {
    pub result: MinimizeResult,
    pub stages: Vec<StageLog>,
}

/// Minimizes with `F^δ` for each `δ > 0` of the schedule, warm-starting each
/// stage, then finishes with `F` itself.
pub fn continuation_minimize(
    prob: &DirichletProblem,
    schedule: &[f64],
    opts: &MinimizeOptions,
) -> Result<ContinuationResult> {
    if schedule.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter(
            "delta schedule must be strictly decreasing".into(),
        ));
    }
    let mesh = SimplexMesh::new(&prob.grid, Diagonal::Forward);
    let mut current = prob.initial_guess();
    let mut stages = Vec::new();
    let mut deltas: Vec<f64> = schedule.iter().copied().filter(|d| *d > 0.0).collect();
    deltas.push(0.0);
    let mut last = None;
    for delta in deltas {
        let h = if delta > 0.0 {
            mollify(&prob.hamiltonian, delta)?
        } else {
            prob.hamiltonian.clone()
        };
        let stage = DirichletProblem {
            hamiltonian: h,
            ..prob.clone()
        };
        let r = minimize_from(&stage, &current, opts)?;
        stages.push(StageLog {
            delta,
            energy_start: r.energies[0],
            energy_end: r.energy,
            true_energy_end: mesh.energy(&r.u.values, &prob.hamiltonian),
            iterations: r.iterations,
            converged: r.converged,
            monotone: r.energies.windows(2).all(|w| w[1] <= w[0]),
        });
        current = r.u.clone();
        last = Some(r);
    }
    Ok(ContinuationResult {
        result: last.expect("final stage always runs"),
        stages,
    })
}

/// `φ(x) = (1 - |x - c|²/r²)₊²`, a `C¹` bump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: usize,
    pub radius: f64,
    pub values: Vec<f64>,
}

impl TestFunction {
    /// Requires the support to lie strictly inside `Ω`.
    pub fn bump(grid: &Grid, center: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || grid.boundary_distance(center) <= radius {
            return Err(Error::SupportTouchesBoundary(center));
        }
        let c = grid.coord(center);
        let values = (0..grid.len())
            .map(|i| {
                let x = grid.coord(i);
                let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                (1.0 - d2 / (radius * radius)).max(0.0).powi(2)
            })
            .collect();
        Ok(Self {
            center,
            radius,
            values,
        })
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// `Σ_s |s| F_A(∇u_s)·∇φ_s`.
pub fn weak_residual(u: &SampledFunction, h: &Hamiltonian, phi: &TestFunction) -> Result<f64> {
    if phi.values.len() != u.grid.len() {
        return Err(Error::DimensionMismatch {
            expected: u.grid.len(),
            got: phi.values.len(),
        });
    }
    if u.grid.boundary_distance(phi.center) <= phi.radius {
        return Err(Error::SupportTouchesBoundary(phi.center));
    }
    let mesh = SimplexMesh::new(&u.grid, Diagonal::Forward);
    Ok(mesh.flux_pairing(&u.values, &phi.values, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub radii: Vec<f64>,
    pub count: usize,
    pub max_abs: f64,
    /// Largest `|residual| / (grad_tol Σ|φ|)`.
    pub max_ratio: f64,
    pub worst_center: Option<usize>,
    pub passed: bool,
}

/// Weak residuals over bumps centred at every node whose support fits in
/// `Ω`, for each radius. The pairing is linear in `φ`, so each residual is
/// the dot product of the nodal energy gradient with the bump; `|r(φ)|` is
/// then bounded by `grad_tol Σ|φ|` at a converged minimizer.
pub fn residual_basis(
    u: &SampledFunction,
    h: &Hamiltonian,
    radii: &[f64],
    grad_tol: f64,
) -> Result<ResidualReport> {
    let g = &u.grid;
    let mesh = SimplexMesh::new(g, Diagonal::Forward);
    let grad = mesh.energy_gradient(&u.values, h);
    let mut report = ResidualReport {
        radii: radii.to_vec(),
        count: 0,
        max_abs: 0.0,
        max_ratio: 0.0,
        worst_center: None,
        passed: true,
    };
    for &r in radii {
        for center in g.interior_nodes() {
            if g.boundary_distance(center) <= r {
                continue;
            }
            let c = g.coord(center);
            let (mut res, mut l1) = (0.0, 0.0);
            for (off, d2) in g.offsets_within(r) {
                let Some(i) = g.shift(center, off) else {
                    continue;
                };
                let phi = (1.0 - d2 / (r * r)).max(0.0).powi(2);
                debug_assert!(g
                    .coord(i)
                    .iter()
                    .zip(&c)
                    .all(|(a, b)| (a - b).abs() <= r + 1e-12));
                res += grad[i] * phi;
                l1 += phi;
            }
            report.count += 1;
            report.max_abs = report.max_abs.max(res.abs());
            let ratio = if l1 > 0.0 && grad_tol > 0.0 {
                res.abs() / (grad_tol * l1)
            } else {
                0.0
            };
            if ratio > report.max_ratio || report.worst_center.is_none() {
                report.max_ratio = report.max_ratio.max(ratio);
                report.worst_center = Some(center);
            }
        }
    }
    report.passed = report.max_ratio <= 1.0;
    Ok(report)
}

/// `F(A) >= c|A|^s - 1/c` on 400 log-spaced radii in `[1e-3, r_max]` and at
/// 0. Always `false` when `s <= n`.
pub fn coercivity_check(h: &Hamiltonian, s: f64, c: f64, r_max: f64) -> Result<bool> {
    if !(c > 0.0) || !(r_max > 1e-3) {
        return Err(Error::InvalidParameter(format!(
            "need c > 0 and r_max > 1e-3, got {c}, {r_max}"
        )));
    }
    if s <= h.dim() as f64 {
        return Ok(false);
    }
    let radii = std::iter::once(0.0).chain(crate::monotone::log_spaced(1e-3, r_max, 400));
    for r in radii {
        let f = h.model().profile(r).0;
        if f < c * r.powf(s) - 1.0 / c {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `‖Du‖_{L^r(B_R)} / ‖u‖_{L^∞(B_{2R})}` for balls centred at the middle of
/// the box. Simplices count toward `B_R` by centroid.
pub fn caccioppoli_diagnostic(u: &SampledFunction, r_exp: f64, radius: f64) -> Result<f64> {
    if !(r_exp > 1.0) || !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need r > 1 and R > 0, got {r_exp}, {radius}"
        )));
    }
    let g = &u.grid;
    let centre: Vec<f64> = g
        .lo()
        .iter()
        .zip(g.hi())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let room = g
        .lo()
        .iter()
        .zip(g.hi())
        .map(|(a, b)| 0.5 * (b - a))
        .fold(f64::INFINITY, f64::min);
    if 2.0 * radius > room + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "B_2R with R = {radius} leaves the domain"
        )));
    }
    let dist = |x: &[f64]| {
        norm(
            &x.iter()
                .zip(&centre)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        )
    };
    let sup = (0..g.len())
        .filter(|&i| dist(&g.coord(i)) <= 2.0 * radius + 1e-12)
        .map(|i| u.values[i].abs())
        .fold(0.0, f64::max);
    let mesh = SimplexMesh::new(g, Diagonal::Forward);
    let mut integral = 0.0;
    for s in 0..mesh.len() {
        let verts = mesh.vertices(s);
        let mut cen = vec![0.0; g.dim()];
        for &v in verts {
            for (c, x) in cen.iter_mut().zip(g.coord(v)) {
                *c += x / verts.len() as f64;
            }
        }
        if dist(&cen) <= radius {
            let grad = mesh.simplex_gradient(s, &u.values);
            integral += norm(&grad[..g.dim()]).powf(r_exp) * mesh.volumes()[s];
        }
    }
    let lr = integral.powf(1.0 / r_exp);
    if sup == 0.0 {
        return Ok(if lr == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(lr / sup)
}

/// `F(b) - F(a) - F_A(a)·(b - a)`, non-negative for convex `F`.
pub fn convexity_gap(h: &Hamiltonian, a: &[f64], b: &[f64]) -> Result<f64> {
    let fa = h.eval(a)?;
    let fb = h.eval(b)?;
    let ga = h.grad(a)?;
    Ok(fb
        - fa
        - ga.iter()
            .zip(b.iter().zip(a))
            .map(|(g, (y, x))| g * (y - x))
            .sum::<f64>())
}

/// `(F_A(b) - F_A(a))·(b - a) / |b - a|^q`.
pub fn monotonicity_ratio(h: &Hamiltonian, a: &[f64], b: &[f64], q: f64) -> Result<f64> {
    let ga = h.grad(a)?;
    let gb = h.grad(b)?;
    let d: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
    let num: f64 = gb
        .iter()
        .zip(&ga)
        .zip(&d)
        .map(|((u, v), w)| (u - v) * w)
        .sum();
    Ok(num / norm(&d).powf(q))
}

/// `p 2^{2-p}`, the sharp constant in `(F_A(b) - F_A(a))·(b - a) >= c|b - a|^p`
/// for `F = |a|^p`, `p >= 2`, attained at `a = -b`.
pub fn monotonicity_constant(p: f64) -> f64 {
    p * 2f64.powf(2.0 - p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub perturbations: usize,
    pub energy: f64,
    /// `min_v E(u + v) - E(u)`.
    pub min_gap: f64,
    pub passed: bool,
}

/// Compares `E(u)` with `E(u + v)` for seeded random `v` vanishing on `∂Ω`:
/// nodal noise and bumps with amplitudes from `1e-1` down to `1e-6`.
pub fn minimality_certificate(
    prob: &DirichletProblem,
    u: &SampledFunction,
    count: usize,
    seed: u64,
    slack: f64,
) -> Result<Certificate> {
    let g = &prob.grid;
    let mesh = SimplexMesh::new(g, Diagonal::Forward);
    let e0 = mesh.energy(&u.values, &prob.hamiltonian);
    let interior = g.interior_nodes();
    if interior.is_empty() {
        return Err(Error::InvalidParameter("grid has no interior nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    for k in 0..count {
        let amp = 10f64.powi(-((k % 6) as i32 + 1));
        let mut v = u.values.clone();
        if k % 2 == 0 {
            for &i in &interior {
                v[i] += amp * rng.gen_range(-1.0..1.0);
            }
        } else {
            let centre = interior[rng.gen_range(0..interior.len())];
            let r = rng.gen_range(2.0..8.0) * g.h();
            let c = g.coord(centre);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for &i in &interior {
                let d2: f64 = g
                    .coord(i)
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                v[i] += sign * amp * (1.0 - d2 / (r * r)).max(0.0).powi(2);
            }
        }
        min_gap = min_gap.min(mesh.energy(&v, &prob.hamiltonian) - e0);
    }
    Ok(Certificate {
        perturbations: count,
        energy: e0,
        min_gap,
        passed: min_gap >= -slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_line(cells: usize, b0: f64, b1: f64) -> SampledFunction {
        SampledFunction::from_fn(Grid::cube(1, 0.0, 1.0, cells).unwrap(), |x| {
            b0 + (b1 - b0) * x[0]
        })
        .unwrap()
    }

    #[test]
    fn one_dimensional_affine_minimizers() {
        for p in [1.2, 1.5, 2.0, 3.0] {
            let h = Hamiltonian::p_dirichlet(p, 1).unwrap();
            let data = unit_line(64, 0.0, 1.0);
            let prob = DirichletProblem::new(h, &data).unwrap();
            // a bad start so the optimizer has work to do
            let start = data.map(|v| v * v * v);
            let r = minimize_from(
                &prob,
                &start,
                &MinimizeOptions {
                    grad_tol: Some(1e-11),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.converged, "p = {p}: {} > {}", r.grad_norm, r.grad_tol);
            assert!(
                r.u.max_abs_diff(&data) < 1e-6,
                "p = {p}: {}",
                r.u.max_abs_diff(&data)
            );
            assert!(r.energies.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn saddle_data_in_2d() {
        let h = Hamiltonian::p_dirichlet(2.0, 2).unwrap();
        let mut errs = Vec::new();
        for cells in [8, 16] {
            let g = Grid::cube(2, 0.0, 1.0, cells).unwrap();
            let exact = BoundaryData::Saddle.sample(&g).unwrap();
            let prob = DirichletProblem::new(h.clone(), &exact).unwrap();
            let r = minimize(
                &prob,
                &MinimizeOptions {
                    grad_tol: Some(1e-12),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.converged);
            errs.push(r.u.max_abs_diff(&exact));
        }
        // x² - y² is reproduced exactly by the 5-point stencil the P1 mesh induces
        assert!(errs.iter().all(|e| *e < 1e-9), "{errs:?}");
    }

    #[test]
    fn continuation_matches_direct() {
        let h = Hamiltonian::p_dirichlet(1.9, 2).unwrap();
        let g = Grid::cube(2, 0.0, 1.0, 12).unwrap();
        let data = BoundaryData::Harmonic.sample(&g).unwrap();
        let prob = DirichletProblem::new(h, &data).unwrap();
        let opts = MinimizeOptions {
            grad_tol: Some(1e-11),
            ..Default::default()
        };
        let direct = minimize(&prob, &opts).unwrap();
        let cont = continuation_minimize(&prob, &DEFAULT_DELTA_SCHEDULE, &opts).unwrap();
        assert!(direct.converged && cont.result.converged);
        assert!(cont.result.u.max_abs_diff(&direct.u) < 1e-6);
        assert_eq!(cont.stages.len(), 5);
        assert!(cont.stages.iter().all(|s| s.monotone));
    }

    #[test]
    fn zero_data_stays_zero() {
        let h = Hamiltonian::p_dirichlet(1.2, 1).unwrap();
        let data = unit_line(40, 0.0, 0.0);
        let prob = DirichletProblem::new(h, &data).unwrap();
        let r = continuation_minimize(&prob, &DEFAULT_DELTA_SCHEDULE, &MinimizeOptions::default())
            .unwrap();
        assert!(r.result.u.values.iter().all(|v| *v == 0.0));
        assert_eq!(r.result.energy, 0.0);
    }

    #[test]
    fn affine_data_under_kinked_integrand() {
        // F = |a| + |a|²/2 is not C² at 0;
        // the gradient stays near 1, away from the kink
        let model = Model::CustomRadial {
            terms: vec![
                crate::hamiltonian::PowerTerm {
                    coef: 1.0,
                    exp: 1.0,
                },
                crate::hamiltonian::PowerTerm {
                    coef: 0.5,
                    exp: 2.0,
                },
            ],
        };
        let h = Hamiltonian::new(model, 1).unwrap();
        let data = unit_line(32, 0.0, 1.0);
        let prob = DirichletProblem::new(h, &data).unwrap();
        let r = minimize_from(&prob, &data.map(|v| v * v), &MinimizeOptions::default()).unwrap();
        assert!(
            r.u.max_abs_diff(&data) < 1e-5,
            "{}",
            r.u.max_abs_diff(&data)
        );
    }

    #[test]
    fn mollify_examples() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let delta = 0.2;
        let m = mollify(&h, delta).unwrap();
        assert_eq!(
            m.eval(&[2.0 * delta, 0.0]).unwrap(),
            h.eval(&[2.0 * delta, 0.0]).unwrap()
        );
        assert_eq!(m.eval(&[0.25 * delta, 0.0]).unwrap(), 0.0);
        assert!(mollify(&h, 1.0).is_err());
        assert!(mollify(&h, 0.0).is_err());
        let cong = Hamiltonian::new(Model::Congestion { p: 2.0 }, 2).unwrap();
        assert!(mollify(&cong, 0.1).is_err());
    }

    #[test]
    fn mollified_flux_error_shrinks() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let sup_err = |delta: f64| {
            let m = mollify(&h, delta).unwrap();
            (1..=2000)
                .map(|k| k as f64 * 1e-3)
                .map(|r| (h.flux_factor(r) * r - m.flux_factor(r) * r).abs())
                .fold(0.0, f64::max)
        };
        let errs: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&d| sup_err(d))
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn weak_residual_examples() {
        let h = Hamiltonian::p_dirichlet(2.0, 1).unwrap();
        let g = Grid::cube(1, -1.0, 1.0, 1600).unwrap();
        let cone = SampledFunction::from_fn(g.clone(), |x| x[0].abs()).unwrap();
        let phi = TestFunction::bump(&g, 800, 0.25).unwrap();
        let r = weak_residual(&cone, &h, &phi).unwrap();
        assert_relative_eq!(r, -4.0 * phi.values[800], max_relative = 0.05);

        let h2 = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let g2 = Grid::cube(2, 0.0, 1.0, 20).unwrap();
        let affine = SampledFunction::from_fn(g2.clone(), |x| 0.4 * x[0] - 1.3 * x[1]).unwrap();
        let phi2 = TestFunction::bump(&g2, g2.index(&[10, 9]), 0.3).unwrap();
        assert!(weak_residual(&affine, &h2, &phi2).unwrap().abs() < 1e-12);

        assert!(matches!(
            TestFunction::bump(&g2, g2.index(&[2, 9]), 0.3),
            Err(Error::SupportTouchesBoundary(_))
        ));
        let mut close = phi2.clone();
        close.center = g2.index(&[2, 9]);
        assert!(matches!(
            weak_residual(&affine, &h2, &close),
            Err(Error::SupportTouchesBoundary(_))
        ));
    }

    #[test]
    fn residual_basis_agrees_with_pairing() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let g = Grid::cube(2, 0.0, 1.0, 16).unwrap();
        let u = SampledFunction::from_fn(g.clone(), |x| (2.0 * x[0]).sin() * x[1] + x[0] * x[0])
            .unwrap();
        let r = 4.0 * g.h();
        let centre = g.index(&[7, 8]);
        let direct = weak_residual(&u, &h, &TestFunction::bump(&g, centre, r).unwrap()).unwrap();
        let mesh = SimplexMesh::new(&g, Diagonal::Forward);
        let grad = mesh.energy_gradient(&u.values, &h);
        let via_grad: f64 = TestFunction::bump(&g, centre, r)
            .unwrap()
            .values
            .iter()
            .zip(&grad)
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(direct, via_grad, max_relative = 1e-10);
        let rep = residual_basis(&u, &h, &[r], 1.0).unwrap();
        assert!(rep.max_abs >= direct.abs());
        assert!(rep.count > 0);
    }

    #[test]
    fn minimizer_residuals_and_certificate() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let g = Grid::cube(2, 0.0, 1.0, 16).unwrap();
        let data = BoundaryData::Harmonic.sample(&g).unwrap();
        let prob = DirichletProblem::new(h.clone(), &data).unwrap();
        let r = minimize(
            &prob,
            &MinimizeOptions {
                grad_tol: Some(1e-10),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.converged);
        let hh = g.h();
        let rep = residual_basis(&r.u, &h, &[2.0 * hh, 3.0 * hh, 4.0 * hh], r.grad_tol).unwrap();
        assert!(rep.passed, "{rep:?}");
        let cert = minimality_certificate(&prob, &r.u, 100, 7, 1e-9).unwrap();
        assert!(cert.passed, "{cert:?}");
    }

    #[test]
    fn coercivity_examples() {
        let p3 = Hamiltonian::p_dirichlet(3.0, 2).unwrap();
        assert!(coercivity_check(&p3, 2.5, 0.5, 1e3).unwrap());
        let p15 = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        assert!(!coercivity_check(&p15, 2.5, 0.5, 1e3).unwrap());
        let q = Hamiltonian::new(Model::Quadratic, 1).unwrap();
        assert!(coercivity_check(&q, 2.0, 0.5, 1e3).unwrap());
        assert!(!coercivity_check(&q, 1.0, 0.5, 1e3).unwrap());
        let g = Grid::cube(2, 0.0, 1.0, 4).unwrap();
        let data = BoundaryData::Saddle.sample(&g).unwrap();
        assert!(DirichletProblem::new(q.clone(), &unit_line(4, 0.0, 1.0))
            .unwrap()
            .with_coercivity(2.0, 0.5)
            .is_ok());
        assert!(DirichletProblem::new(p3, &data)
            .unwrap()
            .with_coercivity(2.0, 0.5)
            .is_err());
    }

    #[test]
    fn caccioppoli_examples() {
        let g = Grid::cube(1, -1.0, 1.0, 400).unwrap();
        let c = SampledFunction::from_fn(g.clone(), |_| 2.0).unwrap();
        assert_eq!(caccioppoli_diagnostic(&c, 2.0, 0.25).unwrap(), 0.0);
        let x = SampledFunction::from_fn(g, |x| x[0]).unwrap();
        // ‖1‖_{L²(-1/4, 1/4)} = √(1/2) and sup over (-1/2, 1/2) of |x| is 1/2
        assert_relative_eq!(
            caccioppoli_diagnostic(&x, 2.0, 0.25).unwrap(),
            2f64.sqrt(),
            max_relative = 1e-9
        );
        assert!(caccioppoli_diagnostic(&x, 2.0, 0.6).is_err());
    }

    #[test]
    fn caccioppoli_ratio_is_stable_under_refinement() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let ratios: Vec<f64> = [16, 32]
            .iter()
            .map(|&cells| {
                let g = Grid::cube(2, 0.0, 1.0, cells).unwrap();
                let data = BoundaryData::Harmonic.sample(&g).unwrap();
                let prob = DirichletProblem::new(h.clone(), &data).unwrap();
                let opts = MinimizeOptions {
                    grad_tol: Some(1e-10),
                    ..Default::default()
                };
                let r = minimize(&prob, &opts).unwrap();
                assert!(r.converged);
                caccioppoli_diagnostic(&r.u, 2.0, 0.2).unwrap()
            })
            .collect();
        assert!((ratios[1] / ratios[0] - 1.0).abs() <= 0.2, "{ratios:?}");
    }

    #[test]
    fn monotonicity_constant_is_sharp() {
        for p in [2.0, 2.5, 3.0, 4.0] {
            let h = Hamiltonian::p_dirichlet(p, 2).unwrap();
            let c = monotonicity_constant(p);
            assert_relative_eq!(
                monotonicity_ratio(&h, &[-0.7, 0.2], &[0.7, -0.2], p).unwrap(),
                c,
                max_relative = 1e-12
            );
        }
    }

    proptest! {
        #[test]
        fn convexity_gap_is_non_negative(a in prop::array::uniform2(-5.0..5.0f64), b in prop::array::uniform2(-5.0..5.0f64), p in 1.05..4.0f64) {
            prop_assume!(norm(&a) > 1e-9);
            for h in [Hamiltonian::p_dirichlet(p, 2).unwrap(), Hamiltonian::new(Model::Congestion { p }, 2).unwrap()] {
                let gap = convexity_gap(&h, &a, &b).unwrap();
                prop_assert!(gap >= -1e-12 * (1.0 + h.eval(&b).unwrap().abs()), "{}", gap);
            }
        }

        #[test]
        fn monotonicity_bound_holds(a in prop::array::uniform2(-3.0..3.0f64), b in prop::array::uniform2(-3.0..3.0f64), p in 2.0..4.0f64) {
            prop_assume!(norm(&[a[0] - b[0], a[1] - b[1]]) > 1e-6);
            let h = Hamiltonian::p_dirichlet(p, 2).unwrap();
            let ratio = monotonicity_ratio(&h, &a, &b, p).unwrap();
            prop_assert!(ratio >= monotonicity_constant(p) * (1.0 - 1e-9));
        }
    }
}
