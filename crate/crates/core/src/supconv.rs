//! Flat sup- and inf-convolutions on grids, and discrete checks of their
//! basic properties.
//!
//! `u^ε(x) = max_y { u(y) - Θ(|x-y|²)/(2ε) }` is evaluated exactly over grid
//! nodes. Rows whose best possible value cannot beat the current maximum are
//! skipped, which keeps full-domain searches cheap for flat kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatness::FlatKernel;
use crate::grid::{SampledFunction, SimplexMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Sup,
    Inf,
}

#[derive(Clone, Debug)]
pub struct ConvolutionResult {
    pub u_eps: SampledFunction,
    /// Maximizing (minimizing for `Inf`) node for every node.
    pub argmax: Vec<usize>,
    pub eps: f64,
    pub kernel: FlatKernel,
    /// `ρ(ε) = √Θ^{-1}(4‖u‖ε)`.
    pub loc_radius: f64,
    pub search_radius: f64,
    /// Nodes where more than one node attains the maximum.
    pub ties: usize,
    pub envelope: Envelope,
    pub warnings: Vec<String>,
}

/// `√Θ^{-1}(4 ‖u‖ ε)`.
pub fn localization_radius(kernel: &FlatKernel, sup_norm: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || !(sup_norm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need eps > 0 and sup_norm >= 0 (got {eps}, {sup_norm})"
        )));
    }
    Ok(kernel.theta_inverse(4.0 * sup_norm * eps)?.sqrt())
}

pub fn sup_convolve(
    u: &SampledFunction,
    kernel: &FlatKernel,
    eps: f64,
) -> Result<ConvolutionResult> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "eps = {eps} must be positive"
        )));
    }
    let grid = &u.grid;
    let h = grid.h();
    let mut warnings = Vec::new();
    let loc_radius = match localization_radius(kernel, u.sup_norm(), eps) {
        Ok(r) => r,
        Err(e) => {
            warnings.push(format!(
                "Θ^-1 unavailable ({e}); searching the whole domain"
            ));
            grid.diam()
        }
    };
    if loc_radius < h {
        warnings.push(format!(
            "ρ(ε) = {loc_radius:e} is below one cell; search radius floored at h"
        ));
    }
    let search_radius = (loc_radius.max(h) + h).min(grid.diam() * (1.0 + 1e-12));
    let (values, argmax, ties) = scan(u, kernel, eps, search_radius);
    Ok(ConvolutionResult {
        u_eps: SampledFunction::new(grid.clone(), values)?,
        argmax,
        eps,
        kernel: kernel.clone(),
        loc_radius,
        search_radius,
        ties,
        envelope: Envelope::Sup,
        warnings,
    })
}

/// `u_ε = -(-u)^ε`.
pub fn inf_convolve(
    u: &SampledFunction,
    kernel: &FlatKernel,
    eps: f64,
) -> Result<ConvolutionResult> {
    let mut r = sup_convolve(&u.map(|v| -v), kernel, eps)?;
    r.u_eps = r.u_eps.map(|v| -v);
    r.envelope = Envelope::Inf;
    Ok(r)
}

fn scan(
    u: &SampledFunction,
    kernel: &FlatKernel,
    eps: f64,
    radius: f64,
) -> (Vec<f64>, Vec<usize>, usize) {
    let grid = &u.grid;
    let nx = grid.shape()[0];
    let ny = if grid.dim() == 2 { grid.shape()[1] } else { 1 };
    let hx = grid.spacing(0);
    let hy = if grid.dim() == 2 {
        grid.spacing(1)
    } else {
        0.0
    };
    let r2 = radius * radius * (1.0 + 1e-12);
    let mut pen = vec![f64::INFINITY; nx * ny];
    let mut dist2 = vec![0.0; nx * ny];
    for dj in 0..ny {
        for di in 0..nx {
            let (a, b) = (di as f64 * hx, dj as f64 * hy);
            let d2 = a * a + b * b;
            dist2[di + nx * dj] = d2;
            if d2 <= r2 {
                pen[di + nx * dj] = kernel.penalty(d2, eps);
            }
        }
    }
    let vals = &u.values;
    let row_max: Vec<f64> = (0..ny)
        .map(|j| {
            vals[j * nx..(j + 1) * nx]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut out = vec![0.0; vals.len()];
    let mut arg = vec![0usize; vals.len()];
    let mut ties = 0;
    for j0 in 0..ny {
        for i0 in 0..nx {
            let x = i0 + nx * j0;
            let mut best = vals[x];
            let mut best_y = x;
            let mut best_d2 = 0.0;
            let mut tie = false;
            for dj in 0..ny {
                let min_pen = pen[nx * dj];
                if min_pen == f64::INFINITY {
                    break;
                }
                for j in [
                    j0.checked_sub(dj),
                    if dj > 0 { Some(j0 + dj) } else { None },
                ]
                .into_iter()
                .flatten()
                {
                    if j >= ny || row_max[j] - min_pen < best {
                        continue;
                    }
                    let row = &vals[j * nx..(j + 1) * nx];
                    let prow = &pen[nx * dj..nx * (dj + 1)];
                    for (i, &v) in row.iter().enumerate() {
                        let di = i.abs_diff(i0);
                        let cand = v - prow[di];
                        if cand < best {
                            continue;
                        }
                        let y = i + nx * j;
                        let d2 = dist2[di + nx * dj];
                        if cand > best {
                            best = cand;
                            best_y = y;
                            best_d2 = d2;
                            tie = false;
                        } else if y != best_y {
                            tie = true;
                            if (d2, y) < (best_d2, best_y) {
                                best_y = y;
                                best_d2 = d2;
                            }
                        }
                    }
                }
            }
            out[x] = best;
            arg[x] = best_y;
            ties += tie as usize;
        }
    }
    (out, arg, ties)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeMargin {
    pub node: usize,
    pub margin: f64,
}

/// Outcome of one nodewise inequality check. `margin` is `lhs - rhs` of the
/// inequality in the form `lhs >= rhs`; a node fails when `margin < -tol`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    pub tol: f64,
    pub eligible: usize,
    pub skipped: usize,
    pub violations: usize,
    pub pass_fraction: f64,
    pub worst: Option<NodeMargin>,
    pub failures: Vec<NodeMargin>,
}

const MAX_LISTED: usize = 50;

struct Tally {
    name: &'static str,
    tol: f64,
    eligible: usize,
    skipped: usize,
    worst: Option<NodeMargin>,
    failures: Vec<NodeMargin>,
    violations: usize,
}

impl Tally {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            eligible: 0,
            skipped: 0,
            worst: None,
            failures: Vec::new(),
            violations: 0,
        }
    }

    fn record(&mut self, node: usize, margin: f64) {
        self.eligible += 1;
        if self.worst.as_ref().is_none_or(|w| margin < w.margin) {
            self.worst = Some(NodeMargin { node, margin });
        }
        if !(margin >= -self.tol) {
            self.violations += 1;
            if self.failures.len() < MAX_LISTED {
                self.failures.push(NodeMargin { node, margin });
            }
        }
    }

    fn skip(&mut self) {
        self.skipped += 1;
    }

    fn finish(self) -> CheckReport {
        let frac = if self.eligible == 0 {
            1.0
        } else {
            1.0 - self.violations as f64 / self.eligible as f64
        };
        CheckReport {
            check: self.name.to_string(),
            passed: self.violations == 0,
            tol: self.tol,
            eligible: self.eligible,
            skipped: self.skipped,
            violations: self.violations,
            pass_fraction: frac,
            worst: self.worst,
            failures: self.failures,
        }
    }
}

/// Interior node data shared by the a.e. checks.
struct NodeDerivs {
    grad: Vec<f64>,
    hess: DMatrix<f64>,
}

impl NodeDerivs {
    fn at(u: &SampledFunction, node: usize) -> Option<Self> {
        Some(Self {
            grad: u.nodal_gradient(node).ok()?,
            hess: u.hessian(node).ok()?,
        })
    }

    /// Discrete stand-in for twice differentiability: bounded second differences.
    fn smooth(&self, h: f64) -> bool {
        self.hess.amax() <= 1.0 / h
    }

    fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn sup_res(res: &ConvolutionResult) -> Result<()> {
    if res.envelope != Envelope::Sup {
        return Err(Error::InvalidParameter(
            "check expects a sup-convolution".into(),
        ));
    }
    Ok(())
}

/// `u^ε >= u` at every node.
pub fn check_ordering(res: &ConvolutionResult, u: &SampledFunction) -> CheckReport {
    let mut t = Tally::new("ordering", 0.0);
    for (i, (a, b)) in res.u_eps.values.iter().zip(&u.values).enumerate() {
        let m = match res.envelope {
            Envelope::Sup => a - b,
            Envelope::Inf => b - a,
        };
        t.record(i, m);
    }
    t.finish()
}

/// `|x - x^ε| <= ρ(ε) + h` at every node.
pub fn check_localization(res: &ConvolutionResult) -> CheckReport {
    let g = &res.u_eps.grid;
    let mut t = Tally::new("localization", 0.0);
    let bound = res.loc_radius.max(g.h()) + g.h();
    for (x, &y) in res.argmax.iter().enumerate() {
        t.record(x, bound - dist(&g.coord(x), &g.coord(y)));
    }
    t.finish()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub eps: Vec<f64>,
    pub gaps: Vec<f64>,
    pub bounds: Vec<f64>,
    pub monotone_violations: usize,
    pub gaps_non_increasing: bool,
    pub gaps_strictly_decreasing: bool,
    pub passed: bool,
}

/// Nodewise `u <= u^{ε_{k+1}} <= u^{ε_k}` for a decreasing sequence, with
/// `‖u^ε - u‖ <= ω_u(ρ(ε)) + tol`, where `ω_u(r) = min(osc u, L r)` and `L`
/// is the Lipschitz constant of the piecewise-linear interpolant.
pub fn check_convergence(
    u: &SampledFunction,
    kernel: &FlatKernel,
    eps_sequence: &[f64],
    tol: f64,
) -> Result<ConvergenceReport> {
    if eps_sequence.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter(
            "eps sequence must be strictly decreasing".into(),
        ));
    }
    let mesh = SimplexMesh::new(&u.grid, Default::default());
    let lip = mesh
        .gradient(&u.values)
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let (lo, hi) = u
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let osc = hi - lo;
    let mut prev: Option<Vec<f64>> = None;
    let mut violations = 0;
    let (mut gaps, mut bounds) = (Vec::new(), Vec::new());
    for &eps in eps_sequence {
        let r = sup_convolve(u, kernel, eps)?;
        for (k, (&a, &b)) in r.u_eps.values.iter().zip(&u.values).enumerate() {
            if a < b || prev.as_ref().is_some_and(|p| a > p[k]) {
                violations += 1;
            }
        }
        gaps.push(r.u_eps.max_abs_diff(u));
        bounds.push(osc.min(lip * r.loc_radius) + tol);
        prev = Some(r.u_eps.values);
    }
    let non_inc = gaps.windows(2).all(|w| w[1] <= w[0]);
    let strict = gaps.windows(2).all(|w| w[1] < w[0]);
    let within = gaps.iter().zip(&bounds).all(|(g, b)| g <= b);
    Ok(ConvergenceReport {
        eps: eps_sequence.to_vec(),
        gaps,
        bounds,
        monotone_violations: violations,
        gaps_non_increasing: non_inc,
        gaps_strictly_decreasing: strict,
        passed: violations == 0 && non_inc && within,
    })
}

/// `D²u^ε >= -T'(d)/ε - tol` at interior nodes, tested through the smallest
/// lattice-direction second difference.
pub fn check_semiconvexity(res: &ConvolutionResult, tol: f64) -> Result<CheckReport> {
    sup_res(res)?;
    let bound = -res.kernel.semiconvexity_constant() / res.eps;
    let mut t = Tally::new("semiconvexity", tol);
    for node in res.u_eps.grid.interior_nodes() {
        t.record(node, res.u_eps.min_second_difference(node)? - bound);
    }
    Ok(t.finish())
}

/// `D²u^ε >= -Φ(|Du^ε|)/ε - tol`, in the same directional sense as the
/// semiconvexity check, where `|Du^ε| > h` and the node
/// passes the smoothness filter. Requires a flat kernel.
pub fn check_flatness(res: &ConvolutionResult, tol: f64) -> Result<CheckReport> {
    sup_res(res)?;
    if !res.kernel.is_flat() {
        return Err(Error::NonFlatKernel);
    }
    let h = res.u_eps.grid.h();
    let mut t = Tally::new("flatness", tol);
    for node in res.u_eps.grid.interior_nodes() {
        let Some(d) = NodeDerivs::at(&res.u_eps, node) else {
            continue;
        };
        let g = d.grad_norm();
        if !d.smooth(h) || g <= h {
            t.skip();
            continue;
        }
        let rhs = -res.kernel.phi(g)? / res.eps;
        t.record(node, res.u_eps.min_second_difference(node)? - rhs);
    }
    Ok(t.finish())
}

/// Largest jump of the maximizer, in units of `h`, tolerated across the
/// 3^n stencil before the node is treated as lying on a ridge of `u^ε`.
pub const ARGMAX_JUMP_CELLS: f64 = 8.0;

/// Discrete stand-in for a single-valued, smoothly moving maximizer near
/// `node`. Every stencil neighbour's maximizer stays within
/// `ARGMAX_JUMP_CELLS * h`, and along each stencil direction the second
/// difference of `x ↦ x^ε` stays within `2√n h`, the most that snapping three
/// maximizers to the grid can produce. A lopsided stencil means `x` sits
/// where two regimes of `u^ε` meet.
pub fn argmax_regular(res: &ConvolutionResult, node: usize) -> bool {
    let g = &res.u_eps.grid;
    let n = g.dim();
    let own = g.coord(res.argmax[node]);
    let at = |off: [isize; 2]| g.shift(node, off).map(|nb| g.coord(res.argmax[nb]));
    let dirs: &[[isize; 2]] = if n == 2 {
        &[[1, 0], [0, 1], [1, 1], [1, -1]]
    } else {
        &[[1, 0]]
    };
    let (jump, bend) = (ARGMAX_JUMP_CELLS * g.h(), 2.0 * (n as f64).sqrt() * g.h());
    dirs.iter().all(|&d| match (at(d), at([-d[0], -d[1]])) {
        (Some(a), Some(b)) => {
            let second: Vec<f64> = (0..n).map(|k| a[k] + b[k] - 2.0 * own[k]).collect();
            dist(&own, &a) <= jump && dist(&own, &b) <= jump && dist(&second, &vec![0.0; n]) <= bend
        }
        _ => false,
    })
}

fn eligible_for_argmax_checks(res: &ConvolutionResult, node: usize) -> Option<NodeDerivs> {
    let g = &res.u_eps.grid;
    if g.is_boundary(res.argmax[node]) || !argmax_regular(res, node) {
        return None;
    }
    NodeDerivs::at(&res.u_eps, node).filter(|d| d.smooth(g.h()))
}

/// Smallest gradient a centered difference of `u` resolves in double
/// precision. Flat kernels make `T^{-1}` so steep near 0 that gradients
/// below this floor carry no information about the displacement.
pub fn gradient_floor(u: &SampledFunction) -> f64 {
    4.0 * f64::EPSILON * u.sup_norm().max(1.0) / u.grid.h()
}

/// `|x^ε - (x + T^{-1}(ε|p|) p/|p|)| <= tol` with `p` the discrete gradient.
/// Nodes whose maximizer sits on `∂Ω`, that fail the smoothness filter,
/// where the maximizer jumps across the stencil, or whose gradient is below
/// [`gradient_floor`] are skipped.
pub fn check_magic(res: &ConvolutionResult, tol: f64) -> Result<CheckReport> {
    sup_res(res)?;
    let g = &res.u_eps.grid;
    let mut t = Tally::new("magic", tol);
    let floor = gradient_floor(&res.u_eps);
    for node in g.interior_nodes() {
        let Some(d) = eligible_for_argmax_checks(res, node) else {
            t.skip();
            continue;
        };
        let p = d.grad_norm();
        if p <= floor {
            t.skip();
            continue;
        }
        let x = g.coord(node);
        let step = res.kernel.t_inverse(res.eps * p)?;
        let predicted: Vec<f64> = x
            .iter()
            .zip(&d.grad)
            .map(|(xi, gi)| if p > 0.0 { xi + step * gi / p } else { *xi })
            .collect();
        t.record(node, -dist(&predicted, &g.coord(res.argmax[node])));
    }
    Ok(t.finish())
}

/// `|Du^ε(x)| >= T(|x - x^ε|)/ε - tol`. The grid maximizer is only known up
/// to half a cell diagonal, so `T` is evaluated at `|x - x^ε| - √n h/2`.
pub fn check_gradient_bound(res: &ConvolutionResult, tol: f64) -> Result<CheckReport> {
    sup_res(res)?;
    let g = &res.u_eps.grid;
    let mut t = Tally::new("gradient_bound", tol);
    let snap = 0.5 * g.h() * (g.dim() as f64).sqrt();
    for node in g.interior_nodes() {
        let Some(d) = eligible_for_argmax_checks(res, node) else {
            t.skip();
            continue;
        };
        let r = dist(&g.coord(node), &g.coord(res.argmax[node])) - snap;
        let rhs = if r <= 0.0 {
            0.0
        } else {
            res.kernel.t.eval(r) / res.eps
        };
        t.record(node, d.grad_norm() - rhs);
    }
    Ok(t.finish())
}

/// `sup_{Ω'^ε} |Du^ε| <= sup_{Ω'} |Du| + tol`, with `Ω'` the nodes at least
/// `inner_margin` inside `Ω` and `Ω'^ε` those further than `ρ(ε)` from `∂Ω'`.
/// `|Du|` is taken over simplices of `Ω'`, `|Du^ε|` by centered differences.
pub fn check_lipschitz(
    res: &ConvolutionResult,
    u: &SampledFunction,
    inner_margin: f64,
    tol: f64,
) -> Result<CheckReport> {
    sup_res(res)?;
    let g = &u.grid;
    let inner: Vec<bool> = (0..g.len())
        .map(|i| g.boundary_distance(i) >= inner_margin - 1e-9 * g.h())
        .collect();
    let mesh = SimplexMesh::new(g, Default::default());
    let mut lip: f64 = 0.0;
    for s in 0..mesh.len() {
        if mesh.vertices(s).iter().all(|&v| inner[v]) {
            let grad = mesh.simplex_gradient(s, &u.values);
            lip = lip.max(grad.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    let mut t = Tally::new("lipschitz", tol);
    for node in g.interior_nodes() {
        if g.boundary_distance(node) - inner_margin <= res.loc_radius {
            continue;
        }
        let grad = res.u_eps.nodal_gradient(node)?;
        t.record(node, lip - grad.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(t.finish())
}

/// Every nodewise check on one sup-convolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupconvReport {
    pub eps: f64,
    pub loc_radius: f64,
    pub ties: usize,
    pub nodes: usize,
    pub checks: Vec<CheckReport>,
}

impl SupconvReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_checks(res: &ConvolutionResult, u: &SampledFunction, tol: f64) -> Result<SupconvReport> {
    let mut checks = vec![
        check_ordering(res, u),
        check_localization(res),
        check_semiconvexity(res, tol)?,
        check_magic(res, tol)?,
        check_gradient_bound(res, tol)?,
        check_lipschitz(res, u, 0.0, tol)?,
    ];
    if res.kernel.is_flat() {
        checks.push(check_flatness(res, tol)?);
    }
    Ok(SupconvReport {
        eps: res.eps,
        loc_radius: res.loc_radius,
        ties: res.ties,
        nodes: u.values.len(),
        checks,
    })
}
