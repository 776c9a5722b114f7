//! Discrete second-order jets and feeble viscosity sub/supersolution checks.
//!
//! A jet `(p, X)` touches `u` from above at `x` when
//! `u(x+z) <= u(x) + p·z + ½ X:z⊗z + η|z|²` for all grid offsets in a ball.
//! The `η|z|²` slack stands in for the `o(|z|²)` remainder. Jets whose
//! gradient lies within `κ` of the singular set `K` are excluded.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SampledFunction;
use crate::hamiltonian::{norm, Hamiltonian, SingularSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub p: Vec<f64>,
    #[serde(rename = "X", with = "rows")]
    x: DMatrix<f64>,
}

/// Square matrices as a list of rows.
mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("matrix must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl Jet {
    /// Symmetrizes `x`.
    pub fn new(p: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = p.len();
        if x.nrows() != n || x.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.nrows(),
            });
        }
        let x = (&x + x.transpose()) * 0.5;
        Ok(Self { p, x })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `G(p, X) = F_AA(p) : X`.
    pub fn g(&self, h: &Hamiltonian) -> Result<f64> {
        h.operator(&self.p, &self.x)
    }

    fn quadratic(&self, z: &[f64]) -> f64 {
        let n = z.len();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += self.x[(i, j)] * z[i] * z[j];
            }
        }
        self.p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + 0.5 * q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Upper,
    Lower,
}

fn touch(
    u: &SampledFunction,
    node: usize,
    jet: &Jet,
    radius: f64,
    slack: f64,
    side: Side,
) -> Result<bool> {
    let g = &u.grid;
    if radius < g.h() * (1.0 - 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "touch radius {radius} below grid spacing {}",
            g.h()
        )));
    }
    if jet.p.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: jet.p.len(),
        });
    }
    let u0 = u.values[node];
    let h: Vec<f64> = (0..g.dim()).map(|k| g.spacing(k)).collect();
    for (off, d2) in g.offsets_within(radius) {
        if d2 == 0.0 {
            continue;
        }
        let nb = g.shift(node, off).ok_or(Error::BoundaryNode(node))?;
        let z: Vec<f64> = (0..g.dim()).map(|k| off[k] as f64 * h[k]).collect();
        let q = jet.quadratic(&z);
        let gap = u.values[nb] - u0 - q;
        // rounding in the difference itself is not a touching failure
        let ulp = 4.0 * f64::EPSILON * (u.values[nb].abs() + u0.abs() + q.abs());
        let ok = match side {
            Side::Upper => gap <= slack * d2 + ulp,
            Side::Lower => gap >= -slack * d2 - ulp,
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Discrete `J^{2,+}` membership: `u(x+z) <= u(x) + p·z + ½X:z⊗z + slack|z|²`
/// for every grid offset with `0 < |z| <= radius`.
pub fn touch_test_upper(
    u: &SampledFunction,
    node: usize,
    jet: &Jet,
    radius: f64,
    slack: f64,
) -> Result<bool> {
    touch(u, node, jet, radius, slack, Side::Upper)
}

/// Discrete `J^{2,-}` membership, the mirror of [`touch_test_upper`].
pub fn touch_test_lower(
    u: &SampledFunction,
    node: usize,
    jet: &Jet,
    radius: f64,
    slack: f64,
) -> Result<bool> {
    touch(u, node, jet, radius, slack, Side::Lower)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Base,
    HessianShift,
    EigenShift,
    GradientShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub jet: Jet,
    pub kind: ProbeKind,
    /// Fit radius of the base jet this probe came from.
    pub fit_radius: f64,
    /// `dist(p, K) <= κ`.
    pub k_excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub node: usize,
    pub jets: Vec<Probe>,
    pub fit_radii: Vec<f64>,
    pub slack: f64,
}

/// Probe generation parameters. `slack` is `η`, `kappa` the K-exclusion band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub fit_radii: Vec<f64>,
    pub n_perturb: usize,
    pub slack: f64,
    pub kappa: f64,
    /// Curvature unit `osc(u)/diam²` used to normalize margins.
    pub curvature_scale: f64,
}

/// Oscillation of `u`, or 1 for constants.
fn value_scale(u: &SampledFunction) -> f64 {
    let (lo, hi) = u
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

impl ProbeOptions {
    /// Radii `4h, 3h, 2h`, one perturbation level, `η = 10 h osc(u)`,
    /// `κ = max(2h, 1e-3 max|Du|)`.
    pub fn for_function(u: &SampledFunction) -> Self {
        let g = &u.grid;
        let h = g.h();
        let grad_scale = g
            .interior_nodes()
            .into_iter()
            .filter_map(|i| u.nodal_gradient(i).ok())
            .map(|p| norm(&p))
            .fold(0.0, f64::max);
        let scale = value_scale(u);
        Self {
            fit_radii: vec![4.0 * h, 3.0 * h, 2.0 * h],
            n_perturb: 1,
            slack: 10.0 * h * scale,
            kappa: (2.0 * h).max(1e-3 * grad_scale),
            curvature_scale: scale / (g.diam() * g.diam()),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.slack > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "slack {} must be positive",
                self.slack
            )));
        }
        if self.fit_radii.is_empty() || self.fit_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidParameter(
                "fit radii must be positive and non-empty".into(),
            ));
        }
        if !(self.kappa >= 0.0) || !(self.curvature_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "kappa and curvature scale must be non-negative/positive".into(),
            ));
        }
        Ok(())
    }
}

/// Least-squares quadratic fit `c + p·z + ½ z·Xz` of `u` over the grid
/// offsets within `radius` of `node`.
pub fn fit_jet(u: &SampledFunction, node: usize, radius: f64) -> Result<Jet> {
    let g = &u.grid;
    let n = g.dim();
    let h: Vec<f64> = (0..n).map(|k| g.spacing(k)).collect();
    let offsets = g.offsets_within(radius);
    let cols = 1 + n + n * (n + 1) / 2;
    let mut a = DMatrix::zeros(offsets.len(), cols);
    let mut b = DVector::zeros(offsets.len());
    // scaled coordinates z/h keep the normal equations well conditioned
    for (row, (off, _)) in offsets.iter().enumerate() {
        let nb = g.shift(node, *off).ok_or(Error::BoundaryNode(node))?;
        let s: Vec<f64> = (0..n).map(|k| off[k] as f64).collect();
        a[(row, 0)] = 1.0;
        for k in 0..n {
            a[(row, 1 + k)] = s[k];
        }
        let mut c = 1 + n;
        for i in 0..n {
            for j in i..n {
                a[(row, c)] = if i == j {
                    0.5 * s[i] * s[i]
                } else {
                    s[i] * s[j]
                };
                c += 1;
            }
        }
        b[row] = u.values[nb];
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    if sv.len() < cols || sv.min() <= 1e-10 * sv.max() {
        return Err(Error::DegenerateFit(node));
    }
    let coef = svd.solve(&b, 0.0).map_err(|_| Error::DegenerateFit(node))?;
    let p: Vec<f64> = (0..n).map(|k| coef[1 + k] / h[k]).collect();
    let mut x = DMatrix::zeros(n, n);
    let mut c = 1 + n;
    for i in 0..n {
        for j in i..n {
            let v = coef[c] / (h[i] * h[j]);
            x[(i, j)] = v;
            x[(j, i)] = v;
            c += 1;
        }
    }
    Jet::new(p, x)
}

/// One base jet per fit radius, plus for each level `1..=n_perturb` the
/// shifts `X ± 3jη I`, `X ± 3jη v vᵀ` along the eigenvectors of `X` (2D
/// only), and `p ± 2jκ e_i`.
pub fn generate_probes(
    u: &SampledFunction,
    node: usize,
    k: &SingularSet,
    opts: &ProbeOptions,
) -> Result<ProbeSet> {
    opts.validate()?;
    let g = &u.grid;
    if g.is_boundary(node) {
        return Err(Error::BoundaryNode(node));
    }
    let n = g.dim();
    let delta = 3.0 * opts.slack;
    let mut jets = Vec::new();
    let mut push = |jet: Jet, kind, fit_radius| {
        let k_excluded = k.distance(&jet.p) <= opts.kappa;
        jets.push(Probe {
            jet,
            kind,
            fit_radius,
            k_excluded,
        });
    };
    for &r in &opts.fit_radii {
        let base = fit_jet(u, node, r)?;
        let eig = base.x.clone().symmetric_eigen();
        for level in 1..=opts.n_perturb {
            let s = level as f64;
            for sign in [1.0, -1.0] {
                let id = DMatrix::identity(n, n) * (sign * s * delta);
                push(
                    Jet::new(base.p.clone(), &base.x + id)?,
                    ProbeKind::HessianShift,
                    r,
                );
                if n > 1 {
                    for e in 0..n {
                        let v = eig.eigenvectors.column(e);
                        let bump = v * v.transpose() * (sign * s * delta);
                        push(
                            Jet::new(base.p.clone(), &base.x + bump)?,
                            ProbeKind::EigenShift,
                            r,
                        );
                    }
                }
                for i in 0..n {
                    let mut p = base.p.clone();
                    p[i] += sign * s * 2.0 * opts.kappa;
                    push(Jet::new(p, base.x.clone())?, ProbeKind::GradientShift, r);
                }
            }
        }
        push(base, ProbeKind::Base, r);
    }
    Ok(ProbeSet {
        node,
        jets,
        fit_radii: opts.fit_radii.clone(),
        slack: opts.slack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass { margin: f64 },
    Fail { margin: f64, witness: Jet },
    Vacuous,
}

impl Verdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail { .. })
    }
    pub fn is_vacuous(&self) -> bool {
        matches!(self, Verdict::Vacuous)
    }
    pub fn margin(&self) -> Option<f64> {
        match self {
            Verdict::Pass { margin } | Verdict::Fail { margin, .. } => Some(*margin),
            Verdict::Vacuous => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeVerdict {
    pub node: usize,
    /// `inf G >= -tol` over admissible upper jets.
    pub sub: Verdict,
    /// `sup G <= tol` over admissible lower jets.
    pub sup: Verdict,
}

impl NodeVerdict {
    pub fn is_fail(&self) -> bool {
        self.sub.is_fail() || self.sup.is_fail()
    }
    pub fn is_vacuous(&self) -> bool {
        self.sub.is_vacuous() && self.sup.is_vacuous()
    }
}

/// `G(p, X) / (ΔF(|p|) σ)` with `σ` the curvature unit of `u`; raw `G / σ`
/// where `ΔF` vanishes.
fn normalized(h: &Hamiltonian, jet: &Jet, sigma: f64) -> Result<f64> {
    let g = jet.g(h)?;
    let lap = h.laplacian_radial(norm(&jet.p));
    Ok(if lap > 0.0 && lap.is_finite() {
        g / (lap * sigma)
    } else {
        g / sigma
    })
}

/// Feeble sub- and supersolution test at one node. Margins are normalized
/// by `ΔF(|p|)` and the curvature unit, so `tol` is dimensionless. A side is
/// `Vacuous` when no probe off `K` touches at every fit radius.
pub fn feeble_check(
    u: &SampledFunction,
    h: &Hamiltonian,
    probes: &ProbeSet,
    curvature_scale: f64,
    tol: f64,
) -> Result<NodeVerdict> {
    if h.dim() != u.grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.grid.dim(),
            got: h.dim(),
        });
    }
    let mut sides = Vec::with_capacity(2);
    for side in [Side::Upper, Side::Lower] {
        let mut worst: Option<(f64, &Jet)> = None;
        for probe in probes.jets.iter().filter(|p| !p.k_excluded) {
            let mut touching = true;
            for &r in &probes.fit_radii {
                if !touch(u, probes.node, &probe.jet, r, probes.slack, side)? {
                    touching = false;
                    break;
                }
            }
            if !touching {
                continue;
            }
            let g = normalized(h, &probe.jet, curvature_scale)?;
            let m = match side {
                Side::Upper => g,
                Side::Lower => -g,
            };
            if worst.is_none_or(|(w, _)| m < w) {
                worst = Some((m, &probe.jet));
            }
        }
        sides.push(match worst {
            None => Verdict::Vacuous,
            Some((m, _)) if m >= -tol => Verdict::Pass { margin: m },
            Some((m, jet)) => Verdict::Fail {
                margin: m,
                witness: jet.clone(),
            },
        });
    }
    let sup = sides.pop().unwrap();
    let sub = sides.pop().unwrap();
    Ok(NodeVerdict {
        node: probes.node,
        sub,
        sup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub probes: ProbeOptions,
    /// Only nodes at least this far from `∂Ω` are checked (the largest fit
    /// radius is always added).
    pub inner_margin: f64,
    pub tol: f64,
}

impl VerifyOptions {
    pub fn for_function(u: &SampledFunction, tol: f64) -> Self {
        Self {
            probes: ProbeOptions::for_function(u),
            inner_margin: 0.0,
            tol,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SideCounts {
    pub pass: usize,
    pub fail: usize,
    pub vacuous: usize,
    pub worst_margin: Option<f64>,
    pub worst_node: Option<usize>,
}

impl SideCounts {
    fn add(&mut self, node: usize, v: &Verdict) {
        match v {
            Verdict::Pass { .. } => self.pass += 1,
            Verdict::Fail { .. } => self.fail += 1,
            Verdict::Vacuous => self.vacuous += 1,
        }
        if let Some(m) = v.margin() {
            if self.worst_margin.is_none_or(|w| m < w) {
                self.worst_margin = Some(m);
                self.worst_node = Some(node);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tol: f64,
    pub slack: f64,
    pub kappa: f64,
    pub nodes: usize,
    pub pass: usize,
    pub fail: usize,
    pub vacuous: usize,
    pub sub: SideCounts,
    pub sup: SideCounts,
    /// Failing nodes, first `MAX_WITNESSES` in node order.
    pub witnesses: Vec<NodeVerdict>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.fail == 0
    }
}

const MAX_WITNESSES: usize = 50;

/// Runs [`feeble_check`] at every interior node whose probe balls fit in `Ω`.
pub fn verify_region(
    u: &SampledFunction,
    h: &Hamiltonian,
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    opts.probes.validate()?;
    let g = &u.grid;
    let reach = opts.probes.fit_radii.iter().cloned().fold(0.0, f64::max);
    let nodes = g.inner_nodes(opts.inner_margin + reach);
    let verdicts: Vec<NodeVerdict> = nodes
        .par_iter()
        .map(|&node| {
            let probes = generate_probes(u, node, &h.singular_set(), &opts.probes)?;
            feeble_check(u, h, &probes, opts.probes.curvature_scale, opts.tol)
        })
        .collect::<Result<_>>()?;
    let mut report = VerifyReport {
        tol: opts.tol,
        slack: opts.probes.slack,
        kappa: opts.probes.kappa,
        nodes: verdicts.len(),
        pass: 0,
        fail: 0,
        vacuous: 0,
        sub: SideCounts::default(),
        sup: SideCounts::default(),
        witnesses: Vec::new(),
    };
    for v in &verdicts {
        report.sub.add(v.node, &v.sub);
        report.sup.add(v.node, &v.sup);
        if v.is_fail() {
            report.fail += 1;
            if report.witnesses.len() < MAX_WITNESSES {
                report.witnesses.push(v.clone());
            }
        } else if v.is_vacuous() {
            report.vacuous += 1;
        } else {
            report.pass += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn line(cells: usize, f: impl Fn(f64) -> f64) -> SampledFunction {
        SampledFunction::from_fn(Grid::cube(1, -1.0, 1.0, cells).unwrap(), |x| f(x[0])).unwrap()
    }

    fn square(cells: usize, f: impl Fn(f64, f64) -> f64) -> SampledFunction {
        SampledFunction::from_fn(Grid::cube(2, 0.0, 1.0, cells).unwrap(), |x| f(x[0], x[1]))
            .unwrap()
    }

    fn jet1(p: f64, x: f64) -> Jet {
        Jet::new(vec![p], DMatrix::from_element(1, 1, x)).unwrap()
    }

    #[test]
    fn jet_is_symmetrized() {
        let j = Jet::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(j.x()[(0, 1)], 1.0);
        assert_eq!(j.x()[(1, 0)], 1.0);
        assert!(Jet::new(vec![0.0], DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn touch_examples() {
        let u = line(200, |x| x * x);
        let (c, h) = (100, u.grid.h());
        let eta = 0.05;
        let r = 6.0 * h;
        assert!(touch_test_upper(&u, c, &jet1(0.0, 2.0 + 2.0 * eta), r, eta).unwrap());
        assert!(!touch_test_upper(&u, c, &jet1(0.0, 2.0 - 2.0 * eta - 3.0 * eta), r, eta).unwrap());
        assert!(touch_test_lower(&u, c, &jet1(0.0, 2.0), r, eta).unwrap());

        let a = line(200, |x| 0.3 * x - 1.0);
        for node in [50, 100, 150] {
            assert!(touch_test_upper(&a, node, &jet1(0.3, 0.0), r, 1e-12).unwrap());
            assert!(touch_test_lower(&a, node, &jet1(0.3, 0.0), r, 1e-12).unwrap());
        }

        let cone = line(200, f64::abs);
        assert!(!touch_test_upper(&cone, c, &jet1(0.0, 0.0), r, 0.1).unwrap());
        assert!(touch_test_lower(&cone, c, &jet1(0.0, 0.0), r, 0.1).unwrap());

        assert!(matches!(
            touch_test_upper(&u, c, &jet1(0.0, 0.0), 0.5 * h, eta),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            touch_test_upper(&u, 2, &jet1(0.0, 0.0), r, eta),
            Err(Error::BoundaryNode(2))
        ));
    }

    #[test]
    fn quadratic_fit_is_exact() {
        let u = square(20, |x, y| {
            1.0 + 0.5 * x - y + 1.5 * x * x - 0.7 * x * y + 0.25 * y * y
        });
        let node = u.grid.index(&[8, 11]);
        let (x, y) = (0.4, 0.55);
        let h = u.grid.h();
        for r in [2.0 * h, 3.0 * h, 4.0 * h] {
            let j = fit_jet(&u, node, r).unwrap();
            assert_relative_eq!(j.p[0], 0.5 + 3.0 * x - 0.7 * y, epsilon = 1e-10);
            assert_relative_eq!(j.p[1], -1.0 - 0.7 * x + 0.5 * y, epsilon = 1e-10);
            assert_relative_eq!(j.x()[(0, 0)], 3.0, epsilon = 1e-8);
            assert_relative_eq!(j.x()[(0, 1)], -0.7, epsilon = 1e-8);
            assert_relative_eq!(j.x()[(1, 1)], 0.5, epsilon = 1e-8);
        }
        // a single row of nodes cannot determine a 2D quadratic
        assert!(matches!(
            fit_jet(&u, node, 0.5 * h),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn probe_generation_examples() {
        let zero = line(100, |_| 0.0);
        let k = SingularSet::Origin;
        let opts = ProbeOptions::for_function(&zero);
        let set = generate_probes(&zero, 50, &k, &opts).unwrap();
        let bases: Vec<&Probe> = set
            .jets
            .iter()
            .filter(|p| p.kind == ProbeKind::Base)
            .collect();
        assert_eq!(bases.len(), 3);
        assert!(bases.iter().all(|p| p.jet.p == vec![0.0] && p.k_excluded));

        let s =
            SampledFunction::from_fn(Grid::cube(1, 0.0, 1.0, 400).unwrap(), |x| (PI * x[0]).sin())
                .unwrap();
        let opts = ProbeOptions::for_function(&s);
        let mid = generate_probes(&s, 200, &k, &opts).unwrap();
        let base = mid.jets.iter().find(|p| p.kind == ProbeKind::Base).unwrap();
        assert!(base.jet.p[0].abs() < 1e-9 && base.k_excluded);
        let quarter = generate_probes(&s, 100, &k, &opts).unwrap();
        let base = quarter
            .jets
            .iter()
            .find(|p| p.kind == ProbeKind::Base)
            .unwrap();
        assert_relative_eq!(base.jet.p[0], PI / 2f64.sqrt(), max_relative = 1e-3);
        assert!(!base.k_excluded);
    }

    #[test]
    fn feeble_examples_2d() {
        let h2 = Hamiltonian::p_dirichlet(2.0, 2).unwrap();
        let opts = |u: &SampledFunction| VerifyOptions::for_function(u, 1e-6);

        let affine = square(32, |x, y| 0.3 * x - 0.8 * y + 0.1);
        let rep = verify_region(&affine, &h2, &opts(&affine)).unwrap();
        assert_eq!(rep.fail, 0);
        assert_eq!(rep.pass, rep.nodes);

        let saddle = square(32, |x, y| x * x - y * y);
        let rep = verify_region(&saddle, &h2, &opts(&saddle)).unwrap();
        assert_eq!(rep.fail, 0, "{:?}", rep.witnesses.first());

        let bowl = square(32, |x, y| (x - 0.5).powi(2) + (y - 0.5).powi(2));
        let o = opts(&bowl);
        let node = bowl.grid.index(&[24, 10]);
        let probes = generate_probes(&bowl, node, &SingularSet::Origin, &o.probes).unwrap();
        let v = feeble_check(&bowl, &h2, &probes, o.probes.curvature_scale, o.tol).unwrap();
        assert!(matches!(v.sub, Verdict::Pass { .. }));
        let Verdict::Fail { witness, .. } = &v.sup else {
            panic!("{v:?}")
        };
        // G(p, X) = 2 tr X with X ≈ 2I
        assert_relative_eq!(witness.g(&h2).unwrap(), 8.0, max_relative = 0.5);
        assert!(verify_region(&bowl, &h2, &o).unwrap().fail > 0);
    }

    #[test]
    fn cone_kinks() {
        let h = Hamiltonian::p_dirichlet(2.0, 1).unwrap();
        for (sign, bad_side) in [(1.0, Side::Lower), (-1.0, Side::Upper)] {
            let u = line(400, |x| sign * x.abs());
            let rep = verify_region(&u, &h, &VerifyOptions::for_function(&u, 1e-6)).unwrap();
            assert_eq!(rep.fail, 1, "{rep:?}");
            let w = &rep.witnesses[0];
            assert_eq!(w.node, 200);
            let (bad, good) = match bad_side {
                Side::Lower => (&w.sup, &w.sub),
                Side::Upper => (&w.sub, &w.sup),
            };
            assert!(bad.is_fail());
            assert!(!good.is_fail());
            let Verdict::Fail { witness, .. } = bad else {
                unreachable!()
            };
            assert!(witness.p[0].abs() < 1.0 && witness.p[0] != 0.0);
        }
    }

    #[test]
    fn constants_are_vacuous() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let u = square(16, |_, _| 3.0);
        let rep = verify_region(&u, &h, &VerifyOptions::for_function(&u, 1e-6)).unwrap();
        assert_eq!(rep.vacuous, rep.nodes);
        assert!(rep.nodes > 0);
    }

    #[test]
    fn smooth_calculus_consistency() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let u = square(48, |x, y| (x + 0.3).powi(3) + x * y - 0.5 * y * y);
        let opts = ProbeOptions::for_function(&u);
        for node in u.grid.inner_nodes(0.1).into_iter().step_by(37) {
            let x = u.grid.coord(node);
            let (a, b) = (x[0] + 0.3, x[1]);
            let du = [3.0 * a * a + b, x[0] - b];
            let d2u = DMatrix::from_row_slice(2, 2, &[6.0 * a, 1.0, 1.0, -1.0]);
            if norm(&du) <= opts.kappa {
                continue;
            }
            let exact = h.operator(&du, &d2u).unwrap();
            let base = fit_jet(&u, node, opts.fit_radii[0]).unwrap();
            let g = base.g(&h).unwrap();
            assert!(
                (g - exact).abs() < 1e-2 * (1.0 + exact.abs()),
                "{g} vs {exact}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn doubling_preserves_verdicts(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, k in 100.0..150.0f64) {
            // gradients above 2000h keep κ above its 2h floor for both u and 2u
            let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
            let f = move |x: f64, y: f64| k * (x + 0.5 * y) + a * x * x + b * x * y + c * y * y + (3.0 * x).sin();
            let u = square(24, f);
            let u2 = u.map(|v| 2.0 * v);
            let r1 = verify_region(&u, &h, &VerifyOptions::for_function(&u, 1e-3)).unwrap();
            let r2 = verify_region(&u2, &h, &VerifyOptions::for_function(&u2, 1e-3)).unwrap();
            prop_assert_eq!((r1.pass, r1.fail, r1.vacuous), (r2.pass, r2.fail, r2.vacuous));
            let (m1, m2) = (r1.sub.worst_margin.unwrap(), r2.sub.worst_margin.unwrap());
            prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1.abs()), "{} vs {} {:?} {:?}", m1, m2, r1.sub, r2.sub);
        }
    }
}
