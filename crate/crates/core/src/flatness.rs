//! The chain ω → ρ → Φ → T → Θ that produces a flat convolution kernel from
//! an integrand.
//!
//! `T` is the nontrivial solution of `T' = Φ(T)`, `T(0) = 0`, obtained as the
//! inverse of `G(τ) = ∫_0^τ ds/Φ(s)`. Stepping the ODE forward from zero
//! would only ever find `T ≡ 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{Hamiltonian, SingularSet};
use crate::monotone::{log_spaced, Direction, MonotoneMap};
use crate::quadrature::{integrate_from_zero, log_slope, ImproperOptions};

/// Knot layout shared by every table of one pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub t_min: f64,
    pub knots: usize,
    /// Upper end of the Φ table when `R = ∞`.
    pub phi_t_max: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            t_min: 1e-10,
            knots: 512,
            phi_t_max: 1e3,
        }
    }
}

impl TableSpec {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0) || self.knots < 8 || !(self.phi_t_max > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bad table layout {self:?}"
            )));
        }
        Ok(())
    }
}

/// `ω(t) = √t + ∫_0^t sup_{s<|a|<1} ΔF(a) ds` on `[t_min, 1]`.
pub fn build_omega(h: &Hamiltonian, layout: &TableSpec) -> Result<MonotoneMap> {
    layout.validate()?;
    if h.singular_set() != SingularSet::Origin {
        return Err(Error::InvalidParameter(
            "the modulus ω needs the singular set {0}".into(),
        ));
    }
    let sup_lap = |s: f64| -> f64 {
        if s < 1.0 {
            h.annulus_sup_laplacian(s, Some(1.0))
                .unwrap_or(f64::INFINITY)
        } else {
            h.laplacian_radial(s)
        }
    };
    integrate_from_zero(sup_lap, 1.0, ImproperOptions::default()).map_err(|e| {
        Error::DivergentIntegral(format!("s ↦ sup_(s<|a|<1) ΔF is not integrable at 0: {e}"))
    })?;
    let knots = log_spaced(layout.t_min, 1.0, layout.knots);
    let s_map = MonotoneMap::from_fn(knots.clone(), sup_lap)?;
    let integral = s_map.cumulative(1.0)?;
    let values: Vec<f64> = knots
        .iter()
        .zip(integral.values())
        .map(|(t, i)| t.sqrt() + i)
        .collect();
    let slopes: Vec<f64> = knots
        .iter()
        .zip(&values)
        .zip(s_map.values())
        .map(|((t, w), s)| t * (0.5 / t.sqrt() + s) / w)
        .collect();
    let omega = MonotoneMap::new(knots, values, slopes)?;
    let check = |t: f64| omega.eval(t) / t;
    integrate_from_zero(check, 1.0, ImproperOptions::default())
        .map_err(|e| Error::DivergentIntegral(format!("ω(t)/t is not integrable at 0: {e}")))?;
    Ok(omega)
}

/// `ρ(t) = C ω(t)/t` for `t < 1`, `(C/2) ω(1) (e^{1-t} + 1)` beyond.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rho {
    pub omega: MonotoneMap,
    pub c: f64,
}

impl Rho {
    pub fn new(omega: MonotoneMap, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ρ constant C = {c} must be positive"
            )));
        }
        Ok(Self { omega, c })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            f64::INFINITY
        } else if t < 1.0 {
            self.c * self.omega.eval(t) / t
        } else {
            0.5 * self.c * self.omega.eval(1.0) * ((1.0 - t).exp() + 1.0)
        }
    }

    pub fn at_infinity(&self) -> f64 {
        0.5 * self.c * self.omega.eval(1.0)
    }

    pub fn tabulate(&self, knots: Vec<f64>) -> Result<MonotoneMap> {
        MonotoneMap::from_fn(knots, |t| self.eval(t))
    }
}

pub fn build_rho(omega: MonotoneMap, c: f64) -> Result<Rho> {
    Rho::new(omega, c)
}

/// Which reciprocal envelope to tabulate as Φ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiVariant {
    /// `Φ^R(t) = inf_{t<|a|<R} 1/(ρ(|a|) + ΔF(a))`.
    #[default]
    Corrected,
    /// `Φ(t) = inf_{|a|>t} 1/ΔF(a)`, without the ρ term.
    Uncorrected,
}

/// Φ^R tabulated on `[t_min, R]` (or `[t_min, phi_t_max]` for `R = ∞`).
pub fn build_phi(
    h: &Hamiltonian,
    rho: &Rho,
    upper: Option<f64>,
    layout: &TableSpec,
) -> Result<MonotoneMap> {
    phi_from_envelope(h, Some(rho), upper, layout)
}

pub fn build_phi_uncorrected(
    h: &Hamiltonian,
    upper: Option<f64>,
    layout: &TableSpec,
) -> Result<MonotoneMap> {
    phi_from_envelope(h, None, upper, layout)
}

fn phi_from_envelope(
    h: &Hamiltonian,
    rho: Option<&Rho>,
    upper: Option<f64>,
    layout: &TableSpec,
) -> Result<MonotoneMap> {
    layout.validate()?;
    if let Some(r) = upper {
        if !(r > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "annulus radius R = {r} must exceed 1"
            )));
        }
    } else if !h.model().laplacian_bounded_at_infinity() {
        return Err(Error::UnboundedAtInfinity(format!(
            "R = ∞ requested for {:?}",
            h.model()
        )));
    }
    let g = |r: f64| rho.map_or(0.0, |rho| rho.eval(r)) + h.laplacian_radial(r);
    let top = upper.unwrap_or(layout.phi_t_max);
    let knots = log_spaced(layout.t_min, top, layout.knots);

    let phi = if h.laplacian_is_non_increasing() {
        // g is non-increasing, so its supremum over (t, R) is g(t⁺).
        MonotoneMap::from_fn_with_slope(knots, |t| 1.0 / g(t), |t| -log_slope(g, t))?
    } else {
        let far = upper.unwrap_or(1e8);
        let mut radii = log_spaced(layout.t_min, far, layout.knots * 16);
        radii.extend_from_slice(&knots);
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii.dedup();
        let vals: Vec<f64> = radii.iter().map(|&r| g(r)).collect();
        let mut suffix = vals.clone();
        for i in (0..suffix.len() - 1).rev() {
            suffix[i] = suffix[i].max(suffix[i + 1]);
        }
        let values: Vec<f64> = knots
            .iter()
            .map(|&t| 1.0 / suffix[radii.partition_point(|&r| r < t)])
            .collect();
        let slopes = table_log_slopes(&knots, &values);
        MonotoneMap::new(knots, values, slopes)?
    };
    if phi.direction() != Direction::Increasing {
        return Err(Error::NotMonotone(format!(
            "Φ table is {:?}, expected increasing",
            phi.direction()
        )));
    }
    let recip = |t: f64| 1.0 / phi.eval(t);
    integrate_from_zero(recip, 1.0, ImproperOptions::default())
        .map_err(|e| Error::OsgoodFails(format!("∫_0^1 dt/Φ(t) does not converge: {e}")))?;
    Ok(phi)
}

/// Centered log-log differences of a table, one-sided at the ends.
fn table_log_slopes(knots: &[f64], values: &[f64]) -> Vec<f64> {
    let n = knots.len();
    let d =
        |i: usize, j: usize| (values[j].ln() - values[i].ln()) / (knots[j].ln() - knots[i].ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                d(0, 1)
            } else if i == n - 1 {
                d(n - 2, n - 1)
            } else {
                d(i - 1, i + 1)
            }
        })
        .collect()
}

/// `T = G^{-1}` on `[t_min, d]` together with `T' = Φ∘T`.
pub fn build_t(
    phi: &MonotoneMap,
    d: f64,
    layout: &TableSpec,
) -> Result<(MonotoneMap, MonotoneMap)> {
    layout.validate()?;
    if !(d > layout.t_min) {
        return Err(Error::InvalidParameter(format!(
            "diameter {d} must exceed t_min {}",
            layout.t_min
        )));
    }
    if phi.direction() != Direction::Increasing {
        return Err(Error::NotMonotone("Φ must be increasing".into()));
    }
    let g = phi.cumulative(-1.0).map_err(|e| match e {
        Error::DivergentIntegral(msg) => {
            Error::OsgoodFails(format!("G(τ) = ∫_0^τ ds/Φ(s) diverges: {msg}"))
        }
        other => other,
    })?;
    let t_at_d = g.invert(d)?;
    if t_at_d > phi.domain().1 {
        return Err(Error::OutOfRange {
            value: t_at_d,
            lo: phi.domain().0,
            hi: phi.domain().1,
        });
    }
    let knots = log_spaced(layout.t_min, d, layout.knots);
    let tv = knots
        .iter()
        .map(|&t| g.invert(t))
        .collect::<Result<Vec<f64>>>()?;
    let phi_t: Vec<f64> = tv.iter().map(|&x| phi.eval(x)).collect();
    let t_slopes: Vec<f64> = knots
        .iter()
        .zip(&tv)
        .zip(&phi_t)
        .map(|((t, x), f)| t * f / x)
        .collect();
    let t_map = MonotoneMap::new(knots.clone(), tv.clone(), t_slopes)?;
    let tp_slopes: Vec<f64> = tv
        .iter()
        .zip(t_map.log_slopes())
        .map(|(&x, m)| phi.log_slope_at(x) * m)
        .collect();
    let tprime = MonotoneMap::new(knots, phi_t, tp_slopes)?;
    Ok((t_map, tprime))
}

/// `Θ(s) = 2∫_0^{√s} T` and `Θ'(s) = T(√s)/√s` on the knots `s = t²`.
pub fn build_theta(t_map: &MonotoneMap) -> Result<(MonotoneMap, MonotoneMap)> {
    let integral = t_map.cumulative(1.0)?;
    let s_knots: Vec<f64> = t_map.knots().iter().map(|t| t * t).collect();
    let theta_vals: Vec<f64> = integral.values().iter().map(|i| 2.0 * i).collect();
    let theta_slopes: Vec<f64> = t_map
        .knots()
        .iter()
        .zip(t_map.values())
        .zip(integral.values())
        .map(|((t, x), i)| 0.5 * t * x / i)
        .collect();
    let theta = MonotoneMap::new(s_knots.clone(), theta_vals, theta_slopes)?;
    let tp_vals: Vec<f64> = t_map
        .knots()
        .iter()
        .zip(t_map.values())
        .map(|(t, x)| x / t)
        .collect();
    let tp_slopes: Vec<f64> = t_map.log_slopes().iter().map(|m| 0.5 * (m - 1.0)).collect();
    let thetaprime = MonotoneMap::new(s_knots, tp_vals, tp_slopes)?;
    Ok((theta, thetaprime))
}

/// Parameters for building a kernel from an integrand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub diam: f64,
    /// Annulus radius `R`; `None` means `R = ∞`.
    #[serde(default)]
    pub upper_radius: Option<f64>,
    /// Constant in ρ; defaults to the integrand's dimensional constant.
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub table: TableSpec,
    #[serde(default)]
    pub variant: PhiVariant,
}

impl KernelParams {
    pub fn new(diam: f64) -> Self {
        Self {
            diam,
            upper_radius: None,
            c: None,
            table: TableSpec::default(),
            variant: PhiVariant::Corrected,
        }
    }
}

/// Everything the pipeline produced, for dumping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlatnessTables {
    pub omega: Option<MonotoneMap>,
    pub rho: Option<MonotoneMap>,
    pub kernel: FlatKernel,
}

/// The maps `(Φ, T, T', Θ, Θ')` of one flat convolution family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatKernel {
    /// `None` for the classical kernel `Θ(t) = t`.
    pub phi: Option<MonotoneMap>,
    #[serde(rename = "T")]
    pub t: MonotoneMap,
    #[serde(rename = "Tprime")]
    pub tprime: MonotoneMap,
    pub theta: MonotoneMap,
    pub thetaprime: MonotoneMap,
    pub diam: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityReport {
    /// Worst relative error of `Θ'(t²) t = T(t)`.
    pub max_rel_theta_prime: f64,
    /// Worst relative error of `2Θ''(t²)t² + Θ'(t²) = T'(t)`.
    pub max_rel_second_order: f64,
    pub tprime_positive_non_decreasing: bool,
    pub points: usize,
}

/// Values of `Θ`, `Θ'`, `Θ''/s` and `sΘ''` at a small and a large argument.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThetaLimits {
    pub s_small: f64,
    pub s_large: f64,
    pub theta: (f64, f64),
    pub thetaprime: (f64, f64),
    pub theta2_over_s: (f64, f64),
    pub s_theta2: (f64, f64),
}

impl ThetaLimits {
    fn ratio(p: (f64, f64)) -> f64 {
        p.0 / p.1
    }
    pub fn theta_ratio(&self) -> f64 {
        Self::ratio(self.theta)
    }
    pub fn thetaprime_ratio(&self) -> f64 {
        Self::ratio(self.thetaprime)
    }
    pub fn theta2_over_s_ratio(&self) -> f64 {
        Self::ratio(self.theta2_over_s)
    }
    pub fn s_theta2_ratio(&self) -> f64 {
        Self::ratio(self.s_theta2)
    }
}

impl FlatKernel {
    /// Runs the whole chain for `h`.
    pub fn build(h: &Hamiltonian, params: &KernelParams) -> Result<Self> {
        Ok(Self::build_with_tables(h, params)?.kernel)
    }

    pub fn build_with_tables(h: &Hamiltonian, params: &KernelParams) -> Result<FlatnessTables> {
        let layout = &params.table;
        let (omega, rho_table, phi) = match params.variant {
            PhiVariant::Corrected => {
                let omega = build_omega(h, layout)?;
                let rho = build_rho(omega.clone(), params.c.unwrap_or(h.dim_constant()))?;
                let top = params.upper_radius.unwrap_or(layout.phi_t_max);
                let rho_table = rho.tabulate(log_spaced(layout.t_min, top, layout.knots))?;
                let phi = build_phi(h, &rho, params.upper_radius, layout)?;
                (Some(omega), Some(rho_table), phi)
            }
            PhiVariant::Uncorrected => (
                None,
                None,
                build_phi_uncorrected(h, params.upper_radius, layout)?,
            ),
        };
        let kernel = Self::from_phi(phi, params.diam, layout)?;
        Ok(FlatnessTables {
            omega,
            rho: rho_table,
            kernel,
        })
    }

    /// Steps from a given Φ onward.
    pub fn from_phi(phi: MonotoneMap, diam: f64, layout: &TableSpec) -> Result<Self> {
        let (t, tprime) = build_t(&phi, diam, layout)?;
        let (theta, thetaprime) = build_theta(&t)?;
        Ok(Self {
            phi: Some(phi),
            t,
            tprime,
            theta,
            thetaprime,
            diam,
        })
    }

    /// `Θ(t) = T(t) = t`, `T' ≡ 1`. Not flat.
    pub fn classical(diam: f64, layout: &TableSpec) -> Result<Self> {
        if !(diam > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diameter {diam} must be positive"
            )));
        }
        let t_min = layout.t_min.min(diam / 2.0);
        let knots = log_spaced(t_min, diam, layout.knots);
        let s_knots = log_spaced(t_min * t_min, diam * diam, layout.knots);
        Ok(Self {
            phi: None,
            t: MonotoneMap::power(knots.clone(), 1.0, 1.0)?,
            tprime: MonotoneMap::power(knots, 1.0, 0.0)?,
            theta: MonotoneMap::power(s_knots.clone(), 1.0, 1.0)?,
            thetaprime: MonotoneMap::power(s_knots, 1.0, 0.0)?,
            diam,
        })
    }

    pub fn is_flat(&self) -> bool {
        self.phi.is_some()
    }

    pub fn theta(&self, s: f64) -> f64 {
        self.theta.eval(s)
    }

    pub fn theta_inverse(&self, y: f64) -> Result<f64> {
        if y == 0.0 {
            return Ok(0.0);
        }
        self.theta.invert(y)
    }

    /// `Θ(|x-y|²)/(2ε)`.
    pub fn penalty(&self, dist_sq: f64, eps: f64) -> f64 {
        self.theta.eval(dist_sq) / (2.0 * eps)
    }

    pub fn t_inverse(&self, y: f64) -> Result<f64> {
        if y == 0.0 {
            return Ok(0.0);
        }
        self.t.invert(y)
    }

    /// `sup_{0<t<d} T'(t) = T'(d)`, the semiconvexity constant times ε.
    pub fn semiconvexity_constant(&self) -> f64 {
        self.tprime.eval(self.diam)
    }

    pub fn phi(&self, t: f64) -> Result<f64> {
        self.phi
            .as_ref()
            .map(|p| p.eval(t))
            .ok_or(Error::NonFlatKernel)
    }

    /// Points used by the identity checks: geometric midpoints of a
    /// log-spaced partition of the `T` table's domain.
    pub fn identity_points(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.t.domain();
        let (a, b) = (lo.ln(), hi.ln());
        (0..n)
            .map(|i| (a + (b - a) * (i as f64 + 0.5) / n as f64).exp())
            .collect()
    }

    /// Second derivative of `Θ` by central differences of the `Θ'` table.
    pub fn theta_second(&self, s: f64) -> f64 {
        let step = 1e-4 * s;
        (self.thetaprime.eval(s + step) - self.thetaprime.eval(s - step)) / (2.0 * step)
    }

    pub fn check_identities(&self, n: usize) -> IdentityReport {
        let mut worst_first = 0.0f64;
        let mut worst_second = 0.0f64;
        for t in self.identity_points(n) {
            let s = t * t;
            let tt = self.t.eval(t);
            let first = self.thetaprime.eval(s) * t;
            worst_first = worst_first.max((first - tt).abs() / tt);
            let lhs = 2.0 * self.theta_second(s) * s + self.thetaprime.eval(s);
            let rhs = self.tprime.eval(t);
            worst_second = worst_second.max((lhs - rhs).abs() / rhs);
        }
        let tp = self.tprime.values();
        let tprime_ok = tp.iter().all(|v| *v > 0.0) && tp.windows(2).all(|w| w[1] >= w[0]);
        IdentityReport {
            max_rel_theta_prime: worst_first,
            max_rel_second_order: worst_second,
            tprime_positive_non_decreasing: tprime_ok,
            points: n,
        }
    }

    pub fn theta_limits(&self, s_small: f64, s_large: f64) -> ThetaLimits {
        let at = |s: f64| {
            let d2 = self.thetaprime.derivative(s);
            (self.theta.eval(s), self.thetaprime.eval(s), d2 / s, s * d2)
        };
        let (a, b) = (at(s_small), at(s_large));
        ThetaLimits {
            s_small,
            s_large,
            theta: (a.0, b.0),
            thetaprime: (a.1, b.1),
            theta2_over_s: (a.2, b.2),
            s_theta2: (a.3, b.3),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::Model;
    use approx::assert_relative_eq;

    fn layout() -> TableSpec {
        TableSpec::default()
    }

    fn closed_form_phi(f: impl Fn(f64) -> f64, k: f64) -> MonotoneMap {
        MonotoneMap::from_fn_with_slope(log_spaced(1e-12, 10.0, 400), f, |_| k).unwrap()
    }

    #[test]
    fn omega_quadratic_closed_form() {
        let h = Hamiltonian::p_dirichlet(2.0, 2).unwrap();
        let w = build_omega(&h, &layout()).unwrap();
        for t in [1e-9f64, 1e-5, 0.01, 0.3, 1.0] {
            let exact = t.sqrt() + 4.0 * t;
            assert!(
                (w.eval(t) - exact).abs() <= 1e-9 * exact,
                "{t}: {}",
                w.eval(t)
            );
        }
    }

    #[test]
    fn omega_p15_closed_form() {
        // ΔF = 2.25 s^{-1/2}, so ω = √t + 4.5√t
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let w = build_omega(&h, &layout()).unwrap();
        for t in [1e-9f64, 1e-4, 0.25, 1.0] {
            assert_relative_eq!(w.eval(t), 5.5 * t.sqrt(), max_relative = 1e-9);
        }
    }

    #[test]
    fn omega_shape() {
        for p in [1.2, 1.5, 1.8, 2.0] {
            let h = Hamiltonian::p_dirichlet(p, 2).unwrap();
            let w = build_omega(&h, &layout()).unwrap();
            let ks = w.knots();
            let v = w.values();
            assert!(v.windows(2).all(|x| x[1] > x[0]));
            assert!(ks
                .windows(2)
                .zip(v.windows(2))
                .all(|(k, x)| x[1] / k[1] < x[0] / k[0]));
            for i in 1..ks.len() - 1 {
                let mid = (ks[i - 1] * ks[i + 1]).sqrt();
                // concavity along geometric triples: chord below the graph
                let lam = (ks[i + 1] - mid) / (ks[i + 1] - ks[i - 1]);
                let chord = lam * w.eval(ks[i - 1]) + (1.0 - lam) * w.eval(ks[i + 1]);
                assert!(w.eval(mid) >= chord * (1.0 - 1e-12), "p={p} at {mid}");
            }
            // ω(t) ~ t^{min(1/2, p-1)}: the 2e-6 bound at 1e-12 needs p >= 2
            let decay = w.eval(1e-12) / w.eval(1e-6);
            assert!(
                decay <= 1e-6f64.powf(0.5f64.min(p - 1.0)) * 1.01,
                "p={p}: {decay}"
            );
        }
        let h2 = Hamiltonian::p_dirichlet(2.0, 2).unwrap();
        assert!(build_omega(&h2, &layout()).unwrap().eval(1e-12) <= 2e-6);
    }

    #[test]
    fn omega_rejects_sphere_singular_set() {
        let h = Hamiltonian::new(Model::Congestion { p: 1.5 }, 2).unwrap();
        assert!(build_omega(&h, &layout()).is_err());
    }

    #[test]
    fn rho_properties() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let rho = build_rho(build_omega(&h, &layout()).unwrap(), 1.0).unwrap();
        assert_relative_eq!(rho.eval(0.25), 11.0, max_relative = 1e-9);
        let below = rho.eval(1.0 - 1e-12);
        assert_relative_eq!(below, rho.eval(1.0), max_relative = 1e-9);
        assert_relative_eq!(
            rho.eval(1.0),
            rho.c * rho.omega.eval(1.0),
            max_relative = 1e-15
        );
        let ts = log_spaced(1e-8, 30.0, 300);
        let vals: Vec<f64> = ts.iter().map(|&t| rho.eval(t)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(rho.eval(1e-10) > 1e5);
        assert!((rho.eval(1e3) - rho.at_infinity()).abs() < 1e-12);
        assert!(build_rho(rho.omega.clone(), 0.0).is_err());
    }

    #[test]
    fn phi_quadratic_closed_form() {
        let h = Hamiltonian::p_dirichlet(2.0, 2).unwrap();
        let rho = build_rho(build_omega(&h, &layout()).unwrap(), 1.0).unwrap();
        let phi = build_phi(&h, &rho, None, &layout()).unwrap();
        for t in [1e-8, 1e-3, 0.5, 2.0, 40.0] {
            // brute-force annulus scan
            let scan = log_spaced(t * (1.0 + 1e-12), 1e6, 4000)
                .into_iter()
                .map(|r| 1.0 / (rho.eval(r) + h.laplacian_radial(r)))
                .fold(f64::INFINITY, f64::min);
            let exact = 1.0 / (rho.eval(t) + 4.0);
            assert_relative_eq!(phi.eval(t), exact, max_relative = 1e-6);
            assert_relative_eq!(scan, exact, max_relative = 1e-6);
        }
        assert!(phi.eval(1e-9) <= 1e-4);
    }

    #[test]
    fn phi_osgood_integral_stable_under_refinement() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let integral = |knots: usize| {
            let s = TableSpec { knots, ..layout() };
            let rho = build_rho(build_omega(&h, &s).unwrap(), 2.0).unwrap();
            let phi = build_phi(&h, &rho, None, &s).unwrap();
            phi.cumulative(-1.0).unwrap().eval(1.0)
        };
        let (a, b) = (integral(128), integral(512));
        assert!((a - b).abs() <= 1e-4 * b, "{a} vs {b}");
    }

    #[test]
    fn phi_rejections() {
        let h3 = Hamiltonian::p_dirichlet(3.0, 2).unwrap();
        let rho = build_rho(
            MonotoneMap::power(log_spaced(1e-10, 1.0, 20), 1.0, 0.5).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            build_phi(&h3, &rho, None, &layout()),
            Err(Error::UnboundedAtInfinity(_))
        ));
        assert!(build_phi(&h3, &rho, Some(0.5), &layout()).is_err());
        // finite R takes the sampled path for increasing ΔF
        let phi = build_phi(&h3, &rho, Some(4.0), &layout()).unwrap();
        assert_eq!(phi.direction(), Direction::Increasing);
    }

    #[test]
    fn t_from_sqrt_phi() {
        let phi = closed_form_phi(|t| t.sqrt(), 0.5);
        let (t, tp) = build_t(&phi, 1.0, &layout()).unwrap();
        for x in [1e-9f64, 1e-4, 0.1, 0.7, 1.0] {
            assert_relative_eq!(t.eval(x), x * x / 4.0, max_relative = 1e-7);
            assert_relative_eq!(tp.eval(x), x / 2.0, max_relative = 1e-7);
        }
    }

    #[test]
    fn t_from_power_phi() {
        for p in [1.2, 1.5, 1.8] {
            let c = 0.7;
            let phi = closed_form_phi(|t| c * t.powf(2.0 - p), 2.0 - p);
            let (t, _) = build_t(&phi, 1.0, &layout()).unwrap();
            for x in [1e-6f64, 0.01, 0.5] {
                let exact = (c * (p - 1.0) * x).powf(1.0 / (p - 1.0));
                assert_relative_eq!(t.eval(x), exact, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn osgood_gate() {
        let linear = closed_form_phi(|t| t, 1.0);
        assert!(matches!(
            build_t(&linear, 1.0, &layout()),
            Err(Error::OsgoodFails(_))
        ));
        let knots = log_spaced(1e-10, 0.3, 512);
        let tlog = MonotoneMap::from_fn(knots, |t| t * t.ln().abs()).unwrap();
        assert!(matches!(
            build_t(&tlog, 0.3, &layout()),
            Err(Error::OsgoodFails(_))
        ));
        // t^{0.9} is still Osgood-integrable
        let ok = closed_form_phi(|t| t.powf(0.9), 0.9);
        assert!(build_t(&ok, 1.0, &layout()).is_ok());
    }

    #[test]
    fn ode_residual_at_interior_knots() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let k = FlatKernel::build(&h, &KernelParams::new(1.0)).unwrap();
        let phi = k.phi.as_ref().unwrap();
        let knots = k.t.knots();
        for &x in &knots[1..knots.len() - 1] {
            let step = 1e-6 * x;
            let slope = (k.t.eval(x + step) - k.t.eval(x - step)) / (2.0 * step);
            let target = phi.eval(k.t.eval(x));
            assert!(
                (slope - target).abs() <= 1e-4 * target,
                "{x}: {slope} vs {target}"
            );
        }
    }

    #[test]
    fn theta_from_quadratic_t() {
        let phi = closed_form_phi(|t| t.sqrt(), 0.5);
        let k = FlatKernel::from_phi(phi, 1.0, &layout()).unwrap();
        for s in [1e-12f64, 1e-6, 0.04, 0.5, 1.0] {
            assert_relative_eq!(k.theta(s), s.powf(1.5) / 6.0, max_relative = 1e-7);
        }
        assert!(k.theta(1e-12) <= 1e-9);
        let r = k.check_identities(100);
        assert!(
            r.max_rel_theta_prime <= 1e-6 && r.max_rel_second_order <= 1e-5,
            "{r:?}"
        );
    }

    #[test]
    fn theta_power_exponent() {
        for p in [1.2, 1.5, 1.8] {
            let phi = closed_form_phi(|t| t.powf(2.0 - p), 2.0 - p);
            let k = FlatKernel::from_phi(phi, 1.0, &layout()).unwrap();
            let expected = p / (2.0 * (p - 1.0));
            for s in [1e-10, 1e-4, 0.3] {
                assert_relative_eq!(k.theta.log_slope_at(s), expected, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn pipeline_closure_and_identities() {
        for p in [1.2, 1.5, 1.8] {
            let h = Hamiltonian::p_dirichlet(p, 2).unwrap();
            let k = FlatKernel::build(&h, &KernelParams::new(1.0)).unwrap();
            let r = k.check_identities(100);
            assert!(r.max_rel_theta_prime <= 1e-6, "p={p}: {r:?}");
            assert!(r.max_rel_second_order <= 1e-5, "p={p}: {r:?}");
            assert!(r.tprime_positive_non_decreasing);
            let lim = k.theta_limits(1e-8, 1e-2);
            assert!(lim.theta_ratio() < 1e-4);
            assert!(lim.s_theta2_ratio() < 1e-2);
            assert!(k.thetaprime.eval(1e-16) < 1e-6);
        }
    }

    #[test]
    fn classical_kernel_values() {
        let k = FlatKernel::classical(2.0, &layout()).unwrap();
        assert!(!k.is_flat());
        assert_relative_eq!(k.t.eval(0.3), 0.3, max_relative = 1e-14);
        assert_relative_eq!(k.theta_inverse(0.7).unwrap(), 0.7, max_relative = 1e-12);
        assert_eq!(k.tprime.eval(0.5), 1.0);
        let r = k.check_identities(100);
        assert!(
            r.max_rel_theta_prime < 1e-12 && r.max_rel_second_order < 1e-7,
            "{r:?}"
        );
        assert!(matches!(k.phi(0.1), Err(Error::NonFlatKernel)));
    }

    #[test]
    fn json_round_trip_bit_stable() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let k = FlatKernel::build(&h, &KernelParams::new(1.0)).unwrap();
        let s = k.to_json().unwrap();
        let back = FlatKernel::from_json(&s).unwrap();
        assert_eq!(k, back);
        assert_eq!(s, back.to_json().unwrap());
        let again = FlatKernel::build(&h, &KernelParams::new(1.0))
            .unwrap()
            .to_json()
            .unwrap();
        assert_eq!(s, again);
    }
}
