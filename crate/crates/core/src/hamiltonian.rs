//! Convex radial integrands `F(a) = f(|a|)` with their derivatives and
//! singular sets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monotone::log_spaced;

/// Closed set on which `F` fails to be twice differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SingularSet {
    Empty,
    Origin,
    Sphere { radius: f64 },
}

impl SingularSet {
    pub fn distance(&self, a: &[f64]) -> f64 {
        let r = norm(a);
        match *self {
            SingularSet::Empty => f64::INFINITY,
            SingularSet::Origin => r,
            SingularSet::Sphere { radius } => (r - radius).abs(),
        }
    }

    /// Radius of the set in the radial variable, if any.
    pub fn radius(&self) -> Option<f64> {
        match *self {
            SingularSet::Empty => None,
            SingularSet::Origin => Some(0.0),
            SingularSet::Sphere { radius } => Some(radius),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub coef: f64,
    pub exp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Model {
    /// `|a|^p`
    PDirichlet { p: f64 },
    /// `max(|a| - 1, 0)^p`
    Congestion { p: f64 },
    /// `|a|^2`
    Quadratic,
    /// `Σ coef |a|^exp`
    CustomRadial { terms: Vec<PowerTerm> },
    /// `ζ(|a|/δ) F(a)` with a quintic smoothstep cutoff on `[δ/2, δ]`.
    Mollified { base: Box<Model>, delta: f64 },
}

/// Quintic smoothstep on `[1/2, 1]`: value, first and second derivative in `s`.
fn cutoff(s: f64) -> (f64, f64, f64) {
    if s <= 0.5 {
        (0.0, 0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let x = 2.0 * s - 1.0;
        let x2 = x * x;
        let v = x2 * x * (10.0 - 15.0 * x + 6.0 * x2);
        let d = 30.0 * x2 * (1.0 - x) * (1.0 - x);
        let dd = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
        (v, 2.0 * d, 4.0 * dd)
    }
}

impl Model {
    fn validate(&self) -> Result<()> {
        match self {
            Model::PDirichlet { p } | Model::Congestion { p } if !(*p > 1.0 && p.is_finite()) => {
                Err(Error::InvalidParameter(format!(
                    "exponent p = {p} must exceed 1"
                )))
            }
            Model::CustomRadial { terms } => {
                if terms.is_empty() {
                    return Err(Error::InvalidParameter(
                        "custom radial profile needs at least one term".into(),
                    ));
                }
                for t in terms {
                    if !(t.coef > 0.0 && t.exp >= 1.0 && t.exp.is_finite()) {
                        return Err(Error::InvalidParameter(format!(
                            "term {t:?}: need coef > 0 and exp >= 1 for a convex profile"
                        )));
                    }
                }
                Ok(())
            }
            Model::Mollified { base, delta } => {
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "mollification delta {delta} outside (0,1)"
                    )));
                }
                base.validate()
            }
            _ => Ok(()),
        }
    }

    /// `(f, f', f'')` of the radial profile at `r >= 0`. Undefined second
    /// derivatives come back as `+∞`.
    pub fn profile(&self, r: f64) -> (f64, f64, f64) {
        match self {
            Model::PDirichlet { p } => power_profile(1.0, *p, r),
            Model::Quadratic => (r * r, 2.0 * r, 2.0),
            Model::Congestion { p } => {
                if r <= 1.0 {
                    let dd = if r == 1.0 {
                        power_profile(1.0, *p, 0.0).2
                    } else {
                        0.0
                    };
                    (0.0, 0.0, dd)
                } else {
                    power_profile(1.0, *p, r - 1.0)
                }
            }
            Model::CustomRadial { terms } => terms.iter().fold((0.0, 0.0, 0.0), |acc, t| {
                let (a, b, c) = power_profile(t.coef, t.exp, r);
                (acc.0 + a, acc.1 + b, acc.2 + c)
            }),
            Model::Mollified { base, delta } => {
                let (z, dz, ddz) = cutoff(r / delta);
                if z == 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let (f, df, ddf) = base.profile(r);
                if z == 1.0 {
                    return (f, df, ddf);
                }
                let (dz, ddz) = (dz / delta, ddz / (delta * delta));
                (z * f, dz * f + z * df, ddz * f + 2.0 * dz * df + z * ddf)
            }
        }
    }

    /// `true` when `F` is `C¹` on all of `R^n`.
    pub fn is_c1(&self) -> bool {
        match self {
            Model::CustomRadial { terms } => terms.iter().all(|t| t.exp > 1.0),
            Model::Mollified { .. } => true,
            _ => true,
        }
    }

    /// `limsup_{|a|→∞} ΔF(a) < ∞`.
    pub fn laplacian_bounded_at_infinity(&self) -> bool {
        match self {
            Model::PDirichlet { p } | Model::Congestion { p } => *p <= 2.0,
            Model::Quadratic => true,
            Model::CustomRadial { terms } => terms.iter().all(|t| t.exp <= 2.0),
            Model::Mollified { base, .. } => base.laplacian_bounded_at_infinity(),
        }
    }

    /// When `ΔF` is a single power of `|a|`, its exponent.
    fn laplacian_power(&self) -> Option<f64> {
        match self {
            Model::PDirichlet { p } => Some(p - 2.0),
            Model::Quadratic => Some(0.0),
            Model::CustomRadial { terms } if terms.len() == 1 && terms[0].exp > 1.0 => {
                Some(terms[0].exp - 2.0)
            }
            _ => None,
        }
    }
}

fn power_profile(c: f64, p: f64, r: f64) -> (f64, f64, f64) {
    if r == 0.0 {
        let d1 = if p > 1.0 { 0.0 } else { c };
        let d2 = if p < 2.0 {
            if p == 1.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else if p == 2.0 {
            2.0 * c
        } else {
            0.0
        };
        return (0.0, d1, d2);
    }
    let rp2 = r.powf(p - 2.0);
    (c * rp2 * r * r, c * p * rp2 * r, c * p * (p - 1.0) * rp2)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Serialized description, e.g. `{"model": "p_dirichlet", "p": 1.5, "dim": 2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianConfig {
    #[serde(flatten)]
    pub model: Model,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singular_set: Option<SingularSet>,
    /// Dimensional constant used where only `C = C(n)` is known; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim_constant: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HamiltonianConfig", into = "HamiltonianConfig")]
pub struct Hamiltonian {
    dim: usize,
    model: Model,
    singular_set: SingularSet,
    dim_constant: f64,
}

impl TryFrom<HamiltonianConfig> for Hamiltonian {
    type Error = Error;
    fn try_from(c: HamiltonianConfig) -> Result<Self> {
        let mut h = Hamiltonian::new(c.model, c.dim)?;
        if let Some(k) = c.singular_set {
            h = h.with_singular_set(k)?;
        }
        if let Some(cn) = c.dim_constant {
            if !(cn > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "dim_constant {cn} must be positive"
                )));
            }
            h.dim_constant = cn;
        }
        Ok(h)
    }
}

impl From<Hamiltonian> for HamiltonianConfig {
    fn from(h: Hamiltonian) -> Self {
        HamiltonianConfig {
            model: h.model,
            dim: h.dim,
            singular_set: Some(h.singular_set),
            dim_constant: Some(h.dim_constant),
        }
    }
}

impl Hamiltonian {
    /// Builds an integrand with its default singular set: the unit sphere for
    /// the congestion model, the origin otherwise.
    pub fn new(model: Model, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        model.validate()?;
        let singular_set = match model {
            Model::Congestion { .. } => SingularSet::Sphere { radius: 1.0 },
            _ => SingularSet::Origin,
        };
        Ok(Self {
            dim,
            model,
            singular_set,
            dim_constant: dim as f64,
        })
    }

    pub fn p_dirichlet(p: f64, dim: usize) -> Result<Self> {
        Self::new(Model::PDirichlet { p }, dim)
    }

    pub fn with_singular_set(mut self, k: SingularSet) -> Result<Self> {
        if let SingularSet::Sphere { radius } = k {
            if !(radius > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "sphere radius {radius} must be positive"
                )));
            }
        }
        self.singular_set = k;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn model(&self) -> &Model {
        &self.model
    }
    pub fn singular_set(&self) -> SingularSet {
        self.singular_set
    }
    pub fn dim_constant(&self) -> f64 {
        self.dim_constant
    }

    fn check_dim(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: a.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64]) -> Result<f64> {
        self.check_dim(a)?;
        Ok(self.model.profile(norm(a)).0)
    }

    /// `f'(r) / r`, so that `F_A(a) = flux_factor(|a|) a`. Zero at `r = 0`
    /// for `C¹` integrands.
    pub fn flux_factor(&self, r: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            self.model.profile(r).1 / r
        }
    }

    pub fn grad(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(a)?;
        let r = norm(a);
        if r == 0.0 && !self.model.is_c1() {
            return Err(Error::OnSingularSet {
                point: a.to_vec(),
                what: "gradient undefined",
            });
        }
        let k = self.flux_factor(r);
        Ok(a.iter().map(|x| k * x).collect())
    }

    fn require_off_k(&self, a: &[f64]) -> Result<f64> {
        self.check_dim(a)?;
        if self.singular_set.distance(a) == 0.0 {
            return Err(Error::OnSingularSet {
                point: a.to_vec(),
                what: "second derivatives undefined on K",
            });
        }
        let r = norm(a);
        if r == 0.0 && !self.model.profile(0.0).2.is_finite() {
            return Err(Error::OnSingularSet {
                point: a.to_vec(),
                what: "radial Hessian undefined at 0",
            });
        }
        Ok(r)
    }

    /// `F_AA(a)`; at `a = 0` only when `f''(0)` is finite, giving `f''(0) I`.
    pub fn hess(&self, a: &[f64]) -> Result<DMatrix<f64>> {
        let r = self.require_off_k(a)?;
        let (_, d1, d2) = self.model.profile(r);
        let n = self.dim;
        if r == 0.0 {
            return Ok(DMatrix::identity(n, n) * d2);
        }
        let tangential = d1 / r;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            let outer = a[i] * a[j] / (r * r);
            let id = if i == j { 1.0 } else { 0.0 };
            d2 * outer + tangential * (id - outer)
        }))
    }

    /// `ΔF` as a function of the radius.
    pub fn laplacian_radial(&self, r: f64) -> f64 {
        let (_, d1, d2) = self.model.profile(r);
        if r == 0.0 {
            return if d2.is_finite() {
                self.dim as f64 * d2
            } else {
                f64::INFINITY
            };
        }
        d2 + (self.dim as f64 - 1.0) * d1 / r
    }

    pub fn laplacian(&self, a: &[f64]) -> Result<f64> {
        let r = self.require_off_k(a)?;
        Ok(self.laplacian_radial(r))
    }

    /// `G(p, X) = F_AA(p) : X`.
    pub fn operator(&self, p: &[f64], x: &DMatrix<f64>) -> Result<f64> {
        let h = self.hess(p)?;
        Ok(h.component_mul(x).sum())
    }

    /// `true` when `r ↦ ΔF` is known to be non-increasing on `(0, ∞)`.
    pub fn laplacian_is_non_increasing(&self) -> bool {
        self.model.laplacian_power().is_some_and(|k| k <= 0.0)
    }

    /// `sup_{t < |a| < R} ΔF(a)`; `upper = None` means `R = ∞`.
    pub fn annulus_sup_laplacian(&self, t: f64, upper: Option<f64>) -> Result<f64> {
        if !(t > 0.0) || upper.is_some_and(|r| !(r > t)) {
            return Err(Error::InvalidParameter(format!(
                "annulus needs 0 < t < R (t = {t}, R = {upper:?})"
            )));
        }
        if upper.is_none() && !self.model.laplacian_bounded_at_infinity() {
            return Err(Error::UnboundedAtInfinity(format!("{:?}", self.model)));
        }
        if let Some(k) = self.model.laplacian_power() {
            // ΔF = c r^k is monotone: the supremum sits at an end of the annulus.
            let inner = self.laplacian_radial(t);
            let outer = match upper {
                Some(r) => self.laplacian_radial(r),
                None if k < 0.0 => 0.0,
                None => self.laplacian_radial(1.0),
            };
            return Ok(inner.max(outer));
        }
        Ok(self.sampled_envelope(&[t], upper)[0])
    }

    /// Sampled annulus supremum for every `t` in `ts` (sorted ascending),
    /// completed to a non-increasing function by suffix maxima.
    fn sampled_envelope(&self, ts: &[f64], upper: Option<f64>) -> Vec<f64> {
        const SAMPLES: usize = 256;
        let t0 = ts[0];
        let top = upper.unwrap_or(1e6 * t0.max(1.0));
        let mut radii = log_spaced(t0, top, SAMPLES * 4);
        radii.extend_from_slice(ts);
        if let Some(rk) = self.singular_set.radius().filter(|r| *r > 0.0) {
            for k in 3..=12 {
                let e = 10f64.powi(-k);
                radii.push(rk * (1.0 + e));
                radii.push(rk * (1.0 - e));
            }
        }
        radii.retain(|r| *r >= t0 && *r <= top);
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii.dedup();
        let vals: Vec<f64> = radii.iter().map(|&r| self.laplacian_radial(r)).collect();
        let mut suffix = vec![f64::NEG_INFINITY; vals.len() + 1];
        for i in (0..vals.len()).rev() {
            suffix[i] = suffix[i + 1].max(vals[i]);
        }
        ts.iter()
            .map(|&t| {
                let i = radii.partition_point(|&r| r < t);
                suffix[i]
            })
            .collect()
    }
}

/// Tabulated `t ↦ sup_{t<|a|<R} ΔF(a)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadialEnvelope {
    pub samples: Vec<(f64, f64)>,
    pub upper_radius: Option<f64>,
}

impl RadialEnvelope {
    pub fn build(h: &Hamiltonian, ts: &[f64], upper: Option<f64>) -> Result<Self> {
        let samples = ts
            .iter()
            .map(|&t| h.annulus_sup_laplacian(t, upper).map(|v| (t, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            upper_radius: upper,
        })
    }

    pub fn is_non_increasing(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}
