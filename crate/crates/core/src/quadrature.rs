//! One-dimensional quadrature for the improper integrals that appear in the
//! flatness pipeline: integrands that may blow up at the origin, where only
//! finiteness of the integral is known a priori.

use crate::error::{Error, Result};

const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Smallest admissible value of `1 + e` for an integrand behaving like
/// `s^e` at the smallest resolved scale. Anything flatter is treated as
/// divergent, since logarithmic divergences look like `e = -1 + 1/|ln s|`.
pub const EXPONENT_MARGIN: f64 = 0.05;

/// 8-point Gauss–Legendre on `[a, b]` split into `pieces` equal parts.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let pieces = pieces.max(1);
    let w = (b - a) / pieces as f64;
    let mut total = 0.0;
    for k in 0..pieces {
        let lo = a + w * k as f64;
        let mid = lo + 0.5 * w;
        let half = 0.5 * w;
        let mut s = 0.0;
        for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            s += wt * (f(mid - half * x) + f(mid + half * x));
        }
        total += s * half;
    }
    total
}

/// `∫_a^b f(s) ds` for `0 < a < b`, integrated in the variable `ln s`.
pub fn log_gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    gauss_legendre(
        |x| {
            let s = x.exp();
            f(s) * s
        },
        a.ln(),
        b.ln(),
        pieces,
    )
}

#[derive(Clone, Copy, Debug)]
pub struct ImproperOptions {
    /// Relative change between successive dyadic refinements accepted as converged.
    pub rel_tol: f64,
    /// Maximum number of dyadic halvings of the lower limit.
    pub max_halvings: usize,
    /// Gauss–Legendre pieces per dyadic shell.
    pub pieces: usize,
}

impl Default for ImproperOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_halvings: 1000,
            pieces: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ImproperIntegral {
    pub value: f64,
    /// Local exponent `e` of the integrand (`f ~ s^e`) at the smallest shell used.
    pub local_exponent: f64,
    pub halvings: usize,
}

/// `∫_0^upper f(s) ds` for a positive integrand that may be singular at zero.
///
/// The interval is split into dyadic shells `[u 2^{-k-1}, u 2^{-k}]`. The
/// ratio of consecutive shell contributions estimates the local power law,
/// the remaining tail is summed geometrically, and the extrapolated total is
/// accepted once it stops moving (relative change `rel_tol`) while the local
/// exponent stays above `-1 + EXPONENT_MARGIN`.
pub fn integrate_from_zero(
    f: impl Fn(f64) -> f64,
    upper: f64,
    opts: ImproperOptions,
) -> Result<ImproperIntegral> {
    if !(upper > 0.0 && upper.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "upper limit {upper} must be positive"
        )));
    }
    let mut partial = 0.0;
    let mut prev_shell = f64::NAN;
    let mut prev_total = f64::NAN;
    let mut settled = 0;
    let mut hi = upper;
    for k in 0..opts.max_halvings {
        let lo = 0.5 * hi;
        if lo < f64::MIN_POSITIVE * 1e10 {
            break;
        }
        let shell = log_gauss_legendre(&f, lo, hi, opts.pieces);
        if !shell.is_finite() || shell < 0.0 {
            return Err(Error::DivergentIntegral(format!(
                "non-finite or negative contribution on [{lo:e}, {hi:e}]"
            )));
        }
        partial += shell;
        if k >= 2 && prev_shell > 0.0 {
            let ratio = shell / prev_shell;
            let exponent = -1.0 - ratio.log2();
            if ratio <= 0.0 {
                return Ok(ImproperIntegral {
                    value: partial,
                    local_exponent: f64::INFINITY,
                    halvings: k,
                });
            }
            if 1.0 + exponent >= EXPONENT_MARGIN {
                let total = partial + shell * ratio / (1.0 - ratio);
                if prev_total.is_finite()
                    && (total - prev_total).abs() <= opts.rel_tol * total.abs()
                {
                    settled += 1;
                    if settled >= 2 {
                        return Ok(ImproperIntegral {
                            value: total,
                            local_exponent: exponent,
                            halvings: k,
                        });
                    }
                } else {
                    settled = 0;
                }
                prev_total = total;
            } else {
                settled = 0;
                prev_total = f64::NAN;
            }
        } else if shell == 0.0 && prev_shell == 0.0 {
            return Ok(ImproperIntegral {
                value: partial,
                local_exponent: f64::INFINITY,
                halvings: k,
            });
        }
        prev_shell = shell;
        hi = lo;
    }
    Err(Error::DivergentIntegral(format!(
        "dyadic refinement of ∫_0^{upper} did not settle; integrand is not integrable at 0 at the resolved scales"
    )))
}

/// Local log-log slope of a positive function, by central differences in `ln t`.
pub fn log_slope(f: impl Fn(f64) -> f64, t: f64) -> f64 {
    const STEP: f64 = 1e-4;
    let up = f(t * STEP.exp());
    let down = f(t * (-STEP).exp());
    (up.ln() - down.ln()) / (2.0 * STEP)
}
