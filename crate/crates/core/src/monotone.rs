//! Tabulated monotone scalar maps on `(0, ∞)`.
//!
//! Every scalar function in the flatness pipeline (ω, ρ, Φ, G, T, T′, Θ, Θ′)
//! is positive and monotone on the positive half line. They are stored as
//! knot/value tables with log-log slopes and interpolated by monotone cubic
//! Hermite splines in `(ln t, ln v)`. Pure power laws are reproduced exactly,
//! and outside the knot range the end power laws are continued.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{log_gauss_legendre, log_slope, EXPONENT_MARGIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRecord", into = "MapRecord")]
pub struct MonotoneMap {
    knots: Vec<f64>,
    values: Vec<f64>,
    log_slopes: Vec<f64>,
    direction: Direction,
    strict: bool,
    // cached logs
    lx: Vec<f64>,
    ly: Vec<f64>,
}

/// Serialized form: `(knot, value)` pairs plus the log-log slopes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapRecord {
    pub direction: Direction,
    pub points: Vec<(f64, f64)>,
    pub log_slopes: Vec<f64>,
}

impl From<MonotoneMap> for MapRecord {
    fn from(m: MonotoneMap) -> Self {
        MapRecord {
            direction: m.direction,
            points: m
                .knots
                .iter()
                .copied()
                .zip(m.values.iter().copied())
                .collect(),
            log_slopes: m.log_slopes,
        }
    }
}

impl TryFrom<MapRecord> for MonotoneMap {
    type Error = Error;
    fn try_from(r: MapRecord) -> Result<Self> {
        let (knots, values): (Vec<f64>, Vec<f64>) = r.points.into_iter().unzip();
        let map = MonotoneMap::new(knots, values, r.log_slopes)?;
        if map.direction != r.direction {
            return Err(Error::NotMonotone(format!(
                "recorded direction {:?} does not match data ({:?})",
                r.direction, map.direction
            )));
        }
        Ok(map)
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(
        lo > 0.0 && hi > lo && n >= 2,
        "bad log range [{lo}, {hi}] x {n}"
    );
    let (a, b) = (lo.ln(), hi.ln());
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    out[0] = lo;
    out[n - 1] = hi;
    out
}

impl MonotoneMap {
    /// Builds a map from knots, positive monotone values, and log-log slopes.
    /// Slopes are limited (Fritsch–Carlson) so the interpolant stays monotone.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, log_slopes: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n || log_slopes.len() != n {
            return Err(Error::InvalidParameter(format!(
                "table needs >= 2 knots with matching values/slopes (got {n}, {}, {})",
                values.len(),
                log_slopes.len()
            )));
        }
        if knots[0] <= 0.0
            || knots.windows(2).any(|w| !(w[1] > w[0]))
            || knots.iter().any(|k| !k.is_finite())
        {
            return Err(Error::InvalidParameter(
                "knots must be positive, finite and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "values must be positive and finite".into(),
            ));
        }
        if log_slopes.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter("log slopes must be finite".into()));
        }
        let up = values.windows(2).all(|w| w[1] >= w[0]);
        let down = values.windows(2).all(|w| w[1] <= w[0]);
        let direction = match (up, down) {
            (true, true) => Direction::Constant,
            (true, false) => Direction::Increasing,
            (false, true) => Direction::Decreasing,
            (false, false) => {
                return Err(Error::NotMonotone(format!(
                    "values {:?}..",
                    &values[..n.min(4)]
                )))
            }
        };
        let strict = match direction {
            Direction::Increasing => values.windows(2).all(|w| w[1] > w[0]),
            Direction::Decreasing => values.windows(2).all(|w| w[1] < w[0]),
            Direction::Constant => false,
        };
        let lx: Vec<f64> = knots.iter().map(|k| k.ln()).collect();
        let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        let mut m = log_slopes;
        let sign = match direction {
            Direction::Increasing => 1.0,
            Direction::Decreasing => -1.0,
            Direction::Constant => 0.0,
        };
        for s in m.iter_mut() {
            if *s * sign < 0.0 || sign == 0.0 {
                *s = 0.0;
            }
        }
        for k in 0..n - 1 {
            let delta = (ly[k + 1] - ly[k]) / (lx[k + 1] - lx[k]);
            if delta == 0.0 {
                m[k] = 0.0;
                m[k + 1] = 0.0;
                continue;
            }
            let a = m[k] / delta;
            let b = m[k + 1] / delta;
            let r2 = a * a + b * b;
            if r2 > 9.0 + 1e-9 {
                let tau = 3.0 / r2.sqrt();
                m[k] = tau * a * delta;
                m[k + 1] = tau * b * delta;
            }
        }
        Ok(Self {
            knots,
            values,
            log_slopes: m,
            direction,
            strict,
            lx,
            ly,
        })
    }

    /// Tabulates `f` at `knots`, estimating log-log slopes by central differences.
    pub fn from_fn(knots: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = knots.iter().map(|&t| f(t)).collect();
        let slopes: Vec<f64> = knots.iter().map(|&t| log_slope(&f, t)).collect();
        Self::new(knots, values, slopes)
    }

    /// Tabulates `f` with its exact log-log slope `t f'(t) / f(t)`.
    pub fn from_fn_with_slope(
        knots: Vec<f64>,
        f: impl Fn(f64) -> f64,
        slope: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let values = knots.iter().map(|&t| f(t)).collect();
        let slopes = knots.iter().map(|&t| slope(t)).collect();
        Self::new(knots, values, slopes)
    }

    /// The power law `c t^k`, tabulated on `knots`.
    pub fn power(knots: Vec<f64>, c: f64, k: f64) -> Result<Self> {
        Self::from_fn_with_slope(knots, |t| c * t.powf(k), |_| k)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn log_slopes(&self) -> &[f64] {
        &self.log_slopes
    }
    pub fn direction(&self) -> Direction {
        self.direction
    }
    pub fn is_strict(&self) -> bool {
        self.strict
    }
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }
    pub fn len(&self) -> usize {
        self.knots.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    fn segment(&self, x: f64) -> usize {
        let i = self.lx.partition_point(|&k| k <= x);
        i.clamp(1, self.lx.len() - 1) - 1
    }

    fn hermite(&self, k: usize, x: f64) -> (f64, f64) {
        let (x0, x1) = (self.lx[k], self.lx[k + 1]);
        let dx = x1 - x0;
        let (y0, y1) = (self.ly[k], self.ly[k + 1]);
        let (m0, m1) = (self.log_slopes[k] * dx, self.log_slopes[k + 1] * dx);
        let u = (x - x0) / dx;
        let u2 = u * u;
        let u3 = u2 * u;
        let y = (2.0 * u3 - 3.0 * u2 + 1.0) * y0
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * y1
            + (u3 - u2) * m1;
        let dy = ((6.0 * u2 - 6.0 * u) * y0
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * y1
            + (3.0 * u2 - 2.0 * u) * m1)
            / dx;
        (y, dy)
    }

    /// `(ln v, d ln v / d ln t)` at `t > 0`.
    fn log_eval(&self, t: f64) -> (f64, f64) {
        let x = t.ln();
        let n = self.lx.len();
        if x <= self.lx[0] {
            let m = self.log_slopes[0];
            (self.ly[0] + m * (x - self.lx[0]), m)
        } else if x >= self.lx[n - 1] {
            let m = self.log_slopes[n - 1];
            (self.ly[n - 1] + m * (x - self.lx[n - 1]), m)
        } else {
            self.hermite(self.segment(x), x)
        }
    }

    /// Value at `t`. For `t <= 0` the limit from the right is returned.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            let m = self.log_slopes[0];
            return if m > 0.0 {
                0.0
            } else if m == 0.0 {
                self.values[0]
            } else {
                f64::INFINITY
            };
        }
        if let Ok(i) = self.knots.binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
            return self.values[i];
        }
        self.log_eval(t).0.exp()
    }

    /// Log-log slope of the interpolant at `t > 0`.
    pub fn log_slope_at(&self, t: f64) -> f64 {
        self.log_eval(t).1
    }

    /// Ordinary derivative of the interpolant at `t > 0`.
    pub fn derivative(&self, t: f64) -> f64 {
        let (ly, m) = self.log_eval(t);
        ly.exp() * m / t
    }

    /// Range of values the map attains on `(0, ∞)` including the power-law tails.
    pub fn range(&self) -> (f64, f64) {
        let n = self.values.len();
        let (m0, mn) = (self.log_slopes[0], self.log_slopes[n - 1]);
        match self.direction {
            Direction::Increasing => (
                if m0 > 0.0 { 0.0 } else { self.values[0] },
                if mn > 0.0 {
                    f64::INFINITY
                } else {
                    self.values[n - 1]
                },
            ),
            Direction::Decreasing => (
                if mn < 0.0 { 0.0 } else { self.values[n - 1] },
                if m0 < 0.0 {
                    f64::INFINITY
                } else {
                    self.values[0]
                },
            ),
            Direction::Constant => (self.values[0], self.values[0]),
        }
    }

    /// Inverse of the interpolant: the `t` with `eval(t) == y`.
    pub fn invert(&self, y: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if self.direction == Direction::Constant || !(y > 0.0) || y < lo || y > hi {
            if y == 0.0 && lo == 0.0 && self.direction == Direction::Increasing {
                return Ok(0.0);
            }
            return Err(Error::OutOfRange { value: y, lo, hi });
        }
        let target = y.ln();
        let n = self.ly.len();
        let inc = self.direction == Direction::Increasing;
        let below = |a: f64, b: f64| if inc { a < b } else { a > b };
        // tails
        if below(target, self.ly[0]) || target == self.ly[0] && self.log_slopes[0] != 0.0 {
            let m = self.log_slopes[0];
            return Ok((self.lx[0] + (target - self.ly[0]) / m).exp());
        }
        if below(self.ly[n - 1], target) {
            let m = self.log_slopes[n - 1];
            return Ok((self.lx[n - 1] + (target - self.ly[n - 1]) / m).exp());
        }
        // first knot whose value is not below the target
        let k = self.ly.partition_point(|&v| below(v, target));
        if k < n && self.ly[k] == target {
            return Ok(self.knots[k]);
        }
        let seg = k.clamp(1, n - 1) - 1;
        let (mut a, mut b) = (self.lx[seg], self.lx[seg + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            let v = self.hermite(seg, mid).0;
            if below(v, target) {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok((0.5 * (a + b)).exp())
    }

    /// `C(t) = ∫_0^t v(s)^power ds`, tabulated on the same knots.
    ///
    /// Below the first knot the end power law is integrated in closed form;
    /// this fails with `DivergentIntegral` when the local exponent of the
    /// integrand there is not above `-1 + EXPONENT_MARGIN`. Each segment uses
    /// Gauss–Legendre in `ln s`, doubled until the total moves by at most
    /// `1e-6` relatively.
    pub fn cumulative(&self, power: f64) -> Result<MonotoneMap> {
        let e = power * self.log_slopes[0];
        if 1.0 + e < EXPONENT_MARGIN {
            return Err(Error::DivergentIntegral(format!(
                "integrand ~ s^{e:.4} at s = {:e}; not integrable at 0",
                self.knots[0]
            )));
        }
        let tail = self.values[0].powf(power) * self.knots[0] / (1.0 + e);
        let g = |s: f64| self.eval(s).powf(power);
        let mut pieces = 1;
        let mut prev: Option<Vec<f64>> = None;
        loop {
            let mut acc = tail;
            let mut out = Vec::with_capacity(self.knots.len());
            out.push(acc);
            for w in self.knots.windows(2) {
                acc += log_gauss_legendre(g, w[0], w[1], pieces);
                out.push(acc);
            }
            if let Some(p) = &prev {
                let last = *out.last().unwrap();
                let change = (last - p.last().unwrap()).abs() / last;
                if change <= 1e-6 || pieces >= 16 {
                    break self.cumulative_from(out, power);
                }
            }
            prev = Some(out);
            pieces *= 2;
        }
    }

    fn cumulative_from(&self, values: Vec<f64>, power: f64) -> Result<MonotoneMap> {
        let slopes = self
            .knots
            .iter()
            .zip(values.iter())
            .zip(self.values.iter())
            .map(|((t, c), v)| t * v.powf(power) / c)
            .collect();
        MonotoneMap::new(self.knots.clone(), values, slopes)
    }
}
