//! Rectangular node grids in 1D/2D, nodal functions, and the P1 simplex
//! mesh used to discretize `∫ F(Du)`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::Hamiltonian;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: Vec<usize>,
}

impl Grid {
    /// `n[k]` nodes along axis `k`, endpoints included.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 || dim > 2 || hi.len() != dim || n.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "grid needs matching 1D/2D extents (got {dim})"
            )));
        }
        for k in 0..dim {
            if !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "axis {k}: empty box [{}, {}]",
                    lo[k], hi[k]
                )));
            }
            if n[k] < 3 {
                return Err(Error::InvalidParameter(format!(
                    "axis {k}: need at least 3 nodes, got {}",
                    n[k]
                )));
            }
        }
        Ok(Self { lo, hi, n })
    }

    /// Uniform grid on `[lo, hi]^dim` with `cells` cells per axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, cells: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], vec![cells + 1; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi
    }
    pub fn shape(&self) -> &[usize] {
        &self.n
    }
    pub fn len(&self) -> usize {
        self.n.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] - 1) as f64
    }

    /// Largest spacing over the axes.
    pub fn h(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).fold(0.0, f64::max)
    }

    pub fn diam(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        match multi.len() {
            1 => multi[0],
            _ => multi[0] + self.n[0] * multi[1],
        }
    }

    pub fn multi(&self, idx: usize) -> [usize; 2] {
        if self.dim() == 1 {
            [idx, 0]
        } else {
            [idx % self.n[0], idx / self.n[0]]
        }
    }

    pub fn coord(&self, idx: usize) -> Vec<f64> {
        let m = self.multi(idx);
        (0..self.dim()).map(|k| self.axis_coord(k, m[k])).collect()
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.n[axis] - 1 {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.spacing(axis)
        }
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let m = self.multi(idx);
        (0..self.dim()).any(|k| m[k] == 0 || m[k] == self.n[k] - 1)
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_boundary(i)).collect()
    }

    /// Euclidean distance from the node to `∂Ω`.
    pub fn boundary_distance(&self, idx: usize) -> f64 {
        let x = self.coord(idx);
        (0..self.dim())
            .map(|k| (x[k] - self.lo[k]).min(self.hi[k] - x[k]))
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }

    /// Nodes at least `margin` away from `∂Ω` (up to rounding).
    pub fn inner_nodes(&self, margin: f64) -> Vec<usize> {
        let slack = 1e-9 * self.h();
        (0..self.len())
            .filter(|&i| !self.is_boundary(i) && self.boundary_distance(i) >= margin - slack)
            .collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_boundary(i)).collect()
    }

    /// Node `idx` shifted by `off` index steps, if it stays on the grid.
    pub fn shift(&self, idx: usize, off: [isize; 2]) -> Option<usize> {
        let m = self.multi(idx);
        let mut out = [0usize; 2];
        for k in 0..self.dim() {
            let v = m[k] as isize + off[k];
            if v < 0 || v >= self.n[k] as isize {
                return None;
            }
            out[k] = v as usize;
        }
        Some(self.index(&out[..self.dim()]))
    }

    /// Index offsets `z` with `|z|` (in physical units) at most `radius`,
    /// together with `|z|²`.
    pub fn offsets_within(&self, radius: f64) -> Vec<([isize; 2], f64)> {
        let dim = self.dim();
        let reach: Vec<isize> = (0..dim)
            .map(|k| ((radius / self.spacing(k)).floor() as isize).min(self.n[k] as isize - 1))
            .collect();
        let r2 = radius * radius * (1.0 + 1e-12);
        let mut out = Vec::new();
        let jr = if dim == 2 { reach[1] } else { 0 };
        for j in -jr..=jr {
            for i in -reach[0]..=reach[0] {
                let dx = i as f64 * self.spacing(0);
                let dy = if dim == 2 {
                    j as f64 * self.spacing(1)
                } else {
                    0.0
                };
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    out.push(([i, j], d2));
                }
            }
        }
        out
    }
}

/// Nodal values on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value at node {i}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.coord(i))).collect();
        Self::new(grid, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        self.grid.boundary_mask()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &SampledFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn at(&self, idx: usize, off: [isize; 2]) -> Result<f64> {
        self.grid
            .shift(idx, off)
            .map(|j| self.values[j])
            .ok_or(Error::BoundaryNode(idx))
    }

    /// Centered-difference gradient at an interior node.
    pub fn nodal_gradient(&self, idx: usize) -> Result<Vec<f64>> {
        if self.grid.is_boundary(idx) {
            return Err(Error::BoundaryNode(idx));
        }
        (0..self.grid.dim())
            .map(|k| {
                let mut e = [0isize; 2];
                e[k] = 1;
                let up = self.at(idx, e)?;
                e[k] = -1;
                let down = self.at(idx, e)?;
                Ok((up - down) / (2.0 * self.grid.spacing(k)))
            })
            .collect()
    }

    /// Centered-difference Hessian at an interior node. Exact for quadratics.
    pub fn hessian(&self, idx: usize) -> Result<DMatrix<f64>> {
        if self.grid.is_boundary(idx) {
            return Err(Error::BoundaryNode(idx));
        }
        let dim = self.grid.dim();
        let c = self.values[idx];
        let mut m = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let hk = self.grid.spacing(k);
            let mut e = [0isize; 2];
            e[k] = 1;
            let up = self.at(idx, e)?;
            e[k] = -1;
            let down = self.at(idx, e)?;
            m[(k, k)] = (up - 2.0 * c + down) / (hk * hk);
        }
        if dim == 2 {
            let (hx, hy) = (self.grid.spacing(0), self.grid.spacing(1));
            let pp = self.at(idx, [1, 1])?;
            let pm = self.at(idx, [1, -1])?;
            let mp = self.at(idx, [-1, 1])?;
            let mm = self.at(idx, [-1, -1])?;
            let mixed = (pp - pm - mp + mm) / (4.0 * hx * hy);
            m[(0, 1)] = mixed;
            m[(1, 0)] = mixed;
        }
        Ok(m)
    }

    /// Smallest second difference quotient along the lattice directions
    /// (axes, plus both diagonals in 2D) at an interior node. Unlike the
    /// eigenvalues of [`Self::hessian`], this is a lower curvature bound that
    /// stays meaningful across convex kinks.
    pub fn min_second_difference(&self, idx: usize) -> Result<f64> {
        if self.grid.is_boundary(idx) {
            return Err(Error::BoundaryNode(idx));
        }
        let c = self.values[idx];
        let h: Vec<f64> = (0..self.grid.dim()).map(|k| self.grid.spacing(k)).collect();
        let mut dirs: Vec<[isize; 2]> = vec![[1, 0]];
        if self.grid.dim() == 2 {
            dirs.extend([[0, 1], [1, 1], [1, -1]]);
        }
        let mut best = f64::INFINITY;
        for d in dirs {
            let len2: f64 = d
                .iter()
                .zip(&h)
                .map(|(&a, &s)| (a as f64 * s).powi(2))
                .sum();
            let up = self.at(idx, d)?;
            let down = self.at(idx, [-d[0], -d[1]])?;
            best = best.min((up - 2.0 * c + down) / len2);
        }
        Ok(best)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let g = &self.grid;
        let dim = g.dim();
        let mut w = w;
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let n: Vec<String> = g.n.iter().map(|x| x.to_string()).collect();
        let h: Vec<f64> = (0..dim).map(|k| g.spacing(k)).collect();
        writeln!(
            w,
            "# dim {dim} lo {} hi {} n {} h {}",
            join(&g.lo),
            join(&g.hi),
            n.join(" "),
            join(&h)
        )?;
        let mut wr = csv::Writer::from_writer(w);
        if dim == 1 {
            wr.write_record(["i", "x", "value"])?;
        } else {
            wr.write_record(["i", "j", "x", "y", "value"])?;
        }
        for (idx, v) in self.values.iter().enumerate() {
            let m = g.multi(idx);
            let x = g.coord(idx);
            let mut rec: Vec<String> = m[..dim].iter().map(|i| i.to_string()).collect();
            rec.extend(x.iter().map(|c| format!("{c}")));
            rec.push(format!("{v}"));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let grid = parse_metadata(&first)?;
        let dim = grid.dim();
        let mut values = vec![f64::NAN; grid.len()];
        let mut rd = csv::Reader::from_reader(reader);
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 2 * dim + 1 {
                return Err(Error::GridFormat(format!(
                    "expected {} columns, got {}",
                    2 * dim + 1,
                    rec.len()
                )));
            }
            let parse_idx = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::GridFormat(format!("index {s:?}: {e}")))
            };
            let m: Vec<usize> = (0..dim)
                .map(|k| parse_idx(&rec[k]))
                .collect::<Result<_>>()?;
            if m.iter().zip(grid.shape()).any(|(i, n)| i >= n) {
                return Err(Error::GridFormat(format!("index {m:?} outside grid")));
            }
            let v: f64 = rec[2 * dim]
                .trim()
                .parse()
                .map_err(|e| Error::GridFormat(format!("value: {e}")))?;
            values[grid.index(&m)] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::GridFormat("missing nodes".into()));
        }
        Self::new(grid, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn parse_metadata(line: &str) -> Result<Grid> {
    let bad = |m: &str| Error::GridFormat(format!("{m} in metadata line {line:?}"));
    let toks: Vec<&str> = line
        .trim()
        .trim_start_matches('#')
        .split_whitespace()
        .collect();
    let find = |key: &str| {
        toks.iter()
            .position(|t| *t == key)
            .ok_or_else(|| bad(&format!("missing {key}")))
    };
    let dim: usize = toks
        .get(find("dim")? + 1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad dim"))?;
    let floats = |key: &str| -> Result<Vec<f64>> {
        let at = find(key)? + 1;
        (0..dim)
            .map(|k| {
                toks.get(at + k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(key))
            })
            .collect()
    };
    let at = find("n")? + 1;
    let n: Vec<usize> = (0..dim)
        .map(|k| {
            toks.get(at + k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("n"))
        })
        .collect::<Result<_>>()?;
    Grid::new(floats("lo")?, floats("hi")?, n)
}

/// Which diagonal splits each 2D cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagonal {
    /// From `(i, j)` to `(i+1, j+1)`.
    #[default]
    Forward,
    /// From `(i+1, j)` to `(i, j+1)`.
    Backward,
}

/// P1 simplices over a grid: intervals in 1D, two triangles per cell in 2D.
#[derive(Clone, Debug)]
pub struct SimplexMesh {
    dim: usize,
    vertices: Vec<[usize; 3]>,
    /// `∇u = Σ_k u[v_k] coeffs[k]` on each simplex.
    coeffs: Vec<[[f64; 2]; 3]>,
    volumes: Vec<f64>,
    nodes: usize,
}

impl SimplexMesh {
    pub fn new(grid: &Grid, diagonal: Diagonal) -> Self {
        let dim = grid.dim();
        let mut vertices = Vec::new();
        let mut coeffs = Vec::new();
        let mut volumes = Vec::new();
        if dim == 1 {
            for i in 0..grid.shape()[0] - 1 {
                let h = grid.axis_coord(0, i + 1) - grid.axis_coord(0, i);
                vertices.push([i, i + 1, i + 1]);
                coeffs.push([[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0, 0.0]]);
                volumes.push(h);
            }
        } else {
            let (nx, ny) = (grid.shape()[0], grid.shape()[1]);
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let id = |a: usize, b: usize| a + nx * b;
                    let tris = match diagonal {
                        Diagonal::Forward => [
                            [id(i, j), id(i + 1, j), id(i + 1, j + 1)],
                            [id(i, j), id(i + 1, j + 1), id(i, j + 1)],
                        ],
                        Diagonal::Backward => [
                            [id(i, j), id(i + 1, j), id(i, j + 1)],
                            [id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)],
                        ],
                    };
                    for t in tris {
                        let (c, vol) = triangle_gradient(grid, t);
                        vertices.push(t);
                        coeffs.push(c);
                        volumes.push(vol);
                    }
                }
            }
        }
        Self {
            dim,
            vertices,
            coeffs,
            volumes,
            nodes: grid.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }
    pub fn vertices(&self, s: usize) -> &[usize] {
        &self.vertices[s][..self.dim + 1]
    }

    pub fn simplex_gradient(&self, s: usize, values: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, &v) in self.vertices(s).iter().enumerate() {
            for (gd, c) in g.iter_mut().zip(&self.coeffs[s][k]).take(self.dim) {
                *gd += values[v] * c;
            }
        }
        g
    }

    /// Constant gradient on each simplex.
    pub fn gradient(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|s| self.simplex_gradient(s, values)[..self.dim].to_vec())
            .collect()
    }

    /// `Σ_s F(∇u_s) |s|`.
    pub fn energy(&self, values: &[f64], h: &Hamiltonian) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|s| {
                let g = self.simplex_gradient(s, values);
                let r = g[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt();
                h.model().profile(r).0 * self.volumes[s]
            })
            .collect();
        // sequential sum keeps results independent of thread scheduling
        terms.iter().sum()
    }

    /// Nodal gradient of the discrete energy: `Σ_s |s| F_A(∇u_s) · ∇λ_v`.
    pub fn energy_gradient(&self, values: &[f64], h: &Hamiltonian) -> Vec<f64> {
        let contributions: Vec<[f64; 3]> = (0..self.len())
            .into_par_iter()
            .map(|s| {
                let g = self.simplex_gradient(s, values);
                let r = g[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt();
                let k = h.flux_factor(r) * self.volumes[s];
                let mut out = [0.0; 3];
                for (slot, c) in out.iter_mut().zip(&self.coeffs[s]).take(self.dim + 1) {
                    *slot = k * (0..self.dim).map(|d| g[d] * c[d]).sum::<f64>();
                }
                out
            })
            .collect();
        let mut grad = vec![0.0; self.nodes];
        for (s, c) in contributions.iter().enumerate() {
            for (k, &v) in self.vertices(s).iter().enumerate() {
                grad[v] += c[k];
            }
        }
        grad
    }

    /// `Σ_s |s| F_A(∇u_s) · ∇φ_s`.
    pub fn flux_pairing(&self, u: &[f64], phi: &[f64], h: &Hamiltonian) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|s| {
                let g = self.simplex_gradient(s, u);
                let gp = self.simplex_gradient(s, phi);
                let r = g[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt();
                h.flux_factor(r)
                    * self.volumes[s]
                    * (0..self.dim).map(|d| g[d] * gp[d]).sum::<f64>()
            })
            .collect();
        terms.iter().sum()
    }
}

fn triangle_gradient(grid: &Grid, t: [usize; 3]) -> ([[f64; 2]; 3], f64) {
    let p: Vec<Vec<f64>> = t.iter().map(|&v| grid.coord(v)).collect();
    let (e1, e2) = (
        [p[1][0] - p[0][0], p[1][1] - p[0][1]],
        [p[2][0] - p[0][0], p[2][1] - p[0][1]],
    );
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    // rows of the inverse transpose of [e1 e2]
    let g1 = [e2[1] / det, -e2[0] / det];
    let g2 = [-e1[1] / det, e1[0] / det];
    let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
    ([g0, g1, g2], 0.5 * det.abs())
}

/// Discrete energy `Σ_s F(∇u_s)|s|` with a freshly built mesh.
pub fn energy(u: &SampledFunction, h: &Hamiltonian) -> f64 {
    SimplexMesh::new(&u.grid, Diagonal::Forward).energy(&u.values, h)
}

/// Per-simplex gradients with a freshly built mesh.
pub fn gradient(u: &SampledFunction) -> Vec<Vec<f64>> {
    SimplexMesh::new(&u.grid, Diagonal::Forward).gradient(&u.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(dim: usize, cells: usize) -> Grid {
        Grid::cube(dim, 0.0, 1.0, cells).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::cube(1, 0.0, 1.0, 1).is_err());
        assert!(Grid::cube(3, 0.0, 1.0, 4).is_err());
        assert!(Grid::new(vec![1.0], vec![0.0], vec![5]).is_err());
        let g = unit(2, 4);
        assert_eq!(g.len(), 25);
        assert_eq!(g.index(&[2, 3]), 17);
        assert_eq!(g.multi(17), [2, 3]);
        assert!(g.is_boundary(0) && !g.is_boundary(6));
        assert_eq!(g.interior_nodes().len(), 9);
    }

    #[test]
    fn gradients_of_affine_data() {
        let u = SampledFunction::from_fn(unit(1, 7), |x| x[0]).unwrap();
        for g in gradient(&u) {
            assert_relative_eq!(g[0], 1.0, max_relative = 1e-12);
        }
        for diag in [Diagonal::Forward, Diagonal::Backward] {
            let u = SampledFunction::from_fn(unit(2, 5), |x| x[0] - 2.0 * x[1]).unwrap();
            let mesh = SimplexMesh::new(&u.grid, diag);
            for g in mesh.gradient(&u.values) {
                assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_square_1d() {
        let u = SampledFunction::from_fn(unit(1, 10), |x| x[0] * x[0]).unwrap();
        for (i, g) in gradient(&u).iter().enumerate() {
            let (a, b) = (u.grid.coord(i)[0], u.grid.coord(i + 1)[0]);
            assert_relative_eq!(g[0], a + b, epsilon = 1e-12);
        }
    }

    #[test]
    fn lattice_second_differences() {
        let g = Grid::cube(2, 0.0, 1.0, 10).unwrap();
        // eigenvalues 1 and 5 along the diagonals, 3 along the axes
        let q = SampledFunction::from_fn(g.clone(), |x| {
            1.5 * x[0] * x[0] + 1.5 * x[1] * x[1] + 2.0 * x[0] * x[1]
        })
        .unwrap();
        assert_relative_eq!(
            q.min_second_difference(g.index(&[4, 6])).unwrap(),
            1.0,
            max_relative = 1e-9
        );
        let ridge =
            SampledFunction::from_fn(g.clone(), |x| (x[0] - 0.5).abs().max((x[1] - 0.5).abs()))
                .unwrap();
        assert!(ridge.min_second_difference(g.index(&[5, 5])).unwrap() >= 0.0);
        let one = SampledFunction::from_fn(Grid::cube(1, 0.0, 1.0, 10).unwrap(), |x| -x[0] * x[0])
            .unwrap();
        assert_relative_eq!(
            one.min_second_difference(3).unwrap(),
            -2.0,
            max_relative = 1e-9
        );
        assert!(matches!(
            one.min_second_difference(0),
            Err(Error::BoundaryNode(0))
        ));
    }

    #[test]
    fn hessian_examples() {
        let u = SampledFunction::from_fn(unit(2, 8), |x| x[0] * x[0] - x[1] * x[1]).unwrap();
        for i in u.grid.interior_nodes() {
            let m = u.hessian(i).unwrap();
            assert!(
                (m[(0, 0)] - 2.0).abs() < 1e-9
                    && (m[(1, 1)] + 2.0).abs() < 1e-9
                    && m[(0, 1)].abs() < 1e-9
            );
            assert_eq!(m, m.transpose());
        }
        let q = SampledFunction::from_fn(unit(2, 8), |x| 3.0 * x[0] * x[1] + x[1] * x[1]).unwrap();
        let m = q.hessian(q.grid.index(&[3, 4])).unwrap();
        assert!((m[(0, 1)] - 3.0).abs() < 1e-9 && (m[(1, 1)] - 2.0).abs() < 1e-9);
        let a = SampledFunction::from_fn(unit(2, 8), |x| 0.3 - x[0] + 5.0 * x[1]).unwrap();
        assert!(a.hessian(a.grid.index(&[3, 4])).unwrap().amax() < 1e-9);
        assert!(matches!(a.hessian(0), Err(Error::BoundaryNode(0))));
        let g = Grid::cube(1, -1.0, 1.0, 10).unwrap();
        let h = g.spacing(0);
        let cone = SampledFunction::from_fn(g, |x| x[0].abs()).unwrap();
        assert_relative_eq!(
            cone.hessian(5).unwrap()[(0, 0)],
            2.0 / h,
            max_relative = 1e-12
        );
    }

    #[test]
    fn mesh_volumes_sum_to_box() {
        for (dim, diag) in [
            (1, Diagonal::Forward),
            (2, Diagonal::Forward),
            (2, Diagonal::Backward),
        ] {
            let g = Grid::new(vec![-0.5; dim], vec![0.75; dim], vec![13; dim]).unwrap();
            let mesh = SimplexMesh::new(&g, diag);
            let total: f64 = mesh.volumes().iter().sum();
            assert!((total - g.volume()).abs() <= 1e-12 * g.volume());
        }
    }

    #[test]
    fn energy_examples() {
        let p2 = Hamiltonian::p_dirichlet(2.0, 1).unwrap();
        let u = SampledFunction::from_fn(unit(1, 16), |x| x[0]).unwrap();
        assert_relative_eq!(energy(&u, &p2), 1.0, max_relative = 1e-12);
        let p3 = Hamiltonian::p_dirichlet(3.0, 2).unwrap();
        let v = SampledFunction::from_fn(unit(2, 9), |x| x[0]).unwrap();
        assert_relative_eq!(energy(&v, &p3), 1.0, max_relative = 1e-12);
        let mut errs = Vec::new();
        for k in 3..8 {
            let cells = 1usize << k;
            let w = SampledFunction::from_fn(unit(1, cells), |x| x[0] * x[0]).unwrap();
            let h = 1.0 / cells as f64;
            let direct: f64 = (0..cells)
                .map(|i| {
                    let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
                    h * (a + b) * (a + b)
                })
                .sum();
            let e = energy(&w, &p2);
            assert_relative_eq!(e, direct, max_relative = 1e-12);
            errs.push((e - 4.0 / 3.0).abs());
        }
        for w in errs.windows(2) {
            assert_relative_eq!(w[0] / w[1], 4.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let h = Hamiltonian::p_dirichlet(1.5, 2).unwrap();
        let u = SampledFunction::from_fn(unit(2, 5), |x| (3.0 * x[0]).sin() + x[1] * x[1]).unwrap();
        let mesh = SimplexMesh::new(&u.grid, Diagonal::Forward);
        let g = mesh.energy_gradient(&u.values, &h);
        for i in [6, 12, 18] {
            let mut up = u.values.clone();
            let mut dn = u.values.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (mesh.energy(&up, &h) - mesh.energy(&dn, &h)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn csv_round_trip() {
        for dim in [1, 2] {
            let g = Grid::new(vec![-1.0; dim], vec![0.3; dim], vec![7; dim]).unwrap();
            let u = SampledFunction::from_fn(g, |x| {
                x.iter().map(|c| (c * 1.7).exp()).sum::<f64>() / 3.0
            })
            .unwrap();
            let mut buf = Vec::new();
            u.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with("# dim"));
            let back = SampledFunction::read_csv(&buf[..]).unwrap();
            assert_eq!(u, back);
        }
        assert!(SampledFunction::read_csv("garbage\n".as_bytes()).is_err());
    }

    #[test]
    fn offsets_within_radius() {
        let g = unit(2, 10);
        let offs = g.offsets_within(0.1 * 1.5);
        assert_eq!(offs.len(), 9);
        assert!(offs.iter().all(|(_, d2)| *d2 <= 0.0225 + 1e-12));
    }

    proptest! {
        #[test]
        fn energy_translation_invariant(c in -5.0f64..5.0, seed in 0u64..1000) {
            let h = Hamiltonian::p_dirichlet(1.7, 2).unwrap();
            let u = SampledFunction::from_fn(unit(2, 6), |x| ((seed as f64 + 1.0) * x[0]).sin() * x[1]).unwrap();
            let v = u.map(|x| x + c);
            let (a, b) = (energy(&u, &h), energy(&v, &h));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn energy_midpoint_convex(vs in proptest::collection::vec(-2.0f64..2.0, 49), ws in proptest::collection::vec(-2.0f64..2.0, 49)) {
            let g = unit(2, 6);
            let mesh = SimplexMesh::new(&g, Diagonal::Forward);
            for h in [Hamiltonian::p_dirichlet(1.3, 2).unwrap(), Hamiltonian::p_dirichlet(3.0, 2).unwrap()] {
                let mid: Vec<f64> = vs.iter().zip(&ws).map(|(a, b)| 0.5 * (a + b)).collect();
                let lhs = mesh.energy(&mid, &h);
                let rhs = 0.5 * (mesh.energy(&vs, &h) + mesh.energy(&ws, &h));
                prop_assert!(lhs <= rhs + 1e-12);
            }
        }

        #[test]
        fn derivatives_exact_on_quadratics(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0) {
            let u = SampledFunction::from_fn(unit(2, 6), |x| a * x[0] * x[0] + b * x[0] * x[1] + c * x[1] * x[1] + d * x[0]).unwrap();
            let i = u.grid.index(&[2, 3]);
            let m = u.hessian(i).unwrap();
            prop_assert!((m[(0, 0)] - 2.0 * a).abs() < 1e-9 && (m[(0, 1)] - b).abs() < 1e-9 && (m[(1, 1)] - 2.0 * c).abs() < 1e-9);
            let x = u.grid.coord(i);
            let g = u.nodal_gradient(i).unwrap();
            prop_assert!((g[0] - (2.0 * a * x[0] + b * x[1] + d)).abs() < 1e-10);
        }
    }
}
