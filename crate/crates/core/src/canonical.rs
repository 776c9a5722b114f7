//! Reference functions and kernels used by the regularization checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::error::Result;
use crate::flatness::{FlatKernel, KernelParams, TableSpec};
use crate::grid::{Grid, SampledFunction};
use crate::hamiltonian::Hamiltonian;

/// `[-1, 1]` in 1D, `[0, 1]²` in 2D, with `cells` cells per axis.
pub fn domain(dim: usize, cells: usize) -> Result<Grid> {
    match dim {
        1 => Grid::cube(1, -1.0, 1.0, cells),
        _ => Grid::cube(2, 0.0, 1.0, cells),
    }
}

/// Affine, cone, sine and a seeded random Lipschitz function.
pub fn functions(grid: &Grid, seed: u64) -> Result<Vec<(String, SampledFunction)>> {
    let g = grid.clone();
    let mut out = Vec::new();
    if g.dim() == 1 {
        out.push((
            "affine".into(),
            SampledFunction::from_fn(g.clone(), |x| 0.5 * x[0] + 0.2)?,
        ));
        out.push((
            "cone".into(),
            SampledFunction::from_fn(g.clone(), |x| x[0].abs())?,
        ));
        out.push((
            "sine".into(),
            SampledFunction::from_fn(g.clone(), |x| (PI * x[0]).sin())?,
        ));
    } else {
        out.push((
            "affine".into(),
            SampledFunction::from_fn(g.clone(), |x| x[0] - 2.0 * x[1])?,
        ));
        out.push((
            "cone".into(),
            SampledFunction::from_fn(g.clone(), |x| {
                ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt()
            })?,
        ));
        out.push((
            "sine".into(),
            SampledFunction::from_fn(g.clone(), |x| (PI * x[0]).sin() * (PI * x[1]).sin())?,
        ));
    }
    out.push(("random_lipschitz".into(), random_lipschitz(&g, seed)?));
    Ok(out)
}

/// Piecewise-(bi)linear interpolation of uniform random values on a coarse
/// 8-cell lattice.
pub fn random_lipschitz(grid: &Grid, seed: u64) -> Result<SampledFunction> {
    const COARSE: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim();
    let m = COARSE + 1;
    let table: Vec<f64> = (0..m.pow(dim as u32))
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let (lo, hi) = (grid.lo().to_vec(), grid.hi().to_vec());
    SampledFunction::from_fn(grid.clone(), |x| {
        let loc: Vec<(usize, f64)> = (0..dim)
            .map(|k| {
                let s = (x[k] - lo[k]) / (hi[k] - lo[k]) * COARSE as f64;
                let i = (s.floor() as usize).min(COARSE - 1);
                (i, s - i as f64)
            })
            .collect();
        if dim == 1 {
            let (i, f) = loc[0];
            table[i] * (1.0 - f) + table[i + 1] * f
        } else {
            let ((i, fx), (j, fy)) = (loc[0], loc[1]);
            let at = |a: usize, b: usize| table[a + m * b];
            at(i, j) * (1.0 - fx) * (1.0 - fy)
                + at(i + 1, j) * fx * (1.0 - fy)
                + at(i, j + 1) * (1.0 - fx) * fy
                + at(i + 1, j + 1) * fx * fy
        }
    })
}

/// The classical kernel and the `p`-Dirichlet flat kernels for `p` in
/// `{1.2, 1.5, 1.8}`, sized for `grid`.
pub fn kernels(grid: &Grid) -> Result<Vec<(String, FlatKernel)>> {
    let d = grid.diam();
    let mut out = vec![(
        "classical".to_string(),
        FlatKernel::classical(d, &TableSpec::default())?,
    )];
    for p in [1.2, 1.5, 1.8] {
        let h = Hamiltonian::p_dirichlet(p, grid.dim())?;
        out.push((
            format!("flat_p{p}"),
            FlatKernel::build(&h, &KernelParams::new(d))?,
        ));
    }
    Ok(out)
}

pub const EPS_SEQUENCE: [f64; 3] = [0.2, 0.1, 0.05];
