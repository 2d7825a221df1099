//! Random coefficient fields with unit range of dependence.
//!
//! Every unit cell draws its matrix from a ChaCha8 stream keyed by the sample
//! seed and selected by the cell's linear index, so the draw for one cell never
//! depends on any other cell or on the order of evaluation.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{read_planes, write_planes, GridSpec, MAX_DIM};

/// Position of `(i, j)` in the packed upper triangle, row-major.
pub fn packed_index(i: usize, j: usize, dim: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * dim - i + 1) / 2 + (j - i)
}

pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Law of a single unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// Deterministic matrix in every cell.
    Constant { matrix: Vec<Vec<f64>> },
    /// Diagonal matrix with i.i.d. entries uniform on `[lo, hi]`.
    CheckerboardDiagUniform { lo: f64, hi: f64 },
    /// `a1 Id` or `a2 Id` with probability 1/2 each.
    CheckerboardTwoPhase { a1: f64, a2: f64 },
    /// `a1 Id` or `a2 Id` per slab, constant in every direction except `axis`.
    LaminateTwoPhase { a1: f64, a2: f64, axis: usize },
}

impl SamplerSpec {
    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, value: f64) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { value } else { 0.0 }).collect())
            .collect();
        SamplerSpec::Constant { matrix }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            SamplerSpec::Constant { matrix } => {
                if matrix.len() != dim || matrix.iter().any(|row| row.len() != dim) {
                    return bad(format!("constant matrix must be {dim}x{dim}"));
                }
                let m = DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]);
                if (&m - m.transpose()).amax() > 1e-14 {
                    return bad("constant matrix must be symmetric".into());
                }
                let min = m.symmetric_eigenvalues().min();
                if min < 1.0 - 1e-12 {
                    return bad(format!("constant matrix has eigenvalue {min} < 1"));
                }
            }
            SamplerSpec::CheckerboardDiagUniform { lo, hi } => {
                if !(*lo >= 1.0 && hi >= lo && hi.is_finite()) {
                    return bad(format!("need 1 <= lo <= hi, got lo={lo} hi={hi}"));
                }
            }
            SamplerSpec::CheckerboardTwoPhase { a1, a2 } => {
                if !(*a1 >= 1.0 && *a2 >= 1.0 && a1.is_finite() && a2.is_finite()) {
                    return bad(format!("phases must be >= 1, got {a1}, {a2}"));
                }
            }
            SamplerSpec::LaminateTwoPhase { a1, a2, axis } => {
                if !(*a1 >= 1.0 && *a2 >= 1.0 && a1.is_finite() && a2.is_finite()) {
                    return bad(format!("phases must be >= 1, got {a1}, {a2}"));
                }
                if *axis >= dim {
                    return bad(format!("laminate axis {axis} out of range"));
                }
            }
        }
        Ok(())
    }

    /// Ellipticity upper bound `Λ` of the law.
    pub fn lambda(&self) -> f64 {
        match self {
            SamplerSpec::Constant { matrix } => {
                let d = matrix.len();
                DMatrix::from_fn(d, d, |i, j| matrix[i][j]).symmetric_eigenvalues().max()
            }
            SamplerSpec::CheckerboardDiagUniform { hi, .. } => *hi,
            SamplerSpec::CheckerboardTwoPhase { a1, a2 } | SamplerSpec::LaminateTwoPhase { a1, a2, .. } => {
                a1.max(*a2)
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            SamplerSpec::Constant { .. } => true,
            SamplerSpec::CheckerboardDiagUniform { lo, hi } => lo == hi,
            SamplerSpec::CheckerboardTwoPhase { a1, a2 } | SamplerSpec::LaminateTwoPhase { a1, a2, .. } => a1 == a2,
        }
    }

    /// Packed matrix of one unit cell.
    fn draw(&self, dim: usize, seed: u64, cell: &[usize], side: usize) -> [f64; 6] {
        let mut out = [0.0; 6];
        let set_diag = |out: &mut [f64; 6], v: f64| {
            for i in 0..dim {
                out[packed_index(i, i, dim)] = v;
            }
        };
        match self {
            SamplerSpec::Constant { matrix } => {
                for i in 0..dim {
                    for j in i..dim {
                        out[packed_index(i, j, dim)] = matrix[i][j];
                    }
                }
            }
            SamplerSpec::CheckerboardDiagUniform { lo, hi } => {
                let mut rng = cell_rng(seed, linear_cell(cell, dim, side));
                for i in 0..dim {
                    out[packed_index(i, i, dim)] = if lo == hi { *lo } else { rng.random_range(*lo..=*hi) };
                }
            }
            SamplerSpec::CheckerboardTwoPhase { a1, a2 } => {
                let mut rng = cell_rng(seed, linear_cell(cell, dim, side));
                set_diag(&mut out, if rng.random_bool(0.5) { *a1 } else { *a2 });
            }
            SamplerSpec::LaminateTwoPhase { a1, a2, axis } => {
                let mut rng = cell_rng(seed, cell[*axis] as u64);
                set_diag(&mut out, if rng.random_bool(0.5) { *a1 } else { *a2 });
            }
        }
        out
    }
}

fn linear_cell(cell: &[usize], dim: usize, side: usize) -> u64 {
    (0..dim).rev().fold(0u64, |acc, k| acc * side as u64 + cell[k] as u64)
}

/// Counter-based stream for one unit cell: key = seed, stream = cell.
fn cell_rng(seed: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    rng
}

/// Per-lattice-cell symmetric matrices, constant on unit cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    grid: GridSpec,
    lambda_max: f64,
    /// `d(d+1)/2` planes of `N^d` values, packed upper triangle order.
    entries: Vec<f64>,
}

impl CoefficientField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry_plane(&self, i: usize, j: usize) -> &[f64] {
        let n = self.grid.num_sites();
        let k = packed_index(i, j, self.grid.dim());
        &self.entries[k * n..(k + 1) * n]
    }

    pub fn has_off_diagonal(&self) -> bool {
        let d = self.grid.dim();
        (0..d).any(|i| (i + 1..d).any(|j| self.entry_plane(i, j).iter().any(|&v| v != 0.0)))
    }

    pub fn matrix_at(&self, site: usize) -> DMatrix<f64> {
        let d = self.grid.dim();
        DMatrix::from_fn(d, d, |i, j| self.entry_plane(i, j)[site])
    }

    /// Torus average of the matrix field.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let d = self.grid.dim();
        DMatrix::from_fn(d, d, |i, j| {
            let p = self.entry_plane(i, j);
            p.iter().sum::<f64>() / p.len() as f64
        })
    }

    /// Eigenvalues of every unit cell lie in `[1, Λ]`.
    pub fn check_ellipticity(&self) -> Result<()> {
        let n = self.grid.cells_per_unit();
        for site in 0..self.grid.num_sites() {
            let c = self.grid.coords(site);
            if c[..self.grid.dim()].iter().any(|&v| v % n != 0) {
                continue;
            }
            let eig = self.matrix_at(site).symmetric_eigenvalues();
            if eig.min() < 1.0 - 1e-12 || eig.max() > self.lambda_max * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "cell at {:?} has eigenvalues {} outside [1, {}]",
                    &c[..self.grid.dim()],
                    eig.transpose(),
                    self.lambda_max
                )));
            }
        }
        Ok(())
    }

    /// Spatially constant field. Only symmetry and positivity are required, so
    /// scaled copies of `ā` below the ellipticity floor are allowed.
    pub fn uniform(grid: GridSpec, matrix: &DMatrix<f64>) -> Result<Self> {
        let d = grid.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::InvalidArgument(format!("expected a {d}x{d} matrix")));
        }
        if (matrix - matrix.transpose()).amax() > 1e-12 * matrix.amax() || matrix.clone().cholesky().is_none() {
            return Err(Error::NotSpd);
        }
        let n = grid.num_sites();
        let mut entries = Vec::with_capacity(packed_len(d) * n);
        for i in 0..d {
            for j in i..d {
                entries.extend(std::iter::repeat_n(matrix[(i, j)], n));
            }
        }
        Ok(Self {
            grid,
            lambda_max: matrix.symmetric_eigenvalues().max(),
            entries,
        })
    }

    fn from_unit_cells(grid: GridSpec, lambda_max: f64, cells: &[[f64; 6]]) -> Self {
        let d = grid.dim();
        let m = packed_len(d);
        let n = grid.num_sites();
        let side = grid.side();
        let mut entries = vec![0.0; m * n];
        for site in 0..n {
            let uc = grid.unit_cell(site);
            let matrix = &cells[linear_cell(&uc, d, side) as usize];
            for k in 0..m {
                entries[k * n + site] = matrix[k];
            }
        }
        Self {
            grid,
            lambda_max,
            entries,
        }
    }

    fn unit_cell_matrices(&self) -> Vec<[f64; 6]> {
        let d = self.grid.dim();
        let m = packed_len(d);
        let n = self.grid.num_sites();
        let mut cells = vec![[0.0; 6]; self.grid.num_unit_cells()];
        for site in 0..n {
            let uc = self.grid.unit_cell(site);
            let slot = &mut cells[linear_cell(&uc, d, self.grid.side()) as usize];
            for (k, v) in slot.iter_mut().take(m).enumerate() {
                *v = self.entries[k * n + site];
            }
        }
        cells
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let n = self.grid.num_sites();
        let planes: Vec<&[f64]> = self.entries.chunks_exact(n).collect();
        write_planes(w, &self.grid, &planes)
    }

    /// `Λ` is recovered as the largest cell eigenvalue.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let (grid, planes) = read_planes(r)?;
        if planes.len() != packed_len(grid.dim()) {
            return Err(Error::Format(format!(
                "expected {} coefficient planes, found {}",
                packed_len(grid.dim()),
                planes.len()
            )));
        }
        let mut field = Self {
            grid,
            lambda_max: f64::INFINITY,
            entries: planes.concat(),
        };
        let d = grid.dim();
        field.lambda_max = field
            .unit_cell_matrices()
            .iter()
            .map(|c| DMatrix::from_fn(d, d, |i, j| c[packed_index(i, j, d)]).symmetric_eigenvalues().max())
            .fold(1.0, f64::max);
        Ok(field)
    }
}

pub fn sample_field(spec: &SamplerSpec, grid: &GridSpec, seed: u64) -> Result<CoefficientField> {
    let d = grid.dim();
    spec.validate(d)?;
    let side = grid.side();
    let cells: Vec<[f64; 6]> = (0..grid.num_unit_cells())
        .map(|k| {
            let cell = unit_cell_coords(k, d, side);
            spec.draw(d, seed, &cell[..d], side)
        })
        .collect();
    Ok(CoefficientField::from_unit_cells(*grid, spec.lambda(), &cells))
}

fn unit_cell_coords(k: usize, dim: usize, side: usize) -> [usize; MAX_DIM] {
    let mut out = [0; MAX_DIM];
    let mut rest = k;
    for c in out.iter_mut().take(dim) {
        *c = rest % side;
        rest /= side;
    }
    out
}

/// Keeps every unit cell whose center lies within torus distance `radius` of
/// `center` and redraws all others with `seed2`.
pub fn resample_outside(
    field: &CoefficientField,
    spec: &SamplerSpec,
    center: &[f64],
    radius: f64,
    seed2: u64,
) -> Result<CoefficientField> {
    let grid = *field.grid();
    let d = grid.dim();
    let side = grid.side();
    let half = 0.5 * side as f64;
    if radius >= (d as f64).sqrt() * half {
        return Ok(field.clone());
    }
    if radius > half || radius.is_nan() || radius < 0.0 {
        return Err(Error::RadiusOutOfBounds { radius, limit: half });
    }
    spec.validate(d)?;
    let mut cells = field.unit_cell_matrices();
    for (k, slot) in cells.iter_mut().enumerate() {
        let cell = unit_cell_coords(k, d, side);
        let mut mid = [0.0; MAX_DIM];
        for axis in 0..d {
            mid[axis] = cell[axis] as f64 + 0.5;
        }
        let disp = grid.displacement(&mid[..d], center);
        let dist = disp[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if dist > radius {
            *slot = spec.draw(d, seed2, &cell[..d], side);
        }
    }
    Ok(CoefficientField::from_unit_cells(grid, field.lambda_max.max(spec.lambda()), &cells))
}
