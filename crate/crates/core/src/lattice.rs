//! Discrete calculus on the periodic lattice.
//!
//! Sites are indexed with axis 0 varying fastest. A scalar field holds one
//! value per site; a vector field holds, for each axis `i`, the value living on
//! the edge from `x` to `x + h e_i`. Gradients are forward differences and the
//! divergence is the matching backward difference, so that
//! `<grad u, F> = -<u, div F>` holds exactly up to roundoff.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::coeff::{packed_index, CoefficientField};
use crate::error::{ensure_same_grid, Error, Result};

pub const MAX_DIM: usize = 3;

/// Discretization of the torus `[0, L)^d` with `n` lattice cells per unit cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    cells_per_unit: usize,
    side: usize,
}

impl GridSpec {
    /// Experiments additionally require `side >= 4`; see [`GridSpec::check_experiment`].
    pub fn new(dim: usize, cells_per_unit: usize, side: usize) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in {{2, 3}}")));
        }
        if cells_per_unit == 0 || side == 0 {
            return Err(Error::InvalidGrid(format!(
                "cells_per_unit={cells_per_unit} and side={side} must be positive"
            )));
        }
        let points = cells_per_unit * side;
        if points.checked_pow(dim as u32).is_none_or(|n| n > (1usize << 31)) {
            return Err(Error::InvalidGrid(format!("{points}^{dim} sites is too large")));
        }
        Ok(Self {
            dim,
            cells_per_unit,
            side,
        })
    }

    pub fn check_experiment(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::InvalidGrid(format!(
                "torus side {} below the experiment minimum of 4 unit cells",
                self.side
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_unit(&self) -> usize {
        self.cells_per_unit
    }

    /// Torus side `L` in unit cells.
    pub fn side(&self) -> usize {
        self.side
    }

    /// `N = n L`.
    pub fn points_per_axis(&self) -> usize {
        self.cells_per_unit * self.side
    }

    pub fn num_sites(&self) -> usize {
        self.points_per_axis().pow(self.dim as u32)
    }

    /// Mesh spacing `h = 1/n` in unit-cell units.
    pub fn spacing(&self) -> f64 {
        1.0 / self.cells_per_unit as f64
    }

    /// `h^d`, the volume attached to one site.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        (self.side as f64).powi(self.dim as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.points_per_axis().pow(axis as u32)
    }

    pub fn coords(&self, index: usize) -> [usize; MAX_DIM] {
        let n = self.points_per_axis();
        let mut out = [0; MAX_DIM];
        let mut rest = index;
        for c in out.iter_mut().take(self.dim) {
            *c = rest % n;
            rest /= n;
        }
        out
    }

    /// Linear index of (wrapped) integer coordinates.
    pub fn index(&self, coords: &[i64]) -> usize {
        let n = self.points_per_axis() as i64;
        let mut idx = 0usize;
        for axis in (0..self.dim).rev() {
            idx = idx * n as usize + coords[axis].rem_euclid(n) as usize;
        }
        idx
    }

    pub fn neighbor(&self, index: usize, axis: usize, forward: bool) -> usize {
        let n = self.points_per_axis();
        let s = self.stride(axis);
        let c = (index / s) % n;
        match (forward, c) {
            (true, c) if c + 1 == n => index + s - n * s,
            (true, _) => index + s,
            (false, 0) => index + (n - 1) * s,
            (false, _) => index - s,
        }
    }

    /// Physical position of a site in unit-cell units.
    pub fn position(&self, index: usize) -> [f64; MAX_DIM] {
        let h = self.spacing();
        let c = self.coords(index);
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            out[axis] = c[axis] as f64 * h;
        }
        out
    }

    /// Coordinates of the unit cell containing a site.
    pub fn unit_cell(&self, index: usize) -> [usize; MAX_DIM] {
        let mut c = self.coords(index);
        for v in c.iter_mut().take(self.dim) {
            *v /= self.cells_per_unit;
        }
        c
    }

    pub fn num_unit_cells(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    /// Torus displacement `x - z` per axis, wrapped into `[-L/2, L/2)`.
    pub fn displacement(&self, x: &[f64], z: &[f64]) -> [f64; MAX_DIM] {
        let l = self.side as f64;
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            let mut d = (x[axis] - z[axis]).rem_euclid(l);
            if d >= 0.5 * l {
                d -= l;
            }
            out[axis] = d;
        }
        out
    }
}

/// Calls `f(line_start, next_line_start, len)` for every pair of adjacent
/// hyperplane slices along `axis`, including the periodic wraparound.
#[inline]
fn for_each_axis_pair(grid: &GridSpec, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = grid.points_per_axis();
    let s = grid.stride(axis);
    let block = s * n;
    let total = grid.num_sites();
    let mut base = 0;
    while base < total {
        for j in 0..n {
            let cur = base + j * s;
            let next = if j + 1 == n { base } else { cur + s };
            f(cur, next, s);
        }
        base += block;
    }
}

/// `dst[x] = scale * (src[x + e_axis] - src[x])`.
pub(crate) fn forward_difference(grid: &GridSpec, axis: usize, src: &[f64], dst: &mut [f64], scale: f64) {
    for_each_axis_pair(grid, axis, |cur, next, len| {
        for t in 0..len {
            dst[cur + t] = scale * (src[next + t] - src[cur + t]);
        }
    });
}

/// `dst[x] += scale * (src[x] - src[x - e_axis])`.
pub(crate) fn add_backward_difference(grid: &GridSpec, axis: usize, src: &[f64], dst: &mut [f64], scale: f64) {
    for_each_axis_pair(grid, axis, |prev, cur, len| {
        for t in 0..len {
            dst[cur + t] += scale * (src[cur + t] - src[prev + t]);
        }
    });
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.num_sites()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_sites() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                grid.num_sites(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every site position.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.num_sites())
            .map(|i| f(&grid.position(i)[..grid.dim()]))
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn subtract_mean(&mut self) {
        let m = self.mean();
        self.values.iter_mut().for_each(|v| *v -= m);
    }

    /// `h^d sum u v`.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        ensure_same_grid(&self.grid, &other.grid)?;
        Ok(self.grid.cell_volume() * dot(&self.values, &other.values))
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * dot(&self.values, &self.values)).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ScalarField) -> Result<()> {
        ensure_same_grid(&self.grid, &other.grid)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        write_planes(w, &self.grid, &[&self.values])
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (grid, mut planes) = read_planes(r)?;
        if planes.len() != 1 {
            return Err(Error::Format(format!("expected 1 component, found {}", planes.len())));
        }
        Ok(Self {
            grid,
            values: planes.pop().unwrap(),
        })
    }
}

/// Edge-based vector field: component `i` at site `x` lives on the edge
/// `(x, x + h e_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.dim() * grid.num_sites()],
        }
    }

    pub fn constant(grid: GridSpec, v: &[f64]) -> Self {
        let n = grid.num_sites();
        let mut values = Vec::with_capacity(grid.dim() * n);
        for &c in v.iter().take(grid.dim()) {
            values.extend(std::iter::repeat_n(c, n));
        }
        Self { grid, values }
    }

    pub fn from_components(grid: GridSpec, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim() || components.iter().any(|c| c.len() != grid.num_sites()) {
            return Err(Error::InvalidArgument("component count or length mismatch".into()));
        }
        Ok(Self {
            grid,
            values: components.concat(),
        })
    }

    /// Samples `f` at edge midpoints: component `i` is read at `x + h e_i / 2`.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> [f64; MAX_DIM]) -> Self {
        let d = grid.dim();
        let n = grid.num_sites();
        let half = 0.5 * grid.spacing();
        let mut values = vec![0.0; d * n];
        for idx in 0..n {
            let pos = grid.position(idx);
            for axis in 0..d {
                let mut p = pos;
                p[axis] += half;
                values[axis * n + idx] = f(&p[..d])[axis];
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.grid.num_sites();
        &self.values[axis * n..(axis + 1) * n]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        let n = self.grid.num_sites();
        &mut self.values[axis * n..(axis + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn inner(&self, other: &VectorField) -> Result<f64> {
        ensure_same_grid(&self.grid, &other.grid)?;
        Ok(self.grid.cell_volume() * dot(&self.values, &other.values))
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * dot(&self.values, &self.values)).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn axpy(&mut self, alpha: f64, other: &VectorField) -> Result<()> {
        ensure_same_grid(&self.grid, &other.grid)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Torus average of each component.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.grid.dim())
            .map(|k| {
                let c = self.component(k);
                c.iter().sum::<f64>() / c.len() as f64
            })
            .collect()
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let planes: Vec<&[f64]> = (0..self.grid.dim()).map(|k| self.component(k)).collect();
        write_planes(w, &self.grid, &planes)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (grid, planes) = read_planes(r)?;
        if planes.len() != grid.dim() {
            return Err(Error::Format(format!(
                "expected {} components, found {}",
                grid.dim(),
                planes.len()
            )));
        }
        Self::from_components(grid, planes)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn grad(u: &ScalarField) -> VectorField {
    let grid = u.grid;
    let inv_h = 1.0 / grid.spacing();
    let mut out = VectorField::zeros(grid);
    for axis in 0..grid.dim() {
        forward_difference(&grid, axis, &u.values, out.component_mut(axis), inv_h);
    }
    out
}

pub fn div(f: &VectorField) -> ScalarField {
    let grid = f.grid;
    let inv_h = 1.0 / grid.spacing();
    let mut out = ScalarField::zeros(grid);
    for axis in 0..grid.dim() {
        add_backward_difference(&grid, axis, f.component(axis), &mut out.values, inv_h);
    }
    out
}

/// Discrete divergence-form operator `u -> -div(a grad u)` for a fixed
/// coefficient field.
///
/// Diagonal couplings use the harmonic mean of `a_ii` over the two cells
/// sharing an edge. Off-diagonal couplings act on cell-centered gradients
/// `g_j(x) = (D_j u(x) + D_j u(x - e_j)) / 2` and are averaged back onto
/// edges, which keeps the operator symmetric.
#[derive(Clone, Debug)]
pub struct DivergenceOperator {
    grid: GridSpec,
    conductance: Vec<Vec<f64>>,
    off_diagonal: Option<Vec<f64>>,
}

impl DivergenceOperator {
    pub fn new(a: &CoefficientField) -> Self {
        let grid = *a.grid();
        let d = grid.dim();
        let mut conductance = Vec::with_capacity(d);
        for axis in 0..d {
            let diag = a.entry_plane(axis, axis);
            let mut c = vec![0.0; grid.num_sites()];
            for_each_axis_pair(&grid, axis, |cur, next, len| {
                for t in 0..len {
                    let (l, r) = (diag[cur + t], diag[next + t]);
                    c[cur + t] = 2.0 * l * r / (l + r);
                }
            });
            conductance.push(c);
        }
        let off_diagonal = a.has_off_diagonal().then(|| a.entries().to_vec());
        Self {
            grid,
            conductance,
            off_diagonal,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Edge conductance along `axis` for the edge starting at each site.
    pub fn conductance(&self, axis: usize) -> &[f64] {
        &self.conductance[axis]
    }

    /// `a ⊙ g` for an edge-based field `g`.
    pub fn flux(&self, g: &VectorField) -> Result<VectorField> {
        ensure_same_grid(&self.grid, g.grid())?;
        let d = self.grid.dim();
        let n = self.grid.num_sites();
        let mut out = VectorField::zeros(self.grid);
        for axis in 0..d {
            let c = &self.conductance[axis];
            let src = g.component(axis);
            let dst = out.component_mut(axis);
            for i in 0..n {
                dst[i] = c[i] * src[i];
            }
        }
        if let Some(entries) = &self.off_diagonal {
            self.add_off_diagonal_flux(entries, g, &mut out);
        }
        Ok(out)
    }

    fn add_off_diagonal_flux(&self, entries: &[f64], g: &VectorField, out: &mut VectorField) {
        let grid = self.grid;
        let d = grid.dim();
        let n = grid.num_sites();
        // cell-centered gradients
        let mut centered = vec![0.0; d * n];
        for j in 0..d {
            let gj = g.component(j);
            let cj = &mut centered[j * n..(j + 1) * n];
            for_each_axis_pair(&grid, j, |prev, cur, len| {
                for t in 0..len {
                    cj[cur + t] = 0.5 * (gj[cur + t] + gj[prev + t]);
                }
            });
        }
        let mut cell_flux = vec![0.0; n];
        for i in 0..d {
            cell_flux.iter_mut().for_each(|v| *v = 0.0);
            for j in (0..d).filter(|&j| j != i) {
                let aij = &entries[packed_index(i, j, d) * n..(packed_index(i, j, d) + 1) * n];
                let cj = &centered[j * n..(j + 1) * n];
                for x in 0..n {
                    cell_flux[x] += aij[x] * cj[x];
                }
            }
            let dst = out.component_mut(i);
            for_each_axis_pair(&grid, i, |cur, next, len| {
                for t in 0..len {
                    dst[cur + t] += 0.5 * (cell_flux[cur + t] + cell_flux[next + t]);
                }
            });
        }
    }

    /// `-div(a grad u)`.
    pub fn apply(&self, u: &ScalarField) -> Result<ScalarField> {
        let mut out = ScalarField::zeros(self.grid);
        let mut scratch = vec![0.0; self.grid.num_sites()];
        self.apply_into(u.values(), out.values_mut(), &mut scratch)?;
        Ok(out)
    }

    /// Allocation-light application used inside the solver.
    pub(crate) fn apply_into(&self, u: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        let grid = self.grid;
        let inv_h = 1.0 / grid.spacing();
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.off_diagonal.is_some() {
            let uf = ScalarField::from_values(grid, u.to_vec())?;
            let f = self.flux(&grad(&uf))?;
            for axis in 0..grid.dim() {
                add_backward_difference(&grid, axis, f.component(axis), out, -inv_h);
            }
            return Ok(());
        }
        for axis in 0..grid.dim() {
            forward_difference(&grid, axis, u, scratch, inv_h);
            let c = &self.conductance[axis];
            for (s, ci) in scratch.iter_mut().zip(c) {
                *s *= ci;
            }
            add_backward_difference(&grid, axis, scratch, out, -inv_h);
        }
        Ok(())
    }

    /// Diagonal of the operator matrix (Jacobi preconditioner).
    pub fn diagonal(&self) -> Vec<f64> {
        let grid = self.grid;
        let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
        let mut diag = vec![0.0; grid.num_sites()];
        for axis in 0..grid.dim() {
            let c = &self.conductance[axis];
            for_each_axis_pair(&grid, axis, |prev, cur, len| {
                for t in 0..len {
                    diag[cur + t] += inv_h2 * (c[cur + t] + c[prev + t]);
                }
            });
        }
        diag
    }
}

/// `-div(a ⊙ grad u)`.
pub fn apply_operator(a: &CoefficientField, u: &ScalarField) -> Result<ScalarField> {
    ensure_same_grid(a.grid(), u.grid())?;
    DivergenceOperator::new(a).apply(u)
}

/// Flux `a ⊙ g` of an edge-based field.
pub fn flux(a: &CoefficientField, g: &VectorField) -> Result<VectorField> {
    DivergenceOperator::new(a).flux(g)
}

const MAGIC: &[u8; 4] = b"HMGF";
const FORMAT_VERSION: u32 = 1;

/// Writes the binary field format: magic, version, d, n, L, component count
/// (all `u32` little-endian), then each component plane as `f64` little-endian
/// in site order.
pub fn write_planes(mut w: impl Write, grid: &GridSpec, planes: &[&[f64]]) -> Result<()> {
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        grid.dim() as u32,
        grid.cells_per_unit() as u32,
        grid.side() as u32,
        planes.len() as u32,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(8 * grid.num_sites());
    for plane in planes {
        if plane.len() != grid.num_sites() {
            return Err(Error::InvalidArgument("plane length does not match grid".into()));
        }
        buf.clear();
        for v in plane.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_planes(mut r: impl Read) -> Result<(GridSpec, Vec<Vec<f64>>)> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    if word(0) != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", word(0))));
    }
    let grid = GridSpec::new(word(1) as usize, word(2) as usize, word(3) as usize)?;
    let count = word(4) as usize;
    let n = grid.num_sites();
    let mut bytes = vec![0u8; 8 * n];
    let mut planes = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut bytes)?;
        planes.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last plane".into()));
    }
    Ok((grid, planes))
}
