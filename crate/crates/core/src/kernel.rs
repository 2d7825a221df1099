//! Heat-kernel masks and the exponential weight `Ψ_R`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;

use crate::error::{ensure_same_grid, Error, Result};
use crate::fft::PeriodicFft;
use crate::lattice::{GridSpec, ScalarField, VectorField, MAX_DIM};

/// Standard radii kept by the default truncation.
pub const DEFAULT_CUTOFF_MULTIPLIER: f64 = 6.0;

pub fn default_cutoff(grid: &GridSpec, r: f64) -> f64 {
    cutoff_with_multiplier(grid, r, DEFAULT_CUTOFF_MULTIPLIER)
}

pub fn cutoff_with_multiplier(grid: &GridSpec, r: f64, multiplier: f64) -> f64 {
    (multiplier * r).min(0.5 * grid.side() as f64 - 1.0)
}

/// Continuum heat kernel of `∂_t - ∇·ā∇` at `(x, t)`.
pub fn heat_kernel(abar: &DMatrix<f64>, x: &[f64], t: f64) -> f64 {
    let d = abar.nrows();
    let inv = abar.clone().try_inverse().expect("abar must be invertible");
    let quad = quadratic_form(&inv, x);
    (4.0 * PI * t).powf(-0.5 * d as f64) * abar.determinant().powf(-0.5) * (-quad / (4.0 * t)).exp()
}

fn quadratic_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = m.nrows();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += x[i] * m[(i, j)] * x[j];
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskShape {
    /// `Φ(· - z, r²)` for the given matrix.
    HeatKernel { abar: DMatrix<f64> },
    /// `Φ(· - z, r²)` summed over all periodic images.
    PeriodicHeatKernel { abar: DMatrix<f64> },
    /// `exp(-|x - z| / R)`.
    Exponential,
}

/// Unit-mass weights on the torus ball of radius `cutoff` around `center`,
/// stored sparsely.
#[derive(Clone, Debug)]
pub struct HeatKernelMask {
    grid: GridSpec,
    center: [f64; MAX_DIM],
    radius: f64,
    cutoff: f64,
    shape: MaskShape,
    sites: Vec<usize>,
    weights: Vec<f64>,
}

/// Sites within torus distance `cutoff` of `center`, with displacements.
fn ball_sites(grid: &GridSpec, center: &[f64], cutoff: f64) -> Vec<(usize, [f64; MAX_DIM])> {
    let d = grid.dim();
    let n = grid.points_per_axis();
    let h = grid.spacing();
    let l = grid.side() as f64;
    // per axis: (coordinate, signed displacement) within the cutoff
    let axes: Vec<Vec<(usize, f64)>> = (0..d)
        .map(|axis| {
            (0..n)
                .filter_map(|k| {
                    let mut dx = (k as f64 * h - center[axis]).rem_euclid(l);
                    if dx >= 0.5 * l {
                        dx -= l;
                    }
                    (dx.abs() <= cutoff).then_some((k, dx))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut idx = [0usize; MAX_DIM];
    let total: usize = axes.iter().map(Vec::len).product();
    let cutoff2 = cutoff * cutoff;
    for _ in 0..total {
        let mut disp = [0.0; MAX_DIM];
        let mut site = 0;
        let mut r2 = 0.0;
        for axis in 0..d {
            let (k, dx) = axes[axis][idx[axis]];
            disp[axis] = dx;
            site += k * grid.stride(axis);
            r2 += dx * dx;
        }
        if r2 <= cutoff2 {
            out.push((site, disp));
        }
        for axis in 0..d {
            idx[axis] += 1;
            if idx[axis] < axes[axis].len() {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

impl HeatKernelMask {
    fn from_density(
        grid: GridSpec,
        center: &[f64],
        radius: f64,
        cutoff: f64,
        shape: MaskShape,
        density: impl Fn(&[f64]) -> f64,
    ) -> Self {
        let d = grid.dim();
        let mut c = [0.0; MAX_DIM];
        c[..d].copy_from_slice(&center[..d]);
        let (sites, mut weights): (Vec<usize>, Vec<f64>) = ball_sites(&grid, center, cutoff)
            .into_iter()
            .map(|(site, disp)| (site, density(&disp[..d])))
            .unzip();
        let mass = grid.cell_volume() * weights.iter().sum::<f64>();
        weights.iter_mut().for_each(|w| *w /= mass);
        Self {
            grid,
            center: c,
            radius,
            cutoff,
            shape,
            sites,
            weights,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn center(&self) -> &[f64] {
        &self.center[..self.grid.dim()]
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn shape(&self) -> &MaskShape {
        &self.shape
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// Normalized density values, aligned with `sites()`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_at(&self, site: usize) -> f64 {
        self.sites
            .iter()
            .position(|&s| s == site)
            .map_or(0.0, |k| self.weights[k])
    }

    /// `h^d Σ w`, equal to 1 up to roundoff.
    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.weights.iter().sum::<f64>()
    }

    /// `h^d Σ w²`, the discrete counterpart of `∫Φ²`.
    pub fn l2_mass(&self) -> f64 {
        self.grid.cell_volume() * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub(crate) fn average_slice(&self, values: &[f64]) -> f64 {
        let s: f64 = self.sites.iter().zip(&self.weights).map(|(&i, &w)| w * values[i]).sum();
        self.grid.cell_volume() * s
    }

    pub fn weighted_average(&self, f: &ScalarField) -> Result<f64> {
        ensure_same_grid(&self.grid, f.grid())?;
        Ok(self.average_slice(f.values()))
    }

    /// Componentwise average; every component is weighted at its base site.
    pub fn weighted_average_vector(&self, f: &VectorField) -> Result<Vec<f64>> {
        ensure_same_grid(&self.grid, f.grid())?;
        Ok((0..self.grid.dim()).map(|k| self.average_slice(f.component(k))).collect())
    }

    /// Dense copy of the weights over the whole torus.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.num_sites()];
        for (&s, &w) in self.sites.iter().zip(&self.weights) {
            out[s] = w;
        }
        out
    }
}

fn check_spd(abar: &DMatrix<f64>, dim: usize) -> Result<()> {
    if abar.nrows() != dim || abar.ncols() != dim {
        return Err(Error::InvalidArgument(format!("expected a {dim}x{dim} matrix")));
    }
    if (abar - abar.transpose()).amax() > 1e-12 * abar.amax() || abar.clone().cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    Ok(())
}

/// Truncated, renormalized heat-kernel mask `Φ_{z,r}` for `abar`.
pub fn build_mask(grid: &GridSpec, z: &[f64], r: f64, abar: &DMatrix<f64>, cutoff: f64) -> Result<HeatKernelMask> {
    let half = 0.5 * grid.side() as f64;
    if !(r > 0.0 && r <= 0.5 * half) {
        return Err(Error::RadiusOutOfBounds {
            radius: r,
            limit: 0.5 * half,
        });
    }
    if !(cutoff > 0.0 && cutoff <= half) {
        return Err(Error::RadiusOutOfBounds {
            radius: cutoff,
            limit: half,
        });
    }
    if z.len() != grid.dim() {
        return Err(Error::InvalidArgument("center dimension mismatch".into()));
    }
    check_spd(abar, grid.dim())?;
    let inv = abar.clone().try_inverse().ok_or(Error::NotSpd)?;
    let scale = 1.0 / (4.0 * r * r);
    Ok(HeatKernelMask::from_density(
        *grid,
        z,
        r,
        cutoff,
        MaskShape::HeatKernel { abar: abar.clone() },
        |x| (-quadratic_form(&inv, x) * scale).exp(),
    ))
}

/// Heat-kernel mask wrapped onto the torus: every site carries the sum of
/// `Φ(x - z + nL, r²)` over images `n`, so masks of different radii obey the
/// semigroup identity without truncation error. `cutoff()` is infinite.
pub fn build_periodic_mask(grid: &GridSpec, z: &[f64], r: f64, abar: &DMatrix<f64>) -> Result<HeatKernelMask> {
    let half = 0.5 * grid.side() as f64;
    if !(r > 0.0 && r <= 0.5 * half) {
        return Err(Error::RadiusOutOfBounds {
            radius: r,
            limit: 0.5 * half,
        });
    }
    if z.len() != grid.dim() {
        return Err(Error::InvalidArgument("center dimension mismatch".into()));
    }
    check_spd(abar, grid.dim())?;
    let d = grid.dim();
    let inv = abar.clone().try_inverse().ok_or(Error::NotSpd)?;
    let scale = 1.0 / (4.0 * r * r);
    let l = grid.side() as f64;
    // images further than 9 standard deviations contribute below 1e-17
    let sigma = r * (2.0 * abar.clone().symmetric_eigenvalues().max()).sqrt();
    let reach = (9.0 * sigma / l).ceil() as i64 + 1;
    let span = (2 * reach + 1) as usize;
    let images: Vec<[f64; MAX_DIM]> = (0..span.pow(d as u32))
        .map(|mut k| {
            let mut shift = [0.0; MAX_DIM];
            for s in shift.iter_mut().take(d) {
                *s = ((k % span) as i64 - reach) as f64 * l;
                k /= span;
            }
            shift
        })
        .collect();
    Ok(HeatKernelMask::from_density(
        *grid,
        z,
        r,
        f64::INFINITY,
        MaskShape::PeriodicHeatKernel { abar: abar.clone() },
        |x| {
            images
                .iter()
                .map(|shift| {
                    let y: Vec<f64> = (0..d).map(|a| x[a] + shift[a]).collect();
                    (-quadratic_form(&inv, &y) * scale).exp()
                })
                .sum()
        },
    ))
}

/// How heat-kernel masks are fitted to the torus.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskBoundary {
    /// Ball of radius `min(multiplier·r, L/2 - 1)`.
    Truncated { cutoff_multiplier: f64 },
    /// Sum over periodic images.
    Periodic,
}

impl Default for MaskBoundary {
    fn default() -> Self {
        Self::Truncated {
            cutoff_multiplier: DEFAULT_CUTOFF_MULTIPLIER,
        }
    }
}

impl MaskBoundary {
    pub fn build(&self, grid: &GridSpec, z: &[f64], r: f64, abar: &DMatrix<f64>) -> Result<HeatKernelMask> {
        match *self {
            Self::Truncated { cutoff_multiplier } => {
                build_mask(grid, z, r, abar, cutoff_with_multiplier(grid, r, cutoff_multiplier))
            }
            Self::Periodic => build_periodic_mask(grid, z, r, abar),
        }
    }
}

/// `Ψ_R(· - z)`, truncated at `L/2` and renormalized.
pub fn psi_mask(grid: &GridSpec, z: &[f64], big_r: f64) -> Result<HeatKernelMask> {
    if !(big_r > 0.0 && big_r.is_finite()) {
        return Err(Error::InvalidArgument(format!("psi radius {big_r} must be positive")));
    }
    if z.len() != grid.dim() {
        return Err(Error::InvalidArgument("center dimension mismatch".into()));
    }
    let cutoff = 0.5 * grid.side() as f64;
    Ok(HeatKernelMask::from_density(
        *grid,
        z,
        big_r,
        cutoff,
        MaskShape::Exponential,
        |x| (-x.iter().map(|v| v * v).sum::<f64>().sqrt() / big_r).exp(),
    ))
}

/// Mask averages at every lattice site at once, by periodic correlation.
pub struct MaskConvolver {
    fft: PeriodicFft,
    multiplier: Vec<Complex64>,
}

impl MaskConvolver {
    /// Uses the mask's weights as a kernel anchored at its center, which is
    /// expected to be a lattice site.
    pub fn new(mask: &HeatKernelMask) -> Self {
        let grid = *mask.grid();
        let mut fft = PeriodicFft::new(grid);
        // re-anchor to the origin: shift the kernel by the center site
        let z_site = grid.index(
            &mask
                .center()
                .iter()
                .map(|c| (c / grid.spacing()).round() as i64)
                .collect::<Vec<_>>(),
        );
        let zc = grid.coords(z_site);
        let mut kernel = vec![Complex64::default(); grid.num_sites()];
        for (&s, &w) in mask.sites().iter().zip(mask.weights()) {
            let c = grid.coords(s);
            let rel: Vec<i64> = (0..grid.dim()).map(|a| c[a] as i64 - zc[a] as i64).collect();
            kernel[grid.index(&rel)] = Complex64::new(w, 0.0);
        }
        fft.transform(&mut kernel, false);
        let hd = grid.cell_volume();
        let multiplier = kernel.into_iter().map(|k| k.conj() * hd).collect();
        Self { fft, multiplier }
    }

    pub fn grid(&self) -> &GridSpec {
        self.fft.grid()
    }

    /// `out[z] = h^d Σ_x w(x - z) f(x)`.
    pub fn average_all(&mut self, values: &[f64]) -> Vec<f64> {
        self.average_all_pair(values, values).0
    }

    /// Two real fields through one complex transform pair.
    pub fn average_all_pair(&mut self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid().num_sites();
        // packing trick needs a Hermitian multiplier; split it instead
        let mut fa: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.fft.transform(&mut fa, false);
        let grid = *self.grid();
        let mut out_a = vec![Complex64::default(); n];
        let mut out_b = vec![Complex64::default(); n];
        for k in 0..n {
            let kneg = negate_mode(&grid, k);
            let zk = fa[k];
            let zn = fa[kneg].conj();
            let ak = 0.5 * (zk + zn);
            let bk = Complex64::new(0.0, -0.5) * (zk - zn);
            out_a[k] = ak * self.multiplier[k];
            out_b[k] = bk * self.multiplier[k];
        }
        self.fft.transform(&mut out_a, true);
        self.fft.transform(&mut out_b, true);
        let scale = 1.0 / n as f64;
        (
            out_a.into_iter().map(|c| c.re * scale).collect(),
            out_b.into_iter().map(|c| c.re * scale).collect(),
        )
    }
}

fn negate_mode(grid: &GridSpec, k: usize) -> usize {
    let c = grid.coords(k);
    let neg: Vec<i64> = (0..grid.dim()).map(|a| -(c[a] as i64)).collect();
    grid.index(&neg)
}
