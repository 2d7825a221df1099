//! Homogenized matrix estimation and per-sample corrector statistics.

use nalgebra::{DMatrix, DVector};

use crate::coeff::{sample_field, CoefficientField, SamplerSpec};
use crate::error::{ensure_same_grid, Error, Result};
use crate::jfunc::{moments, Moments, SolutionBasis};
use crate::kernel::HeatKernelMask;
use crate::lattice::{GridSpec, ScalarField};
use crate::solve::{build_corrector_set, CorrectorSet, SolverOptions};
use crate::stats::run_ensemble;

/// Torus average of `a(e_i + ∇φ_{e_i})`, column `i` per direction.
pub fn sample_ahom(a: &CoefficientField, set: &CorrectorSet) -> Result<DMatrix<f64>> {
    let basis = SolutionBasis::new(a, set)?;
    Ok(sample_ahom_from_basis(&basis))
}

pub fn sample_ahom_from_basis(basis: &SolutionBasis) -> DMatrix<f64> {
    let d = basis.grid().dim();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        let f = basis.flux(i).mean();
        for k in 0..d {
            m[(k, i)] = f[k];
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AhomEstimate {
    /// Symmetrized ensemble mean.
    pub abar: DMatrix<f64>,
    /// Entrywise standard error of the mean.
    pub stderr: DMatrix<f64>,
    pub n_samples: usize,
    /// `max |M - Mᵀ| / 2` of the raw mean.
    pub asymmetry: f64,
}

impl AhomEstimate {
    pub fn from_samples(samples: &[DMatrix<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let d = samples[0].nrows();
        let mean = samples.iter().fold(DMatrix::zeros(d, d), |acc, m| acc + m) / n as f64;
        let var = samples
            .iter()
            .fold(DMatrix::zeros(d, d), |acc: DMatrix<f64>, m| acc + (m - &mean).map(|v| v * v))
            / (n as f64 - 1.0);
        let stderr = var.map(|v| (v / n as f64).sqrt());
        let asymmetry = 0.5 * (&mean - mean.transpose()).amax();
        if asymmetry > 5.0 * stderr.amax() && asymmetry > 1e-10 * mean.amax() {
            log::warn!("homogenized matrix asymmetry {asymmetry:e} exceeds 5 standard errors");
        }
        Ok(Self {
            abar: 0.5 * (&mean + mean.transpose()),
            stderr,
            n_samples: n,
            asymmetry,
        })
    }
}

/// Ensemble estimate over `seeds`; seeds whose solve fails are skipped.
pub fn estimate_ahom(
    spec: &SamplerSpec,
    grid: &GridSpec,
    seeds: &[u64],
    opts: &SolverOptions,
    workers: usize,
) -> Result<AhomEstimate> {
    let ensemble = run_ensemble(seeds, workers, |seed| {
        let a = sample_field(spec, grid, seed)?;
        let set = build_corrector_set(&a, opts)?;
        if !set.converged() {
            return Err(Error::InvalidArgument(format!("corrector solve for seed {seed} did not converge")));
        }
        sample_ahom(&a, &set)
    })?;
    let samples: Vec<DMatrix<f64>> = ensemble.values().cloned().collect();
    AhomEstimate::from_samples(&samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorStats {
    /// `avg ∇φ_e`.
    pub grad_avg: DVector<f64>,
    /// `avg a(e + ∇φ_e) - āe`.
    pub flux_dev: DVector<f64>,
    /// `avg ½(e + ∇φ_e)·a(e + ∇φ_e) - ½e·āe`.
    pub energy_dev: f64,
}

pub fn stats_from_moments(m: &Moments, abar: &DMatrix<f64>, e: &[f64]) -> Result<CorrectorStats> {
    let d = m.dim();
    if e.len() != d {
        return Err(Error::InvalidArgument(format!("direction has {} entries, expected {d}", e.len())));
    }
    let ev = DVector::from_column_slice(e);
    let grad_avg = m.grad.transpose() * &ev - &ev;
    let flux_dev = m.flux.transpose() * &ev - abar * &ev;
    let energy_dev = 0.5 * (ev.dot(&(&m.gram * &ev)) - ev.dot(&(abar * &ev)));
    Ok(CorrectorStats {
        grad_avg,
        flux_dev,
        energy_dev,
    })
}

pub fn corrector_stats(basis: &SolutionBasis, abar: &DMatrix<f64>, mask: &HeatKernelMask, e: &[f64]) -> Result<CorrectorStats> {
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("direction must be a unit vector, |e| = {norm}")));
    }
    stats_from_moments(&moments(basis, mask)?, abar, e)
}

/// Root-mean-square deviation of `φ` from its mean over the torus ball
/// `B_r(z)`.
pub fn oscillation(phi: &ScalarField, z: &[f64], r: f64) -> Result<f64> {
    let grid = phi.grid();
    if !(r > 0.0 && r <= 0.5 * grid.side() as f64) {
        return Err(Error::RadiusOutOfBounds {
            radius: r,
            limit: 0.5 * grid.side() as f64,
        });
    }
    let d = grid.dim();
    let values: Vec<f64> = (0..grid.num_sites())
        .filter(|&s| {
            let dx = grid.displacement(&grid.position(s), z);
            dx[..d].iter().map(|v| v * v).sum::<f64>() <= r * r
        })
        .map(|s| phi.values()[s])
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt())
}

/// Oscillation of every basis corrector, for fields already on a shared grid.
pub fn oscillations(set: &CorrectorSet, z: &[f64], r: f64) -> Result<Vec<f64>> {
    (0..set.grid().dim())
        .map(|i| {
            ensure_same_grid(set.grid(), set.corrector(i).grid())?;
            oscillation(set.corrector(i), z, r)
        })
        .collect()
}
