//! Per-seed probes. Each seed is solved once and reduced to small,
//! `ā`-free records (mask moments, additivity quadratics, oscillations and
//! corrector functionals); every analysis downstream works on those.

use std::time::Instant;

use homoglab::gffref::TestFunctional;
use homoglab::homog::{oscillation, sample_ahom_from_basis};
use homoglab::jfunc::{additivity_masks, additivity_quadratics, default_stride, moments, BulkMoments, JQuadratic, Moments, SolutionBasis};
use homoglab::kernel::{HeatKernelMask, MaskBoundary};
use homoglab::lattice::{ScalarField, VectorField};
use homoglab::solve::CorrectorCache;
use homoglab::stats::{run_ensemble, Ensemble};
use homoglab::{build_corrector_set, sample_field, CorrectorSet, GridSpec, SamplerSpec, SolverOptions};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// What to extract from every seed.
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub spec: SamplerSpec,
    pub grid: GridSpec,
    pub solver: SolverOptions,
    /// Shape matrix of every mask.
    pub mask_abar: DMatrix<f64>,
    pub boundary: MaskBoundary,
    /// Radii of the moments recorded at the origin.
    pub radii: Vec<f64>,
    /// Multipliers applied to `mask_abar`; moments are recorded for each.
    pub mask_scales: Vec<f64>,
    /// Inner radii `r` of the additivity defect, with `R = ratio·r`.
    pub additivity_radii: Vec<f64>,
    pub additivity_ratio: f64,
    pub oscillation_radii: Vec<f64>,
    pub functionals: Vec<TestFunctional>,
    pub functional_radius: f64,
    /// Corrector direction for oscillations and functionals.
    pub direction: Vec<f64>,
}

impl ProbeSpec {
    /// Bare probe: torus `ā` only.
    pub fn ahom_only(spec: SamplerSpec, grid: GridSpec, solver: SolverOptions) -> Self {
        let d = grid.dim();
        let mut direction = vec![0.0; d];
        direction[0] = 1.0;
        Self {
            spec,
            grid,
            solver,
            mask_abar: DMatrix::identity(d, d),
            boundary: MaskBoundary::Periodic,
            radii: Vec::new(),
            mask_scales: vec![1.0],
            additivity_radii: Vec::new(),
            additivity_ratio: 2.0,
            oscillation_radii: Vec::new(),
            functionals: Vec::new(),
            functional_radius: 1.0,
            direction,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub field_digest: String,
    pub converged: bool,
    pub torus_abar: DMatrix<f64>,
    /// `[scale][radius]` moments at the origin.
    pub moments: Vec<Vec<Moments>>,
    /// `(J(0,R), Σ w J(y,r))` per additivity radius.
    pub additivity: Vec<(JQuadratic, JQuadratic)>,
    pub oscillation: Vec<f64>,
    pub functionals: Vec<f64>,
}

/// Seed-independent state shared by all probes.
pub struct Prober {
    probe: ProbeSpec,
    masks: Vec<Vec<HeatKernelMask>>,
    additivity_masks: Vec<(HeatKernelMask, HeatKernelMask, Option<HeatKernelMask>)>,
    functional_fields: Vec<VectorField>,
    cache: Option<CorrectorCache>,
}

impl Prober {
    pub fn new(probe: ProbeSpec, cache: Option<CorrectorCache>) -> homoglab::Result<Self> {
        let grid = probe.grid;
        let origin = vec![0.0; grid.dim()];
        let mut masks = Vec::new();
        for &s in &probe.mask_scales {
            let shape = &probe.mask_abar * s;
            let row = probe
                .radii
                .iter()
                .map(|&r| probe.boundary.build(&grid, &origin, r, &shape))
                .collect::<homoglab::Result<Vec<_>>>()?;
            masks.push(row);
        }
        let additivity_masks = probe
            .additivity_radii
            .iter()
            .map(|&r| additivity_masks(&grid, &origin, probe.additivity_ratio * r, r, &probe.mask_abar, probe.boundary))
            .collect::<homoglab::Result<Vec<_>>>()?;
        let functional_fields = probe
            .functionals
            .iter()
            .map(|f| f.sample(&grid, probe.functional_radius))
            .collect::<homoglab::Result<Vec<_>>>()?;
        Ok(Self {
            probe,
            masks,
            additivity_masks,
            functional_fields,
            cache,
        })
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.probe
    }

    /// Mask of `radii[k]` shaped by `mask_scales[s]·mask_abar`.
    pub fn mask(&self, s: usize, k: usize) -> &HeatKernelMask {
        &self.masks[s][k]
    }

    pub fn functional_field(&self, k: usize) -> &VectorField {
        &self.functional_fields[k]
    }

    pub fn solve(&self, seed: u64) -> homoglab::Result<(homoglab::CoefficientField, CorrectorSet)> {
        let p = &self.probe;
        let a = sample_field(&p.spec, &p.grid, seed)?;
        let set = match &self.cache {
            Some(cache) => cache.get_or_solve(&p.spec, &a, seed, &p.solver)?,
            None => build_corrector_set(&a, &p.solver)?,
        };
        Ok((a, set))
    }

    pub fn record(&self, seed: u64) -> homoglab::Result<SampleRecord> {
        let started = Instant::now();
        let p = &self.probe;
        let grid = p.grid;
        let (a, set) = self.solve(seed)?;
        let basis = SolutionBasis::new(&a, &set)?;
        let moments_grid = self
            .masks
            .iter()
            .map(|row| row.iter().map(|m| moments(&basis, m)).collect::<homoglab::Result<Vec<_>>>())
            .collect::<homoglab::Result<Vec<_>>>()?;
        let mut additivity = Vec::with_capacity(self.additivity_masks.len());
        for (outer_mask, inner_mask, spread) in &self.additivity_masks {
            let outer = moments(&basis, outer_mask)?;
            let inner = BulkMoments::new(&basis, inner_mask)?;
            let stride = default_stride(&grid, inner_mask.radius());
            additivity.push(additivity_quadratics(&outer, &inner, spread.as_ref(), 0, stride)?);
        }
        let phi = directional_corrector(&set, &p.direction);
        let origin = vec![0.0; grid.dim()];
        let oscillation = p
            .oscillation_radii
            .iter()
            .map(|&r| oscillation(&phi, &origin, r))
            .collect::<homoglab::Result<Vec<_>>>()?;
        let grad_phi = directional_gradient(&set, &p.direction);
        let functionals = self
            .functional_fields
            .iter()
            .map(|f| homoglab::gffref::empirical_corrector_functional(&grad_phi, f, p.functional_radius))
            .collect::<homoglab::Result<Vec<_>>>()?;
        log::debug!(
            "seed {seed}: {} solver iterations, {:.2}s",
            set.total_iterations(),
            started.elapsed().as_secs_f64()
        );
        Ok(SampleRecord {
            seed,
            field_digest: basis.field_digest().to_string(),
            converged: set.converged(),
            torus_abar: sample_ahom_from_basis(&basis),
            moments: moments_grid,
            additivity,
            oscillation,
            functionals,
        })
    }

    pub fn run(&self, seeds: &[u64], workers: usize) -> homoglab::Result<Ensemble<SampleRecord>> {
        run_ensemble(seeds, workers, |seed| self.record(seed))
    }
}

/// `φ_e = Σ e_i φ_{e_i}`.
pub fn directional_corrector(set: &CorrectorSet, e: &[f64]) -> ScalarField {
    let mut phi = ScalarField::zeros(*set.grid());
    for (i, &w) in e.iter().enumerate() {
        if w != 0.0 {
            phi.axpy(w, set.corrector(i)).expect("corrector grids agree");
        }
    }
    phi
}

pub fn directional_gradient(set: &CorrectorSet, e: &[f64]) -> VectorField {
    let mut g = VectorField::zeros(*set.grid());
    for (i, &w) in e.iter().enumerate() {
        if w != 0.0 {
            g.axpy(w, set.gradient(i)).expect("corrector grids agree");
        }
    }
    g
}
