//! White-noise calibration from `J` fluctuations and the gradient-GFF
//! prediction for corrector functionals.

use nalgebra::DMatrix;

use crate::coeff::{sample_field, CoefficientField, SamplerSpec};
use crate::error::{ensure_same_grid, Error, Result};
use crate::jfunc::{evaluate, moments, SolutionBasis};
use crate::kernel::{HeatKernelMask, MaskBoundary};
use crate::lattice::{div, grad, DivergenceOperator, GridSpec, VectorField, MAX_DIM};
use crate::solve::{build_corrector_set, ConstPoisson, SolverOptions};
use crate::stats::{covariance, run_ensemble};

/// The `ā`-orthogonal projection onto discrete gradients,
/// `F ↦ ∇(-∇·ā∇)⁻¹(-∇·āF)`.
pub struct HelmholtzProjector {
    abar: DMatrix<f64>,
    inverse: DMatrix<f64>,
    op: DivergenceOperator,
    poisson: ConstPoisson,
}

impl HelmholtzProjector {
    pub fn new(grid: GridSpec, abar: &DMatrix<f64>) -> Result<Self> {
        let field = CoefficientField::uniform(grid, abar)?;
        Ok(Self {
            abar: abar.clone(),
            inverse: abar.clone().try_inverse().ok_or(Error::NotSpd)?,
            op: DivergenceOperator::new(&field),
            poisson: ConstPoisson::new(grid, abar)?,
        })
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    pub fn project(&mut self, f: &VectorField) -> Result<VectorField> {
        let mut rhs = div(&self.op.flux(f)?);
        rhs.values_mut().iter_mut().for_each(|v| *v = -*v);
        Ok(grad(&self.poisson.solve(&rhs)?))
    }

    /// `F ↦ P(ā⁻¹F)`, the map taking a test field to the white-noise side of
    /// the covariance pairing.
    pub fn transfer(&mut self, f: &VectorField) -> Result<VectorField> {
        let scaled = apply_matrix(&self.inverse, f);
        self.project(&scaled)
    }
}

/// Pointwise `M F`, mixing the edge components of each site.
fn apply_matrix(m: &DMatrix<f64>, f: &VectorField) -> VectorField {
    let grid = *f.grid();
    let d = grid.dim();
    let mut out = VectorField::zeros(grid);
    for i in 0..d {
        for j in 0..d {
            let mij = m[(i, j)];
            if mij == 0.0 {
                continue;
            }
            let src = f.component(j).to_vec();
            for (o, s) in out.component_mut(i).iter_mut().zip(src) {
                *o += mij * s;
            }
        }
    }
    out
}

pub fn helmholtz_project(f: &VectorField, abar: &DMatrix<f64>) -> Result<VectorField> {
    HelmholtzProjector::new(*f.grid(), abar)?.project(f)
}

/// `(p, q)` directions for the white-noise covariance.
///
/// For a direction `e`, pairs `(s e_k, s(e_k ∓ e))` give `V(·, e)` through
/// `e_k·V = (1/2s²)[W(s e_k, s(e_k - e)) - W(s e_k, s(e_k + e))]`. Diagonal
/// pairs `(p, p)` follow.
#[derive(Clone, Debug, PartialEq)]
pub struct PqBasis {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub direction: Vec<f64>,
    pub scale: f64,
    dim: usize,
}

impl PqBasis {
    /// Uses `s = 1/2`, so every `|q| ≤ 1` for unit `e`.
    pub fn for_direction(e: &[f64]) -> Self {
        let d = e.len();
        let s = 0.5;
        let unit = |k: usize| -> Vec<f64> { (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect() };
        let mut pairs = Vec::new();
        for k in 0..d {
            let p: Vec<f64> = unit(k).iter().map(|v| s * v).collect();
            for sign in [-1.0, 1.0] {
                let q: Vec<f64> = (0..d).map(|i| s * (unit(k)[i] + sign * e[i])).collect();
                pairs.push((p.clone(), q));
            }
        }
        for k in 0..d {
            let p: Vec<f64> = unit(k).iter().map(|v| s * v).collect();
            pairs.push((p.clone(), p));
        }
        for k in 0..d {
            for l in (k + 1)..d {
                let p: Vec<f64> = (0..d)
                    .map(|i| if i == k || i == l { s / 2f64.sqrt() } else { 0.0 })
                    .collect();
                pairs.push((p.clone(), p));
            }
        }
        Self {
            pairs,
            direction: e.to_vec(),
            scale: s,
            dim: d,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn v_index(&self, k: usize, plus: bool) -> usize {
        2 * k + usize::from(plus)
    }

    pub fn diagonal_indices(&self) -> std::ops::Range<usize> {
        2 * self.dim..self.pairs.len()
    }

    pub fn off_diagonal_indices(&self) -> std::ops::Range<usize> {
        0..2 * self.dim
    }
}

/// `(8π)^{-d/2} det(ā)^{-1/2}`, the value of `r^d ∫Φ_r²` in the continuum.
pub fn heat_kernel_l2_mass(abar: &DMatrix<f64>) -> f64 {
    let d = abar.nrows() as f64;
    (8.0 * std::f64::consts::PI).powf(-0.5 * d) * abar.determinant().powf(-0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QEstimate {
    pub basis: PqBasis,
    /// Covariance of `r^{d/2} Ĵ` over the basis pairs.
    pub raw_covariance: DMatrix<f64>,
    /// White-noise intensity: `raw / (r^d h^d Σ w²)`.
    pub q: DMatrix<f64>,
    pub r_cal: f64,
    /// `r^d h^d Σ w²` of the calibration mask.
    pub mask_l2: f64,
    pub n_samples: usize,
}

impl QEstimate {
    /// `samples[k]` holds `r^{d/2} Ĵ(0, r, p_i, q_i)` for every pair of
    /// `basis`, for one seed.
    pub fn from_samples(basis: PqBasis, samples: &[Vec<f64>], mask: &HeatKernelMask) -> Result<Self> {
        if samples.len() < 20 {
            return Err(Error::TooFewSamples {
                needed: 20,
                got: samples.len(),
            });
        }
        let raw = covariance(samples)?;
        let r = mask.radius();
        let mask_l2 = r.powi(mask.grid().dim() as i32) * mask.l2_mass();
        Ok(Self {
            basis,
            q: &raw / mask_l2,
            raw_covariance: raw,
            r_cal: r,
            mask_l2,
            n_samples: samples.len(),
        })
    }

    /// `d×d` covariance of the vector white noise `V(·, e)`.
    pub fn vector_noise(&self) -> DMatrix<f64> {
        let d = self.basis.dim;
        let s = self.basis.scale;
        let c = 1.0 / (4.0 * s.powi(4));
        DMatrix::from_fn(d, d, |k, l| {
            let (km, kp) = (self.basis.v_index(k, false), self.basis.v_index(k, true));
            let (lm, lp) = (self.basis.v_index(l, false), self.basis.v_index(l, true));
            c * (self.q[(km, lm)] - self.q[(km, lp)] - self.q[(kp, lm)] + self.q[(kp, lp)])
        })
    }
}

/// Per-seed vector `r^{d/2} Ĵ(z, r, p_i, q_i)`.
pub fn scaled_j_vector(basis: &SolutionBasis, abar: &DMatrix<f64>, mask: &HeatKernelMask, pq: &PqBasis) -> Result<Vec<f64>> {
    let m = moments(basis, mask)?;
    let scale = mask.radius().powf(0.5 * basis.grid().dim() as f64);
    pq.pairs
        .iter()
        .map(|(p, q)| Ok(scale * evaluate(&m, abar, p, q)?.centered))
        .collect()
}

/// Full calibration run at `z = 0`; masks use `abar` and `boundary`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_q(
    spec: &SamplerSpec,
    grid: &GridSpec,
    seeds: &[u64],
    r_cal: f64,
    pq: &PqBasis,
    abar: &DMatrix<f64>,
    boundary: MaskBoundary,
    opts: &SolverOptions,
    workers: usize,
) -> Result<QEstimate> {
    if seeds.len() < 20 {
        return Err(Error::TooFewSamples {
            needed: 20,
            got: seeds.len(),
        });
    }
    let mask = boundary.build(grid, &vec![0.0; grid.dim()], r_cal, abar)?;
    let ensemble = run_ensemble(seeds, workers, |seed| {
        let a = sample_field(spec, grid, seed)?;
        let set = build_corrector_set(&a, opts)?;
        let basis = SolutionBasis::new(&a, &set)?;
        scaled_j_vector(&basis, abar, &mask, pq)
    })?;
    let samples: Vec<Vec<f64>> = ensemble.values().cloned().collect();
    QEstimate::from_samples(pq.clone(), &samples, &mask)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `∇b` for the Gaussian bump `b(y) = exp(-|y|²/2σ²)`.
    BumpGradient,
    /// `∇(y₁ b(y))`.
    DipoleGradient,
    /// `(-∂₂b, ∂₁b, 0, …)`, divergence free.
    Swirl,
    /// `b(y) e_1`.
    CoordinateBump,
}

/// Smooth test field `F(y)` in rescaled coordinates `y = (x - c)/r`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestFunctional {
    pub family: Family,
    pub width: f64,
    /// Center in lattice units.
    pub center: Vec<f64>,
}

/// Gaussian tails are treated as zero beyond this many widths.
const SUPPORT_WIDTHS: f64 = 6.0;

impl TestFunctional {
    pub fn new(family: Family, width: f64, center: &[f64]) -> Self {
        Self {
            family,
            width,
            center: center.to_vec(),
        }
    }

    pub fn eval(&self, y: &[f64]) -> [f64; MAX_DIM] {
        let s2 = self.width * self.width;
        let b = (-y.iter().map(|v| v * v).sum::<f64>() / (2.0 * s2)).exp();
        let mut out = [0.0; MAX_DIM];
        match self.family {
            Family::BumpGradient => {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = -v / s2 * b;
                }
            }
            Family::DipoleGradient => {
                for (k, (o, v)) in out.iter_mut().zip(y).enumerate() {
                    *o = -y[0] * v / s2 * b;
                    if k == 0 {
                        *o += b;
                    }
                }
            }
            Family::Swirl => {
                out[0] = y[1] / s2 * b;
                out[1] = -y[0] / s2 * b;
            }
            Family::CoordinateBump => out[0] = b,
        }
        out
    }

    /// Samples `F((x - c)/r)` on edge midpoints.
    pub fn sample(&self, grid: &GridSpec, r: f64) -> Result<VectorField> {
        let reach = SUPPORT_WIDTHS * self.width * r;
        if reach > 0.5 * grid.side() as f64 {
            return Err(Error::RadiusOutOfBounds {
                radius: reach,
                limit: 0.5 * grid.side() as f64,
            });
        }
        if self.center.len() != grid.dim() {
            return Err(Error::InvalidArgument("test functional center has the wrong dimension".into()));
        }
        let d = grid.dim();
        Ok(VectorField::from_fn(*grid, |x| {
            let disp = grid.displacement(x, &self.center);
            let y: Vec<f64> = disp[..d].iter().map(|v| v / r).collect();
            self.eval(&y)
        }))
    }
}

/// `r^{-d} h^d Σ_x (T F_r)·Q_V (T G_r)` with `T = P ā⁻¹`.
pub fn predict_corrector_cov(
    q_v: &DMatrix<f64>,
    projector: &mut HelmholtzProjector,
    f_sampled: &VectorField,
    g_sampled: &VectorField,
    r: f64,
) -> Result<f64> {
    ensure_same_grid(f_sampled.grid(), g_sampled.grid())?;
    let grid = *f_sampled.grid();
    let d = grid.dim();
    let sym = 0.5 * (q_v + q_v.transpose());
    let ev = sym.clone().symmetric_eigenvalues();
    if ev.min() < -1e-10 * ev.iter().map(|v| v.abs()).sum::<f64>() {
        return Err(Error::NotSpd);
    }
    if sym.amax() == 0.0 {
        return Ok(0.0);
    }
    let tf = projector.transfer(f_sampled)?;
    let tg = projector.transfer(g_sampled)?;
    let mut total = 0.0;
    for k in 0..d {
        for l in 0..d {
            let qkl = sym[(k, l)];
            total += qkl * tf.component(k).iter().zip(tg.component(l)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total * grid.cell_volume() * r.powi(-(d as i32)))
}

/// `r^{-d/2} h^d Σ_x F(x/r)·∇φ_e(x)`.
pub fn empirical_corrector_functional(grad_phi: &VectorField, f_sampled: &VectorField, r: f64) -> Result<f64> {
    ensure_same_grid(grad_phi.grid(), f_sampled.grid())?;
    let d = grad_phi.grid().dim();
    Ok(grad_phi.inner(f_sampled)? * r.powf(-0.5 * d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_mask;
    use crate::lattice::ScalarField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector_field(grid: GridSpec, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..grid.dim())
            .map(|_| (0..grid.num_sites()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        VectorField::from_components(grid, comps).unwrap()
    }

    fn max_diff(a: &VectorField, b: &VectorField) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn gradients_are_fixed_and_projection_is_idempotent() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let h = ScalarField::from_fn(grid, |x| (0.7 * x[0]).sin() * (0.3 * x[1]).cos() + (2.0 * std::f64::consts::PI * x[1] / 8.0).sin());
        let g = grad(&h);
        let p = helmholtz_project(&g, &DMatrix::identity(2, 2)).unwrap();
        assert!(max_diff(&p, &g) < 1e-9);
        for abar in [DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.1])] {
            let mut proj = HelmholtzProjector::new(grid, &abar).unwrap();
            let f = random_vector_field(grid, 3);
            let pf = proj.project(&f).unwrap();
            let ppf = proj.project(&pf).unwrap();
            assert!(max_diff(&pf, &ppf) < 1e-9);
            // ā-orthogonality of the decomposition
            let mut rest = f.clone();
            rest.axpy(-1.0, &pf).unwrap();
            let field = CoefficientField::uniform(grid, &abar).unwrap();
            let flux_rest = DivergenceOperator::new(&field).flux(&rest).unwrap();
            assert!(pf.inner(&flux_rest).unwrap().abs() < 1e-9 * f.l2_norm() * f.l2_norm());
        }
    }

    #[test]
    fn solenoidal_fields_project_to_zero() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi: Vec<f64> = (0..grid.num_sites()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inv_h = 1.0 / grid.spacing();
        let mut f = VectorField::zeros(grid);
        for x in 0..grid.num_sites() {
            f.component_mut(0)[x] = (psi[x] - psi[grid.neighbor(x, 1, false)]) * inv_h;
            f.component_mut(1)[x] = -(psi[x] - psi[grid.neighbor(x, 0, false)]) * inv_h;
        }
        assert!(div(&f).values().iter().all(|v| v.abs() < 1e-12));
        let p = helmholtz_project(&f, &DMatrix::identity(2, 2)).unwrap();
        assert!(p.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn prediction_trivial_cases() {
        let grid = GridSpec::new(2, 2, 32).unwrap();
        let mut proj = HelmholtzProjector::new(grid, &DMatrix::identity(2, 2)).unwrap();
        let swirl = TestFunctional::new(Family::Swirl, 1.0, &[16.0, 16.0]).sample(&grid, 2.0).unwrap();
        let bump = TestFunctional::new(Family::BumpGradient, 1.0, &[16.0, 16.0]).sample(&grid, 2.0).unwrap();
        let qv = DMatrix::identity(2, 2) * 0.7;
        // sampled swirl is only discretely solenoidal up to O(h²)
        let solenoidal = predict_corrector_cov(&qv, &mut proj, &swirl, &swirl, 2.0).unwrap();
        let gradient = predict_corrector_cov(&qv, &mut proj, &bump, &bump, 2.0).unwrap();
        assert!(solenoidal < 1e-2 * gradient);
        assert_eq!(predict_corrector_cov(&DMatrix::zeros(2, 2), &mut proj, &bump, &bump, 2.0).unwrap(), 0.0);
        let fg = predict_corrector_cov(&qv, &mut proj, &bump, &swirl, 2.0).unwrap();
        let gf = predict_corrector_cov(&qv, &mut proj, &swirl, &bump, 2.0).unwrap();
        assert!((fg - gf).abs() < 1e-12);
        assert!(predict_corrector_cov(&(-qv), &mut proj, &bump, &bump, 2.0).is_err());
    }

    #[test]
    fn isotropic_prediction_matches_bump_quadrature() {
        // ā = Id, Q_V = q0 Id: prediction = q0 ∫|∇b|² = q0 π in d = 2
        let grid = GridSpec::new(2, 2, 64).unwrap();
        let mut proj = HelmholtzProjector::new(grid, &DMatrix::identity(2, 2)).unwrap();
        let q0 = 1.3;
        for (width, r) in [(1.0, 4.0), (0.5, 8.0)] {
            let f = TestFunctional::new(Family::BumpGradient, width, &[20.0, 30.0]).sample(&grid, r).unwrap();
            let pred = predict_corrector_cov(&(DMatrix::identity(2, 2) * q0), &mut proj, &f, &f, r).unwrap();
            // direct polar quadrature of |∇b|² = |y|²/σ⁴ exp(-|y|²/σ²)
            let n = 4000;
            let rmax = 10.0 * width;
            let dr = rmax / n as f64;
            let radial: f64 = (0..n)
                .map(|i| {
                    let rho = (i as f64 + 0.5) * dr;
                    2.0 * std::f64::consts::PI * rho * rho * rho / width.powi(4) * (-rho * rho / (width * width)).exp() * dr
                })
                .sum();
            assert!((radial - std::f64::consts::PI).abs() < 1e-6);
            assert!((pred / (q0 * radial) - 1.0).abs() < 1e-2, "{pred} vs {}", q0 * radial);
        }
    }

    #[test]
    fn functional_is_linear_and_vanishes_for_constant_fields() {
        let grid = GridSpec::new(2, 2, 16).unwrap();
        let g = random_vector_field(grid, 5);
        let f1 = TestFunctional::new(Family::BumpGradient, 1.0, &[8.0, 8.0]).sample(&grid, 1.0).unwrap();
        let f2 = TestFunctional::new(Family::CoordinateBump, 1.0, &[4.0, 8.0]).sample(&grid, 1.0).unwrap();
        let mut sum = f1.clone();
        sum.axpy(1.0, &f2).unwrap();
        let lhs = empirical_corrector_functional(&g, &sum, 1.0).unwrap();
        let rhs = empirical_corrector_functional(&g, &f1, 1.0).unwrap() + empirical_corrector_functional(&g, &f2, 1.0).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(empirical_corrector_functional(&VectorField::zeros(grid), &f1, 1.0).unwrap(), 0.0);
        assert!(TestFunctional::new(Family::Swirl, 1.0, &[8.0, 8.0]).sample(&grid, 2.0).is_err());
    }

    #[test]
    fn swirl_and_bump_have_equal_norm() {
        let grid = GridSpec::new(2, 2, 32).unwrap();
        let a = TestFunctional::new(Family::Swirl, 1.0, &[16.0, 16.0]).sample(&grid, 2.0).unwrap();
        let b = TestFunctional::new(Family::BumpGradient, 1.0, &[16.0, 16.0]).sample(&grid, 2.0).unwrap();
        assert!((a.l2_norm() / b.l2_norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pq_basis_layout_and_vector_noise() {
        let pq = PqBasis::for_direction(&[1.0, 0.0]);
        assert_eq!(pq.len(), 7);
        for (p, q) in &pq.pairs {
            assert!(p.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
            assert!(q.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
        }
        for i in pq.diagonal_indices() {
            assert_eq!(pq.pairs[i].0, pq.pairs[i].1);
        }
        // a W with covariance concentrated on one V component
        let mut q = DMatrix::zeros(7, 7);
        let (m, p) = (pq.v_index(1, false), pq.v_index(1, true));
        q[(m, m)] = 1.0;
        q[(p, p)] = 1.0;
        q[(m, p)] = -1.0;
        q[(p, m)] = -1.0;
        let est = QEstimate {
            basis: pq,
            raw_covariance: q.clone(),
            q,
            r_cal: 1.0,
            mask_l2: 1.0,
            n_samples: 20,
        };
        let qv = est.vector_noise();
        // (1/4s⁴)·4 = 16 at s = 1/2
        assert!((qv[(1, 1)] - 16.0).abs() < 1e-12 && qv[(0, 0)] == 0.0 && qv[(0, 1)] == 0.0);
    }

    #[test]
    fn constant_law_has_no_noise() {
        let grid = GridSpec::new(2, 2, 16).unwrap();
        let abar = DMatrix::identity(2, 2) * 2.0;
        let seeds: Vec<u64> = (0..20).collect();
        let pq = PqBasis::for_direction(&[1.0, 0.0]);
        let est = estimate_q(&SamplerSpec::scalar(2, 2.0), &grid, &seeds, 2.0, &pq, &abar, MaskBoundary::Truncated { cutoff_multiplier: 3.5 }, &SolverOptions::default(), 2).unwrap();
        assert!(est.q.amax() < 1e-20);
        assert!(estimate_q(&SamplerSpec::scalar(2, 2.0), &grid, &seeds[..5], 2.0, &pq, &abar, MaskBoundary::Periodic, &SolverOptions::default(), 1).is_err());
        // wide grid and cutoff so that truncation does not bias the L² mass
        let analytic = heat_kernel_l2_mass(&abar);
        let wide = GridSpec::new(2, 2, 64).unwrap();
        let mask = build_mask(&wide, &[0.0, 0.0], 2.0, &abar, 24.0).unwrap();
        assert!((4.0 * mask.l2_mass() / analytic - 1.0).abs() < 1e-3, "{}", 4.0 * mask.l2_mass() / analytic);
    }
}
