//! Periodic corrector solves and constant-coefficient Poisson inversion.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeff::{CoefficientField, SamplerSpec};
use crate::error::{ensure_same_grid, Error, Result};
use crate::fft::{mode_angles, PeriodicFft};
use crate::lattice::{add_backward_difference, dot, grad, read_planes, write_planes, DivergenceOperator, GridSpec, ScalarField, VectorField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Diagonal scaling.
    Jacobi,
    /// Exact inverse of the constant-coefficient operator built from the
    /// torus-mean of `a`, applied by FFT.
    #[default]
    Fourier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    /// Defaults to `50 N`.
    pub max_iterations: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: None,
            preconditioner: Preconditioner::default(),
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol <= 1e-4) {
            return Err(Error::InvalidArgument(format!("solver tolerance {} not in (0, 1e-4]", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    pub wall_time: f64,
    /// Best relative residual after each iteration (non-increasing).
    pub residual_history: Vec<f64>,
}

impl SolveReport {
    fn trivial() -> Self {
        Self {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
            wall_time: 0.0,
            residual_history: Vec::new(),
        }
    }
}

/// Inverse of `-div(abar grad)` on mean-zero fields, diagonalized by FFT.
pub struct ConstPoisson {
    fft: PeriodicFft,
    inverse_symbol: Vec<f64>,
}

impl ConstPoisson {
    pub fn new(grid: GridSpec, abar: &DMatrix<f64>) -> Result<Self> {
        check_spd(abar, grid.dim())?;
        let symbol = operator_symbol(&grid, abar);
        let inverse_symbol = symbol
            .iter()
            .enumerate()
            .map(|(i, &s)| if i == 0 { 0.0 } else { 1.0 / s })
            .collect();
        Ok(Self {
            fft: PeriodicFft::new(grid),
            inverse_symbol,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.fft.grid()
    }

    pub fn solve(&mut self, f: &ScalarField) -> Result<ScalarField> {
        ensure_same_grid(self.fft.grid(), f.grid())?;
        let values = f.values();
        let norm = (dot(values, values) / values.len() as f64).sqrt();
        let mean = f.mean();
        if mean.abs() > 1e-10 * norm {
            return Err(Error::NonzeroMean { mean, norm });
        }
        let mut out = ScalarField::zeros(*f.grid());
        if norm == 0.0 {
            return Ok(out);
        }
        self.apply(values, out.values_mut());
        Ok(out)
    }

    pub fn solve_pair(&mut self, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.fft.apply_real_multiplier_pair(f, g, &self.inverse_symbol)
    }

    pub(crate) fn apply(&mut self, f: &[f64], out: &mut [f64]) {
        self.fft.apply_real_multiplier(f, &self.inverse_symbol, out);
    }
}

fn check_spd(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::InvalidArgument(format!("expected a {dim}x{dim} matrix")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax() || m.clone().cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    Ok(())
}

/// Fourier symbol of the discrete constant-coefficient operator.
pub fn operator_symbol(grid: &GridSpec, abar: &DMatrix<f64>) -> Vec<f64> {
    let d = grid.dim();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    (0..grid.num_sites())
        .map(|k| {
            let theta = mode_angles(grid, k);
            let mut s = 0.0;
            for i in 0..d {
                s += abar[(i, i)] * 4.0 * (0.5 * theta[i]).sin().powi(2);
                for j in (0..d).filter(|&j| j != i) {
                    s += abar[(i, j)] * theta[i].sin() * theta[j].sin();
                }
            }
            s * inv_h2
        })
        .collect()
}

/// Mean-zero solution of `-div(abar grad u) = f` for constant `abar`.
pub fn solve_const_poisson(abar: &DMatrix<f64>, f: &ScalarField) -> Result<ScalarField> {
    ConstPoisson::new(*f.grid(), abar)?.solve(f)
}

/// Right-hand side `div(a e)` of the corrector equation for direction `e`.
pub fn corrector_rhs(op: &DivergenceOperator, e: &[f64]) -> Result<ScalarField> {
    let grid = *op.grid();
    let flux = op.flux(&VectorField::constant(grid, e))?;
    let mut out = ScalarField::zeros(grid);
    for axis in 0..grid.dim() {
        add_backward_difference(&grid, axis, flux.component(axis), out.values_mut(), 1.0 / grid.spacing());
    }
    Ok(out)
}

enum Precond {
    Jacobi(Vec<f64>),
    Fourier(Box<ConstPoisson>),
}

impl Precond {
    fn build(kind: Preconditioner, op: &DivergenceOperator, a: &CoefficientField) -> Result<Self> {
        Ok(match kind {
            Preconditioner::Jacobi => Precond::Jacobi(op.diagonal().iter().map(|v| 1.0 / v).collect()),
            Preconditioner::Fourier => Precond::Fourier(Box::new(ConstPoisson::new(*a.grid(), &a.mean_matrix())?)),
        })
    }

    fn apply(&mut self, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv.iter()) {
                    *zi = ri * di;
                }
            }
            Precond::Fourier(p) => p.apply(r, z),
        }
    }
}

/// Preconditioned conjugate gradients for `A x = f` on the mean-zero subspace.
fn pcg(
    op: &DivergenceOperator,
    precond: &mut Precond,
    f: &[f64],
    tol: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let n = f.len();
    let f_norm = dot(f, f).sqrt();
    if f_norm == 0.0 {
        return Ok((vec![0.0; n], SolveReport::trivial()));
    }
    let mut x = vec![0.0; n];
    let mut best = x.clone();
    let mut r = f.to_vec();
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut best_residual = 1.0;
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        op.apply_into(&p, &mut q, &mut scratch)?;
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let residual = dot(&r, &r).sqrt() / f_norm;
        if residual < best_residual {
            best_residual = residual;
            best.copy_from_slice(&x);
        }
        history.push(best_residual);
        if residual <= tol {
            break;
        }
        precond.apply(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let mean = best.iter().sum::<f64>() / n as f64;
    best.iter_mut().for_each(|v| *v -= mean);
    let report = SolveReport {
        iterations,
        relative_residual: best_residual,
        converged: best_residual <= tol,
        wall_time: start.elapsed().as_secs_f64(),
        residual_history: history,
    };
    Ok((best, report))
}

/// Mean-zero periodic corrector for direction `e`.
///
/// A run that hits the iteration limit still returns its best iterate with
/// `converged = false`.
pub fn solve_corrector(a: &CoefficientField, e: &[f64], opts: &SolverOptions) -> Result<(ScalarField, SolveReport)> {
    let op = DivergenceOperator::new(a);
    let mut precond = Precond::build(opts.preconditioner, &op, a)?;
    solve_with(&op, &mut precond, e, opts)
}

fn solve_with(
    op: &DivergenceOperator,
    precond: &mut Precond,
    e: &[f64],
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveReport)> {
    opts.validate()?;
    let grid = *op.grid();
    if e.len() != grid.dim() {
        return Err(Error::InvalidArgument(format!("direction has {} entries, expected {}", e.len(), grid.dim())));
    }
    let rhs = corrector_rhs(op, e)?;
    let max_it = opts.max_iterations.unwrap_or(50 * grid.points_per_axis());
    let (x, report) = pcg(op, precond, rhs.values(), opts.tol, max_it)?;
    Ok((ScalarField::from_values(grid, x)?, report))
}

/// Correctors `φ_{e_1}, …, φ_{e_d}` of one coefficient field with cached
/// gradients.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    grid: GridSpec,
    correctors: Vec<ScalarField>,
    gradients: Vec<VectorField>,
    reports: Vec<SolveReport>,
}

impl CorrectorSet {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn corrector(&self, i: usize) -> &ScalarField {
        &self.correctors[i]
    }

    pub fn gradient(&self, i: usize) -> &VectorField {
        &self.gradients[i]
    }

    pub fn reports(&self) -> &[SolveReport] {
        &self.reports
    }

    pub fn converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }

    pub fn total_iterations(&self) -> usize {
        self.reports.iter().map(|r| r.iterations).sum()
    }

    pub fn from_correctors(correctors: Vec<ScalarField>, reports: Vec<SolveReport>) -> Result<Self> {
        let grid = *correctors
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty corrector set".into()))?
            .grid();
        if correctors.len() != grid.dim() {
            return Err(Error::InvalidArgument(format!("need {} correctors", grid.dim())));
        }
        for c in &correctors {
            ensure_same_grid(&grid, c.grid())?;
        }
        let gradients = correctors.iter().map(grad).collect();
        Ok(Self {
            grid,
            correctors,
            gradients,
            reports,
        })
    }

    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        let planes: Vec<&[f64]> = self.correctors.iter().map(|c| c.values()).collect();
        write_planes(w, &self.grid, &planes)
    }

    /// One line per direction: iterations, final residual, converged.
    /// Wall time and residual history are not kept.
    fn reports_text(&self) -> String {
        self.reports
            .iter()
            .map(|r| format!("{} {:e} {}\n", r.iterations, r.relative_residual, r.converged))
            .collect()
    }

    fn with_reports_text(&self, text: &str) -> Option<Self> {
        let reports: Vec<SolveReport> = text
            .lines()
            .map(|line| {
                let mut it = line.split(' ');
                let report = SolveReport {
                    iterations: it.next()?.parse().ok()?,
                    relative_residual: it.next()?.parse().ok()?,
                    converged: it.next()?.parse().ok()?,
                    ..SolveReport::trivial()
                };
                Some(report)
            })
            .collect::<Option<_>>()?;
        if reports.len() != self.correctors.len() {
            return None;
        }
        Some(Self {
            reports,
            ..self.clone()
        })
    }

    /// Gradients are recomputed, so they match the original bitwise.
    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let (grid, planes) = read_planes(r)?;
        let correctors = planes
            .into_iter()
            .map(|p| ScalarField::from_values(grid, p))
            .collect::<Result<Vec<_>>>()?;
        let reports = vec![SolveReport::trivial(); correctors.len()];
        Self::from_correctors(correctors, reports)
    }
}

pub fn build_corrector_set(a: &CoefficientField, opts: &SolverOptions) -> Result<CorrectorSet> {
    let grid = *a.grid();
    let op = DivergenceOperator::new(a);
    let mut precond = Precond::build(opts.preconditioner, &op, a)?;
    let mut correctors = Vec::with_capacity(grid.dim());
    let mut reports = Vec::with_capacity(grid.dim());
    for i in 0..grid.dim() {
        let mut e = vec![0.0; grid.dim()];
        e[i] = 1.0;
        let (phi, report) = solve_with(&op, &mut precond, &e, opts)?;
        if !report.converged {
            log::warn!(
                "corrector e_{} did not converge: residual {:e} after {} iterations",
                i + 1,
                report.relative_residual,
                report.iterations
            );
        }
        correctors.push(phi);
        reports.push(report);
    }
    CorrectorSet::from_correctors(correctors, reports)
}

/// On-disk corrector cache: `<root>/<key>/<seed>/correctors.bin`, where `key`
/// hashes the sampler spec, grid and tolerance.
#[derive(Clone, Debug)]
pub struct CorrectorCache {
    root: PathBuf,
}

impl CorrectorCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(spec: &SamplerSpec, grid: &GridSpec, tol: f64) -> String {
        let canonical = format!("{spec:?}|{grid:?}|{:e}", tol);
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn path(&self, spec: &SamplerSpec, grid: &GridSpec, seed: u64, tol: f64) -> PathBuf {
        self.root
            .join(Self::key(spec, grid, tol))
            .join(seed.to_string())
            .join("correctors.bin")
    }

    pub fn load(&self, spec: &SamplerSpec, grid: &GridSpec, seed: u64, tol: f64) -> Option<CorrectorSet> {
        let path = self.path(spec, grid, seed, tol);
        let file = fs::File::open(&path).ok()?;
        match CorrectorSet::read_from(BufReader::new(file)) {
            Ok(set) if set.grid() == grid => match fs::read_to_string(path.with_file_name("reports.txt")) {
                Ok(text) => set.with_reports_text(&text).or(Some(set)),
                Err(_) => Some(set),
            },
            _ => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                None
            }
        }
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn store(&self, spec: &SamplerSpec, grid: &GridSpec, seed: u64, tol: f64, set: &CorrectorSet) -> Result<PathBuf> {
        let path = self.path(spec, grid, seed, tol);
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".correctors.{}.tmp", std::process::id()));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            set.write_to(&mut w)?;
            std::io::Write::flush(&mut w)?;
        }
        // solve metadata goes in first, so a visible correctors.bin always has it
        fs::write(path.with_file_name("reports.txt"), set.reports_text())?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Loads from the cache or solves and stores.
    pub fn get_or_solve(
        &self,
        spec: &SamplerSpec,
        a: &CoefficientField,
        seed: u64,
        opts: &SolverOptions,
    ) -> Result<CorrectorSet> {
        if let Some(set) = self.load(spec, a.grid(), seed, opts.tol) {
            return Ok(set);
        }
        let set = build_corrector_set(a, opts)?;
        if set.converged() {
            self.store(spec, a.grid(), seed, opts.tol, &set)?;
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::sample_field;
    use crate::lattice::apply_operator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_mean_zero(grid: GridSpec, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.num_sites()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = ScalarField::from_values(grid, v).unwrap();
        f.subtract_mean();
        f
    }

    fn residual(a: &CoefficientField, phi: &ScalarField, e: &[f64]) -> f64 {
        let op = DivergenceOperator::new(a);
        let rhs = corrector_rhs(&op, e).unwrap();
        let mut r = apply_operator(a, phi).unwrap();
        r.axpy(-1.0, &rhs).unwrap();
        r.l2_norm() / rhs.l2_norm()
    }

    #[test]
    fn constant_coefficients_give_zero_corrector() {
        let grid = GridSpec::new(2, 2, 4).unwrap();
        let spec = SamplerSpec::Constant {
            matrix: vec![vec![2.0, 0.3], vec![0.3, 1.5]],
        };
        let a = sample_field(&spec, &grid, 0).unwrap();
        let set = build_corrector_set(&a, &SolverOptions::default()).unwrap();
        for i in 0..2 {
            assert!(set.corrector(i).values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn laminate_corrector_matches_one_dimensional_profile() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let a = sample_field(&SamplerSpec::LaminateTwoPhase { a1: 1.0, a2: 5.0, axis: 0 }, &grid, 4).unwrap();
        // 1D oracle along axis 0: flux is constant, so ∂φ = ahom / c - 1
        let n = grid.points_per_axis();
        let alpha: Vec<f64> = (0..n).map(|i| a.entry_plane(0, 0)[i]).collect();
        let edge_c: Vec<f64> = (0..n)
            .map(|i| {
                let (l, r) = (alpha[i], alpha[(i + 1) % n]);
                2.0 * l * r / (l + r)
            })
            .collect();
        let harmonic = n as f64 / edge_c.iter().map(|c| 1.0 / c).sum::<f64>();
        let cell_harmonic = n as f64 / alpha.iter().map(|c| 1.0 / c).sum::<f64>();
        assert!((harmonic - cell_harmonic).abs() < 1e-12);
        for opts in [
            SolverOptions::with_tol(1e-10),
            SolverOptions {
                tol: 1e-10,
                max_iterations: None,
                preconditioner: Preconditioner::Jacobi,
            },
        ] {
            let (phi, report) = solve_corrector(&a, &[1.0, 0.0], &opts).unwrap();
            assert!(report.converged);
            let g = grad(&phi);
            for site in 0..grid.num_sites() {
                let i = grid.coords(site)[0];
                let expected = harmonic / edge_c[i] - 1.0;
                assert!((g.component(0)[site] - expected).abs() < 1e-7, "{site}");
                assert!(g.component(1)[site].abs() < 1e-7);
            }
            let (phi2, _) = solve_corrector(&a, &[0.0, 1.0], &opts).unwrap();
            assert!(phi2.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_contract() {
        let grid = GridSpec::new(2, 2, 16).unwrap();
        let spec = SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 };
        for seed in 0..3 {
            let a = sample_field(&spec, &grid, seed).unwrap();
            for pre in [Preconditioner::Fourier, Preconditioner::Jacobi] {
                let opts = SolverOptions {
                    tol: 1e-8,
                    max_iterations: None,
                    preconditioner: pre,
                };
                let (phi, report) = solve_corrector(&a, &[1.0, 0.0], &opts).unwrap();
                assert!(report.converged);
                assert!(report.relative_residual <= 1e-8);
                assert!(residual(&a, &phi, &[1.0, 0.0]) <= 1e-8 * 1.01);
                assert!(phi.mean().abs() < 1e-12);
                assert!(report.residual_history.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn corrector_is_linear_in_direction() {
        let grid = GridSpec::new(2, 2, 16).unwrap();
        let a = sample_field(&SamplerSpec::CheckerboardDiagUniform { lo: 1.0, hi: 10.0 }, &grid, 8).unwrap();
        let tol = 1e-8;
        let set = build_corrector_set(&a, &SolverOptions::with_tol(tol)).unwrap();
        let (direct, _) = solve_corrector(&a, &[1.0, 1.0], &SolverOptions::with_tol(tol)).unwrap();
        let mut sum = set.corrector(0).clone();
        sum.axpy(1.0, set.corrector(1)).unwrap();
        let mut diff = direct.clone();
        diff.axpy(-1.0, &sum).unwrap();
        assert!(diff.l2_norm() <= 10.0 * tol * direct.l2_norm());
    }

    #[test]
    fn corrector_minimizes_energy() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let a = sample_field(&SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 }, &grid, 1).unwrap();
        let op = DivergenceOperator::new(&a);
        let tol = 1e-8;
        let (phi, _) = solve_corrector(&a, &[1.0, 0.0], &SolverOptions::with_tol(tol)).unwrap();
        let energy = |psi: &ScalarField| {
            let mut g = grad(psi);
            g.axpy(1.0, &VectorField::constant(grid, &[1.0, 0.0])).unwrap();
            op.flux(&g).unwrap().inner(&g).unwrap()
        };
        let base = energy(&phi);
        for (amp, center) in [(0.3, [2.0, 2.0]), (-0.1, [5.5, 1.0])] {
            let bump = ScalarField::from_fn(grid, |x| {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                amp * (-r2).exp()
            });
            let mut psi = phi.clone();
            psi.axpy(1.0, &bump).unwrap();
            assert!(base <= energy(&psi) + 10.0 * tol);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let a = sample_field(&SamplerSpec::CheckerboardDiagUniform { lo: 1.0, hi: 10.0 }, &grid, 3).unwrap();
        let (x, _) = solve_corrector(&a, &[0.0, 1.0], &SolverOptions::default()).unwrap();
        let (y, _) = solve_corrector(&a, &[0.0, 1.0], &SolverOptions::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn non_convergence_is_reported() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let a = sample_field(&SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 }, &grid, 3).unwrap();
        let opts = SolverOptions {
            tol: 1e-10,
            max_iterations: Some(2),
            preconditioner: Preconditioner::Jacobi,
        };
        let (phi, report) = solve_corrector(&a, &[1.0, 0.0], &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 2);
        assert!(phi.values().iter().any(|v| *v != 0.0));
        assert!(solve_corrector(&a, &[1.0, 0.0], &SolverOptions::with_tol(1e-3)).is_err());
    }

    #[test]
    fn const_poisson_inverts_forward_operator() {
        for d in [2, 3] {
            let grid = GridSpec::new(d, 1, 6).unwrap();
            let spec = if d == 2 {
                SamplerSpec::Constant {
                    matrix: vec![vec![2.0, 0.4], vec![0.4, 1.2]],
                }
            } else {
                SamplerSpec::scalar(3, 1.7)
            };
            let abar_field = sample_field(&spec, &grid, 0).unwrap();
            let g = random_mean_zero(grid, 5);
            let f = apply_operator(&abar_field, &g).unwrap();
            let u = solve_const_poisson(&abar_field.mean_matrix(), &f).unwrap();
            let mut diff = u.clone();
            diff.axpy(-1.0, &g).unwrap();
            assert!(diff.l2_norm() <= 1e-10 * g.l2_norm());
        }
        let grid = GridSpec::new(2, 1, 4).unwrap();
        let zero = solve_const_poisson(&DMatrix::identity(2, 2), &ScalarField::zeros(grid)).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn const_poisson_single_mode() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let abar = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.5, 3.0]));
        let (k, l) = (3.0, 2.0);
        let h = grid.spacing();
        let big_l = grid.side() as f64;
        let f = ScalarField::from_fn(grid, |x| (2.0 * PI * (k * x[0] + l * x[1]) / big_l).cos());
        // symbol = (4/h^2) Σ abar_ii sin^2(π k_i h / L)
        let symbol = 4.0 / (h * h) * (1.5 * (PI * k * h / big_l).sin().powi(2) + 3.0 * (PI * l * h / big_l).sin().powi(2));
        let u = solve_const_poisson(&abar, &f).unwrap();
        for (ui, fi) in u.values().iter().zip(f.values()) {
            assert!((ui - fi / symbol).abs() < 1e-12);
        }
    }

    #[test]
    fn const_poisson_errors() {
        let grid = GridSpec::new(2, 1, 4).unwrap();
        let f = ScalarField::constant(grid, 1.0);
        assert!(matches!(
            solve_const_poisson(&DMatrix::identity(2, 2), &f),
            Err(Error::NonzeroMean { .. })
        ));
        let g = random_mean_zero(grid, 1);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(solve_const_poisson(&bad, &g), Err(Error::NotSpd)));
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let grid = GridSpec::new(2, 2, 8).unwrap();
        let spec = SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 };
        let a = sample_field(&spec, &grid, 2).unwrap();
        let opts = SolverOptions::default();
        let dir = tempfile::tempdir().unwrap();
        let cache = CorrectorCache::new(dir.path());
        let solved = cache.get_or_solve(&spec, &a, 2, &opts).unwrap();
        assert!(solved.total_iterations() > 0);
        let loaded = cache.get_or_solve(&spec, &a, 2, &opts).unwrap();
        assert_eq!(loaded.total_iterations(), solved.total_iterations());
        assert_eq!(loaded.reports()[1].relative_residual, solved.reports()[1].relative_residual);
        for i in 0..2 {
            assert_eq!(loaded.gradient(i), solved.gradient(i));
        }
        assert_ne!(CorrectorCache::key(&spec, &grid, 1e-8), CorrectorCache::key(&spec, &grid, 1e-9));
    }
}
