//! The energy quantity `J(z, r, p, q)` at `k = 1`, coarsened coefficients and
//! the defect experiments built on it.
//!
//! With `∇ψ_i = e_i + ∇φ_{e_i}`, the sup over the solution space reduces to a
//! `d`-dimensional quadratic program: `J = ½ bᵀG⁻¹b` where
//! `G_ij = avg(∇ψ_i·a∇ψ_j)` and `b_i = -p·avg(a∇ψ_i) + avg(∇ψ_i)·āq`.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::coeff::{resample_outside, sample_field, CoefficientField, SamplerSpec};
use crate::error::{ensure_same_grid, Error, Result};
use crate::kernel::{HeatKernelMask, MaskBoundary, MaskConvolver};
use crate::lattice::{dot, DivergenceOperator, GridSpec, VectorField};
use crate::solve::{build_corrector_set, CorrectorSet, SolverOptions};

/// Evaluations abort above this Gram condition number.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Gradients `∇ψ_i` and fluxes `a∇ψ_i` of the affine-plus-corrector basis,
/// together with the pointwise densities whose mask averages make up
/// [`Moments`].
#[derive(Clone, Debug)]
pub struct SolutionBasis {
    grid: GridSpec,
    grads: Vec<VectorField>,
    fluxes: Vec<VectorField>,
    digest: String,
    // packed upper triangle over (i, j)
    energy: Vec<Vec<f64>>,
    l2: Vec<Vec<f64>>,
}

fn field_digest(a: &CoefficientField) -> String {
    let mut hasher = Sha256::new();
    for v in a.entries() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn pair_index(i: usize, j: usize, d: usize) -> usize {
    crate::coeff::packed_index(i, j, d)
}

fn edge_dot(grid: &GridSpec, u: &VectorField, v: &VectorField) -> Vec<f64> {
    let n = grid.num_sites();
    let mut out = vec![0.0; n];
    for k in 0..grid.dim() {
        for ((o, x), y) in out.iter_mut().zip(u.component(k)).zip(v.component(k)) {
            *o += x * y;
        }
    }
    out
}

impl SolutionBasis {
    pub fn new(a: &CoefficientField, correctors: &CorrectorSet) -> Result<Self> {
        let grid = *a.grid();
        ensure_same_grid(&grid, correctors.grid())?;
        let d = grid.dim();
        let op = DivergenceOperator::new(a);
        let mut grads = Vec::with_capacity(d);
        let mut fluxes = Vec::with_capacity(d);
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            let mut g = VectorField::constant(grid, &e);
            g.axpy(1.0, correctors.gradient(i))?;
            fluxes.push(op.flux(&g)?);
            grads.push(g);
        }
        let mut energy = Vec::new();
        let mut l2 = Vec::new();
        for i in 0..d {
            for j in i..d {
                let ij = edge_dot(&grid, &grads[i], &fluxes[j]);
                let ji = edge_dot(&grid, &grads[j], &fluxes[i]);
                energy.push(ij.iter().zip(&ji).map(|(x, y)| 0.5 * (x + y)).collect());
                l2.push(edge_dot(&grid, &grads[i], &grads[j]));
            }
        }
        Ok(Self {
            grid,
            grads,
            fluxes,
            digest: field_digest(a),
            energy,
            l2,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn gradient(&self, i: usize) -> &VectorField {
        &self.grads[i]
    }

    pub fn flux(&self, i: usize) -> &VectorField {
        &self.fluxes[i]
    }

    /// Short hash of the coefficient field the basis was built from.
    pub fn field_digest(&self) -> &str {
        &self.digest
    }

    /// Largest discrete curl `|D_k g_l - D_l g_k|` over all basis gradients.
    pub fn max_curl(&self) -> f64 {
        let grid = self.grid;
        let d = grid.dim();
        let inv_h = 1.0 / grid.spacing();
        let mut worst: f64 = 0.0;
        for g in &self.grads {
            for k in 0..d {
                for l in (k + 1)..d {
                    for x in 0..grid.num_sites() {
                        let dk_gl = (g.component(l)[grid.neighbor(x, k, true)] - g.component(l)[x]) * inv_h;
                        let dl_gk = (g.component(k)[grid.neighbor(x, l, true)] - g.component(k)[x]) * inv_h;
                        worst = worst.max((dk_gl - dl_gk).abs());
                    }
                }
            }
        }
        worst
    }

    /// Every density plane in a fixed order: energy pairs, L² pairs, then
    /// flux and gradient components.
    fn density_planes(&self) -> Vec<&[f64]> {
        let d = self.grid.dim();
        let mut planes: Vec<&[f64]> = Vec::new();
        planes.extend(self.energy.iter().map(Vec::as_slice));
        planes.extend(self.l2.iter().map(Vec::as_slice));
        for i in 0..d {
            for k in 0..d {
                planes.push(self.fluxes[i].component(k));
            }
        }
        for i in 0..d {
            for k in 0..d {
                planes.push(self.grads[i].component(k));
            }
        }
        planes
    }
}

/// Mask averages of the basis densities at one `(z, r)`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    /// `G_ij = avg(∇ψ_i·a∇ψ_j)`.
    pub gram: DMatrix<f64>,
    /// `H_ij = avg(∇ψ_i·∇ψ_j)`.
    pub l2_gram: DMatrix<f64>,
    /// Row `i` is `avg(a∇ψ_i)`.
    pub flux: DMatrix<f64>,
    /// Row `i` is `avg(∇ψ_i)`.
    pub grad: DMatrix<f64>,
}

impl Moments {
    fn from_averages(d: usize, avg: &[f64]) -> Self {
        let np = d * (d + 1) / 2;
        let sym = |offset: usize| DMatrix::from_fn(d, d, |i, j| avg[offset + pair_index(i, j, d)]);
        let rows = |offset: usize| DMatrix::from_fn(d, d, |i, k| avg[offset + i * d + k]);
        Self {
            gram: sym(0),
            l2_gram: sym(np),
            flux: rows(2 * np),
            grad: rows(2 * np + d * d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// Moments of the constant-coefficient basis `∇ψ_i = e_i`.
    pub fn constant(abar: &DMatrix<f64>) -> Self {
        let d = abar.nrows();
        Self {
            gram: abar.clone(),
            l2_gram: DMatrix::identity(d, d),
            flux: abar.transpose(),
            grad: DMatrix::identity(d, d),
        }
    }
}

pub fn moments(basis: &SolutionBasis, mask: &HeatKernelMask) -> Result<Moments> {
    ensure_same_grid(basis.grid(), mask.grid())?;
    let avg: Vec<f64> = basis.density_planes().iter().map(|p| mask.average_slice(p)).collect();
    Ok(Moments::from_averages(basis.grid.dim(), &avg))
}

/// Moments at every lattice site for one mask radius.
#[derive(Clone, Debug)]
pub struct BulkMoments {
    grid: GridSpec,
    radius: f64,
    planes: Vec<Vec<f64>>,
}

impl BulkMoments {
    /// `origin_mask` must be centered at a lattice site; it is translated to
    /// every site.
    pub fn new(basis: &SolutionBasis, origin_mask: &HeatKernelMask) -> Result<Self> {
        ensure_same_grid(basis.grid(), origin_mask.grid())?;
        Ok(Self::with_convolver(basis, &mut MaskConvolver::new(origin_mask), origin_mask.radius()))
    }

    pub fn with_convolver(basis: &SolutionBasis, conv: &mut MaskConvolver, radius: f64) -> Self {
        let src = basis.density_planes();
        let mut planes = Vec::with_capacity(src.len());
        for pair in src.chunks(2) {
            match pair {
                [a, b] => {
                    let (x, y) = conv.average_all_pair(a, b);
                    planes.push(x);
                    planes.push(y);
                }
                [a] => planes.push(conv.average_all(a)),
                _ => unreachable!(),
            }
        }
        Self {
            grid: basis.grid,
            radius,
            planes,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn at(&self, site: usize) -> Moments {
        let avg: Vec<f64> = self.planes.iter().map(|p| p[site]).collect();
        Moments::from_averages(self.grid.dim(), &avg)
    }

    /// `J(·, r, p, q)` at every site.
    pub fn j_field(&self, abar: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        (0..self.grid.num_sites())
            .map(|s| evaluate(&self.at(s), abar, p, q).map(|e| e.value))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JEvaluation {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub value: f64,
    /// `J - ½(q-p)·ā(q-p)`.
    pub centered: f64,
    /// Maximizer coefficients `c = G⁻¹b`.
    pub coeffs: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// `avg ∇v*` for the maximizer `v* = Σ c_i ψ_i`.
    pub grad_star: DVector<f64>,
    /// `avg a∇v*`.
    pub flux_star: DVector<f64>,
}

fn quad(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let d = m.nrows();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += x[i] * m[(i, j)] * y[j];
        }
    }
    s
}

fn check_direction(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::InvalidArgument(format!("direction has {} entries, expected {d}", v.len())));
    }
    Ok(())
}

/// Condition number of a symmetric matrix, infinite when not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if lo <= 0.0 { f64::INFINITY } else { hi / lo }
}

/// Solves the `d`-dimensional quadratic program from precomputed moments.
pub fn evaluate(m: &Moments, abar: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<JEvaluation> {
    let d = m.dim();
    check_direction(p, d)?;
    check_direction(q, d)?;
    let condition = condition_number(&m.gram);
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(Error::DegenerateGram { condition });
    }
    let aq: Vec<f64> = (0..d).map(|i| (0..d).map(|j| abar[(i, j)] * q[j]).sum()).collect();
    let linear = DVector::from_fn(d, |i, _| {
        let fi: Vec<f64> = (0..d).map(|k| m.flux[(i, k)]).collect();
        let gi: Vec<f64> = (0..d).map(|k| m.grad[(i, k)]).collect();
        -dot(p, &fi) + dot(&gi, &aq)
    });
    let chol = m.gram.clone().cholesky().ok_or(Error::DegenerateGram { condition })?;
    let coeffs = chol.solve(&linear);
    let value = 0.5 * coeffs.dot(&linear);
    let qp: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let centered = value - 0.5 * quad(abar, &qp, &qp);
    let grad_star = m.grad.transpose() * &coeffs;
    let flux_star = m.flux.transpose() * &coeffs;
    Ok(JEvaluation {
        p: p.to_vec(),
        q: q.to_vec(),
        value,
        centered,
        coeffs,
        gram: m.gram.clone(),
        linear,
        grad_star,
        flux_star,
    })
}

pub fn j_eval(basis: &SolutionBasis, abar: &DMatrix<f64>, mask: &HeatKernelMask, p: &[f64], q: &[f64]) -> Result<JEvaluation> {
    evaluate(&moments(basis, mask)?, abar, p, q)
}

/// The linear form `(p', q') ↦ -p'·f* + g*·āq'` carried by an evaluation.
pub fn gradient_form(e: &JEvaluation, abar: &DMatrix<f64>, p2: &[f64], q2: &[f64]) -> f64 {
    let d = e.p.len();
    let aq: Vec<f64> = (0..d).map(|i| (0..d).map(|j| abar[(i, j)] * q2[j]).sum()).collect();
    -dot(p2, e.flux_star.as_slice()) + dot(e.grad_star.as_slice(), &aq)
}

/// `|J(x+y) - J(x) - J(y) - ⟨∇J(x), y⟩|` from three evaluations sharing
/// `(z, r, field)`.
pub fn j_polarized(e1: &JEvaluation, e2: &JEvaluation, e12: &JEvaluation, abar: &DMatrix<f64>) -> Result<f64> {
    let sums_match = |a: &[f64], b: &[f64], ab: &[f64]| {
        a.iter().zip(b).zip(ab).all(|((x, y), s)| (x + y - s).abs() <= 1e-12 * (1.0 + s.abs()))
    };
    if e1.gram != e2.gram || e1.gram != e12.gram {
        return Err(Error::InvalidArgument("evaluations come from different masks or fields".into()));
    }
    if !sums_match(&e1.p, &e2.p, &e12.p) || !sums_match(&e1.q, &e2.q, &e12.q) {
        return Err(Error::InvalidArgument("third evaluation is not at the summed directions".into()));
    }
    Ok((e12.value - e1.value - e2.value - gradient_form(e1, abar, &e2.p, &e2.q)).abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMatrix {
    pub center: Vec<f64>,
    pub radius: f64,
    pub b_r: DMatrix<f64>,
    pub abar_r: DMatrix<f64>,
}

/// `p·b_r q = ½[Ĵ(p, p-q) - Ĵ(p, p+q)]` over the standard basis, symmetrized.
pub fn coarse_from_moments(m: &Moments, abar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.dim();
    let mut raw = DMatrix::zeros(d, d);
    for k in 0..d {
        let p: Vec<f64> = (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        for l in 0..d {
            let minus: Vec<f64> = (0..d).map(|i| p[i] - if i == l { 1.0 } else { 0.0 }).collect();
            let plus: Vec<f64> = (0..d).map(|i| p[i] + if i == l { 1.0 } else { 0.0 }).collect();
            let jm = evaluate(m, abar, &p, &minus)?.centered;
            let jp = evaluate(m, abar, &p, &plus)?.centered;
            raw[(k, l)] = 0.5 * (jm - jp);
        }
    }
    Ok(DMatrix::from_fn(d, d, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)])))
}

pub fn coarse_matrix(basis: &SolutionBasis, abar: &DMatrix<f64>, mask: &HeatKernelMask) -> Result<CoarseMatrix> {
    let b_r = coarse_from_moments(&moments(basis, mask)?, abar)?;
    Ok(CoarseMatrix {
        center: mask.center().to_vec(),
        radius: mask.radius(),
        abar_r: abar + &b_r,
        b_r,
    })
}

/// Largest `|avg((a - M)∇w)|` over mask-L²-normalized `w` in the basis span.
pub fn duality_from_moments(m: &Moments, reference: &DMatrix<f64>) -> Result<f64> {
    let d = m.dim();
    let condition = condition_number(&m.l2_gram);
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(Error::DegenerateGram { condition });
    }
    let chol = m.l2_gram.clone().cholesky().ok_or(Error::DegenerateGram { condition })?;
    // row i of D: avg(a∇ψ_i) - M avg(∇ψ_i)
    let defect = &m.flux - &m.grad * reference.transpose();
    let lower = chol.l();
    let scaled = lower
        .solve_lower_triangular(&defect)
        .ok_or(Error::DegenerateGram { condition })?;
    debug_assert_eq!(scaled.nrows(), d);
    Ok(scaled.singular_values().max())
}

pub fn duality_defect(basis: &SolutionBasis, reference: &DMatrix<f64>, mask: &HeatKernelMask) -> Result<f64> {
    duality_from_moments(&moments(basis, mask)?, reference)
}

/// Default sublattice stride (in lattice sites) for the inner sum of the
/// additivity defect.
pub fn default_stride(grid: &GridSpec, r: f64) -> usize {
    ((r / 4.0) / grid.spacing()).floor().max(1.0) as usize
}

/// Sublattice sites through `z_site` with stride `σ` inside the spreading
/// mask, and their weights renormalized to sum to one.
fn spread_weights(spread: &HeatKernelMask, z_site: usize, stride: usize) -> Vec<(usize, f64)> {
    let grid = *spread.grid();
    let zc = grid.coords(z_site);
    let stride = stride.max(1);
    let n = grid.points_per_axis();
    let kept: Vec<(usize, f64)> = spread
        .sites()
        .iter()
        .zip(spread.weights())
        .filter(|(&site, _)| {
            let c = grid.coords(site);
            (0..grid.dim()).all(|a| (c[a] + n - zc[a]) % stride == 0)
        })
        .map(|(&s, &w)| (s, w))
        .collect();
    let total: f64 = kept.iter().map(|(_, w)| w).sum();
    kept.into_iter().map(|(s, w)| (s, w / total)).collect()
}

fn check_radii(inner: &BulkMoments, spread: &HeatKernelMask) -> Result<()> {
    ensure_same_grid(&inner.grid, spread.grid())?;
    if !(spread.radius() >= 0.0) {
        return Err(Error::InvalidArgument("spreading radius must be nonnegative".into()));
    }
    Ok(())
}

/// `|J(z,R) - Σ_y w(y) J(y,r)|` with `w` the weights of the spreading mask
/// `Φ_{z,√(R²-r²)}` restricted to a stride-`σ` sublattice through `z` and
/// renormalized. `spread = None` stands for `R = r` (a single unit weight).
///
/// `outer` are the moments at `(z, R)` and `inner` the all-site moments at
/// radius `r`; `z_site` must be the lattice site of `z`.
#[allow(clippy::too_many_arguments)]
pub fn additivity_from_moments(
    outer: &Moments,
    inner: &BulkMoments,
    abar: &DMatrix<f64>,
    spread: Option<&HeatKernelMask>,
    z_site: usize,
    p: &[f64],
    q: &[f64],
    stride: usize,
) -> Result<f64> {
    let j_outer = evaluate(outer, abar, p, q)?.value;
    let Some(spread) = spread else {
        return Ok((j_outer - evaluate(&inner.at(z_site), abar, p, q)?.value).abs());
    };
    check_radii(inner, spread)?;
    let mut acc = 0.0;
    for (site, w) in spread_weights(spread, z_site, stride) {
        acc += w * evaluate(&inner.at(site), abar, p, q)?.value;
    }
    Ok((j_outer - acc).abs())
}

/// `J` as a quadratic form in `(p, āq)` with the coefficient matrix `ā`
/// left symbolic:
/// `J = ½[pᵀAp - 2pᵀB(āq) + (āq)ᵀC(āq)]`, `A = FᵀG⁻¹F`, `B = FᵀG⁻¹Γ`,
/// `C = ΓᵀG⁻¹Γ` with `F`, `Γ` the flux and gradient rows.
///
/// Weighted sums of these are again of this form, so ensemble records can
/// store them and apply an estimated `ā` afterwards.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl JQuadratic {
    pub fn zero(d: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            b: DMatrix::zeros(d, d),
            c: DMatrix::zeros(d, d),
        }
    }

    pub fn from_moments(m: &Moments) -> Result<Self> {
        let condition = condition_number(&m.gram);
        if !(condition <= MAX_GRAM_CONDITION) {
            return Err(Error::DegenerateGram { condition });
        }
        let chol = m.gram.clone().cholesky().ok_or(Error::DegenerateGram { condition })?;
        let gf = chol.solve(&m.flux);
        let gg = chol.solve(&m.grad);
        let ft = m.flux.transpose();
        let c = m.grad.transpose() * &gg;
        Ok(Self {
            a: &ft * gf,
            b: ft * gg,
            c: 0.5 * (&c + c.transpose()),
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `self += w·other`.
    pub fn add_scaled(&mut self, w: f64, other: &Self) {
        self.a += w * &other.a;
        self.b += w * &other.b;
        self.c += w * &other.c;
    }

    pub fn scaled(&self, w: f64) -> Self {
        Self {
            a: w * &self.a,
            b: w * &self.b,
            c: w * &self.c,
        }
    }

    pub fn value(&self, abar: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<f64> {
        let d = self.dim();
        check_direction(p, d)?;
        check_direction(q, d)?;
        let aq: Vec<f64> = (0..d).map(|i| (0..d).map(|j| abar[(i, j)] * q[j]).sum()).collect();
        Ok(0.5 * (quad(&self.a, p, p) - 2.0 * quad(&self.b, p, &aq) + quad(&self.c, &aq, &aq)))
    }
}

/// The two sides of the additivity defect as `ā`-free quadratics: the
/// outer `J(z,R)` and the renormalized sublattice average of `J(y,r)`.
pub fn additivity_quadratics(
    outer: &Moments,
    inner: &BulkMoments,
    spread: Option<&HeatKernelMask>,
    z_site: usize,
    stride: usize,
) -> Result<(JQuadratic, JQuadratic)> {
    let j_outer = JQuadratic::from_moments(outer)?;
    let Some(spread) = spread else {
        return Ok((j_outer, JQuadratic::from_moments(&inner.at(z_site))?));
    };
    check_radii(inner, spread)?;
    let mut acc = JQuadratic::zero(outer.dim());
    for (site, w) in spread_weights(spread, z_site, stride) {
        acc.add_scaled(w, &JQuadratic::from_moments(&inner.at(site))?);
    }
    Ok((j_outer, acc))
}

/// Masks for the additivity defect at `(z, R)` over radius `r`: outer,
/// origin-anchored inner, and spreading (`None` when `R = r`).
pub fn additivity_masks(
    grid: &GridSpec,
    z: &[f64],
    big_r: f64,
    r: f64,
    abar: &DMatrix<f64>,
    boundary: MaskBoundary,
) -> Result<(HeatKernelMask, HeatKernelMask, Option<HeatKernelMask>)> {
    let half = 0.5 * grid.side() as f64;
    if !(r > 0.0 && r <= big_r && big_r <= 0.5 * half) {
        return Err(Error::RadiusOutOfBounds { radius: big_r, limit: 0.5 * half });
    }
    let outer = boundary.build(grid, z, big_r, abar)?;
    let inner = boundary.build(grid, &vec![0.0; grid.dim()], r, abar)?;
    let spread = if big_r > r {
        Some(boundary.build(grid, z, (big_r * big_r - r * r).sqrt(), abar)?)
    } else {
        None
    };
    Ok((outer, inner, spread))
}

/// Convenience wrapper building every mask at `z_site`.
#[allow(clippy::too_many_arguments)]
pub fn additivity_defect(
    basis: &SolutionBasis,
    abar: &DMatrix<f64>,
    z_site: usize,
    big_r: f64,
    r: f64,
    p: &[f64],
    q: &[f64],
    boundary: MaskBoundary,
) -> Result<f64> {
    let grid = *basis.grid();
    let z = grid.position(z_site);
    let (outer, inner, spread) = additivity_masks(&grid, &z[..grid.dim()], big_r, r, abar, boundary)?;
    let outer = moments(basis, &outer)?;
    let inner = BulkMoments::new(basis, &inner)?;
    additivity_from_moments(&outer, &inner, abar, spread.as_ref(), z_site, p, q, default_stride(&grid, r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationGap {
    pub gap: f64,
    pub original: JEvaluation,
    pub resampled: JEvaluation,
}

/// Settings shared by the two solves of a localization pair.
#[derive(Clone, Debug)]
pub struct LocalizationSetup<'a> {
    pub spec: &'a SamplerSpec,
    pub grid: GridSpec,
    pub abar: &'a DMatrix<f64>,
    pub solver: &'a SolverOptions,
    pub boundary: MaskBoundary,
}

/// Resamples the field outside the ball of radius `r^{1+δ}` around `z` and
/// compares `J` before and after.
pub fn localization_gap(
    setup: &LocalizationSetup<'_>,
    seed: u64,
    seed2: u64,
    z: &[f64],
    r: f64,
    delta: f64,
    p: &[f64],
    q: &[f64],
) -> Result<LocalizationGap> {
    let (m, m2) = localization_moments(setup, seed, seed2, z, r, delta)?;
    let original = evaluate(&m, setup.abar, p, q)?;
    let resampled = evaluate(&m2, setup.abar, p, q)?;
    Ok(LocalizationGap {
        gap: (original.value - resampled.value).abs(),
        original,
        resampled,
    })
}

/// Moments at `(z, r)` for the field of `seed` and for the same field
/// resampled with `seed2` outside `B(z, r^{1+δ})`. `setup.abar` only shapes
/// the mask here.
pub fn localization_moments(
    setup: &LocalizationSetup<'_>,
    seed: u64,
    seed2: u64,
    z: &[f64],
    r: f64,
    delta: f64,
) -> Result<(Moments, Moments)> {
    let grid = setup.grid;
    let rho = r.powf(1.0 + delta);
    if rho > 0.5 * grid.side() as f64 {
        return Err(Error::RadiusOutOfBounds {
            radius: rho,
            limit: 0.5 * grid.side() as f64,
        });
    }
    let mask = setup.boundary.build(&grid, z, r, setup.abar)?;
    let a = sample_field(setup.spec, &grid, seed)?;
    let a2 = resample_outside(&a, setup.spec, z, rho, seed2)?;
    let local = |field: &CoefficientField| -> Result<Moments> {
        let set = build_corrector_set(field, setup.solver)?;
        moments(&SolutionBasis::new(field, &set)?, &mask)
    };
    Ok((local(&a)?, local(&a2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_mask, default_cutoff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(spec: &SamplerSpec, side: usize, seed: u64) -> (CoefficientField, SolutionBasis) {
        let grid = GridSpec::new(2, 2, side).unwrap();
        let a = sample_field(spec, &grid, seed).unwrap();
        let set = build_corrector_set(&a, &SolverOptions::with_tol(1e-11)).unwrap();
        let basis = SolutionBasis::new(&a, &set).unwrap();
        (a, basis)
    }

    fn checkerboard() -> SamplerSpec {
        SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 }
    }

    fn random_dir(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..2).map(|_| rng.random_range(-0.7..0.7)).collect()
    }

    fn mask_for(basis: &SolutionBasis, z: &[f64], r: f64, abar: &DMatrix<f64>) -> HeatKernelMask {
        build_mask(basis.grid(), z, r, abar, default_cutoff(basis.grid(), r)).unwrap()
    }

    fn two_id() -> DMatrix<f64> {
        DMatrix::identity(2, 2) * 2.0
    }

    #[test]
    fn constant_field_closed_form() {
        let abar = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let spec = SamplerSpec::Constant {
            matrix: vec![vec![2.0, 0.5], vec![0.5, 1.5]],
        };
        let (_, basis) = setup(&spec, 16, 0);
        let mask = mask_for(&basis, &[3.0, 5.0], 2.0, &abar);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let (p, q) = (random_dir(&mut rng), random_dir(&mut rng));
            let e = j_eval(&basis, &abar, &mask, &p, &q).unwrap();
            let qp = [q[0] - p[0], q[1] - p[1]];
            let expected = 0.5 * quad(&abar, &qp, &qp);
            assert!((e.value - expected).abs() <= 1e-9 * expected);
            assert!((e.grad_star[0] - qp[0]).abs() < 1e-9 && (e.grad_star[1] - qp[1]).abs() < 1e-9);
            let same = j_eval(&basis, &abar, &mask, &p, &p).unwrap();
            assert!(same.value.abs() < 1e-12);
        }
        let b = coarse_matrix(&basis, &abar, &mask).unwrap();
        assert!(b.b_r.amax() < 1e-9);
        assert!(duality_defect(&basis, &abar, &mask).unwrap() < 1e-12);
    }

    #[test]
    fn identity_field_duality_against_zero_is_one() {
        let (_, basis) = setup(&SamplerSpec::identity(2), 8, 0);
        let mask = mask_for(&basis, &[0.0, 0.0], 1.5, &DMatrix::identity(2, 2));
        let defect = duality_defect(&basis, &DMatrix::zeros(2, 2), &mask).unwrap();
        assert!((defect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_torus_matches_brute_force_program() {
        // 2x2 unit cells, two grid points per cell
        let grid = GridSpec::new(2, 2, 2).unwrap();
        let a = sample_field(&checkerboard(), &grid, 11).unwrap();
        let set = build_corrector_set(&a, &SolverOptions::with_tol(1e-12)).unwrap();
        let basis = SolutionBasis::new(&a, &set).unwrap();
        let abar = two_id();
        let mask = build_mask(&grid, &[1.0, 1.0], 0.5, &abar, 1.0).unwrap();
        let op = DivergenceOperator::new(&a);
        let dense = mask.to_dense();
        let (p, q) = ([0.3, -0.2], [0.1, 0.6]);
        // objective(c) = avg(-½∇v·a∇v - p·a∇v + ∇v·āq), summed site by site
        let objective = |c: &[f64]| {
            let mut g = VectorField::zeros(grid);
            for i in 0..2 {
                g.axpy(c[i], basis.gradient(i)).unwrap();
            }
            let f = op.flux(&g).unwrap();
            let mut s = 0.0;
            for x in 0..grid.num_sites() {
                let mut local = 0.0;
                for k in 0..2 {
                    let (gk, fk) = (g.component(k)[x], f.component(k)[x]);
                    local += -0.5 * gk * fk - p[k] * fk + gk * 2.0 * q[k];
                }
                s += dense[x] * local;
            }
            s * grid.cell_volume()
        };
        // coarse enumeration, then exact Newton on the quadratic
        let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
        for i in -20..=20 {
            for j in -20..=20 {
                let c = [i as f64 * 0.1, j as f64 * 0.1];
                let v = objective(&c);
                if v > best.1 {
                    best = (c, v);
                }
            }
        }
        let c0 = best.0;
        let step = 0.5;
        let f0 = objective(&c0);
        let e = |i: usize, s: f64| {
            let mut c = c0;
            c[i] += s;
            c
        };
        let grad: Vec<f64> = (0..2).map(|i| (objective(&e(i, step)) - objective(&e(i, -step))) / (2.0 * step)).collect();
        let mut hess = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut pp = c0;
                pp[i] += step;
                pp[j] += step;
                let mut pm = c0;
                pm[i] += step;
                pm[j] -= step;
                let mut mp = c0;
                mp[i] -= step;
                mp[j] += step;
                let mut mm = c0;
                mm[i] -= step;
                mm[j] -= step;
                hess[(i, j)] = (objective(&pp) - objective(&pm) - objective(&mp) + objective(&mm)) / (4.0 * step * step);
            }
        }
        let delta = hess.lu().solve(&DVector::from_vec(grad)).unwrap();
        let c_star = [c0[0] - delta[0], c0[1] - delta[1]];
        let brute = objective(&c_star);
        assert!(brute >= f0 - 1e-12);
        let fast = j_eval(&basis, &abar, &mask, &p, &q).unwrap();
        assert!((fast.value - brute).abs() <= 1e-9 * brute.abs().max(1e-3), "{} vs {}", fast.value, brute);
    }

    #[test]
    fn quadratic_form_invariants_on_checkerboard() {
        let (a, basis) = setup(&checkerboard(), 32, 5);
        let abar = two_id();
        let r = 8.0;
        let mask = mask_for(&basis, &[16.0, 16.0], r, &abar);
        let m = moments(&basis, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lambda = a.lambda_max();
        for _ in 0..6 {
            let (p1, q1, p2, q2) = (random_dir(&mut rng), random_dir(&mut rng), random_dir(&mut rng), random_dir(&mut rng));
            let j = |p: &[f64], q: &[f64]| evaluate(&m, &abar, p, q).unwrap();
            let e1 = j(&p1, &q1);
            let e2 = j(&p2, &q2);
            let sum = |x: &[f64], y: &[f64]| vec![x[0] + y[0], x[1] + y[1]];
            let e12 = j(&sum(&p1, &p2), &sum(&q1, &q2));
            let scale = e1.value.abs() + e2.value.abs() + e12.value.abs();
            assert!(j_polarized(&e1, &e2, &e12, &abar).unwrap() <= 1e-9 * scale);

            // bounds
            assert!(e1.value >= 0.0);
            assert!(e1.value <= lambda * (dot(&p1, &p1) + dot(&q1, &q1)));

            // parallelogram
            let half = |x: &[f64], y: &[f64], s: f64| vec![0.5 * (x[0] + s * y[0]), 0.5 * (x[1] + s * y[1])];
            let lhs = e1.value + e2.value - 2.0 * j(&half(&p1, &p2, 1.0), &half(&q1, &q2, 1.0)).value;
            let rhs = 2.0 * j(&half(&p1, &p2, -1.0), &half(&q1, &q2, -1.0)).value;
            assert!((lhs - rhs).abs() <= 1e-9 * scale);

            // homogeneity
            let t = 1.7;
            let et = j(&[t * p1[0], t * p1[1]], &[t * q1[0], t * q1[1]]);
            assert!((et.value - t * t * e1.value).abs() <= 1e-12 * et.value.max(1e-300) + 1e-15);

            // first variation and energy identity, from the fields directly
            let mut v = VectorField::zeros(*basis.grid());
            for i in 0..2 {
                v.axpy(e1.coeffs[i], basis.gradient(i)).unwrap();
            }
            let op = DivergenceOperator::new(&a);
            let av = op.flux(&v).unwrap();
            for i in 0..2 {
                let sym: Vec<f64> = (0..basis.grid().num_sites())
                    .map(|x| {
                        (0..2)
                            .map(|k| 0.5 * (basis.gradient(i).component(k)[x] * av.component(k)[x] + v.component(k)[x] * basis.flux(i).component(k)[x]))
                            .sum()
                    })
                    .collect();
                let first_var = mask.average_slice(&sym) - e1.linear[i];
                assert!(first_var.abs() <= 1e-9 * (1.0 + e1.linear.amax()));
            }
            let energy: Vec<f64> = (0..basis.grid().num_sites())
                .map(|x| (0..2).map(|k| v.component(k)[x] * av.component(k)[x]).sum())
                .collect();
            assert!((0.5 * mask.average_slice(&energy) - e1.value).abs() <= 1e-9 * e1.value);

            // gradient identity: J(x + t y) = J(x) + t ⟨∇J(x), y⟩ + t² J(y)
            for t in [0.3, -1.1] {
                let xt = j(&[p1[0] + t * p2[0], p1[1] + t * p2[1]], &[q1[0] + t * q2[0], q1[1] + t * q2[1]]);
                let predicted = e1.value + t * gradient_form(&e1, &abar, &p2, &q2) + t * t * e2.value;
                assert!((xt.value - predicted).abs() <= 1e-9 * scale);
            }
        }
        assert!(condition_number(&m.gram) < 1e3);
    }

    #[test]
    fn polarization_zero_direction_is_exact() {
        let (_, basis) = setup(&checkerboard(), 16, 1);
        let abar = two_id();
        let mask = mask_for(&basis, &[4.0, 4.0], 3.0, &abar);
        let e1 = j_eval(&basis, &abar, &mask, &[0.2, 0.1], &[0.5, -0.3]).unwrap();
        let e0 = j_eval(&basis, &abar, &mask, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(j_polarized(&e1, &e0, &e1, &abar).unwrap(), 0.0);
        let other = j_eval(&basis, &abar, &mask, &[0.3, 0.1], &[0.5, -0.3]).unwrap();
        assert!(j_polarized(&e1, &e0, &other, &abar).is_err());
    }

    #[test]
    fn coarse_matrix_is_symmetric_and_matches_flux_fluctuation() {
        let (_, basis) = setup(&checkerboard(), 32, 3);
        let abar = two_id();
        let mask = mask_for(&basis, &[8.0, 8.0], 4.0, &abar);
        let m = moments(&basis, &mask).unwrap();
        let b = coarse_matrix(&basis, &abar, &mask).unwrap();
        assert_eq!(b.b_r, b.b_r.transpose());
        assert_eq!(b.abar_r, &abar + &b.b_r);
        // the centering cancels: p·b_r q = p·avg((a - ā)∇v(0, q)) for the maximizer v(0, q)
        let raw = DMatrix::from_fn(2, 2, |k, l| {
            let q: Vec<f64> = (0..2).map(|i| if i == l { 1.0 } else { 0.0 }).collect();
            let e = evaluate(&m, &abar, &[0.0, 0.0], &q).unwrap();
            let fluct = &e.flux_star - &abar * &e.grad_star;
            fluct[k]
        });
        let sym = 0.5 * (&raw + raw.transpose());
        assert!((&sym - &b.b_r).amax() < 1e-10);
    }

    #[test]
    fn degenerate_gram_is_rejected() {
        let m = Moments {
            gram: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]),
            ..Moments::constant(&DMatrix::identity(2, 2))
        };
        assert!(matches!(
            evaluate(&m, &DMatrix::identity(2, 2), &[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::DegenerateGram { .. })
        ));
    }

    #[test]
    fn basis_gradients_are_curl_free() {
        let (_, basis) = setup(&SamplerSpec::CheckerboardDiagUniform { lo: 1.0, hi: 10.0 }, 8, 2);
        assert!(basis.max_curl() < 1e-10);
        assert_eq!(basis.field_digest().len(), 16);
    }

    #[test]
    fn bulk_moments_match_single_site_moments() {
        let (_, basis) = setup(&checkerboard(), 16, 7);
        let abar = two_id();
        let grid = *basis.grid();
        let bulk = BulkMoments::new(&basis, &mask_for(&basis, &[0.0, 0.0], 2.0, &abar)).unwrap();
        for site in [0, 33, 700] {
            let z = grid.position(site);
            let direct = moments(&basis, &mask_for(&basis, &z[..2], 2.0, &abar)).unwrap();
            assert!((&bulk.at(site).gram - &direct.gram).amax() < 1e-12);
            assert!((&bulk.at(site).flux - &direct.flux).amax() < 1e-12);
        }
    }

    #[test]
    fn additivity_degenerate_cases() {
        let abar = two_id();
        let (_, constant) = setup(&SamplerSpec::scalar(2, 2.0), 32, 0);
        let (p, q) = ([0.0, 0.0], [1.0, 0.0]);
        let (_, basis) = setup(&checkerboard(), 32, 0);
        for boundary in [MaskBoundary::default(), MaskBoundary::Periodic] {
            let d = additivity_defect(&constant, &abar, 0, 6.0, 3.0, &p, &q, boundary).unwrap();
            assert!(d <= 1e-6);
            let same = additivity_defect(&basis, &abar, 40, 4.0, 4.0, &p, &q, boundary).unwrap();
            assert!(same < 1e-12);
            let real = additivity_defect(&basis, &abar, 40, 6.0, 3.0, &p, &q, boundary).unwrap();
            assert!(real.is_finite() && real > 0.0);
            assert!(additivity_defect(&basis, &abar, 0, 9.0, 3.0, &p, &q, boundary).is_err());
        }
    }

    #[test]
    fn quadratic_form_matches_direct_evaluation() {
        let (_, basis) = setup(&checkerboard(), 32, 3);
        let grid = *basis.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let abar = DMatrix::from_row_slice(2, 2, &[2.1, 0.1, 0.1, 1.9]);
        let m = moments(&basis, &mask_for(&basis, &[5.0, 9.0], 3.0, &two_id())).unwrap();
        let jq = JQuadratic::from_moments(&m).unwrap();
        for _ in 0..5 {
            let (p, q) = (random_dir(&mut rng), random_dir(&mut rng));
            let direct = evaluate(&m, &abar, &p, &q).unwrap().value;
            assert!((jq.value(&abar, &p, &q).unwrap() - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }

        let (big_r, r) = (6.0, 3.0);
        let z_site = 40;
        let z = grid.position(z_site);
        let (outer, inner, spread) = additivity_masks(&grid, &z[..2], big_r, r, &abar, MaskBoundary::default()).unwrap();
        let outer = moments(&basis, &outer).unwrap();
        let inner = BulkMoments::new(&basis, &inner).unwrap();
        let stride = default_stride(&grid, r);
        let (p, q) = ([0.3, -0.2], [1.0, 0.4]);
        let direct = additivity_from_moments(&outer, &inner, &abar, spread.as_ref(), z_site, &p, &q, stride).unwrap();
        let (jo, ji) = additivity_quadratics(&outer, &inner, spread.as_ref(), z_site, stride).unwrap();
        let via = (jo.value(&abar, &p, &q).unwrap() - ji.value(&abar, &p, &q).unwrap()).abs();
        assert!((via - direct).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn localization_degenerate_cases() {
        let grid = GridSpec::new(2, 2, 16).unwrap();
        let abar = two_id();
        let solver = SolverOptions::default();
        let constant = SamplerSpec::scalar(2, 2.0);
        let setup_c = LocalizationSetup {
            spec: &constant,
            grid,
            abar: &abar,
            solver: &solver,
            boundary: MaskBoundary::default(),
        };
        let g = localization_gap(&setup_c, 1, 2, &[8.0, 8.0], 2.0, 0.5, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g.gap, 0.0);
        let cb = checkerboard();
        let setup_cb = LocalizationSetup { spec: &cb, ..setup_c.clone() };
        // r^{1+δ} = 8 = L/2 keeps a ball, so some cells change
        let g = localization_gap(&setup_cb, 1, 2, &[8.0, 8.0], 4.0, 0.5, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(g.gap.is_finite());
        assert!(localization_gap(&setup_cb, 1, 2, &[8.0, 8.0], 4.0, 0.6, &[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
