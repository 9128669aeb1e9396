//! Accuracy certificates: pointwise bounds through `σ(x)`, energy bounds
//! through `ρ(V₀)`, and mesh-norm scaling studies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{lanczos_largest, BandMatrix};
use crate::measure::MeasurementSet;
use crate::mesh::Mesh;
use crate::operator::{assemble_laplacian, NoiseKind};
use crate::posterior::{
    assemble_theta, basis_by_conditioning, BasisSet, GammaOperator, VarianceField, DENSE_LIMIT,
};
use crate::variational::{project_optimal_recovery, VProduct};

/// Norm in which energy errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HNorm {
    /// `‖∇v‖_{L²}`.
    #[default]
    H1Seminorm,
}

/// Weighted Gram matrix of the norm, so that `‖v‖² = vᵀ H v`.
pub fn h_norm_matrix(mesh: &Mesh, hnorm: HNorm) -> Result<BandMatrix> {
    match hnorm {
        HNorm::H1Seminorm => assemble_laplacian(mesh)?
            .matrix()
            .scale_rows(mesh.weights()),
    }
}

pub fn h_norm(mesh: &Mesh, hnorm: HNorm, v: &DVector<f64>) -> Result<f64> {
    let h = h_norm_matrix(mesh, hnorm)?;
    Ok(v.dot(&h.mul_vec(v)?).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMethod {
    /// Exact symmetric eigensolve of the projected dense operator.
    Dense,
    /// Lanczos on the operator applied through solves and the basis.
    Lanczos,
    /// `V₀ = {0}`.
    Trivial,
}

#[derive(Debug, Clone)]
pub struct RhoEstimate {
    pub rho: f64,
    /// Element of `V₀` attaining the ratio `‖v‖_H / ‖v‖_V ≈ ρ`.
    pub extremal: DVector<f64>,
    pub method: RhoMethod,
}

/// `ρ(V₀) = sup_{v ∈ V₀} ‖v‖_H / ‖v‖_V` where `V₀` is the kernel of the
/// measurements. Dense up to [`DENSE_LIMIT`] nodes, Lanczos above.
pub fn estimate_rho_v0(vp: &VProduct, ms: &MeasurementSet, hnorm: HNorm) -> Result<RhoEstimate> {
    if vp.size() <= DENSE_LIMIT {
        estimate_rho_v0_dense(vp, ms, hnorm)
    } else {
        estimate_rho_v0_lanczos(vp, ms, hnorm)
    }
}

fn conditioning_basis(vp: &VProduct, ms: &MeasurementSet) -> Result<BasisSet> {
    let g = GammaOperator::new(vp.op().clone(), vp.noise().clone());
    let th = assemble_theta(&g, ms)?;
    basis_by_conditioning(&g, ms, &th)
}

fn trivial(m: usize) -> RhoEstimate {
    RhoEstimate {
        rho: 0.0,
        extremal: DVector::zeros(m),
        method: RhoMethod::Trivial,
    }
}

/// Dense path. With `K = B⁻¹ W^{-1/2}` every `v` equals `K y` with
/// `‖v‖_V = ‖y‖`, and `v ∈ V₀` iff `y ⊥ range((CK)ᵀ)`, so `ρ²` is the top
/// eigenvalue of `P KᵀHK P` with `P` the orthogonal projector onto
/// `null(CK)`. This never factors the ill-conditioned `BᵀWB`.
pub fn estimate_rho_v0_dense(
    vp: &VProduct,
    ms: &MeasurementSet,
    hnorm: HNorm,
) -> Result<RhoEstimate> {
    let m = vp.size();
    check_len(m, ms.duals().nrows())?;
    if m > DENSE_LIMIT {
        return Err(Error::TooLarge {
            size: m,
            limit: DENSE_LIMIT,
            hint: "use the Lanczos estimate",
        });
    }
    if ms.len() >= m {
        return Ok(trivial(m));
    }
    let w = vp.mesh().weights();
    let cols: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut e = DVector::zeros(m);
            e[j] = 1.0 / w[j].sqrt();
            vp.energy_solve(&e)
        })
        .collect::<Result<_>>()?;
    let k = DMatrix::from_columns(&cols);
    let h = h_norm_matrix(vp.mesh(), hnorm)?;
    let hk_cols: Vec<DVector<f64>> = cols
        .par_iter()
        .map(|c| h.mul_vec(c))
        .collect::<Result<_>>()?;
    let hk = DMatrix::from_columns(&hk_cols);
    let mut gmat = k.tr_mul(&hk);
    symmetrize(&mut gmat);
    let d = ms.constraint_matrix() * &k;
    let q = d.transpose().qr().q();
    let qtg = q.tr_mul(&gmat);
    let gq = &gmat * &q;
    let qtgq = q.tr_mul(&gq);
    let mut pgp = &gmat - &q * &qtg - &gq * q.transpose() + &q * qtgq * q.transpose();
    symmetrize(&mut pgp);
    let eig = SymmetricEigen::new(pgp);
    let (imax, top) =
        eig.eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |a, (i, v)| if v > a.1 { (i, v) } else { a },
            );
    if !top.is_finite() {
        return Err(Error::EigenSolver("non-finite eigenvalue".into()));
    }
    let y = eig.eigenvectors.column(imax).into_owned();
    Ok(RhoEstimate {
        rho: top.max(0.0).sqrt(),
        extremal: &k * y,
        method: RhoMethod::Dense,
    })
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Matrix-free path: Lanczos on `P KᵀHK P`, the operator of the dense
/// path, with `P` applied through an orthonormal basis of `range((CK)ᵀ)`
/// obtained from `N` transposed solves.
pub fn estimate_rho_v0_lanczos(
    vp: &VProduct,
    ms: &MeasurementSet,
    hnorm: HNorm,
) -> Result<RhoEstimate> {
    let m = vp.size();
    check_len(m, ms.duals().nrows())?;
    if ms.len() >= m {
        return Ok(trivial(m));
    }
    let sw = vp.mesh().weights().map(|w| w.sqrt());
    let h = h_norm_matrix(vp.mesh(), hnorm)?;
    let c = ms.constraint_matrix();
    // (CK)ᵀ = W^{-1/2} B⁻ᵀ Cᵀ
    let dt: Vec<DVector<f64>> = (0..ms.len())
        .into_par_iter()
        .map(|i| {
            let r = c.row(i).transpose();
            Ok(vp.energy_solve_transpose(&r)?.component_div(&sw))
        })
        .collect::<Result<_>>()?;
    let q = DMatrix::from_columns(&dt).qr().q();
    let project = |y: &DVector<f64>| y - &q * q.tr_mul(y);
    let k = |y: &DVector<f64>| vp.energy_solve(&y.component_div(&sw));
    let apply = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let z = h.mul_vec(&k(&project(y))?)?;
        Ok(project(&vp.energy_solve_transpose(&z)?.component_div(&sw)))
    };
    let (top, y) = lanczos_largest(m, apply, 400, 1e-10, 0x5eed)?;
    Ok(RhoEstimate {
        rho: top.max(0.0).sqrt(),
        extremal: k(&project(&y))?,
        method: RhoMethod::Lanczos,
    })
}

/// Kind of random right-hand side used by the certificate checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunctions {
    /// Independent standard normal nodal values.
    Rough,
    /// Random combination of the lowest sine modes.
    Smooth,
}

impl TestFunctions {
    /// Rough sources for white noise, smooth ones for regularized noise.
    pub fn default_for(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::White => TestFunctions::Rough,
            NoiseKind::Regularized { .. } => TestFunctions::Smooth,
        }
    }
}

/// One random source `g` on the mesh.
pub fn random_source(mesh: &Mesh, kind: TestFunctions, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match kind {
        TestFunctions::Rough => DVector::from_fn(mesh.len(), |_, _| StandardNormal.sample(rng)),
        TestFunctions::Smooth => {
            let modes = 3;
            let ly = if mesh.dim() == 1 { 1 } else { modes };
            let mut coef = Vec::with_capacity(modes * ly);
            for k in 1..=modes {
                for l in 1..=ly {
                    let z: f64 = StandardNormal.sample(rng);
                    coef.push((k, l, z / (k * k + l * l) as f64));
                }
            }
            let pi = std::f64::consts::PI;
            mesh.sample(|p| {
                coef.iter()
                    .map(|&(k, l, c)| {
                        let sy = if mesh.dim() == 1 {
                            1.0
                        } else {
                            (l as f64 * pi * p[1]).sin()
                        };
                        c * (k as f64 * pi * p[0]).sin() * sy
                    })
                    .sum()
            })
        }
    }
}

/// Outcome of the pointwise certificate check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseReport {
    pub max_ratio: f64,
    pub trials: usize,
    pub seed: u64,
    /// `(trial, node)` of the largest ratio.
    pub worst: Option<(usize, usize)>,
}

/// Pointwise ratio `|v(x) − v_Ψ(x)| / (σ(x) ‖v‖_V)`. Where `σ(x)` vanishes to
/// rounding the bound is floored at `1e−9 √Γ(x,x) ‖v‖_V`.
pub fn pointwise_ratios(
    vp: &VProduct,
    ms: &MeasurementSet,
    basis: &BasisSet,
    var: &VarianceField,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let vn = vp.norm(v)?;
    let err = v - project_optimal_recovery(basis, v, ms)?;
    Ok(DVector::from_iterator(
        var.nodes.len(),
        var.nodes.iter().enumerate().map(|(i, &k)| {
            let e = err[k].abs();
            let floor = 1e-9 * var.prior[i].sqrt() * vn;
            let bound = var.values[i].sqrt() * vn;
            if bound > floor {
                e / bound
            } else if e <= floor {
                0.0
            } else {
                e / floor.max(f64::MIN_POSITIVE)
            }
        }),
    ))
}

/// Checks `|v(x) − v_Ψ(x)| ≤ σ(x) ‖v‖_V` for `trials` functions
/// `v = L⁻¹ g` with random `g`, at every node of `var`.
pub fn check_pointwise_bound(
    vp: &VProduct,
    ms: &MeasurementSet,
    basis: &BasisSet,
    var: &VarianceField,
    trials: usize,
    seed: u64,
    kind: TestFunctions,
) -> Result<PointwiseReport> {
    if trials == 0 {
        return Err(invalid("study.trials", "must be at least 1"));
    }
    let results: Vec<(f64, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let g = random_source(vp.mesh(), kind, &mut rng);
            let v = vp.op().greens_apply(&g)?;
            let r = pointwise_ratios(vp, ms, basis, var, &v)?;
            let imax = r.imax();
            Ok((r[imax], var.nodes[imax]))
        })
        .collect::<Result<_>>()?;
    let (t, &(max_ratio, node)) =
        results.iter().enumerate().fold(
            (0, &results[0]),
            |a, (i, r)| if r.0 > a.1 .0 { (i, r) } else { a },
        );
    if max_ratio > 1.0 + 1e-6 {
        return Err(Error::BoundViolation(format!(
            "pointwise ratio {max_ratio} at node {node} (seed {seed}, trial {t})"
        )));
    }
    Ok(PointwiseReport {
        max_ratio,
        trials,
        seed,
        worst: Some((t, node)),
    })
}

/// Certified approximation of `u = L⁻¹ g`.
#[derive(Debug, Clone)]
pub struct Certificate {
    /// `u_Ψ = Σ φ_i ∫ u ψ_i`.
    pub approx: DVector<f64>,
    pub exact: DVector<f64>,
    /// `σ(x) ‖L_Λ g‖_{L²}` at the nodes of the variance field.
    pub pointwise: DVector<f64>,
    /// `ρ(V₀) ‖L_Λ g‖_{L²}`.
    pub energy: f64,
    /// `‖u − u_Ψ‖_H`.
    pub energy_error: f64,
}

/// `‖L_Λ g‖_{L²}`, which is `‖L⁻¹ g‖_V`.
pub fn source_norm(vp: &VProduct, g: &DVector<f64>) -> Result<f64> {
    let s = vp.noise().shape_apply(g)?;
    Ok(s.component_mul(vp.mesh().weights()).dot(&s).sqrt())
}

/// Computes `u`, its recovery from the measurements and both certificates,
/// and checks that the actual errors respect them.
pub fn certify_solution(
    vp: &VProduct,
    ms: &MeasurementSet,
    basis: &BasisSet,
    var: &VarianceField,
    rho: f64,
    g: &DVector<f64>,
    hnorm: HNorm,
) -> Result<Certificate> {
    check_len(vp.size(), g.len())?;
    let u = vp.op().greens_apply(g)?;
    let approx = project_optimal_recovery(basis, &u, ms)?;
    let gn = source_norm(vp, g)?;
    let err = &u - &approx;
    let pointwise = var.values.map(|s| s.sqrt() * gn);
    for (i, &k) in var.nodes.iter().enumerate() {
        let slack = 1e-6 * pointwise[i] + 1e-9 * var.prior[i].sqrt() * gn;
        if err[k].abs() > pointwise[i] + slack {
            return Err(Error::BoundViolation(format!(
                "pointwise error {:e} exceeds certificate {:e} at node {k}",
                err[k].abs(),
                pointwise[i]
            )));
        }
    }
    let energy = rho * gn;
    let energy_error = h_norm(vp.mesh(), hnorm, &err)?;
    if energy_error > energy * (1.0 + 1e-6) + 1e-300 {
        return Err(Error::BoundViolation(format!(
            "energy error {energy_error:e} exceeds certificate {energy:e}"
        )));
    }
    Ok(Certificate {
        approx,
        exact: u,
        pointwise,
        energy,
        energy_error,
    })
}

/// One refinement level of a scaling study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingLevel {
    #[serde(rename = "H")]
    pub h: f64,
    pub rho: f64,
    pub energy_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub levels: Vec<ScalingLevel>,
    /// Least-squares slope of `log ρ` against `log H`.
    pub slope: f64,
    pub energy_slope: f64,
    /// Geometric mean of `ρ / H`.
    pub constant: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(invalid("levels", "need at least two points for a slope"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(invalid("levels", "log-log fit needs positive values"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("levels", "all levels have the same mesh norm"));
    }
    Ok(sxy / sxx)
}

/// `ρ(V₀)` and the energy error of recovering `L⁻¹ g` at each level.
pub fn scaling_study(
    vp: &VProduct,
    levels: &[MeasurementSet],
    g: &DVector<f64>,
    hnorm: HNorm,
) -> Result<ScalingStudy> {
    if levels.len() < 3 {
        return Err(invalid(
            "study.levels",
            format!("need at least 3 levels, got {}", levels.len()),
        ));
    }
    let u = vp.op().greens_apply(g)?;
    let mut out = Vec::with_capacity(levels.len());
    for ms in levels {
        let basis = conditioning_basis(vp, ms)?;
        let rho = estimate_rho_v0(vp, ms, hnorm)?;
        let err = &u - project_optimal_recovery(&basis, &u, ms)?;
        out.push(ScalingLevel {
            h: ms.mesh_norm(vp.mesh())?,
            rho: rho.rho,
            energy_error: h_norm(vp.mesh(), hnorm, &err)?,
        });
    }
    let rho_pts: Vec<(f64, f64)> = out.iter().map(|l| (l.h, l.rho)).collect();
    let err_pts: Vec<(f64, f64)> = out.iter().map(|l| (l.h, l.energy_error)).collect();
    let constant = (out.iter().map(|l| (l.rho / l.h).ln()).sum::<f64>() / out.len() as f64).exp();
    Ok(ScalingStudy {
        slope: fit_loglog_slope(&rho_pts)?,
        energy_slope: fit_loglog_slope(&err_pts)?,
        levels: out,
        constant,
    })
}

/// Summary emitted by the verification and study commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub pointwise_max_ratio: Option<f64>,
    pub rho_v0: Option<f64>,
    #[serde(rename = "mesh_H")]
    pub mesh_h: Option<f64>,
    pub energy_error: Option<f64>,
    pub slope: Option<f64>,
    pub levels: Vec<ScalingLevel>,
}

impl ErrorReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{hat_density, lattice_points};
    use crate::mesh::{make_coefficient, CoefficientKind};
    use crate::operator::{assemble_elliptic, NoiseModel};
    use crate::posterior::posterior_variance;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vp_for(dim: usize, n: usize, kind: CoefficientKind, power: u32) -> VProduct {
        let mesh = Mesh::new(dim, n).unwrap();
        let a = make_coefficient(&mesh, &kind).unwrap();
        let noise = if power == 0 {
            NoiseModel::white()
        } else {
            NoiseModel::regularized(&mesh, power).unwrap()
        };
        VProduct::new(assemble_elliptic(&mesh, &a).unwrap(), noise).unwrap()
    }

    fn posterior(vp: &VProduct, ms: &MeasurementSet) -> (GammaOperator, BasisSet, VarianceField) {
        let g = GammaOperator::new(vp.op().clone(), vp.noise().clone());
        let th = assemble_theta(&g, ms).unwrap();
        let b = basis_by_conditioning(&g, ms, &th).unwrap();
        let v = posterior_variance(&g, ms, &th, None).unwrap();
        (g, b, v)
    }

    fn checker() -> CoefficientKind {
        CoefficientKind::Checkerboard {
            contrast: 100.0,
            block: 2,
        }
    }

    #[test]
    fn h1_norm_of_sine() {
        let mesh = Mesh::new(1, 200).unwrap();
        let v = mesh.sample(|p| (std::f64::consts::PI * p[0]).sin());
        let n = h_norm(&mesh, HNorm::H1Seminorm, &v).unwrap();
        assert_relative_eq!(
            n * n,
            std::f64::consts::PI.powi(2) / 2.0,
            max_relative = 1e-4
        );
    }

    #[test]
    fn pointwise_bound_holds_on_checkerboard() {
        let vp = vp_for(1, 128, checker(), 0);
        let ms = MeasurementSet::dirac(vp.mesh(), lattice_points(1, 7)).unwrap();
        let (_, b, var) = posterior(&vp, &ms);
        let r = check_pointwise_bound(&vp, &ms, &b, &var, 100, 3, TestFunctions::Rough).unwrap();
        assert!(r.max_ratio <= 1.0 + 1e-6);
        assert!(r.max_ratio > 0.01);
    }

    #[test]
    fn basis_function_has_zero_error() {
        let vp = vp_for(2, 12, checker(), 1);
        let ms = MeasurementSet::voronoi(vp.mesh(), lattice_points(2, 2)).unwrap();
        let (_, b, var) = posterior(&vp, &ms);
        let r = pointwise_ratios(&vp, &ms, &b, &var, &b.column(1)).unwrap();
        assert!(r.amax() <= 1e-6);
    }

    #[test]
    fn dirac_nodes_have_zero_ratio() {
        let vp = vp_for(1, 64, CoefficientKind::Constant(1.0), 0);
        let ms = MeasurementSet::dirac(vp.mesh(), lattice_points(1, 3)).unwrap();
        let (_, b, var) = posterior(&vp, &ms);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_source(vp.mesh(), TestFunctions::Rough, &mut rng);
        let v = vp.op().greens_apply(&g).unwrap();
        let r = pointwise_ratios(&vp, &ms, &b, &var, &v).unwrap();
        for &k in ms.dirac_nodes().unwrap() {
            assert!(r[k] <= 1e-6);
        }
    }

    #[test]
    fn rho_is_zero_when_everything_is_measured() {
        let vp = vp_for(1, 6, CoefficientKind::Constant(1.0), 0);
        let pts: Vec<_> = vp.mesh().nodes().to_vec();
        let ms = MeasurementSet::dirac(vp.mesh(), pts).unwrap();
        assert_eq!(
            estimate_rho_v0(&vp, &ms, HNorm::H1Seminorm).unwrap().rho,
            0.0
        );
    }

    #[test]
    fn rho_bounds_random_elements_and_is_attained() {
        for p in [0, 1] {
            let vp = vp_for(1, 64, checker(), p);
            let ms = MeasurementSet::voronoi(vp.mesh(), lattice_points(1, 4)).unwrap();
            let (_, b, _) = posterior(&vp, &ms);
            let est = estimate_rho_v0(&vp, &ms, HNorm::H1Seminorm).unwrap();
            let ratio = |v: &DVector<f64>| {
                h_norm(vp.mesh(), HNorm::H1Seminorm, v).unwrap() / vp.norm(v).unwrap()
            };
            let x = &est.extremal;
            assert!(ms.observe(x).unwrap().values.amax() <= 1e-8 * x.amax());
            assert!(ratio(x) >= 0.99 * est.rho && ratio(x) <= est.rho * (1.0 + 1e-6));
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..50 {
                let g = random_source(vp.mesh(), TestFunctions::Rough, &mut rng);
                let v = vp.op().greens_apply(&g).unwrap();
                let r = &v - project_optimal_recovery(&b, &v, &ms).unwrap();
                assert!(ratio(&r) <= est.rho * (1.0 + 1e-8));
            }
        }
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        for (dim, n, p) in [(1, 80, 0), (2, 14, 0), (2, 14, 1)] {
            let vp = vp_for(dim, n, checker(), p);
            let ms = MeasurementSet::dirac(vp.mesh(), lattice_points(dim, 3)).unwrap();
            let d = estimate_rho_v0_dense(&vp, &ms, HNorm::H1Seminorm).unwrap();
            let l = estimate_rho_v0_lanczos(&vp, &ms, HNorm::H1Seminorm).unwrap();
            assert_relative_eq!(d.rho, l.rho, max_relative = 1e-6);
        }
    }

    #[test]
    fn rho_converges_under_refinement() {
        let rhos: Vec<f64> = [32, 64, 128]
            .iter()
            .map(|&n| {
                let vp = vp_for(1, n, CoefficientKind::Constant(1.0), 0);
                let ms = MeasurementSet::dirac(vp.mesh(), lattice_points(1, 3)).unwrap();
                estimate_rho_v0(&vp, &ms, HNorm::H1Seminorm).unwrap().rho
            })
            .collect();
        assert!((rhos[1] - rhos[2]).abs() <= 0.02 * rhos[2], "{rhos:?}");
        // sup of ‖v'‖/‖v''‖ over v vanishing at 0, 1/4, 1/2, 3/4, 1 is 1/(4π)
        assert_relative_eq!(rhos[2], 0.25 / std::f64::consts::PI, max_relative = 0.01);
    }

    #[test]
    fn rho_shrinks_when_measurements_are_added() {
        let vp = vp_for(1, 96, checker(), 0);
        let mut last = f64::INFINITY;
        let mut last_v = f64::INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_source(vp.mesh(), TestFunctions::Rough, &mut rng);
        let u = vp.op().greens_apply(&g).unwrap();
        let mut pts: Vec<[f64; 2]> = vec![[0.5, 0.0]];
        for _ in 0..6 {
            let ms = MeasurementSet::dirac(vp.mesh(), pts.clone()).unwrap();
            let (_, b, _) = posterior(&vp, &ms);
            let rho = estimate_rho_v0(&vp, &ms, HNorm::H1Seminorm).unwrap().rho;
            let ev = vp
                .norm(&(&u - project_optimal_recovery(&b, &u, &ms).unwrap()))
                .unwrap();
            assert!(rho <= last * (1.0 + 1e-10));
            assert!(ev <= last_v * (1.0 + 1e-10));
            last = rho;
            last_v = ev;
            loop {
                let x = rng.random_range(1..96) as f64 / 96.0;
                if !pts.iter().any(|p| p[0] == x) {
                    pts.push([x, 0.0]);
                    break;
                }
            }
        }
    }

    #[test]
    fn one_dimensional_scaling_is_linear() {
        let vp = vp_for(1, 256, CoefficientKind::Constant(1.0), 0);
        let levels: Vec<_> = [3, 7, 15]
            .iter()
            .map(|&m| MeasurementSet::dirac(vp.mesh(), lattice_points(1, m)).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_source(vp.mesh(), TestFunctions::Rough, &mut rng);
        let s = scaling_study(&vp, &levels, &g, HNorm::H1Seminorm).unwrap();
        assert!((0.8..=1.2).contains(&s.slope), "{s:?}");
        assert!(scaling_study(&vp, &levels[..2], &g, HNorm::H1Seminorm).is_err());
    }

    #[test]
    fn certificates_hold() {
        for p in [0, 1] {
            let vp = vp_for(1, 128, CoefficientKind::Constant(1.0), p);
            let ms = MeasurementSet::dirac(vp.mesh(), lattice_points(1, 7)).unwrap();
            let (_, b, var) = posterior(&vp, &ms);
            let rho = estimate_rho_v0(&vp, &ms, HNorm::H1Seminorm).unwrap().rho;
            let one = DVector::from_element(vp.size(), 1.0);
            let c = certify_solution(&vp, &ms, &b, &var, rho, &one, HNorm::H1Seminorm).unwrap();
            assert!(c.energy_error <= c.energy);
            let zero = DVector::zeros(vp.size());
            let z = certify_solution(&vp, &ms, &b, &var, rho, &zero, HNorm::H1Seminorm).unwrap();
            assert_eq!(z.approx.amax(), 0.0);
            assert_eq!(z.pointwise.amax(), 0.0);
            assert_eq!(z.energy, 0.0);
        }
    }

    #[test]
    fn density_measurements_certify() {
        let vp = vp_for(1, 100, checker(), 0);
        let dens: Vec<_> = lattice_points(1, 5)
            .iter()
            .map(|c| hat_density(vp.mesh(), c, 0.1))
            .collect();
        let ms = MeasurementSet::density(vp.mesh(), dens).unwrap();
        let (_, b, var) = posterior(&vp, &ms);
        let r = check_pointwise_bound(&vp, &ms, &b, &var, 20, 1, TestFunctions::Rough).unwrap();
        assert!(r.max_ratio <= 1.0 + 1e-6);
    }

    #[test]
    fn report_json_keys() {
        let r = ErrorReport {
            mesh_h: Some(0.125),
            levels: vec![ScalingLevel {
                h: 0.5,
                rho: 0.1,
                energy_error: 0.01,
            }],
            ..Default::default()
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "pointwise_max_ratio",
            "rho_v0",
            "mesh_H",
            "energy_error",
            "slope",
            "levels",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["levels"][0]["H"], 0.5);
    }

    #[test]
    fn slope_fit() {
        let pts = [(0.1, 0.02), (0.2, 0.08), (0.4, 0.32)];
        assert_relative_eq!(fit_loglog_slope(&pts).unwrap(), 2.0, epsilon = 1e-12);
    }
}
