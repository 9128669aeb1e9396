//! The basis as the solution of `min ⟨φ, φ⟩` subject to `observe(φ) = e_i`.
//!
//! With `B = L_Λ L` the energy is `⟨u, v⟩ = (Bu)ᵀ W (Bv)`. The optimality
//! conditions are solved in nested form, with `μ = W B φ`:
//!
//! ```text
//! [ W⁻¹  −B    0  ] [μ]   [ 0  ]
//! [ −Bᵀ   0   −Cᵀ ] [φ] = [ 0  ]
//! [ 0    −C    0  ] [λ]   [−e_i]
//! ```
//!
//! so that `χ = Bφ = W⁻¹μ` and the multipliers are `c = −λ`. Eliminating `μ`
//! gives the usual bordered system `[BᵀWB, Cᵀ; C, 0]`, which squares the
//! condition number of `B` and is never formed.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{BandLu, BandMatrix};
use crate::measure::MeasurementSet;
use crate::mesh::Mesh;
use crate::operator::{DiscreteOperator, NoiseModel};
use crate::posterior::{gamma_apply, BasisSet, GammaOperator};

/// Largest saddle system factorized densely.
pub const DENSE_KKT_LIMIT: usize = 2000;

/// Largest localized system; bigger patches are delegated to the global solve.
pub const LOCAL_KKT_LIMIT: usize = 3000;

/// Energy inner product `⟨u, v⟩ = ∫ (L_Λ L u)(L_Λ L v)`.
#[derive(Debug, Clone)]
pub struct VProduct {
    op: DiscreteOperator,
    noise: NoiseModel,
    b: BandMatrix,
}

impl VProduct {
    pub fn new(op: DiscreteOperator, noise: NoiseModel) -> Result<Self> {
        let b = noise.shape_matrix(op.size())?.matmul(op.matrix())?;
        Ok(Self { op, noise, b })
    }

    pub fn op(&self) -> &DiscreteOperator {
        &self.op
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn mesh(&self) -> &Mesh {
        self.op.mesh()
    }

    pub fn size(&self) -> usize {
        self.op.size()
    }

    /// `B = L_Λ L`.
    pub fn energy_operator(&self) -> &BandMatrix {
        &self.b
    }

    /// `B v`.
    pub fn energy_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.b.mul_vec(v)
    }

    /// `B⁻¹ f = L⁻¹ L_Λ⁻¹ f`.
    pub fn energy_solve(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.op.greens_apply(&self.noise.shape_solve(f)?)
    }

    /// `B⁻ᵀ f = L_Λ⁻ᵀ L⁻ᵀ f`.
    pub fn energy_solve_transpose(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.noise
            .shape_solve_transpose(&self.op.solve_transpose(f)?)
    }

    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        let bu = self.b.mul_vec(u)?;
        let bv = self.b.mul_vec(v)?;
        Ok(bu.component_mul(self.mesh().weights()).dot(&bv))
    }

    pub fn norm(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(self.inner(v, v)?.max(0.0).sqrt())
    }

    /// Dense `Q = BᵀWB`.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let b = self.b.to_dense();
        let wb = DMatrix::from_diagonal(self.mesh().weights()) * &b;
        b.transpose() * wb
    }
}

pub fn v_inner(vp: &VProduct, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    vp.inner(u, v)
}

/// Minimizer of one constrained problem together with its auxiliary field
/// `χ = L_Λ L φ` and multipliers `c`, which satisfy `Bᵀ W χ = Cᵀ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub phi: DVector<f64>,
    pub chi: DVector<f64>,
    pub multipliers: DVector<f64>,
}

/// Factorization strategy for the global saddle system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KktSolver {
    /// Dense LU of the full `(2M + N)` system.
    Dense,
    /// Banded LU of the interleaved `(μ, φ)` block bordered by an `N×N`
    /// Schur complement.
    Banded,
    /// Dense up to [`DENSE_KKT_LIMIT`] unknowns, banded above.
    Auto,
}

/// Solves the saddle systems for every `i`.
pub fn saddle_solutions(
    vp: &VProduct,
    ms: &MeasurementSet,
    solver: KktSolver,
) -> Result<Vec<SaddleSolution>> {
    let m = vp.size();
    check_len(m, ms.duals().nrows())?;
    let n = ms.len();
    let dense = match solver {
        KktSolver::Dense => true,
        KktSolver::Banded => false,
        KktSolver::Auto => 2 * m + n <= DENSE_KKT_LIMIT,
    };
    let (mu, phi, lambda) = if dense {
        global_dense(vp, ms)?
    } else {
        global_banded(vp, ms)?
    };
    let winv = vp.mesh().weights().map(|w| 1.0 / w);
    Ok((0..n)
        .map(|i| SaddleSolution {
            phi: phi.column(i).into_owned(),
            chi: mu.column(i).component_mul(&winv),
            multipliers: -lambda.column(i),
        })
        .collect())
}

/// Basis by constrained energy minimization.
pub fn basis_by_minimization(vp: &VProduct, ms: &MeasurementSet) -> Result<BasisSet> {
    basis_by_minimization_with(vp, ms, KktSolver::Auto)
}

pub fn basis_by_minimization_with(
    vp: &VProduct,
    ms: &MeasurementSet,
    solver: KktSolver,
) -> Result<BasisSet> {
    let sols = saddle_solutions(vp, ms, solver)?;
    Ok(BasisSet {
        columns: DMatrix::from_columns(&sols.iter().map(|s| s.phi.clone()).collect::<Vec<_>>()),
        theta_vectors: None,
    })
}

fn dense_kkt(winv: &[f64], b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, p) = b.shape();
    let j = c.nrows();
    let mut k = DMatrix::zeros(r + p + j, r + p + j);
    for (a, &v) in winv.iter().enumerate() {
        k[(a, a)] = v;
    }
    k.view_mut((0, r), (r, p)).copy_from(&(-b));
    k.view_mut((r, 0), (p, r)).copy_from(&(-b.transpose()));
    k.view_mut((r, r + p), (p, j)).copy_from(&(-c.transpose()));
    k.view_mut((r + p, r), (j, p)).copy_from(&(-c));
    k
}

type Blocks = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

fn global_dense(vp: &VProduct, ms: &MeasurementSet) -> Result<Blocks> {
    let m = vp.size();
    let n = ms.len();
    let winv: Vec<f64> = vp.mesh().weights().iter().map(|w| 1.0 / w).collect();
    let k = dense_kkt(&winv, &vp.b.to_dense(), ms.constraint_matrix());
    let mut rhs = DMatrix::zeros(2 * m + n, n);
    for i in 0..n {
        rhs[(2 * m + i, i)] = -1.0;
    }
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("saddle system; constraints are rank deficient".into()))?;
    check_finite(&x)?;
    Ok((
        x.rows(0, m).into_owned(),
        x.rows(m, m).into_owned(),
        x.rows(2 * m, n).into_owned(),
    ))
}

fn global_banded(vp: &VProduct, ms: &MeasurementSet) -> Result<Blocks> {
    let m = vp.size();
    let n = ms.len();
    let b = &vp.b;
    let bw = b.lower_bandwidth().max(b.upper_bandwidth());
    let mut k = BandMatrix::zeros(2 * m, 2 * bw + 1, 2 * bw + 1);
    let w = vp.mesh().weights();
    for a in 0..m {
        k.set(2 * a, 2 * a, 1.0 / w[a]);
    }
    for (r, c, v) in b.triplets() {
        k.set(2 * r, 2 * c + 1, -v);
        k.set(2 * c + 1, 2 * r, -v);
    }
    let lu = BandLu::factor(&k)
        .map_err(|e| Error::Singular(format!("saddle block of the energy operator: {e}")))?;
    let c = ms.constraint_matrix();
    let embed = |j: usize| {
        let mut e = DVector::zeros(2 * m);
        for col in 0..m {
            e[2 * col + 1] = -c[(j, col)];
        }
        e
    };
    let xs: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|j| lu.solve(&embed(j)))
        .collect::<Result<_>>()?;
    // S = E K⁻¹ Eᵀ
    let schur = DMatrix::from_fn(n, n, |i, j| {
        -(0..m)
            .map(|col| c[(i, col)] * xs[j][2 * col + 1])
            .sum::<f64>()
    });
    // [K Eᵀ; E 0][y; λ] = [0; −e]  ⇒  S λ = e, y = −X λ
    let lambda = schur.lu().try_inverse().ok_or_else(|| {
        Error::Singular("constraint Schur complement; constraints are rank deficient".into())
    })?;
    let x = DMatrix::from_columns(&xs);
    let y = -(&x * &lambda);
    check_finite(&y)?;
    let mu = DMatrix::from_fn(m, n, |a, i| y[(2 * a, i)]);
    let phi = DMatrix::from_fn(m, n, |a, i| y[(2 * a + 1, i)]);
    Ok((mu, phi, lambda))
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Singular("saddle solution is not finite".into()))
    }
}

/// `v_Ψ = Σ_i observe(v)_i φ_i`.
pub fn project_optimal_recovery(
    basis: &BasisSet,
    v: &DVector<f64>,
    ms: &MeasurementSet,
) -> Result<DVector<f64>> {
    check_len(basis.len(), ms.len())?;
    let obs = ms.observe(v)?;
    Ok(&basis.columns * obs.values)
}

/// `|⟨v, Γ(·, x_k)⟩ − v(x_k)|`.
pub fn rkhs_reproduce_check(
    vp: &VProduct,
    g: &GammaOperator,
    v: &DVector<f64>,
    node: usize,
) -> Result<f64> {
    let m = vp.size();
    check_len(m, v.len())?;
    if node >= m {
        return Err(invalid("node", format!("{node} out of range 0..{m}")));
    }
    let mut delta = DVector::zeros(m);
    delta[node] = 1.0 / vp.mesh().weights()[node];
    let k = gamma_apply(g, &delta)?;
    Ok((vp.inner(v, &k)? - v[node]).abs())
}

/// Why a localized problem was answered by the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// The patch has no more free nodes than active constraints.
    Infeasible,
    /// The local saddle system was singular or violated its constraints.
    Breakdown,
    /// The patch is too large for a dense local factorization.
    TooLarge,
}

impl Fallback {
    pub fn describe(&self) -> &'static str {
        match self {
            Fallback::Infeasible => "patch too small for its constraints",
            Fallback::Breakdown => "local saddle system broke down",
            Fallback::TooLarge => "patch too large for a local dense solve",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalizedBasis {
    pub basis: BasisSet,
    /// Number of nodes in each patch.
    pub patch_sizes: Vec<usize>,
    /// Measurements whose local problem fell back to the global solve.
    pub fallbacks: Vec<(usize, Fallback)>,
}

/// Minimization restricted to the nodes within `radius` of each
/// measurement's support, with the constraints of every measurement whose
/// support meets the patch. `φ_i` vanishes outside its patch.
pub fn basis_by_localized_minimization(
    vp: &VProduct,
    ms: &MeasurementSet,
    radius: f64,
) -> Result<LocalizedBasis> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid("method.radius", "must be positive and finite"));
    }
    let m = vp.size();
    check_len(m, ms.duals().nrows())?;
    let n = ms.len();
    let mesh = vp.mesh();
    let global: OnceLock<Result<BasisSet>> = OnceLock::new();
    let global_column = |i: usize| -> Result<DVector<f64>> {
        match global.get_or_init(|| basis_by_minimization(vp, ms)) {
            Ok(b) => Ok(b.column(i)),
            Err(e) => Err(e.clone()),
        }
    };
    let reach = radius * (1.0 + 1e-12);
    let patches: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sup: Vec<_> = ms.support(i).iter().map(|&k| mesh.node(k)).collect();
            (0..m)
                .filter(|&k| {
                    let x = mesh.node(k);
                    sup.iter().any(|s| mesh.distance(&x, s) <= reach)
                })
                .collect()
        })
        .collect();
    let results: Vec<(DVector<f64>, Option<Fallback>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            if patches[i].len() == m {
                return Ok((global_column(i)?, None));
            }
            match local_solve(vp, ms, i, &patches[i]) {
                Ok(phi) => Ok((phi, None)),
                Err(reason) => {
                    log::warn!(
                        "localized basis {i}: {}; using the global solve",
                        reason.describe()
                    );
                    Ok((global_column(i)?, Some(reason)))
                }
            }
        })
        .collect::<Result<_>>()?;
    let fallbacks = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.1.map(|f| (i, f)))
        .collect();
    Ok(LocalizedBasis {
        basis: BasisSet {
            columns: DMatrix::from_columns(
                &results.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
            ),
            theta_vectors: None,
        },
        patch_sizes: patches.iter().map(Vec::len).collect(),
        fallbacks,
    })
}

fn local_solve(
    vp: &VProduct,
    ms: &MeasurementSet,
    i: usize,
    patch: &[usize],
) -> std::result::Result<DVector<f64>, Fallback> {
    let m = vp.size();
    let b = &vp.b;
    let mut in_patch = vec![false; m];
    for &k in patch {
        in_patch[k] = true;
    }
    let active: Vec<usize> = (0..ms.len())
        .filter(|&j| ms.support(j).iter().any(|&k| in_patch[k]))
        .collect();
    if patch.len() <= active.len() {
        return Err(Fallback::Infeasible);
    }
    // rows of B touched by the patch columns
    let rows: Vec<usize> = (0..m)
        .filter(|&r| {
            let (lo, hi) = b.row_range(r);
            (lo..hi).any(|c| in_patch[c] && b.get(r, c) != 0.0)
        })
        .collect();
    let size = rows.len() + patch.len() + active.len();
    if size > LOCAL_KKT_LIMIT {
        return Err(Fallback::TooLarge);
    }
    let w = vp.mesh().weights();
    let winv: Vec<f64> = rows.iter().map(|&r| 1.0 / w[r]).collect();
    let bl = DMatrix::from_fn(rows.len(), patch.len(), |a, c| b.get(rows[a], patch[c]));
    let c = ms.constraint_matrix();
    let cl = DMatrix::from_fn(active.len(), patch.len(), |a, p| c[(active[a], patch[p])]);
    let k = dense_kkt(&winv, &bl, &cl);
    let mut rhs = DVector::zeros(size);
    let own = active
        .iter()
        .position(|&j| j == i)
        .ok_or(Fallback::Infeasible)?;
    rhs[rows.len() + patch.len() + own] = -1.0;
    let x = k.lu().solve(&rhs).ok_or(Fallback::Breakdown)?;
    let phi_p = x.rows(rows.len(), patch.len()).into_owned();
    let mut target = DVector::zeros(active.len());
    target[own] = 1.0;
    let resid = (&cl * &phi_p - target).amax();
    if !resid.is_finite() || resid > 1e-8 {
        return Err(Fallback::Breakdown);
    }
    let mut phi = DVector::zeros(m);
    for (p, &k) in patch.iter().enumerate() {
        phi[k] = phi_p[p];
    }
    Ok(phi)
}
