//! Gaussian conditioning: the covariance action `Γ`, the measurement Gram
//! matrix `Θ`, the conditioned basis `φ_i`, posterior mean and variance.
//!
//! Every quantity is computed through the half factor
//! `z(f) = L_Λ⁻ᵀ L⁻ᵀ W f`, for which `Γ f = L⁻¹ L_Λ⁻¹ W⁻¹ z(f)` and
//! `∫∫ f Γ g = z(f)ᵀ W⁻¹ z(g)`. Writing `Θ` as such a Gram product keeps it
//! symmetric to rounding, and a thin QR `W^{-1/2} Z = Q R` of the stacked
//! factors gives the basis and the variance with errors growing like
//! `√cond(Θ)` rather than `cond(Θ)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{check_len, invalid, Error, Result};
use crate::measure::{MeasurementSet, Observation};
use crate::mesh::Mesh;
use crate::operator::{DiscreteOperator, NoiseModel};

/// Largest mesh for which the variance is evaluated at every node by default.
pub const DENSE_LIMIT: usize = 2000;

/// Covariance operator of the solution field `u` of `L u = ξ`.
#[derive(Debug, Clone)]
pub struct GammaOperator {
    op: DiscreteOperator,
    noise: NoiseModel,
}

impl GammaOperator {
    pub fn new(op: DiscreteOperator, noise: NoiseModel) -> Self {
        Self { op, noise }
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

    /// `L_Λ⁻ᵀ L⁻ᵀ W f`.
    pub fn half_factor(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.size(), f.len())?;
        let y = self
            .op
            .solve_transpose(&f.component_mul(self.mesh().weights()))?;
        self.noise.shape_solve_transpose(&y)
    }

    /// `L⁻¹ L_Λ⁻¹ W⁻¹ z`, the inverse companion of [`Self::half_factor`].
    pub fn half_expand(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.size(), z.len())?;
        let s = self
            .noise
            .shape_solve(&z.component_div(self.mesh().weights()))?;
        self.op.greens_apply(&s)
    }

    /// `z₁ᵀ W⁻¹ z₂`.
    pub fn pair(&self, z1: &DVector<f64>, z2: &DVector<f64>) -> f64 {
        z1.iter()
            .zip(z2.iter())
            .zip(self.mesh().weights().iter())
            .map(|((a, b), w)| a * b / w)
            .sum()
    }

    /// Half factor of the discrete Dirac at node `k`.
    pub fn node_factor(&self, k: usize) -> Result<DVector<f64>> {
        let m = self.size();
        if k >= m {
            return Err(invalid("node", format!("{k} out of range 0..{m}")));
        }
        let mut e = DVector::zeros(m);
        e[k] = 1.0;
        let y = self.op.solve_transpose(&e)?;
        self.noise.shape_solve_transpose(&y)
    }

    /// `Γ(x_k, x_k)`.
    pub fn diagonal_at(&self, k: usize) -> Result<f64> {
        let z = self.node_factor(k)?;
        Ok(self.pair(&z, &z))
    }
}

/// Discrete `∫ Γ(x, y) f(y) dy`.
pub fn gamma_apply(g: &GammaOperator, f: &DVector<f64>) -> Result<DVector<f64>> {
    g.half_expand(&g.half_factor(f)?)
}

/// Symmetric positive definite Gram matrix of the measurements under `Γ`,
/// together with the per-measurement vectors it was built from.
#[derive(Debug, Clone)]
pub struct ThetaMatrix {
    values: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    factors: Option<DMatrix<f64>>,
    thetas: Option<DMatrix<f64>>,
    qr: Option<ThinQr>,
}

/// `W^{-1/2} Z = Q R`, `Q` with orthonormal columns, `R` upper triangular.
#[derive(Debug, Clone)]
struct ThinQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl ThetaMatrix {
    /// Factorizes an externally supplied matrix. Fails with the minimum
    /// eigenvalue if it is not symmetric positive definite.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(invalid("theta", "matrix must be square"));
        }
        let scale = values.amax();
        let asym = (&values - values.transpose()).amax();
        if asym > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(invalid(
                "theta",
                format!("asymmetry {asym:e} exceeds 1e-12 relative"),
            ));
        }
        let chol = match Cholesky::new(values.clone()) {
            Some(c) => c,
            None => {
                let min = SymmetricEigen::new(values.clone()).eigenvalues.min();
                return Err(Error::NotPositiveDefinite {
                    min_eigenvalue: min,
                });
            }
        };
        Ok(Self {
            values,
            chol,
            factors: None,
            thetas: None,
            qr: None,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// `Θ⁻¹ b`, through `R⁻¹ R⁻ᵀ` when the factors are known.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.len(), b.len())?;
        match &self.qr {
            Some(f) => {
                let y =
                    f.r.tr_solve_upper_triangular(b)
                        .ok_or_else(|| Error::Singular("theta factor".into()))?;
                f.r.solve_upper_triangular(&y)
                    .ok_or_else(|| Error::Singular("theta factor".into()))
            }
            None => Ok(self.chol.solve(b)),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match self.r_inverse() {
            Some(ri) => {
                let mut inv = &ri * ri.transpose();
                symmetrize(&mut inv);
                inv
            }
            None => self.chol.inverse(),
        }
    }

    fn r_inverse(&self) -> Option<DMatrix<f64>> {
        let f = self.qr.as_ref()?;
        let n = self.len();
        f.r.solve_upper_triangular(&DMatrix::identity(n, n))
    }

    /// Half factors `z_j` of the dual vectors, as columns.
    pub fn factors(&self) -> Option<&DMatrix<f64>> {
        self.factors.as_ref()
    }

    /// `θ_j = Γ ψ_j`, as columns.
    pub fn theta_vectors(&self) -> Option<&DMatrix<f64>> {
        self.thetas.as_ref()
    }

    /// Smallest eigenvalue; from the singular values of `R` when known,
    /// which resolves it below `ε ‖Θ‖`.
    pub fn min_eigenvalue(&self) -> f64 {
        match &self.qr {
            Some(f) => f.r.singular_values().min().powi(2),
            None => SymmetricEigen::new(self.values.clone()).eigenvalues.min(),
        }
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    for i in 0..a.nrows() {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// `Θ_ij = ∫∫ ψ_i Γ ψ_j`, with one pair of solves per measurement.
pub fn assemble_theta(g: &GammaOperator, ms: &MeasurementSet) -> Result<ThetaMatrix> {
    let m = g.size();
    check_len(m, ms.duals().nrows())?;
    let n = ms.len();
    let cols: Vec<(DVector<f64>, DVector<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let z = g.half_factor(&ms.dual(j))?;
            let th = g.half_expand(&z)?;
            Ok((z, th))
        })
        .collect::<Result<_>>()?;
    let zs = DMatrix::from_columns(&cols.iter().map(|c| c.0.clone()).collect::<Vec<_>>());
    let thetas = DMatrix::from_columns(&cols.iter().map(|c| c.1.clone()).collect::<Vec<_>>());
    let winv = g.mesh().weights().map(|w| 1.0 / w);
    let scaled = DMatrix::from_fn(m, n, |r, c| zs[(r, c)] * winv[r]);
    let mut values = zs.transpose() * scaled;
    // exact symmetrization of the rounding in the product
    symmetrize(&mut values);
    let mut th = ThetaMatrix::from_values(values)?;
    if m >= n {
        let isw = g.mesh().weights().map(|w| 1.0 / w.sqrt());
        let y = DMatrix::from_fn(m, n, |r, c| zs[(r, c)] * isw[r]);
        let qr = y.qr();
        let (q, r) = (qr.q(), qr.r());
        if r.diagonal().iter().all(|d| *d != 0.0) {
            th.qr = Some(ThinQr { q, r });
        }
    }
    th.factors = Some(zs);
    th.thetas = Some(thetas);
    Ok(th)
}

/// Basis functions `φ_i` as the columns of an `M×N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub columns: DMatrix<f64>,
    /// `θ_i = Γ ψ_i`, present when the basis came from conditioning.
    pub theta_vectors: Option<DMatrix<f64>>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.columns.column(i).into_owned()
    }

    /// Largest `|observe(φ_i)_j − δ_ij|`.
    pub fn biorthogonality_error(&self, ms: &MeasurementSet) -> f64 {
        let g = ms.constraint_matrix() * &self.columns;
        (g - DMatrix::identity(self.len(), self.len())).amax()
    }

    /// CSV `node_index,x[,y],phi_1..phi_N`.
    pub fn to_csv(&self, mesh: &Mesh) -> String {
        let names: Vec<String> = (1..=self.len()).map(|i| format!("phi_{i}")).collect();
        nodal_csv(mesh, &names, |k, i| self.columns[(k, i)], 0..mesh.len())
    }
}

pub(crate) fn nodal_csv(
    mesh: &Mesh,
    names: &[String],
    value: impl Fn(usize, usize) -> f64,
    nodes: impl Iterator<Item = usize>,
) -> String {
    let mut s = String::from(if mesh.dim() == 1 {
        "node_index,x"
    } else {
        "node_index,x,y"
    });
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for k in nodes {
        let p = mesh.node(k);
        s.push_str(&k.to_string());
        for c in &p[..mesh.dim()] {
            s.push_str(&format!(",{c:?}"));
        }
        for i in 0..names.len() {
            s.push_str(&format!(",{:?}", value(k, i)));
        }
        s.push('\n');
    }
    s
}

/// `φ_i = Σ_j Θ⁻¹_ij θ_j`.
pub fn basis_by_conditioning(
    g: &GammaOperator,
    ms: &MeasurementSet,
    th: &ThetaMatrix,
) -> Result<BasisSet> {
    check_len(ms.len(), th.len())?;
    if let Some(f) = &th.qr {
        // Z Θ⁻¹ = W^{1/2} Q R⁻ᵀ, expanded column by column
        check_len(g.size(), f.q.nrows())?;
        let xt =
            f.r.solve_upper_triangular(&f.q.transpose())
                .ok_or_else(|| Error::Singular("theta factor".into()))?;
        let sw = g.mesh().weights().map(f64::sqrt);
        let cols: Vec<DVector<f64>> = (0..ms.len())
            .into_par_iter()
            .map(|i| g.half_expand(&xt.row(i).transpose().component_mul(&sw)))
            .collect::<Result<_>>()?;
        return Ok(BasisSet {
            columns: DMatrix::from_columns(&cols),
            theta_vectors: th.theta_vectors().cloned(),
        });
    }
    let thetas = match th.theta_vectors() {
        Some(t) => t.clone(),
        None => {
            let cols: Vec<DVector<f64>> = (0..ms.len())
                .into_par_iter()
                .map(|j| gamma_apply(g, &ms.dual(j)))
                .collect::<Result<_>>()?;
            DMatrix::from_columns(&cols)
        }
    };
    check_len(g.size(), thetas.nrows())?;
    let columns = &thetas * th.inverse();
    Ok(BasisSet {
        columns,
        theta_vectors: Some(thetas),
    })
}

/// Conditional expectation `Σ_i Ψ_i φ_i`.
pub fn posterior_mean(basis: &BasisSet, obs: &Observation) -> Result<DVector<f64>> {
    check_len(basis.len(), obs.values.len())?;
    Ok(&basis.columns * &obs.values)
}

/// Posterior variance at selected nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceField {
    pub nodes: Vec<usize>,
    pub values: DVector<f64>,
    /// `Γ(x, x)` at the same nodes.
    pub prior: DVector<f64>,
}

impl VarianceField {
    /// Variance at node `k`, if it was evaluated.
    pub fn at(&self, k: usize) -> Option<f64> {
        self.nodes
            .iter()
            .position(|&n| n == k)
            .map(|i| self.values[i])
    }

    /// CSV `node_index,x[,y],sigma2`.
    pub fn to_csv(&self, mesh: &Mesh) -> String {
        let pos: std::collections::HashMap<usize, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect();
        nodal_csv(
            mesh,
            &["sigma2".to_string()],
            |k, _| self.values[pos[&k]],
            self.nodes.iter().copied(),
        )
    }
}

/// Per-node quantities of the variance computation.
#[derive(Debug, Clone)]
pub struct NodeConditioning {
    /// `Γ(x, x)`.
    pub prior: f64,
    /// `θ_j(x)`.
    pub theta: DVector<f64>,
    /// `Θ⁻¹ θ(x)`, the minimizer of the mean-square prediction error.
    pub weights: DVector<f64>,
    /// `Γ(x,x) − θ(x)ᵀ Θ⁻¹ θ(x)`, as the squared norm of the part of the
    /// node's half factor orthogonal to the measurement factors.
    residual: f64,
    /// `Γ(x,x) − ‖Qᵀ y‖²`; negative only if `Q` lost orthogonality.
    defect: f64,
}

impl NodeConditioning {
    /// `E[(u(x) − cᵀΨ)²] = Γ(x,x) − 2cᵀθ(x) + cᵀΘc`.
    pub fn objective(&self, th: &ThetaMatrix, c: &DVector<f64>) -> f64 {
        self.prior - 2.0 * c.dot(&self.theta) + c.dot(&(th.values() * c))
    }

    /// `Γ(x,x) − θ(x)ᵀ Θ⁻¹ θ(x)`.
    pub fn variance(&self) -> f64 {
        self.residual
    }
}

/// Prior variance, cross-covariances and optimal weights at node `k`.
pub fn condition_at(g: &GammaOperator, th: &ThetaMatrix, k: usize) -> Result<NodeConditioning> {
    let zs = th
        .factors()
        .ok_or_else(|| invalid("theta", "missing half factors; use assemble_theta"))?;
    let zx = g.node_factor(k)?;
    let prior = g.pair(&zx, &zx);
    let scaled = zx.component_div(g.mesh().weights());
    let theta = zs.tr_mul(&scaled);
    let weights = th.solve(&theta)?;
    let (residual, defect) = match &th.qr {
        Some(f) => {
            let y = zx.component_div(&g.mesh().weights().map(f64::sqrt));
            let c = f.q.tr_mul(&y);
            let mut r = &y - &f.q * &c;
            // one reorthogonalization pass
            let c2 = f.q.tr_mul(&r);
            r -= &f.q * c2;
            (r.norm_squared(), prior - c.norm_squared())
        }
        None => {
            let v = prior - theta.dot(&weights);
            (v.max(0.0), v)
        }
    };
    Ok(NodeConditioning {
        prior,
        theta,
        weights,
        residual,
        defect,
    })
}

/// `σ²(x) = Γ(x,x) − θ(x)ᵀ Θ⁻¹ θ(x)` at `nodes`, or at every node when
/// `nodes` is `None` and the mesh has at most [`DENSE_LIMIT`] nodes.
pub fn posterior_variance(
    g: &GammaOperator,
    ms: &MeasurementSet,
    th: &ThetaMatrix,
    nodes: Option<&[usize]>,
) -> Result<VarianceField> {
    check_len(ms.len(), th.len())?;
    let m = g.size();
    let nodes: Vec<usize> = match nodes {
        Some(n) => n.to_vec(),
        None if m <= DENSE_LIMIT => (0..m).collect(),
        None => {
            return Err(Error::TooLarge {
                size: m,
                limit: DENSE_LIMIT,
                hint: "pass an explicit node subset for the variance",
            })
        }
    };
    let out: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|&k| {
            let c = condition_at(g, th, k)?;
            if c.defect < -1e-10 * c.prior {
                return Err(Error::NegativeVariance {
                    node: k,
                    value: c.defect,
                    scale: c.prior,
                });
            }
            Ok((c.variance(), c.prior))
        })
        .collect::<Result<_>>()?;
    Ok(VarianceField {
        nodes,
        values: DVector::from_iterator(out.len(), out.iter().map(|p| p.0)),
        prior: DVector::from_iterator(out.len(), out.iter().map(|p| p.1)),
    })
}
