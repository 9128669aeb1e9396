//! Discrete operator pair `(L, B)` with homogeneous Dirichlet conditions,
//! its Green's action, and the noise-shaping operator `L_Λ`.

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::linalg::{BandLu, BandMatrix};
use crate::mesh::{CoefficientField, Mesh};

/// Assembled and factorized operator acting on interior nodal vectors.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    mesh: Mesh,
    matrix: BandMatrix,
    lu: BandLu,
    symmetric: bool,
}

impl DiscreteOperator {
    /// Wraps an arbitrary banded matrix; factorizes it once.
    pub fn from_matrix(mesh: &Mesh, matrix: BandMatrix) -> Result<Self> {
        check_len(mesh.len(), matrix.nrows())?;
        let lu = BandLu::factor(&matrix)?;
        let scale = matrix
            .triplets()
            .fold(0.0f64, |m, (_, _, v)| m.max(v.abs()));
        let symmetric = matrix.asymmetry() <= 1e-14 * scale;
        Ok(Self {
            mesh: mesh.clone(),
            matrix,
            lu,
            symmetric,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn matrix(&self) -> &BandMatrix {
        &self.matrix
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// `L v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.matrix.mul_vec(v)
    }

    /// Solves `L u = f` with `u = 0` on the boundary.
    pub fn greens_apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(f)
    }

    /// Green's action of the `L²`-adjoint: `W⁻¹ L⁻ᵀ W f`.
    pub fn adjoint_greens_apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.size(), f.len())?;
        let w = self.mesh.weights();
        let y = self.lu.solve_transpose(&f.component_mul(w))?;
        Ok(y.component_div(w))
    }

    /// `L⁻ᵀ f` without weights.
    pub(crate) fn solve_transpose(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve_transpose(f)
    }

    /// Coordinate listing, one `row col value` line per stored nonzero, 0-based.
    pub fn to_triplets(&self) -> String {
        self.matrix
            .triplets()
            .map(|(i, j, v)| format!("{i} {j} {v:?}\n"))
            .collect()
    }
}

/// Vertex-centred finite-volume assembly of `−div(a ∇u)`.
///
/// In 1D the flux between neighbouring nodes crosses exactly one cell. In 2D the
/// dual face between two neighbours is split between the two cells on either
/// side of the grid edge, so the face conductivity is their mean.
pub fn assemble_elliptic(mesh: &Mesh, a: &CoefficientField) -> Result<DiscreteOperator> {
    assemble_with_drift(mesh, a, [0.0, 0.0])
}

/// Discrete Dirichlet Laplacian `−Δ` (the `a ≡ 1` operator).
pub fn assemble_laplacian(mesh: &Mesh) -> Result<DiscreteOperator> {
    let one = crate::mesh::make_coefficient(mesh, &crate::mesh::CoefficientKind::Constant(1.0))?;
    assemble_elliptic(mesh, &one)
}

/// `−div(a ∇u) + drift · ∇u` with a centred first-order term.
///
/// Produces nonsymmetric operators for exercising the adjoint code paths; the
/// production pipeline only ships the symmetric family.
#[doc(hidden)]
pub fn assemble_with_drift(
    mesh: &Mesh,
    a: &CoefficientField,
    drift: [f64; 2],
) -> Result<DiscreteOperator> {
    if a.dim() != mesh.dim() || a.cells().len() != mesh.num_cells() {
        return Err(Error::DimensionMismatch {
            expected: mesh.num_cells(),
            found: a.cells().len(),
        });
    }
    let n = mesh.cells_per_side();
    let h = mesh.spacing();
    let inv_h2 = 1.0 / (h * h);
    let cells = a.cells();
    let m = mesh.len();
    let bw = if mesh.dim() == 1 { 1 } else { n - 1 };
    let mut mat = BandMatrix::zeros(m, bw, bw);

    // flux between node p and neighbour q (q may be a boundary node)
    let mut couple = |p: usize, q: Option<usize>, k: f64, b: f64| {
        mat.add(p, p, k * inv_h2);
        if let Some(q) = q {
            mat.add(p, q, -k * inv_h2 + b / (2.0 * h));
        }
    };

    if mesh.dim() == 1 {
        for i in 1..n {
            let p = mesh.node_index(i, 0).unwrap();
            couple(p, mesh.node_index(i - 1, 0), cells[i - 1].a11, -drift[0]);
            couple(p, mesh.node_index(i + 1, 0), cells[i].a11, drift[0]);
        }
    } else {
        for i in 1..n {
            for j in 1..n {
                if cells[mesh.cell_index(i, j)].a12 != 0.0 {
                    return Err(Error::Unsupported(
                        "off-diagonal coefficient entries need a nine-point stencil".into(),
                    ));
                }
                let p = mesh.node_index(i, j).unwrap();
                let c = |ci: usize, cj: usize| cells[mesh.cell_index(ci, cj)];
                let east = 0.5 * (c(i, j - 1).a11 + c(i, j).a11);
                let west = 0.5 * (c(i - 1, j - 1).a11 + c(i - 1, j).a11);
                let north = 0.5 * (c(i - 1, j).a22 + c(i, j).a22);
                let south = 0.5 * (c(i - 1, j - 1).a22 + c(i, j - 1).a22);
                couple(p, mesh.node_index(i + 1, j), east, drift[0]);
                couple(p, mesh.node_index(i - 1, j), west, -drift[0]);
                couple(p, mesh.node_index(i, j + 1), north, drift[1]);
                couple(p, mesh.node_index(i, j - 1), south, -drift[1]);
            }
        }
    }
    DiscreteOperator::from_matrix(mesh, mat)
}

/// Covariance model of the source noise `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// `ξ` solves `(−Δ)^power ξ = ξ'` with Dirichlet conditions and white `ξ'`.
    Regularized {
        power: u32,
    },
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    lap: Option<DiscreteOperator>,
}

impl NoiseModel {
    pub fn white() -> Self {
        Self {
            kind: NoiseKind::White,
            lap: None,
        }
    }

    pub fn regularized(mesh: &Mesh, power: u32) -> Result<Self> {
        if power == 0 {
            return Err(crate::error::invalid("noise.power", "must be at least 1"));
        }
        Ok(Self {
            kind: NoiseKind::Regularized { power },
            lap: Some(assemble_laplacian(mesh)?),
        })
    }

    pub fn new(mesh: &Mesh, kind: NoiseKind) -> Result<Self> {
        match kind {
            NoiseKind::White => Ok(Self::white()),
            NoiseKind::Regularized { power } => Self::regularized(mesh, power),
        }
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    fn lap(&self) -> Result<(&DiscreteOperator, u32)> {
        match (&self.lap, self.kind) {
            (Some(l), NoiseKind::Regularized { power }) => Ok((l, power)),
            _ => Err(Error::Unsupported(
                "noise model has no shaping Laplacian".into(),
            )),
        }
    }

    fn power(&self) -> u32 {
        match self.kind {
            NoiseKind::White => 0,
            NoiseKind::Regularized { power } => power,
        }
    }

    fn repeat(
        &self,
        f: &DVector<f64>,
        step: impl Fn(&DiscreteOperator, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        if self.power() == 0 {
            return Ok(f.clone());
        }
        let (lap, k) = self.lap()?;
        check_len(lap.size(), f.len())?;
        let mut v = f.clone();
        for _ in 0..k {
            v = step(lap, &v)?;
        }
        Ok(v)
    }

    /// `L_Λ f` (identity for white noise).
    pub fn shape_apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.repeat(f, |l, v| l.apply(v))
    }

    /// `L_Λ⁻¹ f`.
    pub fn shape_solve(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.repeat(f, |l, v| l.greens_apply(v))
    }

    /// `L_Λ⁻ᵀ f`.
    pub fn shape_solve_transpose(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        self.repeat(f, |l, v| l.solve_transpose(v))
    }

    /// Banded matrix of `L_Λ`.
    pub fn shape_matrix(&self, size: usize) -> Result<BandMatrix> {
        let mut m = BandMatrix::identity(size);
        if self.power() > 0 {
            let (lap, k) = self.lap()?;
            for _ in 0..k {
                m = lap.matrix().matmul(&m)?;
            }
        }
        Ok(m)
    }

    /// Covariance of the nodal noise vector: `W⁻¹` for white noise and
    /// `L_Λ⁻¹ W⁻¹ L_Λ⁻ᵀ` otherwise.
    pub fn covariance_apply(&self, mesh: &Mesh, f: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(mesh.len(), f.len())?;
        let z = self.shape_solve_transpose(f)?;
        self.shape_solve(&z.component_div(mesh.weights()))
    }
}

/// Applies the inverse noise covariance, `L_Λᵀ W L_Λ f`, so that
/// `fᵀ · result = ‖L_Λ f‖²_{L²}`.
pub fn noise_apply_inverse_covariance(
    nm: &NoiseModel,
    mesh: &Mesh,
    f: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len(mesh.len(), f.len())?;
    let s = nm.shape_apply(f)?.component_mul(mesh.weights());
    if nm.power() == 0 {
        return Ok(s);
    }
    let (lap, k) = nm.lap()?;
    let mut v = s;
    for _ in 0..k {
        v = lap.matrix().tr_mul_vec(&v)?;
    }
    Ok(v)
}
