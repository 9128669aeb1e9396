//! Measurement functionals `ψ_i` represented by nodal dual vectors `p_i`,
//! with `∫ u ψ_i = p_iᵀ W u`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::independent_columns;
use crate::mesh::{mesh_norm, Mesh, Point};

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementKind {
    /// Point evaluations, snapped to the nearest interior node.
    Dirac { points: Vec<Point> },
    /// Normalized indicators of the grid Voronoi cells of `centers`.
    VoronoiIndicator { centers: Vec<Point> },
    /// Nonnegative nodal densities, normalized to unit mass.
    Density { densities: Vec<DVector<f64>> },
}

impl MeasurementKind {
    pub fn name(&self) -> &'static str {
        match self {
            MeasurementKind::Dirac { .. } => "dirac",
            MeasurementKind::VoronoiIndicator { .. } => "voronoi_indicator",
            MeasurementKind::Density { .. } => "density",
        }
    }
}

/// `N` linearly independent measurement functionals on a mesh.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    kind: MeasurementKind,
    duals: DMatrix<f64>,
    constraints: DMatrix<f64>,
    supports: Vec<Vec<usize>>,
    dirac_nodes: Option<Vec<usize>>,
}

/// Observed values `Ψ_i = ∫ u ψ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: DVector<f64>,
}

impl MeasurementSet {
    pub fn new(mesh: &Mesh, kind: MeasurementKind) -> Result<Self> {
        let m = mesh.len();
        let w = mesh.weights();
        let (duals, dirac_nodes) = match &kind {
            MeasurementKind::Dirac { points } => {
                check_count(points.len())?;
                check_inside(mesh, points, "measurements.points")?;
                let nodes: Vec<usize> = points.iter().map(|p| mesh.nearest_node(p)).collect();
                for (i, a) in nodes.iter().enumerate() {
                    if let Some(j) = nodes[..i].iter().position(|b| b == a) {
                        return Err(Error::DuplicateMeasurement {
                            first: j,
                            second: i,
                            node: *a,
                        });
                    }
                }
                let mut p = DMatrix::zeros(m, nodes.len());
                for (i, &k) in nodes.iter().enumerate() {
                    p[(k, i)] = 1.0 / w[k];
                }
                (p, Some(nodes))
            }
            MeasurementKind::VoronoiIndicator { centers } => {
                check_count(centers.len())?;
                check_inside(mesh, centers, "measurements.centers")?;
                let mut p = DMatrix::zeros(m, centers.len());
                for (k, x) in mesh.nodes().iter().enumerate() {
                    let mut best = (f64::INFINITY, 0);
                    for (i, c) in centers.iter().enumerate() {
                        let d = mesh.distance(x, c);
                        if d < best.0 - 1e-12 * mesh.spacing() {
                            best = (d, i);
                        }
                    }
                    p[(k, best.1)] = 1.0;
                }
                for i in 0..centers.len() {
                    let vol: f64 = p.column(i).dot(w);
                    if vol == 0.0 {
                        return Err(Error::RankDeficient {
                            rank: i,
                            expected: centers.len(),
                        });
                    }
                    p.column_mut(i).scale_mut(1.0 / vol);
                }
                (p, None)
            }
            MeasurementKind::Density { densities } => {
                check_count(densities.len())?;
                let mut p = DMatrix::zeros(m, densities.len());
                for (i, d) in densities.iter().enumerate() {
                    check_len(m, d.len())?;
                    if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return Err(invalid(
                            "measurements.densities",
                            format!("density {i} has negative or non-finite values"),
                        ));
                    }
                    let mass = d.dot(w);
                    if !(mass > 0.0) {
                        return Err(invalid(
                            "measurements.densities",
                            format!("density {i} has zero mass"),
                        ));
                    }
                    p.set_column(i, &(d / mass));
                }
                (p, None)
            }
        };
        let constraints = duals.transpose() * DMatrix::from_diagonal(w);
        let rank = independent_columns(&duals.transpose(), 1e-10).len();
        if rank < duals.ncols() {
            return Err(Error::RankDeficient {
                rank,
                expected: duals.ncols(),
            });
        }
        let supports = (0..duals.ncols())
            .map(|i| (0..m).filter(|&k| duals[(k, i)] != 0.0).collect())
            .collect();
        Ok(Self {
            kind,
            duals,
            constraints,
            supports,
            dirac_nodes,
        })
    }

    pub fn dirac(mesh: &Mesh, points: Vec<Point>) -> Result<Self> {
        Self::new(mesh, MeasurementKind::Dirac { points })
    }

    pub fn voronoi(mesh: &Mesh, centers: Vec<Point>) -> Result<Self> {
        Self::new(mesh, MeasurementKind::VoronoiIndicator { centers })
    }

    pub fn density(mesh: &Mesh, densities: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(mesh, MeasurementKind::Density { densities })
    }

    pub fn kind(&self) -> &MeasurementKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.duals.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.duals.ncols() == 0
    }

    /// Dual vectors `p_i` as the columns of an `M×N` matrix.
    pub fn duals(&self) -> &DMatrix<f64> {
        &self.duals
    }

    pub fn dual(&self, i: usize) -> DVector<f64> {
        self.duals.column(i).into_owned()
    }

    /// Constraint matrix `C = Pᵀ W` (`N×M`), so that `observe(u) = C u`.
    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    /// Nodes where `p_i` is nonzero.
    pub fn support(&self, i: usize) -> &[usize] {
        &self.supports[i]
    }

    /// Snapped nodes of a Dirac set.
    pub fn dirac_nodes(&self) -> Option<&[usize]> {
        self.dirac_nodes.as_deref()
    }

    /// `Ψ_i = p_iᵀ W u`.
    pub fn observe(&self, u: &DVector<f64>) -> Result<Observation> {
        check_len(self.constraints.ncols(), u.len())?;
        Ok(Observation {
            values: &self.constraints * u,
        })
    }

    /// Fill distance of the measurement supports.
    pub fn mesh_norm(&self, mesh: &Mesh) -> Result<f64> {
        let supports: Vec<Vec<Point>> = self
            .supports
            .iter()
            .map(|s| s.iter().map(|&k| mesh.node(k)).collect())
            .collect();
        mesh_norm(mesh, &supports)
    }

    /// Sparse CSV listing of the dual vectors:
    /// `index,kind,node,x[,y],value`, one row per support node.
    pub fn to_csv(&self, mesh: &Mesh) -> String {
        let mut s = String::from(if mesh.dim() == 1 {
            "index,kind,node,x,value\n"
        } else {
            "index,kind,node,x,y,value\n"
        });
        for i in 0..self.len() {
            for &k in &self.supports[i] {
                let p = mesh.node(k);
                let coords = if mesh.dim() == 1 {
                    format!("{:?}", p[0])
                } else {
                    format!("{:?},{:?}", p[0], p[1])
                };
                s.push_str(&format!(
                    "{i},{},{k},{coords},{:?}\n",
                    self.kind.name(),
                    self.duals[(k, i)]
                ));
            }
        }
        s
    }
}

/// Convenience alias matching the construction entry point of the CLI.
pub fn make_measurements(mesh: &Mesh, kind: MeasurementKind) -> Result<MeasurementSet> {
    MeasurementSet::new(mesh, kind)
}

/// `per_side^dim` lattice points at `i/(per_side+1)` along each axis.
pub fn lattice_points(dim: usize, per_side: usize) -> Vec<Point> {
    let s = (per_side + 1) as f64;
    if dim == 1 {
        (1..=per_side).map(|i| [i as f64 / s, 0.0]).collect()
    } else {
        (1..=per_side)
            .flat_map(|i| (1..=per_side).map(move |j| [i as f64 / s, j as f64 / s]))
            .collect()
    }
}

/// Nodal tent density `max(0, 1 − |x − center|/radius)` (unnormalized).
pub fn hat_density(mesh: &Mesh, center: &Point, radius: f64) -> DVector<f64> {
    mesh.sample(|x| (1.0 - mesh.distance(x, center) / radius).max(0.0))
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        Err(invalid(
            "measurements",
            "at least one functional is required",
        ))
    } else {
        Ok(())
    }
}

fn check_inside(mesh: &Mesh, pts: &[Point], field: &'static str) -> Result<()> {
    match pts.iter().position(|p| !mesh.contains(p)) {
        Some(i) => Err(invalid(
            field,
            format!("point {i} lies outside the unit box"),
        )),
        None => Ok(()),
    }
}
