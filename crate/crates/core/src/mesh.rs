//! Uniform grids on the unit box, rough coefficient fields and fill distances.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// A point of `[0,1]^dim`; the second coordinate is ignored in 1D.
pub type Point = [f64; 2];

/// Interior nodes of the uniform grid with `n` cells per side on `[0,1]^dim`.
///
/// Boundary nodes are never stored: the operators eliminate them, so every
/// nodal vector vanishes on the boundary implicitly. Nodes are ordered
/// lexicographically by `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    n: usize,
    h: f64,
    nodes: Vec<Point>,
    weights: DVector<f64>,
}

impl Mesh {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(invalid("dim", format!("must be 1 or 2, got {dim}")));
        }
        if n < 2 {
            return Err(invalid("n", format!("must be at least 2, got {n}")));
        }
        let h = 1.0 / n as f64;
        let side = n - 1;
        let nodes: Vec<Point> = if dim == 1 {
            (1..n).map(|i| [i as f64 * h, 0.0]).collect()
        } else {
            (0..side * side)
                .map(|k| [(k / side + 1) as f64 * h, (k % side + 1) as f64 * h])
                .collect()
        };
        let weights = DVector::from_element(nodes.len(), h.powi(dim as i32));
        Ok(Self {
            dim,
            n,
            h,
            nodes,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_side(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Number of interior nodes, `(n-1)^dim`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> Point {
        self.nodes[k]
    }

    /// Lumped-mass quadrature weights, `h^dim` at every node.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn num_cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Index of the interior node with grid coordinates `(i, j)`, both in `1..n`.
    pub fn node_index(&self, i: usize, j: usize) -> Option<usize> {
        let side = self.n - 1;
        if i == 0 || i > side {
            return None;
        }
        if self.dim == 1 {
            return Some(i - 1);
        }
        if j == 0 || j > side {
            return None;
        }
        Some((i - 1) * side + (j - 1))
    }

    /// Cell `(i, j)` covers `[ih, (i+1)h] × [jh, (j+1)h]`.
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        if self.dim == 1 {
            i
        } else {
            i * self.n + j
        }
    }

    pub fn cell_center(&self, c: usize) -> Point {
        if self.dim == 1 {
            [(c as f64 + 0.5) * self.h, 0.0]
        } else {
            [
                ((c / self.n) as f64 + 0.5) * self.h,
                ((c % self.n) as f64 + 0.5) * self.h,
            ]
        }
    }

    /// All grid nodes including the boundary, used for sup-type geometry.
    pub fn closed_grid(&self) -> Vec<Point> {
        let m = self.n + 1;
        if self.dim == 1 {
            (0..m).map(|i| [i as f64 * self.h, 0.0]).collect()
        } else {
            (0..m * m)
                .map(|k| [(k / m) as f64 * self.h, (k % m) as f64 * self.h])
                .collect()
        }
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        let dx = a[0] - b[0];
        if self.dim == 1 {
            dx.abs()
        } else {
            dx.hypot(a[1] - b[1])
        }
    }

    /// Nearest interior node; ties go to the lowest index.
    pub fn nearest_node(&self, p: &Point) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, q) in self.nodes.iter().enumerate() {
            let d = self.distance(p, q);
            if d < best.0 - 1e-12 * self.h {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..self.dim).all(|c| (0.0..=1.0).contains(&p[c]))
    }

    /// Nodal interpolant of a function.
    pub fn sample(&self, f: impl Fn(&Point) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.nodes.iter().map(f))
    }
}

/// Mesh norm (fill distance) of a family of supports, evaluated over the
/// closed grid:
/// `H = max_x min_i max_{y ∈ S_i} |x − y|`.
///
/// Singleton supports give the point version `max_x min_i |x − x_i|`.
pub fn mesh_norm(mesh: &Mesh, supports: &[Vec<Point>]) -> Result<f64> {
    if supports.is_empty() {
        return Err(invalid("supports", "at least one support is required"));
    }
    if supports.iter().any(|s| s.is_empty()) {
        return Err(invalid("supports", "every support must be nonempty"));
    }
    let h = mesh
        .closed_grid()
        .iter()
        .map(|x| {
            supports
                .iter()
                .map(|s| s.iter().map(|y| mesh.distance(x, y)).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Ok(h)
}

/// Symmetric 2×2 conductivity of one cell; 1D fields use `a11` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTensor {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl CellTensor {
    pub fn isotropic(v: f64) -> Self {
        Self {
            a11: v,
            a12: 0.0,
            a22: v,
        }
    }

    fn eigen_range(&self, dim: usize) -> (f64, f64) {
        if dim == 1 {
            return (self.a11, self.a11);
        }
        let mean = 0.5 * (self.a11 + self.a22);
        let r = (0.5 * (self.a11 - self.a22)).hypot(self.a12);
        (mean - r, mean + r)
    }
}

/// Generator families for piecewise-constant coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientKind {
    Constant(f64),
    /// Stripes normal to the x-axis alternating between 1 and `contrast`.
    Layered {
        contrast: f64,
        layers: usize,
    },
    /// Blocks of `block` cells per side alternating between 1 and `contrast`.
    Checkerboard {
        contrast: f64,
        block: usize,
    },
    /// Independent truncated log-normal cell values spanning `[1, contrast]`.
    LognormalRough {
        seed: u64,
        contrast: f64,
    },
}

/// Per-cell coefficient tensors with their ellipticity bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    dim: usize,
    values: Vec<CellTensor>,
    lambda_min: f64,
    lambda_max: f64,
}

impl CoefficientField {
    pub fn from_cells(mesh: &Mesh, values: Vec<CellTensor>) -> Result<Self> {
        if values.len() != mesh.num_cells() {
            return Err(Error::DimensionMismatch {
                expected: mesh.num_cells(),
                found: values.len(),
            });
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (c, t) in values.iter().enumerate() {
            let (a, b) = t.eigen_range(mesh.dim());
            if !(a > 0.0) || !b.is_finite() {
                return Err(invalid(
                    "coefficient",
                    format!("cell {c} is not uniformly elliptic (eigenvalues {a}, {b})"),
                ));
            }
            lo = lo.min(a);
            hi = hi.max(b);
        }
        Ok(Self {
            dim: mesh.dim(),
            values,
            lambda_min: lo,
            lambda_max: hi,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[CellTensor] {
        &self.values
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// CSV with one row per cell: `cell_index,a11` (1D) or
    /// `cell_index,a11,a12,a22` (2D).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.dim == 1 {
            "cell_index,a11\n"
        } else {
            "cell_index,a11,a12,a22\n"
        });
        for (c, t) in self.values.iter().enumerate() {
            if self.dim == 1 {
                s.push_str(&format!("{c},{:?}\n", t.a11));
            } else {
                s.push_str(&format!("{c},{:?},{:?},{:?}\n", t.a11, t.a12, t.a22));
            }
        }
        s
    }

    pub fn from_csv(mesh: &Mesh, text: &str) -> Result<Self> {
        let want = if mesh.dim() == 1 { 2 } else { 4 };
        let mut cells = vec![None; mesh.num_cells()];
        for (ln, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                line: ln + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != want {
                return Err(parse_err(format!(
                    "expected {want} columns, found {}",
                    fields.len()
                )));
            }
            let idx: usize = fields[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{e}")))?;
            let nums = fields[1..]
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(format!("{e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let t = if mesh.dim() == 1 {
                CellTensor::isotropic(nums[0])
            } else {
                CellTensor {
                    a11: nums[0],
                    a12: nums[1],
                    a22: nums[2],
                }
            };
            let slot = cells
                .get_mut(idx)
                .ok_or_else(|| parse_err(format!("cell index {idx} out of range")))?;
            *slot = Some(t);
        }
        let values = cells
            .into_iter()
            .enumerate()
            .map(|(c, t)| t.ok_or_else(|| invalid("coefficient", format!("cell {c} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(mesh, values)
    }
}

/// Builds a coefficient field; a pure function of `(mesh, kind)`.
pub fn make_coefficient(mesh: &Mesh, kind: &CoefficientKind) -> Result<CoefficientField> {
    let n = mesh.cells_per_side();
    let cell_ij = |c: usize| {
        if mesh.dim() == 1 {
            (c, 0)
        } else {
            (c / n, c % n)
        }
    };
    let values: Vec<f64> = match *kind {
        CoefficientKind::Constant(c) => {
            if !(c > 0.0) || !c.is_finite() {
                return Err(invalid(
                    "coefficient.value",
                    format!("must be positive, got {c}"),
                ));
            }
            vec![c; mesh.num_cells()]
        }
        CoefficientKind::Layered { contrast, layers } => {
            check_contrast(contrast)?;
            if layers == 0 {
                return Err(invalid("coefficient.layers", "must be at least 1"));
            }
            (0..mesh.num_cells())
                .map(|c| {
                    let x = mesh.cell_center(c)[0];
                    let band = ((x * layers as f64).floor() as usize).min(layers - 1);
                    if band.is_multiple_of(2) {
                        1.0
                    } else {
                        contrast
                    }
                })
                .collect()
        }
        CoefficientKind::Checkerboard { contrast, block } => {
            check_contrast(contrast)?;
            if block == 0 {
                return Err(invalid("coefficient.block", "must be at least 1"));
            }
            (0..mesh.num_cells())
                .map(|c| {
                    let (i, j) = cell_ij(c);
                    if (i / block + j / block) % 2 == 0 {
                        1.0
                    } else {
                        contrast
                    }
                })
                .collect()
        }
        CoefficientKind::LognormalRough { seed, contrast } => {
            check_contrast(contrast)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..mesh.num_cells())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    contrast.powf((z.clamp(-3.0, 3.0) + 3.0) / 6.0)
                })
                .collect()
        }
    };
    CoefficientField::from_cells(
        mesh,
        values.into_iter().map(CellTensor::isotropic).collect(),
    )
}

fn check_contrast(contrast: f64) -> Result<()> {
    if contrast >= 1.0 && contrast.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            "coefficient.contrast",
            format!("must be >= 1, got {contrast}"),
        ))
    }
}
