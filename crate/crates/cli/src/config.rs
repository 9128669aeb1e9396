//! Experiment configuration: a single JSON document, validated field by
//! field before anything is computed.

use std::path::PathBuf;

use bayeshom::measure::{hat_density, lattice_points, MeasurementKind, MeasurementSet};
use bayeshom::mesh::{make_coefficient, CoefficientKind, Mesh, Point};
use bayeshom::operator::{assemble_elliptic, DiscreteOperator, NoiseKind, NoiseModel};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Largest mesh the Monte Carlo oracle accepts.
pub const ORACLE_MAX_NODES: usize = 400;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub n: usize,
    pub coefficient: CoefficientSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub measurements: MeasurementSpec,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default)]
    pub study: StudySpec,
    /// Nodes at which the variance is written; every node when absent.
    #[serde(default)]
    pub variance_nodes: Option<Vec<usize>>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    Constant {
        value: f64,
    },
    Layered {
        contrast: f64,
        layers: usize,
    },
    Checkerboard {
        contrast: f64,
        #[serde(default = "default_block")]
        block: usize,
    },
    LognormalRough {
        seed: u64,
        contrast: f64,
    },
}

fn default_block() -> usize {
    1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    White,
    Regularized {
        power: u32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HatSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementSpec {
    /// Explicit `points` or a `lattice` of `lattice^dim` points.
    Dirac {
        #[serde(default)]
        points: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        lattice: Option<usize>,
    },
    VoronoiIndicator {
        #[serde(default)]
        centers: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        lattice: Option<usize>,
    },
    /// Tent densities, normalized to unit mass.
    Density {
        #[serde(default)]
        hats: Option<Vec<HatSpec>>,
        /// Hats of radius `spacing` centred on a lattice.
        #[serde(default)]
        lattice: Option<usize>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    #[default]
    Conditioning,
    Variational,
    Localized {
        radius: f64,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudySpec {
    #[default]
    None,
    Pointwise {
        trials: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Lattice sizes per side, one measurement set of the configured kind
    /// per level.
    Scaling {
        #[serde(default)]
        levels: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    Oracle {
        samples: usize,
        #[serde(default)]
        seed: u64,
        /// Nodes to regress at; every fourth node when absent.
        #[serde(default)]
        nodes: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Everything derived from a configuration before any solve.
pub struct Setup {
    pub mesh: Mesh,
    pub op: DiscreteOperator,
    pub noise: NoiseModel,
    pub measurements: MeasurementSet,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            err(
                "config",
                format!("{e} (line {}, column {})", e.line(), e.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_points(&self, field: &str, pts: &[Vec<f64>]) -> Result<(), ConfigError> {
        if pts.is_empty() {
            return Err(err(field, "at least one point is required"));
        }
        for (i, p) in pts.iter().enumerate() {
            if p.len() != self.dim {
                return Err(err(
                    format!("{field}[{i}]"),
                    format!("expected {} coordinates, found {}", self.dim, p.len()),
                ));
            }
            if p.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
                return Err(err(
                    format!("{field}[{i}]"),
                    "coordinates must lie strictly inside (0, 1)",
                ));
            }
        }
        Ok(())
    }

    fn check_source(
        &self,
        field: &str,
        explicit: bool,
        lattice: Option<usize>,
    ) -> Result<(), ConfigError> {
        match (explicit, lattice) {
            (true, Some(_)) => Err(err(
                field,
                "give either explicit locations or `lattice`, not both",
            )),
            (false, None) => Err(err(field, "explicit locations or `lattice` required")),
            (false, Some(0)) => Err(err(format!("{field}.lattice"), "must be at least 1")),
            _ => Ok(()),
        }
    }

    /// Checks every constraint that can be checked without solving.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=2).contains(&self.dim) {
            return Err(err("dim", "must be 1 or 2"));
        }
        if self.n < 2 {
            return Err(err("n", "must be at least 2"));
        }
        let m = (self.n - 1).pow(self.dim as u32);
        match &self.coefficient {
            CoefficientSpec::Constant { value } if !(*value > 0.0 && value.is_finite()) => {
                return Err(err("coefficient.value", "must be positive and finite"))
            }
            CoefficientSpec::Layered { contrast, layers } => {
                check_contrast(*contrast)?;
                if *layers == 0 {
                    return Err(err("coefficient.layers", "must be at least 1"));
                }
            }
            CoefficientSpec::Checkerboard { contrast, block } => {
                check_contrast(*contrast)?;
                if *block == 0 {
                    return Err(err("coefficient.block", "must be at least 1"));
                }
            }
            CoefficientSpec::LognormalRough { contrast, .. } => check_contrast(*contrast)?,
            _ => {}
        }
        if let NoiseSpec::Regularized { power } = self.noise {
            if power == 0 {
                return Err(err("noise.power", "must be at least 1"));
            }
        }
        let count = match &self.measurements {
            MeasurementSpec::Dirac { points, lattice } => {
                self.check_source("measurements", points.is_some(), *lattice)?;
                if let Some(p) = points {
                    self.check_points("measurements.points", p)?;
                }
                self.measurement_count()
            }
            MeasurementSpec::VoronoiIndicator { centers, lattice } => {
                self.check_source("measurements", centers.is_some(), *lattice)?;
                if let Some(p) = centers {
                    self.check_points("measurements.centers", p)?;
                }
                self.measurement_count()
            }
            MeasurementSpec::Density { hats, lattice } => {
                self.check_source("measurements", hats.is_some(), *lattice)?;
                if let Some(h) = hats {
                    let centers: Vec<Vec<f64>> = h.iter().map(|h| h.center.clone()).collect();
                    self.check_points("measurements.hats", &centers)?;
                    if let Some(i) = h
                        .iter()
                        .position(|h| !(h.radius > 0.0 && h.radius.is_finite()))
                    {
                        return Err(err(
                            format!("measurements.hats[{i}].radius"),
                            "must be positive",
                        ));
                    }
                }
                self.measurement_count()
            }
        };
        if count > m {
            return Err(err(
                "measurements",
                format!("{count} functionals exceed the {m} interior nodes"),
            ));
        }
        if let MethodSpec::Localized { radius } = self.method {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(err("method.radius", "must be positive and finite"));
            }
        }
        if let Some(nodes) = &self.variance_nodes {
            if nodes.is_empty() {
                return Err(err("variance_nodes", "must not be empty"));
            }
            if let Some(k) = nodes.iter().find(|&&k| k >= m) {
                return Err(err(
                    "variance_nodes",
                    format!("node {k} out of range 0..{m}"),
                ));
            }
        } else if m > bayeshom::posterior::DENSE_LIMIT {
            return Err(err(
                "variance_nodes",
                format!(
                    "required when the mesh has more than {} nodes",
                    bayeshom::posterior::DENSE_LIMIT
                ),
            ));
        }
        match &self.study {
            StudySpec::None => {}
            StudySpec::Pointwise { trials, .. } => {
                if *trials == 0 {
                    return Err(err("study.trials", "must be at least 1"));
                }
            }
            StudySpec::Scaling { levels, .. } => {
                if levels.len() < 3 {
                    return Err(err(
                        "study.levels",
                        format!("at least 3 levels are required, found {}", levels.len()),
                    ));
                }
                if levels.contains(&0) {
                    return Err(err("study.levels", "lattice sizes must be at least 1"));
                }
                if let Some(&l) = levels.iter().find(|&&l| l.pow(self.dim as u32) >= m) {
                    return Err(err(
                        "study.levels",
                        format!("level {l} measures every node of the mesh"),
                    ));
                }
            }
            StudySpec::Oracle { samples, nodes, .. } => {
                if m > ORACLE_MAX_NODES {
                    return Err(err(
                        "study",
                        format!("the oracle is limited to {ORACLE_MAX_NODES} nodes, mesh has {m}"),
                    ));
                }
                if *samples <= count {
                    return Err(err(
                        "study.samples",
                        format!("must exceed the number of measurements ({count})"),
                    ));
                }
                if let Some(nodes) = nodes {
                    if nodes.is_empty() {
                        return Err(err("study.nodes", "must not be empty"));
                    }
                    if let Some(k) = nodes.iter().find(|&&k| k >= m) {
                        return Err(err("study.nodes", format!("node {k} out of range 0..{m}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn measurement_count(&self) -> usize {
        let lat = |l: usize| l.pow(self.dim as u32);
        match &self.measurements {
            MeasurementSpec::Dirac { points, lattice } => points
                .as_ref()
                .map_or_else(|| lat(lattice.unwrap_or(0)), Vec::len),
            MeasurementSpec::VoronoiIndicator { centers, lattice } => centers
                .as_ref()
                .map_or_else(|| lat(lattice.unwrap_or(0)), Vec::len),
            MeasurementSpec::Density { hats, lattice } => hats
                .as_ref()
                .map_or_else(|| lat(lattice.unwrap_or(0)), Vec::len),
        }
    }

    pub fn noise_kind(&self) -> NoiseKind {
        match self.noise {
            NoiseSpec::White => NoiseKind::White,
            NoiseSpec::Regularized { power } => NoiseKind::Regularized { power },
        }
    }

    pub fn coefficient_kind(&self) -> CoefficientKind {
        match self.coefficient {
            CoefficientSpec::Constant { value } => CoefficientKind::Constant(value),
            CoefficientSpec::Layered { contrast, layers } => {
                CoefficientKind::Layered { contrast, layers }
            }
            CoefficientSpec::Checkerboard { contrast, block } => {
                CoefficientKind::Checkerboard { contrast, block }
            }
            CoefficientSpec::LognormalRough { seed, contrast } => {
                CoefficientKind::LognormalRough { seed, contrast }
            }
        }
    }

    /// Builds the mesh, operator, noise and measurements. Failures here are
    /// configuration errors.
    pub fn setup(&self) -> Result<Setup, ConfigError> {
        let mesh = Mesh::new(self.dim, self.n).map_err(|e| err("n", e.to_string()))?;
        let coefficient = make_coefficient(&mesh, &self.coefficient_kind())
            .map_err(|e| err("coefficient", e.to_string()))?;
        let op = assemble_elliptic(&mesh, &coefficient)
            .map_err(|e| err("coefficient", e.to_string()))?;
        let noise =
            NoiseModel::new(&mesh, self.noise_kind()).map_err(|e| err("noise", e.to_string()))?;
        let measurements = self.measurements_for(&mesh, None)?;
        Ok(Setup {
            mesh,
            op,
            noise,
            measurements,
        })
    }

    /// The configured measurements, or the same family on a lattice of
    /// `lattice` points per side.
    pub fn measurements_for(
        &self,
        mesh: &Mesh,
        lattice: Option<usize>,
    ) -> Result<MeasurementSet, ConfigError> {
        let to_points = |p: &Vec<Vec<f64>>| -> Vec<Point> {
            p.iter()
                .map(|c| [c[0], c.get(1).copied().unwrap_or(0.0)])
                .collect()
        };
        let lat = |own: &Option<usize>| lattice.or(*own).map(|l| lattice_points(self.dim, l));
        let kind = match &self.measurements {
            MeasurementSpec::Dirac {
                points,
                lattice: own,
            } => MeasurementKind::Dirac {
                points: match lat(own) {
                    Some(p) if lattice.is_some() || points.is_none() => p,
                    _ => to_points(points.as_ref().expect("validated")),
                },
            },
            MeasurementSpec::VoronoiIndicator {
                centers,
                lattice: own,
            } => MeasurementKind::VoronoiIndicator {
                centers: match lat(own) {
                    Some(p) if lattice.is_some() || centers.is_none() => p,
                    _ => to_points(centers.as_ref().expect("validated")),
                },
            },
            MeasurementSpec::Density { hats, lattice: own } => {
                let densities = match (lattice.or(*own), hats) {
                    (Some(l), h) if lattice.is_some() || h.is_none() => {
                        let r = 1.0 / (l + 1) as f64;
                        lattice_points(self.dim, l)
                            .iter()
                            .map(|c| hat_density(mesh, c, r))
                            .collect()
                    }
                    (_, h) => h
                        .as_ref()
                        .expect("validated")
                        .iter()
                        .map(|h| {
                            let c = [h.center[0], h.center.get(1).copied().unwrap_or(0.0)];
                            hat_density(mesh, &c, h.radius)
                        })
                        .collect(),
                };
                MeasurementKind::Density { densities }
            }
        };
        MeasurementSet::new(mesh, kind).map_err(|e| err("measurements", e.to_string()))
    }
}

fn check_contrast(c: f64) -> Result<(), ConfigError> {
    if c >= 1.0 && c.is_finite() {
        Ok(())
    } else {
        Err(err("coefficient.contrast", "must be finite and at least 1"))
    }
}
