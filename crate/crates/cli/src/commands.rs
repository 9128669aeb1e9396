use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bayeshom::analysis::{
    certify_solution, check_pointwise_bound, estimate_rho_v0, random_source, scaling_study,
    ErrorReport, HNorm, TestFunctions,
};
use bayeshom::measure::MeasurementKind;
use bayeshom::oracle::run_oracle;
use bayeshom::posterior::{
    assemble_theta, basis_by_conditioning, posterior_variance, BasisSet, GammaOperator,
    ThetaMatrix, VarianceField,
};
use bayeshom::variational::{
    basis_by_localized_minimization, basis_by_minimization, project_optimal_recovery,
    rkhs_reproduce_check, VProduct,
};
use bayeshom::Error;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, MethodSpec, Setup, StudySpec};
use crate::output::{config_hash, theta_csv, Outputs};
use crate::{ConfigError, Failure, Fault};

pub const BIORTHOGONALITY_TOL: f64 = 1e-8;
pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const GRAM_TOL: f64 = 1e-6;
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
pub const RKHS_TOL: f64 = 1e-8;
pub const POINTWISE_TOL: f64 = 1e-6;
pub const DIRAC_VARIANCE_TOL: f64 = 1e-10;
pub const ORACLE_PASS_FRACTION: f64 = 0.95;

pub struct Context {
    cfg: ExperimentConfig,
    hash: String,
    out_dir: PathBuf,
    fault: Option<Fault>,
    setup: Setup,
}

impl Context {
    pub fn load(path: &Path, out: Option<PathBuf>, fault: Option<Fault>) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError {
            field: "config".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let text = std::str::from_utf8(&bytes).map_err(|_| ConfigError {
            field: "config".into(),
            reason: "not valid UTF-8".into(),
        })?;
        let cfg = ExperimentConfig::parse(text)?;
        let setup = cfg.setup()?;
        let out_dir = out
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            hash: config_hash(&bytes),
            cfg,
            out_dir,
            fault,
            setup,
        })
    }

    fn outputs(&self) -> Outputs {
        Outputs::new(self.out_dir.clone(), self.hash.clone())
    }

    fn gamma(&self) -> GammaOperator {
        GammaOperator::new(self.setup.op.clone(), self.setup.noise.clone())
    }

    fn vproduct(&self) -> Result<VProduct, Failure> {
        Ok(VProduct::new(
            self.setup.op.clone(),
            self.setup.noise.clone(),
        )?)
    }

    fn theta(&self, g: &GammaOperator) -> Result<ThetaMatrix, Error> {
        let th = assemble_theta(g, &self.setup.measurements)?;
        if self.fault == Some(Fault::Theta) {
            log::warn!("fault injection: negating the first diagonal entry of theta");
            let mut values = th.values().clone();
            values[(0, 0)] = -values[(0, 0)].abs();
            return ThetaMatrix::from_values(values);
        }
        Ok(th)
    }

    fn variance_nodes(&self) -> Option<&[usize]> {
        self.cfg.variance_nodes.as_deref()
    }
}

#[derive(Serialize)]
struct FallbackRecord {
    measurement: usize,
    reason: String,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    dim: usize,
    n: usize,
    nodes: usize,
    measurements: usize,
    measurement_kind: &'static str,
    method: MethodSpec,
    tolerances: BTreeMap<&'static str, f64>,
    theta_min_eigenvalue: f64,
    biorthogonality_error: f64,
    timings_ms: BTreeMap<&'static str, f64>,
    warnings: Vec<String>,
    fallbacks: Vec<FallbackRecord>,
    files: Vec<String>,
}

fn tolerances() -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("theta_symmetry", 1e-12),
        ("biorthogonality", BIORTHOGONALITY_TOL),
        ("method_equivalence", EQUIVALENCE_TOL),
        ("gram_identity", GRAM_TOL),
        ("orthogonality", ORTHOGONALITY_TOL),
        ("rkhs", RKHS_TOL),
        ("pointwise", POINTWISE_TOL),
        ("dirac_variance", DIRAC_VARIANCE_TOL),
        ("negative_variance", 1e-10),
    ])
}

struct Timer(BTreeMap<&'static str, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.0.insert(name, (now - self.1).as_secs_f64() * 1e3);
        self.1 = now;
    }
}

/// Basis of the configured method with its warnings.
fn method_basis(
    ctx: &Context,
    g: &GammaOperator,
    th: &ThetaMatrix,
) -> Result<(BasisSet, Vec<FallbackRecord>), Failure> {
    let ms = &ctx.setup.measurements;
    Ok(match ctx.cfg.method {
        MethodSpec::Conditioning => (basis_by_conditioning(g, ms, th)?, Vec::new()),
        MethodSpec::Variational => (basis_by_minimization(&ctx.vproduct()?, ms)?, Vec::new()),
        MethodSpec::Localized { radius } => {
            let loc = basis_by_localized_minimization(&ctx.vproduct()?, ms, radius)?;
            let records = loc
                .fallbacks
                .iter()
                .map(|&(i, f)| FallbackRecord {
                    measurement: i,
                    reason: f.describe().to_string(),
                })
                .collect();
            (loc.basis, records)
        }
    })
}

pub fn build_basis(ctx: &Context) -> Result<(), Failure> {
    let mut t = Timer::new();
    let g = ctx.gamma();
    let ms = &ctx.setup.measurements;
    let mesh = &ctx.setup.mesh;
    let th = ctx.theta(&g)?;
    t.lap("theta");
    let (basis, fallbacks) = method_basis(ctx, &g, &th)?;
    t.lap("basis");
    let var = posterior_variance(&g, ms, &th, ctx.variance_nodes())?;
    t.lap("variance");

    let mut warnings = Vec::new();
    for f in &fallbacks {
        let w = format!(
            "localized solve for measurement {} fell back to the global basis function: {}",
            f.measurement, f.reason
        );
        log::debug!("{w}");
        warnings.push(w);
    }
    let bio = basis.biorthogonality_error(ms);
    if bio > BIORTHOGONALITY_TOL {
        let w = format!("biorthogonality error {bio:e} exceeds {BIORTHOGONALITY_TOL:e}");
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut out = ctx.outputs();
    out.csv("basis.csv", basis.to_csv(mesh));
    out.csv("variance.csv", var.to_csv(mesh));
    out.csv("theta.csv", theta_csv(th.values()));
    let mut files = out.names();
    files.push("manifest.json".into());
    let manifest = Manifest {
        command: "build-basis",
        version: env!("CARGO_PKG_VERSION"),
        dim: mesh.dim(),
        n: mesh.cells_per_side(),
        nodes: mesh.len(),
        measurements: ms.len(),
        measurement_kind: ms.kind().name(),
        method: ctx.cfg.method.clone(),
        tolerances: tolerances(),
        theta_min_eigenvalue: th.min_eigenvalue(),
        biorthogonality_error: bio,
        timings_ms: t.0,
        warnings,
        fallbacks,
        files,
    };
    out.json("manifest.json", &manifest);
    log::info!(
        "writing {} files to {}",
        out.names().len(),
        out.dir().display()
    );
    out.flush()
}

#[derive(Serialize)]
struct SuiteResult {
    name: &'static str,
    status: Status,
    value: Option<f64>,
    tolerance: Option<f64>,
    detail: String,
}

#[derive(Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    failed: Vec<&'static str>,
    suites: Vec<SuiteResult>,
    error_report: ErrorReport,
    oracle: Option<bayeshom::oracle::BatchSummary>,
    timings_ms: BTreeMap<&'static str, f64>,
}

struct Suites(Vec<SuiteResult>);

impl Suites {
    fn bound(&mut self, name: &'static str, value: f64, tol: f64, detail: impl Into<String>) {
        self.0.push(SuiteResult {
            name,
            status: if value <= tol {
                Status::Pass
            } else {
                Status::Fail
            },
            value: Some(value),
            tolerance: Some(tol),
            detail: detail.into(),
        });
    }

    fn outcome(&mut self, name: &'static str, status: Status, detail: impl Into<String>) {
        self.0.push(SuiteResult {
            name,
            status,
            value: None,
            tolerance: None,
            detail: detail.into(),
        });
    }

    /// Runs `f`, recording a failure for any error it returns. Bound
    /// violations and numerical breakdowns both count against the suite.
    fn run(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<(), Error>) {
        if let Err(e) = f(self) {
            self.outcome(name, Status::Fail, e.to_string());
        }
    }
}

/// Relative L∞ distance between two bases.
fn relative_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(f64::MIN_POSITIVE)
}

pub fn verify(ctx: &Context) -> Result<(), Failure> {
    let mut t = Timer::new();
    let g = ctx.gamma();
    let vp = ctx.vproduct()?;
    let mut s = Suites(Vec::new());
    let mut report = ErrorReport::default();
    let mut oracle = None;

    let th = match ctx.theta(&g) {
        Ok(th) => {
            s.bound(
                "theta_spd",
                -th.min_eigenvalue(),
                0.0,
                format!("smallest eigenvalue {:e}", th.min_eigenvalue()),
            );
            Some(th)
        }
        Err(e) => {
            s.outcome("theta_spd", Status::Fail, e.to_string());
            None
        }
    };
    t.lap("theta");

    if let Some(th) = th.filter(|th| th.min_eigenvalue() > 0.0) {
        verify_suites(ctx, &g, &vp, &th, &mut s, &mut report, &mut oracle, &mut t)?;
    } else {
        for name in [
            "biorthogonality",
            "method_equivalence",
            "gram_identity",
            "orthogonality",
            "rkhs",
            "pointwise",
            "certificate",
        ] {
            s.outcome(name, Status::Skipped, "theta is not positive definite");
        }
    }

    let failed: Vec<&'static str> =
        s.0.iter()
            .filter(|r| r.status == Status::Fail)
            .map(|r| r.name)
            .collect();
    for r in s.0.iter().filter(|r| r.status == Status::Fail) {
        log::error!("{} failed: {}", r.name, r.detail);
    }
    let verdict = VerifyReport {
        passed: failed.is_empty(),
        failed: failed.clone(),
        suites: s.0,
        error_report: report,
        oracle,
        timings_ms: t.0,
    };
    let mut out = ctx.outputs();
    out.json("verify.json", &verdict);
    out.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "failing invariants: {}",
            failed.join(", ")
        )))
    }
}

/// Sources for the random checks: `v = L⁻¹ g`.
fn random_solutions(
    vp: &VProduct,
    kind: TestFunctions,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            vp.op()
                .greens_apply(&random_source(vp.mesh(), kind, &mut rng))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn verify_suites(
    ctx: &Context,
    g: &GammaOperator,
    vp: &VProduct,
    th: &ThetaMatrix,
    s: &mut Suites,
    report: &mut ErrorReport,
    oracle: &mut Option<bayeshom::oracle::BatchSummary>,
    t: &mut Timer,
) -> Result<(), Failure> {
    let ms = &ctx.setup.measurements;
    let mesh = &ctx.setup.mesh;
    let kind = TestFunctions::default_for(ctx.cfg.noise_kind());
    let seed = match ctx.cfg.study {
        StudySpec::Pointwise { seed, .. }
        | StudySpec::Scaling { seed, .. }
        | StudySpec::Oracle { seed, .. } => seed,
        StudySpec::None => 0,
    };

    let cond = basis_by_conditioning(g, ms, th)?;
    let (basis, fallbacks) = method_basis(ctx, g, th)?;
    let bio = basis.biorthogonality_error(ms);
    s.bound(
        "biorthogonality",
        bio,
        BIORTHOGONALITY_TOL,
        format!(
            "{} basis, {} fallbacks",
            method_name(&ctx.cfg.method),
            fallbacks.len()
        ),
    );
    t.lap("basis");

    s.run("method_equivalence", |s| {
        let var = basis_by_minimization(vp, ms)?;
        let d = relative_distance(&cond.columns, &var.columns);
        s.bound(
            "method_equivalence",
            d,
            EQUIVALENCE_TOL,
            "relative max distance, conditioning vs minimization",
        );
        Ok(())
    });
    t.lap("method_equivalence");

    // V-inner products through B φ, formed once per basis function
    let energy: Vec<DVector<f64>> = (0..cond.len())
        .map(|i| vp.energy_apply(&cond.column(i)))
        .collect::<Result<_, _>>()?;
    let w = mesh.weights();
    let vdot = |a: &DVector<f64>, b: &DVector<f64>| a.component_mul(w).dot(b);

    s.run("gram_identity", |s| {
        let n = cond.len();
        let gram = DMatrix::from_fn(n, n, |i, j| vdot(&energy[i], &energy[j]));
        let inv = th.inverse();
        let rel = (&gram - &inv).norm() / inv.norm();
        s.bound(
            "gram_identity",
            rel,
            GRAM_TOL,
            "relative Frobenius distance of the basis Gram matrix to theta inverse",
        );
        Ok(())
    });

    s.run("orthogonality", |s| {
        let mut worst = 0.0f64;
        for v in random_solutions(vp, kind, 20, seed)? {
            let r = &v - project_optimal_recovery(&cond, &v, ms)?;
            let br = vp.energy_apply(&r)?;
            // backward-error scale of forming v_Ψ = Σ_j Ψ_j φ_j
            let obs = ms.observe(&v)?.values;
            let sum_scale = vp.norm(&v)?
                + obs
                    .iter()
                    .zip(&energy)
                    .map(|(o, e)| o.abs() * vdot(e, e).sqrt())
                    .sum::<f64>();
            for e in &energy {
                let scale = sum_scale * vdot(e, e).sqrt();
                worst = worst.max(vdot(e, &br).abs() / scale);
            }
        }
        s.bound(
            "orthogonality",
            worst,
            ORTHOGONALITY_TOL,
            "scaled V-inner product of basis functions with recovery residuals, 20 sources",
        );
        Ok(())
    });
    t.lap("identities");

    s.run("rkhs", |s| {
        let m = mesh.len();
        let count = m.min(20);
        let nodes: Vec<usize> = (0..count).map(|i| (2 * i + 1) * m / (2 * count)).collect();
        let mut worst = 0.0f64;
        for v in random_solutions(vp, kind, 5, seed.wrapping_add(1))? {
            let vn = vp.norm(&v)?;
            for &k in &nodes {
                let r = rkhs_reproduce_check(vp, g, &v, k)?;
                worst = worst.max(r / (vn * g.diagonal_at(k)?.sqrt()));
            }
        }
        s.bound(
            "rkhs",
            worst,
            RKHS_TOL,
            format!("{} nodes x 5 sources", count),
        );
        Ok(())
    });
    t.lap("rkhs");

    let var = posterior_variance(g, ms, th, ctx.variance_nodes())?;
    t.lap("variance");

    let trials = match ctx.cfg.study {
        StudySpec::Pointwise { trials, .. } => trials,
        _ => 20,
    };
    s.run("pointwise", |s| {
        let r = check_pointwise_bound(vp, ms, &cond, &var, trials, seed, kind);
        match r {
            Ok(p) => {
                report.pointwise_max_ratio = Some(p.max_ratio);
                s.bound(
                    "pointwise",
                    p.max_ratio - 1.0,
                    POINTWISE_TOL,
                    format!("max ratio {} over {trials} trials", p.max_ratio),
                );
                Ok(())
            }
            Err(e) => Err(e),
        }
    });
    t.lap("pointwise");

    if let MeasurementKind::Dirac { .. } = ms.kind() {
        s.run("dirac_variance", |s| {
            let nodes = ms.dirac_nodes().expect("dirac measurements").to_vec();
            let dv = posterior_variance(g, ms, th, Some(&nodes))?;
            let worst = dv
                .values
                .iter()
                .zip(dv.prior.iter())
                .map(|(v, p)| v / p)
                .fold(0.0, f64::max);
            s.bound(
                "dirac_variance",
                worst,
                DIRAC_VARIANCE_TOL,
                "largest variance relative to prior at measured nodes",
            );
            Ok(())
        });
    }

    s.run("certificate", |s| {
        let rho = estimate_rho_v0(vp, ms, HNorm::H1Seminorm)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let src = random_source(mesh, TestFunctions::Smooth, &mut rng);
        let c = certify_solution(vp, ms, &cond, &var, rho.rho, &src, HNorm::H1Seminorm)?;
        report.rho_v0 = Some(rho.rho);
        report.mesh_h = Some(ms.mesh_norm(mesh)?);
        report.energy_error = Some(c.energy_error);
        s.bound(
            "certificate",
            c.energy_error / c.energy - 1.0,
            POINTWISE_TOL,
            format!(
                "energy error {:e} against certificate {:e}",
                c.energy_error, c.energy
            ),
        );
        Ok(())
    });
    t.lap("certificate");

    if let StudySpec::Oracle { samples, seed, .. } = ctx.cfg.study {
        s.run("oracle", |s| {
            let nodes = oracle_nodes(ctx);
            let ov = posterior_variance(g, ms, th, Some(&nodes))?;
            let b = run_oracle(
                &ctx.setup.op,
                &ctx.setup.noise,
                ms,
                th,
                &cond,
                &ov,
                &nodes,
                samples,
                seed,
            )?;
            let low = b.regression_pass_fraction.min(b.variance_pass_fraction);
            s.bound(
                "oracle",
                ORACLE_PASS_FRACTION - low,
                0.0,
                format!(
                    "regression pass fraction {}, variance pass fraction {}",
                    b.regression_pass_fraction, b.variance_pass_fraction
                ),
            );
            *oracle = Some(b);
            Ok(())
        });
        t.lap("oracle");
    }
    Ok(())
}

fn method_name(m: &MethodSpec) -> &'static str {
    match m {
        MethodSpec::Conditioning => "conditioning",
        MethodSpec::Variational => "variational",
        MethodSpec::Localized { .. } => "localized",
    }
}

fn oracle_nodes(ctx: &Context) -> Vec<usize> {
    match &ctx.cfg.study {
        StudySpec::Oracle { nodes: Some(n), .. } => n.clone(),
        _ => (0..ctx.setup.mesh.len()).step_by(4).collect(),
    }
}

#[derive(Serialize)]
struct ScalingOutput<'a> {
    slope: f64,
    energy_slope: f64,
    constant: f64,
    levels: &'a [bayeshom::analysis::ScalingLevel],
}

pub fn study(ctx: &Context) -> Result<(), Failure> {
    let ms = &ctx.setup.measurements;
    let mesh = &ctx.setup.mesh;
    let mut out = ctx.outputs();
    match &ctx.cfg.study {
        StudySpec::None => {
            return Err(ConfigError {
                field: "study".into(),
                reason: "the study command needs a study other than `none`".into(),
            }
            .into())
        }
        StudySpec::Scaling { levels, seed } => {
            let sets = levels
                .iter()
                .map(|&l| ctx.cfg.measurements_for(mesh, Some(l)))
                .collect::<Result<Vec<_>, _>>()?;
            let vp = ctx.vproduct()?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let src = random_source(mesh, TestFunctions::Smooth, &mut rng);
            let st = scaling_study(&vp, &sets, &src, HNorm::H1Seminorm)?;
            let mut csv = String::from("H,rho,energy_error\n");
            for l in &st.levels {
                csv.push_str(&format!("{:?},{:?},{:?}\n", l.h, l.rho, l.energy_error));
            }
            log::info!("rho slope {} over {} levels", st.slope, st.levels.len());
            out.csv("scaling.csv", csv);
            out.json(
                "scaling.json",
                &ScalingOutput {
                    slope: st.slope,
                    energy_slope: st.energy_slope,
                    constant: st.constant,
                    levels: &st.levels,
                },
            );
        }
        StudySpec::Pointwise { trials, seed } => {
            let (_, _, basis, var) = conditioned(ctx)?;
            let vp = ctx.vproduct()?;
            let kind = TestFunctions::default_for(ctx.cfg.noise_kind());
            let r = check_pointwise_bound(&vp, ms, &basis, &var, *trials, *seed, kind);
            match r {
                Ok(p) => out.json("pointwise.json", &p),
                Err(e) => {
                    out.json(
                        "pointwise.json",
                        &serde_json::json!({"trials": trials, "seed": seed, "error": e.to_string()}),
                    );
                    out.flush()?;
                    return Err(e.into());
                }
            }
        }
        StudySpec::Oracle { samples, seed, .. } => {
            let (g, th, basis, _) = conditioned(ctx)?;
            let nodes = oracle_nodes(ctx);
            let var = posterior_variance(&g, ms, &th, Some(&nodes))?;
            let b = run_oracle(
                &ctx.setup.op,
                &ctx.setup.noise,
                ms,
                &th,
                &basis,
                &var,
                &nodes,
                *samples,
                *seed,
            )?;
            out.json("oracle.json", &b);
        }
    }
    out.flush()
}

fn conditioned(
    ctx: &Context,
) -> Result<(GammaOperator, ThetaMatrix, BasisSet, VarianceField), Failure> {
    let g = ctx.gamma();
    let ms = &ctx.setup.measurements;
    let th = ctx.theta(&g)?;
    let basis = basis_by_conditioning(&g, ms, &th)?;
    let var = posterior_variance(&g, ms, &th, ctx.variance_nodes())?;
    Ok((g, th, basis, var))
}
