//! Monte Carlo verification of the analytic posterior: sample `L u = ξ`,
//! regress `u(x)` on the observations and compare with `φ_i(x)` and `σ²(x)`.
//!
//! Sample `s` of a batch seeded with `seed` draws from a ChaCha8 generator
//! seeded with `seed` on stream `s`, so batches are reproducible and
//! independent of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::fit_loglog_slope;
use crate::error::{check_len, invalid, Error, Result};
use crate::measure::MeasurementSet;
use crate::mesh::Mesh;
use crate::operator::{DiscreteOperator, NoiseModel};
use crate::posterior::{BasisSet, ThetaMatrix, VarianceField};

/// Name of the generator recorded in batch metadata.
pub const GENERATOR: &str = "ChaCha8Rng(seed_from_u64(seed), stream = sample index)";

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn one_noise(nm: &NoiseModel, mesh: &Mesh, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let w = mesh.weights();
    let white = DVector::from_fn(mesh.len(), |k, _| {
        let z: f64 = StandardNormal.sample(rng);
        z / w[k].sqrt()
    });
    nm.shape_solve(&white)
}

/// `count` samples of the discrete noise: covariance `W⁻¹` for white noise
/// and `L_Λ⁻¹ W⁻¹ L_Λ⁻ᵀ` for regularized noise.
pub fn sample_noise(
    nm: &NoiseModel,
    mesh: &Mesh,
    seed: u64,
    count: usize,
) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(invalid("study.samples", "must be at least 1"));
    }
    (0..count)
        .into_par_iter()
        .map(|s| one_noise(nm, mesh, &mut sample_rng(seed, s)))
        .collect()
}

/// Samples of `u = L⁻¹ ξ`, kept only at the tracked nodes, and of the
/// observations `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub seed: u64,
    pub count: usize,
    pub tracked: Vec<usize>,
    /// `S × T` values of `u` at the tracked nodes.
    pub values: DMatrix<f64>,
    /// `S × N` observations.
    pub observations: DMatrix<f64>,
}

/// Draws `count` solutions of the stochastic equation. Storing whole fields
/// is `O(S·M)` memory, so only the nodes in `tracked` are retained.
pub fn sample_solution(
    op: &DiscreteOperator,
    nm: &NoiseModel,
    ms: &MeasurementSet,
    seed: u64,
    count: usize,
    tracked: &[usize],
) -> Result<SampleBatch> {
    let mesh = op.mesh();
    check_len(mesh.len(), ms.duals().nrows())?;
    if count == 0 {
        return Err(invalid("study.samples", "must be at least 1"));
    }
    if let Some(&k) = tracked.iter().find(|&&k| k >= mesh.len()) {
        return Err(invalid("study.nodes", format!("node {k} out of range")));
    }
    let c = ms.constraint_matrix();
    let rows: Vec<(Vec<f64>, DVector<f64>)> = (0..count)
        .into_par_iter()
        .map(|s| {
            let xi = one_noise(nm, mesh, &mut sample_rng(seed, s))?;
            let u = op.greens_apply(&xi)?;
            Ok((tracked.iter().map(|&k| u[k]).collect(), c * &u))
        })
        .collect::<Result<_>>()?;
    let t = tracked.len();
    let n = ms.len();
    Ok(SampleBatch {
        seed,
        count,
        tracked: tracked.to_vec(),
        values: DMatrix::from_fn(count, t, |s, j| rows[s].0[j]),
        observations: DMatrix::from_fn(count, n, |s, i| rows[s].1[i]),
    })
}

impl SampleBatch {
    /// `(1/S) Σ_s Ψ_s Ψ_sᵀ`; the field is centered so no mean is removed.
    pub fn empirical_theta(&self) -> DMatrix<f64> {
        self.observations.tr_mul(&self.observations) / self.count as f64
    }

    fn column_of(&self, node: usize) -> Result<usize> {
        self.tracked
            .iter()
            .position(|&k| k == node)
            .ok_or_else(|| invalid("node", format!("node {node} was not tracked")))
    }
}

/// Ordinary least squares fit of `u(x)` on `Ψ` without intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    pub standard_errors: DVector<f64>,
    pub residual_variance: f64,
    /// Standard error of the residual variance under Gaussian residuals.
    pub residual_variance_se: f64,
}

pub fn regression_conditional_mean(batch: &SampleBatch, node: usize) -> Result<RegressionFit> {
    let col = batch.column_of(node)?;
    let x = &batch.observations;
    let (s, n) = x.shape();
    if s <= n {
        return Err(invalid(
            "study.samples",
            format!("regression needs more samples ({s}) than measurements ({n})"),
        ));
    }
    let y = batch.values.column(col);
    let xtx = x.tr_mul(x);
    let chol = xtx.cholesky().ok_or(Error::RankDeficient {
        rank: n.saturating_sub(1),
        expected: n,
    })?;
    let coefficients = chol.solve(&x.tr_mul(&y));
    let resid = y - x * &coefficients;
    let dof = (s - n) as f64;
    let residual_variance = resid.norm_squared() / dof;
    let inv = chol.inverse();
    Ok(RegressionFit {
        standard_errors: DVector::from_fn(n, |j, _| (residual_variance * inv[(j, j)]).sqrt()),
        coefficients,
        residual_variance,
        residual_variance_se: residual_variance * (2.0 / dof).sqrt(),
    })
}

/// `|estimate − target| ≤ 3 SE`, with an absolute floor for quantities that
/// are exact in every sample.
pub fn within_three_se(estimate: f64, target: f64, se: f64) -> bool {
    (estimate - target).abs() <= 3.0 * se + 1e-9 * (1.0 + target.abs())
}

/// Summary of one oracle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub seed: u64,
    pub count: usize,
    pub generator: String,
    pub theta_frobenius_relerr: f64,
    /// Fraction of `(node, i)` pairs with `ĉ_i` within 3 SE of `φ_i(node)`.
    pub regression_pass_fraction: f64,
    /// Fraction of nodes with residual variance within 3 SE of `σ²(node)`.
    pub variance_pass_fraction: f64,
    pub nodes: Vec<usize>,
}

impl BatchSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Samples, regresses at `nodes` and compares with the analytic posterior.
/// `var` must contain every node in `nodes`.
#[allow(clippy::too_many_arguments)]
pub fn run_oracle(
    op: &DiscreteOperator,
    nm: &NoiseModel,
    ms: &MeasurementSet,
    th: &ThetaMatrix,
    basis: &BasisSet,
    var: &VarianceField,
    nodes: &[usize],
    count: usize,
    seed: u64,
) -> Result<BatchSummary> {
    if nodes.is_empty() {
        return Err(invalid("study.nodes", "at least one node is required"));
    }
    let batch = sample_solution(op, nm, ms, seed, count, nodes)?;
    let emp = batch.empirical_theta();
    let theta_frobenius_relerr = (&emp - th.values()).norm() / th.values().norm();
    let mut pass = 0usize;
    let mut var_pass = 0usize;
    for &k in nodes {
        let fit = regression_conditional_mean(&batch, k)?;
        for i in 0..ms.len() {
            if within_three_se(
                fit.coefficients[i],
                basis.columns[(k, i)],
                fit.standard_errors[i],
            ) {
                pass += 1;
            }
        }
        let s2 = var
            .at(k)
            .ok_or_else(|| invalid("study.nodes", format!("no variance at node {k}")))?;
        if within_three_se(fit.residual_variance, s2, fit.residual_variance_se) {
            var_pass += 1;
        }
    }
    Ok(BatchSummary {
        seed,
        count,
        generator: GENERATOR.to_string(),
        theta_frobenius_relerr,
        regression_pass_fraction: pass as f64 / (nodes.len() * ms.len()) as f64,
        variance_pass_fraction: var_pass as f64 / nodes.len() as f64,
        nodes: nodes.to_vec(),
    })
}

/// Frobenius error of the empirical `Θ` for each sample count, averaged over
/// `replicates` independent seeds, and its log-log slope against the count.
pub fn theta_convergence(
    op: &DiscreteOperator,
    nm: &NoiseModel,
    ms: &MeasurementSet,
    th: &ThetaMatrix,
    counts: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<(Vec<(usize, f64)>, f64)> {
    if replicates == 0 {
        return Err(invalid("replicates", "must be at least 1"));
    }
    let mut errs = Vec::with_capacity(counts.len());
    for &s in counts {
        let mut total = 0.0;
        for r in 0..replicates {
            let b = sample_solution(op, nm, ms, seed.wrapping_add(r as u64), s, &[])?;
            total += (b.empirical_theta() - th.values()).norm() / th.values().norm();
        }
        errs.push((s, total / replicates as f64));
    }
    let pts: Vec<(f64, f64)> = errs.iter().map(|&(s, e)| (s as f64, e)).collect();
    Ok((errs, fit_loglog_slope(&pts)?))
}
