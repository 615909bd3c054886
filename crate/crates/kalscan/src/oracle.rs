//! Independent brute-force ground truth for small instances.
//!
//! Builds the full joint Gaussian over `z_0 .. z_T`, conditions exactly on
//! every present observation via a Cholesky solve (no explicit inverse), and
//! returns per-step marginals, adjacent cross-covariances, and the exact log
//! evidence. Also provides a Monte-Carlo estimator for the expected dynamics
//! KL. Used in tests and by the `verify` command; never on the hot path.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::elbo::SmoothedDynamics;
use crate::error::OracleError;
use crate::model::{DiagGaussian, StepParams, ValidatedSpec};

/// Joint Gaussian over all stacked states, index order `t * d + i`.
#[derive(Debug, Clone)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact posterior summaries from the dense joint.
#[derive(Debug, Clone)]
pub struct DenseInference {
    /// Posterior marginals of `z_t` for `t = 0..=T`.
    pub marginals: Vec<DiagGaussian>,
    /// Diagonal of the posterior `Cov(z_t, z_{t+1})` for `t = 0..=T-1`.
    pub pairwise_cross: Vec<Vec<f64>>,
    /// Exact `log p(w_present)`.
    pub log_evidence: f64,
}

/// Largest supported stacked dimension `d * (T + 1)`.
pub const MAX_DENSE_SIZE: usize = 64;

/// Prior joint over `z_0 .. z_T` implied by the spec.
pub fn dense_prior(spec: &ValidatedSpec) -> Result<DenseGaussian, OracleError> {
    let d = spec.d();
    let t_len = spec.horizon();
    let n = d * (t_len + 1);
    if n > MAX_DENSE_SIZE {
        return Err(OracleError::TooLarge {
            n,
            max: MAX_DENSE_SIZE,
        });
    }

    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..d {
        cov[(i, i)] = spec.sigma0()[i];
    }
    for (t, step) in spec.steps().iter().enumerate() {
        let t1 = t + 1;
        for i in 0..d {
            let row = t1 * d + i;
            mean[row] = step.a[i] * mean[t * d + i] + step.b[i];
            // Cov(z_s, z_{t1}) = Cov(z_s, z_t) * a_{t1}, per dimension.
            for s in 0..t1 {
                let c = cov[(s * d + i, t * d + i)] * step.a[i];
                cov[(s * d + i, row)] = c;
                cov[(row, s * d + i)] = c;
            }
            cov[(row, row)] = step.a[i] * step.a[i] * cov[(t * d + i, t * d + i)] + step.q[i];
        }
    }
    Ok(DenseGaussian { mean, cov })
}

/// Conditions the dense prior on every present observation.
pub fn dense_joint_inference(
    spec: &ValidatedSpec,
    obs: &[Option<Vec<f64>>],
) -> Result<DenseInference, OracleError> {
    if obs.len() != spec.horizon() {
        return Err(OracleError::LengthMismatch {
            what: "observations",
            expected: spec.horizon(),
            got: obs.len(),
        });
    }
    let d = spec.d();
    let prior = dense_prior(spec)?;
    let n = prior.mean.len();

    // Flat indices of observed state coordinates and their noise variances.
    let mut observed_idx = Vec::new();
    let mut observed_val = Vec::new();
    let mut noise = Vec::new();
    for (t, (step, o)) in spec.steps().iter().zip(obs).enumerate() {
        if let Some(w) = o {
            let r = step.r.as_ref().ok_or_else(|| OracleError::LengthMismatch {
                what: "observation noise",
                expected: d,
                got: 0,
            })?;
            for i in 0..d {
                observed_idx.push((t + 1) * d + i);
                observed_val.push(w[i]);
                noise.push(r[i]);
            }
        }
    }

    if observed_idx.is_empty() {
        let (marginals, pairwise_cross) = summarize(&prior, d);
        return Ok(DenseInference {
            marginals,
            pairwise_cross,
            log_evidence: 0.0,
        });
    }

    let m = observed_idx.len();
    // S = cov[obs, obs] + diag(noise), the observation covariance.
    let mut s = DMatrix::zeros(m, m);
    for (a, &ia) in observed_idx.iter().enumerate() {
        for (b, &ib) in observed_idx.iter().enumerate() {
            s[(a, b)] = prior.cov[(ia, ib)];
        }
        s[(a, a)] += noise[a];
    }
    // Cross-covariance between all states and the observations: since
    // w = z_obs + v with independent v, this is just column selection.
    let mut cross = DMatrix::zeros(n, m);
    for (b, &ib) in observed_idx.iter().enumerate() {
        for a in 0..n {
            cross[(a, b)] = prior.cov[(a, ib)];
        }
    }

    let chol = Cholesky::new(s).ok_or(OracleError::SingularConditioning)?;
    let residual = DVector::from_iterator(
        m,
        observed_idx
            .iter()
            .zip(&observed_val)
            .map(|(&ia, &w)| w - prior.mean[ia]),
    );

    let posterior_mean = &prior.mean + &cross * chol.solve(&residual);
    let posterior_cov = &prior.cov - &cross * chol.solve(&cross.transpose());

    let log_evidence = {
        const LN_2PI: f64 = 1.8378770664093453;
        let ln_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        let quad = residual.dot(&chol.solve(&residual));
        -0.5 * (m as f64 * LN_2PI + ln_det + quad)
    };

    let posterior = DenseGaussian {
        mean: posterior_mean,
        cov: posterior_cov,
    };
    let (marginals, pairwise_cross) = summarize(&posterior, d);
    Ok(DenseInference {
        marginals,
        pairwise_cross,
        log_evidence,
    })
}

fn summarize(joint: &DenseGaussian, d: usize) -> (Vec<DiagGaussian>, Vec<Vec<f64>>) {
    let steps = joint.mean.len() / d;
    let marginals = (0..steps)
        .map(|t| DiagGaussian {
            mean: (0..d).map(|i| joint.mean[t * d + i]).collect(),
            var: (0..d).map(|i| joint.cov[(t * d + i, t * d + i)]).collect(),
        })
        .collect();
    let pairwise_cross = (0..steps.saturating_sub(1))
        .map(|t| {
            (0..d)
                .map(|i| joint.cov[(t * d + i, (t + 1) * d + i)])
                .collect()
        })
        .collect();
    (marginals, pairwise_cross)
}

/// Monte-Carlo estimate of the expected dynamics KL.
///
/// Draws `z_{t-1}` from `prev`, evaluates the analytic per-sample Gaussian
/// KL between the two conditionals, and returns `(estimate, standard error)`.
/// Deterministic for a fixed `(samples, seed)`.
pub fn mc_expected_kl(
    sd: &SmoothedDynamics,
    step: &StepParams,
    prev: &DiagGaussian,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = prev.dim();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut kl = 0.0;
        for i in 0..d {
            let z = prev.mean[i] + prev.var[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let m1 = sd.atil[i] * z + sd.btil[i];
            let m2 = step.a[i] * z + step.b[i];
            let v1 = sd.qtil[i];
            let v2 = step.q[i];
            let diff = m1 - m2;
            kl += 0.5 * ((v2 / v1).ln() + v1 / v2 + diff * diff / v2 - 1.0);
        }
        sum += kl;
        sum_sq += kl * kl;
    }
    let n = samples as f64;
    let estimate = sum / n;
    let variance = (sum_sq / n - estimate * estimate).max(0.0);
    let stderr = (variance / n).sqrt();
    (estimate, stderr)
}
