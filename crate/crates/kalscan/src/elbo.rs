//! Closed-form evaluation of the smoothing variational bound, the backbone
//! regularizer, the reward term, and the assembled training objective.
//!
//! All expectations are exact for the diagonal model with affine-Gaussian
//! decoders and reward heads: every term reduces to Gaussian log-densities
//! plus variance corrections, so no sampling is involved. With the decoder
//! matched to the observation model the bound equals the filter's log
//! marginal likelihood exactly; that identity is the flagship test of this
//! module.

use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::model::{gaussian_log_density, DiagGaussian, StepParams, ValidatedSpec};
use crate::sequential::BeliefTrajectory;

/// Affine-Gaussian conditional `q(z_t | z_{t-1}, future)` implied by the
/// smoothed posterior: `z_t | z_{t-1} ~ N(atil ⊙ z_{t-1} + btil, diag(qtil))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedDynamics {
    pub atil: Vec<f64>,
    pub btil: Vec<f64>,
    pub qtil: Vec<f64>,
}

/// Affine-Gaussian decoder `p(o | z) = N(o; cmat ⊙ z + dvec, diag(sigma_o))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDecoder {
    pub cmat: Vec<f64>,
    pub dvec: Vec<f64>,
    pub sigma_o: Vec<f64>,
}

impl GaussianDecoder {
    /// Identity map with the given observation noise variance.
    pub fn identity(d: usize, sigma_o: Vec<f64>) -> Self {
        Self {
            cmat: vec![1.0; d],
            dvec: vec![0.0; d],
            sigma_o,
        }
    }
}

/// Reconstruction model used by [`elbo`].
///
/// `MatchedIdentity` reads the observation noise from the spec step by step,
/// which is what makes the bound exactly tight; `Affine` is a fixed decoder.
#[derive(Debug, Clone)]
pub enum Decoder {
    MatchedIdentity,
    Affine(GaussianDecoder),
}

/// Scalar affine-Gaussian reward model
/// `p(r | z) = N(r; cvec · z + d0, sigma_r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHead {
    pub cvec: Vec<f64>,
    pub d0: f64,
    pub sigma_r: f64,
}

/// Loss hyperparameters. `kl_balance` is a gradient-weighting convention and
/// never changes any reported value; it is carried for fidelity only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub free_nats: f64,
    pub kl_balance: f64,
    pub alpha: f64,
    pub include_t0_term: bool,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            free_nats: 3.0,
            kl_balance: 0.5,
            alpha: 1.0,
            include_t0_term: true,
        }
    }
}

/// Per-term decomposition of the objective.
///
/// `dyn_kl` is the raw summed KL (including the `t = 0` term when enabled);
/// the free-nats clip `max(dyn_kl, free_nats * T)` is applied only when
/// assembling `total`. `per_step_kl` has one entry per step `t = 1..=T` and
/// excludes the `t = 0` term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub recon: f64,
    pub dyn_kl: f64,
    pub reward: f64,
    pub regularizer: f64,
    pub total: f64,
    pub per_step_kl: Vec<f64>,
    pub config: ElboConfig,
}

/// Recovers the affine-Gaussian conditional `q(z_t | z_{t-1})` from two
/// adjacent smoothed marginals and their cross-covariance.
///
/// Composing the result with the marginal at `t-1` reproduces the smoothed
/// pairwise joint. A conditional variance below `-1e-9` before flooring
/// signals inconsistent inputs and is an error; small negative rounding is
/// floored at `var_floor`.
pub fn smoothed_dynamics(
    prev: &DiagGaussian,
    cur: &DiagGaussian,
    cross_cov: &[f64],
    var_floor: f64,
) -> Result<SmoothedDynamics, InferenceError> {
    let d = prev.dim();
    if cur.dim() != d || cross_cov.len() != d {
        return Err(InferenceError::LengthMismatch {
            what: "smoothed_dynamics inputs",
            expected: d,
            got: cur.dim().min(cross_cov.len()),
        });
    }
    let mut atil = Vec::with_capacity(d);
    let mut btil = Vec::with_capacity(d);
    let mut qtil = Vec::with_capacity(d);
    for i in 0..d {
        if prev.var[i] <= 0.0 {
            return Err(InferenceError::Invalid(format!(
                "non-positive smoothed variance {} at dim {i}",
                prev.var[i]
            )));
        }
        let a = cross_cov[i] / prev.var[i];
        let b = cur.mean[i] - a * prev.mean[i];
        let q = cur.var[i] - a * a * prev.var[i];
        if q < -1e-9 {
            return Err(InferenceError::Invalid(format!(
                "conditional variance {q} at dim {i} is negative beyond rounding",
            )));
        }
        atil.push(a);
        btil.push(b);
        qtil.push(q.max(var_floor));
    }
    Ok(SmoothedDynamics { atil, btil, qtil })
}

/// Closed-form `E_{z ~ prev}[ KL( N(atil z + btil, qtil) || N(a z + b, q) ) ]`.
///
/// Per dimension this is
/// `0.5 [ log(q/qtil) + qtil/q
///        + ((atil-a)^2 (V + m^2) + 2 (atil-a)(btil-b) m + (btil-b)^2) / q - 1 ]`
/// with `m, V` the mean and variance of the conditioning Gaussian.
pub fn expected_dyn_kl(
    sd: &SmoothedDynamics,
    step: &StepParams,
    prev: &DiagGaussian,
) -> Result<f64, InferenceError> {
    let d = prev.dim();
    if sd.atil.len() != d || step.a.len() != d {
        return Err(InferenceError::LengthMismatch {
            what: "expected_dyn_kl inputs",
            expected: d,
            got: sd.atil.len().min(step.a.len()),
        });
    }
    let mut total = 0.0;
    for i in 0..d {
        let (v1, v2) = (sd.qtil[i], step.q[i]);
        if v1 <= 0.0 || v2 <= 0.0 {
            return Err(InferenceError::Invalid(format!(
                "non-positive variance in KL at dim {i}: qtil={v1}, q={v2}",
            )));
        }
        let da = sd.atil[i] - step.a[i];
        let db = sd.btil[i] - step.b[i];
        let (m, v) = (prev.mean[i], prev.var[i]);
        let expected_sq = da * da * (v + m * m) + 2.0 * da * db * m + db * db;
        total += 0.5 * ((v2 / v1).ln() + v1 / v2 + expected_sq / v2 - 1.0);
    }
    Ok(total)
}

/// Closed-form `E_{z ~ belief}[ log N(target; cmat ⊙ z + dvec, sigma_o) ]`.
pub fn recon_term(
    decoder: &GaussianDecoder,
    belief: &DiagGaussian,
    target: &[f64],
) -> Result<f64, InferenceError> {
    let d = belief.dim();
    if decoder.cmat.len() != d || target.len() != decoder.dvec.len() {
        return Err(InferenceError::LengthMismatch {
            what: "recon_term inputs",
            expected: d,
            got: decoder.cmat.len(),
        });
    }
    for (i, s) in decoder.sigma_o.iter().enumerate() {
        if *s <= 0.0 {
            return Err(InferenceError::Invalid(format!(
                "non-positive decoder variance {s} at dim {i}",
            )));
        }
    }
    let decoded: Vec<f64> = (0..d)
        .map(|i| decoder.cmat[i] * belief.mean[i] + decoder.dvec[i])
        .collect();
    let density = gaussian_log_density(target, &decoded, &decoder.sigma_o);
    let variance_correction: f64 = (0..d)
        .map(|i| decoder.cmat[i] * decoder.cmat[i] * belief.var[i] / decoder.sigma_o[i])
        .sum();
    Ok(density - 0.5 * variance_correction)
}

/// Closed-form `E_{z ~ belief}[ log N(reward; cvec · z + d0, sigma_r) ]`.
pub fn reward_term(
    head: &RewardHead,
    belief: &DiagGaussian,
    reward: f64,
) -> Result<f64, InferenceError> {
    let d = belief.dim();
    if head.cvec.len() != d {
        return Err(InferenceError::LengthMismatch {
            what: "reward_term inputs",
            expected: d,
            got: head.cvec.len(),
        });
    }
    if head.sigma_r <= 0.0 {
        return Err(InferenceError::Invalid(format!(
            "non-positive reward variance {}",
            head.sigma_r
        )));
    }
    let mean: f64 = head
        .cvec
        .iter()
        .zip(&belief.mean)
        .map(|(c, m)| c * m)
        .sum::<f64>()
        + head.d0;
    let projected_var: f64 = head
        .cvec
        .iter()
        .zip(&belief.var)
        .map(|(c, v)| c * c * v)
        .sum();
    Ok(gaussian_log_density(&[reward], &[mean], &[head.sigma_r])
        - 0.5 * projected_var / head.sigma_r)
}

/// Mahalanobis distance of a backbone output sequence from the filtered
/// beliefs: `sum_t sum_i (m_{t,i} - mean_{t,i})^2 / var_{t,i}`.
///
/// `filtered` must align with `m_seq` (one belief per step, the prior at
/// index 0 excluded).
pub fn mahalanobis_reg(
    m_seq: &[Vec<f64>],
    filtered: &[DiagGaussian],
) -> Result<f64, InferenceError> {
    if m_seq.len() != filtered.len() {
        return Err(InferenceError::LengthMismatch {
            what: "regularizer sequence",
            expected: filtered.len(),
            got: m_seq.len(),
        });
    }
    let mut total = 0.0;
    for (t, (m, belief)) in m_seq.iter().zip(filtered).enumerate() {
        if m.len() != belief.dim() {
            return Err(InferenceError::DimensionMismatch {
                what: "regularizer",
                step: t + 1,
                expected: belief.dim(),
                got: m.len(),
            });
        }
        for i in 0..belief.dim() {
            let diff = m[i] - belief.mean[i];
            total += diff * diff / belief.var[i];
        }
    }
    Ok(total)
}

/// `KL( N(mean, var) || N(0, prior_var) )`, the `t = 0` bound term.
fn kl_to_prior(belief: &DiagGaussian, prior_var: &[f64]) -> f64 {
    belief
        .mean
        .iter()
        .zip(&belief.var)
        .zip(prior_var)
        .map(|((m, v), p)| 0.5 * ((p / v).ln() + v / p + m * m / p - 1.0))
        .sum()
}

/// Evaluates the full per-term decomposition over a belief trajectory.
///
/// Reconstruction sums over steps with a present observation using the
/// smoothed beliefs; the dynamics KL sums the closed-form expected KLs for
/// `t = 1..=T` plus, when configured, the `t = 0` KL against the prior. The
/// reward term and regularizer are only computed when their inputs are given.
pub fn elbo(
    spec: &ValidatedSpec,
    obs: &[Option<Vec<f64>>],
    beliefs: &BeliefTrajectory,
    decoder: &Decoder,
    reward: Option<(&RewardHead, &[f64])>,
    m_seq: Option<&[Vec<f64>]>,
    cfg: &ElboConfig,
) -> Result<ElboReport, InferenceError> {
    let t_len = spec.horizon();
    if obs.len() != t_len {
        return Err(InferenceError::LengthMismatch {
            what: "observations",
            expected: t_len,
            got: obs.len(),
        });
    }
    if beliefs.smoothed.len() != t_len + 1 || beliefs.cross_cov.len() != t_len {
        return Err(InferenceError::LengthMismatch {
            what: "beliefs",
            expected: t_len + 1,
            got: beliefs.smoothed.len(),
        });
    }

    let mut recon = 0.0;
    for (t, o) in obs.iter().enumerate() {
        if let Some(target) = o {
            let belief = &beliefs.smoothed[t + 1];
            let term = match decoder {
                Decoder::Affine(dec) => recon_term(dec, belief, target)?,
                Decoder::MatchedIdentity => {
                    let r = spec.steps()[t]
                        .r
                        .as_ref()
                        .expect("alignment checked: observed step has noise");
                    let dec = GaussianDecoder::identity(spec.d(), r.clone());
                    recon_term(&dec, belief, target)?
                }
            };
            recon += term;
        }
    }

    let mut per_step_kl = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let prev = &beliefs.smoothed[t - 1];
        let cur = &beliefs.smoothed[t];
        let sd = smoothed_dynamics(prev, cur, &beliefs.cross_cov[t - 1], spec.var_floor())?;
        per_step_kl.push(expected_dyn_kl(&sd, &spec.steps()[t - 1], prev)?);
    }
    let mut dyn_kl: f64 = per_step_kl.iter().sum();
    if cfg.include_t0_term {
        dyn_kl += kl_to_prior(&beliefs.smoothed[0], spec.sigma0());
    }

    let reward_total = match reward {
        None => 0.0,
        Some((head, rewards)) => {
            if rewards.len() != t_len {
                return Err(InferenceError::LengthMismatch {
                    what: "rewards",
                    expected: t_len,
                    got: rewards.len(),
                });
            }
            let mut total = 0.0;
            for (t, r) in rewards.iter().enumerate() {
                total += reward_term(head, &beliefs.smoothed[t + 1], *r)?;
            }
            total
        }
    };

    let regularizer = match m_seq {
        None => 0.0,
        Some(m) => mahalanobis_reg(m, beliefs.filtered_steps())?,
    };

    let mut report = ElboReport {
        recon,
        dyn_kl,
        reward: reward_total,
        regularizer,
        total: 0.0,
        per_step_kl,
        config: *cfg,
    };
    report.total = full_objective(&report, cfg.alpha);
    Ok(report)
}

/// Assembles the maximization objective from a report:
/// `recon + reward - max(dyn_kl, free_nats * T) - alpha * regularizer`.
pub fn full_objective(report: &ElboReport, alpha: f64) -> f64 {
    let t_len = report.per_step_kl.len() as f64;
    let kl_contribution = report.dyn_kl.max(report.config.free_nats * t_len);
    report.recon + report.reward - kl_contribution - alpha * report.regularizer
}
