//! Reference sequential Kalman filter and Rauch–Tung–Striebel smoother for
//! the diagonal model, including the exact log marginal likelihood.
//!
//! This is the correctness baseline the parallel engine is tested against.
//! Everything is entrywise: with diagonal `A`, `Q`, `R` and an identity
//! observation map, gains and covariances never leave vector form.

use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::model::{DiagGaussian, StepParams, ValidatedSpec};

/// Output of a forward filtering pass.
///
/// `predicted` covers `t = 1..=T` (length `T`); `filtered` covers
/// `t = 0..=T` (length `T + 1`) with index 0 holding the prior over `z_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub predicted: Vec<DiagGaussian>,
    pub filtered: Vec<DiagGaussian>,
    pub log_marginal: f64,
}

/// Aligned filtering and smoothing results.
///
/// `smoothed` covers `t = 0..=T`; `gains` and `cross_cov` cover
/// `t = 0..=T-1`, where `gains[t]` is the diagonal smoother gain `G_t` and
/// `cross_cov[t]` the diagonal of `Cov(z_t, z_{t+1})` under the smoothed
/// posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrajectory {
    pub predicted: Vec<DiagGaussian>,
    pub filtered: Vec<DiagGaussian>,
    pub smoothed: Vec<DiagGaussian>,
    pub gains: Vec<Vec<f64>>,
    pub cross_cov: Vec<Vec<f64>>,
    pub log_marginal: f64,
}

impl BeliefTrajectory {
    /// Filtered beliefs for `t = 1..=T`, skipping the prior at index 0.
    pub fn filtered_steps(&self) -> &[DiagGaussian] {
        &self.filtered[1..]
    }
}

/// One predict/update cycle.
///
/// Predicts through the step dynamics, then fuses the observation when
/// present. Returns `(predicted, filtered, log-likelihood increment)`; with
/// no observation the filtered belief is the prediction and the increment is
/// zero. Variances are re-floored after the update so rounding can never
/// produce a non-positive entry.
pub fn filter_step(
    prev: &DiagGaussian,
    step: &StepParams,
    var_floor: f64,
) -> Result<(DiagGaussian, DiagGaussian, f64), InferenceError> {
    filter_step_with(prev, step, step.w.as_deref(), var_floor, 0)
}

/// `filter_step` with the observation supplied separately, so a caller
/// holding observations outside the spec never has to clone step params.
fn filter_step_with(
    prev: &DiagGaussian,
    step: &StepParams,
    obs: Option<&[f64]>,
    var_floor: f64,
    t: usize,
) -> Result<(DiagGaussian, DiagGaussian, f64), InferenceError> {
    let d = prev.dim();
    if step.a.len() != d {
        return Err(InferenceError::DimensionMismatch {
            what: "filter_step",
            step: t,
            expected: d,
            got: step.a.len(),
        });
    }

    let mut p_mean = Vec::with_capacity(d);
    let mut p_var = Vec::with_capacity(d);
    for i in 0..d {
        p_mean.push(step.a[i] * prev.mean[i] + step.b[i]);
        p_var.push((step.a[i] * step.a[i] * prev.var[i] + step.q[i]).max(var_floor));
    }
    let predicted = DiagGaussian {
        mean: p_mean,
        var: p_var,
    };

    match (obs, &step.r) {
        (Some(w), Some(r)) => {
            if w.len() != d {
                return Err(InferenceError::DimensionMismatch {
                    what: "observation",
                    step: t,
                    expected: d,
                    got: w.len(),
                });
            }
            let mut f_mean = Vec::with_capacity(d);
            let mut f_var = Vec::with_capacity(d);
            let mut increment = 0.0;
            const LN_2PI: f64 = 1.8378770664093453;
            for i in 0..d {
                let innovation_var = predicted.var[i] + r[i];
                let gain = predicted.var[i] / innovation_var;
                f_mean.push(predicted.mean[i] + gain * (w[i] - predicted.mean[i]));
                f_var.push(((1.0 - gain) * predicted.var[i]).max(var_floor));
                let diff = w[i] - predicted.mean[i];
                increment -= 0.5 * (LN_2PI + innovation_var.ln() + diff * diff / innovation_var);
            }
            let filtered = DiagGaussian {
                mean: f_mean,
                var: f_var,
            };
            Ok((predicted, filtered, increment))
        }
        (None, _) => {
            let filtered = predicted.clone();
            Ok((predicted, filtered, 0.0))
        }
        (Some(_), None) => Err(InferenceError::ObservationMismatch {
            step: t,
            detail: "observation provided but the step has no noise model".into(),
        }),
    }
}

/// Checks that an observation sequence lines up with the spec: same length,
/// same presence pattern, same dimension.
pub fn check_alignment(
    spec: &ValidatedSpec,
    obs: &[Option<Vec<f64>>],
) -> Result<(), InferenceError> {
    if obs.len() != spec.horizon() {
        return Err(InferenceError::LengthMismatch {
            what: "observations",
            expected: spec.horizon(),
            got: obs.len(),
        });
    }
    for (t, (step, o)) in spec.steps().iter().zip(obs).enumerate() {
        match (step.observed(), o) {
            (true, Some(w)) => {
                if w.len() != spec.d() {
                    return Err(InferenceError::DimensionMismatch {
                        what: "observation",
                        step: t + 1,
                        expected: spec.d(),
                        got: w.len(),
                    });
                }
            }
            (false, None) => {}
            (true, None) => {
                return Err(InferenceError::ObservationMismatch {
                    step: t + 1,
                    detail: "spec expects an observation here, none provided".into(),
                })
            }
            (false, Some(_)) => {
                return Err(InferenceError::ObservationMismatch {
                    step: t + 1,
                    detail: "observation provided but the spec has no noise model here".into(),
                })
            }
        }
    }
    Ok(())
}

/// Forward filtering pass over the whole spec, starting from the prior
/// `N(0, diag(sigma0))`. `log_marginal` is the exact `log p(w_present)`.
pub fn filter(
    spec: &ValidatedSpec,
    obs: &[Option<Vec<f64>>],
) -> Result<FilterResult, InferenceError> {
    check_alignment(spec, obs)?;
    filter_from(spec.prior(), spec.steps(), obs, spec.var_floor())
}

/// Filtering pass from an explicit initial belief; `filter` with the model
/// prior is the common case. Splitting a sequence and chaining the final
/// filtered belief of the first half into the second is equivalent to one
/// pass over the whole sequence.
pub fn filter_from(
    prior: DiagGaussian,
    steps: &[StepParams],
    obs: &[Option<Vec<f64>>],
    var_floor: f64,
) -> Result<FilterResult, InferenceError> {
    let t_len = steps.len();
    if obs.len() != t_len {
        return Err(InferenceError::LengthMismatch {
            what: "observations",
            expected: t_len,
            got: obs.len(),
        });
    }
    let mut predicted = Vec::with_capacity(t_len);
    let mut filtered = Vec::with_capacity(t_len + 1);
    let mut log_marginal = 0.0;
    filtered.push(prior);

    for (t, step) in steps.iter().enumerate() {
        let (pred, filt, increment) = filter_step_with(
            filtered.last().expect("non-empty"),
            step,
            obs[t].as_deref(),
            var_floor,
            t + 1,
        )?;
        predicted.push(pred);
        filtered.push(filt);
        log_marginal += increment;
    }

    Ok(FilterResult {
        predicted,
        filtered,
        log_marginal,
    })
}

/// Backward Rauch–Tung–Striebel pass.
///
/// Gains use the predicted quantities stored during the forward pass rather
/// than recomputing them, so the two passes cannot drift apart. The smoothed
/// belief at `T` equals the filtered one exactly.
pub fn rts_smooth(
    spec: &ValidatedSpec,
    partial: &FilterResult,
) -> Result<BeliefTrajectory, InferenceError> {
    let t_len = spec.horizon();
    if partial.predicted.len() != t_len || partial.filtered.len() != t_len + 1 {
        return Err(InferenceError::LengthMismatch {
            what: "filter results",
            expected: t_len,
            got: partial.predicted.len(),
        });
    }
    let d = spec.d();
    let floor = spec.var_floor();

    let mut smoothed = vec![partial.filtered[t_len].clone()];
    let mut gains = Vec::with_capacity(t_len);
    let mut cross_cov = Vec::with_capacity(t_len);

    for t in (0..t_len).rev() {
        let filt = &partial.filtered[t];
        let pred_next = &partial.predicted[t];
        let a_next = &spec.steps()[t].a;
        let next_smoothed = smoothed.last().expect("non-empty");

        let mut gain = Vec::with_capacity(d);
        let mut s_mean = Vec::with_capacity(d);
        let mut s_var = Vec::with_capacity(d);
        let mut cc = Vec::with_capacity(d);
        for i in 0..d {
            let g = filt.var[i] * a_next[i] / pred_next.var[i];
            s_mean.push(filt.mean[i] + g * (next_smoothed.mean[i] - pred_next.mean[i]));
            s_var.push((filt.var[i] + g * g * (next_smoothed.var[i] - pred_next.var[i])).max(floor));
            cc.push(g * next_smoothed.var[i]);
            gain.push(g);
        }
        smoothed.push(DiagGaussian {
            mean: s_mean,
            var: s_var,
        });
        gains.push(gain);
        cross_cov.push(cc);
    }

    smoothed.reverse();
    gains.reverse();
    cross_cov.reverse();

    Ok(BeliefTrajectory {
        predicted: partial.predicted.clone(),
        filtered: partial.filtered.clone(),
        smoothed,
        gains,
        cross_cov,
        log_marginal: partial.log_marginal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_log_density, SsmSpec, DEFAULT_VAR_FLOOR};
    use approx::assert_abs_diff_eq;

    fn scalar_step(a: f64, b: f64, q: f64, w: Option<f64>, r: f64) -> StepParams {
        StepParams {
            a: vec![a],
            b: vec![b],
            q: vec![q],
            w: w.map(|w| vec![w]),
            r: w.map(|_| vec![r]),
        }
    }

    /// The worked scalar example: prev N(0,1), a=0.5, b=0, q=1, w=1, r=1.
    #[test]
    fn scalar_filter_step_values() {
        let prev = DiagGaussian {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let step = scalar_step(0.5, 0.0, 1.0, Some(1.0), 1.0);
        let (pred, filt, inc) = filter_step(&prev, &step, DEFAULT_VAR_FLOOR).unwrap();
        assert_abs_diff_eq!(pred.mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pred.var[0], 1.25, epsilon = 1e-15);
        assert_abs_diff_eq!(filt.mean[0], 5.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(filt.var[0], 5.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            inc,
            gaussian_log_density(&[1.0], &[0.0], &[2.25]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn missing_observation_keeps_prediction() {
        let prev = DiagGaussian {
            mean: vec![0.3, -0.1],
            var: vec![0.5, 0.8],
        };
        let step = StepParams {
            a: vec![0.6, 0.7],
            b: vec![0.1, 0.0],
            q: vec![0.2, 0.3],
            w: None,
            r: None,
        };
        let (pred, filt, inc) = filter_step(&prev, &step, DEFAULT_VAR_FLOOR).unwrap();
        assert_eq!(pred, filt);
        assert_eq!(inc, 0.0);
    }

    #[test]
    fn huge_observation_noise_approaches_missing() {
        let prev = DiagGaussian {
            mean: vec![0.2],
            var: vec![0.9],
        };
        let observed = scalar_step(0.5, 0.1, 0.4, Some(3.0), 1e12);
        let missing = scalar_step(0.5, 0.1, 0.4, None, 1.0);
        let (_, filt_obs, _) = filter_step(&prev, &observed, DEFAULT_VAR_FLOOR).unwrap();
        let (_, filt_missing, _) = filter_step(&prev, &missing, DEFAULT_VAR_FLOOR).unwrap();
        assert_abs_diff_eq!(filt_obs.mean[0], filt_missing.mean[0], epsilon = 1e-9);
        assert_abs_diff_eq!(filt_obs.var[0], filt_missing.var[0], epsilon = 1e-9);
    }

    #[test]
    fn symmetric_fusion_at_one_step() {
        // T=1 with predicted var equal to r: the update averages prediction
        // and observation, halving the variance.
        let spec = SsmSpec {
            d: 1,
            sigma0: vec![1.0],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: vec![scalar_step(0.0, 0.0, 1.0, Some(0.8), 1.0)],
        }
        .validate()
        .unwrap();
        let obs = spec.embedded_observations();
        let out = filter(&spec, &obs).unwrap();
        assert_abs_diff_eq!(out.filtered[1].mean[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(out.filtered[1].var[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn all_observations_missing_is_a_prediction_chain() {
        let spec = SsmSpec {
            d: 1,
            sigma0: vec![2.0],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..5).map(|_| scalar_step(0.8, 0.5, 0.3, None, 1.0)).collect(),
        }
        .validate()
        .unwrap();
        let out = filter(&spec, &vec![None; 5]).unwrap();
        assert_eq!(out.log_marginal, 0.0);
        for t in 0..5 {
            assert_eq!(out.predicted[t], out.filtered[t + 1]);
        }
        let smoothed = rts_smooth(&spec, &out).unwrap();
        for t in 0..=5 {
            assert_eq!(smoothed.smoothed[t], smoothed.filtered[t]);
        }
    }

    #[test]
    fn filtering_is_invariant_to_splitting() {
        let spec = SsmSpec {
            d: 2,
            sigma0: vec![1.0, 0.5],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..8)
                .map(|t| StepParams {
                    a: vec![0.5 + 0.05 * t as f64, 0.9],
                    b: vec![0.1, -0.2],
                    q: vec![0.3, 0.6],
                    w: Some(vec![0.2 * t as f64, -0.1]),
                    r: Some(vec![0.5, 0.7]),
                })
                .collect(),
        }
        .validate()
        .unwrap();
        let obs = spec.embedded_observations();
        let whole = filter(&spec, &obs).unwrap();

        let first = filter_from(
            spec.prior(),
            &spec.steps()[..3],
            &obs[..3],
            spec.var_floor(),
        )
        .unwrap();
        let second = filter_from(
            first.filtered.last().unwrap().clone(),
            &spec.steps()[3..],
            &obs[3..],
            spec.var_floor(),
        )
        .unwrap();

        let end = whole.filtered.last().unwrap();
        let chained_end = second.filtered.last().unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(end.mean[i], chained_end.mean[i], epsilon = 1e-12);
            assert_abs_diff_eq!(end.var[i], chained_end.var[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            whole.log_marginal,
            first.log_marginal + second.log_marginal,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smoothing_decouples_under_huge_process_noise() {
        let spec = SsmSpec {
            d: 1,
            sigma0: vec![1.0],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..6)
                .map(|t| scalar_step(0.5, 0.0, 1e12, Some(0.3 * t as f64), 1.0))
                .collect(),
        }
        .validate()
        .unwrap();
        let obs = spec.embedded_observations();
        let out = filter(&spec, &obs).unwrap();
        let smoothed = rts_smooth(&spec, &out).unwrap();
        for t in 1..=6 {
            let f = &smoothed.filtered[t];
            let s = &smoothed.smoothed[t];
            assert!(
                (f.mean[0] - s.mean[0]).abs() <= 1e-6 * f.mean[0].abs().max(1.0),
                "t={t}: {} vs {}",
                f.mean[0],
                s.mean[0]
            );
            assert!((f.var[0] - s.var[0]).abs() <= 1e-6 * f.var[0]);
        }
    }

    #[test]
    fn variance_ordering_holds_per_step() {
        let spec = SsmSpec {
            d: 3,
            sigma0: vec![1.0, 2.0, 0.5],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..10)
                .map(|t| StepParams {
                    a: vec![0.45, 0.7, 0.95],
                    b: vec![0.0, 0.1, -0.3],
                    q: vec![0.2, 0.5, 0.8],
                    w: if t % 3 == 0 {
                        None
                    } else {
                        Some(vec![0.1 * t as f64, 0.0, 1.0])
                    },
                    r: if t % 3 == 0 {
                        None
                    } else {
                        Some(vec![0.4, 0.6, 0.2])
                    },
                })
                .collect(),
        }
        .validate()
        .unwrap();
        let obs = spec.embedded_observations();
        let result = rts_smooth(&spec, &filter(&spec, &obs).unwrap()).unwrap();
        for t in 1..=10 {
            for i in 0..3 {
                let pred = result.predicted[t - 1].var[i];
                let filt = result.filtered[t].var[i];
                let smooth = result.smoothed[t].var[i];
                assert!(smooth <= filt + 1e-12, "t={t} i={i}");
                assert!(filt <= pred + 1e-12, "t={t} i={i}");
            }
        }
        assert_eq!(
            result.smoothed.last().unwrap(),
            result.filtered.last().unwrap()
        );
    }
}
