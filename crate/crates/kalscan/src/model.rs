//! Diagonal linear-Gaussian state space model: domain types, validation,
//! and synthetic trajectory sampling.
//!
//! The model is a latent chain `z_0 .. z_T` with
//!
//! ```text
//! z_0 ~ N(0, diag(sigma0))
//! z_t = a_t ⊙ z_{t-1} + b_t + e_t,      e_t ~ N(0, diag(q_t))
//! w_t = z_t + v_t,                      v_t ~ N(0, diag(r_t))   (where observed)
//! ```
//!
//! Every matrix is diagonal and the observation map is the identity, so all
//! inference downstream reduces to entrywise vector operations. Steps without
//! an observation (`w`/`r` absent) are first-class and simply skip the update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{SpecError, SpecViolation};

/// Default lower bound applied to every variance entry during validation.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-8;

/// Stability bounds enforced on every diagonal transition coefficient.
pub const TRANSITION_MIN: f64 = 0.4;
pub const TRANSITION_MAX: f64 = 0.99;

/// A Gaussian belief with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a belief, checking the `var > 0` and equal-length invariants.
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, SpecError> {
        let mut violations = Vec::new();
        if mean.is_empty() {
            violations.push(SpecViolation::ZeroDimension);
        }
        if mean.len() != var.len() {
            violations.push(SpecViolation::DimensionMismatch {
                field: "var",
                step: None,
                expected: mean.len(),
                got: var.len(),
            });
        }
        for (i, v) in var.iter().enumerate() {
            if !v.is_finite() || *v <= 0.0 {
                violations.push(SpecViolation::NonFinite {
                    field: "var",
                    step: None,
                    index: i,
                });
            }
        }
        for (i, m) in mean.iter().enumerate() {
            if !m.is_finite() {
                violations.push(SpecViolation::NonFinite {
                    field: "mean",
                    step: None,
                    index: i,
                });
            }
        }
        if violations.is_empty() {
            Ok(Self { mean, var })
        } else {
            Err(SpecError { violations })
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-step parameters: linearized dynamics plus the optional observation.
///
/// Actions and observation history are already folded into `(a, b, q)` by
/// whatever produced the step sequence; this library never sees raw actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    /// Diagonal of the transition matrix.
    pub a: Vec<f64>,
    /// Additive offset.
    pub b: Vec<f64>,
    /// Diagonal of the process noise covariance.
    pub q: Vec<f64>,
    /// Observed auxiliary value for this step, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    /// Diagonal of the observation noise covariance; present iff `w` is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
}

impl StepParams {
    pub fn observed(&self) -> bool {
        self.w.is_some()
    }
}

/// Full model specification over a horizon of `steps.len()` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmSpec {
    pub d: usize,
    pub sigma0: Vec<f64>,
    #[serde(default = "default_var_floor")]
    pub var_floor: f64,
    pub steps: Vec<StepParams>,
}

fn default_var_floor() -> f64 {
    DEFAULT_VAR_FLOOR
}

/// An [`SsmSpec`] that passed validation: transitions clamped into
/// `[TRANSITION_MIN, TRANSITION_MAX]`, variances floored at `var_floor`,
/// all dimensions consistent, all values finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedSpec {
    spec: SsmSpec,
}

impl ValidatedSpec {
    pub fn d(&self) -> usize {
        self.spec.d
    }

    /// Number of steps `T`.
    pub fn horizon(&self) -> usize {
        self.spec.steps.len()
    }

    pub fn sigma0(&self) -> &[f64] {
        &self.spec.sigma0
    }

    pub fn var_floor(&self) -> f64 {
        self.spec.var_floor
    }

    pub fn steps(&self) -> &[StepParams] {
        &self.spec.steps
    }

    pub fn as_spec(&self) -> &SsmSpec {
        &self.spec
    }

    pub fn into_inner(self) -> SsmSpec {
        self.spec
    }

    /// The prior belief `N(0, diag(sigma0))` over `z_0`.
    pub fn prior(&self) -> DiagGaussian {
        DiagGaussian {
            mean: vec![0.0; self.spec.d],
            var: self.spec.sigma0.clone(),
        }
    }

    /// Extracts the observation values embedded in the step parameters.
    pub fn embedded_observations(&self) -> Vec<Option<Vec<f64>>> {
        self.spec.steps.iter().map(|s| s.w.clone()).collect()
    }
}

/// Clamps each transition coefficient into `[TRANSITION_MIN, TRANSITION_MAX]`.
///
/// Idempotent and entrywise monotone. Non-finite entries are rejected rather
/// than clamped.
pub fn clamp_transition(raw: &[f64]) -> Result<Vec<f64>, SpecError> {
    let violations: Vec<_> = raw
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| SpecViolation::NonFinite {
            field: "a",
            step: None,
            index: i,
        })
        .collect();
    if !violations.is_empty() {
        return Err(SpecError { violations });
    }
    Ok(raw
        .iter()
        .map(|v| v.clamp(TRANSITION_MIN, TRANSITION_MAX))
        .collect())
}

impl SsmSpec {
    /// Validates the spec, returning a repaired copy (floors applied,
    /// transitions clamped) or the full list of violations.
    pub fn validate(mut self) -> Result<ValidatedSpec, SpecError> {
        let mut violations = Vec::new();
        if self.d == 0 {
            violations.push(SpecViolation::ZeroDimension);
        }
        if self.steps.is_empty() {
            violations.push(SpecViolation::EmptySteps);
        }
        if !self.var_floor.is_finite() || self.var_floor <= 0.0 {
            violations.push(SpecViolation::BadVarFloor(self.var_floor));
        }
        check_vector(&mut violations, "sigma0", None, &self.sigma0, self.d);
        for (t, step) in self.steps.iter().enumerate() {
            check_vector(&mut violations, "a", Some(t), &step.a, self.d);
            check_vector(&mut violations, "b", Some(t), &step.b, self.d);
            check_vector(&mut violations, "q", Some(t), &step.q, self.d);
            match (&step.w, &step.r) {
                (Some(w), Some(r)) => {
                    check_vector(&mut violations, "w", Some(t), w, self.d);
                    check_vector(&mut violations, "r", Some(t), r, self.d);
                }
                (None, None) => {}
                _ => violations.push(SpecViolation::UnpairedObservation { step: t }),
            }
        }
        if !violations.is_empty() {
            return Err(SpecError { violations });
        }

        let floor = self.var_floor;
        apply_floor(&mut self.sigma0, floor);
        for step in &mut self.steps {
            for a in &mut step.a {
                *a = a.clamp(TRANSITION_MIN, TRANSITION_MAX);
            }
            apply_floor(&mut step.q, floor);
            if let Some(r) = &mut step.r {
                apply_floor(r, floor);
            }
        }
        Ok(ValidatedSpec { spec: self })
    }
}

fn check_vector(
    violations: &mut Vec<SpecViolation>,
    field: &'static str,
    step: Option<usize>,
    values: &[f64],
    expected: usize,
) {
    if values.len() != expected {
        violations.push(SpecViolation::DimensionMismatch {
            field,
            step,
            expected,
            got: values.len(),
        });
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            violations.push(SpecViolation::NonFinite {
                field,
                step,
                index: i,
            });
        }
    }
}

fn apply_floor(values: &mut [f64], floor: f64) {
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
}

/// A sampled latent/observation sequence.
///
/// `states` holds `z_0 .. z_T` (length `T + 1`); `observations` holds
/// `w_1 .. w_T` (length `T`), with `None` exactly where the spec has no
/// observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Option<Vec<f64>>>,
}

/// Samples a trajectory from the generative model.
///
/// A pure function of `(spec, seed)`. The generator is ChaCha12 seeded via
/// `seed_from_u64`, with a fixed draw order (z_0 entrywise, then per step the
/// process noise followed by the observation noise where present), so the
/// result is bit-identical across runs and platforms for pinned dependency
/// versions.
pub fn sample_trajectory(spec: &ValidatedSpec, seed: u64) -> Trajectory {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = spec.d();
    let mut states = Vec::with_capacity(spec.horizon() + 1);
    let mut observations = Vec::with_capacity(spec.horizon());

    let z0: Vec<f64> = spec
        .sigma0()
        .iter()
        .map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    states.push(z0);

    for step in spec.steps() {
        let prev = states.last().expect("states is non-empty");
        let z: Vec<f64> = (0..d)
            .map(|i| {
                step.a[i] * prev[i] + step.b[i] + step.q[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let obs = step.r.as_ref().map(|r| {
            (0..d)
                .map(|i| z[i] + r[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        });
        states.push(z);
        observations.push(obs);
    }

    Trajectory {
        seed,
        states,
        observations,
    }
}

/// Stationary variance `q / (1 - a^2)` of a scalar AR(1) chain.
pub fn stationary_variance(a: f64, q: f64) -> Result<f64, SpecError> {
    if !a.is_finite() || a.abs() >= 1.0 {
        return Err(SpecError::single(SpecViolation::UnstableTransition {
            value: a,
        }));
    }
    Ok(q / (1.0 - a * a))
}

/// Sum over entries of `log N(x_i; mean_i, var_i)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| {
            let diff = x - m;
            -0.5 * (LN_2PI + v.ln() + diff * diff / v)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn basic_spec(d: usize, t: usize) -> SsmSpec {
        SsmSpec {
            d,
            sigma0: vec![1.0; d],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..t)
                .map(|_| StepParams {
                    a: vec![0.5; d],
                    b: vec![0.0; d],
                    q: vec![1.0; d],
                    w: Some(vec![1.0; d]),
                    r: Some(vec![1.0; d]),
                })
                .collect(),
        }
    }

    #[test]
    fn clamp_pins_out_of_range_entries() {
        assert_eq!(clamp_transition(&[1.5, -0.2]).unwrap(), vec![0.99, 0.4]);
        assert_eq!(clamp_transition(&[0.7]).unwrap(), vec![0.7]);
        assert_eq!(clamp_transition(&[0.4, 0.99]).unwrap(), vec![0.4, 0.99]);
    }

    #[test]
    fn clamp_rejects_non_finite() {
        let err = clamp_transition(&[f64::NAN]).unwrap_err();
        assert_eq!(err.violations.len(), 1);
    }

    #[test]
    fn clamp_is_idempotent() {
        let once = clamp_transition(&[1.7, 0.05, 0.66]).unwrap();
        let twice = clamp_transition(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn validate_applies_variance_floor() {
        let mut spec = basic_spec(2, 3);
        spec.steps[1].q[0] = 0.0;
        let validated = spec.validate().unwrap();
        assert_eq!(validated.steps()[1].q[0], DEFAULT_VAR_FLOOR);
    }

    #[test]
    fn validate_reports_offending_step() {
        let mut spec = basic_spec(2, 3);
        spec.steps[2].b = vec![0.0; 5];
        let err = spec.validate().unwrap_err();
        assert!(matches!(
            err.violations[0],
            SpecViolation::DimensionMismatch {
                field: "b",
                step: Some(2),
                expected: 2,
                got: 5,
            }
        ));
    }

    #[test]
    fn validate_is_identity_on_valid_input() {
        let spec = basic_spec(1, 2);
        let validated = spec.clone().validate().unwrap();
        assert_eq!(validated.as_spec(), &spec);
    }

    #[test]
    fn validate_is_idempotent() {
        let mut spec = basic_spec(2, 2);
        spec.steps[0].a[0] = 3.0;
        spec.steps[1].q[1] = -1.0;
        let once = spec.validate().unwrap();
        let twice = once.clone().into_inner().validate().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn validate_rejects_empty_steps_and_zero_dim() {
        let spec = SsmSpec {
            d: 0,
            sigma0: vec![],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: vec![],
        };
        let err = spec.validate().unwrap_err();
        assert!(err.violations.contains(&SpecViolation::ZeroDimension));
        assert!(err.violations.contains(&SpecViolation::EmptySteps));
    }

    #[test]
    fn validate_rejects_unpaired_observation() {
        let mut spec = basic_spec(1, 1);
        spec.steps[0].r = None;
        let err = spec.validate().unwrap_err();
        assert!(matches!(
            err.violations[0],
            SpecViolation::UnpairedObservation { step: 0 }
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = basic_spec(3, 16).validate().unwrap();
        let a = sample_trajectory(&spec, 42);
        let b = sample_trajectory(&spec, 42);
        assert_eq!(a, b);
        let c = sample_trajectory(&spec, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn near_deterministic_spec_stays_near_zero() {
        let mut spec = basic_spec(2, 100);
        spec.sigma0 = vec![DEFAULT_VAR_FLOOR; 2];
        for step in &mut spec.steps {
            step.q = vec![DEFAULT_VAR_FLOOR; 2];
            step.r = Some(vec![DEFAULT_VAR_FLOOR; 2]);
        }
        let traj = sample_trajectory(&spec.validate().unwrap(), 7);
        for state in &traj.states {
            for z in state {
                assert!(z.abs() < 1e-3, "state {z} drifted from zero");
            }
        }
    }

    #[test]
    fn observation_pattern_matches_spec() {
        let mut spec = basic_spec(1, 4);
        spec.steps[2].w = None;
        spec.steps[2].r = None;
        let traj = sample_trajectory(&spec.validate().unwrap(), 3);
        assert!(traj.observations[0].is_some());
        assert!(traj.observations[2].is_none());
    }

    #[test]
    fn stationary_variance_closed_form() {
        assert_abs_diff_eq!(stationary_variance(0.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            stationary_variance(0.9, 1.0).unwrap(),
            5.263157894736842,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            stationary_variance(0.5, 2.0).unwrap(),
            2.6666666666666665,
            epsilon = 1e-12
        );
        assert!(stationary_variance(1.0, 1.0).is_err());
    }

    #[test]
    fn empirical_variance_converges_to_stationary() {
        // d=1, a=0.9, q=1: long-run Var(z_t) should approach q/(1-a^2).
        let spec = SsmSpec {
            d: 1,
            sigma0: vec![1.0],
            var_floor: DEFAULT_VAR_FLOOR,
            steps: (0..1_000_000)
                .map(|_| StepParams {
                    a: vec![0.9],
                    b: vec![0.0],
                    q: vec![1.0],
                    w: None,
                    r: None,
                })
                .collect(),
        }
        .validate()
        .unwrap();
        let traj = sample_trajectory(&spec, 1234);
        let n = traj.states.len() as f64;
        let mean: f64 = traj.states.iter().map(|z| z[0]).sum::<f64>() / n;
        let var: f64 = traj.states.iter().map(|z| (z[0] - mean).powi(2)).sum::<f64>() / n;
        let target = stationary_variance(0.9, 1.0).unwrap();
        assert!(
            (var - target).abs() / target < 0.05,
            "empirical {var} vs stationary {target}"
        );
    }

    #[test]
    fn gaussian_log_density_matches_scalar_formula() {
        let got = gaussian_log_density(&[0.0], &[0.0], &[1.0]);
        assert_abs_diff_eq!(got, -0.9189385332046727, epsilon = 1e-15);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = basic_spec(2, 2);
        let json = serde_json::to_string(&spec).unwrap();
        let back: SsmSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
