//! Discrete-time PID controller and a closed-loop harness that drives the
//! lung simulator to track a target pressure waveform.
//!
//! This is the classical baseline a learned controller would replace: the
//! controller sees the deviation from the target waveform and adjusts the
//! inspiratory valve command to close the gap.

use thiserror::Error;

use crate::data_model::{Breath, BreathStep, LungSettings};
use crate::lung_sim::{lung_step, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum PidError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("dt must be > 0, got {0}")]
    InvalidDt(f64),
    #[error("target has {got} steps but config expects {expected}")]
    TargetLengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Controller coefficients plus the anti-windup bound on the integrator.
///
/// Units: kp in command per cmH2O, ki per cmH2O*s, kd per cmH2O/s,
/// windup_limit in cmH2O*s. Defaults are tuned for the default simulator
/// physics; they are reproducible, not claimed optimal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub windup_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 2.0,
            ki: 4.0,
            kd: 0.05,
            windup_limit: 50.0,
        }
    }
}

/// Integrator and derivative memory between steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

impl PidState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One controller update.
///
/// The integral accumulates before use and is clamped to the windup
/// limit; the derivative acts on the error and is forced to zero on the
/// first step so startup is bumpless. The command saturates to [0, 100].
pub fn pid_step(
    gains: &PidGains,
    state: &PidState,
    setpoint: f64,
    measurement: f64,
    dt: f64,
) -> Result<(f64, PidState), PidError> {
    for (value, name) in [
        (setpoint, "setpoint"),
        (measurement, "measurement"),
        (gains.kp, "kp"),
        (gains.ki, "ki"),
        (gains.kd, "kd"),
    ] {
        if !value.is_finite() {
            return Err(PidError::NonFinite(name));
        }
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(PidError::InvalidDt(dt));
    }

    let error = setpoint - measurement;
    let integral = (state.integral + error * dt).clamp(-gains.windup_limit, gains.windup_limit);
    let derivative = if state.initialized {
        (error - state.prev_error) / dt
    } else {
        0.0
    };
    let raw = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    let command = raw.clamp(0.0, 100.0);

    Ok((
        command,
        PidState {
            integral,
            prev_error: error,
            initialized: true,
        },
    ))
}

/// Runs the controller in closed loop against the lung model and returns
/// the achieved breath plus the mean absolute tracking error over the
/// inspiratory steps.
///
/// The controller sees the pressure measured on the previous step (one
/// sample of delay; the loop starts from the resting pressure, PEEP).
/// u_out follows the valve-switch rule and the valve command is zero
/// during expiration. Noise is forced off so the result is deterministic.
pub fn track_waveform(
    gains: &PidGains,
    target: &[f64],
    settings: &LungSettings,
    cfg: &SimConfig,
) -> Result<(Breath, f64), PidError> {
    let cfg = SimConfig {
        noise_sd: 0.0,
        time_jitter_frac: 0.0,
        ..cfg.clone()
    };
    cfg.validate()?;
    if target.len() != cfg.steps_per_breath {
        return Err(PidError::TargetLengthMismatch {
            expected: cfg.steps_per_breath,
            got: target.len(),
        });
    }

    let mut state = PidState::new();
    let mut volume_ml = 0.0;
    let mut measured = cfg.peep;
    let mut steps = Vec::with_capacity(cfg.steps_per_breath);
    let mut abs_err_sum = 0.0;
    let mut inspiratory = 0usize;

    for k in 0..cfg.steps_per_breath {
        let time_s = k as f64 * cfg.dt_s;
        let u_out = cfg.u_out_at(time_s);
        let u_in = if u_out == 0.0 {
            let (command, next) = pid_step(gains, &state, target[k], measured, cfg.dt_s)?;
            state = next;
            command
        } else {
            0.0
        };
        let pressure = lung_step(settings, &cfg, &mut volume_ml, u_in, u_out);
        if u_out == 0.0 {
            abs_err_sum += (target[k] - pressure).abs();
            inspiratory += 1;
        }
        steps.push(BreathStep {
            time_s,
            u_in,
            u_out,
            pressure: Some(pressure),
        });
        measured = pressure;
    }

    let tracking_mae = abs_err_sum / inspiratory as f64;
    Ok((
        Breath {
            breath_id: 0,
            settings: *settings,
            steps,
        },
        tracking_mae,
    ))
}

/// Constant-setpoint target aligned to the config grid: `level` during
/// inspiration, PEEP afterwards (the expiratory portion is unscored).
pub fn step_target(level: f64, cfg: &SimConfig) -> Vec<f64> {
    (0..cfg.steps_per_breath)
        .map(|k| {
            if cfg.u_out_at(k as f64 * cfg.dt_s) == 0.0 {
                level
            } else {
                cfg.peep
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_error_fresh_state_gives_zero_command() {
        let (u, _) = pid_step(&PidGains::default(), &PidState::new(), 10.0, 10.0, 0.035).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn pure_proportional_is_linear() {
        let gains = PidGains { kp: 3.0, ki: 0.0, kd: 0.0, windup_limit: 50.0 };
        let (u, _) = pid_step(&gains, &PidState::new(), 2.0, 0.0, 0.1).unwrap();
        assert_eq!(u, 6.0);

        let doubled = PidGains { kp: 6.0, ..gains };
        let (u2, _) = pid_step(&doubled, &PidState::new(), 2.0, 0.0, 0.1).unwrap();
        assert_eq!(u2, 2.0 * u);
    }

    #[test]
    fn integral_accumulates_by_hand_integration() {
        let gains = PidGains { kp: 0.0, ki: 1.0, kd: 0.0, windup_limit: 50.0 };
        let mut state = PidState::new();
        let mut commands = Vec::new();
        for _ in 0..3 {
            let (u, next) = pid_step(&gains, &state, 1.0, 0.0, 0.1).unwrap();
            commands.push(u);
            state = next;
        }
        // Hand integration with the same arithmetic order.
        let i1 = 1.0 * 0.1;
        let i2 = i1 + 0.1;
        let i3 = i2 + 0.1;
        assert_eq!(commands, vec![i1, i2, i3]);
    }

    #[test]
    fn first_step_derivative_is_suppressed() {
        let gains = PidGains { kp: 0.0, ki: 0.0, kd: 10.0, windup_limit: 50.0 };
        let (u, state) = pid_step(&gains, &PidState::new(), 5.0, 0.0, 0.1).unwrap();
        assert_eq!(u, 0.0);
        // Second step with unchanged error: derivative is still zero.
        let (u2, _) = pid_step(&gains, &state, 5.0, 0.0, 0.1).unwrap();
        assert_eq!(u2, 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = pid_step(&PidGains::default(), &PidState::new(), f64::NAN, 0.0, 0.1).unwrap_err();
        assert!(matches!(err, PidError::NonFinite("setpoint")));
        let err = pid_step(&PidGains::default(), &PidState::new(), 0.0, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, PidError::InvalidDt(_)));
    }

    proptest! {
        #[test]
        fn command_always_saturates_to_valve_range(
            kp in 0.0f64..100.0,
            ki in 0.0f64..100.0,
            kd in 0.0f64..100.0,
            errors in proptest::collection::vec(-1e3f64..1e3, 1..50),
        ) {
            let gains = PidGains { kp, ki, kd, windup_limit: 50.0 };
            let mut state = PidState::new();
            for e in errors {
                let (u, next) = pid_step(&gains, &state, e, 0.0, 0.035).unwrap();
                prop_assert!((0.0..=100.0).contains(&u));
                state = next;
            }
        }

        #[test]
        fn integral_never_exceeds_windup_limit(
            errors in proptest::collection::vec(-1e4f64..1e4, 1..100),
            limit in 1.0f64..100.0,
        ) {
            let gains = PidGains { kp: 1.0, ki: 1.0, kd: 0.0, windup_limit: limit };
            let mut state = PidState::new();
            for e in errors {
                let (_, next) = pid_step(&gains, &state, e, 0.0, 0.1).unwrap();
                prop_assert!(next.integral.abs() <= limit);
                state = next;
            }
        }
    }

    #[test]
    fn target_at_peep_needs_no_command() {
        let cfg = SimConfig::default();
        let settings = LungSettings::new(20.0, 50.0);
        let target = vec![cfg.peep; cfg.steps_per_breath];
        let (breath, mae) = track_waveform(&PidGains::default(), &target, &settings, &cfg).unwrap();
        assert_eq!(mae, 0.0);
        for s in &breath.steps {
            assert_eq!(s.u_in, 0.0);
            assert_eq!(s.pressure, Some(cfg.peep));
        }
    }

    #[test]
    fn zero_gains_leave_the_loop_open() {
        let cfg = SimConfig::default();
        let settings = LungSettings::new(20.0, 50.0);
        let gains = PidGains { kp: 0.0, ki: 0.0, kd: 0.0, windup_limit: 50.0 };
        let target = step_target(cfg.peep + 10.0, &cfg);
        let (breath, _) = track_waveform(&gains, &target, &settings, &cfg).unwrap();
        for s in &breath.steps {
            assert_eq!(s.u_in, 0.0);
            assert_eq!(s.pressure, Some(cfg.peep));
        }
    }

    #[test]
    fn default_gains_track_a_step_target() {
        let cfg = SimConfig::default();
        let settings = LungSettings::new(20.0, 50.0);
        let target = step_target(cfg.peep + 10.0, &cfg);
        let (_, mae) = track_waveform(&PidGains::default(), &target, &settings, &cfg).unwrap();
        assert!(mae < 2.0, "tracking mae = {mae}");
    }

    #[test]
    fn tracking_is_deterministic() {
        let cfg = SimConfig::default();
        let settings = LungSettings::new(50.0, 20.0);
        let target = step_target(18.0, &cfg);
        let a = track_waveform(&PidGains::default(), &target, &settings, &cfg).unwrap();
        let b = track_waveform(&PidGains::default(), &target, &settings, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}
