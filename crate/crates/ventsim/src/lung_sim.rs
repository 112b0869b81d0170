//! Synthetic breath generation from a single-compartment lung model.
//!
//! The model discretizes the two constitutive definitions of the lung
//! parameters: resistance R relates pressure to flow, compliance C relates
//! volume to pressure. During inspiration the valve command drives flow
//! into the lung; during expiration the lung empties passively along its
//! RC time constant. Observation noise is added to recorded pressures
//! only, never to the state, so closed-form checks on the volume dynamics
//! stay exact.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data_model::{
    Breath, BreathStep, Dataset, LungSettings, COMPLIANCE_GRID, RESISTANCE_GRID,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule has {got} steps but config expects {expected}")]
    ScheduleLengthMismatch { expected: usize, got: usize },
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
}

/// Fixed-grid simulation parameters.
///
/// Defaults give an 80-step breath on a 35 ms grid (2.765 s total, under
/// the 3 s cycle budget) with the expiratory valve opening at 1 s.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Step interval, seconds.
    pub dt_s: f64,
    /// Steps per breath.
    pub steps_per_breath: usize,
    /// Time the expiratory valve opens, seconds.
    pub t_switch_s: f64,
    /// Flow at u_in = 100, L/s.
    pub q_max: f64,
    /// Baseline pressure the circuit relaxes to, cmH2O.
    pub peep: f64,
    /// Standard deviation of additive Gaussian pressure noise, cmH2O.
    pub noise_sd: f64,
    /// Fraction of dt_s by which recorded timestamps jitter (0 = exact
    /// grid). Must stay below 0.5 so times remain strictly increasing.
    pub time_jitter_frac: f64,
    /// RNG seed; each breath derives its own stream from (seed, breath_id).
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 0.035,
            steps_per_breath: 80,
            t_switch_s: 1.0,
            q_max: 1.0,
            peep: 5.0,
            noise_sd: 0.05,
            time_jitter_frac: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_s > 0.0) {
            return Err(SimError::InvalidConfig(format!("dt_s must be > 0, got {}", self.dt_s)));
        }
        if self.steps_per_breath < 2 {
            return Err(SimError::InvalidConfig(format!(
                "steps_per_breath must be >= 2, got {}",
                self.steps_per_breath
            )));
        }
        let total = self.dt_s * self.steps_per_breath as f64;
        if !(self.t_switch_s > 0.0 && self.t_switch_s < total) {
            return Err(SimError::InvalidConfig(format!(
                "t_switch_s must lie in (0, {}), got {}",
                total, self.t_switch_s
            )));
        }
        if !(self.q_max > 0.0) {
            return Err(SimError::InvalidConfig(format!("q_max must be > 0, got {}", self.q_max)));
        }
        if self.noise_sd < 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        if !(0.0..0.5).contains(&self.time_jitter_frac) {
            return Err(SimError::InvalidConfig(format!(
                "time_jitter_frac must lie in [0, 0.5), got {}",
                self.time_jitter_frac
            )));
        }
        Ok(())
    }

    /// The u_out value at grid time `t`: 0 before the valve opens, 1 after.
    pub fn u_out_at(&self, t: f64) -> f64 {
        if t < self.t_switch_s {
            0.0
        } else {
            1.0
        }
    }
}

/// Per-step valve commands aligned to the config's time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub u_in: Vec<f64>,
    pub u_out: Vec<f64>,
}

impl ControlSchedule {
    pub fn len(&self) -> usize {
        self.u_in.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_in.is_empty()
    }
}

/// Shape family for the inspiratory command trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlProfile {
    Ramp,
    Triangle,
    Decay,
    RandomSpline,
}

impl ControlProfile {
    pub const ALL: [ControlProfile; 4] = [
        ControlProfile::Ramp,
        ControlProfile::Triangle,
        ControlProfile::Decay,
        ControlProfile::RandomSpline,
    ];
}

impl FromStr for ControlProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ramp" => Ok(ControlProfile::Ramp),
            "triangle" => Ok(ControlProfile::Triangle),
            "decay" => Ok(ControlProfile::Decay),
            "random-spline" => Ok(ControlProfile::RandomSpline),
            other => Err(format!(
                "unknown profile '{other}' (expected ramp, triangle, decay, or random-spline)"
            )),
        }
    }
}

/// Advances the lung by one step and returns the noiseless pressure.
///
/// `volume_ml` is the model state. Inspiration (u_out = 0) converts the
/// valve command linearly to flow and integrates it; expiration empties
/// the volume by an exact exponential along tau = R*C/1000 seconds.
pub fn lung_step(
    settings: &LungSettings,
    cfg: &SimConfig,
    volume_ml: &mut f64,
    u_in: f64,
    u_out: f64,
) -> f64 {
    if u_out == 0.0 {
        let flow = cfg.q_max * u_in / 100.0; // L/s
        *volume_ml += flow * cfg.dt_s * 1000.0; // mL
        cfg.peep + settings.r * flow + *volume_ml / settings.c
    } else {
        let tau = settings.time_constant_s();
        *volume_ml *= (-cfg.dt_s / tau).exp();
        cfg.peep + *volume_ml / settings.c
    }
}

/// [`simulate_breath`] that also returns the volume trace (mL after each
/// step), for tests that check the state dynamics directly.
pub fn simulate_breath_with_volume(
    settings: &LungSettings,
    schedule: &ControlSchedule,
    cfg: &SimConfig,
    rng: &mut impl Rng,
) -> Result<(Breath, Vec<f64>), SimError> {
    cfg.validate()?;
    if schedule.len() != cfg.steps_per_breath {
        return Err(SimError::ScheduleLengthMismatch {
            expected: cfg.steps_per_breath,
            got: schedule.len(),
        });
    }

    let noise = if cfg.noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sd).expect("validated noise_sd"))
    } else {
        None
    };

    let mut volume_ml = 0.0;
    let mut volumes = Vec::with_capacity(cfg.steps_per_breath);
    let mut steps = Vec::with_capacity(cfg.steps_per_breath);
    for k in 0..cfg.steps_per_breath {
        let mut time_s = k as f64 * cfg.dt_s;
        if cfg.time_jitter_frac > 0.0 && k > 0 {
            let j = rng.random_range(-cfg.time_jitter_frac..cfg.time_jitter_frac);
            time_s += j * cfg.dt_s;
        }
        let u_in = schedule.u_in[k];
        let u_out = schedule.u_out[k];
        let clean = lung_step(settings, cfg, &mut volume_ml, u_in, u_out);
        let pressure = match &noise {
            Some(n) => clean + n.sample(rng),
            None => clean,
        };
        volumes.push(volume_ml);
        steps.push(BreathStep {
            time_s,
            u_in,
            u_out,
            pressure: Some(pressure),
        });
    }

    Ok((
        Breath {
            breath_id: 0,
            settings: *settings,
            steps,
        },
        volumes,
    ))
}

/// Simulates one breath under the given valve schedule.
///
/// The state is the inhaled volume, starting at zero. Gaussian noise of
/// standard deviation `cfg.noise_sd` is added to each recorded pressure
/// but never to the state. The returned breath has id 0; callers that
/// assemble datasets assign ids.
pub fn simulate_breath(
    settings: &LungSettings,
    schedule: &ControlSchedule,
    cfg: &SimConfig,
    rng: &mut impl Rng,
) -> Result<Breath, SimError> {
    simulate_breath_with_volume(settings, schedule, cfg, rng).map(|(b, _)| b)
}

/// Draws a control schedule from the named profile family: a shaped u_in
/// trace with randomized amplitude in [10, 100] on [0, t_switch), a small
/// leakage command afterwards, and u_out following the valve-switch rule.
pub fn generate_control(
    profile: ControlProfile,
    cfg: &SimConfig,
    rng: &mut impl Rng,
) -> ControlSchedule {
    let n = cfg.steps_per_breath;
    let amplitude = rng.random_range(10.0..=100.0);

    enum Shape {
        Ramp,
        Triangle { peak_t: f64 },
        Decay { tau: f64 },
        Spline { knots: Vec<(f64, f64)> },
    }

    let shape = match profile {
        ControlProfile::Ramp => Shape::Ramp,
        ControlProfile::Triangle => Shape::Triangle {
            peak_t: rng.random_range(0.2..=0.8) * cfg.t_switch_s,
        },
        ControlProfile::Decay => Shape::Decay {
            tau: rng.random_range(0.1..=0.6) * cfg.t_switch_s,
        },
        ControlProfile::RandomSpline => {
            let interior = rng.random_range(1..=4);
            let mut ts: Vec<f64> = (0..interior)
                .map(|_| rng.random_range(0.0..cfg.t_switch_s))
                .collect();
            ts.sort_unstable_by(f64::total_cmp);
            let mut knots = Vec::with_capacity(interior + 2);
            knots.push((0.0, rng.random_range(0.0..=amplitude / 4.0)));
            for t in ts {
                knots.push((t, rng.random_range(0.0..=amplitude)));
            }
            knots.push((cfg.t_switch_s, rng.random_range(0.0..=amplitude / 2.0)));
            Shape::Spline { knots }
        }
    };

    let leak_base = rng.random_range(0.3..=2.5);

    let mut u_in = Vec::with_capacity(n);
    let mut u_out = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * cfg.dt_s;
        let out = cfg.u_out_at(t);
        let cmd = if out == 0.0 {
            match &shape {
                Shape::Ramp => amplitude * t / cfg.t_switch_s,
                Shape::Triangle { peak_t } => {
                    if t <= *peak_t {
                        amplitude * t / peak_t
                    } else {
                        amplitude * (1.0 - (t - peak_t) / (cfg.t_switch_s - peak_t))
                    }
                }
                Shape::Decay { tau } => amplitude * (-t / tau).exp(),
                Shape::Spline { knots } => interp_linear(knots, t),
            }
        } else {
            (leak_base + rng.random_range(-0.3..=0.3)).clamp(0.0, 3.0)
        };
        u_in.push(cmd.clamp(0.0, 100.0));
        u_out.push(out);
    }

    ControlSchedule { u_in, u_out }
}

fn interp_linear(knots: &[(f64, f64)], t: f64) -> f64 {
    match knots.iter().position(|&(kt, _)| kt > t) {
        Some(0) => knots[0].1,
        None => knots.last().map(|&(_, v)| v).unwrap_or(0.0),
        Some(i) => {
            let (t0, v0) = knots[i - 1];
            let (t1, v1) = knots[i];
            if t1 == t0 {
                v1
            } else {
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }
}

/// RNG stream for one breath. Every breath gets an independent ChaCha
/// stream keyed by (seed, breath_id), so generation order and parallel
/// scheduling cannot change the output.
pub fn breath_rng(seed: u64, breath_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(breath_id);
    rng
}

/// Generates `n_breaths` breaths, each with an (R, C) pair drawn uniformly
/// from the 3x3 grid, a random profile family, and a simulated pressure
/// trace. Breath ids run 1..=n_breaths.
pub fn generate_dataset(n_breaths: usize, cfg: &SimConfig) -> Result<Dataset, SimError> {
    use rayon::prelude::*;

    cfg.validate()?;
    let breaths: Result<Vec<Breath>, SimError> = (1..=n_breaths as u64)
        .into_par_iter()
        .map(|breath_id| {
            let mut rng = breath_rng(cfg.seed, breath_id);
            let cell = rng.random_range(0..9usize);
            let settings = LungSettings::new(RESISTANCE_GRID[cell / 3], COMPLIANCE_GRID[cell % 3]);
            let profile = ControlProfile::ALL[rng.random_range(0..ControlProfile::ALL.len())];
            let schedule = generate_control(profile, cfg, &mut rng);
            let mut breath = simulate_breath(&settings, &schedule, cfg, &mut rng)?;
            breath.breath_id = breath_id;
            Ok(breath)
        })
        .collect();

    Ok(Dataset {
        breaths: breaths?,
        has_pressure: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::validate_synthetic_breath;

    fn quiet(cfg: &SimConfig) -> SimConfig {
        SimConfig { noise_sd: 0.0, ..cfg.clone() }
    }

    fn constant_schedule(cfg: &SimConfig, level: f64) -> ControlSchedule {
        let n = cfg.steps_per_breath;
        let u_out: Vec<f64> = (0..n).map(|k| cfg.u_out_at(k as f64 * cfg.dt_s)).collect();
        let u_in: Vec<f64> = u_out.iter().map(|&o| if o == 0.0 { level } else { 0.0 }).collect();
        ControlSchedule { u_in, u_out }
    }

    #[test]
    fn zero_input_holds_pressure_at_peep() {
        let cfg = quiet(&SimConfig::default());
        let schedule = constant_schedule(&cfg, 0.0);
        let settings = LungSettings::new(20.0, 50.0);
        let mut rng = breath_rng(0, 1);
        let b = simulate_breath(&settings, &schedule, &cfg, &mut rng).unwrap();
        for s in &b.steps {
            assert_eq!(s.pressure, Some(cfg.peep));
        }
    }

    #[test]
    fn first_step_matches_hand_arithmetic() {
        // R=20, C=50, q_max=1, peep=5, dt=0.035, u_in=50:
        // Q=0.5 L/s, V=17.5 mL, p = 5 + 20*0.5 + 17.5/50 = 15.35
        let cfg = quiet(&SimConfig::default());
        let schedule = constant_schedule(&cfg, 50.0);
        let settings = LungSettings::new(20.0, 50.0);
        let mut rng = breath_rng(0, 1);
        let b = simulate_breath(&settings, &schedule, &cfg, &mut rng).unwrap();
        let p0 = b.steps[0].pressure.unwrap();
        assert!((p0 - 15.35).abs() < 1e-12, "p0 = {p0}");
    }

    #[test]
    fn expiration_decays_volume_by_e_fold_over_one_time_constant() {
        // R=20, C=50 gives tau = 1.0 s. Use dt = 0.025 so 40 expiratory
        // steps land exactly on 1.0 s of simulated decay; the exponential
        // update itself is exact, the tolerance covers the grid.
        let cfg = SimConfig {
            dt_s: 0.025,
            steps_per_breath: 81,
            noise_sd: 0.0,
            ..SimConfig::default()
        };
        let settings = LungSettings::new(20.0, 50.0);
        let schedule = constant_schedule(&cfg, 60.0);
        let mut rng = breath_rng(0, 1);
        let (_, volumes) =
            simulate_breath_with_volume(&settings, &schedule, &cfg, &mut rng).unwrap();

        // Last inspiratory step is k=39 (t=0.975); 40 expiratory steps
        // later is k=79, exactly 1.0 s of decay.
        let v_start = volumes[39];
        let v_after_tau = volumes[79];
        assert!(v_start > 0.0);
        let expected = v_start / std::f64::consts::E;
        assert!(
            (v_after_tau - expected).abs() / expected < 0.01,
            "v_after_tau = {v_after_tau}, expected {expected}"
        );
    }

    #[test]
    fn volume_is_conserved_across_the_valve_switch() {
        let cfg = quiet(&SimConfig::default());
        let settings = LungSettings::new(20.0, 50.0);
        let schedule = constant_schedule(&cfg, 40.0);
        let mut rng = breath_rng(0, 1);
        let (_, volumes) =
            simulate_breath_with_volume(&settings, &schedule, &cfg, &mut rng).unwrap();

        let last_insp = (0..cfg.steps_per_breath)
            .rev()
            .find(|&k| schedule.u_out[k] == 0.0)
            .unwrap();
        let tau = settings.time_constant_s();
        let expected = volumes[last_insp] * (-cfg.dt_s / tau).exp();
        let got = volumes[last_insp + 1];
        assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn inspiratory_pressure_is_monotone_in_resistance() {
        let cfg = quiet(&SimConfig::default());
        let schedule = constant_schedule(&cfg, 35.0);
        let mut traces = Vec::new();
        for r in RESISTANCE_GRID {
            let settings = LungSettings::new(r, 20.0);
            let mut rng = breath_rng(0, 1);
            let b = simulate_breath(&settings, &schedule, &cfg, &mut rng).unwrap();
            traces.push(b);
        }
        for w in traces.windows(2) {
            for (lo, hi) in w[0].steps.iter().zip(&w[1].steps) {
                if lo.u_out == 0.0 {
                    assert!(hi.pressure.unwrap() >= lo.pressure.unwrap());
                }
            }
        }
    }

    #[test]
    fn noiseless_pressure_never_drops_below_peep() {
        let cfg = quiet(&SimConfig::default());
        for profile in ControlProfile::ALL {
            let mut rng = breath_rng(42, 7);
            let schedule = generate_control(profile, &cfg, &mut rng);
            let settings = LungSettings::new(5.0, 10.0);
            let b = simulate_breath(&settings, &schedule, &cfg, &mut rng).unwrap();
            for s in &b.steps {
                assert!(s.pressure.unwrap() >= cfg.peep - 1e-12);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_bit_for_bit() {
        let cfg = SimConfig::default();
        let settings = LungSettings::new(50.0, 10.0);
        let mut rng_a = breath_rng(9, 3);
        let schedule_a = generate_control(ControlProfile::Triangle, &cfg, &mut rng_a);
        let a = simulate_breath(&settings, &schedule_a, &cfg, &mut rng_a).unwrap();
        let mut rng_b = breath_rng(9, 3);
        let schedule_b = generate_control(ControlProfile::Triangle, &cfg, &mut rng_b);
        let b = simulate_breath(&settings, &schedule_b, &cfg, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ramp_profile_is_monotone_during_inspiration() {
        let cfg = SimConfig::default();
        for seed in 0..5 {
            let mut rng = breath_rng(seed, 1);
            let s = generate_control(ControlProfile::Ramp, &cfg, &mut rng);
            let insp: Vec<f64> = s
                .u_in
                .iter()
                .zip(&s.u_out)
                .filter(|&(_, &o)| o == 0.0)
                .map(|(&u, _)| u)
                .collect();
            assert_eq!(insp[0], 0.0);
            for w in insp.windows(2) {
                assert!(w[1] >= w[0]);
            }
            assert!(insp.iter().all(|&u| (0.0..=100.0).contains(&u)));
        }
    }

    #[test]
    fn u_out_follows_the_switch_rule() {
        let cfg = SimConfig::default();
        for profile in ControlProfile::ALL {
            let mut rng = breath_rng(1, 2);
            let s = generate_control(profile, &cfg, &mut rng);
            for (k, &o) in s.u_out.iter().enumerate() {
                let t = k as f64 * cfg.dt_s;
                assert_eq!(o, if t < 1.0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn generated_dataset_passes_validation_and_counts() {
        let cfg = SimConfig { seed: 5, ..SimConfig::default() };
        let d = generate_dataset(1, &cfg).unwrap();
        assert_eq!(d.breaths.len(), 1);
        assert_eq!(d.breaths[0].steps.len(), cfg.steps_per_breath);
        assert!(d.has_pressure);
        for b in &d.breaths {
            let report = validate_synthetic_breath(b, cfg.steps_per_breath);
            assert!(report.is_empty(), "violations: {report:?}");
        }
    }

    #[test]
    fn rc_cells_are_roughly_balanced_over_many_breaths() {
        // Binomial concentration: each cell has p = 1/9, so 9000 draws give
        // 1000 +- 100 (a 3.3 sigma band).
        let cfg = SimConfig { seed: 42, ..SimConfig::default() };
        let d = generate_dataset(9000, &cfg).unwrap();
        let stats = crate::ingest::compute_stats(&d);
        assert_eq!(stats.rc_breath_counts.len(), 9);
        for (&(r, c), &count) in &stats.rc_breath_counts {
            assert!(
                (900..=1100).contains(&count),
                "cell R={} C={} has {count} breaths",
                r.0,
                c.0
            );
        }
    }

    #[test]
    fn default_config_pressures_stay_in_sane_envelope() {
        let cfg = SimConfig { seed: 10, ..SimConfig::default() };
        let d = generate_dataset(200, &cfg).unwrap();
        let stats = crate::ingest::compute_stats(&d);
        let pip = stats.pip.unwrap();
        assert!(pip < 100.0, "pip = {pip}");
        assert!(pip > 10.0, "pip = {pip}");
    }

    #[test]
    fn schedule_length_mismatch_is_an_error() {
        let cfg = SimConfig::default();
        let schedule = ControlSchedule { u_in: vec![0.0; 10], u_out: vec![0.0; 10] };
        let settings = LungSettings::new(20.0, 50.0);
        let mut rng = breath_rng(0, 1);
        let err = simulate_breath(&settings, &schedule, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, SimError::ScheduleLengthMismatch { expected: 80, got: 10 }));
    }

    #[test]
    fn time_jitter_keeps_times_strictly_increasing() {
        let cfg = SimConfig {
            time_jitter_frac: 0.45,
            seed: 77,
            ..SimConfig::default()
        };
        let d = generate_dataset(20, &cfg).unwrap();
        for b in &d.breaths {
            assert_eq!(b.steps[0].time_s, 0.0);
            for w in b.steps.windows(2) {
                assert!(w[1].time_s > w[0].time_s);
            }
        }
    }
}
