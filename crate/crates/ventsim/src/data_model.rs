//! Core domain types shared by every other module: lung settings, breath
//! cycles, datasets, validation, and pressure-unit helpers.
//!
//! All types here are plain immutable values. Validation never mutates or
//! rejects data; it produces a report and leaves the decision to the caller.

use std::fmt;

/// Conversion factor from cmH2O to Pascal (standard gravity, water at 4 °C).
pub const CMH2O_TO_PA: f64 = 98.0665;

/// Resistance values used for synthetic generation, in cmH2O/L/s.
pub const RESISTANCE_GRID: [f64; 3] = [5.0, 20.0, 50.0];

/// Compliance values used for synthetic generation, in mL/cmH2O.
pub const COMPLIANCE_GRID: [f64; 3] = [10.0, 20.0, 50.0];

/// Converts a pressure in cmH2O to Pascal.
pub fn cmh2o_to_pascal(p: f64) -> f64 {
    p * CMH2O_TO_PA
}

/// The (R, C) pair parameterizing one lung.
///
/// `r` is airway resistance: the change in pressure per change in flow,
/// cmH2O/L/s. `c` is compliance: the change in volume per change in
/// pressure, mL/cmH2O. Both must be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LungSettings {
    pub r: f64,
    pub c: f64,
}

impl LungSettings {
    pub fn new(r: f64, c: f64) -> Self {
        Self { r, c }
    }

    /// RC time constant in seconds (R in cmH2O/L/s times C in mL/cmH2O
    /// gives milliseconds, hence the 1000).
    pub fn time_constant_s(&self) -> f64 {
        self.r * self.c / 1000.0
    }
}

/// One recorded instant of a breath.
///
/// `u_in` is the inspiratory valve command in percent (0..=100), `u_out`
/// the binary expiratory valve command, `pressure` the measured airway
/// pressure in cmH2O (absent for test-style data without targets).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreathStep {
    pub time_s: f64,
    pub u_in: f64,
    pub u_out: f64,
    pub pressure: Option<f64>,
}

/// One breath cycle: a few seconds of steps under a fixed lung setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Breath {
    pub breath_id: u64,
    pub settings: LungSettings,
    pub steps: Vec<BreathStep>,
}

impl Breath {
    /// Time of the last step, if any.
    pub fn duration_s(&self) -> Option<f64> {
        self.steps.last().map(|s| s.time_s)
    }

    /// True if every step carries a pressure value.
    pub fn has_pressure(&self) -> bool {
        self.steps.iter().all(|s| s.pressure.is_some())
    }
}

/// A collection of breaths, with a flag recording whether the pressure
/// (target) column is present.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub breaths: Vec<Breath>,
    pub has_pressure: bool,
}

impl Dataset {
    pub fn empty(has_pressure: bool) -> Self {
        Self {
            breaths: Vec::new(),
            has_pressure,
        }
    }

    /// Total number of rows across all breaths.
    pub fn row_count(&self) -> u64 {
        self.breaths.iter().map(|b| b.steps.len() as u64).sum()
    }
}

/// One broken invariant found by validation: the offending field, the step
/// index when the violation is step-local, and the rule that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub step: Option<usize>,
    pub rule: String,
}

impl Violation {
    fn at(field: &'static str, step: usize, rule: String) -> Self {
        Self {
            field,
            step: Some(step),
            rule,
        }
    }

    fn breath(field: &'static str, rule: String) -> Self {
        Self {
            field,
            step: None,
            rule,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(i) => write!(f, "step {}: {}: {}", i, self.field, self.rule),
            None => write!(f, "{}: {}", self.field, self.rule),
        }
    }
}

/// Checks every invariant a breath is expected to satisfy regardless of
/// origin and reports each failure. Never aborts and never mutates; two
/// calls on the same value yield identical reports.
///
/// Checked rules: positive lung settings, `time_s >= 0`, strictly
/// increasing step times, `u_in` within [0, 100], binary `u_out`,
/// nondecreasing `u_out`, finite pressure where present.
pub fn validate_breath(b: &Breath) -> Vec<Violation> {
    let mut report = Vec::new();

    if !(b.settings.r > 0.0) {
        report.push(Violation::breath(
            "settings.r",
            format!("resistance must be > 0, got {}", b.settings.r),
        ));
    }
    if !(b.settings.c > 0.0) {
        report.push(Violation::breath(
            "settings.c",
            format!("compliance must be > 0, got {}", b.settings.c),
        ));
    }

    let mut prev_time: Option<f64> = None;
    let mut prev_u_out: Option<f64> = None;
    for (i, step) in b.steps.iter().enumerate() {
        if !step.time_s.is_finite() || step.time_s < 0.0 {
            report.push(Violation::at(
                "time_s",
                i,
                format!("time must be finite and >= 0, got {}", step.time_s),
            ));
        }
        if let Some(prev) = prev_time {
            if !(step.time_s > prev) {
                report.push(Violation::at(
                    "time_s",
                    i,
                    format!("non-monotone time ({} after {})", step.time_s, prev),
                ));
            }
        }
        prev_time = Some(step.time_s);

        if !step.u_in.is_finite() || step.u_in < 0.0 || step.u_in > 100.0 {
            report.push(Violation::at(
                "u_in",
                i,
                format!("u_in out of range [0, 100], got {}", step.u_in),
            ));
        }
        if step.u_out != 0.0 && step.u_out != 1.0 {
            report.push(Violation::at(
                "u_out",
                i,
                format!("u_out must be 0 or 1, got {}", step.u_out),
            ));
        }
        if let Some(prev) = prev_u_out {
            if step.u_out < prev {
                report.push(Violation::at(
                    "u_out",
                    i,
                    format!("u_out decreased ({} after {})", step.u_out, prev),
                ));
            }
        }
        prev_u_out = Some(step.u_out);

        if let Some(p) = step.pressure {
            if !p.is_finite() {
                report.push(Violation::at(
                    "pressure",
                    i,
                    format!("pressure must be finite, got {}", p),
                ));
            }
        }
    }

    report
}

/// [`validate_breath`] plus the rules that only synthetic breaths are held
/// to: an exact step count and a total duration under three seconds.
pub fn validate_synthetic_breath(b: &Breath, expected_steps: usize) -> Vec<Violation> {
    let mut report = validate_breath(b);
    if b.steps.len() != expected_steps {
        report.push(Violation::breath(
            "steps",
            format!("expected exactly {} steps, got {}", expected_steps, b.steps.len()),
        ));
    }
    if let Some(t) = b.duration_s() {
        if t >= 3.0 {
            report.push(Violation::breath(
                "time_s",
                format!("breath must end before 3.0 s, last step at {}", t),
            ));
        }
    }
    report
}

/// Dataset-level validation: unique breath ids, pressure presence matching
/// the `has_pressure` flag, and each breath's own report.
pub fn validate_dataset(d: &Dataset) -> Vec<(u64, Violation)> {
    let mut report = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for b in &d.breaths {
        if !seen.insert(b.breath_id) {
            report.push((
                b.breath_id,
                Violation::breath("breath_id", format!("duplicate breath_id {}", b.breath_id)),
            ));
        }
        if d.has_pressure && !b.has_pressure() {
            report.push((
                b.breath_id,
                Violation::breath(
                    "pressure",
                    "dataset declares pressure but a step is missing it".to_string(),
                ),
            ));
        }
        for v in validate_breath(b) {
            report.push((b.breath_id, v));
        }
    }
    report
}
