//! CSV ingest/emit in the public ventilator-pressure layout, plus dataset
//! statistics.
//!
//! The on-disk contract is the eight-column header
//! `id,breath_id,R,C,time_step,u_in,u_out,pressure` with the `pressure`
//! column optional. Floats are written in their shortest round-tripping
//! form so that parse(write(d)) reproduces every value bit for bit.

use std::collections::HashSet;
use std::io::{Read, Write};

use ordered_float::OrderedFloat;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::data_model::{Breath, BreathStep, Dataset, LungSettings};

/// Columns every file must carry, in emission order.
pub const REQUIRED_COLUMNS: [&str; 7] = ["id", "breath_id", "R", "C", "time_step", "u_in", "u_out"];

/// The optional target column.
pub const PRESSURE_COLUMN: &str = "pressure";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column '{0}' in header")]
    MissingColumn(String),
    #[error("line {line}: column '{column}': cannot parse '{value}' as a number")]
    BadNumber {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: breath_id {breath_id} appears non-contiguously")]
    NonContiguousBreath { breath_id: u64, line: u64 },
    #[error("line {line}: expected {expected} fields, got {got}")]
    BadFieldCount { line: u64, expected: usize, got: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

struct ColumnIndex {
    id: usize,
    breath_id: usize,
    r: usize,
    c: usize,
    time_step: usize,
    u_in: usize,
    u_out: usize,
    pressure: Option<usize>,
}

impl ColumnIndex {
    fn from_header(header: &csv::StringRecord) -> Result<Self, IngestError> {
        let find = |name: &str| -> Result<usize, IngestError> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        };
        Ok(Self {
            id: find("id")?,
            breath_id: find("breath_id")?,
            r: find("R")?,
            c: find("C")?,
            time_step: find("time_step")?,
            u_in: find("u_in")?,
            u_out: find("u_out")?,
            pressure: header.iter().position(|h| h == PRESSURE_COLUMN),
        })
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    column: &'static str,
    line: u64,
) -> Result<T, IngestError> {
    let raw = record.get(idx).unwrap_or("");
    raw.trim().parse::<T>().map_err(|_| IngestError::BadNumber {
        line,
        column,
        value: raw.to_string(),
    })
}

/// Parses a file in the eight-column layout into a [`Dataset`].
///
/// Rows are grouped by contiguous runs of `breath_id`, preserving file
/// order within each breath; a breath id reappearing after a different one
/// is a fatal error. `has_pressure` is set iff the pressure column exists
/// in the header.
pub fn parse_csv<R: Read>(source: R) -> Result<Dataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);

    let header = reader.headers()?.clone();
    let cols = ColumnIndex::from_header(&header)?;
    let has_pressure = cols.pressure.is_some();
    let expected_fields = header.len();

    let mut breaths: Vec<Breath> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut current: Option<Breath> = None;

    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != expected_fields {
            return Err(IngestError::BadFieldCount {
                line,
                expected: expected_fields,
                got: record.len(),
            });
        }

        let breath_id: u64 = parse_field(&record, cols.breath_id, "breath_id", line)?;
        let r: f64 = parse_field(&record, cols.r, "R", line)?;
        let c: f64 = parse_field(&record, cols.c, "C", line)?;
        let time_s: f64 = parse_field(&record, cols.time_step, "time_step", line)?;
        let u_in: f64 = parse_field(&record, cols.u_in, "u_in", line)?;
        let u_out: f64 = parse_field(&record, cols.u_out, "u_out", line)?;
        let pressure = match cols.pressure {
            Some(idx) => Some(parse_field::<f64>(&record, idx, "pressure", line)?),
            None => None,
        };

        let step = BreathStep {
            time_s,
            u_in,
            u_out,
            pressure,
        };

        match current.as_mut() {
            Some(breath) if breath.breath_id == breath_id => breath.steps.push(step),
            _ => {
                if let Some(done) = current.take() {
                    breaths.push(done);
                }
                if !seen.insert(breath_id) {
                    return Err(IngestError::NonContiguousBreath { breath_id, line });
                }
                current = Some(Breath {
                    breath_id,
                    settings: LungSettings::new(r, c),
                    steps: vec![step],
                });
            }
        }
    }
    if let Some(done) = current.take() {
        breaths.push(done);
    }

    Ok(Dataset {
        breaths,
        has_pressure,
    })
}

/// Emits a dataset in the eight-column layout (seven columns when the
/// dataset has no pressure). `id` is a 1-based running row counter; floats
/// use the shortest decimal form that round-trips their binary value.
pub fn write_csv<W: Write>(d: &Dataset, sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    if d.has_pressure {
        w.write_record(REQUIRED_COLUMNS.iter().copied().chain([PRESSURE_COLUMN]))?;
    } else {
        w.write_record(REQUIRED_COLUMNS)?;
    }

    let mut id: u64 = 0;
    for breath in &d.breaths {
        for step in &breath.steps {
            id += 1;
            let mut row = vec![
                id.to_string(),
                breath.breath_id.to_string(),
                breath.settings.r.to_string(),
                breath.settings.c.to_string(),
                step.time_s.to_string(),
                step.u_in.to_string(),
                step.u_out.to_string(),
            ];
            if d.has_pressure {
                row.push(step.pressure.map(|p| p.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ordered float map used for value histograms keyed by R, C, or u_out.
pub type ValueCounts = BTreeMap<OrderedFloat<f64>, u64>;

/// Breath counts per (R, C) cell.
pub type CellCounts = BTreeMap<(OrderedFloat<f64>, OrderedFloat<f64>), u64>;

/// Summary statistics over a dataset.
///
/// Row-level counts are keyed by the observed value so their sums always
/// equal the total row count. Pressure-derived fields are absent when the
/// dataset carries no pressure column; extrema are absent when the dataset
/// is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_breaths: u64,
    pub r_counts: ValueCounts,
    pub c_counts: ValueCounts,
    pub rc_breath_counts: CellCounts,
    pub u_out_counts: ValueCounts,
    /// Global peak inspiratory pressure: max pressure over all rows, cmH2O.
    pub pip: Option<f64>,
    /// Median pressure over rows with u_out = 0, cmH2O.
    pub median_inspiratory_pressure: Option<f64>,
    /// Max over breaths of the last step time, seconds.
    pub max_breath_duration_s: Option<f64>,
    /// Max step time over rows with u_out = 0, seconds.
    pub max_uout_zero_time_s: Option<f64>,
}

/// Median with the midpoint-of-two-middles convention for even counts.
/// Sorts its input in place.
fn median_in_place(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        Some(values[n / 2])
    } else {
        Some((values[n / 2 - 1] + values[n / 2]) / 2.0)
    }
}

/// Computes [`DatasetStats`] in one pass (plus a sort for the median).
/// The result is independent of breath order.
pub fn compute_stats(d: &Dataset) -> DatasetStats {
    let mut stats = DatasetStats {
        n_breaths: d.breaths.len() as u64,
        r_counts: ValueCounts::new(),
        c_counts: ValueCounts::new(),
        rc_breath_counts: CellCounts::new(),
        u_out_counts: ValueCounts::new(),
        pip: None,
        median_inspiratory_pressure: None,
        max_breath_duration_s: None,
        max_uout_zero_time_s: None,
    };

    let mut inspiratory_pressures: Vec<f64> = Vec::new();

    for breath in &d.breaths {
        let r = OrderedFloat(breath.settings.r);
        let c = OrderedFloat(breath.settings.c);
        *stats.rc_breath_counts.entry((r, c)).or_insert(0) += 1;

        if let Some(t) = breath.duration_s() {
            stats.max_breath_duration_s = Some(match stats.max_breath_duration_s {
                Some(m) => m.max(t),
                None => t,
            });
        }

        for step in &breath.steps {
            *stats.r_counts.entry(r).or_insert(0) += 1;
            *stats.c_counts.entry(c).or_insert(0) += 1;
            *stats.u_out_counts.entry(OrderedFloat(step.u_out)).or_insert(0) += 1;

            if step.u_out == 0.0 {
                stats.max_uout_zero_time_s = Some(match stats.max_uout_zero_time_s {
                    Some(m) => m.max(step.time_s),
                    None => step.time_s,
                });
            }

            if d.has_pressure {
                if let Some(p) = step.pressure {
                    stats.pip = Some(match stats.pip {
                        Some(m) => m.max(p),
                        None => p,
                    });
                    if step.u_out == 0.0 {
                        inspiratory_pressures.push(p);
                    }
                }
            }
        }
    }

    stats.median_inspiratory_pressure = median_in_place(&mut inspiratory_pressures);
    stats
}

fn counts_to_json(counts: &ValueCounts) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in counts {
        map.insert(k.0.to_string(), serde_json::json!(v));
    }
    serde_json::Value::Object(map)
}

impl DatasetStats {
    /// Machine-readable report: one JSON object with exactly the field
    /// names of this struct. Map keys are the observed values in their
    /// shortest decimal form; (R, C) cells are keyed `"R,C"`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut rc = serde_json::Map::new();
        for ((r, c), v) in &self.rc_breath_counts {
            rc.insert(format!("{},{}", r.0, c.0), serde_json::json!(v));
        }
        serde_json::json!({
            "n_breaths": self.n_breaths,
            "r_counts": counts_to_json(&self.r_counts),
            "c_counts": counts_to_json(&self.c_counts),
            "rc_breath_counts": serde_json::Value::Object(rc),
            "u_out_counts": counts_to_json(&self.u_out_counts),
            "pip": self.pip,
            "median_inspiratory_pressure": self.median_inspiratory_pressure,
            "max_breath_duration_s": self.max_breath_duration_s,
            "max_uout_zero_time_s": self.max_uout_zero_time_s,
        })
    }

    /// Human-readable report, full precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => x.to_string(),
            None => "absent".to_string(),
        };
        out.push_str(&format!("n_breaths: {}\n", self.n_breaths));
        for (name, counts) in [
            ("r_counts", &self.r_counts),
            ("c_counts", &self.c_counts),
            ("u_out_counts", &self.u_out_counts),
        ] {
            out.push_str(&format!("{}:\n", name));
            for (k, v) in counts.iter() {
                out.push_str(&format!("  {}: {}\n", k.0, v));
            }
        }
        out.push_str("rc_breath_counts:\n");
        for ((r, c), v) in &self.rc_breath_counts {
            out.push_str(&format!("  R={} C={}: {}\n", r.0, c.0, v));
        }
        out.push_str(&format!("pip: {}\n", fmt_opt(self.pip)));
        out.push_str(&format!(
            "median_inspiratory_pressure: {}\n",
            fmt_opt(self.median_inspiratory_pressure)
        ));
        out.push_str(&format!(
            "max_breath_duration_s: {}\n",
            fmt_opt(self.max_breath_duration_s)
        ));
        out.push_str(&format!(
            "max_uout_zero_time_s: {}\n",
            fmt_opt(self.max_uout_zero_time_s)
        ));
        out
    }
}
