//! Traces exchanged as CSV with `index,distance_m,power` columns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::sim::Trace;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    index: usize,
    distance_m: f64,
    power: f64,
}

pub fn write_trace_csv(path: &Path, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (index, &power) in trace.samples.iter().enumerate() {
        w.serialize(Row {
            index,
            distance_m: index as f64 * trace.sample_spacing_m,
            power,
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a trace; the sample spacing is taken from the first two distances.
pub fn read_trace_csv(path: &Path) -> Result<Trace> {
    let mut r = csv::Reader::from_path(path)?;
    let mut samples = Vec::new();
    let mut distances = Vec::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row?;
        if row.index != i {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                offset: i as u64,
                detail: format!("row {i} has index {}", row.index),
            });
        }
        if !row.power.is_finite() {
            return Err(invalid(format!("non-finite power in row {i} of {}", path.display())));
        }
        samples.push(row.power);
        distances.push(row.distance_m);
    }
    if samples.len() < 2 {
        return Err(invalid(format!("{} holds fewer than two samples", path.display())));
    }
    let spacing = distances[1] - distances[0];
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(invalid("distances must increase"));
    }
    Ok(Trace {
        samples,
        sample_spacing_m: spacing,
        events: Vec::new(),
        is_clean: false,
        snr_db: None,
    })
}
