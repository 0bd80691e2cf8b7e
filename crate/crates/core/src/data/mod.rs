//! Energy readings, their CSV form, the synthetic generator and the
//! windowing that turns a series into training samples.

mod csv_io;
mod synthetic;
mod windows;

pub use csv_io::{load_csv, parse_timestamp, write_csv, CsvPaths, TIMESTAMP_FORMAT};
pub use synthetic::{generate_synthetic, generate_synthetic_parts, Shift, SyntheticSpec};
pub use windows::{persistence_mae, prepare, split_bounds, PreparedData, Sample, Scaler, SplitBounds, SplitFractions};

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::graphs::NodeSet;

/// Readings on a fixed time grid for a fixed user population.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyDataset {
    pub timestamps: Vec<NaiveDateTime>,
    pub user_ids: Vec<String>,
    pub user_coords: Vec<[f64; 2]>,
    /// Region index per user.
    pub user_region: Vec<usize>,
    pub region_ids: Vec<String>,
    pub region_coords: Vec<[f64; 2]>,
    /// `[T, N]` row-major, kWh per interval.
    pub readings: Vec<f64>,
}

impl EnergyDataset {
    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn reading(&self, t: usize, user: usize) -> f64 {
        self.readings[t * self.users() + user]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.users();
        &self.readings[t * n..(t + 1) * n]
    }

    /// Sampling interval in minutes.
    pub fn interval_minutes(&self) -> Option<i64> {
        (self.timestamps.len() >= 2).then(|| (self.timestamps[1] - self.timestamps[0]).num_minutes())
    }

    pub fn steps_per_day(&self) -> Result<usize> {
        let m = self
            .interval_minutes()
            .ok_or_else(|| Error::invalid("need at least two timestamps"))?;
        if m <= 0 || 1440 % m != 0 {
            return Err(Error::invalid(format!("interval of {m} minutes does not divide a day")));
        }
        Ok((1440 / m) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.users();
        if n == 0 || self.region_ids.is_empty() {
            return Err(Error::invalid("dataset needs at least one user and one region"));
        }
        if self.readings.len() != self.steps() * n {
            return Err(Error::invalid("readings do not cover every (time, user) cell"));
        }
        if self.user_coords.len() != n || self.user_region.len() != n {
            return Err(Error::invalid("every user needs coordinates and a region"));
        }
        if self.region_coords.len() != self.region_ids.len() {
            return Err(Error::invalid("every region needs coordinates"));
        }
        if self.user_region.iter().any(|&g| g >= self.region_ids.len()) {
            return Err(Error::invalid("user assigned to an unknown region"));
        }
        if let Some(step) = self.interval_minutes() {
            if step <= 0 {
                return Err(Error::invalid("timestamps must be strictly increasing"));
            }
            for (i, w) in self.timestamps.windows(2).enumerate() {
                if (w[1] - w[0]).num_minutes() != step {
                    return Err(Error::invalid(format!(
                        "timestamp {} breaks the fixed {step}-minute interval",
                        i + 1
                    )));
                }
            }
        }
        if let Some(v) = self.readings.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("reading {v} is negative or non-finite")));
        }
        Ok(())
    }

    pub fn user_nodes(&self) -> Result<NodeSet> {
        NodeSet::micro_level(
            self.user_ids.clone(),
            self.user_coords.clone(),
            self.user_region.clone(),
            self.region_ids.len(),
        )
    }

    pub fn region_nodes(&self) -> Result<NodeSet> {
        NodeSet::macro_level(self.region_ids.clone(), self.region_coords.clone())
    }
}
