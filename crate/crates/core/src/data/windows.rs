use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::EnergyDataset;
use crate::error::{Error, Result};
use crate::graphs::Hierarchy;
use crate::memory::temporal_index;
use crate::model::SampleInput;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            calibration: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.calibration, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Chronological, contiguous, disjoint time ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub calibration: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_bounds(steps: usize, f: &SplitFractions) -> Result<SplitBounds> {
    f.validate()?;
    let train_end = (steps as f64 * f.train).floor() as usize;
    let cal_end = train_end + (steps as f64 * f.calibration).floor() as usize;
    if train_end == 0 || cal_end == train_end || cal_end >= steps {
        return Err(Error::invalid(format!("{steps} steps are too few to split {f:?}")));
    }
    Ok(SplitBounds {
        train: 0..train_end,
        calibration: train_end..cal_end,
        test: cal_end..steps,
    })
}

/// Global z-score fitted on training readings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Scaler {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// One forecast origin: inputs are steps `[origin − window, origin)`,
/// targets are `[origin, origin + horizon)`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub origin: usize,
    pub input: SampleInput,
    /// `[N, horizon]` node-major, scaled.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub hierarchy: Hierarchy,
    pub scaler: Scaler,
    pub bounds: SplitBounds,
    pub train: Vec<Sample>,
    pub calibration: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Builds the graphs, fits the scaler on the training range and cuts
/// samples whose targets lie entirely inside each split. Inputs may reach
/// back into the previous split.
#[allow(clippy::too_many_arguments)]
pub fn prepare(
    ds: &EnergyDataset,
    fractions: &SplitFractions,
    window: usize,
    horizon: usize,
    micro_sigma2: f64,
    macro_sigma2: f64,
    threshold: f64,
    diffusion_order: usize,
) -> Result<PreparedData> {
    ds.validate()?;
    if window == 0 || horizon == 0 {
        return Err(Error::Config("window and horizon must be positive".into()));
    }
    let hierarchy = Hierarchy::build(
        ds.user_nodes()?,
        ds.region_nodes()?,
        micro_sigma2,
        macro_sigma2,
        threshold,
        diffusion_order,
    )?;
    let bounds = split_bounds(ds.steps(), fractions)?;
    let n = ds.users();
    let scaler = Scaler::fit(&ds.readings[..bounds.train.end * n]);
    let steps_per_day = ds.steps_per_day()?;

    let scaled: Vec<f64> = ds.readings.iter().map(|&v| scaler.forward(v)).collect();
    let mut macro_scaled = Vec::with_capacity(scaled.len());
    for t in 0..ds.steps() {
        macro_scaled.extend(hierarchy.macro_feature(&scaled[t * n..(t + 1) * n]));
    }

    let cut = |range: &Range<usize>| -> Result<Vec<Sample>> {
        let first = range.start.max(window);
        let mut out = Vec::new();
        for origin in first..range.end {
            if origin + horizon > range.end {
                break;
            }
            let span = (origin - window) * n..origin * n;
            let mut target = Vec::with_capacity(n * horizon);
            for node in 0..n {
                for h in 0..horizon {
                    target.push(scaled[(origin + h) * n + node]);
                }
            }
            out.push(Sample {
                origin,
                input: SampleInput {
                    signal: scaled[span.clone()].to_vec(),
                    macro_feature: macro_scaled[span].to_vec(),
                    steps: window,
                    last: temporal_index(ds.timestamps[origin - 1], steps_per_day)?,
                },
                target,
            });
        }
        Ok(out)
    };
    let train = cut(&bounds.train)?;
    let calibration = cut(&bounds.calibration)?;
    let test = cut(&bounds.test)?;
    for (name, s) in [("train", &train), ("calibration", &calibration), ("test", &test)] {
        if s.is_empty() {
            return Err(Error::invalid(format!(
                "{name} split has no complete window (window {window}, horizon {horizon})"
            )));
        }
    }
    Ok(PreparedData {
        hierarchy,
        scaler,
        bounds,
        train,
        calibration,
        test,
    })
}

/// MAE of the seasonal persistence forecast `ŷ_t = y_{t − period}` over the
/// given target steps, in raw units.
pub fn persistence_mae(ds: &EnergyDataset, targets: &[usize], period: usize) -> Result<f64> {
    let n = ds.users();
    let mut total = 0.0;
    let mut count = 0usize;
    for &t in targets {
        if t < period {
            return Err(Error::invalid(format!("step {t} has no value one period earlier")));
        }
        for i in 0..n {
            total += (ds.reading(t, i) - ds.reading(t - period, i)).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no targets"));
    }
    Ok(total / count as f64)
}
