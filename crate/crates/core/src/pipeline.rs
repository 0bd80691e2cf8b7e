//! The generate → train → calibrate → predict → evaluate workflow, with
//! every artifact written under one output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ConformalSection, DataSource, PipelineConfig};
use crate::data::{
    self, generate_synthetic, load_csv, parse_timestamp, CsvPaths, EnergyDataset, PreparedData, Sample, Scaler, TIMESTAMP_FORMAT,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graphs::Hierarchy;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::scqr::{NonconformityWindow, PredictionInterval, ScqrState, StreamPoint, UpdateMode};
use crate::training::{train, TrainReport};

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "GRIDCAST_OUT_DIR";

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const CHECKPOINT: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const CALIBRATION: &str = "calibration.json";
pub const STREAM_STATE: &str = "stream_state.json";
pub const INTERVALS: &str = "intervals.csv";
pub const METRICS: &str = "metrics.json";

/// Horizon-one quantile forecasts for every user at one forecast origin,
/// in signal units.
#[derive(Clone, Debug, PartialEq)]
pub struct StepForecast {
    pub origin: usize,
    pub low: Vec<f64>,
    pub median: Vec<f64>,
    pub high: Vec<f64>,
    pub y: Vec<f64>,
}

impl StepForecast {
    fn points(&self) -> Vec<StreamPoint> {
        (0..self.y.len())
            .map(|i| StreamPoint {
                q_lo: self.low[i],
                q_up: self.high[i],
                y: self.y[i],
            })
            .collect()
    }
}

/// Calibrated score windows: one shared window, or one per user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub per_user: bool,
    pub states: Vec<ScqrState>,
}

impl CalibrationState {
    /// Scores every calibration forecast, oldest origin first and users in
    /// index order within an origin.
    pub fn calibrate(cal: &[StepForecast], alpha: f64, per_user: bool) -> Result<Self> {
        if cal.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        let users = cal[0].y.len();
        let column = |sel: &dyn Fn(&StepForecast) -> &Vec<f64>, user: Option<usize>| -> Vec<f64> {
            cal.iter()
                .flat_map(|s| match user {
                    Some(i) => vec![sel(s)[i]],
                    None => sel(s).clone(),
                })
                .collect()
        };
        let groups: Vec<Option<usize>> = if per_user { (0..users).map(Some).collect() } else { vec![None] };
        let states = groups
            .into_iter()
            .map(|g| {
                let w = NonconformityWindow::calibrate(&column(&|s| &s.low, g), &column(&|s| &s.high, g), &column(&|s| &s.y, g))?;
                ScqrState::new(w, alpha, UpdateMode::Rolling)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CalibrationState { per_user, states })
    }

    /// Runs the test stream. Returns one interval per user per origin.
    pub fn stream(&mut self, test: &[StepForecast], mode: UpdateMode) -> Result<Vec<Vec<PredictionInterval>>> {
        for s in &mut self.states {
            s.mode = mode;
        }
        let mut out = Vec::with_capacity(test.len());
        for step in test {
            let points = step.points();
            let time = step.origin as i64;
            let row = if self.per_user {
                if points.len() != self.states.len() {
                    return Err(Error::invalid(format!(
                        "{} users in the stream but {} calibration windows",
                        points.len(),
                        self.states.len()
                    )));
                }
                self.states
                    .iter_mut()
                    .zip(&points)
                    .map(|(s, p)| s.step(time, *p).map(|o| o.interval))
                    .collect::<Result<Vec<_>>>()?
            } else {
                self.states[0].step_batch(time, &points)?.into_iter().map(|o| o.interval).collect()
            };
            out.push(row);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Calibrates on `cal` and streams `test` under the configured flags.
pub fn conformal_run(
    cal: &[StepForecast],
    test: &[StepForecast],
    alpha: f64,
    flags: &ConformalSection,
) -> Result<(Vec<Vec<PredictionInterval>>, CalibrationState)> {
    let mut state = CalibrationState::calibrate(cal, alpha, flags.per_user)?;
    let mode = if flags.static_cqr {
        UpdateMode::Static
    } else {
        UpdateMode::Rolling
    };
    let intervals = state.stream(test, mode)?;
    Ok((intervals, state))
}

/// Horizon-one forecasts for `samples`, converted back to signal units.
pub fn horizon_one(
    model: &Model,
    samples: &[Sample],
    hierarchy: &Hierarchy,
    scaler: &Scaler,
    exec: Execution,
) -> Result<Vec<StepForecast>> {
    let inputs: Vec<_> = samples.iter().map(|s| s.input.clone()).collect();
    let pred = model.forecast(&inputs, &hierarchy.micro, exec)?;
    let (n, h) = (model.config.nodes, model.config.horizon);
    Ok(samples
        .iter()
        .enumerate()
        .map(|(b, s)| {
            // step 0 of [B, T, N]
            let at = |t: &crate::Tensor| -> Vec<f64> { t.data()[b * h * n..b * h * n + n].iter().map(|&v| scaler.inverse(v)).collect() };
            StepForecast {
                origin: s.origin,
                low: at(&pred.low),
                median: at(&pred.median),
                high: at(&pred.high),
                y: (0..n).map(|i| scaler.inverse(s.target[i * h])).collect(),
            }
        })
        .collect())
}

/// One line of the interval output.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRow {
    pub timestamp: NaiveDateTime,
    pub user_id: String,
    pub low: f64,
    pub median: f64,
    pub high: f64,
    pub y_true: Option<f64>,
}

pub fn write_intervals(path: &Path, rows: &[IntervalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "user_id", "low", "median", "high", "y_true"])?;
    for r in rows {
        w.write_record([
            r.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            r.user_id.clone(),
            r.low.to_string(),
            r.median.to_string(),
            r.high.to_string(),
            r.y_true.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_intervals(path: &Path) -> Result<Vec<IntervalRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Data {
            file: file.clone(),
            row: 1,
            message: format!("missing column {name}"),
        })
    };
    let idx = [col("timestamp")?, col("user_id")?, col("low")?, col("median")?, col("high")?];
    let y_idx = headers.iter().position(|h| h == "y_true");
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |message: String| Error::Data {
            file: file.clone(),
            row,
            message,
        };
        let num = |j: usize, what: &str| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>().map_err(|_| bad(format!("{what} {s:?} is not a number")))
        };
        let ts = rec.get(idx[0]).unwrap_or("");
        let timestamp = parse_timestamp(ts).ok_or_else(|| bad(format!("bad timestamp {ts:?}")))?;
        let y_true = match y_idx.and_then(|j| rec.get(j)).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| bad(format!("y_true {s:?} is not a number")))?),
            None => None,
        };
        rows.push(IntervalRow {
            timestamp,
            user_id: rec.get(idx[1]).unwrap_or("").to_string(),
            low: num(idx[2], "low")?,
            median: num(idx[3], "median")?,
            high: num(idx[4], "high")?,
            y_true,
        });
    }
    Ok(rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A configured run rooted at one output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    /// Resolves the output directory (`out`, else the environment override,
    /// else the configured one), creates it and records the full
    /// configuration there.
    pub fn new(config: PipelineConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.output.dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        let mut recorded = config.clone();
        recorded.output.dir = out.clone();
        fs::write(out.join(RESOLVED_CONFIG), recorded.to_toml()?).map_err(|e| Error::io("writing the resolved configuration", e))?;
        Ok(Pipeline { config, out })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn dataset(&self) -> Result<EnergyDataset> {
        match self.config.data.source {
            DataSource::Synthetic => generate_synthetic(&self.config.data.synthetic),
            DataSource::Csv => {
                let dir = self
                    .config
                    .data
                    .dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.dir is not set".into()))?;
                load_csv(&CsvPaths::in_dir(dir))
            }
        }
    }

    pub fn prepare(&self, ds: &EnergyDataset) -> Result<PreparedData> {
        let g = &self.config.graph;
        data::prepare(
            ds,
            &self.config.split,
            self.config.train.window,
            self.config.train.horizon,
            g.micro_sigma2,
            g.macro_sigma2,
            g.threshold,
            g.diffusion_order,
        )
    }

    /// Writes the synthetic dataset as CSV files under `data/`.
    pub fn generate(&self) -> Result<CsvPaths> {
        if self.config.data.source != DataSource::Synthetic {
            return Err(Error::Config("generate needs data.source = \"synthetic\"".into()));
        }
        let ds = generate_synthetic(&self.config.data.synthetic)?;
        let dir = self.path(DATA_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        data::write_csv(&ds, &dir)
    }

    pub fn train(&self) -> Result<TrainReport> {
        let ds = self.dataset()?;
        let prepared = self.prepare(&ds)?;
        let mcfg = self.config.model_config(ds.users(), ds.steps_per_day()?)?;
        let mut model = Model::new(mcfg, self.config.seed)?;
        log::info!(
            "training {} parameters on {} samples for {} epochs",
            model.num_parameters(),
            prepared.train.len(),
            self.config.train.epochs
        );
        let log_path = self.path(TRAIN_LOG);
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?);
        let report = train(
            &mut model,
            &prepared.train,
            &prepared.hierarchy.micro,
            &self.config.train,
            &self.config.loss(),
            self.config.execution,
            Some(&mut log),
        )?;
        log.flush().map_err(|e| Error::io("writing the training log", e))?;
        Checkpoint::new(&model, prepared.scaler).save(&self.path(CHECKPOINT))?;
        write_json(&self.path(TRAIN_REPORT), &report)?;
        Ok(report)
    }

    fn load_trained(&self) -> Result<(EnergyDataset, PreparedData, Model)> {
        let ckpt = Checkpoint::load(&self.path(CHECKPOINT))?;
        let ds = self.dataset()?;
        let mut prepared = self.prepare(&ds)?;
        if ckpt.config.nodes != ds.users() {
            return Err(Error::invalid(format!(
                "checkpoint expects {} users, data has {}",
                ckpt.config.nodes,
                ds.users()
            )));
        }
        if ckpt.scaler != prepared.scaler {
            // Samples are cut with the training-time scaler.
            prepared = rescale(prepared, &ckpt.scaler);
        }
        let model = ckpt.model()?;
        Ok((ds, prepared, model))
    }

    pub fn calibrate(&self) -> Result<CalibrationState> {
        let (_, prepared, model) = self.load_trained()?;
        let cal = horizon_one(
            &model,
            &prepared.calibration,
            &prepared.hierarchy,
            &prepared.scaler,
            self.config.execution,
        )?;
        let state = CalibrationState::calibrate(&cal, self.config.alpha, self.config.conformal.per_user)?;
        state.save(&self.path(CALIBRATION))?;
        Ok(state)
    }

    pub fn predict(&self) -> Result<Vec<IntervalRow>> {
        let (ds, prepared, model) = self.load_trained()?;
        let mut state = CalibrationState::load(&self.path(CALIBRATION))?;
        let test = horizon_one(&model, &prepared.test, &prepared.hierarchy, &prepared.scaler, self.config.execution)?;
        let mode = if self.config.conformal.static_cqr {
            UpdateMode::Static
        } else {
            UpdateMode::Rolling
        };
        let intervals = state.stream(&test, mode)?;
        state.save(&self.path(STREAM_STATE))?;
        let mut rows = Vec::with_capacity(test.len() * ds.users());
        for (step, ivs) in test.iter().zip(&intervals) {
            for (i, iv) in ivs.iter().enumerate() {
                rows.push(IntervalRow {
                    timestamp: ds.timestamps[step.origin],
                    user_id: ds.user_ids[i].clone(),
                    low: iv.low,
                    median: step.median[i],
                    high: iv.high,
                    y_true: Some(step.y[i]),
                });
            }
        }
        write_intervals(&self.path(INTERVALS), &rows)?;
        Ok(rows)
    }

    pub fn evaluate(&self) -> Result<MetricsReport> {
        let path = self.path(INTERVALS);
        let rows = read_intervals(&path)?;
        if rows.is_empty() {
            return Err(Error::invalid(format!("{} holds no intervals", path.display())));
        }
        let mut y = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            y.push(r.y_true.ok_or_else(|| Error::Data {
                file: path.display().to_string(),
                row: i + 2,
                message: "y_true is required for evaluation".into(),
            })?);
        }
        let median: Vec<f64> = rows.iter().map(|r| r.median).collect();
        let ivs: Vec<PredictionInterval> = rows
            .iter()
            .map(|r| PredictionInterval {
                low: r.low,
                high: r.high,
                clamped: false,
            })
            .collect();
        let report = MetricsReport::compute(&y, &median, &ivs, self.config.alpha)?;
        write_json(&self.path(METRICS), &report)?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn e2e(&self) -> Result<MetricsReport> {
        if self.config.data.source == DataSource::Synthetic {
            self.generate()?;
        }
        self.train()?;
        self.calibrate()?;
        self.predict()?;
        self.evaluate()
    }
}

fn rescale(mut p: PreparedData, to: &Scaler) -> PreparedData {
    let from = p.scaler;
    let f = |v: &mut f64| *v = to.forward(from.inverse(*v));
    for s in p.train.iter_mut().chain(&mut p.calibration).chain(&mut p.test) {
        s.input.signal.iter_mut().for_each(f);
        s.input.macro_feature.iter_mut().for_each(f);
        s.target.iter_mut().for_each(f);
    }
    p.scaler = *to;
    p
}
