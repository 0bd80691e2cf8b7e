//! Pipeline configuration: one TOML document plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitFractions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::memory::Similarity;
use crate::model::ModelConfig;
use crate::training::{LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding `readings.csv`, `users.csv` and `regions.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Kernel bandwidth for the user graph.
    pub micro_sigma2: f64,
    /// Kernel bandwidth for the region graph.
    pub macro_sigma2: f64,
    /// Edge weights below this are dropped.
    pub threshold: f64,
    pub diffusion_order: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            micro_sigma2: 4.0,
            macro_sigma2: 25.0,
            threshold: 0.1,
            diffusion_order: 2,
        }
    }
}

/// Model dimensions that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_s: usize,
    pub d_tod: usize,
    pub d_dow: usize,
    pub d_moy: usize,
    pub hidden: usize,
    pub pool_width: usize,
    pub pool_blocks: usize,
    pub similarity: Similarity,
    pub blockwise: bool,
    pub disable_macro: bool,
    pub disable_pools: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_s: m.d_s,
            d_tod: m.d_tod,
            d_dow: m.d_dow,
            d_moy: m.d_moy,
            hidden: m.hidden,
            pool_width: m.pool_width,
            pool_blocks: m.pool_blocks,
            similarity: m.similarity,
            blockwise: m.blockwise,
            disable_macro: m.disable_macro,
            disable_pools: m.disable_pools,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalSection {
    /// One score window per user instead of a single shared window.
    pub per_user: bool,
    /// Freeze the calibration window during the test stream.
    pub static_cqr: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Target miscoverage rate.
    pub alpha: f64,
    pub execution: Execution,
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitFractions,
    pub conformal: ConformalSection,
    pub output: OutputSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            alpha: 0.1,
            execution: Execution::default(),
            data: DataSection::default(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            split: SplitFractions::default(),
            conformal: ConformalSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.data.synthetic.seed = self.seed;
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut root, &path, value).map_err(|m| Error::Config(format!("override {key}: {m}")))?;
        }
        let mut cfg: PipelineConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        LossConfig::new(self.alpha).map_err(|_| Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)))?;
        self.split.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Csv && self.data.dir.is_none() {
            return Err(Error::Config("data.dir is required when data.source = \"csv\"".into()));
        }
        self.model_config(1, 1)?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha }
    }

    /// The full model configuration for a dataset with `nodes` users
    /// sampled `steps_per_day` times a day.
    pub fn model_config(&self, nodes: usize, steps_per_day: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            nodes,
            steps_per_day,
            d_s: m.d_s,
            d_tod: m.d_tod,
            d_dow: m.d_dow,
            d_moy: m.d_moy,
            hidden: m.hidden,
            pool_width: m.pool_width,
            pool_blocks: m.pool_blocks,
            diffusion_order: self.graph.diffusion_order,
            horizon: self.train.horizon,
            similarity: m.similarity,
            blockwise: m.blockwise,
            disable_macro: m.disable_macro,
            disable_pools: m.disable_pools,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(node: &mut toml::Value, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let table = node.as_table_mut().ok_or("not a table")?;
    match path {
        [] => Err("empty key".into()),
        [last] => {
            table.insert((*last).to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry((*head).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            set_path(child, rest, value)
        }
    }
}
