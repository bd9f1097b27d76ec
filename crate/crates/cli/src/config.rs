use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zkd_core::data::{self, DataSpec, Dataset};
use zkd_core::experiments::TrainConfig;
use zkd_core::nn::{load_checkpoint, Mlp, MlpSpec};
use zkd_core::{KdConfig, TemperatureScheme};

use crate::Failure;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(DataSpec),
    Csv { train: PathBuf, test: PathBuf },
}

impl DataSource {
    /// CSV paths are taken relative to `base` (the config file's directory).
    pub fn load(&self, base: &Path) -> zkd_core::Result<(Dataset, Dataset)> {
        match self {
            DataSource::Generate(spec) => data::generate(spec),
            DataSource::Csv { train, test } => {
                Ok((data::load_csv(base.join(train))?, data::load_csv(base.join(test))?))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSource {
    Train { spec: MlpSpec, config: TrainConfig },
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub teacher: TeacherSource,
    pub student: MlpSpec,
    pub train: TrainConfig,
    pub kd: KdConfig,
    /// Schemes to run per seed; defaults to `kd.scheme` alone.
    #[serde(default)]
    pub schemes: Vec<TemperatureScheme>,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> zkd_core::Result<()> {
        if let DataSource::Generate(spec) = &self.data {
            spec.validate()?;
        }
        if let TeacherSource::Train { spec, config } = &self.teacher {
            spec.validate()?;
            config.validate()?;
        }
        self.student.validate()?;
        self.train.validate()?;
        self.kd.validate()?;
        for s in &self.schemes {
            self.kd.with_scheme(*s).validate()?;
        }
        if self.seeds.is_empty() {
            return Err(zkd_core::Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn schemes(&self) -> Vec<TemperatureScheme> {
        if self.schemes.is_empty() {
            vec![self.kd.scheme]
        } else {
            self.schemes.clone()
        }
    }
}

pub fn load_teacher(
    src: &TeacherSource,
    base: &Path,
    train: &Dataset,
    test: &Dataset,
) -> zkd_core::Result<Mlp> {
    match src {
        TeacherSource::Train { spec, config } => {
            Ok(zkd_core::experiments::train_teacher(train, test, spec, config)?.net)
        }
        TeacherSource::Checkpoint(path) => load_checkpoint(base.join(path)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShackleInstance {
    pub teacher: Vec<f64>,
    pub temperature: f64,
    pub init: Vec<f64>,
    pub lr: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShackleConfig {
    pub instances: Vec<ShackleInstance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub teacher: Vec<f64>,
    pub students: Vec<Vec<f64>>,
    pub tau: f64,
    pub label: Option<usize>,
}
