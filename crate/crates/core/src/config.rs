//! Experiment configuration files.
//!
//! The format is TOML with one table per concern. Every key except
//! `data.source` has a default; unknown keys are rejected. See
//! the `formats` chapter of the guide for the full grammar.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::{ClientConfig, LocalMethod};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::schedule::{ScheduleFamily, WeightSchedule};
use crate::scoring::ScorerKind;
use crate::server::{Aggregation, ServerConfig};

/// One column of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "flood")]
    FLood,
    /// Sample weighting only; data-volume aggregation.
    #[serde(rename = "flood-asw")]
    FLoodAsw,
    /// Confidence-guided aggregation only; unit sample weights.
    #[serde(rename = "flood-dac")]
    FLoodDac,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedavgm")]
    FedAvgM,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FLood,
        Method::FLoodAsw,
        Method::FLoodDac,
        Method::FedAvg,
        Method::FedProx,
        Method::FedAvgM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FLood => "flood",
            Method::FLoodAsw => "flood-asw",
            Method::FLoodDac => "flood-dac",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedAvgM => "fedavgm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown method `{s}`, expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::center_scale")]
        class_center_scale: f64,
        #[serde(default = "defaults::noise_sigma")]
        noise_sigma: f64,
    },
    /// Paths are resolved relative to the config file.
    Csv { train: PathBuf, test: PathBuf },
}

impl DataSource {
    pub fn synthetic_spec(&self) -> Option<(SyntheticSpec, usize)> {
        match *self {
            DataSource::Synthetic {
                num_classes,
                dim,
                samples_per_class,
                test_per_class,
                class_center_scale,
                noise_sigma,
            } => Some((
                SyntheticSpec {
                    num_classes,
                    dim,
                    samples_per_class,
                    class_center_scale,
                    noise_sigma,
                },
                test_per_class,
            )),
            DataSource::Csv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet { beta: f64 },
    Pathological { classes_per_client: usize },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Pathological {
            classes_per_client: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// FedProx proximal coefficient.
    pub prox_mu: f64,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            prox_mu: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Cosine,
    Linear,
    Quadratic,
    Exponential,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerName {
    Msp,
    MaxLogit,
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloodSection {
    pub q: f64,
    pub amplification: f64,
    pub halt_round: u32,
    pub start_round: u32,
    pub schedule: ScheduleName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exp_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logistic_slope: Option<f64>,
    pub scorer: ScorerName,
    pub energy_temperature: f64,
    pub alpha: f64,
    /// Constant amplification factor in place of the schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
}

impl Default for FloodSection {
    fn default() -> Self {
        Self {
            q: 0.7,
            amplification: 200.0,
            halt_round: 1000,
            start_round: 0,
            schedule: ScheduleName::Cosine,
            exp_k: None,
            logistic_slope: None,
            scorer: ScorerName::Energy,
            energy_temperature: 1.0,
            alpha: 0.5,
            fixed_lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub total_clients: usize,
    pub per_round: usize,
    pub rounds: u32,
    pub lr_decay: f64,
    pub eval_every: u32,
    /// FedAvgM server momentum.
    pub momentum_rho: f64,
    pub record_wall_time: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            total_clients: 20,
            per_round: 5,
            rounds: 100,
            lr_decay: 0.998,
            eval_every: 1,
            momentum_rho: 0.1,
            record_wall_time: false,
        }
    }
}

mod defaults {
    pub fn seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }
    pub fn methods() -> Vec<super::Method> {
        vec![super::Method::FLood, super::Method::FedAvg]
    }
    pub fn output_dir() -> std::path::PathBuf {
        "runs".into()
    }
    pub fn final_window() -> usize {
        10
    }
    pub fn num_classes() -> usize {
        8
    }
    pub fn dim() -> usize {
        16
    }
    pub fn samples_per_class() -> usize {
        400
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn center_scale() -> f64 {
        1.0
    }
    pub fn noise_sigma() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::methods")]
    pub methods: Vec<Method>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    /// Number of trailing evaluation records averaged in the summary.
    #[serde(default = "defaults::final_window")]
    pub final_window: usize,
    pub data: DataSource,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub flood: FloodSection,
    #[serde(default)]
    pub server: ServerSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn out_of_range(field: &str, value: impl fmt::Display, bound: &str) -> Error {
    Error::config(format!("{field} = {value} is outside {bound}"))
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, origin: &Path, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |span| {
                text[..span.start.min(text.len())].matches('\n').count() as u64 + 1
            });
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must list at least one method"));
        }
        if self.final_window == 0 {
            return Err(out_of_range("final_window", 0, "[1, inf)"));
        }
        if let Some((spec, test)) = self.data.synthetic_spec() {
            for (name, v) in [
                ("data.num_classes", spec.num_classes),
                ("data.dim", spec.dim),
                ("data.samples_per_class", spec.samples_per_class),
                ("data.test_per_class", test),
            ] {
                if v == 0 {
                    return Err(out_of_range(name, v, "[1, inf)"));
                }
            }
            if !(spec.class_center_scale > 0.0 && spec.class_center_scale.is_finite()) {
                return Err(out_of_range(
                    "data.class_center_scale",
                    spec.class_center_scale,
                    "(0, inf)",
                ));
            }
            if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
                return Err(out_of_range("data.noise_sigma", spec.noise_sigma, "[0, inf)"));
            }
        }
        match self.partition {
            PartitionSpec::Dirichlet { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return Err(out_of_range("partition.beta", beta, "(0, inf)"));
            }
            PartitionSpec::Pathological {
                classes_per_client: 0,
            } => {
                return Err(out_of_range(
                    "partition.classes_per_client",
                    0,
                    "[1, num_classes]",
                ));
            }
            _ => {}
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden widths must be positive"));
        }

        let c = &self.client;
        if c.local_epochs == 0 {
            return Err(out_of_range("client.local_epochs", 0, "[1, inf)"));
        }
        if c.batch_size == 0 {
            return Err(out_of_range("client.batch_size", 0, "[1, inf)"));
        }
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(out_of_range("client.lr", c.lr, "(0, inf)"));
        }
        if !(0.0..1.0).contains(&c.momentum) {
            return Err(out_of_range("client.momentum", c.momentum, "[0, 1)"));
        }
        if !(c.weight_decay >= 0.0 && c.weight_decay.is_finite()) {
            return Err(out_of_range("client.weight_decay", c.weight_decay, "[0, inf)"));
        }
        if !(c.prox_mu >= 0.0 && c.prox_mu.is_finite()) {
            return Err(out_of_range("client.prox_mu", c.prox_mu, "[0, inf)"));
        }

        let f = &self.flood;
        if !(f.q > 0.0 && f.q < 1.0) {
            return Err(out_of_range("flood.q", f.q, "(0, 1)"));
        }
        if !(f.amplification > 0.0 && f.amplification.is_finite()) {
            return Err(out_of_range("flood.amplification", f.amplification, "(0, inf)"));
        }
        if f.halt_round == 0 {
            return Err(out_of_range("flood.halt_round", 0, "[1, inf)"));
        }
        if f.start_round >= f.halt_round {
            return Err(out_of_range(
                "flood.start_round",
                f.start_round,
                &format!("[0, halt_round = {})", f.halt_round),
            ));
        }
        if let Some(k) = f.exp_k.filter(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(out_of_range("flood.exp_k", k, "(0, inf)"));
        }
        if let Some(s) = f.logistic_slope.filter(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(out_of_range("flood.logistic_slope", s, "(0, inf)"));
        }
        if !(f.energy_temperature > 0.0 && f.energy_temperature.is_finite()) {
            return Err(out_of_range(
                "flood.energy_temperature",
                f.energy_temperature,
                "(0, inf)",
            ));
        }
        if !(f.alpha >= 0.0 && f.alpha.is_finite()) {
            return Err(out_of_range("flood.alpha", f.alpha, "[0, inf)"));
        }
        if let Some(l) = f.fixed_lambda.filter(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(out_of_range("flood.fixed_lambda", l, "[0, inf)"));
        }

        let s = &self.server;
        if s.total_clients == 0 {
            return Err(out_of_range("server.total_clients", 0, "[1, inf)"));
        }
        if s.per_round == 0 || s.per_round > s.total_clients {
            return Err(out_of_range(
                "server.per_round",
                s.per_round,
                &format!("[1, total_clients = {}]", s.total_clients),
            ));
        }
        if s.rounds == 0 {
            return Err(out_of_range("server.rounds", 0, "[1, inf)"));
        }
        if !(s.lr_decay > 0.0 && s.lr_decay <= 1.0) {
            return Err(out_of_range("server.lr_decay", s.lr_decay, "(0, 1]"));
        }
        if s.eval_every == 0 {
            return Err(out_of_range("server.eval_every", 0, "[1, inf)"));
        }
        if !(0.0..1.0).contains(&s.momentum_rho) {
            return Err(out_of_range("server.momentum_rho", s.momentum_rho, "[0, 1)"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<WeightSchedule> {
        let f = &self.flood;
        let family = match f.schedule {
            ScheduleName::Cosine => ScheduleFamily::Cosine,
            ScheduleName::Linear => ScheduleFamily::Linear,
            ScheduleName::Quadratic => ScheduleFamily::Quadratic,
            ScheduleName::Exponential => match f.exp_k {
                Some(k) => ScheduleFamily::Exponential { k },
                None => ScheduleFamily::default_exponential(f.halt_round),
            },
            ScheduleName::Logistic => match f.logistic_slope {
                Some(slope) => ScheduleFamily::Logistic { slope },
                None => ScheduleFamily::default_logistic(f.halt_round),
            },
        };
        WeightSchedule::new(family, f.amplification, f.halt_round, f.start_round)
    }

    pub fn scorer(&self) -> ScorerKind {
        match self.flood.scorer {
            ScorerName::Msp => ScorerKind::Msp,
            ScorerName::MaxLogit => ScorerKind::MaxLogit,
            ScorerName::Energy => ScorerKind::Energy {
                temperature: self.flood.energy_temperature,
            },
        }
    }

    pub fn client_config(&self, method: Method) -> Result<ClientConfig> {
        let c = &self.client;
        let local = match method {
            Method::FLood | Method::FLoodAsw | Method::FLoodDac => LocalMethod::FLood,
            Method::FedAvg | Method::FedAvgM => LocalMethod::FedAvg,
            Method::FedProx => LocalMethod::FedProx { mu: c.prox_mu },
        };
        let fixed_lambda = match method {
            Method::FLoodDac => Some(1.0),
            _ => self.flood.fixed_lambda,
        };
        let cfg = ClientConfig {
            local_epochs: c.local_epochs,
            batch_size: c.batch_size,
            q: self.flood.q,
            schedule: self.schedule()?,
            scorer: self.scorer(),
            method: local,
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            fixed_lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn server_config(&self, method: Method) -> Result<ServerConfig> {
        let s = &self.server;
        let aggregation = match method {
            Method::FLood | Method::FLoodDac => Aggregation::FLoodWeights,
            Method::FLoodAsw | Method::FedAvg | Method::FedProx => Aggregation::DataVolume,
            Method::FedAvgM => Aggregation::FedAvgM { rho: s.momentum_rho },
        };
        let cfg = ServerConfig {
            total_clients: s.total_clients,
            per_round: s.per_round,
            rounds: s.rounds,
            alpha: self.flood.alpha,
            aggregation,
            lr_decay: s.lr_decay,
            eval_every: s.eval_every,
            hidden: self.model.hidden.clone(),
            record_wall_time: s.record_wall_time,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ExperimentConfig::from_toml_str(&text, path, &base)
}

/// Input of the `gen-data` command: a synthetic task plus its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSpec {
    #[serde(default)]
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_center_scale: f64,
    pub noise_sigma: f64,
    /// Size of the optional held-out split, per class.
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
}

impl GenDataSpec {
    pub fn parse(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].matches('\n').count() as u64 + 1
            }),
            message: e.message().to_string(),
        })
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            class_center_scale: self.class_center_scale,
            noise_sigma: self.noise_sigma,
        }
    }
}
