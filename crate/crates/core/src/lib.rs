//! Federated learning simulator with out-of-distribution driven dual
//! weighting.
//!
//! Clients score each mini-batch with a post-hoc confidence scorer and
//! amplify the loss of the least confident samples by a scheduled factor.
//! After local training each client reports its mean confidence, and the
//! server blends that confidence with data volume when averaging models.
//! FedAvg, FedProx and FedAvgM are provided as baselines, together with
//! Dirichlet and pathological non-IID partitioners and a reproducible
//! experiment runner.
//!
//! ```
//! use flood::prelude::*;
//!
//! let schedule = WeightSchedule::cosine(200.0, 1000)?;
//! assert_eq!(schedule.lambda_at(0), 0.0);
//! assert_eq!(schedule.lambda_at(1000), 400.0);
//! # Ok::<(), flood::Error>(())
//! ```

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod schedule;
pub mod scoring;
pub mod seeds;
pub mod server;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::client::{local_update, proximal_grad, ClientConfig, ClientUpdate, LocalMethod};
    pub use crate::config::{parse_config, ExperimentConfig, Method};
    pub use crate::data::{gen_synthetic, load_csv, write_csv, Dataset, SyntheticSpec};
    pub use crate::error::{Error, Result};
    pub use crate::metrics::MetricsRecord;
    pub use crate::model::{
        forward, per_sample_loss, sgd_step, weighted_grad, Batch, ModelParams, OptimizerState,
    };
    pub use crate::partition::{partition_dirichlet, partition_pathological, IndexPartition};
    pub use crate::schedule::{ScheduleFamily, WeightSchedule};
    pub use crate::scoring::{
        aggregate_confidence, compute_mask, percentile_threshold, score_batch, Mask, ScoreVector, ScorerKind,
    };
    pub use crate::server::{
        aggregate, compute_agg_weights, evaluate, run_experiment, select_clients, server_momentum_step,
        Aggregation, AggregationWeights, ServerConfig,
    };
}
