//! Runs an experiment matrix (methods x seeds) described by a config file.
//!
//! Every cell writes `<method>_seed<seed>.csv` into the output directory; the
//! matrix also writes `summary.csv`. Data generation and partitioning depend
//! only on the seed, so all methods of a seed see the same clients.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, Method, PartitionSpec};
use crate::data::{gen_synthetic_with_holdout, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{emit_metrics, format_summary, SummaryRow};
use crate::partition::{partition_dirichlet, partition_pathological, IndexPartition};
use crate::seeds::{stream_rng, Stream};
use crate::server::{run_experiment, MetricsSeries};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: IndexPartition,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (train, test) = match &cfg.data {
        DataSource::Csv { train, test } => (load_csv(cfg.resolve(train))?, load_csv(cfg.resolve(test))?),
        synthetic => {
            let (spec, test_per_class) = synthetic.synthetic_spec().expect("non-csv source is synthetic");
            gen_synthetic_with_holdout(&spec, test_per_class, &mut stream_rng(seed, Stream::Data, 0, 0))?
        }
    };
    let mut rng = stream_rng(seed, Stream::Partition, 0, 0);
    let n = cfg.server.total_clients;
    let partition = match cfg.partition {
        PartitionSpec::Dirichlet { beta } => partition_dirichlet(&train, n, beta, &mut rng)?,
        PartitionSpec::Pathological { classes_per_client } => {
            partition_pathological(&train, n, classes_per_client, &mut rng)?
        }
    };
    Ok(PreparedData {
        train,
        test,
        partition,
    })
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    method: Method,
    seed: u64,
) -> Result<MetricsSeries> {
    run_experiment(
        &cfg.server_config(method)?,
        &cfg.client_config(method)?,
        &data.partition,
        &data.train,
        &data.test,
        seed,
    )
}

pub fn cell_file_name(method: Method, seed: u64) -> String {
    format!("{method}_seed{seed}.csv")
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub series: MetricsSeries,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every (method, seed) cell and writes metrics and summary files.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<MatrixOutcome> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::config("need at least one method and one seed"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prepared: Vec<PreparedData> = seeds
        .iter()
        .map(|&s| prepare_data(cfg, s))
        .collect::<Result<_>>()?;

    let grid: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |i| (m, i)))
        .collect();
    let cells: Vec<CellResult> = grid
        .par_iter()
        .map(|&(method, i)| {
            let series = run_cell(cfg, &prepared[i], method, seeds[i])?;
            emit_metrics(&series.records, out_dir.join(cell_file_name(method, seeds[i])))?;
            Ok(CellResult {
                method,
                seed: seeds[i],
                series,
            })
        })
        .collect::<Result<_>>()?;

    let summary: Vec<SummaryRow> = methods
        .iter()
        .map(|&m| {
            let runs = cells
                .iter()
                .filter(|c| c.method == m)
                .map(|c| c.series.records.as_slice());
            SummaryRow::from_runs(m.name(), runs, cfg.final_window)
        })
        .collect();
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, format_summary(&summary)).map_err(|e| Error::io(&path, e))?;
    Ok(MatrixOutcome { cells, summary })
}
