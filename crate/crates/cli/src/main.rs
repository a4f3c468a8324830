use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flood::config::{parse_config, GenDataSpec, Method};
use flood::data::{gen_synthetic, gen_synthetic_with_holdout, write_csv};
use flood::experiment::{prepare_data, run_matrix, SUMMARY_FILE};
use flood::seeds::{stream_rng, Stream};

#[derive(Parser)]
#[command(
    name = "flood",
    version,
    about = "Federated learning simulator with OOD-driven reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated method names; overrides the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Gaussian-mixture dataset as CSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a held-out split drawn around the same class centers.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Print each client's label histogram for a config.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
        /// Seed used for data generation and partitioning; defaults to the
        /// first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(
    config: PathBuf,
    methods: Option<Vec<Method>>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = parse_config(&config)?;
    let methods = methods.unwrap_or_else(|| cfg.methods.clone());
    let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
    if methods.is_empty() || seeds.is_empty() {
        bail!("need at least one method and one seed");
    }
    let out = out.unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
    let outcome = run_matrix(&cfg, &methods, &seeds, &out)?;
    for row in &outcome.summary {
        println!(
            "{:<10} seeds={} window={} accuracy={:.4} +/- {:.4}",
            row.method, row.seeds, row.window, row.mean_accuracy, row.std_accuracy
        );
    }
    println!(
        "wrote {} metrics files and {}",
        outcome.cells.len(),
        out.join(SUMMARY_FILE).display()
    );
    Ok(())
}

fn gen_data(spec: PathBuf, out: PathBuf, test_out: Option<PathBuf>) -> Result<()> {
    let spec = GenDataSpec::parse(&spec)?;
    let mut rng = stream_rng(spec.seed, Stream::Data, 0, 0);
    // The train split is identical with or without the held-out split.
    let (train, test) = match &test_out {
        Some(_) => {
            let (train, test) = gen_synthetic_with_holdout(&spec.synthetic(), spec.test_per_class, &mut rng)?;
            (train, Some(test))
        }
        None => (gen_synthetic(&spec.synthetic(), &mut rng)?, None),
    };
    write_csv(&train, &out)?;
    println!(
        "wrote {} samples ({} features, {} classes) to {}",
        train.len(),
        train.dim(),
        train.num_classes(),
        out.display()
    );
    if let (Some(test), Some(path)) = (test, test_out) {
        write_csv(&test, &path)?;
        println!("wrote {} held-out samples to {}", test.len(), path.display());
    }
    Ok(())
}

fn partition_stats(config: PathBuf, seed: Option<u64>) -> Result<()> {
    let cfg = parse_config(&config)?;
    let seed = match seed.or_else(|| cfg.seeds.first().copied()) {
        Some(s) => s,
        None => bail!("config lists no seeds; pass --seed"),
    };
    let data = prepare_data(&cfg, seed).with_context(|| format!("preparing data for seed {seed}"))?;
    let classes = data.train.num_classes();
    let header: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
    let mut table = format!("client,total,{}\n", header.join(","));
    for (client, hist) in data.partition.label_histograms(&data.train).iter().enumerate() {
        let counts: Vec<String> = hist.iter().map(usize::to_string).collect();
        table.push_str(&format!(
            "{client},{},{}\n",
            hist.iter().sum::<usize>(),
            counts.join(",")
        ));
    }
    match io::stdout().lock().write_all(table.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            methods,
            seeds,
            out,
        } => run(config, methods, seeds, out),
        Command::GenData { spec, out, test_out } => gen_data(spec, out, test_out),
        Command::PartitionStats { config, seed } => partition_stats(config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
