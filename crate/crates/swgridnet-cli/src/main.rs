//! Command-line front end: grid-topology inspection, training, evaluation,
//! checkpoint ensembling, gradient checking, and synthetic-data generation.
//!
//! Every failure prints one machine-parsable line to stderr and exits
//! nonzero: status 2 for configuration/usage mistakes, 1 for everything
//! else (missing files, corrupt data, numeric divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use swgridnet::checkpoint;
use swgridnet::config::RunConfig;
use swgridnet::data::{self, CifarVariant, Dataset};
use swgridnet::model::SwGridNetwork;
use swgridnet::tensor::{grad_check, Scalar, Tensor};
use swgridnet::topology::{
    channel_in, channel_out, enumerate_paths, topological_order, GridSpec,
};
use swgridnet::train::{ensemble_predict, evaluate, label_accuracy, TrainSession, CSV_HEADER};
use swgridnet::{Error, Result};

/// Environment variable consulted when `--data-dir` is not given.
const DATA_DIR_VAR: &str = "SWGRID_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "swgridnet",
    version,
    about = "Grid-connected residual networks: topology tools, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the processing-path depth histogram of one grid layer as CSV.
    ///
    /// Rows are `depth,count` with a trailing `total` row; depth counts the
    /// units a path visits.
    Paths {
        /// Lattice dimensionality N.
        #[arg(long)]
        dims: usize,
        /// Units per axis L.
        #[arg(long)]
        side: usize,
    },
    /// Print each unit's input/output channel width as CSV.
    Channels {
        /// Lattice dimensionality N.
        #[arg(long)]
        dims: usize,
        /// Units per axis L.
        #[arg(long)]
        side: usize,
        /// Channel width at the grid's entry corner.
        #[arg(long = "min-channels")]
        min_channels: usize,
        /// Channel width at the grid's exit corner.
        #[arg(long = "max-channels")]
        max_channels: usize,
    },
    /// Train a network and write metrics plus checkpoints.
    Train {
        /// Run configuration file (flat `key = value` text).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to $SWGRID_DATA_DIR. Ignored with
        /// --synth.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Train on generated synthetic data instead of a dataset on disk.
        #[arg(long)]
        synth: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        /// Checkpoint file (self-describing; no config needed).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to $SWGRID_DATA_DIR.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Average the softmax probabilities of several checkpoints on the
    /// test split and report the ensemble's accuracy.
    Ensemble {
        /// Comma-separated checkpoint files; all must share one
        /// architecture.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        /// Dataset directory; defaults to $SWGRID_DATA_DIR.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Compare tape gradients against finite differences on the configured
    /// network (double precision) and fail if they disagree.
    Gradcheck {
        /// Run configuration file describing the network to check.
        #[arg(long)]
        config: PathBuf,
        /// Largest acceptable relative disagreement.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate the synthetic dataset described by a configuration file
    /// and write it as a raw directory (loadable via --data-dir).
    Synth {
        /// Run configuration file (its synthetic-data section is used).
        #[arg(long)]
        spec: PathBuf,
        /// Directory to write `train.bin`, `test.bin`, and `meta.txt` into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Paths { dims, side } => cmd_paths(dims, side),
        Command::Channels { dims, side, min_channels, max_channels } => {
            cmd_channels(dims, side, min_channels, max_channels)
        }
        Command::Train { config, data_dir, out, synth } => {
            cmd_train(&config, data_dir, &out, synth)
        }
        Command::Eval { checkpoint, data_dir } => cmd_eval(&checkpoint, data_dir),
        Command::Ensemble { checkpoints, data_dir } => cmd_ensemble(&checkpoints, data_dir),
        Command::Gradcheck { config, tolerance } => cmd_gradcheck(&config, tolerance),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
    }
}

/// `--data-dir` wins; otherwise the environment provides the directory.
fn resolve_data_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| std::env::var_os(DATA_DIR_VAR).map(PathBuf::from)).ok_or_else(|| {
        Error::Usage(format!("no dataset directory: pass --data-dir or set {DATA_DIR_VAR}"))
    })
}

/// Loads the train and test splits appropriate for a `classes`-way
/// network: a raw directory when `meta.txt` is present, otherwise the
/// standard 10- or 100-class binary layout.
fn load_splits(dir: &Path, classes: usize) -> Result<(Dataset, Dataset)> {
    if data::is_raw_dir(dir) {
        let sets = data::load_raw(dir)?;
        if sets.train.classes() != classes {
            return Err(Error::Data(format!(
                "{} holds {}-class data, the network expects {classes}",
                dir.display(),
                sets.train.classes()
            )));
        }
        return Ok((sets.train, sets.test));
    }
    let variant = match classes {
        10 => CifarVariant::Ten,
        100 => CifarVariant::Hundred,
        other => {
            return Err(Error::Usage(format!(
                "no standard dataset has {other} classes; point --data-dir at a raw directory \
                 produced by `swgridnet synth`"
            )))
        }
    };
    Ok((data::load_cifar(dir, variant, true)?, data::load_cifar(dir, variant, false)?))
}

fn cmd_paths(dims: usize, side: usize) -> Result<()> {
    // Channel bounds do not affect path counting; any valid pair works.
    let spec = GridSpec::new(dims, side, 1, 1)?;
    let histogram = enumerate_paths(&spec)?;
    println!("depth,count");
    for (depth, count) in histogram.rows() {
        println!("{depth},{count}");
    }
    println!("total,{}", histogram.total());
    Ok(())
}

fn cmd_channels(dims: usize, side: usize, min_channels: usize, max_channels: usize) -> Result<()> {
    let spec = GridSpec::new(dims, side, min_channels, max_channels)?;
    println!("unit,in_channels,out_channels");
    for coord in topological_order(&spec)? {
        println!("{coord},{},{}", channel_in(&spec, &coord)?, channel_out(&spec, &coord)?);
    }
    Ok(())
}

fn cmd_train(config: &Path, data_dir: Option<PathBuf>, out: &Path, synth: bool) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let (train_set, test_set) = if synth {
        let sets = data::generate_synth(&cfg.synth)?;
        (sets.train, sets.test)
    } else {
        load_splits(&resolve_data_dir(data_dir)?, cfg.network.classes)?
    };
    let net = SwGridNetwork::<f32>::seeded(cfg.network.clone(), cfg.train.seed)?;
    let mut session = TrainSession::new(&net, cfg.train.clone())?;
    println!("{CSV_HEADER}");
    let artifacts = session.run(&train_set, &test_set, out, |row| {
        println!("{}", row.csv_line());
    })?;
    let last = artifacts.rows.last().expect("at least one epoch");
    println!(
        "done epochs={} steps={} snapshots={} final_test_acc={} checkpoint={}",
        artifacts.rows.len(),
        session.steps(),
        artifacts.snapshots.len(),
        last.test_acc,
        artifacts.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_dir: Option<PathBuf>) -> Result<()> {
    let net = checkpoint::load(ckpt)?;
    let dir = resolve_data_dir(data_dir)?;
    let (_, test_set) = load_splits(&dir, net.config().classes)?;
    let (loss, acc) = evaluate(&net, &test_set, 128)?;
    println!("records={} loss={loss} accuracy={acc} error={}", test_set.len(), 1.0 - acc);
    Ok(())
}

fn cmd_ensemble(paths: &[PathBuf], data_dir: Option<PathBuf>) -> Result<()> {
    let mut nets = Vec::with_capacity(paths.len());
    for path in paths {
        nets.push(checkpoint::load(path)?);
    }
    let first_config = nets[0].config().clone();
    for (net, path) in nets.iter().zip(paths) {
        if *net.config() != first_config {
            return Err(Error::InvalidInput(format!(
                "{} holds a different architecture than {}",
                path.display(),
                paths[0].display()
            )));
        }
    }
    let dir = resolve_data_dir(data_dir)?;
    let (_, test_set) = load_splits(&dir, first_config.classes)?;
    let refs: Vec<&SwGridNetwork<f32>> = nets.iter().collect();
    let predictions = ensemble_predict(&refs, &test_set, 128)?;
    let acc = label_accuracy(&predictions, &test_set)?;
    println!(
        "models={} records={} accuracy={acc} error={}",
        nets.len(),
        test_set.len(),
        1.0 - acc
    );
    Ok(())
}

fn cmd_gradcheck(config: &Path, tolerance: f64) -> Result<()> {
    if !tolerance.is_finite() || tolerance <= 0.0 {
        return Err(Error::Usage(format!("tolerance must be positive, got {tolerance}")));
    }
    let cfg = RunConfig::from_file(config)?;
    let net = SwGridNetwork::<f64>::seeded(cfg.network.clone(), cfg.train.seed)?;
    net.set_training(true);

    // A small fixed batch drawn from the synthetic generator; the check
    // needs any deterministic input, not a representative one.
    let sets = data::generate_synth(&cfg.synth)?;
    let count = sets.train.len().min(4);
    let indices: Vec<usize> = (0..count).collect();
    let (pixels, labels) = sets.train.batch::<f64>(&indices)?;
    let input = Tensor::from_vec(
        &[count, cfg.network.input_channels, cfg.network.image_size, cfg.network.image_size],
        pixels,
    )?;

    let params: Vec<Tensor<f64>> = net.parameters().into_iter().map(|e| e.tensor).collect();
    // The step is kept small so central differences stay on one side of
    // the rectifier kinks; in double precision the rounding floor at 1e-6
    // is still orders of magnitude below the tolerance.
    let report = grad_check(
        || net.forward(&input)?.softmax_cross_entropy(&labels),
        &params,
        1e-6,
    )?;
    println!(
        "checked={} max_rel_error={} worst_param={} worst_index={}",
        report.checked,
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
    if report.max_rel_error.to_f64() > tolerance {
        return Err(Error::Numeric(format!(
            "gradients disagree with finite differences: {} exceeds {tolerance}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(spec)?;
    let sets = data::generate_synth(&cfg.synth)?;
    data::write_raw(&sets, out)?;
    println!(
        "dir={} classes={} train_records={} test_records={} image_size={}",
        out.display(),
        sets.train.classes(),
        sets.train.len(),
        sets.test.len(),
        sets.train.image_size()
    );
    Ok(())
}
