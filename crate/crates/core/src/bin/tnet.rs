use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transnet::checkpoint;
use transnet::data::{self, CifarLayout, Dataset, SyntheticConfig};
use transnet::experiment::{self, DataSource, ExperimentConfig, RunSpec};
use transnet::invariance::{self, Metric};
use transnet::training::{self, Mode, Predictor};
use transnet::{Error, Result, TransformationSet};

#[derive(Parser)]
#[command(name = "tnet", version, about = "Multi-head CNN training with dihedral transformations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file (`key = value` with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with CIFAR-format binaries (data_batch_*.bin, test_batch.bin).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stratified training subsample size.
    #[arg(long)]
    subsample: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured grid, or a single configuration with --mode/--heads.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many SGD steps.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Loss and accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// `full`, `flip`, or a head index.
        #[arg(long, default_value = "full")]
        predictor: String,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Keep one head, folding its transformation into the kernels.
    Prune {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        keep: usize,
        /// Keep the transformation on the input instead of compiling it.
        #[arg(long)]
        no_compile: bool,
        /// Output checkpoint (`.json` writes the JSON form).
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of mean-logit ensembles of checkpoints.
    Ensemble {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
        /// Largest number of instances; a model with m heads supplies m.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Per-layer kernel invariance scores of a checkpoint.
    Invariance {
        checkpoint: PathBuf,
        #[arg(long, default_value = "c4")]
        group: String,
        #[arg(long, default_value = "norm")]
        metric: Metric,
        /// Divide the norm score by the kernel norm.
        #[arg(long)]
        normalized: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate summary tables and figures of an experiment directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic planted-transformation dataset in CIFAR format.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 400)]
        n_test: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
    },
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.data {
        let layout = match &cfg.data.source {
            DataSource::Cifar { layout, .. } => *layout,
            DataSource::Synthetic { .. } => CifarLayout::CIFAR10,
        };
        cfg.data.source = DataSource::Cifar {
            dir: dir.clone(),
            layout,
        };
    }
    if let Some(n) = common.subsample {
        cfg.data.train_subsample = Some(n);
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn load_split(common: &Common) -> Result<data::DataSplit> {
    let cfg = experiment_config(common)?;
    experiment::load_data(&cfg.data)
}

fn parse_predictor(s: &str) -> Result<Predictor> {
    match s {
        "full" => Ok(Predictor::Full),
        "flip" => Ok(Predictor::FlipAveraged),
        other => other
            .parse::<usize>()
            .map(Predictor::Head)
            .map_err(|_| Error::Input(format!("predictor must be full, flip or a head index, got {:?}", other))),
    }
}

fn save_model(model: &transnet::TransNetModel, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        checkpoint::save_json(model, path)
    } else {
        checkpoint::save(model, path)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            mode,
            heads,
            epochs,
            max_iterations,
        } => {
            let mut cfg = experiment_config(&common)?;
            if mode.is_some() || heads.is_some() {
                let mode = mode.unwrap_or(Mode::TransNet);
                let heads = heads.unwrap_or(if mode == Mode::Base { 1 } else { 2 });
                cfg.grid = vec![RunSpec::new(mode, heads)];
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
                cfg.training.milestones.retain(|&m| m < e);
            }
            if max_iterations.is_some() {
                cfg.training.max_iterations = max_iterations;
            }
            cfg.validate()?;
            let results = experiment::run_experiment(&cfg)?;
            for r in &results.runs {
                println!(
                    "{}:{} seed {} {}: PT acc {} full acc {} gen ratio {} last-layer IS {}",
                    r.mode,
                    r.heads,
                    r.seed,
                    r.status,
                    fmt_opt(r.pt_test_acc),
                    fmt_opt(r.full_test_acc),
                    fmt_opt(r.gen_ratio),
                    fmt_opt(r.last_is_mean)
                );
            }
            println!("results written to {}", cfg.out_dir.display());
        }
        Command::Eval {
            common,
            checkpoint: path,
            predictor,
            train_split,
        } => {
            let model = checkpoint::load(&path)?;
            let split = load_split(&common)?;
            let ds = if train_split { &split.train } else { &split.test };
            let e = training::evaluate(&model, ds, parse_predictor(&predictor)?)?;
            println!("loss,accuracy,n\n{:.6},{:.6},{}", e.loss, e.accuracy, ds.len());
        }
        Command::Prune {
            checkpoint: path,
            keep,
            no_compile,
            out,
        } => {
            let model = checkpoint::load(&path)?;
            let pruned = model.prune(keep, !no_compile)?;
            save_model(&pruned, &out)?;
            println!(
                "kept head {} ({}), {} → {} parameters",
                keep,
                model.transform(keep)?,
                model.count_parameters(),
                pruned.count_parameters()
            );
        }
        Command::Ensemble {
            common,
            checkpoints,
            size,
        } => {
            if checkpoints.is_empty() {
                return Err(Error::Input("no checkpoints given".into()));
            }
            let split = load_split(&common)?;
            let models = checkpoints
                .iter()
                .map(|p| checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = models.iter().collect();
            let available = models.iter().map(|m| m.num_heads()).sum();
            let curve = experiment::evaluate_ensemble(&refs, &split.test, size.unwrap_or(available))?;
            println!("instances,accuracy");
            for (k, a) in curve {
                println!("{},{:.6}", k, a);
            }
        }
        Command::Invariance {
            checkpoint: path,
            group,
            metric,
            normalized,
            out,
        } => {
            let model = checkpoint::load(&path)?;
            let group = TransformationSet::named_group(&group)?;
            let report = invariance::layer_report(model.params(), &group, metric, normalized)?;
            match out {
                Some(dir) => {
                    report.write(&dir, &path.display().to_string())?;
                    print!("{}", report.summary_csv());
                }
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Report { out } => {
            experiment::write_report(&out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.csv"))?);
        }
        Command::SynthData {
            out,
            seed,
            n_train,
            n_test,
            size,
            channels,
            pairs,
        } => {
            let cfg = SyntheticConfig {
                n: n_train,
                size,
                channels,
                num_pairs: pairs,
                seed,
                ..Default::default()
            };
            let split = data::synthetic_split(&cfg, n_test)?;
            std::fs::create_dir_all(&out)?;
            data::write_cifar_binary(&out.join("data_batch_1.bin"), &split.train)?;
            data::write_cifar_binary(&out.join("test_batch.bin"), &split.test)?;
            let meta: String = split
                .train
                .metadata
                .iter()
                .map(|(k, v)| format!("{} = {}\n", k, v))
                .collect();
            std::fs::write(
                out.join("meta.txt"),
                format!(
                    "{}channels = {}\nsize = {}\nclasses = {}\n",
                    meta,
                    channels,
                    size,
                    split.train.num_classes()
                ),
            )?;
            println!(
                "wrote {} train / {} test samples to {}",
                split.train.len(),
                split.test.len(),
                out.display()
            );
            print_layout_hint(&split.train);
        }
    }
    Ok(())
}

fn print_layout_hint(ds: &Dataset) {
    if ds.channels() != 3 || ds.image_size() != 32 || ds.num_classes() != 10 {
        println!(
            "use [data] kind = cifar, channels = {}, size = {}, classes = {} to load it",
            ds.channels(),
            ds.image_size(),
            ds.num_classes()
        );
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.4}", x))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("TNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size thread pool: {}", e);
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
