//! Experiment orchestration: a grid of (mode, heads) configurations trained
//! over several seeds, evaluated as pruned and full models, and summarized
//! as CSV tables and SVG figures.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.used            resolved configuration
//! results.csv            one row per (mode, heads, seed)
//! layer_is.csv           per-layer invariance summary per run
//! ensemble.csv           accuracy against number of processed instances
//! summary.csv            mean and standard error across seeds
//! *.svg                  figures
//! <mode>-m<heads>/seed<s>/{model.tnet, train_log.csv, invariance*.csv}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ConfigFile;
use crate::data::{self, CifarLayout, DataSplit, Dataset, SyntheticConfig};
use crate::dihedral::TransformationSet;
use crate::error::{input_err, Error, Result};
use crate::invariance::{self, InvarianceReport, Metric};
use crate::model::{Architecture, HeadCombine, LayerSpec, TransNetModel};
use crate::svg::{self, Series};
use crate::tensor::Tensor;
use crate::training::{self, Mode, Predictor, TrainingConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { config: SyntheticConfig, n_test: usize },
    Cifar { dir: PathBuf, layout: CifarLayout },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Stratified subsample sizes applied after loading.
    pub train_subsample: Option<usize>,
    pub test_subsample: Option<usize>,
    pub subsample_seed: u64,
    /// Per-channel standardization with training-split statistics.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                config: SyntheticConfig::default(),
                n_test: 400,
            },
            train_subsample: None,
            test_subsample: None,
            subsample_seed: 0,
            normalize: true,
        }
    }
}

pub fn load_data(cfg: &DataConfig) -> Result<DataSplit> {
    let mut split = match &cfg.source {
        DataSource::Synthetic { config, n_test } => data::synthetic_split(config, *n_test)?,
        DataSource::Cifar { dir, layout } => data::load_cifar_dir(dir, *layout)?,
    };
    if let Some(n) = cfg.train_subsample {
        if n < split.train.len() {
            split.train = split.train.stratified_subsample(n, cfg.subsample_seed)?;
        }
    }
    if let Some(n) = cfg.test_subsample {
        if n < split.test.len() {
            split.test = split.test.stratified_subsample(n, cfg.subsample_seed.wrapping_add(1))?;
        }
    }
    if cfg.normalize {
        split.normalize();
    }
    Ok(split)
}

/// Which head a trained multi-head model keeps when pruned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadSelect {
    /// The head whose transformation is the identity.
    #[default]
    Identity,
    /// The head whose compiled single-head model has the lowest training loss.
    Best,
}

impl FromStr for HeadSelect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Self::Identity),
            "best" => Ok(Self::Best),
            other => Err(input_err!("head selection must be identity or best, got {:?}", other)),
        }
    }
}

impl fmt::Display for HeadSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Best => "best",
        })
    }
}

/// One grid entry, written `mode:heads` (e.g. `transnet:2`, `base`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunSpec {
    pub mode: ModeKey,
    pub heads: usize,
}

/// [`Mode`] with an ordering, for use as a map key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModeKey {
    Base,
    TransNet,
    SingleHead,
    ArchOnly,
}

impl From<Mode> for ModeKey {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Base => Self::Base,
            Mode::TransNet => Self::TransNet,
            Mode::SingleHead => Self::SingleHead,
            Mode::ArchOnly => Self::ArchOnly,
        }
    }
}

impl From<ModeKey> for Mode {
    fn from(m: ModeKey) -> Self {
        match m {
            ModeKey::Base => Self::Base,
            ModeKey::TransNet => Self::TransNet,
            ModeKey::SingleHead => Self::SingleHead,
            ModeKey::ArchOnly => Self::ArchOnly,
        }
    }
}

impl RunSpec {
    pub fn new(mode: Mode, heads: usize) -> Self {
        Self {
            mode: mode.into(),
            heads,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode.into()
    }

    /// Directory-friendly name such as `transnet-m2`.
    pub fn label(&self) -> String {
        format!("{}-m{}", self.mode(), self.heads)
    }
}

impl fmt::Display for RunSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.mode(), self.heads)
    }
}

impl FromStr for RunSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (mode, heads) = match s.split_once(':') {
            Some((m, h)) => (
                m.parse::<Mode>()?,
                h.trim()
                    .parse::<usize>()
                    .map_err(|_| input_err!("bad head count in {:?}", s))?,
            ),
            None => (s.parse::<Mode>()?, 1),
        };
        if heads == 0 || (mode == Mode::Base && heads != 1) {
            return Err(input_err!("invalid grid entry {:?}", s));
        }
        Ok(Self::new(mode, heads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub layers: Vec<LayerSpec>,
    pub head_combine: HeadCombine,
    /// Template; `seed`, `mode` and `heads` are set per run.
    pub training: TrainingConfig,
    pub grid: Vec<RunSpec>,
    pub seeds: Vec<u64>,
    pub head_select: HeadSelect,
    pub is_group: TransformationSet,
    pub is_metric: Metric,
    pub is_normalized: bool,
    /// Largest number of processed instances on the ensemble curves.
    pub ensemble_size: usize,
    pub out_dir: PathBuf,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            layers: Architecture::parse_layers("32p,64p,128,128").expect("static layer list"),
            head_combine: HeadCombine::Logits,
            training: TrainingConfig::default(),
            grid: vec![
                RunSpec::new(Mode::Base, 1),
                RunSpec::new(Mode::TransNet, 2),
                RunSpec::new(Mode::TransNet, 3),
                RunSpec::new(Mode::TransNet, 4),
            ],
            seeds: vec![0, 1, 2],
            head_select: HeadSelect::Identity,
            is_group: TransformationSet::c4(),
            is_metric: Metric::Norm,
            is_normalized: false,
            ensemble_size: 4,
            out_dir: PathBuf::from("runs/experiment"),
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads every known key; unknown keys are errors.
    pub fn from_config(mut c: ConfigFile) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = c.take_str("", "name") {
            cfg.name = v;
        }

        let kind = c.take_str("data", "kind").unwrap_or_else(|| "synthetic".into());
        cfg.data.source = match kind.as_str() {
            "synthetic" => {
                let mut s = SyntheticConfig::default();
                if let Some(v) = c.take("data", "n_train")? {
                    s.n = v;
                }
                let n_test = c.take("data", "n_test")?.unwrap_or(400);
                if let Some(v) = c.take("data", "size")? {
                    s.size = v;
                }
                if let Some(v) = c.take("data", "channels")? {
                    s.channels = v;
                }
                if let Some(v) = c.take("data", "pairs")? {
                    s.num_pairs = v;
                }
                if let Some(v) = c.take("data", "jitter")? {
                    s.jitter = v;
                }
                if let Some(v) = c.take("data", "noise")? {
                    s.noise = v;
                }
                if let Some(v) = c.take("data", "seed")? {
                    s.seed = v;
                }
                DataSource::Synthetic { config: s, n_test }
            }
            "cifar" => {
                let dir = c
                    .take_str("data", "dir")
                    .ok_or_else(|| Error::Config("[data] kind = cifar needs dir".into()))?;
                let mut layout = CifarLayout::CIFAR10;
                if let Some(v) = c.take("data", "channels")? {
                    layout.channels = v;
                }
                if let Some(v) = c.take("data", "size")? {
                    layout.size = v;
                }
                if let Some(v) = c.take("data", "classes")? {
                    layout.num_classes = v;
                }
                DataSource::Cifar {
                    dir: PathBuf::from(dir),
                    layout,
                }
            }
            other => return Err(Error::Config(format!("[data] kind {:?} is not synthetic or cifar", other))),
        };
        if let Some(v) = c.take("data", "train_subsample")? {
            cfg.data.train_subsample = Some(v);
        }
        if let Some(v) = c.take("data", "test_subsample")? {
            cfg.data.test_subsample = Some(v);
        }
        if let Some(v) = c.take("data", "subsample_seed")? {
            cfg.data.subsample_seed = v;
        }
        if let Some(v) = c.take("data", "normalize")? {
            cfg.data.normalize = v;
        }

        if let Some(v) = c.take_str("model", "layers") {
            cfg.layers = Architecture::parse_layers(&v)?;
        }
        if let Some(v) = c.take("model", "head_combine")? {
            cfg.head_combine = v;
        }

        let t = &mut cfg.training;
        if let Some(v) = c.take("training", "batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = c.take("training", "epochs")? {
            t.epochs = v;
        }
        if let Some(v) = c.take("training", "max_iterations")? {
            t.max_iterations = Some(v);
        }
        if let Some(v) = c.take("training", "learning_rate")? {
            t.learning_rate = v;
        }
        if let Some(v) = c.take_list("training", "milestones")? {
            t.milestones = v;
        }
        if let Some(v) = c.take("training", "lr_decay")? {
            t.lr_decay = v;
        }
        if let Some(v) = c.take("training", "momentum")? {
            t.momentum = v;
        }
        if let Some(v) = c.take("training", "weight_decay")? {
            t.weight_decay = v;
        }
        if let Some(v) = c.take("training", "decay_biases")? {
            t.decay_biases = v;
        }
        if let Some(v) = c.take("training", "flip_prob")? {
            t.augmentation.horizontal_flip_prob = v;
        }
        if let Some(v) = c.take("training", "pad_crop")? {
            t.augmentation.pad_crop = v;
        }
        if let Some(v) = c.take_str("training", "transforms") {
            t.transforms = Some(TransformationSet::parse_list(&v)?);
        }

        if let Some(v) = c.take_list("experiment", "grid")? {
            cfg.grid = v;
        }
        if let Some(v) = c.take_list("experiment", "seeds")? {
            cfg.seeds = v;
        }
        if let Some(v) = c.take("experiment", "head_select")? {
            cfg.head_select = v;
        }
        if let Some(v) = c.take_str("experiment", "is_group") {
            cfg.is_group = TransformationSet::named_group(&v)?;
        }
        if let Some(v) = c.take("experiment", "is_metric")? {
            cfg.is_metric = v;
        }
        if let Some(v) = c.take("experiment", "is_normalized")? {
            cfg.is_normalized = v;
        }
        if let Some(v) = c.take("experiment", "ensemble_size")? {
            cfg.ensemble_size = v;
        }
        if let Some(v) = c.take_str("experiment", "out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Some(v) = c.take("experiment", "save_checkpoints")? {
            cfg.save_checkpoints = v;
        }
        c.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(ConfigFile::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(ConfigFile::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid and seeds must be nonempty".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for spec in &self.grid {
            self.run_config(*spec, 0).validate()?;
        }
        Ok(())
    }

    /// Training configuration of one grid entry and seed.
    pub fn run_config(&self, spec: RunSpec, seed: u64) -> TrainingConfig {
        let mut t = self.training.clone();
        t.seed = seed;
        t.mode = spec.mode();
        t.heads = spec.heads;
        if t.mode == Mode::Base {
            t.transforms = None;
        }
        t
    }

    pub fn architecture(&self, split: &DataSplit) -> Architecture {
        Architecture {
            in_channels: split.train.channels(),
            input_size: split.train.image_size(),
            layers: self.layers.clone(),
            num_classes: split.train.num_classes(),
        }
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_config_string(&self) -> String {
        let mut s = format!("name = {}\n\n[data]\n", self.name);
        match &self.data.source {
            DataSource::Synthetic { config, n_test } => {
                s += &format!(
                    "kind = synthetic\nn_train = {}\nn_test = {}\nsize = {}\nchannels = {}\npairs = {}\njitter = {}\nnoise = {}\nseed = {}\n",
                    config.n, n_test, config.size, config.channels, config.num_pairs, config.jitter, config.noise, config.seed
                );
            }
            DataSource::Cifar { dir, layout } => {
                s += &format!(
                    "kind = cifar\ndir = {}\nchannels = {}\nsize = {}\nclasses = {}\n",
                    dir.display(),
                    layout.channels,
                    layout.size,
                    layout.num_classes
                );
            }
        }
        if let Some(n) = self.data.train_subsample {
            s += &format!("train_subsample = {}\n", n);
        }
        if let Some(n) = self.data.test_subsample {
            s += &format!("test_subsample = {}\n", n);
        }
        s += &format!("subsample_seed = {}\nnormalize = {}\n", self.data.subsample_seed, self.data.normalize);
        let arch = Architecture {
            in_channels: 1,
            input_size: 1,
            layers: self.layers.clone(),
            num_classes: 1,
        };
        s += &format!("\n[model]\nlayers = {}\nhead_combine = {}\n", arch.layers_string(), self.head_combine);
        let t = &self.training;
        let join = |v: &[String]| v.join(", ");
        s += &format!(
            "\n[training]\nbatch_size = {}\nepochs = {}\n",
            t.batch_size, t.epochs
        );
        if let Some(m) = t.max_iterations {
            s += &format!("max_iterations = {}\n", m);
        }
        s += &format!(
            "learning_rate = {}\nmilestones = {}\nlr_decay = {}\nmomentum = {}\nweight_decay = {}\ndecay_biases = {}\nflip_prob = {}\npad_crop = {}\n",
            t.learning_rate,
            join(&t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>()),
            t.lr_decay,
            t.momentum,
            t.weight_decay,
            t.decay_biases,
            t.augmentation.horizontal_flip_prob,
            t.augmentation.pad_crop
        );
        if let Some(tr) = &t.transforms {
            s += &format!(
                "transforms = {}\n",
                join(&tr.elements().iter().map(|e| e.name().to_string()).collect::<Vec<_>>())
            );
        }
        s += &format!(
            "\n[experiment]\ngrid = {}\nseeds = {}\nhead_select = {}\nis_group = {}\nis_metric = {}\nis_normalized = {}\nensemble_size = {}\nout_dir = {}\nsave_checkpoints = {}\n",
            join(&self.grid.iter().map(|g| g.to_string()).collect::<Vec<_>>()),
            join(&self.seeds.iter().map(|g| g.to_string()).collect::<Vec<_>>()),
            self.head_select,
            self.is_group.group_name(),
            self.is_metric,
            self.is_normalized,
            self.ensemble_size,
            self.out_dir.display(),
            self.save_checkpoints
        );
        s
    }
}

/// One row of `results.csv`. Metric fields are empty for failed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub heads: usize,
    pub seed: u64,
    pub status: String,
    /// Head kept by the pruned model.
    pub pt_head: Option<usize>,
    pub pt_test_acc: Option<f64>,
    pub pt_test_loss: Option<f64>,
    pub pt_train_acc: Option<f64>,
    pub pt_train_loss: Option<f64>,
    pub full_test_acc: Option<f64>,
    pub full_test_loss: Option<f64>,
    pub gen_ratio: Option<f64>,
    pub last_is_mean: Option<f64>,
    pub last_is_std: Option<f64>,
    pub transformation_loss: Option<f64>,
    pub best_compiled_loss: Option<f64>,
    pub best_compiled_head: Option<usize>,
    pub reduction_holds: Option<bool>,
    pub pt_params: Option<usize>,
    pub base_params: usize,
    pub pt_macs: Option<u64>,
    pub base_macs: u64,
    pub complexity_match: Option<bool>,
    pub epochs_run: Option<usize>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn spec(&self) -> Result<RunSpec> {
        format!("{}:{}", self.mode, self.heads).parse()
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIsRecord {
    pub mode: String,
    pub heads: usize,
    pub seed: u64,
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    pub metric: String,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub mode: String,
    pub heads: usize,
    pub instances: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub mode: String,
    pub heads: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over √n; empty for a single seed.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResults {
    pub runs: Vec<RunRecord>,
    pub layer_is: Vec<LayerIsRecord>,
    pub ensembles: Vec<EnsembleRecord>,
}

/// Output of a single trained run.
pub struct RunOutput {
    pub record: RunRecord,
    pub layer_is: Vec<LayerIsRecord>,
    pub model: Option<TransNetModel>,
    pub invariance: Option<InvarianceReport>,
}

fn identity_head(model: &TransNetModel) -> Option<usize> {
    model.transforms().elements().iter().position(|t| t.is_identity())
}

/// Trains one grid entry for one seed and evaluates it. Divergence is
/// reported in the record instead of as an error.
pub fn run_single(cfg: &ExperimentConfig, split: &DataSplit, spec: RunSpec, seed: u64, dir: Option<&Path>) -> Result<RunOutput> {
    let arch = cfg.architecture(split);
    let tcfg = cfg.run_config(spec, seed);
    let base = arch.init_params(1, &mut training::rng_stream(seed, training::streams::INIT))?;
    let base_params = base.count_parameters();
    let base_macs = base.forward_macs(arch.input_size, 1)?;
    let start = Instant::now();
    let mut record = RunRecord {
        mode: spec.mode().to_string(),
        heads: spec.heads,
        seed,
        status: "ok".into(),
        pt_head: None,
        pt_test_acc: None,
        pt_test_loss: None,
        pt_train_acc: None,
        pt_train_loss: None,
        full_test_acc: None,
        full_test_loss: None,
        gen_ratio: None,
        last_is_mean: None,
        last_is_std: None,
        transformation_loss: None,
        best_compiled_loss: None,
        best_compiled_head: None,
        reduction_holds: None,
        pt_params: None,
        base_params,
        pt_macs: None,
        base_macs,
        complexity_match: None,
        epochs_run: None,
        wall_time_s: 0.0,
    };

    let mut model = training::build_model(&arch, &tcfg)?;
    model.combine = cfg.head_combine;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let mut log_file = match dir {
        Some(d) => Some(std::io::BufWriter::new(std::fs::File::create(d.join("train_log.csv"))?)),
        None => None,
    };
    let logs = training::train(
        &mut model,
        split,
        &tcfg,
        log_file.as_mut().map(|w| w as &mut dyn std::io::Write),
    );
    drop(log_file);
    let logs = match logs {
        Ok(l) => l,
        Err(Error::Diverged(msg)) => {
            log::warn!("{} seed {} diverged: {}", spec, seed, msg);
            record.status = format!("diverged: {}", msg);
            record.wall_time_s = start.elapsed().as_secs_f64();
            return Ok(RunOutput {
                record,
                layer_is: Vec::new(),
                model: None,
                invariance: None,
            });
        }
        Err(e) => return Err(e),
    };
    record.epochs_run = Some(logs.len());

    let reduction = if tcfg.mode == Mode::SingleHead {
        None
    } else {
        Some(training::reduction_check(&model, &split.train)?)
    };
    if let Some(r) = &reduction {
        record.transformation_loss = Some(r.transformation_loss);
        record.best_compiled_loss = Some(r.best_loss);
        record.best_compiled_head = Some(r.best_head);
        record.reduction_holds = Some(r.holds);
    }
    let pt_head = match (cfg.head_select, &reduction) {
        (HeadSelect::Best, Some(r)) => r.best_head,
        _ => identity_head(&model).unwrap_or(0),
    };
    let pruned = model.prune(pt_head, true)?;
    record.pt_head = Some(pt_head);
    let pt_test = training::evaluate(&pruned, &split.test, Predictor::Head(0))?;
    let pt_train = training::evaluate(&pruned, &split.train, Predictor::Head(0))?;
    let full_test = training::evaluate(&model, &split.test, Predictor::Full)?;
    record.pt_test_acc = Some(pt_test.accuracy);
    record.pt_test_loss = Some(pt_test.loss);
    record.pt_train_acc = Some(pt_train.accuracy);
    record.pt_train_loss = Some(pt_train.loss);
    record.full_test_acc = Some(full_test.accuracy);
    record.full_test_loss = Some(full_test.loss);
    record.gen_ratio = Some(if pt_train.loss == 0.0 {
        log::warn!("{} seed {}: zero train loss, generalization ratio is infinite", spec, seed);
        f64::INFINITY
    } else {
        pt_test.loss / pt_train.loss
    });
    let pt_params = pruned.count_parameters();
    let pt_macs = pruned.params().forward_macs(arch.input_size, 1)?;
    record.pt_params = Some(pt_params);
    record.pt_macs = Some(pt_macs);
    record.complexity_match = Some(pt_params == base_params && pt_macs == base_macs);

    let report = invariance::layer_report(model.params(), &cfg.is_group, cfg.is_metric, cfg.is_normalized)?;
    let last = &report.last_layer().summary;
    record.last_is_mean = Some(last.mean);
    record.last_is_std = Some(last.std);
    let layer_is = report
        .layers
        .iter()
        .map(|l| LayerIsRecord {
            mode: record.mode.clone(),
            heads: spec.heads,
            seed,
            layer: l.layer,
            mean: l.summary.mean,
            std: l.summary.std,
            metric: cfg.is_metric.to_string(),
            group: report.group.clone(),
        })
        .collect();
    if let Some(d) = dir {
        if cfg.save_checkpoints {
            checkpoint::save(&model, &d.join("model.tnet"))?;
        }
        report.write(d, &spec.label())?;
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    log::info!(
        "{} seed {}: PT acc {:.4}, full acc {:.4}, ratio {:.4}, last-layer IS {:.4}",
        spec,
        seed,
        pt_test.accuracy,
        full_test.accuracy,
        record.gen_ratio.unwrap_or(f64::NAN),
        last.mean
    );
    Ok(RunOutput {
        record,
        layer_is,
        model: Some(model),
        invariance: Some(report),
    })
}

/// Logits of every instance: each model contributes one instance per head,
/// head `j` applied to `t_j(x)`. Returns `instances × samples` logit tensors.
fn instance_logits(models: &[&TransNetModel], ds: &Dataset) -> Result<Vec<Vec<Tensor>>> {
    let mut out = Vec::new();
    for m in models {
        for j in 0..m.num_heads() {
            let logits = (0..ds.len())
                .map(|i| training::predict(m, &ds.image(i), Predictor::Head(j)))
                .collect::<Result<Vec<_>>>()?;
            out.push(logits);
        }
    }
    Ok(out)
}

/// Accuracy of the mean-logit ensemble of the first `k` instances for
/// `k = 1..=size`. A model with `m` heads supplies `m` instances.
pub fn evaluate_ensemble(models: &[&TransNetModel], ds: &Dataset, size: usize) -> Result<Vec<(usize, f64)>> {
    if models.is_empty() || size == 0 {
        return Err(input_err!("ensemble needs at least one model and size ≥ 1"));
    }
    let first = models[0].params();
    for m in models {
        if m.params().num_classes() != first.num_classes() || m.params().in_channels() != first.in_channels() {
            return Err(input_err!("ensemble members have incompatible shapes"));
        }
    }
    let available: usize = models.iter().map(|m| m.num_heads()).sum();
    if available < size {
        return Err(input_err!("{} instances available, {} requested", available, size));
    }
    let logits = instance_logits(models, ds)?;
    let mut sums: Vec<Tensor> = (0..ds.len()).map(|_| Tensor::zeros(&[first.num_classes()])).collect();
    let mut curve = Vec::with_capacity(size);
    for (k, inst) in logits.iter().take(size).enumerate() {
        let mut correct = 0;
        for (i, s) in sums.iter_mut().enumerate() {
            s.axpy(1.0, &inst[i]);
            correct += usize::from(s.argmax() == ds.label(i));
        }
        curve.push((k + 1, correct as f64 / ds.len() as f64));
    }
    Ok(curve)
}

pub fn run_dir(out: &Path, spec: RunSpec, seed: u64) -> PathBuf {
    out.join(spec.label()).join(format!("seed{}", seed))
}

/// Runs the full grid, writes all tables and figures under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let split = load_data(&cfg.data)?;
    log::info!(
        "data: {} train / {} test, {} classes, {}×{}×{}",
        split.train.len(),
        split.test.len(),
        split.train.num_classes(),
        split.train.channels(),
        split.train.image_size(),
        split.train.image_size()
    );
    run_experiment_on(cfg, &split)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, split: &DataSplit) -> Result<ExperimentResults> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.used"), cfg.to_config_string())?;
    let mut results = ExperimentResults::default();
    for &spec in &cfg.grid {
        let mut models = Vec::new();
        for &seed in &cfg.seeds {
            let dir = run_dir(out, spec, seed);
            let r = run_single(cfg, split, spec, seed, Some(&dir))?;
            results.runs.push(r.record);
            results.layer_is.extend(r.layer_is);
            models.extend(r.model);
        }
        let refs: Vec<&TransNetModel> = models.iter().collect();
        let available: usize = refs.iter().map(|m| m.num_heads()).sum();
        let size = cfg.ensemble_size.min(available);
        if size > 0 {
            for (instances, accuracy) in evaluate_ensemble(&refs, &split.test, size)? {
                results.ensembles.push(EnsembleRecord {
                    mode: spec.mode().to_string(),
                    heads: spec.heads,
                    instances,
                    accuracy,
                });
            }
        }
    }
    write_tables(out, &results)?;
    write_report(out)?;
    Ok(results)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {:?}", other)),
    }
}

pub const RESULTS_HEADER: &[&str] = &[
    "mode",
    "heads",
    "seed",
    "status",
    "pt_head",
    "pt_test_acc",
    "pt_test_loss",
    "pt_train_acc",
    "pt_train_loss",
    "full_test_acc",
    "full_test_loss",
    "gen_ratio",
    "last_is_mean",
    "last_is_std",
    "transformation_loss",
    "best_compiled_loss",
    "best_compiled_head",
    "reduction_holds",
    "pt_params",
    "base_params",
    "pt_macs",
    "base_macs",
    "complexity_match",
    "epochs_run",
    "wall_time_s",
];

pub fn write_tables(out: &Path, results: &ExperimentResults) -> Result<()> {
    write_csv(&out.join("results.csv"), &results.runs, RESULTS_HEADER)?;
    write_csv(
        &out.join("layer_is.csv"),
        &results.layer_is,
        &["mode", "heads", "seed", "layer", "mean", "std", "metric", "group"],
    )?;
    write_csv(&out.join("ensemble.csv"), &results.ensembles, &["mode", "heads", "instances", "accuracy"])?;
    Ok(())
}

pub fn read_results(out: &Path) -> Result<ExperimentResults> {
    let opt = |name: &str| -> Result<bool> { Ok(out.join(name).exists()) };
    Ok(ExperimentResults {
        runs: read_csv(&out.join("results.csv"))?,
        layer_is: if opt("layer_is.csv")? {
            read_csv(&out.join("layer_is.csv"))?
        } else {
            Vec::new()
        },
        ensembles: if opt("ensemble.csv")? {
            read_csv(&out.join("ensemble.csv"))?
        } else {
            Vec::new()
        },
    })
}

/// Mean and standard error (sample std / √n) of the finite values.
pub fn mean_stderr(values: &[f64]) -> Option<(f64, Option<f64>)> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let se = (v.len() > 1).then(|| {
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some((mean, se))
}

type MetricFn = fn(&RunRecord) -> Option<f64>;

const SUMMARY_METRICS: &[(&str, MetricFn)] = &[
    ("pt_test_acc", |r| r.pt_test_acc),
    ("full_test_acc", |r| r.full_test_acc),
    ("pt_test_loss", |r| r.pt_test_loss),
    ("pt_train_loss", |r| r.pt_train_loss),
    ("gen_ratio", |r| r.gen_ratio),
    ("last_is_mean", |r| r.last_is_mean),
    ("wall_time_s", |r| Some(r.wall_time_s)),
];

pub fn summarize(runs: &[RunRecord]) -> Result<Vec<SummaryRecord>> {
    let mut groups: BTreeMap<RunSpec, Vec<&RunRecord>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in runs {
        let spec = r.spec()?;
        if !groups.contains_key(&spec) {
            order.push(spec);
        }
        groups.entry(spec).or_default().push(r);
    }
    let mut out = Vec::new();
    for spec in order {
        let rows = &groups[&spec];
        for (name, f) in SUMMARY_METRICS {
            let vals: Vec<f64> = rows.iter().filter(|r| r.ok()).filter_map(|r| f(r)).collect();
            if let Some((mean, stderr)) = mean_stderr(&vals) {
                out.push(SummaryRecord {
                    mode: spec.mode().to_string(),
                    heads: spec.heads,
                    metric: name.to_string(),
                    n: vals.len(),
                    mean,
                    stderr,
                });
            }
        }
        let failed = rows.iter().filter(|r| !r.ok()).count();
        out.push(SummaryRecord {
            mode: spec.mode().to_string(),
            heads: spec.heads,
            metric: "failed_seeds".into(),
            n: rows.len(),
            mean: failed as f64,
            stderr: None,
        });
    }
    Ok(out)
}

/// Test accuracy per epoch averaged over the seeds whose logs exist.
fn learning_curve(out: &Path, spec: RunSpec, seeds: &[u64], column: &str) -> Result<Vec<(f64, f64)>> {
    let mut per_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let path = run_dir(out, spec, seed).join("train_log.csv");
        if !path.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("{}: no {} column", path.display(), name)))
        };
        let (ec, vc) = (col("epoch")?, col(column)?);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
            if let (Some(e), Some(v)) = (parse(ec), parse(vc)) {
                per_epoch.entry(e as usize).or_default().push(v);
            }
        }
    }
    Ok(per_epoch
        .into_iter()
        .map(|(e, v)| (e as f64 + 1.0, v.iter().sum::<f64>() / v.len() as f64))
        .collect())
}

fn read_kernel_scores(path: &Path, layer: usize) -> Result<Vec<Option<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.get(0).and_then(|s| s.parse::<usize>().ok()) == Some(layer) {
            out.push(rec.get(2).and_then(|s| s.parse::<f64>().ok()));
        }
    }
    Ok(out)
}

/// Regenerates `summary.csv` and every figure from the tables and run
/// directories under `out`.
pub fn write_report(out: &Path) -> Result<()> {
    let results = read_results(out)?;
    let summary = summarize(&results.runs)?;
    write_csv(
        &out.join("summary.csv"),
        &summary,
        &["mode", "heads", "metric", "n", "mean", "stderr"],
    )?;

    let mut specs: Vec<RunSpec> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in &results.runs {
        let s = r.spec()?;
        if !specs.contains(&s) {
            specs.push(s);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }

    for (file, column, ylabel) in [
        ("learning_curves.svg", "test_acc", "test accuracy (identity head)"),
        ("train_loss_curves.svg", "train_loss", "training objective"),
    ] {
        let mut series = Vec::new();
        for &spec in &specs {
            let pts = learning_curve(out, spec, &seeds, column)?;
            if !pts.is_empty() {
                series.push(Series::new(spec.label(), pts));
            }
        }
        std::fs::write(out.join(file), svg::line_chart(ylabel, "epoch", ylabel, &series))?;
    }

    let mut by_layer: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for &spec in &specs {
        let rows: Vec<&LayerIsRecord> = results
            .layer_is
            .iter()
            .filter(|r| r.mode == spec.mode().to_string() && r.heads == spec.heads)
            .collect();
        let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let pts = (0..n_layers)
            .map(|l| {
                let means: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.mean).collect();
                mean_stderr(&means).map_or((f64::NAN, 0.0), |(m, se)| (m, se.unwrap_or(0.0)))
            })
            .collect();
        by_layer.push((spec.label(), pts));
    }
    let groups: Vec<(&str, Vec<(f64, f64)>)> = by_layer.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
    std::fs::write(
        out.join("invariance_by_layer.svg"),
        svg::error_bars("mean kernel invariance score per layer", "layer", "IS (mean ± s.e. over seeds)", &groups),
    )?;

    // last layer histogram of the first seed of every configuration
    if let Some(&seed) = seeds.first() {
        let mut named = Vec::new();
        for &spec in &specs {
            let p = run_dir(out, spec, seed).join("invariance.csv");
            let n_layers = results
                .layer_is
                .iter()
                .filter(|r| r.mode == spec.mode().to_string() && r.heads == spec.heads)
                .map(|r| r.layer + 1)
                .max();
            if let (true, Some(n)) = (p.exists(), n_layers) {
                named.push((spec.label(), read_kernel_scores(&p, n - 1)?));
            }
        }
        if !named.is_empty() {
            let max = named
                .iter()
                .flat_map(|(_, s)| s.iter().flatten().copied())
                .fold(0.0f64, f64::max);
            let edges = invariance::bin_edges(max);
            let counts: Vec<(String, Vec<usize>)> = named
                .iter()
                .map(|(n, s)| (n.clone(), invariance::histogram(s, &edges)))
                .collect();
            let groups: Vec<(&str, &[usize])> = counts.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
            std::fs::write(
                out.join("invariance_last_layer.svg"),
                svg::histogram(&format!("last-layer kernel scores, seed {}", seed), "score", &edges, &groups),
            )?;
        }
    }

    let mut series = Vec::new();
    for &spec in &specs {
        let pts: Vec<(f64, f64)> = results
            .ensembles
            .iter()
            .filter(|e| e.mode == spec.mode().to_string() && e.heads == spec.heads)
            .map(|e| (e.instances as f64, e.accuracy))
            .collect();
        if !pts.is_empty() {
            series.push(Series::new(spec.label(), pts));
        }
    }
    std::fs::write(
        out.join("ensemble.svg"),
        svg::line_chart("ensemble accuracy", "instances processed", "test accuracy", &series),
    )?;
    Ok(())
}

/// Mean-logit accuracy of a list of checkpoints, for the `ensemble` command.
pub fn ensemble_from_checkpoints(paths: &[PathBuf], ds: &Dataset, size: usize) -> Result<Vec<(usize, f64)>> {
    let models = paths
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TransNetModel> = models.iter().collect();
    evaluate_ensemble(&refs, ds, size)
}
