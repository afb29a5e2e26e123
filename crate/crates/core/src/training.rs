//! The multi-head training objective, SGD with momentum, augmentation, and
//! the statistical and reduction checks run around training.
//!
//! The objective is a list of `(transformation, head)` pairs. For a TransNet
//! model pair `j` is `(t_j, j)`; the single-head variant pairs every
//! transformation with head 0. The sampled loss of a batch is the mean over
//! pairs of the mean cross-entropy of that head on the transformed batch.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{shuffled_indices, DataSplit, Dataset, SampleView};
use crate::dihedral::{DihedralElement, TransformationSet};
use crate::error::{input_err, shape_err, Error, Result};
use crate::model::{self, Architecture, HeadCombine, ModelParams, TransNetModel};
use crate::tensor::{self, Tensor};

/// Samples per work unit. Work units are reduced in order, so results do not
/// depend on the number of threads.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// One identity head.
    Base,
    /// One head per transformation.
    TransNet,
    /// One head shared by every transformation.
    SingleHead,
    /// `m` heads all fed the untransformed input.
    ArchOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::TransNet => "transnet",
            Mode::SingleHead => "single-head",
            Mode::ArchOnly => "arch-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "base" => Ok(Mode::Base),
            "transnet" => Ok(Mode::TransNet),
            "single-head" => Ok(Mode::SingleHead),
            "arch-only" => Ok(Mode::ArchOnly),
            other => Err(input_err!("unknown mode {:?}", other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub horizontal_flip_prob: f64,
    /// Zero padding before a random crop back to the original size.
    pub pad_crop: usize,
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            pad_crop: 0,
        }
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            pad_crop: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many SGD steps even mid-epoch.
    pub max_iterations: Option<usize>,
    pub learning_rate: f64,
    /// Epochs (0-based) from which the rate is multiplied by `lr_decay` again.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    pub seed: u64,
    pub mode: Mode,
    /// Number of transformations `m`.
    pub heads: usize,
    /// Overrides the transformation list implied by `mode` and `heads`.
    pub transforms: Option<TransformationSet>,
    pub augmentation: Augmentation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 60,
            max_iterations: None,
            learning_rate: 0.05,
            milestones: vec![30, 45],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_biases: true,
            seed: 0,
            mode: Mode::Base,
            heads: 1,
            transforms: None,
            augmentation: Augmentation::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(input_err!("batch size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(input_err!("learning rate must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(input_err!("milestones must be strictly increasing"));
        }
        if self.heads == 0 {
            return Err(input_err!("need at least one transformation"));
        }
        if self.mode == Mode::Base && self.heads != 1 {
            return Err(input_err!("base mode trains exactly one head"));
        }
        if let Some(t) = &self.transforms {
            if t.len() != self.heads {
                return Err(input_err!("{} transforms given for {} heads", t.len(), self.heads));
            }
        }
        if !(0.0..=1.0).contains(&self.augmentation.horizontal_flip_prob) {
            return Err(input_err!("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rotations `r0..r(m-1)` for TransNet and single-head training, `m`
    /// identities for the architecture-only ablation.
    pub fn transformation_set(&self) -> TransformationSet {
        if let Some(t) = &self.transforms {
            return t.clone();
        }
        match self.mode {
            Mode::Base => TransformationSet::identity(),
            Mode::TransNet | Mode::SingleHead => TransformationSet::rotations(self.heads.min(4)),
            Mode::ArchOnly => TransformationSet::repeated_identity(self.heads),
        }
    }

    pub fn model_heads(&self) -> usize {
        match self.mode {
            Mode::Base | Mode::SingleHead => 1,
            Mode::TransNet | Mode::ArchOnly => self.heads,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_decay.powi(n as i32)
    }

    pub fn objective(&self, model: &TransNetModel) -> Objective {
        match self.mode {
            Mode::SingleHead => Objective::single_head(&self.transformation_set()),
            _ => Objective::transnet(model),
        }
    }
}

/// Named random streams derived from one root seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const DATA: u64 = 5;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh model for `cfg`, initialized from the `INIT` stream of its seed.
pub fn build_model(arch: &Architecture, cfg: &TrainingConfig) -> Result<TransNetModel> {
    cfg.validate()?;
    let mut rng = rng_stream(cfg.seed, streams::INIT);
    let params = arch.init_params(cfg.model_heads(), &mut rng)?;
    let transforms = match cfg.mode {
        Mode::SingleHead => TransformationSet::identity(),
        _ => cfg.transformation_set(),
    };
    TransNetModel::new(params, transforms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    /// `inputs` is `b×C×H×W`.
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() != 4 || inputs.shape()[0] != labels.len() {
            return Err(shape_err!(
                "batch inputs {:?} for {} labels",
                inputs.shape(),
                labels.len()
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let sub = ds.subset(indices)?;
        Batch::new(sub.images().clone(), sub.labels().to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view(&self) -> SampleView<'_> {
        let s = self.inputs.shape();
        SampleView::new(self.inputs.data(), &self.labels, [s[1], s[2], s[3]])
            .expect("batch shape is valid")
    }
}

/// `(transformation, head)` pairs averaged by the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pairs: Vec<(DihedralElement, usize)>,
}

impl Objective {
    pub fn transnet(model: &TransNetModel) -> Self {
        Self {
            pairs: model
                .transforms()
                .elements()
                .iter()
                .enumerate()
                .map(|(j, &t)| (t, j))
                .collect(),
        }
    }

    /// Every transformation classified by head 0.
    pub fn single_head(transforms: &TransformationSet) -> Self {
        Self {
            pairs: transforms.elements().iter().map(|&t| (t, 0)).collect(),
        }
    }

    pub fn pairs(&self) -> &[(DihedralElement, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct transformations in order of first use, each with its pair indices.
    fn groups(&self) -> Vec<(DihedralElement, Vec<usize>)> {
        let mut out: Vec<(DihedralElement, Vec<usize>)> = Vec::new();
        for (i, &(t, _)) in self.pairs.iter().enumerate() {
            match out.iter_mut().find(|(u, _)| *u == t) {
                Some((_, v)) => v.push(i),
                None => out.push((t, vec![i])),
            }
        }
        out
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(input_err!("empty objective"));
        }
        if let Some(&(_, j)) = self.pairs.iter().find(|(_, j)| *j >= params.num_heads()) {
            return Err(input_err!("objective uses head {} of {}", j, params.num_heads()));
        }
        Ok(())
    }
}

/// Sums over one chunk of samples.
struct ChunkSums {
    loss: f64,
    pair_loss: Vec<f64>,
    correct: usize,
    grads: Option<ModelParams>,
}

fn chunk_sums(
    params: &ModelParams,
    objective: &Objective,
    samples: SampleView<'_>,
    with_grads: bool,
) -> Result<ChunkSums> {
    let groups = objective.groups();
    let mut sums = ChunkSums {
        loss: 0.0,
        pair_loss: vec![0.0; objective.len()],
        correct: 0,
        grads: with_grads.then(|| params.zeros_like()),
    };
    for k in 0..samples.len() {
        let x = samples.image(k);
        let y = samples.label(k);
        for (t, pair_ids) in &groups {
            let tx = t.apply_spatial(&x)?;
            let (features, trace) = if with_grads {
                let (f, tr) = model::backbone_forward_traced(params, &tx)?;
                (f, Some(tr))
            } else {
                (model::backbone_forward(params, &tx)?, None)
            };
            let mut grad_features = Tensor::zeros(features.shape());
            for &p in pair_ids {
                let head = objective.pairs[p].1;
                let logits = model::head_forward(params, head, &features)?;
                let (loss, grad_logits) = tensor::softmax_cross_entropy(&logits, y)?;
                sums.loss += loss;
                sums.pair_loss[p] += loss;
                sums.correct += usize::from(logits.argmax() == y);
                if let Some(g) = sums.grads.as_mut() {
                    let h = &params.heads()[head];
                    let (gi, gw, gb) = tensor::fc_backward(&features, &h.weight, &grad_logits)?;
                    let gh = &mut g.heads_mut()[head];
                    gh.weight.axpy(1.0, &gw);
                    gh.bias.axpy(1.0, &gb);
                    grad_features.axpy(1.0, &gi);
                }
            }
            if let (Some(g), Some(tr)) = (sums.grads.as_mut(), trace.as_ref()) {
                model::backbone_backward(params, tr, &grad_features, 1.0, g)?;
            }
        }
    }
    Ok(sums)
}

/// Loss, per-pair losses, accuracy and (optionally) the gradient of the
/// objective averaged over `samples`.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub pair_losses: Vec<f64>,
    /// Fraction of correct (pair, sample) predictions.
    pub accuracy: f64,
    pub grads: Option<ModelParams>,
}

pub fn evaluate_objective(
    params: &ModelParams,
    objective: &Objective,
    samples: SampleView<'_>,
    with_grads: bool,
) -> Result<ObjectiveEval> {
    objective.check(params)?;
    if samples.is_empty() {
        return Err(input_err!("no samples"));
    }
    let n = samples.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| chunk_sums(params, objective, samples.range(s, e), with_grads))
        .collect::<Result<Vec<_>>>()?;

    let m = objective.len();
    let mut loss = 0.0;
    let mut pair_loss = vec![0.0; m];
    let mut correct = 0;
    let mut grads = with_grads.then(|| params.zeros_like());
    for part in parts {
        loss += part.loss;
        for (a, b) in pair_loss.iter_mut().zip(&part.pair_loss) {
            *a += b;
        }
        correct += part.correct;
        if let (Some(g), Some(pg)) = (grads.as_mut(), part.grads.as_ref()) {
            g.axpy(1.0, pg);
        }
    }
    let denom = (n * m) as f64;
    if let Some(g) = grads.as_mut() {
        g.scale_mut(1.0 / denom);
    }
    Ok(ObjectiveEval {
        loss: loss / denom,
        pair_losses: pair_loss.iter().map(|l| l / n as f64).collect(),
        accuracy: correct as f64 / denom,
        grads,
    })
}

/// Mean over heads of the mean cross-entropy of head `t` on `t(x_k)`.
pub fn transformation_loss(model: &TransNetModel, batch: &Batch) -> Result<f64> {
    transformation_loss_on(model, batch.view())
}

pub fn transformation_loss_on(model: &TransNetModel, samples: SampleView<'_>) -> Result<f64> {
    Ok(evaluate_objective(model.params(), &Objective::transnet(model), samples, false)?.loss)
}

/// Loss of a single head averaged over every transformed copy of the batch.
pub fn single_head_loss(model: &TransNetModel, transforms: &TransformationSet, samples: SampleView<'_>) -> Result<f64> {
    Ok(evaluate_objective(model.params(), &Objective::single_head(transforms), samples, false)?.loss)
}

/// SGD with momentum and weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, decay_biases: bool) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            decay_biases,
            velocity: None,
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.decay_biases)
    }

    pub fn velocity(&self) -> Option<&ModelParams> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let mask = params.bias_mask();
        for (((p, v), g), is_bias) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
            .zip(mask)
        {
            let wd = if is_bias && !self.decay_biases {
                0.0
            } else {
                self.weight_decay
            };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + wd * *pv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub pair_losses: Vec<f64>,
    pub accuracy: f64,
}

/// Differentiates the objective on `samples` and applies one SGD update.
pub fn objective_step(
    model: &mut TransNetModel,
    objective: &Objective,
    samples: SampleView<'_>,
    opt: &mut Sgd,
) -> Result<StepOutput> {
    let eval = evaluate_objective(model.params(), objective, samples, true)?;
    if !eval.loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {}", eval.loss)));
    }
    let grads = eval.grads.expect("gradients requested");
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    opt.step(model.params_mut(), &grads);
    Ok(StepOutput {
        loss: eval.loss,
        pair_losses: eval.pair_losses,
        accuracy: eval.accuracy,
    })
}

/// One step on the sampled transformation loss: head `j` sees `t_j(x)`.
pub fn train_step(model: &mut TransNetModel, batch: &Batch, opt: &mut Sgd) -> Result<StepOutput> {
    let obj = Objective::transnet(model);
    objective_step(model, &obj, batch.view(), opt)
}

/// One step of the single-head variant: head 0 sees every `t(x)`, `t ∈ transforms`.
pub fn single_head_step(
    model: &mut TransNetModel,
    transforms: &TransformationSet,
    batch: &Batch,
    opt: &mut Sgd,
) -> Result<StepOutput> {
    if model.num_heads() != 1 {
        return Err(input_err!("single-head step needs exactly one head, got {}", model.num_heads()));
    }
    objective_step(model, &Objective::single_head(transforms), batch.view(), opt)
}

/// Optional horizontal flip, then zero padding by `pad` and a crop at
/// `(dy, dx)` back to the original size.
pub fn augment_with(x: &Tensor, flip: bool, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let x = if flip {
        DihedralElement::M.apply_spatial(x)?
    } else {
        x.clone()
    };
    if pad == 0 {
        return Ok(x);
    }
    let [c, h, w] = x.shape()[..] else {
        return Err(shape_err!("augment expects C×H×W, got {:?}", x.shape()));
    };
    if dy > 2 * pad || dx > 2 * pad {
        return Err(input_err!("crop offset outside padded image"));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            let si = (i + dy) as isize - pad as isize;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = (j + dx) as isize - pad as isize;
                if sj >= 0 && sj < w as isize {
                    dst[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
                }
            }
        }
    }
    Ok(out)
}

pub fn augment<R: Rng + ?Sized>(x: &Tensor, aug: &Augmentation, rng: &mut R) -> Result<Tensor> {
    let flip = aug.horizontal_flip_prob > 0.0 && rng.gen::<f64>() < aug.horizontal_flip_prob;
    let (dy, dx) = if aug.pad_crop > 0 {
        (rng.gen_range(0..=2 * aug.pad_crop), rng.gen_range(0..=2 * aug.pad_crop))
    } else {
        (0, 0)
    };
    augment_with(x, flip, aug.pad_crop, dy, dx)
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean sampled objective over the epoch's batches.
    pub train_loss: f64,
    /// Identity head on the untransformed test split.
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub head_losses: Vec<f64>,
    pub wall_time_s: f64,
}

pub fn epoch_log_header(m: usize) -> String {
    let mut cols = vec!["epoch", "lr", "train_loss", "test_loss", "train_acc", "test_acc"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend((0..m).map(|j| format!("head{}_loss", j)));
    cols.push("wall_time_s".into());
    cols.join(",")
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            format!("{}", self.lr),
            format!("{:.6}", self.train_loss),
            format!("{:.6}", self.test_loss),
            format!("{:.6}", self.train_acc),
            format!("{:.6}", self.test_acc),
        ];
        cols.extend(self.head_losses.iter().map(|l| format!("{:.6}", l)));
        cols.push(format!("{:.3}", self.wall_time_s));
        cols.join(",")
    }
}

/// Runs the epoch loop over shuffled permutations of the training split.
/// Every epoch appends one CSV row to `log` (header first).
pub fn train(
    model: &mut TransNetModel,
    split: &DataSplit,
    cfg: &TrainingConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let objective = cfg.objective(model);
    objective.check(model.params())?;
    let mut shuffle_rng = rng_stream(cfg.seed, streams::SHUFFLE);
    let mut aug_rng = rng_stream(cfg.seed, streams::AUGMENT);
    let mut opt = Sgd::from_config(cfg);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0usize;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{}", epoch_log_header(objective.len()))?;
    }
    'epochs: for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let order = shuffled_indices(split.train.len(), &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut pair_sum = vec![0.0; objective.len()];
        let mut seen = 0usize;
        let mut stop = false;
        for idx in order.chunks(cfg.batch_size) {
            let images = idx
                .iter()
                .map(|&i| augment(&split.train.image(i), &cfg.augmentation, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels = idx.iter().map(|&i| split.train.label(i)).collect();
            let batch = Batch::new(Tensor::stack(&images)?, labels)?;
            let out = objective_step(model, &objective, batch.view(), &mut opt)?;
            let w = idx.len() as f64;
            loss_sum += out.loss * w;
            acc_sum += out.accuracy * w;
            for (a, b) in pair_sum.iter_mut().zip(&out.pair_losses) {
                *a += b * w;
            }
            seen += idx.len();
            iterations += 1;
            if cfg.max_iterations.is_some_and(|max| iterations >= max) {
                stop = true;
                break;
            }
        }
        let test = evaluate(model, &split.test, Predictor::Head(0))?;
        let entry = EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / seen as f64,
            test_loss: test.loss,
            train_acc: acc_sum / seen as f64,
            test_acc: test.accuracy,
            head_losses: pair_sum.iter().map(|s| s / seen as f64).collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {} train {:.4} test {:.4} acc {:.4}",
            epoch,
            entry.lr,
            entry.train_loss,
            entry.test_loss,
            entry.test_acc
        );
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", entry.csv_row())?;
        }
        logs.push(entry);
        if stop {
            break 'epochs;
        }
    }
    Ok(logs)
}

/// Which output of a model is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Head `j` on `t_j(x)`.
    Head(usize),
    /// Mean over heads.
    Full,
    /// Mean of the full model on `x` and on its horizontal flip.
    FlipAveraged,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn predict(model: &TransNetModel, x: &Tensor, predictor: Predictor) -> Result<Tensor> {
    match predictor {
        Predictor::Head(j) => {
            let t = model.transform(j)?;
            model.forward_head(j, &t.apply_spatial(x)?)
        }
        Predictor::Full => model.forward_full(x),
        Predictor::FlipAveraged => model.predict_with_flip_averaging(x),
    }
}

fn returns_probabilities(model: &TransNetModel, predictor: Predictor) -> bool {
    model.combine == HeadCombine::Probabilities && !matches!(predictor, Predictor::Head(_))
}

/// Mean cross-entropy and accuracy of `predictor` over `ds`. When the model
/// averages probabilities the averaged distribution is scored directly.
pub fn evaluate(model: &TransNetModel, ds: &Dataset, predictor: Predictor) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(input_err!("empty dataset"));
    }
    let n = ds.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| -> Result<(f64, usize)> {
            let mut loss = 0.0;
            let mut correct = 0;
            for i in s..e {
                let logits = predict(model, &ds.image(i), predictor)?;
                let y = ds.label(i);
                let l = if returns_probabilities(model, predictor) {
                    -logits.data()[y].max(f64::MIN_POSITIVE).ln()
                } else {
                    tensor::softmax_cross_entropy(&logits, y)?.0
                };
                loss += l;
                correct += usize::from(logits.argmax() == y);
            }
            Ok((loss, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, correct) = parts
        .into_iter()
        .fold((0.0, 0), |(l, c), (pl, pc)| (l + pl, c + pc));
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
    })
}

/// Test loss over train loss; `+∞` (with a warning) when the train loss is zero.
pub fn generalization_ratio(model: &TransNetModel, train: &Dataset, test: &Dataset, predictor: Predictor) -> Result<f64> {
    let tr = evaluate(model, train, predictor)?.loss;
    let te = evaluate(model, test, predictor)?.loss;
    if tr == 0.0 {
        log::warn!("train loss is zero; generalization ratio reported as infinity");
        return Ok(f64::INFINITY);
    }
    Ok(te / tr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// i.i.d. uniform draws with replacement.
    WithReplacement,
    /// Every batch is the whole dataset in order.
    FullPass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnbiasednessReport {
    pub empirical_mean: f64,
    pub full_loss: f64,
    pub std_error: f64,
    pub z: f64,
    pub n_batches: usize,
}

/// Compares the mean sampled transformation loss over `n_batches` random
/// batches with the transformation loss on the whole dataset.
pub fn unbiasedness_check(
    model: &TransNetModel,
    ds: &Dataset,
    batch_size: usize,
    n_batches: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<UnbiasednessReport> {
    if ds.is_empty() || batch_size == 0 || n_batches == 0 {
        return Err(input_err!("need a nonempty dataset, batch size and batch count"));
    }
    let full_loss = transformation_loss_on(model, ds.view())?;
    let mut rng = rng_stream(seed, streams::SAMPLING);
    let mut losses = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let l = match sampling {
            Sampling::FullPass => transformation_loss_on(model, ds.view())?,
            Sampling::WithReplacement => {
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..ds.len())).collect();
                transformation_loss(model, &Batch::from_indices(ds, &idx)?)?
            }
        };
        losses.push(l);
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = if losses.len() > 1 {
        losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std_error = (var / n).sqrt();
    let diff = mean - full_loss;
    let z = if std_error > 0.0 {
        diff / std_error
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    };
    Ok(UnbiasednessReport {
        empirical_mean: mean,
        full_loss,
        std_error,
        z,
        n_batches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionReport {
    /// Transformation loss of the multi-head model on the data.
    pub transformation_loss: f64,
    /// Loss of each head pruned and compiled into a plain single-head model.
    pub compiled_losses: Vec<f64>,
    pub best_head: usize,
    pub best_loss: f64,
    pub holds: bool,
}

/// Prunes every head with its transformation compiled into the kernels and
/// checks that the best of them does no worse than the transformation loss.
pub fn reduction_check(model: &TransNetModel, ds: &Dataset) -> Result<ReductionReport> {
    let lt = transformation_loss_on(model, ds.view())?;
    let id = TransformationSet::identity();
    let compiled = (0..model.num_heads())
        .map(|j| {
            let pruned = model.prune(j, true)?;
            single_head_loss(&pruned, &id, ds.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let (best_head, best_loss) = compiled
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (j, l)| if l < acc.1 { (j, l) } else { acc });
    Ok(ReductionReport {
        transformation_loss: lt,
        compiled_losses: compiled,
        best_head,
        best_loss,
        holds: best_loss <= lt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvLayer, Head, LayerSpec};
    use crate::tensor::Padding;

    fn small_arch() -> Architecture {
        Architecture {
            in_channels: 1,
            input_size: 6,
            layers: vec![LayerSpec::same(3, 3, true), LayerSpec::same(4, 3, false)],
            num_classes: 3,
        }
    }

    fn small_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::uniform(&[n, 1, 6, 6], 1.0, &mut rng);
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new("small", images, labels, 3).unwrap()
    }

    fn model(heads: usize, transforms: TransformationSet, seed: u64) -> TransNetModel {
        let p = small_arch()
            .init_params(heads, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        TransNetModel::new(p, transforms).unwrap()
    }

    #[test]
    fn single_identity_head_is_plain_cross_entropy() {
        let m = model(1, TransformationSet::identity(), 1);
        let ds = small_data(10, 2);
        let mut sum = 0.0;
        for i in 0..ds.len() {
            let logits = m.forward_head(0, &ds.image(i)).unwrap();
            sum += tensor::softmax_cross_entropy(&logits, ds.label(i)).unwrap().0;
        }
        let l = transformation_loss_on(&m, ds.view()).unwrap();
        assert!((l - sum / 10.0).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut m = model(2, TransformationSet::rotations(2), 3);
        let before = m.params().clone();
        let ds = small_data(5, 4);
        let batch = Batch::new(ds.images().clone(), ds.labels().to_vec()).unwrap();
        let mut opt = Sgd::new(0.0, 0.9, 1e-4, true);
        train_step(&mut m, &batch, &mut opt).unwrap();
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn sgd_matches_closed_form_on_scalar_quadratic() {
        // one-parameter model: f(θ) = ½ a θ², grad = a θ
        let layer = ConvLayer {
            kernels: Tensor::full(&[1, 1, 1, 1], 2.0),
            bias: Tensor::zeros(&[1]),
            padding: Padding::Same,
            relu: false,
            pool_after: false,
        };
        let head = Head {
            weight: Tensor::zeros(&[1, 1]),
            bias: Tensor::zeros(&[1]),
        };
        let mut p = ModelParams::new(vec![layer], vec![head]).unwrap();
        let (a, lr, mu, wd) = (3.0, 0.1, 0.9, 0.01);
        let mut opt = Sgd::new(lr, mu, wd, false);
        let mut theta = 2.0f64;
        let mut v = 0.0f64;
        for _ in 0..3 {
            let mut g = p.zeros_like();
            g.conv_layers_mut()[0].kernels.data_mut()[0] = a * p.conv_layers()[0].kernels.data()[0];
            opt.step(&mut p, &g);
            v = mu * v + a * theta + wd * theta;
            theta -= lr * v;
        }
        assert!((p.conv_layers()[0].kernels.data()[0] - theta).abs() < 1e-15);
        // first step by hand: v = 6 + 0.02 = 6.02, θ = 2 − 0.602
        let mut p1 = p.clone();
        p1.conv_layers_mut()[0].kernels.data_mut()[0] = 2.0;
        let mut opt1 = Sgd::new(lr, mu, wd, false);
        let mut g = p1.zeros_like();
        g.conv_layers_mut()[0].kernels.data_mut()[0] = 6.0;
        opt1.step(&mut p1, &g);
        assert!((p1.conv_layers()[0].kernels.data()[0] - 1.398).abs() < 1e-15);
    }

    #[test]
    fn two_head_backbone_gradient_is_mean_of_single_heads() {
        let m = model(2, TransformationSet::parse_list("r0,r1").unwrap(), 5);
        let ds = small_data(6, 6);
        let both = evaluate_objective(m.params(), &Objective::transnet(&m), ds.view(), true)
            .unwrap()
            .grads
            .unwrap();
        let single = |pair: (DihedralElement, usize)| {
            let obj = Objective { pairs: vec![pair] };
            evaluate_objective(m.params(), &obj, ds.view(), true).unwrap().grads.unwrap()
        };
        let g0 = single((DihedralElement::IDENTITY, 0));
        let g1 = single((DihedralElement::R, 1));
        for (l, (a, b)) in both
            .conv_layers()
            .iter()
            .zip(g0.conv_layers().iter().zip(g1.conv_layers()))
        {
            let mean = a.kernels.add(&b.kernels).scale(0.5);
            assert!(l.kernels.max_abs_diff(&mean) < 1e-14);
        }
        // each head's gradient carries the 1/m factor
        let h1 = &both.heads()[1].weight;
        assert!(h1.max_abs_diff(&g1.heads()[1].weight.scale(0.5)) < 1e-14);
    }

    #[test]
    fn single_head_with_identity_is_base_training() {
        let ds = small_data(6, 7);
        let batch = Batch::new(ds.images().clone(), ds.labels().to_vec()).unwrap();
        let mut a = model(1, TransformationSet::identity(), 8);
        let mut b = a.clone();
        let mut oa = Sgd::new(0.1, 0.9, 1e-4, true);
        let mut ob = oa.clone();
        for _ in 0..3 {
            train_step(&mut a, &batch, &mut oa).unwrap();
            single_head_step(&mut b, &TransformationSet::identity(), &batch, &mut ob).unwrap();
        }
        assert_eq!(a, b);
        let mut two = model(2, TransformationSet::rotations(2), 9);
        assert!(single_head_step(&mut two, &TransformationSet::identity(), &batch, &mut ob).is_err());
    }

    #[test]
    fn arch_only_heads_share_inputs() {
        let m = model(2, TransformationSet::repeated_identity(2), 10);
        let obj = Objective::transnet(&m);
        let groups = obj.groups();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].0, DihedralElement::IDENTITY);
        assert_eq!(groups[0].1, vec![0, 1]);
    }

    #[test]
    fn augmentation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
        assert_eq!(augment_with(&x, false, 4, 4, 4).unwrap(), x);
        let f = augment_with(&x, true, 0, 0, 0).unwrap();
        assert_eq!(augment_with(&f, true, 0, 0, 0).unwrap(), x);
        let aug = Augmentation::default();
        for _ in 0..20 {
            assert_eq!(augment(&x, &aug, &mut rng).unwrap().shape(), x.shape());
        }
        // shift by one row: crop at dy = pad + 1
        let s = augment_with(&x, false, 1, 2, 1).unwrap();
        assert_eq!(s.data()[0], x.data()[8]);
        assert_eq!(s.data()[7 * 8], 0.0);
    }

    #[test]
    fn unbiasedness_trivial_cases() {
        let m = model(2, TransformationSet::rotations(2), 12);
        let ds = small_data(7, 13);
        let r = unbiasedness_check(&m, &ds, ds.len(), 3, Sampling::FullPass, 0).unwrap();
        assert_eq!(r.empirical_mean, r.full_loss);
        assert_eq!(r.z, 0.0);
        let one = ds.subset(&[0]).unwrap();
        let r = unbiasedness_check(&m, &one, 4, 10, Sampling::WithReplacement, 0).unwrap();
        assert!((r.empirical_mean - r.full_loss).abs() < 1e-15);
    }

    #[test]
    fn generalization_ratio_cases() {
        let m = model(1, TransformationSet::identity(), 14);
        let ds = small_data(9, 15);
        let r = generalization_ratio(&m, &ds, &ds, Predictor::Head(0)).unwrap();
        assert_eq!(r, 1.0);
        let test = small_data(6, 16);
        let doubled_idx: Vec<usize> = (0..6).chain(0..6).collect();
        let doubled = test.subset(&doubled_idx).unwrap();
        let a = generalization_ratio(&m, &ds, &test, Predictor::Head(0)).unwrap();
        let b = generalization_ratio(&m, &ds, &doubled, Predictor::Head(0)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainingConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let cfg = TrainingConfig {
            milestones: vec![5, 5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert!((cfg.lr_at(30) - 0.005).abs() < 1e-15);
        assert!((cfg.lr_at(59) - 0.0005).abs() < 1e-15);
        assert_eq!("single_head".parse::<Mode>().unwrap(), Mode::SingleHead);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = small_data(24, 17);
        let (train, test) = ds.split_at(18).unwrap();
        let split = DataSplit { train, test };
        let cfg = TrainingConfig {
            batch_size: 5,
            epochs: 2,
            mode: Mode::TransNet,
            heads: 2,
            learning_rate: 0.05,
            augmentation: Augmentation {
                horizontal_flip_prob: 0.5,
                pad_crop: 1,
            },
            seed: 3,
            ..Default::default()
        };
        let run = || {
            let mut m = build_model(&small_arch(), &cfg).unwrap();
            let mut buf = Vec::new();
            let logs = super::train(&mut m, &split, &cfg, Some(&mut buf)).unwrap();
            (m, logs.len(), String::from_utf8(buf).unwrap())
        };
        let (a, n, csv) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(n, 2);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("epoch,lr,train_loss,test_loss,train_acc,test_acc,head0_loss,head1_loss,wall_time_s"));
        let r = reduction_check(&a, &split.train).unwrap();
        assert!(r.holds);
    }
}
