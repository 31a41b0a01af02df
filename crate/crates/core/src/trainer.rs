use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, batch_iter, Batch, Dataset, Order, SplitManifest, SplitPolicy, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{pixel_weights, total_loss, LossComponents, LossConfig};
use crate::metrics::{
    average_precision, binarize, confusion, pr_curve, threshold_sweep, Confusion, MetricsReport, PrPoint,
};
use crate::model::{self, backward, forward, predict, PredictionMap, Tape, UNetConfig, UNetParams};
use crate::optim::{EpochAction, Optimizer, OptimizerSpec, ScheduleConfig, ScheduleState};
use crate::tensor::{softmax_channels, Tensor4};

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated blobs; each split draws from its own seed derived from the
    /// master seed.
    Synthetic {
        #[serde(default)]
        synth: SynthConfig,
        train: usize,
        val: usize,
        #[serde(default)]
        test: usize,
    },
    /// `images/` and `masks/` PGM directories split by `split`.
    Directory {
        images: PathBuf,
        masks: PathBuf,
        #[serde(default)]
        group_map: Option<PathBuf>,
        split: SplitPolicy,
        /// Resize every sample to the network input size.
        #[serde(default = "yes")]
        resize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub unet: UNetConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Threshold for the per-epoch precision/recall columns.
    pub eval_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    /// Best-validation checkpoint written during training when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerSpec::default(),
            schedule: ScheduleConfig::default(),
            epochs: 100,
            batch_size: 32,
            seed: 0,
            eval_threshold: 0.5,
            data: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::Config(format!(
                "eval_threshold must be in [0, 1], got {}",
                self.eval_threshold
            )));
        }
        self.unet.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if let Some(DataConfig::Synthetic { synth, train, val, .. }) = &self.data {
            synth.validate()?;
            if *train == 0 || *val == 0 {
                return Err(Error::Config("synthetic data needs train >= 1 and val >= 1".into()));
            }
            if [synth.size, synth.size] != self.unet.input_size {
                return Err(Error::Config(format!(
                    "synth.size {} does not match unet.input_size {:?}",
                    synth.size, self.unet.input_size
                )));
            }
        }
        Ok(())
    }
}

/// Train/val/test datasets resolved from a [`DataConfig`].
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub manifest: SplitManifest,
}

const SYNTH_SPLIT_SALT: [u64; 3] = [0x7472_6169_6e00, 0x7661_6c00, 0x7465_7374_00];

/// Seed of one synthetic split, derived from the master seed.
pub fn synth_split_seed(master: u64, split: usize) -> u64 {
    master ^ SYNTH_SPLIT_SALT[split]
}

pub fn load_splits(data: &DataConfig, unet: &UNetConfig, seed: u64) -> Result<DataSplits> {
    match data {
        DataConfig::Synthetic { synth, train, val, test } => {
            let rename = |ds: Dataset, prefix: &str| {
                let samples = ds
                    .samples
                    .into_iter()
                    .map(|mut s| {
                        s.name = format!("{prefix}_{}", s.name);
                        s.group_id = s.name.clone();
                        s
                    })
                    .collect();
                Dataset::new(samples)
            };
            let train = rename(data::synth_blobs(*train, synth, synth_split_seed(seed, 0))?, "train");
            let val = rename(data::synth_blobs(*val, synth, synth_split_seed(seed, 1))?, "val");
            let test = rename(data::synth_blobs(*test, synth, synth_split_seed(seed, 2))?, "test");
            let manifest = SplitManifest {
                policy: format!("synthetic:seed={seed}"),
                train: train.names(),
                val: val.names(),
                test: test.names(),
            };
            Ok(DataSplits { train, val, test, manifest })
        }
        DataConfig::Directory {
            images,
            masks,
            group_map,
            split,
            resize,
        } => {
            let mut all = data::load_dataset(images, masks, group_map.as_deref())?;
            if *resize {
                let [h, w] = unet.input_size;
                all = all.resized(h, w);
            }
            let manifest = data::split(&all, split)?;
            Ok(DataSplits {
                train: all.subset(&manifest.train)?,
                val: all.subset(&manifest.val)?,
                test: all.subset(&manifest.test)?,
                manifest,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_precision: f64,
    pub train_recall: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub lr: f64,
    /// Sample-weighted means of the training loss terms.
    pub train_components: LossComponents,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStopped => "early_stopped",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: UNetParams,
    pub best_params: UNetParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Worker threads for per-sample forward/backward; 0 or 1 runs inline.
    /// Results do not depend on this value.
    pub threads: usize,
}

impl FitOptions {
    /// Reads `TVSEG_THREADS`; unset or unparsable means single-threaded.
    pub fn from_env() -> Self {
        let threads = std::env::var("TVSEG_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        Self { threads }
    }
}

struct Runner {
    pool: Option<rayon::ThreadPool>,
}

impl Runner {
    fn new(threads: usize) -> Result<Self> {
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { pool })
    }

    /// Maps `f` over `0..n`, results in index order.
    fn map<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

struct StepOutput {
    loss: f64,
    components: LossComponents,
    confusion: Confusion,
    grads: Option<UNetParams>,
}

fn batch_confusion(probs: &PredictionMap, labels: &data::Batch, threshold: f64) -> Result<Confusion> {
    let mut total = Confusion::default();
    for n in 0..probs.batch_len() {
        total += confusion(&binarize(probs.foreground_plane(n), threshold), labels.labels.item(n))?;
    }
    Ok(total)
}

/// Forward, loss and (optionally) backward on one batch. Each sample runs
/// through the network separately; gradients are summed in sample order so
/// the result is the same for any thread count.
fn run_batch(
    params: &UNetParams,
    config: &TrainConfig,
    batch: &Batch,
    runner: &Runner,
    with_grads: bool,
) -> Result<StepOutput> {
    let n = batch.images.shape().n;
    let outs = runner.map(n, |i| forward(params, &config.unet, &batch.images.item(i), with_grads));
    let mut logits = Vec::with_capacity(n);
    let mut tapes: Vec<Option<Tape>> = Vec::with_capacity(n);
    for out in outs {
        let (l, t) = out?;
        logits.push(l);
        tapes.push(t);
    }
    let logits = Tensor4::stack(&logits)?;
    let probs = PredictionMap::new(softmax_channels(&logits)?);
    let weights = pixel_weights(config.loss.weight_policy, &batch.labels, config.unet.num_classes);
    let out = total_loss(&config.loss, &probs, &batch.labels, &weights)?;
    let confusion = batch_confusion(&probs, batch, config.eval_threshold)?;
    let grads = if with_grads {
        let per_sample = runner.map(n, |i| backward(params, &config.unet, tapes[i].as_ref(), &out.grad.item(i)));
        let mut total = params.zeros_like();
        for g in per_sample {
            total.add_assign(&g?);
        }
        Some(total)
    } else {
        None
    };
    Ok(StepOutput {
        loss: out.value,
        components: out.components,
        confusion,
        grads,
    })
}

#[derive(Default)]
struct Accum {
    loss: f64,
    components: LossComponents,
    confusion: Confusion,
    samples: usize,
}

impl Accum {
    fn add(&mut self, step: &StepOutput, n: usize) {
        let w = n as f64;
        self.loss += step.loss * w;
        self.components.ce += step.components.ce * w;
        self.components.dice += step.components.dice * w;
        self.components.tv_term += step.components.tv_term * w;
        self.components.tv_raw += step.components.tv_raw * w;
        self.confusion += step.confusion;
        self.samples += n;
    }

    fn mean_loss(&self) -> f64 {
        self.loss / self.samples as f64
    }

    fn mean_components(&self) -> LossComponents {
        let s = self.samples as f64;
        LossComponents {
            ce: self.components.ce / s,
            dice: self.components.dice / s,
            tv_term: self.components.tv_term / s,
            tv_raw: self.components.tv_raw / s,
        }
    }
}

fn check_dataset(ds: &Dataset, config: &UNetConfig, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    let [h, w] = config.input_size;
    if let Some(s) = ds.samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Config(format!(
            "{what} sample {} is {}x{}, network expects {h}x{w}",
            s.name, s.height, s.width
        )));
    }
    Ok(())
}

/// Mean loss and pooled confusion over `dataset` without updating anything.
pub fn validation_pass(params: &UNetParams, config: &TrainConfig, dataset: &Dataset) -> Result<(f64, Confusion)> {
    validation_with(params, config, dataset, &Runner::new(0)?)
}

fn validation_with(params: &UNetParams, config: &TrainConfig, dataset: &Dataset, runner: &Runner) -> Result<(f64, Confusion)> {
    let mut acc = Accum::default();
    for batch in batch_iter(dataset, &dataset.names(), config.batch_size, Order::Sequential)? {
        let step = run_batch(params, config, &batch, runner, false)?;
        acc.add(&step, batch.names.len());
    }
    Ok((acc.mean_loss(), acc.confusion))
}

pub fn fit(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<FitResult> {
    fit_with(config, train, val, &FitOptions::default(), |_| {})
}

/// Trains from a fresh initialization. `on_epoch` sees every record as it
/// is produced.
pub fn fit_with(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    options: &FitOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    check_dataset(train, &config.unet, "training")?;
    check_dataset(val, &config.unet, "validation")?;
    let runner = Runner::new(options.threads)?;

    let mut params = model::build(&config.unet, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
    let mut schedule = ScheduleState::new(config.schedule.clone(), config.optimizer.lr);
    let train_names = train.names();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, UNetParams)> = None;
    let mut stop_reason = StopReason::Completed;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = optimizer.lr();
        let mut acc = Accum::default();
        let order = Order::Shuffled {
            seed: config.seed,
            epoch,
        };
        for (b, batch) in batch_iter(train, &train_names, config.batch_size, order)?.enumerate() {
            let step = run_batch(&params, config, &batch, &runner, true)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
            let grads = step.grads.as_ref().expect("requested");
            if !grads.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {}: non-finite gradient",
                    b + 1
                )));
            }
            optimizer.step(&mut params, grads)?;
            acc.add(&step, batch.names.len());
        }
        let (val_loss, val_conf) = validation_with(&params, config, val, &runner)
            .map_err(|e| Error::Training(format!("epoch {epoch}, validation: {e}")))?;

        let record = EpochRecord {
            epoch,
            train_loss: acc.mean_loss(),
            val_loss,
            train_precision: acc.confusion.precision(),
            train_recall: acc.confusion.recall(),
            val_precision: val_conf.precision(),
            val_recall: val_conf.recall(),
            lr,
            train_components: acc.mean_components(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            if let Some(path) = &config.checkpoint {
                model::save_checkpoint(path, &config.unet, &params)?;
            }
            best = Some((val_loss, epoch, params.clone()));
        }
        if config.schedule.enabled {
            match schedule.end_of_epoch(val_loss) {
                EpochAction::Continue => {}
                EpochAction::DecayLr => optimizer.set_lr(schedule.lr),
                EpochAction::Stop => {
                    stop_reason = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(FitResult {
        params,
        best_params,
        best_epoch,
        history,
        stop_reason,
    })
}

/// Foreground probability plane of every sample, in dataset order.
pub fn predict_dataset(params: &UNetParams, config: &UNetConfig, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    params.check_against(config)?;
    let mut planes = Vec::with_capacity(dataset.len());
    for batch in batch_iter(dataset, &dataset.names(), 16, Order::Sequential)? {
        let probs = predict(params, config, &batch.images)?;
        for n in 0..probs.batch_len() {
            planes.push(probs.foreground_plane(n).to_vec());
        }
    }
    Ok(planes)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub sweep: Vec<MetricsReport>,
    /// `None` when no test pixel is foreground.
    pub pr: Option<Vec<PrPoint>>,
    pub average_precision: Option<f64>,
}

/// Threshold sweep and PR curve of `params` on `dataset`.
pub fn evaluate(params: &UNetParams, config: &UNetConfig, dataset: &Dataset, thresholds: &[f64]) -> Result<Evaluation> {
    params
        .check_against(config)
        .map_err(|e| Error::Config(format!("parameters do not fit the network: {e}")))?;
    let [h, w] = config.input_size;
    if let Some(s) = dataset.samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Config(format!(
            "sample {} is {}x{}, network expects {h}x{w}",
            s.name, s.height, s.width
        )));
    }
    let probs = predict_dataset(params, config, dataset)?;
    let gts: Vec<&[u8]> = dataset.samples.iter().map(|s| s.mask.as_slice()).collect();
    let sweep = threshold_sweep(&probs, &gts, thresholds)?;
    let pr = match pr_curve(&probs, &gts) {
        Ok(points) => Some(points),
        Err(Error::NotComputable(_)) => None,
        Err(e) => return Err(e),
    };
    let average_precision = pr.as_deref().map(average_precision);
    Ok(Evaluation {
        sweep,
        pr,
        average_precision,
    })
}
