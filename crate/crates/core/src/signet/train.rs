//! Supervised training on a synthetic dataset.

use super::{make_inputs, stack, InputPlanes, NetInputs, SigNet, SignetError};
use crate::autodiff::{Adam, BatchNormMode, CheckpointError, Scalar};
use crate::image::{IntrinsicSample, SegmentMap};
use crate::losses::{total_loss, LossReport, LossWeights, Predictions, Targets};
use crate::priors::{PriorBundle, PriorError, DEFAULT_EPS};
use crate::synth::{Manifest, Split, SynthError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const ARCHITECTURE: &str = "architecture.json";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("the training split is empty")]
    ManifestEmpty,
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Signet(#[from] SignetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<crate::autodiff::TensorError> for TrainError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        Self::Signet(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Stops after this many iterations in total, even mid-epoch.
    pub max_iters: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 2e-4, batch: 4, max_iters: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_i")]
    pub l_i: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_Norm")]
    pub l_norm: f64,
    #[serde(rename = "L_TV")]
    pub l_tv: f64,
    #[serde(rename = "L_dssim")]
    pub l_dssim: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(iter: u64, r: &LossReport) -> Self {
        Self {
            iter,
            l_e: r.l_e,
            l_i: r.l_i,
            l_f: r.l_f,
            l_norm: r.l_norm,
            l_tv: r.l_tv,
            l_dssim: r.l_dssim,
            total: r.total,
        }
    }
}

/// A training sample with its priors and supervision already computed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub inputs: InputPlanes,
    pub image: Vec<f32>,
    pub reflectance: Vec<f32>,
    pub shading: Vec<f32>,
    pub edges: [Vec<f32>; 3],
    pub segments: SegmentMap,
}

impl PreparedSample {
    pub fn new(sample: &IntrinsicSample) -> Result<Self, TrainError> {
        let bundle = PriorBundle::compute(&sample.image, &sample.segments, Some(&sample.reflectance), DEFAULT_EPS)?;
        let inputs = make_inputs(&sample.image, &sample.segments, &bundle)?;
        let pyr = bundle.edge_pyramid.expect("ground truth reflectance was supplied");
        Ok(Self {
            image: inputs.image.clone(),
            reflectance: super::rgb_planes(&sample.reflectance),
            shading: sample.shading.data().to_vec(),
            edges: pyr.levels().map(|e| e.data().to_vec()),
            segments: sample.segments.clone(),
            inputs,
        })
    }

    pub fn size(&self) -> usize {
        self.inputs.size
    }
}

/// Batches prepared samples into network inputs and loss targets.
pub fn make_batch<S: Scalar>(items: &[&PreparedSample]) -> Result<(NetInputs<S>, Targets<S>), TrainError> {
    let inputs = NetInputs::batch(&items.iter().map(|p| &p.inputs).collect::<Vec<_>>())?;
    let size = items[0].size();
    let get = |f: fn(&PreparedSample) -> &[f32], c, s| stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>(), c, s);
    let targets = Targets {
        image: get(|p| &p.image, 3, size),
        reflectance: get(|p| &p.reflectance, 3, size),
        shading: get(|p| &p.shading, 1, size),
        edges: [get(|p| &p.edges[0], 1, size), get(|p| &p.edges[1], 1, size / 2), get(|p| &p.edges[2], 1, size / 4)],
        segments: items.iter().map(|p| p.segments.clone()).collect(),
    };
    Ok((inputs, targets))
}

/// Forward pass plus the weighted objective for one batch.
pub fn batch_loss<S: Scalar>(
    net: &SigNet<S>,
    inputs: &NetInputs<S>,
    targets: &Targets<S>,
    weights: &LossWeights,
    mode: BatchNormMode,
) -> Result<(crate::autodiff::Tensor<S>, LossReport), TrainError> {
    let out = net.forward(inputs, mode)?;
    let edges = out.edges.as_ref().map(|e| e.levels());
    let p = Predictions {
        edges,
        r_initial: &out.r_initial,
        s_initial: &out.s_initial,
        r_final: &out.r_final,
        s_final: &out.s_final,
    };
    Ok(total_loss(&p, targets, weights)?)
}

/// Loads and prepares the training split.
pub fn prepare_split(manifest: &Manifest, split: Split) -> Result<Vec<PreparedSample>, TrainError> {
    manifest.split(split).map(|e| PreparedSample::new(&manifest.load_sample(e)?)).collect()
}

/// Sample order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Iterations completed in total, including any resumed ones.
    pub iterations: u64,
    pub records: Vec<LogRecord>,
    pub checkpoint: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.into(), source }
}

/// Trains `net` in place, writing the loss log, the architecture report
/// and a checkpoint after every epoch into `out_dir`.
///
/// `start_iter` is the number of iterations already done (0 for a fresh
/// run, the checkpoint step when resuming); the log is appended to in that
/// case. The shuffle sequence depends only on the model seed and the epoch,
/// so a resumed run continues exactly where an uninterrupted one would.
pub fn train_loop(
    net: &mut SigNet<f32>,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    out_dir: &Path,
    start_iter: u64,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    weights.validate().map_err(TrainError::InvalidConfig)?;
    if samples.is_empty() {
        return Err(TrainError::ManifestEmpty);
    }
    let size = net.config().input_size;
    if let Some(s) = samples.iter().find(|s| s.size() != size) {
        return Err(
            SignetError::SizeMismatch(format!("sample is {0}x{0}, model expects {size}x{size}", s.size())).into()
        );
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let arch = out_dir.join(ARCHITECTURE);
    let report = serde_json::to_string_pretty(&net.report()).expect("report serializes") + "\n";
    std::fs::write(&arch, report).map_err(io_err(&arch))?;

    let log_path = out_dir.join(LOSS_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(start_iter > 0)
        .truncate(start_iter == 0)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let n = samples.len();
    let per_epoch = n.div_ceil(cfg.batch) as u64;
    let mut total = per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_iters {
        total = total.min(m);
    }
    let seed = net.config().seed;
    let adam = Adam::with_lr(cfg.lr);
    let ckpt_path = out_dir.join(CHECKPOINT);
    let meta = serde_json::json!({ "train": cfg, "loss": weights });
    let mut records = Vec::new();
    let mut order = Vec::new();

    for it in start_iter..total {
        let (epoch, pos) = (it / per_epoch, (it % per_epoch) as usize);
        if pos == 0 || order.is_empty() {
            order = epoch_order(n, seed, epoch);
        }
        let idx = &order[pos * cfg.batch..((pos + 1) * cfg.batch).min(n)];
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let (inputs, targets) = make_batch::<f32>(&batch)?;
        let (loss, report) = batch_loss(net, &inputs, &targets, weights, BatchNormMode::Train)?;
        if !report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter: it + 1 });
        }
        loss.backward()?;
        adam.step(&mut net.params_mut())?;

        let rec = LogRecord::new(it + 1, &report);
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        records.push(rec);

        let epoch_done = pos as u64 + 1 == per_epoch;
        if epoch_done || it + 1 == total {
            net.to_checkpoint(it + 1, meta.clone()).save(&ckpt_path)?;
        }
    }
    Ok(TrainSummary { iterations: total.max(start_iter), records, checkpoint: ckpt_path })
}
