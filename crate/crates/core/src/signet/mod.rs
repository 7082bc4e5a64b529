//! The decomposition network.
//!
//! Five encoders (image, semantic labels, cross colour ratios, reflectance
//! estimate, shading estimate) feed a reflectance-edge decoder, a pair of
//! jointly decoded initial reflectance/shading branches gated by edge
//! attention, and a final correction stage that re-encodes the initial
//! estimates together with the predicted edges.
//!
//! All channel counts scale with [`ModelConfig::base_width`]; the stage
//! ladder is `base_width · {1, 2, 4, 8, 8}`.

mod inputs;
mod layers;
pub mod train;

pub use inputs::{
    make_inputs, rgb_planes, stack, tensor_to_gray, tensor_to_rgb, InputPlanes, NetInputs, CCR_CHANNELS,
    SEMANTIC_CHANNELS, SEMANTIC_LABELS,
};
pub use layers::LayerInfo;

use crate::autodiff::{
    BatchNormMode, Checkpoint, CheckpointError, EntryKind, Param, RunningStats, Scalar, Tensor, TensorError,
};
use crate::image::{GrayImage, ImageRGB, SegmentMap};
use crate::priors::{PriorBundle, PriorError, DEFAULT_EPS};
use layers::{Block, Encoder, Store};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum SignetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input size mismatch: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written by a different architecture ({found}, this build is {expected})")]
    CheckpointMismatch { expected: String, found: String },
}

pub const BASE_WIDTHS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub input_size: usize,
    /// Seeds the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_width: 8, input_size: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), SignetError> {
        if !BASE_WIDTHS.contains(&self.base_width) {
            return Err(SignetError::InvalidConfig(format!(
                "base_width must be one of {BASE_WIDTHS:?}, got {}",
                self.base_width
            )));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(SignetError::InvalidConfig(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 8 * w]
    }
}

/// Structural variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Only the image encoder; no prior inputs.
    pub no_priors: bool,
    /// No edge decoder, no attention, no edge encoder in the final stage.
    pub no_edge_module: bool,
    /// Replace predicted edges with edges detected on the input image.
    pub image_edges: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<(), SignetError> {
        if self.no_edge_module && self.image_edges {
            return Err(SignetError::InvalidConfig("no_edge_module and image_edges cannot be combined".into()));
        }
        Ok(())
    }

    fn uses_edges(&self) -> bool {
        !self.no_edge_module
    }

    fn predicts_edges(&self) -> bool {
        !self.no_edge_module && !self.image_edges
    }
}

/// `x ⊙ sigmoid(gate)`.
pub fn attention<S: Scalar>(gate: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if gate.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch { op: "attention", lhs: gate.shape(), rhs: x.shape() });
    }
    x.mul(&gate.sigmoid())
}

#[derive(Clone, Debug)]
pub struct EdgeMaps<S: Scalar = f32> {
    pub full: Tensor<S>,
    pub half: Tensor<S>,
    pub quarter: Tensor<S>,
}

impl<S: Scalar> EdgeMaps<S> {
    pub fn levels(&self) -> [&Tensor<S>; 3] {
        [&self.full, &self.half, &self.quarter]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs<S: Scalar = f32> {
    /// Predicted reflectance edges; `None` for variants without an edge
    /// decoder.
    pub edges: Option<EdgeMaps<S>>,
    pub r_initial: Tensor<S>,
    pub s_initial: Tensor<S>,
    pub r_final: Tensor<S>,
    pub s_final: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureReport {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub global_encoders: Vec<String>,
    pub correction_encoders: Vec<String>,
    pub layers: Vec<LayerInfo>,
    pub total_params: usize,
    pub arch_hash: String,
}

struct Decoder {
    stages: Vec<Block>,
    head: Block,
}

struct PriorEncoders {
    semantic: Encoder,
    /// Colour ratios only feed the edge decoder.
    ccr: Option<Encoder>,
    r_est: Encoder,
    s_est: Encoder,
}

pub struct SigNet<S: Scalar = f32> {
    cfg: ModelConfig,
    ablation: Ablation,
    store: Store<S>,
    enc_image: Encoder,
    enc_priors: Option<PriorEncoders>,
    edge: Option<Decoder>,
    /// Projections of the image edge map onto each gated decoder level.
    edge_proj: Vec<Block>,
    /// Projection of the edge map onto the three reflectance logits.
    out_proj: Option<Block>,
    init_r: Decoder,
    init_s: Decoder,
    calib: (Block, Block),
    enc_r1: Encoder,
    enc_s1: Encoder,
    enc_re: Option<Encoder>,
    final_r: Decoder,
    final_s: Decoder,
}

/// Output channels of the decoder stages, deepest first.
fn decoder_widths(w: usize) -> [usize; 5] {
    [8 * w, 8 * w, 4 * w, 2 * w, w]
}

/// Builds a five-stage decoder: a transposed convolution from the
/// bottleneck, three more whose inputs gain `extra` previous-stage
/// channels plus `skip_mult` encoder skips, and a full-resolution conv.
#[allow(clippy::too_many_arguments)]
fn build_decoder<S: Scalar>(
    store: &mut Store<S>,
    name: &str,
    bottleneck: usize,
    extra: usize,
    skip_mult: usize,
    cfg: &ModelConfig,
    head_out: usize,
) -> Decoder {
    let enc = cfg.widths();
    let dec = decoder_widths(cfg.base_width);
    let mut size = cfg.input_size / 16;
    let mut stages = Vec::with_capacity(5);
    let (b, s) = store.deconv_bn(&format!("{name}.d1"), bottleneck, dec[0], size);
    stages.push(b);
    size = s;
    for k in 1..4 {
        let cin = dec[k - 1] * extra + skip_mult * enc[4 - k];
        let (b, s) = store.deconv_bn(&format!("{name}.d{}", k + 1), cin, dec[k], size);
        stages.push(b);
        size = s;
    }
    let cin = dec[3] * extra + skip_mult * enc[0];
    stages.push(store.conv_bn(&format!("{name}.conv"), cin, dec[4], 1, size).0);
    let head = store.conv(&format!("{name}.head"), dec[4], head_out, 3, size);
    Decoder { stages, head }
}

fn cat<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
    if xs.len() == 1 {
        return Ok(xs[0].clone());
    }
    Tensor::concat(xs)
}

impl<S: Scalar> SigNet<S> {
    pub fn build(cfg: ModelConfig, ablation: Ablation) -> Result<Self, SignetError> {
        cfg.validate()?;
        ablation.validate()?;
        let n = cfg.input_size;
        let w = cfg.base_width;
        let enc = cfg.widths();
        let dec = decoder_widths(w);
        let mut store = Store::new(cfg.seed);

        let enc_image = Encoder::build(&mut store, "enc_image", 3, &enc, n);
        let enc_priors = (!ablation.no_priors).then(|| PriorEncoders {
            semantic: Encoder::build(&mut store, "enc_semantic", SEMANTIC_CHANNELS, &enc, n),
            ccr: ablation.predicts_edges().then(|| Encoder::build(&mut store, "enc_ccr", CCR_CHANNELS, &enc, n)),
            r_est: Encoder::build(&mut store, "enc_r_est", 3, &enc, n),
            s_est: Encoder::build(&mut store, "enc_s_est", 1, &enc, n),
        });
        let sources = |k: usize| if ablation.no_priors { 1 } else { k };

        let edge = ablation
            .predicts_edges()
            .then(|| build_decoder(&mut store, "edge", enc[4] * sources(3), 1, sources(3), &cfg, 1));
        let mut edge_proj = Vec::new();
        if ablation.image_edges {
            let sizes = [n / 8, n / 4, n / 2, n];
            for k in 0..4 {
                edge_proj.push(store.conv(&format!("gate.proj{}", k + 1), 1, dec[k], 1, sizes[k]));
            }
        }
        let out_proj = ablation.uses_edges().then(|| store.conv("gate.proj_out", 1, 3, 1, n));

        let init_r = build_decoder(&mut store, "init_r", enc[4] * sources(3), 2, sources(3), &cfg, 3);
        let init_s = build_decoder(&mut store, "init_s", enc[4] * sources(2), 2, sources(2), &cfg, 1);

        let cal_ch = if ablation.uses_edges() { 6 } else { 3 };
        let calib = (store.conv_relu("calib.a", cal_ch, 16, 1, n), store.conv("calib.b", 16, cal_ch, 1, n));
        let enc_r1 = Encoder::build(&mut store, "enc_r1", cal_ch, &enc, n);
        let enc_s1 = Encoder::build(&mut store, "enc_s1", 1, &enc, n);
        let enc_re = ablation.uses_edges().then(|| Encoder::build(&mut store, "enc_re", 1, &enc[..4], n));
        let skips = if ablation.uses_edges() { 2 } else { 1 };
        let final_r = build_decoder(&mut store, "final_r", enc[4], 2, skips, &cfg, 3);
        let final_s = build_decoder(&mut store, "final_s", enc[4], 2, skips, &cfg, 1);

        Ok(Self {
            cfg,
            ablation,
            store,
            enc_image,
            enc_priors,
            edge,
            edge_proj,
            out_proj,
            init_r,
            init_s,
            calib,
            enc_r1,
            enc_s1,
            enc_re,
            final_r,
            final_s,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.store.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.store.params.iter_mut().collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.params.iter().map(|p| p.numel()).sum()
    }

    /// Batch-norm running statistics by layer name.
    pub fn running_stats(&self) -> Vec<(String, RunningStats<S>)> {
        self.store.stats.iter().map(|(n, s)| (n.clone(), s.borrow().clone())).collect()
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.store.layers
    }

    /// Hash of everything that determines parameter layout.
    pub fn arch_hash(&self) -> String {
        let shapes: Vec<(&str, [usize; 4])> = self.store.params.iter().map(|p| (p.name(), p.shape())).collect();
        let doc = serde_json::json!({
            "base_width": self.cfg.base_width,
            "input_size": self.cfg.input_size,
            "ablation": self.ablation,
            "params": shapes,
        });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn report(&self) -> ArchitectureReport {
        let mut global = vec!["image".to_string()];
        if let Some(p) = &self.enc_priors {
            global.push("semantic".into());
            if p.ccr.is_some() {
                global.push("ccr".into());
            }
            global.extend(["r_est".into(), "s_est".into()]);
        }
        let mut correction = vec!["r_initial".to_string(), "s_initial".to_string()];
        if self.enc_re.is_some() {
            correction.push("edge".into());
        }
        ArchitectureReport {
            model: self.cfg,
            ablation: self.ablation,
            global_encoders: global,
            correction_encoders: correction,
            layers: self.store.layers.clone(),
            total_params: self.num_params(),
            arch_hash: self.arch_hash(),
        }
    }

    fn run(&self, b: &Block, x: &Tensor<S>, mode: BatchNormMode) -> Result<Tensor<S>, TensorError> {
        self.store.forward(b, x, mode)
    }

    pub fn forward(&self, x: &NetInputs<S>, mode: BatchNormMode) -> Result<ForwardOutputs<S>, SignetError> {
        let size = self.cfg.input_size;
        let [_, _, h, w] = x.image.shape();
        if h != size || w != size {
            return Err(SignetError::SizeMismatch(format!("input is {h}x{w}, model expects {size}x{size}")));
        }
        let fi = self.enc_image.forward(&self.store, &x.image, mode)?;
        let priors = match &self.enc_priors {
            Some(p) => Some((
                p.semantic.forward(&self.store, &x.semantic, mode)?,
                p.ccr.as_ref().map(|e| e.forward(&self.store, &x.ccr, mode)).transpose()?,
                p.r_est.forward(&self.store, &x.r_est, mode)?,
                p.s_est.forward(&self.store, &x.s_est, mode)?,
            )),
            None => None,
        };
        // per-level feature lists: edge decoder, initial reflectance, initial shading
        let level = |l: usize, which: &str| -> Vec<&Tensor<S>> {
            let mut v = vec![&fi[l]];
            if let Some((fs, fg, fr, fse)) = &priors {
                match which {
                    "edge" => v.extend([&fr[l], &fg.as_ref().expect("edge decoder has colour ratios")[l]]),
                    "r" => v.extend([&fr[l], &fs[l]]),
                    _ => v.push(&fse[l]),
                }
            }
            v
        };
        let bottleneck = |which: &str| -> Result<Tensor<S>, TensorError> {
            let mut v = vec![&fi[4]];
            if let Some((fs, fg, fr, fse)) = &priors {
                match which {
                    "edge" => v.extend([&fs[4], &fg.as_ref().expect("edge decoder has colour ratios")[4]]),
                    "r" => v.extend([&fr[4], &fs[4]]),
                    _ => v.push(&fse[4]),
                }
            }
            cat(&v)
        };

        // reflectance edges and the attention gates derived from them
        let mut edges = None;
        let mut gates: Vec<Tensor<S>> = Vec::new();
        let mut edge_map = None;
        if let Some(dec) = &self.edge {
            let mut hcur = self.run(&dec.stages[0], &bottleneck("edge")?, mode)?;
            gates.push(hcur.clone());
            for k in 1..5 {
                let mut v = vec![&hcur];
                v.extend(level(4 - k, "edge"));
                hcur = self.run(&dec.stages[k], &cat(&v)?, mode)?;
                if k < 4 {
                    gates.push(hcur.clone());
                }
            }
            let half = hcur.downsample2x()?;
            let quarter = half.downsample2x()?;
            let maps = EdgeMaps {
                full: self.run(&dec.head, &hcur, mode)?.sigmoid(),
                half: self.run(&dec.head, &half, mode)?.sigmoid(),
                quarter: self.run(&dec.head, &quarter, mode)?.sigmoid(),
            };
            edge_map = Some(maps.full.clone());
            edges = Some(maps);
        } else if self.ablation.image_edges {
            let e = x.image_edges.clone();
            let mut pyramid = vec![e.clone()];
            for _ in 0..3 {
                let next = pyramid.last().expect("non-empty").downsample2x()?;
                pyramid.push(next);
            }
            // pyramid: N, N/2, N/4, N/8; gates run N/8, N/4, N/2, N
            for (k, proj) in self.edge_proj.iter().enumerate() {
                gates.push(self.run(proj, &pyramid[3 - k], mode)?);
            }
            edge_map = Some(e);
        }
        let gate = |k: usize, t: Tensor<S>| -> Result<Tensor<S>, TensorError> {
            match gates.get(k) {
                Some(g) => attention(g, &t),
                None => Ok(t),
            }
        };

        // initial estimates, decoded jointly
        let mut r = gate(0, self.run(&self.init_r.stages[0], &bottleneck("r")?, mode)?)?;
        let mut s = gate(0, self.run(&self.init_s.stages[0], &bottleneck("s")?, mode)?)?;
        for k in 1..5 {
            let mut vr = vec![&r, &s];
            vr.extend(level(4 - k, "r"));
            let mut vs = vec![&s, &r];
            vs.extend(level(4 - k, "s"));
            let rn = self.run(&self.init_r.stages[k], &cat(&vr)?, mode)?;
            let sn = self.run(&self.init_s.stages[k], &cat(&vs)?, mode)?;
            (r, s) = if k < 4 { (gate(k, rn)?, gate(k, sn)?) } else { (rn, sn) };
        }
        let mut r_logits = self.run(&self.init_r.head, &r, mode)?;
        let mut s_logits = self.run(&self.init_s.head, &s, mode)?;
        if let (Some(e), Some(proj)) = (&edge_map, &self.out_proj) {
            r_logits = attention(&self.run(proj, e, mode)?, &r_logits)?;
            s_logits = attention(e, &s_logits)?;
        }
        let r_initial = r_logits.sigmoid();
        let s_initial = s_logits.relu();

        // final correction
        let cal_in = match &edge_map {
            Some(e) => Tensor::concat(&[e, e, e, &r_initial])?,
            None => r_initial.clone(),
        };
        let calibrated = self.run(&self.calib.1, &self.run(&self.calib.0, &cal_in, mode)?, mode)?;
        let fr1 = self.enc_r1.forward(&self.store, &calibrated, mode)?;
        let fs1 = self.enc_s1.forward(&self.store, &s_initial, mode)?;
        let fre = match (&self.enc_re, &edge_map) {
            (Some(enc), Some(e)) => Some(enc.forward(&self.store, e, mode)?),
            _ => None,
        };
        let mut r = self.run(&self.final_r.stages[0], &fr1[4], mode)?;
        let mut s = self.run(&self.final_s.stages[0], &fs1[4], mode)?;
        for k in 1..5 {
            let l = 4 - k;
            let gated = match &fre {
                Some(fre) => Some(attention(&fre[l], &fr1[l])?),
                None => None,
            };
            let mut vr = vec![&r, &s, &fr1[l]];
            let mut vs = vec![&s, &r, &fs1[l]];
            if let Some(g) = &gated {
                vr.push(g);
                vs.push(g);
            }
            let rn = self.run(&self.final_r.stages[k], &cat(&vr)?, mode)?;
            let sn = self.run(&self.final_s.stages[k], &cat(&vs)?, mode)?;
            (r, s) = (rn, sn);
        }
        let r_final = self.run(&self.final_r.head, &r, mode)?.sigmoid();
        let s_final = self.run(&self.final_s.head, &s, mode)?.relu();

        Ok(ForwardOutputs { edges, r_initial, s_initial, r_final, s_final })
    }

    fn meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "model": self.cfg,
            "ablation": self.ablation,
            "arch_hash": self.arch_hash(),
            "extra": extra,
        })
    }

    /// Parameters, Adam moments and batch-norm buffers.
    pub fn to_checkpoint(&self, step: u64, extra: serde_json::Value) -> Checkpoint {
        let f = |v: &[S]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        let mut c = Checkpoint::new(self.meta(extra), step);
        for p in &self.store.params {
            let shape = p.shape().to_vec();
            c.push(p.name(), EntryKind::Param, &shape, f(&p.tensor().value()));
            c.push(p.name(), EntryKind::AdamM, &shape, f(p.first_moment()));
            c.push(p.name(), EntryKind::AdamV, &shape, f(p.second_moment()));
        }
        for (name, stats) in &self.store.stats {
            let s = stats.borrow();
            c.push(&format!("{name}.running_mean"), EntryKind::Buffer, &[s.mean.len()], f(&s.mean));
            c.push(&format!("{name}.running_var"), EntryKind::Buffer, &[s.var.len()], f(&s.var));
        }
        c
    }

    /// Rebuilds the network a checkpoint was written from and restores its
    /// state, including optimizer moments.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, SignetError> {
        let bad = |what: &str| SignetError::InvalidConfig(format!("checkpoint header lacks a valid {what}"));
        let meta = &c.header.meta;
        let cfg: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|_| bad("model config"))?;
        let ablation: Ablation = serde_json::from_value(meta["ablation"].clone()).map_err(|_| bad("ablation"))?;
        let mut net = Self::build(cfg, ablation)?;
        net.load_checkpoint(c)?;
        Ok(net)
    }

    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<(), SignetError> {
        let expected = self.arch_hash();
        let found = c.header.meta["arch_hash"].as_str().unwrap_or("<missing>").to_string();
        if found != expected {
            return Err(SignetError::CheckpointMismatch { expected, found });
        }
        let conv = |v: &[f32]| v.iter().map(|x| S::lit(*x as f64)).collect::<Vec<S>>();
        for p in &mut self.store.params {
            let value = conv(c.get(p.name(), EntryKind::Param)?);
            let m = conv(c.get(p.name(), EntryKind::AdamM)?);
            let v = conv(c.get(p.name(), EntryKind::AdamV)?);
            p.set_value(&value);
            p.set_state(m, v, c.header.step);
        }
        for (name, stats) in &self.store.stats {
            let mut s = stats.borrow_mut();
            s.mean = conv(c.get(&format!("{name}.running_mean"), EntryKind::Buffer)?);
            s.var = conv(c.get(&format!("{name}.running_var"), EntryKind::Buffer)?);
        }
        Ok(())
    }

    /// Eval-mode decomposition of a single image into final reflectance and
    /// shading. Priors are computed on the fly.
    pub fn decompose(&self, image: &ImageRGB, seg: &SegmentMap) -> Result<(ImageRGB, GrayImage), SignetError> {
        let bundle = PriorBundle::compute(image, seg, None, DEFAULT_EPS)?;
        let planes = make_inputs(image, seg, &bundle)?;
        let out = crate::autodiff::no_grad(|| self.forward(&NetInputs::batch(&[&planes])?, BatchNormMode::Eval))?;
        Ok((tensor_to_rgb(&out.r_final, 0), tensor_to_gray(&out.s_final, 0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_examples() {
        let x = Tensor::<f64>::new([1, 1, 1, 3], vec![0.5, -2.0, 3.0]);
        let open = attention(&Tensor::full([1, 1, 1, 3], 30.0), &x).unwrap();
        for (a, b) in open.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
        let half = attention(&Tensor::zeros([1, 1, 1, 3]), &x).unwrap();
        assert_eq!(half.to_vec(), vec![0.25, -1.0, 1.5]);
        assert!(attention(&Tensor::zeros([1, 2, 1, 3]), &x).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { base_width: 6, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { input_size: 40, ..Default::default() }.validate().is_err());
        assert!(Ablation { no_edge_module: true, image_edges: true, ..Default::default() }.validate().is_err());
    }
}
