use crate::autodiff::{
    batch_norm2d, conv2d, conv_output_size, deconv2d, deconv_output_size, BatchNormMode, Param, RunningStats, Scalar,
    Tensor, TensorError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

/// One row of the architecture report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Act {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Conv,
    Deconv,
}

struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// Convolution (or transposed convolution), optional batch norm, activation.
pub(crate) struct Block {
    kind: Kind,
    w: usize,
    b: Option<usize>,
    bn: Option<Bn>,
    stride: usize,
    pad: usize,
    act: Act,
}

/// Owns every parameter and batch-norm buffer of a network, in creation
/// order, and records the layer plan as it is built.
pub(crate) struct Store<S: Scalar> {
    pub params: Vec<Param<S>>,
    pub stats: Vec<(String, RefCell<RunningStats<S>>)>,
    pub layers: Vec<LayerInfo>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Store<S> {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), stats: Vec::new(), layers: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn param(&mut self, name: String, shape: [usize; 4], value: Vec<f64>) -> usize {
        self.params.push(Param::new(name, shape, value.into_iter().map(S::lit).collect()));
        self.params.len() - 1
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                std * z
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        name: &str,
        kind: Kind,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        size: usize,
        norm: bool,
        act: Act,
    ) -> (Block, usize) {
        let before: usize = self.params.iter().map(|p| p.numel()).sum();
        let (shape, fan_in, out_size) = match kind {
            Kind::Conv => ([cout, cin, k, k], cin * k * k, conv_output_size(size, k, stride, pad)),
            Kind::Deconv => {
                ([cin, cout, k, k], cin * k * k / (stride * stride), deconv_output_size(size, k, stride, pad))
            }
        };
        let out_size = out_size.unwrap_or_else(|| panic!("{name}: kernel {k} does not fit size {size}"));
        let init = self.normal(shape.iter().product(), (2.0 / fan_in.max(1) as f64).sqrt());
        let w = self.param(format!("{name}.w"), shape, init);
        // batch norm makes a conv bias redundant
        let (b, bn) = if norm {
            let gamma = self.param(format!("{name}.bn.gamma"), [1, cout, 1, 1], vec![1.0; cout]);
            let beta = self.param(format!("{name}.bn.beta"), [1, cout, 1, 1], vec![0.0; cout]);
            self.stats.push((format!("{name}.bn"), RefCell::new(RunningStats::new(cout))));
            (None, Some(Bn { gamma, beta, stats: self.stats.len() - 1 }))
        } else {
            (Some(self.param(format!("{name}.b"), [1, cout, 1, 1], vec![0.0; cout])), None)
        };
        let after: usize = self.params.iter().map(|p| p.numel()).sum();
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: match (kind, norm) {
                (Kind::Conv, true) => "conv+bn",
                (Kind::Conv, false) => "conv",
                (Kind::Deconv, true) => "deconv+bn",
                (Kind::Deconv, false) => "deconv",
            }
            .to_string()
                + if act == Act::Relu { "+relu" } else { "" },
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            input_size: size,
            output_size: out_size,
            params: after - before,
        });
        (Block { kind, w, b, bn, stride, pad, act }, out_size)
    }

    /// 3×3 (stride 1 or 2) convolution with batch norm and ReLU.
    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize, size: usize) -> (Block, usize) {
        self.block(name, Kind::Conv, cin, cout, 3, stride, 1, size, true, Act::Relu)
    }

    /// 4×4 stride-2 transposed convolution with batch norm and ReLU.
    pub fn deconv_bn(&mut self, name: &str, cin: usize, cout: usize, size: usize) -> (Block, usize) {
        self.block(name, Kind::Deconv, cin, cout, 4, 2, 1, size, true, Act::Relu)
    }

    /// Plain convolution with bias and no activation.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, size: usize) -> Block {
        self.block(name, Kind::Conv, cin, cout, k, 1, k / 2, size, false, Act::Linear).0
    }

    /// Plain convolution with bias followed by ReLU.
    pub fn conv_relu(&mut self, name: &str, cin: usize, cout: usize, k: usize, size: usize) -> Block {
        self.block(name, Kind::Conv, cin, cout, k, 1, k / 2, size, false, Act::Relu).0
    }

    pub fn forward(&self, block: &Block, x: &Tensor<S>, mode: BatchNormMode) -> Result<Tensor<S>, TensorError> {
        let w = self.params[block.w].tensor();
        let b = block.b.map(|i| self.params[i].tensor());
        let mut y = match block.kind {
            Kind::Conv => conv2d(x, w, b, block.stride, block.pad)?,
            Kind::Deconv => deconv2d(x, w, b, block.stride, block.pad)?,
        };
        if let Some(bn) = &block.bn {
            let mut stats = self.stats[bn.stats].1.borrow_mut();
            y = batch_norm2d(
                &y,
                self.params[bn.gamma].tensor(),
                self.params[bn.beta].tensor(),
                &mut stats,
                mode,
                BN_MOMENTUM,
                BN_EPS,
            )?;
        }
        Ok(match block.act {
            Act::Relu => y.relu(),
            Act::Linear => y,
        })
    }
}

/// Encoder of up to five stages. Stage one keeps the resolution; every
/// later stage halves it with a stride-2 convolution and then widens the
/// channels.
pub(crate) struct Encoder {
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn build<S: Scalar>(store: &mut Store<S>, name: &str, cin: usize, widths: &[usize], size: usize) -> Self {
        let mut blocks = Vec::with_capacity(10);
        let (b, mut s) = store.conv_bn(&format!("{name}.s1.a"), cin, widths[0], 1, size);
        blocks.push(b);
        let (b, s1) = store.conv_bn(&format!("{name}.s1.b"), widths[0], widths[0], 1, s);
        blocks.push(b);
        s = s1;
        for k in 1..widths.len() {
            let (b, s2) = store.conv_bn(&format!("{name}.s{}.a", k + 1), widths[k - 1], widths[k - 1], 2, s);
            blocks.push(b);
            let (b, s3) = store.conv_bn(&format!("{name}.s{}.b", k + 1), widths[k - 1], widths[k], 1, s2);
            blocks.push(b);
            s = s3;
        }
        Self { blocks }
    }

    /// Stage outputs from full resolution down to the bottleneck.
    pub fn forward<S: Scalar>(
        &self,
        store: &Store<S>,
        x: &Tensor<S>,
        mode: BatchNormMode,
    ) -> Result<Vec<Tensor<S>>, TensorError> {
        let mut feats = Vec::with_capacity(self.blocks.len() / 2);
        let mut h = x.clone();
        for pair in self.blocks.chunks(2) {
            h = store.forward(&pair[0], &h, mode)?;
            h = store.forward(&pair[1], &h, mode)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}
