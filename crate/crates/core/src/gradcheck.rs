//! Central finite-difference checks of every differentiable operation.
//!
//! Each check projects the operation's output onto a fixed random
//! direction, backpropagates that scalar once and compares every input
//! coordinate (or a random sample of them) with
//! `(L(x + h) − L(x − h)) / 2h` in `f64`. The relative error of one
//! coordinate is `|a − n| / max(|a|, |n|, floor)`.

use crate::autodiff::{batch_norm2d, conv2d, deconv2d, no_grad, BatchNormMode, RunningStats, Tensor, TensorError};
use crate::image::{SegmentClass, SegmentMap};
use crate::losses::{
    chromaticity, dssim_loss, edge_loss, final_loss, initial_loss, norm_invariance_loss, tv_loss, LossWeights,
};
use crate::signet::train::{batch_loss, make_batch, PreparedSample};
use crate::signet::{attention, Ablation, ModelConfig, SigNet};
use crate::synth::{sample_scene, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords: Option<usize>,
    /// Skip coordinates whose one-sided slopes disagree by more than `tol`
    /// (a ReLU hinge lies within `h`). At most a quarter may be skipped.
    pub skip_kinks: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: None, skip_kinks: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub case: String,
    pub coords: usize,
    /// Coordinates skipped as kink crossings.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients of `f` with respect to every
/// leaf in `inputs`. `f` must read the leaves' current values on each call.
pub fn check<F>(
    op: &str,
    case: String,
    inputs: &[&Tensor<f64>],
    f: F,
    cfg: &CheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult, TensorError>
where
    F: Fn() -> Result<Tensor<f64>, TensorError>,
{
    for x in inputs {
        x.zero_grad();
    }
    let out = f()?;
    let dir: Vec<f64> = (0..out.numel()).map(|_| rng.sample(StandardNormal)).collect();
    out.dot_const(&dir)?.backward()?;
    let project = || -> Result<f64, TensorError> { no_grad(|| Ok(f()?.dot_const(&dir)?.item())) };
    let center = if cfg.skip_kinks { project()? } else { 0.0 };

    let (mut worst, mut coords, mut skipped) = (0.0f64, 0, 0);
    for x in inputs {
        let n = x.numel();
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; n]);
        let idx: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = x.value()[i];
            x.update_value(|v| v[i] = orig + cfg.h);
            let plus = project()?;
            x.update_value(|v| v[i] = orig - cfg.h);
            let minus = project()?;
            x.update_value(|v| v[i] = orig);
            let numeric = (plus - minus) / (2.0 * cfg.h);
            if cfg.skip_kinks {
                let (fwd, bwd) = ((plus - center) / cfg.h, (center - minus) / cfg.h);
                if (fwd - bwd).abs() > cfg.tol * fwd.abs().max(bwd.abs()).max(cfg.floor) {
                    skipped += 1;
                    continue;
                }
            }
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(err);
            coords += 1;
        }
        x.zero_grad();
    }
    let passed = worst <= cfg.tol && skipped * 4 <= coords + skipped;
    Ok(CheckResult { op: op.into(), case, coords, skipped, max_rel_err: worst, tol: cfg.tol, passed })
}

fn leaf(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::leaf(shape, (0..shape.iter().product()).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero so ReLU kinks stay out of reach of `h`.
fn leaf_off_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::leaf(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn random_segments(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<SegmentMap> {
    (0..n)
        .map(|_| {
            // vertical bands so each segment spans several pixels
            let a = rng.random_range(1..w - 1);
            let b = rng.random_range(a + 1..w);
            let labels = (0..h * w).map(|i| (i % w >= a) as u32 + (i % w >= b) as u32).collect();
            SegmentMap::new(h, w, labels, vec![SegmentClass::Wall, SegmentClass::Other, SegmentClass::Ceiling])
                .expect("valid segment map")
        })
        .collect()
}

/// Shapes drawn per operation.
pub const CASES_PER_OP: usize = 5;

type Suite = Vec<CheckResult>;

fn run(
    out: &mut Suite,
    op: &str,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<CheckResult, TensorError>,
) -> Result<(), TensorError> {
    for _ in 0..CASES_PER_OP {
        let mut r = case(rng)?;
        r.op = op.into();
        out.push(r);
    }
    Ok(())
}

/// Checks of the autodiff kernel's operations.
pub fn autodiff_suite(seed: u64, cfg: &CheckConfig) -> Result<Suite, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let c = *cfg;

    run(&mut out, "conv2d", &mut rng, |r| {
        let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (k, s) = (r.random_range(1..4), r.random_range(1..3));
        let p = r.random_range(0..=k / 2);
        let (h, w) = (r.random_range(k.max(3)..8), r.random_range(k.max(3)..8));
        let x = leaf(r, [n, ci, h, w], -1.0, 1.0);
        let wt = leaf(r, [co, ci, k, k], -1.0, 1.0);
        let b = leaf(r, [1, co, 1, 1], -1.0, 1.0);
        let case = format!("x {n}x{ci}x{h}x{w}, k{k} s{s} p{p}, cout {co}");
        check("", case, &[&x, &wt, &b], || conv2d(&x, &wt, Some(&b), s, p), &c, r)
    })?;

    run(&mut out, "deconv2d", &mut rng, |r| {
        let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (k, s) = (r.random_range(2..5), r.random_range(1..3));
        let p = r.random_range(0..k / 2 + 1).min(k - 1);
        let (h, w) = (r.random_range(2..6), r.random_range(2..6));
        let x = leaf(r, [n, ci, h, w], -1.0, 1.0);
        let wt = leaf(r, [ci, co, k, k], -1.0, 1.0);
        let b = leaf(r, [1, co, 1, 1], -1.0, 1.0);
        let case = format!("x {n}x{ci}x{h}x{w}, k{k} s{s} p{p}, cout {co}");
        check("", case, &[&x, &wt, &b], || deconv2d(&x, &wt, Some(&b), s, p), &c, r)
    })?;

    run(&mut out, "batchnorm2d", &mut rng, |r| {
        let (n, ch) = (r.random_range(2..4), r.random_range(1..4));
        let (h, w) = (r.random_range(1..5), r.random_range(2..5));
        let x = leaf(r, [n, ch, h, w], -2.0, 2.0);
        let g = leaf(r, [1, ch, 1, 1], 0.5, 1.5);
        let b = leaf(r, [1, ch, 1, 1], -0.5, 0.5);
        let case = format!("x {n}x{ch}x{h}x{w}, train mode");
        check(
            "",
            case,
            &[&x, &g, &b],
            || {
                let mut stats = RunningStats::new(ch);
                batch_norm2d(&x, &g, &b, &mut stats, BatchNormMode::Train, 0.1, 1e-5)
            },
            &c,
            r,
        )
    })?;

    let shape4 =
        |r: &mut ChaCha8Rng| [r.random_range(1..3), r.random_range(1..4), r.random_range(1..6), r.random_range(1..6)];
    let name = |s: [usize; 4]| format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3]);

    run(&mut out, "relu", &mut rng, |r| {
        let s = shape4(r);
        let x = leaf_off_zero(r, s);
        check("", name(s), &[&x], || Ok(x.relu()), &c, r)
    })?;
    run(&mut out, "sigmoid", &mut rng, |r| {
        let s = shape4(r);
        let x = leaf(r, s, -4.0, 4.0);
        check("", name(s), &[&x], || Ok(x.sigmoid()), &c, r)
    })?;
    run(&mut out, "mul", &mut rng, |r| {
        let s = shape4(r);
        let (a, b) = (leaf(r, s, -1.0, 1.0), leaf(r, s, -1.0, 1.0));
        check("", name(s), &[&a, &b], || a.mul(&b), &c, r)
    })?;
    run(&mut out, "add", &mut rng, |r| {
        let s = shape4(r);
        let (a, b) = (leaf(r, s, -1.0, 1.0), leaf(r, s, -1.0, 1.0));
        check("", name(s), &[&a, &b], || a.add(&b), &c, r)
    })?;
    run(&mut out, "concat", &mut rng, |r| {
        let s = shape4(r);
        let parts: Vec<Tensor<f64>> = (0..r.random_range(2..4))
            .map(|_| {
                let ch = r.random_range(1..4);
                leaf(r, [s[0], ch, s[2], s[3]], -1.0, 1.0)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let case =
            format!("{} parts, {}", parts.len(), parts.iter().map(|p| name(p.shape())).collect::<Vec<_>>().join(" + "));
        check("", case, &refs, || Tensor::concat(&refs), &c, r)
    })?;
    run(&mut out, "downsample2x", &mut rng, |r| {
        let s = [r.random_range(1..3), r.random_range(1..4), 2 * r.random_range(1..4), 2 * r.random_range(1..4)];
        let x = leaf(r, s, -1.0, 1.0);
        check("", name(s), &[&x], || x.downsample2x(), &c, r)
    })?;
    run(&mut out, "mse", &mut rng, |r| {
        let s = shape4(r);
        let (a, b) = (leaf(r, s, -1.0, 1.0), leaf(r, s, -1.0, 1.0));
        check("", name(s), &[&a, &b], || a.mse(&b), &c, r)
    })?;
    run(&mut out, "attention", &mut rng, |r| {
        let s = shape4(r);
        let (g, x) = (leaf(r, s, -3.0, 3.0), leaf(r, s, -1.0, 1.0));
        check("", name(s), &[&g, &x], || attention(&g, &x), &c, r)
    })?;
    Ok(out)
}

/// Checks of every loss term, including DSSIM.
pub fn losses_suite(seed: u64, cfg: &CheckConfig) -> Result<Suite, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let c = *cfg;
    let name = |s: [usize; 4]| format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3]);

    run(&mut out, "dssim_loss", &mut rng, |r| {
        let s = [1, r.random_range(1..3), r.random_range(11..15), r.random_range(11..15)];
        let (x, y) = (leaf(r, s, 0.0, 1.0), leaf(r, s, 0.0, 1.0));
        check("", name(s), &[&x, &y], || dssim_loss(&x, &y), &c, r)
    })?;
    run(&mut out, "edge_loss", &mut rng, |r| {
        let n = r.random_range(1..3);
        let h = 4 * r.random_range(1..3);
        let shapes = [[n, 1, h, h], [n, 1, h / 2, h / 2], [n, 1, h / 4, h / 4]];
        let p: Vec<Tensor<f64>> = shapes.iter().map(|&s| leaf(r, s, 0.0, 1.0)).collect();
        let t: Vec<Tensor<f64>> = shapes.iter().map(|&s| leaf(r, s, 0.0, 1.0)).collect();
        let (pr, tr): (Vec<_>, Vec<_>) = (p.iter().collect(), t.iter().collect());
        check("", format!("pyramid from {}", name(shapes[0])), &pr, || edge_loss(&pr, &tr), &c, r)
    })?;
    run(&mut out, "initial_loss", &mut rng, |r| {
        let [n, h, w] = [r.random_range(1..3), r.random_range(2..6), r.random_range(2..6)];
        let (ri, si) = (leaf(r, [n, 3, h, w], 0.0, 1.0), leaf(r, [n, 1, h, w], 0.0, 2.0));
        let (rg, sg) = (leaf(r, [n, 3, h, w], 0.0, 1.0), leaf(r, [n, 1, h, w], 0.0, 2.0));
        check("", name([n, 3, h, w]), &[&ri, &si], || initial_loss(&ri, &si, &rg, &sg), &c, r)
    })?;
    run(&mut out, "final_loss", &mut rng, |r| {
        let [n, h, w] = [r.random_range(1..3), r.random_range(2..6), r.random_range(2..6)];
        let (rf, sf) = (leaf(r, [n, 3, h, w], 0.0, 1.0), leaf(r, [n, 1, h, w], 0.0, 2.0));
        let (rg, sg) = (leaf(r, [n, 3, h, w], 0.0, 1.0), leaf(r, [n, 1, h, w], 0.0, 2.0));
        let img = leaf(r, [n, 3, h, w], 0.0, 1.0);
        check("", name([n, 3, h, w]), &[&rf, &sf], || final_loss(&rf, &sf, &rg, &sg, &img), &c, r)
    })?;
    run(&mut out, "chromaticity", &mut rng, |r| {
        let s = [r.random_range(1..3), 3, r.random_range(1..5), r.random_range(1..5)];
        let x = leaf(r, s, 0.05, 1.0);
        check("", name(s), &[&x], || chromaticity(&x, 1e-4), &c, r)
    })?;
    run(&mut out, "norm_invariance_loss", &mut rng, |r| {
        let [n, h, w] = [r.random_range(1..3), r.random_range(2..6), r.random_range(3..7)];
        let rf = leaf(r, [n, 3, h, w], 0.05, 1.0);
        let img = leaf(r, [n, 3, h, w], 0.05, 1.0);
        let segs = random_segments(r, n, h, w);
        check("", name([n, 3, h, w]), &[&rf], || norm_invariance_loss(&rf, &img, &segs, 1e-4), &c, r)
    })?;
    run(&mut out, "tv_loss", &mut rng, |r| {
        let [n, h, w] = [r.random_range(1..3), r.random_range(2..6), r.random_range(3..7)];
        let rf = leaf(r, [n, 3, h, w], 0.0, 1.0);
        let rg = leaf(r, [n, 3, h, w], 0.0, 1.0);
        let segs = random_segments(r, n, h, w);
        check("", name([n, 3, h, w]), &[&rf], || tv_loss(&rf, &rg, &segs), &c, r)
    })?;
    Ok(out)
}

/// Gradient of the full weighted objective with respect to the weights of
/// a small network, on a sample of coordinates.
///
/// A whole network has thousands of ReLU hinges and a finite step crosses
/// some of them, so kink crossings are skipped and gradients below `floor`
/// are compared absolutely.
pub fn network_check(seed: u64, coords: usize, h: f64, floor: f64, tol: f64) -> Result<CheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = SynthConfig { size: 32, seed, ..Default::default() };
    let samples: Vec<PreparedSample> =
        (0..2).map(|i| PreparedSample::new(&sample_scene(&synth, i).expect("valid scene")).expect("priors")).collect();
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let (inputs, targets) = make_batch::<f64>(&refs).expect("batch");
    let mut net = SigNet::<f64>::build(ModelConfig { base_width: 4, input_size: 32, seed }, Ablation::default())
        .expect("valid model");
    // zero-initialized offsets put whole feature maps exactly on a ReLU
    // hinge; move them to a generic point
    for p in net.params_mut() {
        if p.name().ends_with(".b") || p.name().ends_with(".bn.beta") {
            let v: Vec<f64> = (0..p.numel()).map(|_| rng.random_range(-0.1..0.1)).collect();
            p.set_value(&v);
        }
    }
    let weights = LossWeights::default();
    let params: Vec<&Tensor<f64>> = net.params().iter().map(|p| p.tensor()).collect();
    // spread the sampled coordinates over parameter blocks
    let per = coords.div_ceil(params.len()).max(1);
    let cfg = CheckConfig { h, tol, floor, max_coords: Some(per), skip_kinks: true };
    let chosen: Vec<&Tensor<f64>> = {
        let mut idx: Vec<usize> = (0..params.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx.truncate(coords.min(params.len()));
        idx.sort();
        idx.into_iter().map(|i| params[i]).collect()
    };
    let f = || {
        batch_loss(&net, &inputs, &targets, &weights, BatchNormMode::Train)
            .map(|(t, _)| t)
            .map_err(|e| TensorError::InvalidArgument { op: "total_loss", detail: e.to_string() })
    };
    let case = format!("width 4, 32x32, batch 2, {} parameter blocks", chosen.len());
    check("total_loss", case, &chosen, f, &cfg, &mut rng)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Every check the command-line `gradcheck` runs.
pub fn full_suite(seed: u64) -> Result<SuiteReport, TensorError> {
    let start = Instant::now();
    let cfg = CheckConfig::default();
    let mut results = autodiff_suite(seed, &cfg)?;
    results.extend(losses_suite(seed.wrapping_add(1), &cfg)?);
    results.push(network_check(seed, 40, 1e-6, 1e-4, 1e-3)?);
    Ok(SuiteReport { results, seconds: start.elapsed().as_secs_f64() })
}
