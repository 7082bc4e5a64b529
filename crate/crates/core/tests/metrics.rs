use iidlab::autodiff::Tensor;
use iidlab::image::{GrayImage, ImageRGB};
use iidlab::losses::dssim_loss;
use iidlab::metrics::{
    dssim_metric, evaluate, lmse, si_mse, whdr, Darker, Judgment, JudgmentSet, MetricError, MetricReport, Predictor,
    WHDR_DELTA,
};
use iidlab::signet::{rgb_planes, Ablation, ModelConfig, SigNet};
use iidlab::synth::{generate_dataset, Split, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rgb(r: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> ImageRGB {
    ImageRGB::from_fn(h, w, |_, _| std::array::from_fn(|_| r.random_range(lo..hi)))
}

fn random_gray(r: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> GrayImage {
    GrayImage::from_fn(h, w, |_, _| r.random_range(lo..hi))
}

fn grid_min(p: &[f64], g: &[f64], lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let obj = |a: f64| p.iter().zip(g).map(|(x, y)| (a * x - y).powi(2)).sum::<f64>() / p.len() as f64;
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .map(|a| (a, obj(a)))
        .fold((0.0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

#[test]
fn si_mse_matches_alpha_grid_search() {
    let mut r = rng(1);
    for _ in 0..20 {
        let p = random_gray(&mut r, 4, 4, 0.2, 1.0);
        let g = random_gray(&mut r, 4, 4, 0.2, 1.0);
        let (pv, gv): (Vec<f64>, Vec<f64>) = p.data().iter().zip(g.data()).map(|(&a, &b)| (a as f64, b as f64)).unzip();
        // coarse 10^4-point sweep, then a 10^4-point sweep around its best cell
        let step = 10.0 / 9999.0;
        let (a0, _) = grid_min(&pv, &gv, 0.0, 10.0, 10_000);
        let (_, best) = grid_min(&pv, &gv, a0 - step, a0 + step, 10_000);
        let got = si_mse(&p, &g).unwrap();
        assert!((got - best).abs() <= 1e-8, "{got} vs {best}");
        assert!(got <= best + 1e-15);
    }
}

#[test]
fn lmse_ignores_global_rescaling() {
    let mut r = rng(2);
    for _ in 0..10 {
        let p = random_rgb(&mut r, 32, 32, 0.0, 1.0);
        let g = random_rgb(&mut r, 32, 32, 0.0, 1.0);
        let base = lmse(&p, &g, None).unwrap();
        for c in [0.1f32, 3.0, 17.0] {
            let scaled = lmse(&p.map(|v| c * v), &g, None).unwrap();
            assert!((scaled - base).abs() <= 1e-6 * base.max(1e-12), "{scaled} vs {base}");
        }
        assert_eq!(lmse(&g, &g, None).unwrap(), 0.0);
        assert!(lmse(&g.map(|v| 2.5 * v), &g, None).unwrap() < 1e-12);
    }
}

#[test]
fn dssim_metric_agrees_with_loss() {
    let mut r = rng(3);
    for i in 0..20 {
        let (h, w) = (11 + i % 7, 11 + (3 * i) % 9);
        let a = random_rgb(&mut r, h, w, 0.0, 1.0);
        let b = random_rgb(&mut r, h, w, 0.0, 1.0);
        let ta = Tensor::<f64>::new([1, 3, h, w], rgb_planes(&a).iter().map(|&v| v as f64).collect());
        let tb = Tensor::<f64>::new([1, 3, h, w], rgb_planes(&b).iter().map(|&v| v as f64).collect());
        let loss = dssim_loss(&ta, &tb).unwrap().item();
        let metric = dssim_metric(&a, &b).unwrap();
        assert!((loss - metric).abs() <= 1e-6, "{loss} vs {metric}");
        assert_eq!(dssim_metric(&a, &a).unwrap(), 0.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(dssim_metric(&a, &inv).unwrap() > 0.0);
        // negative local covariance can push SSIM below zero
        assert!((0.0..=1.0).contains(&metric));
    }
}

/// Straightforward re-evaluation used as the WHDR oracle.
fn whdr_brute(img: &ImageRGB, set: &JudgmentSet) -> f64 {
    let (h, w) = (img.height(), img.width());
    let lum = |y: usize, x: usize| {
        let p = img.get(y, x);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let patch = |x: usize, y: usize| {
        let mut vals = Vec::new();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    vals.push(lum(yy as usize, xx as usize));
                }
            }
        }
        let n = vals.len() as f64;
        vals.into_iter().sum::<f64>() / n
    };
    let mut wrong = 0.0;
    let mut total = 0.0;
    for j in &set.judgments {
        let (l1, l2) = (patch(j.x1, j.y1), patch(j.x2, j.y2));
        let rho = l1 / if l2 > 1e-6 { l2 } else { 1e-6 };
        let pred = if rho > 1.1 {
            "2"
        } else if rho < 1.0 / 1.1 {
            "1"
        } else {
            "E"
        };
        let label = match j.darker {
            Darker::First => "1",
            Darker::Second => "2",
            Darker::Equal => "E",
        };
        if pred != label {
            wrong += j.weight;
        }
        total += j.weight;
    }
    wrong / total
}

#[test]
fn whdr_matches_brute_force() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let img = random_rgb(&mut r, h, w, 0.0, 1.0);
        let n = r.random_range(1..30);
        let judgments = (0..n)
            .map(|_| Judgment {
                x1: r.random_range(0..w),
                y1: r.random_range(0..h),
                x2: r.random_range(0..w),
                y2: r.random_range(0..h),
                darker: [Darker::First, Darker::Second, Darker::Equal][r.random_range(0..3)],
                weight: r.random_range(0.01..2.0),
            })
            .collect();
        let set = JudgmentSet { judgments };
        assert_eq!(whdr(&img, &set, WHDR_DELTA).unwrap(), whdr_brute(&img, &set));
    }
}

fn small_dataset(count: usize) -> (tempfile::TempDir, iidlab::synth::Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { size: 32, ..Default::default() };
    let m = generate_dataset(&cfg, count, dir.path()).unwrap();
    (dir, m)
}

#[test]
fn ground_truth_bypass_scores_zero() {
    let (_dir, m) = small_dataset(20);
    let report = evaluate(&m, Split::Test, &Predictor::GroundTruth).unwrap();
    assert_eq!(report.images.len(), 2);
    for im in &report.images {
        let x = &im.metrics;
        for v in [x.mse_r, x.lmse_r, x.dssim_r, x.mse_s, x.lmse_s, x.dssim_s, x.plain_mse_r, x.plain_mse_s] {
            assert_eq!(v, 0.0);
        }
    }
    assert_eq!(report.aggregate, MetricReport { whdr: None, ..Default::default() });
}

#[test]
fn empty_split_is_an_error() {
    let (_dir, m) = small_dataset(5);
    // 5 samples leave nothing for validation
    assert!(matches!(evaluate(&m, Split::Val, &Predictor::GroundTruth), Err(MetricError::EmptySplit(Split::Val))));
}

#[test]
fn aggregate_is_the_mean_and_order_free() {
    let (_dir, mut m) = small_dataset(10);
    let net =
        SigNet::<f32>::build(ModelConfig { base_width: 4, input_size: 32, seed: 1 }, Ablation::default()).unwrap();
    let report = evaluate(&m, Split::Train, &Predictor::Model(&net)).unwrap();
    assert_eq!(report.arch_hash.as_deref(), Some(net.arch_hash().as_str()));
    let n = report.images.len() as f64;
    let mean_r: f64 = report.images.iter().map(|i| i.metrics.mse_r).sum::<f64>() / n;
    let mean_ds: f64 = report.images.iter().map(|i| i.metrics.dssim_s).sum::<f64>() / n;
    assert!((report.aggregate.mse_r - mean_r).abs() <= 1e-9);
    assert!((report.aggregate.dssim_s - mean_ds).abs() <= 1e-9);
    for im in &report.images {
        assert!(im.metrics.mse_r >= 0.0 && (0.0..=1.0).contains(&im.metrics.dssim_r));
    }

    m.samples.reverse();
    let rev = evaluate(&m, Split::Train, &Predictor::Model(&net)).unwrap();
    let a = &report.aggregate;
    let b = &rev.aggregate;
    for (x, y) in [(a.mse_r, b.mse_r), (a.lmse_r, b.lmse_r), (a.dssim_r, b.dssim_r), (a.mse_s, b.mse_s)] {
        assert!((x - y).abs() <= 1e-12);
    }
}
