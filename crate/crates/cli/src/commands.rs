use crate::config::RunConfig;
use crate::error::CliError;
use crate::{AblationFlags, EvalArgs};
use iidlab::autodiff::Checkpoint;
use iidlab::gradcheck::{full_suite, SuiteReport};
use iidlab::image::{load_pfm, load_png, load_segments, save_pfm, save_png, ImageRGB, Pfm, SegmentClass, SegmentMap};
use iidlab::metrics::{evaluate, whdr, JudgmentSet, Predictor, WHDR_DELTA};
use iidlab::priors::{PriorBundle, DEFAULT_EPS};
use iidlab::signet::train::{prepare_split, train_loop, CHECKPOINT};
use iidlab::signet::{Ablation, SigNet};
use iidlab::synth::{generate_dataset, Manifest, Split, MANIFEST_NAME};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Name of the resolved configuration written next to training outputs.
pub const RESOLVED_CONFIG: &str = "config.json";

/// File suffixes of the prior maps, in the order they are written.
pub const PRIOR_MAPS: [&str; 7] = ["ccr_strength", "r_est", "s_est", "nrgb", "edge_256", "edge_128", "edge_64"];

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::internal("IO", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::internal("IO", format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::internal("IO", format!("{}: {e}", dir.display())))
}

fn manifest_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.paths.data_dir.join(MANIFEST_NAME))
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.is_file() {
        return Err(CliError::input("MANIFEST", format!("manifest not found: {}", path.display())));
    }
    Ok(Manifest::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::input("CHECKPOINT", format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::input("CHECKPOINT", e.to_string()))
}

fn load_model(path: &Path) -> Result<SigNet, CliError> {
    Ok(SigNet::from_checkpoint(&load_checkpoint(path)?)?)
}

/// Colour raster from PNG, or from PFM when the extension says so.
fn load_rgb(path: &Path) -> Result<ImageRGB, CliError> {
    let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if !is_pfm {
        return Ok(load_png(path)?);
    }
    load_pfm(path)?
        .into_rgb()
        .ok_or_else(|| CliError::input("IMAGE", format!("{} is a gray PFM, expected colour", path.display())))
}

fn segments_or_whole(path: Option<&Path>, image: &ImageRGB) -> Result<SegmentMap, CliError> {
    let (h, w) = (image.height(), image.width());
    let seg = match path {
        Some(p) => load_segments(p)?,
        None => SegmentMap::new(h, w, vec![0; h * w], vec![SegmentClass::Other])?,
    };
    if (seg.height(), seg.width()) != (h, w) {
        return Err(CliError::input(
            "SIZE",
            format!("segments are {}x{}, image is {h}x{w}", seg.height(), seg.width()),
        ));
    }
    Ok(seg)
}

fn emit(out: Option<&Path>, json: String) -> Result<String, CliError> {
    match out {
        Some(p) => {
            write_file(p, &(json + "\n"))?;
            Ok(format!("wrote {}", p.display()))
        }
        None => Ok(json),
    }
}

pub fn synth(cfg: &RunConfig, count: usize) -> Result<String, CliError> {
    let dir = &cfg.paths.data_dir;
    generate_dataset(&cfg.synth, count, dir)?;
    Ok(dir.join(MANIFEST_NAME).display().to_string())
}

fn save_both(img: &impl Pfm, dir: &Path, stem: &str, name: &str) -> Result<(), CliError> {
    save_pfm(img, dir.join(format!("{stem}.{name}.pfm")))?;
    save_png(img, dir.join(format!("{stem}.{name}.png")))?;
    Ok(())
}

/// Writes every prior map of every sample as PFM (exact) and PNG (clamped
/// to `[0, 1]` for viewing). Edge maps use ground-truth reflectance.
pub fn priors(cfg: &RunConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<String, CliError> {
    let m = load_manifest(&manifest_path(cfg, manifest))?;
    let dir = out.unwrap_or_else(|| cfg.paths.data_dir.join("priors"));
    create_dir(&dir)?;
    for entry in &m.samples {
        let sample = m.load_sample(entry)?;
        let b = PriorBundle::compute(&sample.image, &sample.segments, Some(&sample.reflectance), DEFAULT_EPS)?;
        let edges = b.edge_pyramid.as_ref().expect("ground truth supplied");
        let stem = entry.image.trim_end_matches(".png");
        let [ccr, r, s, nrgb, e0, e1, e2] = PRIOR_MAPS;
        save_both(&b.ccr.strength, &dir, stem, ccr)?;
        save_both(&b.r_est, &dir, stem, r)?;
        save_both(&b.s_est, &dir, stem, s)?;
        save_both(&b.nrgb, &dir, stem, nrgb)?;
        save_both(&edges.full, &dir, stem, e0)?;
        save_both(&edges.half, &dir, stem, e1)?;
        save_both(&edges.quarter, &dir, stem, e2)?;
    }
    Ok(format!("{} samples -> {}", m.samples.len(), dir.display()))
}

pub fn train(
    cfg: &RunConfig,
    manifest: Option<PathBuf>,
    flags: AblationFlags,
    resume: bool,
) -> Result<String, CliError> {
    let ablation =
        Ablation { no_priors: flags.no_priors, no_edge_module: flags.no_edge_module, image_edges: flags.image_edges };
    ablation.validate()?;
    let m = load_manifest(&manifest_path(cfg, manifest))?;
    let out = &cfg.paths.out_dir;

    let (mut net, start) = if resume {
        let ckpt = load_checkpoint(&out.join(CHECKPOINT))?;
        let net = SigNet::from_checkpoint(&ckpt)?;
        if *net.config() != cfg.model || *net.ablation() != ablation {
            return Err(CliError::input(
                "CHECKPOINT",
                format!(
                    "checkpoint holds {:?} {:?}, the run asks for {:?} {:?}",
                    net.config(),
                    net.ablation(),
                    cfg.model,
                    ablation
                ),
            ));
        }
        (net, ckpt.header.step)
    } else {
        (SigNet::build(cfg.model, ablation)?, 0)
    };

    let samples = prepare_split(&m, Split::Train)?;
    create_dir(out)?;
    write_file(&out.join(RESOLVED_CONFIG), &(serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"))?;
    let summary = train_loop(&mut net, &samples, &cfg.train, &cfg.loss, out, start)?;
    let last = summary.records.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(format!("{} iterations, final loss {last:.6}, checkpoint {}", summary.iterations, summary.checkpoint.display()))
}

pub fn eval(cfg: &RunConfig, args: EvalArgs) -> Result<String, CliError> {
    if let Some(j) = &args.judgments {
        let set = JudgmentSet::load(j)?;
        let reflectance = match (&args.reflectance, &args.image) {
            (Some(r), _) => load_rgb(r)?,
            (None, Some(img)) => {
                let ckpt =
                    args.checkpoint.as_deref().ok_or_else(|| CliError::input("USAGE", "--image needs --checkpoint"))?;
                let net = load_model(ckpt)?;
                let image = load_png(img)?;
                let seg = segments_or_whole(None, &image)?;
                net.decompose(&image, &seg)?.0
            }
            (None, None) => return Err(CliError::input("USAGE", "--judgments needs --reflectance or --image")),
        };
        let value = whdr(&reflectance, &set, WHDR_DELTA)?;
        return emit(args.out.as_deref(), serde_json::json!({ "whdr": value }).to_string());
    }

    let split = Split::parse(&args.split)
        .ok_or_else(|| CliError::input("USAGE", format!("unknown split `{}` (train, val, test)", args.split)))?;
    let m = load_manifest(&manifest_path(cfg, args.manifest))?;
    let net;
    let predictor = match (&args.checkpoint, args.gt_bypass) {
        (Some(p), _) => {
            net = load_model(p)?;
            Predictor::Model(&net)
        }
        (None, true) => Predictor::GroundTruth,
        (None, false) => return Err(CliError::input("USAGE", "eval needs --checkpoint or --gt-bypass")),
    };
    let report = evaluate(&m, split, &predictor)?;
    emit(args.out.as_deref(), serde_json::to_string_pretty(&report).expect("report serializes"))
}

pub fn infer(checkpoint: &Path, image: &Path, segments: Option<PathBuf>, out: &Path) -> Result<String, CliError> {
    let net = load_model(checkpoint)?;
    let img = load_png(image)?;
    let size = net.config().input_size;
    if (img.height(), img.width()) != (size, size) {
        return Err(CliError::input(
            "SIZE",
            format!("image is {}x{}, the model expects {size}x{size}", img.height(), img.width()),
        ));
    }
    let seg = segments_or_whole(segments.as_deref(), &img)?;
    let (r, s) = net.decompose(&img, &seg)?;
    create_dir(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    save_both(&r, out, stem, "reflectance")?;
    save_both(&s, out, stem, "shading")?;
    Ok(format!("wrote {stem}.{{reflectance,shading}}.{{png,pfm}} to {}", out.display()))
}

/// Fixed-width pass/fail table, one row per check.
pub fn gradcheck_table(report: &SuiteReport) -> String {
    let mut t = format!("{:<22} {:>6} {:>5} {:>11} {:>8}  {}\n", "op", "coords", "skip", "max_rel", "tol", "case");
    for r in &report.results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        let _ = writeln!(
            t,
            "{:<22} {:>6} {:>5} {:>11.3e} {:>8.0e}  {} [{verdict}]",
            r.op, r.coords, r.skipped, r.max_rel_err, r.tol, r.case
        );
    }
    let failed = report.results.iter().filter(|r| !r.passed).count();
    let _ = write!(t, "{} checks, {failed} failed, {:.1} s", report.results.len(), report.seconds);
    t
}

/// Prints the table itself so it is visible even when the command fails.
pub fn gradcheck(seed: u64) -> Result<String, CliError> {
    let report = full_suite(seed).map_err(|e| CliError::internal("TENSOR", e.to_string()))?;
    let _ = writeln!(std::io::stdout(), "{}", gradcheck_table(&report));
    if report.passed() {
        Ok(String::new())
    } else {
        let failed: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
        Err(CliError::internal("GRADCHECK", format!("failed: {}", failed.join(", "))))
    }
}
