//! Command-line front end: corpus synthesis, degradation pair
//! construction, training, evaluation, inference, data sweeps, and
//! throughput benchmarks. Every command prints one JSON object to
//! stdout; `--report`/`--out` flags additionally write it to a file.
//! Failures print `{"error": {"kind", "message"}}` to stderr and exit
//! nonzero. Reports carry no timestamps, so a fixed seed reproduces
//! them byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use urgr::focus::{BBox, Detector, ExternalDetector, FocusConfig, OracleDetector};
use urgr::gvit::{
    classify, gvit_forward, load_gvit, save_gvit, train_gvit, urgr_infer, GViTConfig, GvitSample,
};
use urgr::harness::{
    bench_throughput, build_degradation_set, data_sweep, eval_classifier, eval_sr, load_manifest,
    load_pair_set, save_manifest, save_pair_set, synth_generate, Sample, SynthConfig,
};
use urgr::hqnet::{
    hqnet_forward, load_hqnet, save_hqnet, train_hqnet, DegradationPair, HQNetConfig, TrainHyper,
};
use urgr::imaging::{load_png, DegradationConfig, Image};
use urgr::{Error, Result};

#[derive(Parser)]
#[command(name = "urgr", version, about = "Ultra-range gesture recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic gesture corpus with a manifest.
    Synth(SynthArgs),
    /// Build (degraded, clean) training pairs from manifest samples
    /// in the 2-8 m band.
    DegradeSet(DegradeSetArgs),
    /// Train the restoration network on a pair directory.
    TrainHqnet(TrainHqnetArgs),
    /// Train the gesture classifier on a manifest.
    TrainGvit(TrainGvitArgs),
    /// Evaluate the pipeline over a manifest: accuracy by distance
    /// bin, confusion matrix, per-class metrics.
    Eval(EvalArgs),
    /// Score restoration quality against the identity baseline.
    EvalSr(EvalSrArgs),
    /// Classify a single frame.
    Infer(InferArgs),
    /// Train/score across training-set fractions.
    Sweep(SweepArgs),
    /// Measure end-to-end inference latency and throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    d_min: f64,
    #[arg(long, default_value_t = 25.0)]
    d_max: f64,
    #[arg(long, default_value_t = 480)]
    height: usize,
    #[arg(long, default_value_t = 640)]
    width: usize,
    /// Figure height constant in px·m (height at distance d is k/d).
    #[arg(long, default_value_t = 2400.0)]
    k: f64,
}

#[derive(Args)]
struct DegradeSetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for pair PNGs and pairs.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    quality: u8,
    /// Side length of the focused crop both pair images share.
    #[arg(long, default_value_t = 512)]
    target_size: usize,
}

#[derive(Args)]
struct TrainHqnetArgs {
    /// Pair directory produced by degrade-set.
    #[arg(long)]
    pairs: PathBuf,
    /// JSON file with optional "net" and "hyper" objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed; URGR_SEED overrides both.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainGvitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Restoration checkpoint to enhance crops during training.
    #[arg(long)]
    hqnet: Option<PathBuf>,
    /// JSON file with optional "net", "hyper" and "focus" objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hqnet: Option<PathBuf>,
    #[arg(long)]
    gvit: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Focused crop size when no restoration checkpoint is given.
    #[arg(long, default_value_t = 512)]
    target_size: usize,
}

#[derive(Args)]
struct EvalSrArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    hqnet: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum DetectorKind {
    /// Replay the box given with --bbox (no box means no user).
    Oracle,
    /// Run the --detector-cmd executable on the frame.
    External,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    hqnet: Option<PathBuf>,
    #[arg(long)]
    gvit: PathBuf,
    #[arg(long, value_enum, default_value_t = DetectorKind::Oracle)]
    detector: DetectorKind,
    /// Ground-truth user box as x0,y0,w,h (oracle detector only).
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BBox>,
    /// Executable printing detection JSON (external detector only).
    #[arg(long)]
    detector_cmd: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    target_size: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated training-set fractions in (0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    fractions: Vec<f64>,
    /// Subsets drawn per fraction.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Classifier training config, as for train-gvit.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hqnet: Option<PathBuf>,
    #[arg(long)]
    gvit: PathBuf,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Cap on frames loaded from the manifest.
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 512)]
    target_size: usize,
}

fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err("expected x0,y0,w,h".into());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    BBox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| e.to_string())
}

/// Seed precedence: URGR_SEED env var, then --seed, then the config
/// file value.
fn effective_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    match std::env::var("URGR_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| Error::invalid(format!("URGR_SEED must be an unsigned integer, got {raw:?}"))),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

/// Write the report JSON to `path` (pretty) and echo it to stdout
/// (compact). A closed stdout (downstream pipe gone) is not an
/// error once the file is written.
fn emit(report: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        let mut pretty = serde_json::to_string_pretty(report)?;
        pretty.push('\n');
        std::fs::write(path, pretty)?;
    }
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{report}");
    Ok(())
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct HqnetTrainSpec {
    net: HQNetConfig,
    hyper: TrainHyper,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct GvitTrainSpec {
    net: GViTConfig,
    hyper: TrainHyper,
    focus: FocusConfig,
}

fn focus_for(hqnet: Option<&HQNetConfig>, target_size: usize) -> FocusConfig {
    FocusConfig {
        target_size: hqnet.map_or(target_size, |h| h.input_size),
        ..FocusConfig::default()
    }
}

fn load_samples(manifest_path: &Path) -> Result<(Vec<Sample>, Vec<Image>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = base_dir(manifest_path);
    let mut frames = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        frames.push(load_png(base.join(&sample.path))?);
    }
    Ok((manifest.samples, frames))
}

/// Focus a frame through its ground-truth box; frames without one
/// pass through whole.
fn crop_for(frame: &Image, bbox: Option<&BBox>, focus: &FocusConfig) -> Result<Image> {
    match bbox {
        Some(b) => {
            let mut det = OracleDetector::with_bbox(b.clone());
            urgr::focus::focus_pipeline(frame, &mut det, focus)
        }
        None => Ok(frame.clone()),
    }
}

/// Load manifest samples as training units, cropping each frame as it
/// streams in so full frames never accumulate in memory.
fn load_cropped(manifest_path: &Path, focus: &FocusConfig) -> Result<(Vec<Sample>, Vec<GvitSample>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = base_dir(manifest_path);
    let mut out = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let frame = load_png(base.join(&s.path))?;
        out.push(GvitSample {
            image: crop_for(&frame, s.bbox.as_ref(), focus)?,
            class: s.class,
            bbox: None,
        });
    }
    Ok((manifest.samples, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => {
            let cfg = SynthConfig {
                count: a.count,
                seed: effective_seed(Some(a.seed), 0)?,
                height: a.height,
                width: a.width,
                d_min: a.d_min,
                d_max: a.d_max,
                k: a.k,
                ..SynthConfig::default()
            };
            let manifest = synth_generate(&cfg, &a.out)?;
            let manifest_path = a.out.join("manifest.jsonl");
            save_manifest(&manifest, &manifest_path)?;
            emit(
                &serde_json::json!({
                    "n_samples": manifest.samples.len(),
                    "seed": cfg.seed,
                    "manifest": manifest_path,
                }),
                None,
            )
        }
        Cmd::DegradeSet(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let focus = FocusConfig {
                target_size: a.target_size,
                ..FocusConfig::default()
            };
            let deg = DegradationConfig {
                jpeg_quality: a.quality,
                ..DegradationConfig::default()
            };
            let set = build_degradation_set(&manifest, base_dir(&a.manifest), &focus, &deg)?;
            save_pair_set(&set, &a.out)?;
            emit(
                &serde_json::json!({
                    "n_pairs": set.pairs.len(),
                    "target_size": a.target_size,
                    "jpeg_quality": a.quality,
                    "out": a.out,
                }),
                None,
            )
        }
        Cmd::TrainHqnet(a) => {
            let mut spec: HqnetTrainSpec = read_config(a.config.as_deref())?;
            spec.hyper.seed = effective_seed(a.seed, spec.hyper.seed)?;
            let set = load_pair_set(&a.pairs)?;
            let pairs: Vec<DegradationPair> = set
                .pairs
                .into_iter()
                .map(|(degraded, clean)| DegradationPair::new(degraded, clean))
                .collect::<Result<_>>()?;
            let trained = train_hqnet(&pairs, &spec.net, &spec.hyper)?;
            save_hqnet(&a.out, &spec.net, &trained.params)?;
            emit(
                &serde_json::json!({
                    "n_pairs": pairs.len(),
                    "epochs": trained.epoch_losses.len(),
                    "epoch_losses": trained.epoch_losses,
                    "seed": spec.hyper.seed,
                    "checkpoint": a.out,
                }),
                None,
            )
        }
        Cmd::TrainGvit(a) => {
            let mut spec: GvitTrainSpec = read_config(a.config.as_deref())?;
            spec.hyper.seed = effective_seed(a.seed, spec.hyper.seed)?;
            let hq = a.hqnet.as_deref().map(load_hqnet).transpose()?;
            if let Some((hc, _)) = &hq {
                spec.focus.target_size = hc.input_size;
            }
            let (_, gvit_samples) = load_cropped(&a.manifest, &spec.focus)?;
            let hq_ref = hq.as_ref().map(|(c, p)| (c, p));
            let trained = train_gvit(&gvit_samples, &spec.focus, hq_ref, &spec.net, &spec.hyper)?;
            save_gvit(&a.out, &spec.net, &trained.params)?;
            emit(
                &serde_json::json!({
                    "n_samples": gvit_samples.len(),
                    "epochs": trained.epoch_losses.len(),
                    "epoch_losses": trained.epoch_losses,
                    "seed": spec.hyper.seed,
                    "checkpoint": a.out,
                }),
                None,
            )
        }
        Cmd::Eval(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let hq = a.hqnet.as_deref().map(load_hqnet).transpose()?;
            let gv = load_gvit(&a.gvit)?;
            let focus = focus_for(hq.as_ref().map(|(c, _)| c), a.target_size);
            let hq_ref = hq.as_ref().map(|(c, p)| (c, p));
            let report = eval_classifier(
                &manifest,
                base_dir(&a.manifest),
                hq_ref,
                (&gv.0, &gv.1),
                &focus,
            )?;
            emit(&serde_json::to_value(&report)?, Some(&a.report))
        }
        Cmd::EvalSr(a) => {
            let set = load_pair_set(&a.pairs)?;
            let (cfg, params) = load_hqnet(&a.hqnet)?;
            let report = eval_sr(&set.pairs, &mut |img| hqnet_forward(img, &params, &cfg))?;
            emit(&serde_json::to_value(&report)?, Some(&a.report))
        }
        Cmd::Infer(a) => {
            let frame = load_png(&a.image)?;
            let hq = a.hqnet.as_deref().map(load_hqnet).transpose()?;
            let gv = load_gvit(&a.gvit)?;
            let focus = focus_for(hq.as_ref().map(|(c, _)| c), a.target_size);
            let mut detector: Box<dyn Detector> = match a.detector {
                DetectorKind::Oracle => Box::new(match a.bbox {
                    Some(b) => OracleDetector::with_bbox(b),
                    None => OracleDetector::empty(),
                }),
                DetectorKind::External => {
                    let cmd = a.detector_cmd.ok_or_else(|| {
                        Error::invalid("--detector external requires --detector-cmd")
                    })?;
                    Box::new(ExternalDetector::new(cmd))
                }
            };
            let hq_ref = hq.as_ref().map(|(c, p)| (c, p));
            let result = urgr_infer(&frame, detector.as_mut(), hq_ref, (&gv.0, &gv.1), &focus)?;
            emit(&result.to_json(), a.out.as_deref())
        }
        Cmd::Sweep(a) => {
            let spec: GvitTrainSpec = read_config(a.config.as_deref())?;
            let seed = effective_seed(a.seed, spec.hyper.seed)?;
            let manifest = load_manifest(&a.manifest)?;
            let base = base_dir(&a.manifest);
            // Crops are cached once; each sweep run reuses them for
            // both its training subset and the full-manifest score.
            let mut crops = std::collections::BTreeMap::new();
            for s in &manifest.samples {
                if !crops.contains_key(&s.path) {
                    let frame = load_png(base.join(&s.path))?;
                    crops.insert(s.path.clone(), crop_for(&frame, s.bbox.as_ref(), &spec.focus)?);
                }
            }
            // Score: train on the subset, then oracle-focused accuracy
            // over the full manifest.
            let points = data_sweep(&manifest, &a.fractions, a.k, seed, &mut |subset| {
                let train_set: Vec<GvitSample> = subset
                    .iter()
                    .map(|s| GvitSample {
                        image: crops[&s.path].clone(),
                        class: s.class,
                        bbox: None,
                    })
                    .collect();
                let trained = train_gvit(&train_set, &spec.focus, None, &spec.net, &spec.hyper)?;
                let mut correct = 0usize;
                for s in &manifest.samples {
                    let dist = gvit_forward(&crops[&s.path], &trained.params, &spec.net, false)?;
                    if classify(&dist) == s.class {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / manifest.samples.len() as f64)
            })?;
            emit(
                &serde_json::json!({ "seed": seed, "points": points }),
                Some(&a.report),
            )
        }
        Cmd::Bench(a) => {
            let (samples, frames) = load_samples(&a.manifest)?;
            let n = a.max_frames.unwrap_or(frames.len()).min(frames.len());
            let frames = &frames[..n];
            let boxes: Vec<Option<BBox>> = samples[..n].iter().map(|s| s.bbox.clone()).collect();
            let hq = a.hqnet.as_deref().map(load_hqnet).transpose()?;
            let gv = load_gvit(&a.gvit)?;
            let focus = focus_for(hq.as_ref().map(|(c, _)| c), a.target_size);
            let hq_ref = hq.as_ref().map(|(c, p)| (c, p));
            // bench_throughput replays frames in order, so a rolling
            // index pairs each call with its ground-truth box.
            let mut call = 0usize;
            let report = bench_throughput(frames, a.repetitions, &mut |frame| {
                let mut det = match &boxes[call % n] {
                    Some(b) => OracleDetector::with_bbox(b.clone()),
                    None => OracleDetector::empty(),
                };
                call += 1;
                urgr_infer(frame, &mut det, hq_ref, (&gv.0, &gv.1), &focus)
            })?;
            emit(&serde_json::to_value(&report)?, Some(&a.report))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
