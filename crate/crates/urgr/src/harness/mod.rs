//! Dataset plumbing and measurement: JSONL manifests, degradation
//! pair construction, distance-binned evaluation, restoration
//! metrics, data-fraction sweeps, and throughput benchmarks. Reports
//! are plain serde structs so the CLI can dump them as JSON verbatim;
//! none of them embed timestamps, which keeps reruns byte-comparable.

mod synth;

pub use synth::{synth_generate, SynthConfig};

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::{focus_pipeline, BBox, FocusConfig, OracleDetector};
use crate::gvit::{GestureClass, InferResult, NUM_CLASSES};
use crate::imaging::{degrade, load_png, mse, psnr, DegradationConfig, Image, Psnr};

/// One labeled frame. `path` is relative to the manifest's base
/// directory; `bbox` is the ground-truth user box when known.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: GestureClass,
    pub distance_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub split: Option<String>,
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: HeaderBody,
}

#[derive(Serialize, Deserialize)]
struct HeaderBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// Parse a JSONL manifest: one sample object per line, with an
/// optional leading `{"manifest": {...}}` header row carrying split
/// and provenance. Blank lines are ignored. Errors carry the 1-based
/// line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut manifest = DatasetManifest::default();
    let mut saw_row = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !saw_row && manifest.split.is_none() && manifest.provenance.is_none() {
            if let Ok(header) = serde_json::from_str::<Header>(trimmed) {
                manifest.split = header.manifest.split;
                manifest.provenance = header.manifest.provenance;
                continue;
            }
        }
        let sample: Sample = serde_json::from_str(trimmed).map_err(|e| Error::Manifest {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !(sample.distance_m.is_finite() && (0.0..=25.0).contains(&sample.distance_m)) {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("distance {} m is outside [0, 25]", sample.distance_m),
            });
        }
        saw_row = true;
        manifest.samples.push(sample);
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    if manifest.split.is_some() || manifest.provenance.is_some() {
        let header = Header {
            manifest: HeaderBody {
                split: manifest.split.clone(),
                provenance: manifest.provenance.clone(),
            },
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
    }
    for sample in &manifest.samples {
        writeln!(out, "{}", serde_json::to_string(sample)?)?;
    }
    Ok(())
}

/// Degraded/clean training pair for the restoration network. Both
/// images share dimensions.
#[derive(Debug, Clone)]
pub struct DegradationPairSet {
    pub pairs: Vec<(Image, Image)>,
    pub distances: Vec<f64>,
}

/// Build (degraded, clean) pairs from manifest samples in the 2..=8 m
/// band. Each sample is focused through its ground-truth box first,
/// so pairs show the user at crop resolution; samples without a box
/// are rejected rather than silently skipped. An empty band is an
/// `EmptySet` error: training on nothing is never what the caller
/// meant.
pub fn build_degradation_set(
    manifest: &DatasetManifest,
    base_dir: impl AsRef<Path>,
    focus_cfg: &FocusConfig,
    deg_cfg: &DegradationConfig,
) -> Result<DegradationPairSet> {
    let base_dir = base_dir.as_ref();
    let mut pairs = Vec::new();
    let mut distances = Vec::new();
    for sample in &manifest.samples {
        if !(2.0..=8.0).contains(&sample.distance_m) {
            continue;
        }
        let bbox = sample.bbox.clone().ok_or_else(|| {
            Error::invalid(format!(
                "sample {} has no bbox; degradation pairs need ground-truth boxes",
                sample.path.display()
            ))
        })?;
        let frame = load_png(base_dir.join(&sample.path))?;
        let mut detector = OracleDetector::with_bbox(bbox);
        let clean = focus_pipeline(&frame, &mut detector, focus_cfg)?;
        let degraded = degrade(&clean, deg_cfg)?;
        pairs.push((degraded, clean));
        distances.push(sample.distance_m);
    }
    if pairs.is_empty() {
        return Err(Error::EmptySet("degradation pairs: no samples in the 2-8 m band".into()));
    }
    Ok(DegradationPairSet { pairs, distances })
}

#[derive(Serialize, Deserialize)]
struct PairSetMeta {
    n_pairs: usize,
    distances: Vec<f64>,
}

/// Store a pair set as `pair_NNNNN_x.png` (degraded) and
/// `pair_NNNNN_y.png` (clean) plus a `pairs.json` index. PNG is
/// 8-bit, so values are quantized once on the way in; a loaded set
/// saves back byte-identically.
pub fn save_pair_set(set: &DegradationPairSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if set.pairs.len() != set.distances.len() {
        return Err(Error::invalid("pair set has mismatched pair and distance counts"));
    }
    std::fs::create_dir_all(dir)?;
    for (i, (degraded, clean)) in set.pairs.iter().enumerate() {
        crate::imaging::save_png(degraded, dir.join(format!("pair_{i:05}_x.png")))?;
        crate::imaging::save_png(clean, dir.join(format!("pair_{i:05}_y.png")))?;
    }
    let meta = PairSetMeta {
        n_pairs: set.pairs.len(),
        distances: set.distances.clone(),
    };
    std::fs::write(dir.join("pairs.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_pair_set(dir: impl AsRef<Path>) -> Result<DegradationPairSet> {
    let dir = dir.as_ref();
    let meta: PairSetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("pairs.json"))?)?;
    if meta.distances.len() != meta.n_pairs {
        return Err(Error::invalid("pairs.json index is inconsistent"));
    }
    let mut pairs = Vec::with_capacity(meta.n_pairs);
    for i in 0..meta.n_pairs {
        let degraded = load_png(dir.join(format!("pair_{i:05}_x.png")))?;
        let clean = load_png(dir.join(format!("pair_{i:05}_y.png")))?;
        pairs.push((degraded, clean));
    }
    Ok(DegradationPairSet {
        pairs,
        distances: meta.distances,
    })
}

pub const EVAL_BINS: usize = 26;

/// Accuracy within one 1 m distance band `[lo_m, hi_m)`; the last
/// band is the single point 25 m.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BinAccuracy {
    pub lo_m: f64,
    pub hi_m: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub class: GestureClass,
    pub name: String,
    pub count: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Classification report. `confusion[t][p]` counts samples of true
/// class index t predicted as index p (indices are class number - 1);
/// frames where no user was found appear in `no_user` and count
/// against overall accuracy but not in the confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub overall_accuracy: f64,
    pub no_user: usize,
    pub bins: Vec<BinAccuracy>,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

fn distance_bin(d: f64) -> usize {
    (d.floor() as usize).min(EVAL_BINS - 1)
}

/// Run `infer` over every manifest sample and aggregate accuracy by
/// distance bin, confusion matrix, and per-class precision/recall.
pub fn eval_with(
    manifest: &DatasetManifest,
    base_dir: impl AsRef<Path>,
    infer: &mut dyn FnMut(&Image, &Sample) -> Result<InferResult>,
) -> Result<EvalReport> {
    if manifest.samples.is_empty() {
        return Err(Error::EmptySet("evaluation manifest has no samples".into()));
    }
    let base_dir = base_dir.as_ref();
    let mut bins: Vec<BinAccuracy> = (0..EVAL_BINS)
        .map(|k| BinAccuracy {
            lo_m: k as f64,
            hi_m: (k + 1) as f64,
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut no_user = 0usize;
    for sample in &manifest.samples {
        let frame = load_png(base_dir.join(&sample.path))?;
        let result = infer(&frame, sample)?;
        let bin = distance_bin(sample.distance_m);
        bins[bin].count += 1;
        match result {
            InferResult::Gesture { class, .. } => {
                confusion[sample.class.index() - 1][class.index() - 1] += 1;
                if class == sample.class {
                    bins[bin].correct += 1;
                }
            }
            InferResult::NoUser => no_user += 1,
        }
    }
    for bin in &mut bins {
        if bin.count > 0 {
            bin.accuracy = Some(bin.correct as f64 / bin.count as f64);
        }
    }
    let total_correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    let per_class = (0..NUM_CLASSES)
        .map(|i| {
            let class = GestureClass::ALL[i];
            let row: usize = confusion[i].iter().sum();
            let col: usize = (0..NUM_CLASSES).map(|t| confusion[t][i]).sum();
            ClassMetrics {
                class,
                name: class.name().into(),
                count: manifest.samples.iter().filter(|s| s.class == class).count(),
                precision: (col > 0).then(|| confusion[i][i] as f64 / col as f64),
                recall: (row > 0).then(|| confusion[i][i] as f64 / row as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        n_samples: manifest.samples.len(),
        overall_accuracy: total_correct as f64 / manifest.samples.len() as f64,
        no_user,
        bins,
        confusion,
        per_class,
    })
}

/// Evaluate the full pipeline using each sample's ground-truth box as
/// the detector (samples without one produce a no-user outcome).
pub fn eval_classifier(
    manifest: &DatasetManifest,
    base_dir: impl AsRef<Path>,
    hqnet: Option<(&crate::hqnet::HQNetConfig, &crate::nn::ParamTree)>,
    gvit: (&crate::gvit::GViTConfig, &crate::nn::ParamTree),
    focus_cfg: &FocusConfig,
) -> Result<EvalReport> {
    eval_with(manifest, base_dir, &mut |frame, sample| {
        let mut detector = match &sample.bbox {
            Some(b) => OracleDetector::with_bbox(b.clone()),
            None => OracleDetector::empty(),
        };
        crate::gvit::urgr_infer(frame, &mut detector, hqnet, gvit, focus_cfg)
    })
}

/// Mean restoration quality for one method over a pair set. The mean
/// PSNR is `None` when any pair restored perfectly, since an infinite
/// term has no finite mean; MSE stays well-defined regardless.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SrRow {
    pub mean_mse: f64,
    pub mean_psnr_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SrReport {
    pub n_pairs: usize,
    pub improved: SrRow,
    pub baseline: SrRow,
}

fn sr_row(restored: &[Image], targets: &[Image]) -> Result<SrRow> {
    let mut sum_mse = 0.0;
    let mut sum_db = 0.0;
    let mut any_infinite = false;
    for (r, t) in restored.iter().zip(targets) {
        let rd = (r.height(), r.width(), r.channels());
        let td = (t.height(), t.width(), t.channels());
        if rd != td {
            return Err(Error::invalid(format!(
                "restored image is {rd:?} but target is {td:?}"
            )));
        }
        sum_mse += mse(r, t)?;
        match psnr(r, t, 1.0)? {
            Psnr::Db(v) => sum_db += v,
            Psnr::Infinite => any_infinite = true,
        }
    }
    let n = restored.len() as f64;
    Ok(SrRow {
        mean_mse: sum_mse / n,
        mean_psnr_db: (!any_infinite).then(|| sum_db / n),
    })
}

/// Compare a restoration function against the identity baseline on
/// (degraded, clean) pairs: `improved` scores `sr(degraded)` vs
/// clean, `baseline` scores the degraded input untouched.
pub fn eval_sr(
    pairs: &[(Image, Image)],
    sr: &mut dyn FnMut(&Image) -> Result<Image>,
) -> Result<SrReport> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("restoration evaluation has no pairs".into()));
    }
    let mut restored = Vec::with_capacity(pairs.len());
    for (degraded, _) in pairs {
        restored.push(sr(degraded)?);
    }
    let targets: Vec<Image> = pairs.iter().map(|(_, clean)| clean.clone()).collect();
    let identity: Vec<Image> = pairs.iter().map(|(degraded, _)| degraded.clone()).collect();
    Ok(SrReport {
        n_pairs: pairs.len(),
        improved: sr_row(&restored, &targets)?,
        baseline: sr_row(&identity, &targets)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub n_subset: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Measure how a score depends on training-set size: for each
/// fraction, draw `k` random subsets (without replacement, original
/// manifest order preserved) and run the caller's train-and-score
/// closure on each. Fraction 1.0 always yields the full set, so its
/// k runs differ only through the closure's own stochasticity.
pub fn data_sweep(
    manifest: &DatasetManifest,
    fractions: &[f64],
    k: usize,
    seed: u64,
    run: &mut dyn FnMut(&[Sample]) -> Result<f64>,
) -> Result<Vec<SweepPoint>> {
    if manifest.samples.is_empty() {
        return Err(Error::EmptySet("sweep manifest has no samples".into()));
    }
    if k == 0 {
        return Err(Error::invalid("sweep needs at least one repetition per fraction"));
    }
    let n = manifest.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "fraction {fraction} is outside (0, 1]"
            )));
        }
        let m = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut scores = Vec::with_capacity(k);
        for _ in 0..k {
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            let subset: Vec<Sample> = idx.iter().map(|&i| manifest.samples[i].clone()).collect();
            scores.push(run(&subset)?);
        }
        let mean = scores.iter().sum::<f64>() / k as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
        points.push(SweepPoint {
            fraction,
            n_subset: m,
            scores,
            mean,
            std_dev: var.sqrt(),
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub hz: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub n_frames: usize,
    pub repetitions: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    // Nearest-rank: smallest value covering fraction p of the data.
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time `infer` over every frame `repetitions` times and report
/// latency percentiles over all individual calls. Throughput is the
/// inverse of the median, which ignores warm-up outliers better than
/// the mean does. Needs at least 10 frames to say anything stable.
pub fn bench_throughput(
    frames: &[Image],
    repetitions: usize,
    infer: &mut dyn FnMut(&Image) -> Result<InferResult>,
) -> Result<BenchReport> {
    if frames.len() < 10 {
        return Err(Error::invalid(format!(
            "benchmark needs at least 10 frames, got {}",
            frames.len()
        )));
    }
    if repetitions == 0 {
        return Err(Error::invalid("benchmark needs at least one repetition"));
    }
    let mut latencies = Vec::with_capacity(frames.len() * repetitions);
    for _ in 0..repetitions {
        for frame in frames {
            let start = std::time::Instant::now();
            infer(frame)?;
            latencies.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
    latencies.sort_by(|a, b| a.total_cmp(b));
    let p50_ms = percentile(&latencies, 0.5);
    let p95_ms = percentile(&latencies, 0.95);
    Ok(BenchReport {
        hz: 1e3 / p50_ms,
        mean_ms,
        p50_ms,
        p95_ms,
        n_frames: frames.len(),
        repetitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gvit::ClassDistribution;
    use tempfile::tempdir;

    fn sample(path: &str, class: GestureClass, d: f64) -> Sample {
        Sample {
            path: path.into(),
            class,
            distance_m: d,
            bbox: None,
        }
    }

    fn gesture(class: GestureClass) -> InferResult {
        let mut logits = [0.0; NUM_CLASSES];
        logits[class.index() - 1] = 8.0;
        let distribution = ClassDistribution::from_logits(logits);
        InferResult::Gesture {
            class,
            certainty: distribution.prob_of(class),
            distribution,
        }
    }

    #[test]
    fn manifest_round_trips_through_jsonl() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        let manifest = DatasetManifest {
            samples: vec![
                Sample {
                    path: "a.png".into(),
                    class: GestureClass::Pointing,
                    distance_m: 3.25,
                    bbox: Some(BBox::new(10.0, 20.0, 30.0, 40.0).unwrap()),
                },
                sample("b.png", GestureClass::Stop, 24.0),
            ],
            split: Some("test".into()),
            provenance: Some("unit fixture".into()),
        };
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn manifest_rows_parse_without_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        std::fs::write(
            &path,
            "{\"path\":\"x.png\",\"class\":4,\"distance_m\":7.5}\n\n{\"path\":\"y.png\",\"class\":1,\"distance_m\":0.0,\"bbox\":[1.0,2.0,3.0,4.0]}\n",
        )
        .unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.split, None);
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded.samples[0].class, GestureClass::ThumbsDown);
        assert_eq!(loaded.samples[1].bbox.as_ref().unwrap().w, 3.0);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        std::fs::write(
            &path,
            "{\"path\":\"x.png\",\"class\":4,\"distance_m\":7.5}\n{\"path\":\"y.png\",\"class\":7,\"distance_m\":3.0}\n",
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other}"),
        }
        std::fs::write(&path, "{\"path\":\"z.png\",\"class\":2,\"distance_m\":30.0}\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            Error::Manifest { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("[0, 25]"), "{msg}");
            }
            other => panic!("expected manifest error, got {other}"),
        }
    }

    #[test]
    fn synth_corpus_is_balanced_and_deterministic() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig {
            count: 12,
            seed: 9,
            height: 96,
            width: 128,
            k: 300.0,
            clutter: 6,
            ..SynthConfig::default()
        };
        let manifest = synth_generate(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 12);
        let mut histogram = [0usize; NUM_CLASSES];
        for s in &manifest.samples {
            histogram[s.class.index() - 1] += 1;
            assert!((cfg.d_min..=cfg.d_max).contains(&s.distance_m));
            assert!(s.bbox.is_some());
        }
        assert_eq!(histogram, [2; NUM_CLASSES]);
        let bytes: Vec<Vec<u8>> = manifest
            .samples
            .iter()
            .map(|s| std::fs::read(dir.path().join(&s.path)).unwrap())
            .collect();
        let dir2 = tempdir().unwrap();
        let manifest2 = synth_generate(&cfg, dir2.path()).unwrap();
        assert_eq!(manifest, manifest2);
        for (s, b) in manifest2.samples.iter().zip(&bytes) {
            assert_eq!(&std::fs::read(dir2.path().join(&s.path)).unwrap(), b);
        }
    }

    #[test]
    fn synth_figure_height_scales_inversely_with_distance() {
        // Two single-distance corpora; the d=5 figure must stand
        // exactly four times taller than the d=20 one.
        let heights: Vec<f64> = [5.0, 20.0]
            .iter()
            .map(|&d| {
                let dir = tempdir().unwrap();
                let cfg = SynthConfig {
                    count: 1,
                    seed: 3,
                    d_min: d,
                    d_max: d,
                    ..SynthConfig::default()
                };
                let manifest = synth_generate(&cfg, dir.path()).unwrap();
                manifest.samples[0].bbox.as_ref().unwrap().h
            })
            .collect();
        assert!((heights[0] - 4.0 * heights[1]).abs() < 1e-9);
    }

    #[test]
    fn synth_rejects_degenerate_configs() {
        let tiny = SynthConfig {
            k: 100.0,
            ..SynthConfig::default()
        };
        assert!(matches!(tiny.validate(), Err(Error::InvalidArgument(_))));
        let inverted = SynthConfig {
            d_min: 10.0,
            d_max: 5.0,
            ..SynthConfig::default()
        };
        assert!(matches!(inverted.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn degradation_set_filters_the_close_band() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig {
            count: 3,
            seed: 4,
            height: 96,
            width: 128,
            k: 300.0,
            d_min: 2.0,
            d_max: 25.0,
            clutter: 4,
            ..SynthConfig::default()
        };
        let mut manifest = synth_generate(&cfg, dir.path()).unwrap();
        manifest.samples[0].distance_m = 1.0;
        manifest.samples[1].distance_m = 5.0;
        manifest.samples[2].distance_m = 9.0;
        let focus = FocusConfig {
            target_size: 32,
            ..FocusConfig::default()
        };
        let deg = DegradationConfig::default();
        let set = build_degradation_set(&manifest, dir.path(), &focus, &deg).unwrap();
        assert_eq!(set.pairs.len(), 1);
        assert_eq!(set.distances, vec![5.0]);
        let (degraded, clean) = &set.pairs[0];
        assert_eq!((degraded.height(), degraded.width()), (32, 32));
        // The pair must reproduce the degradation operator bit for bit.
        let expected = degrade(clean, &deg).unwrap();
        assert_eq!(degraded.data(), expected.data());
        for s in &mut manifest.samples {
            s.distance_m = 20.0;
        }
        let err = build_degradation_set(&manifest, dir.path(), &focus, &deg).unwrap_err();
        assert!(matches!(err, Error::EmptySet(_)));
    }

    #[test]
    fn pair_set_round_trips_through_directory() {
        let quantized = |v: f64| (v * 255.0).round() / 255.0;
        let a = Image::from_fn(8, 8, 3, |y, x, c| {
            quantized(0.1 + 0.8 * ((y * 7 + x * 3 + c) % 11) as f64 / 11.0)
        })
        .unwrap();
        let b = Image::from_fn(8, 8, 3, |y, x, _| quantized((y + x) as f64 / 14.0)).unwrap();
        let set = DegradationPairSet {
            pairs: vec![(a.clone(), b.clone()), (b, a)],
            distances: vec![3.5, 6.0],
        };
        let dir = tempdir().unwrap();
        save_pair_set(&set, dir.path()).unwrap();
        let loaded = load_pair_set(dir.path()).unwrap();
        assert_eq!(loaded.distances, set.distances);
        for (l, s) in loaded.pairs.iter().zip(&set.pairs) {
            assert_eq!(l.0.data(), s.0.data());
            assert_eq!(l.1.data(), s.1.data());
        }
    }

    #[test]
    fn eval_oracle_predictor_scores_perfectly() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig {
            count: 6,
            seed: 5,
            height: 96,
            width: 128,
            k: 300.0,
            clutter: 4,
            ..SynthConfig::default()
        };
        let manifest = synth_generate(&cfg, dir.path()).unwrap();
        let report = eval_with(&manifest, dir.path(), &mut |_, s| Ok(gesture(s.class))).unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.no_user, 0);
        for i in 0..NUM_CLASSES {
            assert_eq!(report.confusion[i][i], 1);
            assert_eq!(report.per_class[i].precision, Some(1.0));
            assert_eq!(report.per_class[i].recall, Some(1.0));
        }
        let binned: usize = report.bins.iter().map(|b| b.count).sum();
        assert_eq!(binned, 6);
    }

    #[test]
    fn eval_confusion_and_bins_match_hand_counts() {
        let dir = tempdir().unwrap();
        let img = Image::constant(8, 8, 3, 0.5).unwrap();
        crate::imaging::save_png(&img, dir.path().join("f.png")).unwrap();
        let manifest = DatasetManifest {
            samples: vec![
                sample("f.png", GestureClass::Null, 0.5),
                sample("f.png", GestureClass::Null, 0.7),
                sample("f.png", GestureClass::Pointing, 3.2),
                sample("f.png", GestureClass::Pointing, 3.9),
                sample("f.png", GestureClass::Stop, 25.0),
                sample("f.png", GestureClass::Stop, 12.0),
            ],
            ..DatasetManifest::default()
        };
        // Predictor: mislabels one pointing sample as stop, drops one
        // stop sample as no-user.
        let mut calls = 0usize;
        let report = eval_with(&manifest, dir.path(), &mut |_, s| {
            calls += 1;
            Ok(match calls {
                4 => gesture(GestureClass::Stop),
                5 => InferResult::NoUser,
                _ => gesture(s.class),
            })
        })
        .unwrap();
        assert_eq!(report.n_samples, 6);
        assert_eq!(report.no_user, 1);
        assert!((report.overall_accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(report.confusion[0][0], 2);
        assert_eq!(report.confusion[1][1], 1);
        assert_eq!(report.confusion[1][5], 1);
        assert_eq!(report.confusion[5][5], 1);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 5, "no-user frames stay out of the matrix");
        assert_eq!(report.bins[0].count, 2);
        assert_eq!(report.bins[0].accuracy, Some(1.0));
        assert_eq!(report.bins[3].count, 2);
        assert_eq!(report.bins[3].accuracy, Some(0.5));
        assert_eq!(report.bins[25].count, 1);
        assert_eq!(report.bins[25].accuracy, Some(0.0));
        assert_eq!(report.bins[12].accuracy, Some(1.0));
        assert_eq!(report.bins[7].count, 0);
        assert_eq!(report.bins[7].accuracy, None);
        // Bin-weighted recombination reproduces the overall number.
        let weighted: f64 = report
            .bins
            .iter()
            .filter_map(|b| b.accuracy.map(|a| a * b.count as f64))
            .sum::<f64>()
            / report.n_samples as f64;
        assert!((weighted - report.overall_accuracy).abs() < 1e-12);
        // Stop precision: 1 correct of 2 predicted; pointing recall:
        // 1 correct of 2 true.
        assert_eq!(report.per_class[5].precision, Some(0.5));
        assert_eq!(report.per_class[1].recall, Some(0.5));
    }

    #[test]
    fn eval_sr_identity_matches_baseline() {
        let a = Image::from_fn(8, 8, 3, |y, x, c| {
            0.1 + 0.7 * ((y * 31 + x * 17 + c * 11) % 13) as f64 / 13.0
        })
        .unwrap();
        let b = Image::constant(8, 8, 3, 0.4).unwrap();
        let pairs = vec![(a.clone(), b.clone()), (b.clone(), a.clone())];
        let report = eval_sr(&pairs, &mut |img| Ok(img.clone())).unwrap();
        assert_eq!(report.n_pairs, 2);
        assert_eq!(report.improved, report.baseline);
        let oracle = eval_sr(&pairs, &mut |img| {
            // Perfect restorer: return the clean mate of this input.
            Ok(if img.data() == a.data() { b.clone() } else { a.clone() })
        })
        .unwrap();
        assert_eq!(oracle.improved.mean_mse, 0.0);
        assert_eq!(oracle.improved.mean_psnr_db, None);
        assert!(oracle.baseline.mean_psnr_db.is_some());
        let err = eval_sr(&pairs, &mut |_| Image::constant(4, 4, 3, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn sweep_subsets_honor_fraction_and_seed() {
        let manifest = DatasetManifest {
            samples: (0..20)
                .map(|i| sample(&format!("{i}.png"), GestureClass::ALL[i % 6], i as f64))
                .collect(),
            ..DatasetManifest::default()
        };
        let mut sizes = Vec::new();
        let points = data_sweep(&manifest, &[0.25, 1.0], 3, 11, &mut |subset| {
            sizes.push(subset.len());
            // Score: mean sample index, recovered from the path stem.
            Ok(subset
                .iter()
                .map(|s| s.path.file_stem().unwrap().to_str().unwrap().parse::<f64>().unwrap())
                .sum::<f64>()
                / subset.len() as f64)
        })
        .unwrap();
        assert_eq!(sizes, vec![5, 5, 5, 20, 20, 20]);
        assert_eq!(points[0].n_subset, 5);
        assert_eq!(points[0].scores.len(), 3);
        assert_eq!(points[1].n_subset, 20);
        // Full-fraction subsets are the identity, so all runs agree.
        assert_eq!(points[1].std_dev, 0.0);
        assert!((points[1].mean - 9.5).abs() < 1e-12);
        let again = data_sweep(&manifest, &[0.25, 1.0], 3, 11, &mut |subset| {
            Ok(subset
                .iter()
                .map(|s| s.path.file_stem().unwrap().to_str().unwrap().parse::<f64>().unwrap())
                .sum::<f64>()
                / subset.len() as f64)
        })
        .unwrap();
        assert_eq!(points, again);
        let err = data_sweep(&manifest, &[0.0], 3, 11, &mut |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let empty = DatasetManifest::default();
        let err = data_sweep(&empty, &[0.5], 1, 0, &mut |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::EmptySet(_)));
    }

    #[test]
    fn sweep_full_fraction_keeps_manifest_order() {
        let manifest = DatasetManifest {
            samples: (0..7)
                .map(|i| sample(&format!("{i}.png"), GestureClass::Null, i as f64))
                .collect(),
            ..DatasetManifest::default()
        };
        data_sweep(&manifest, &[1.0], 1, 42, &mut |subset| {
            assert_eq!(subset, manifest.samples.as_slice());
            Ok(0.0)
        })
        .unwrap();
    }

    #[test]
    fn bench_reports_consistent_percentiles() {
        let frames: Vec<Image> = (0..10)
            .map(|i| Image::constant(6, 6, 3, i as f64 / 10.0).unwrap())
            .collect();
        let report = bench_throughput(&frames, 2, &mut |_| Ok(gesture(GestureClass::Null))).unwrap();
        assert_eq!(report.n_frames, 10);
        assert_eq!(report.repetitions, 2);
        assert!(report.p50_ms > 0.0 && report.p50_ms <= report.p95_ms);
        assert!(report.hz.is_finite() && report.hz > 0.0);
        assert!((report.hz - 1e3 / report.p50_ms).abs() < 1e-9);
        let few = &frames[..9];
        let err = bench_throughput(few, 1, &mut |_| Ok(gesture(GestureClass::Null))).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn bench_report_serializes_expected_keys() {
        let report = BenchReport {
            hz: 12.5,
            mean_ms: 81.0,
            p50_ms: 80.0,
            p95_ms: 95.0,
            n_frames: 10,
            repetitions: 3,
        };
        let json = serde_json::to_value(&report).unwrap();
        for key in ["hz", "p50_ms", "p95_ms", "n_frames"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let values = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&values, 0.5), 5.0);
        assert_eq!(percentile(&values, 0.95), 10.0);
        assert_eq!(percentile(&values, 1.0), 10.0);
        assert_eq!(percentile(&[7.0], 0.5), 7.0);
    }
}
