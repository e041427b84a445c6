//! Train, evaluate, replay, select and benchmark, each writing plain-text
//! artifacts into a fresh run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    active_select, batch_tensor, center_crop_sample, image_features, load_annotations, synth_scene, Episode, Sample,
    SceneParams,
};
use crate::error::{Error, Result};
use crate::geometry::Class;
use crate::metrics::{
    awd, bbox_map, format_episode_table, format_report, iou_miou, prf1, warning_rates, EpisodeOutcome, MatchConfig,
};
use crate::model::{DetectionBox, Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::{flops, Tensor};
use crate::train::{mean_best_iou, train, TrainConfig, LOSS_CURVE_HEADER};
use crate::warning::{run_episode, DeviationPolicy, Latency, SceneObservation};

pub const CHECKPOINT_FILE: &str = "checkpoint.amdn";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";
pub const EPISODE_TABLE_FILE: &str = "episodes.csv";
pub const REPLAY_SUMMARY_FILE: &str = "replay_summary.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const SELECTION_FILE: &str = "selection.csv";
pub const BENCH_REPORT_FILE: &str = "bench_report.txt";
pub const BENCH_TIMING_FILE: &str = "bench_timing.txt";

/// Where samples come from: an annotation file, or seeded synthetic scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSource {
    pub annotations: Option<PathBuf>,
    pub synth_count: usize,
}

impl DataSource {
    pub fn synthetic(count: usize) -> Self {
        Self { annotations: None, synth_count: count }
    }

    /// Samples at `size × size`. Annotated images are center-cropped and
    /// rejected records come back as diagnostics.
    pub fn load(&self, size: usize, seed: u64) -> Result<(Vec<Sample>, Vec<String>)> {
        match &self.annotations {
            Some(path) => {
                let load = load_annotations(path)?;
                log::info!("{}: {}", path.display(), load.summary());
                let samples = load.samples.iter().map(|s| center_crop_sample(s, size)).collect::<Result<_>>()?;
                Ok((samples, load.diagnostics))
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let samples = (0..self.synth_count)
                    .map(|_| synth_scene(&SceneParams::random(size, &mut rng)))
                    .collect::<Result<_>>()?;
                Ok((samples, Vec::new()))
            }
        }
    }
}

/// Creates `<out>/<timestamp>-seed<seed>`, suffixed when that already exists.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let base = format!("{}-seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%S"));
    fs::create_dir_all(out)?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_diagnostics(dir: &Path, diagnostics: &[String]) -> Result<()> {
    if diagnostics.is_empty() {
        return Ok(());
    }
    for d in diagnostics {
        log::warn!("{d}");
    }
    fs::write(dir.join(DIAGNOSTICS_FILE), diagnostics.join("\n") + "\n")?;
    Ok(())
}

fn missing_checkpoint(path: Option<&Path>) -> Result<Model> {
    match path {
        None => Err(Error::InvalidArgument("a checkpoint is required unless --oracle is given".into())),
        Some(p) if !p.exists() => Err(Error::Checkpoint(format!("{} does not exist", p.display()))),
        Some(p) => Model::load_checkpoint(p),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub data: DataSource,
    pub input_size: usize,
    pub width: f64,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            data: DataSource::synthetic(8),
            input_size: 64,
            width: 0.5,
            train: TrainConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub mean_iou: Option<f64>,
}

/// Trains from the seed and writes the checkpoint, the per-step loss curve and
/// a summary. When the loss diverges the last good parameters are still saved
/// before the error is returned.
pub fn cmd_train(opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.train.validate()?;
    let config = ModelConfig { input_size: opts.input_size, width_multiplier: opts.width, ..Default::default() };
    config.validate()?;
    let seed = opts.train.seed;
    let (samples, diagnostics) = opts.data.load(opts.input_size, seed)?;
    let mut model = Model::new(config, seed)?;
    let dir = create_run_dir(&opts.out, seed)?;
    write_diagnostics(&dir, &diagnostics)?;
    let mut curve = format!("{LOSS_CURVE_HEADER}\n");
    let result = train(&mut model, &samples, &opts.train, |s| {
        curve.push_str(&s.csv_row());
        curve.push('\n');
        if s.step % 10 == 0 {
            log::info!("step {} lr {:.6} loss {:.6}", s.step, s.lr, s.total);
        }
    });
    fs::write(dir.join(LOSS_CURVE_FILE), &curve)?;
    model.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
    let logs = result?;

    let first = logs.first().map(|s| s.total);
    let last = logs.last().map(|s| s.total);
    let mean_iou = if samples.is_empty() { None } else { mean_best_iou(&detect_all(&model, &samples, 0.25, 0.45)?, &samples) };
    let report = format_report(&[
        ("steps".into(), Some(logs.len() as f64)),
        ("samples".into(), Some(samples.len() as f64)),
        ("params".into(), Some(model.parameter_count() as f64)),
        ("first_loss".into(), first),
        ("final_loss".into(), last),
        ("loss_drop".into(), first.zip(last).map(|(a, b)| 1.0 - b / a)),
        ("train_mean_iou".into(), mean_iou),
    ]);
    fs::write(dir.join(TRAIN_REPORT_FILE), report)?;
    Ok(TrainOutcome { run_dir: dir, first_loss: first, final_loss: last, mean_iou })
}

/// Decoded detections for every sample, one forward pass per image.
pub fn detect_all(model: &Model, samples: &[Sample], conf: f64, nms_iou: f64) -> Result<Vec<Vec<DetectionBox>>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let raw = model.forward(&batch_tensor(std::slice::from_ref(&s.image))?)?;
        out.extend(model.decode_detections(&raw, conf, nms_iou)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub data: DataSource,
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself instead of running a model.
    pub oracle: bool,
    /// Image side when no checkpoint fixes it.
    pub input_size: usize,
    pub conf: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            data: DataSource::synthetic(20),
            checkpoint: None,
            oracle: false,
            input_size: 64,
            conf: 0.25,
            nms_iou: 0.45,
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

/// Per-class IoU, MIoU, mAP@0.5, mAP@0.5:0.95 and P/R/F1 at IoU 0.5.
pub fn evaluate(preds: &[Vec<DetectionBox>], masks: &[Vec<crate::geometry::BinaryMask>], samples: &[Sample]) -> Vec<(String, Option<f64>)> {
    let classes = Class::ALL.len();
    let gt_masks: Vec<_> = samples.iter().map(Sample::class_masks).collect();
    let gt_objects: Vec<_> = samples.iter().map(Sample::gt_objects).collect();
    let iou = iou_miou(masks, &gt_masks, classes);
    let map = bbox_map(preds, &gt_objects, classes, &MatchConfig::default());
    let p = prf1(preds, &gt_objects, classes, 0.5);
    let mut entries = vec![("images".to_string(), Some(samples.len() as f64))];
    for c in Class::ALL {
        entries.push((format!("iou_{}", c.name()), iou.per_class[c.index()]));
    }
    entries.extend([
        ("miou".to_string(), iou.miou),
        ("map50".to_string(), map.map_at(0.5)),
        ("map50_95".to_string(), map.map50_95),
        ("precision".to_string(), p.precision),
        ("recall".to_string(), p.recall),
        ("f1".to_string(), p.f1),
    ]);
    entries
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<PathBuf> {
    let model = if opts.oracle { None } else { Some(missing_checkpoint(opts.checkpoint.as_deref())?) };
    let size = model.as_ref().map_or(opts.input_size, |m| m.config.input_size);
    let (samples, diagnostics) = opts.data.load(size, opts.seed)?;
    let (preds, masks) = match &model {
        None => (
            samples.iter().map(|s| s.oracle_observation(0.0).detections).collect::<Vec<_>>(),
            samples.iter().map(Sample::class_masks).collect::<Vec<_>>(),
        ),
        Some(m) => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut masks = Vec::with_capacity(samples.len());
            for s in &samples {
                let raw = m.forward(&batch_tensor(std::slice::from_ref(&s.image))?)?;
                preds.extend(m.decode_detections(&raw, opts.conf, opts.nms_iou)?);
                masks.push(m.class_masks(&raw, 0)?);
            }
            (preds, masks)
        }
    };
    let dir = create_run_dir(&opts.out, opts.seed)?;
    write_diagnostics(&dir, &diagnostics)?;
    fs::write(dir.join(EVAL_REPORT_FILE), format_report(&evaluate(&preds, &masks, &samples)))?;
    Ok(dir)
}

/// Inference time per processed frame in a replay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReplayLatency {
    Fixed(f64),
    Measured,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOptions {
    /// An episode file or a directory of them.
    pub episodes: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub oracle: bool,
    /// Overrides each episode's own threshold.
    pub delta: Option<f64>,
    pub conf: f64,
    pub nms_iou: f64,
    pub latency: ReplayLatency,
    pub overlays: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            episodes: PathBuf::from("episodes"),
            checkpoint: None,
            oracle: false,
            delta: None,
            conf: 0.25,
            nms_iou: 0.45,
            latency: ReplayLatency::Fixed(0.0),
            overlays: false,
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub run_dir: PathBuf,
    pub outcomes: Vec<EpisodeOutcome>,
    /// Processed frames whose decision matched the episode's flag, and all processed frames.
    pub agreeing_frames: usize,
    pub processed_frames: usize,
    pub skipped_files: usize,
}

/// Episode files in name order.
pub fn episode_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "episode"))
        .collect();
    files.sort();
    Ok(files)
}

fn model_observation(model: &Model, sample: &Sample, conf: f64, nms_iou: f64) -> Result<SceneObservation> {
    let s = model.config.input_size;
    let sample = center_crop_sample(sample, s)?;
    let raw = model.forward(&batch_tensor(std::slice::from_ref(&sample.image))?)?;
    let detections = model.decode_detections(&raw, conf, nms_iou)?.remove(0);
    let masks = model.decode_masks(&raw, 0, &detections)?;
    Ok(SceneObservation { detections, masks, timestamp: 0.0, center: (s as f64 / 2.0, s as f64 / 2.0) })
}

/// Best nest point in view, else best QR point.
fn observed_target(obs: &SceneObservation) -> Option<(f64, f64)> {
    [Class::Nest, Class::QrCode].into_iter().find_map(|c| {
        obs.detections
            .iter()
            .filter(|d| d.class == c)
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .map(|d| d.bbox.center())
    })
}

fn draw_crosshair(img: &mut RgbImage, (x, y): (f64, f64), arm: i64, color: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -arm..=arm {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Replays every episode through the warning engine and writes per-episode
/// alerts, the episode table and the AWD / ACC / FPR summary. Unreadable
/// episode files are skipped and listed as diagnostics.
pub fn cmd_replay(opts: &ReplayOptions) -> Result<ReplayOutcome> {
    let model = if opts.oracle { None } else { Some(missing_checkpoint(opts.checkpoint.as_deref())?) };
    if let Some(d) = opts.delta {
        DeviationPolicy::new(d)?;
    }
    let latency = match opts.latency {
        ReplayLatency::Fixed(k) if k >= 0.0 && k.is_finite() => Latency::Fixed(k),
        ReplayLatency::Fixed(k) => return Err(Error::InvalidArgument(format!("latency must be non-negative, got {k}"))),
        ReplayLatency::Measured => Latency::Measured,
    };
    let files = episode_files(&opts.episodes)?;
    let dir = create_run_dir(&opts.out, opts.seed)?;
    let alerts_dir = dir.join("alerts");
    fs::create_dir_all(&alerts_dir)?;
    let mut diagnostics = Vec::new();
    let mut outcomes = Vec::new();
    let mut extra = Vec::new();
    let (mut agreeing, mut processed) = (0, 0);

    for file in &files {
        let episode = match Episode::load(file) {
            Ok(e) => e,
            Err(e) => {
                diagnostics.push(format!("{}: skipped: {e}", file.display()));
                continue;
            }
        };
        let policy = DeviationPolicy::new(opts.delta.unwrap_or(episode.delta))?;
        let mut errors = 0;
        let mut observations: Vec<Option<SceneObservation>> = vec![None; episode.frames.len()];
        let run = run_episode(&episode.timestamps(), latency, &policy, |i| {
            let obs = episode.render(i).and_then(|sample| match &model {
                None => Ok(sample.oracle_observation(0.0)),
                Some(m) => model_observation(m, &sample, opts.conf, opts.nms_iou),
            });
            let obs = obs.unwrap_or_else(|e| {
                errors += 1;
                diagnostics.push(format!("{} frame {i}: {e}", episode.id));
                SceneObservation::default()
            });
            if opts.overlays {
                observations[i] = Some(obs.clone());
            }
            Ok(obs)
        })?;
        let mut alerts = Vec::new();
        crate::warning::write_alerts(&mut alerts, &run.events)?;
        fs::write(alerts_dir.join(format!("{}.csv", episode.id)), alerts)?;
        for (t, e) in run.timing.iter().zip(&run.events) {
            processed += 1;
            agreeing += (e.deviating == episode.frames[t.frame].deviating) as usize;
        }
        if opts.overlays {
            let frame = run.timing.iter().zip(&run.events).find(|(_, e)| e.deviating).map_or(0, |(t, _)| t.frame);
            if let Ok(sample) = episode.render(frame) {
                let mut img = sample.image;
                let c = (img.width() as f64 / 2.0, img.height() as f64 / 2.0);
                draw_crosshair(&mut img, c, 3, Rgb([255, 0, 0]));
                if let Some(target) = observations[frame].as_ref().and_then(observed_target) {
                    draw_crosshair(&mut img, target, 6, Rgb([0, 255, 0]));
                }
                img.save(dir.join(format!("{}.png", episode.id))).map_err(|e| Error::Image(e.to_string()))?;
            }
        }
        outcomes.push(EpisodeOutcome { id: episode.id.clone(), onset: episode.onset(), warning: run.first_warning() });
        extra.push((run.timing.len(), errors));
    }

    let a = awd(&outcomes);
    let rates = warning_rates(&outcomes);
    let summary = format_report(&[
        ("episodes".into(), Some(outcomes.len() as f64)),
        ("skipped_files".into(), Some((files.len() - outcomes.len()) as f64)),
        ("awd".into(), a.value),
        ("awd_included".into(), Some(a.included as f64)),
        ("awd_excluded".into(), Some(a.excluded.len() as f64)),
        ("acc".into(), rates.acc),
        ("fpr".into(), rates.fpr),
        ("processed_frames".into(), Some(processed as f64)),
        ("frame_agreement".into(), (processed > 0).then(|| agreeing as f64 / processed as f64)),
    ]);
    fs::write(dir.join(REPLAY_SUMMARY_FILE), summary)?;
    fs::write(dir.join(EPISODE_TABLE_FILE), format_episode_table(&outcomes, &extra))?;
    write_diagnostics(&dir, &diagnostics)?;
    Ok(ReplayOutcome {
        run_dir: dir,
        skipped_files: files.len() - outcomes.len(),
        outcomes,
        agreeing_frames: agreeing,
        processed_frames: processed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectOptions {
    pub data: DataSource,
    pub input_size: usize,
    /// The first `initial` samples start out labeled.
    pub initial: usize,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            data: DataSource::synthetic(100),
            input_size: 64,
            initial: 1,
            count: 10,
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

/// Repeated farthest-point selection from the unlabeled samples, as
/// `(sample index, mean distance to the labeled set)` in selection order.
pub fn select_sequence(features: &[Vec<f64>], initial: usize, count: usize) -> Vec<(usize, f64)> {
    let mut labeled: Vec<usize> = (0..initial.min(features.len())).collect();
    let mut pool: Vec<usize> = (labeled.len()..features.len()).collect();
    let mut picks = Vec::new();
    while picks.len() < count {
        let lab: Vec<Vec<f64>> = labeled.iter().map(|&i| features[i].clone()).collect();
        let unl: Vec<Vec<f64>> = pool.iter().map(|&i| features[i].clone()).collect();
        let Some(k) = active_select(&lab, &unl) else { break };
        let chosen = pool.remove(k);
        let score = if lab.is_empty() {
            0.0
        } else {
            lab.iter()
                .map(|l| l.iter().zip(&features[chosen]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum::<f64>()
                / lab.len() as f64
        };
        labeled.push(chosen);
        picks.push((chosen, score));
    }
    picks
}

pub fn cmd_select(opts: &SelectOptions) -> Result<PathBuf> {
    let (samples, diagnostics) = opts.data.load(opts.input_size, opts.seed)?;
    let features: Vec<Vec<f64>> = samples.iter().map(|s| image_features(&s.image)).collect();
    let picks = select_sequence(&features, opts.initial, opts.count);
    let dir = create_run_dir(&opts.out, opts.seed)?;
    write_diagnostics(&dir, &diagnostics)?;
    let mut csv = String::from("rank,index,mean_distance\n");
    for (rank, (i, score)) in picks.iter().enumerate() {
        writeln!(csv, "{rank},{i},{score}").expect("string write");
    }
    fs::write(dir.join(SELECTION_FILE), csv)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub checkpoint: Option<PathBuf>,
    /// Model shape when no checkpoint is given.
    pub width: f64,
    pub input_size: usize,
    pub runs: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { checkpoint: None, width: 0.5, input_size: 640, runs: 3, seed: 0, out: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub params: usize,
    /// Convolution operations of one forward pass, two per multiply-add.
    pub flops: u64,
    pub fps: f64,
}

/// Parameter count, convolution FLOPs and single-image forward throughput.
/// Counts go to the report file, wall-clock figures to a separate timing file.
pub fn cmd_bench(opts: &BenchOptions) -> Result<(PathBuf, BenchReport)> {
    let model = match &opts.checkpoint {
        Some(p) => missing_checkpoint(Some(p))?,
        None => Model::new(
            ModelConfig { input_size: opts.input_size, width_multiplier: opts.width, ..Default::default() },
            opts.seed,
        )?,
    };
    let s = model.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inputs: Vec<Tensor> = (0..opts.runs.max(1)).map(|_| Tensor::rand_uniform(&[1, 3, s, s], 0.0, 1.0, &mut rng)).collect();
    let (first, ops) = flops::measure(|| model.forward(&inputs[0]));
    first?;
    let start = Instant::now();
    for x in &inputs {
        model.forward(x)?;
    }
    let fps = inputs.len() as f64 / start.elapsed().as_secs_f64();
    let report = BenchReport { params: model.parameter_count(), flops: ops, fps };
    let dir = create_run_dir(&opts.out, opts.seed)?;
    fs::write(
        dir.join(BENCH_REPORT_FILE),
        format_report(&[
            ("input_size".into(), Some(s as f64)),
            ("width".into(), Some(model.config.width_multiplier)),
            ("params".into(), Some(report.params as f64)),
            ("conv_flops".into(), Some(ops as f64)),
            ("conv_gflops".into(), Some(ops as f64 / 1e9)),
        ]),
    )?;
    fs::write(
        dir.join(BENCH_TIMING_FILE),
        format_report(&[
            ("runs".into(), Some(inputs.len() as f64)),
            ("threads".into(), Some(1.0)),
            ("fps_single_thread".into(), Some(fps)),
            ("fps_max_threads".into(), Some(fps)),
        ]),
    )?;
    Ok((dir, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_distinct() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), 7).unwrap();
        let b = create_run_dir(tmp.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_str().unwrap().contains("-seed7"));
    }

    #[test]
    fn zero_iterations_checkpoint_is_initialization() {
        let tmp = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            data: DataSource::synthetic(2),
            input_size: 32,
            width: 0.0625,
            train: TrainConfig { iters: 0, seed: 3, ..Default::default() },
            out: tmp.path().to_path_buf(),
        };
        let run = cmd_train(&opts).unwrap();
        let saved = fs::read(run.run_dir.join(CHECKPOINT_FILE)).unwrap();
        let init = Model::new(ModelConfig { input_size: 32, width_multiplier: 0.0625, ..Default::default() }, 3).unwrap();
        assert_eq!(saved, init.to_bytes());
        assert_eq!(fs::read_to_string(run.run_dir.join(LOSS_CURVE_FILE)).unwrap(), format!("{LOSS_CURVE_HEADER}\n"));
        assert!(fs::read_to_string(run.run_dir.join(TRAIN_REPORT_FILE)).unwrap().contains("first_loss=absent"));
    }

    #[test]
    fn oracle_eval_is_maximal_and_empty_is_absent() {
        let tmp = tempfile::tempdir().unwrap();
        let opts = EvalOptions { oracle: true, out: tmp.path().to_path_buf(), ..Default::default() };
        let text = fs::read_to_string(cmd_eval(&opts).unwrap().join(EVAL_REPORT_FILE)).unwrap();
        for key in ["miou", "map50", "map50_95", "precision", "recall", "f1"] {
            assert!(text.contains(&format!("{key}=1\n")), "{key} in {text}");
        }
        let empty = EvalOptions { data: DataSource::synthetic(0), ..opts };
        let text = fs::read_to_string(cmd_eval(&empty).unwrap().join(EVAL_REPORT_FILE)).unwrap();
        assert!(text.contains("miou=absent") && text.contains("map50=absent") && text.contains("f1=absent"));
    }

    #[test]
    fn eval_without_checkpoint_fails() {
        let tmp = tempfile::tempdir().unwrap();
        let opts = EvalOptions { checkpoint: Some(tmp.path().join("nope.amdn")), out: tmp.path().into(), ..Default::default() };
        assert!(matches!(cmd_eval(&opts), Err(Error::Checkpoint(_))));
        assert!(cmd_eval(&EvalOptions { out: tmp.path().into(), ..Default::default() }).is_err());
    }

    #[test]
    fn replay_skips_malformed_and_handles_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let eps = tmp.path().join("eps");
        fs::create_dir(&eps).unwrap();
        let out = tmp.path().join("out");
        let opts = ReplayOptions { episodes: eps.clone(), oracle: true, out: out.clone(), ..Default::default() };
        let r = cmd_replay(&opts).unwrap();
        assert!(r.outcomes.is_empty());
        let summary = fs::read_to_string(r.run_dir.join(REPLAY_SUMMARY_FILE)).unwrap();
        assert!(summary.contains("episodes=0") && summary.contains("awd=absent"));

        fs::write(eps.join("bad.episode"), "not an episode\n").unwrap();
        let ep = crate::data::synth_episode(&crate::data::EpisodeParams { frames: 5, ..Default::default() }).unwrap();
        ep.save(&eps.join("good.episode")).unwrap();
        let r = cmd_replay(&ReplayOptions { overlays: true, ..opts }).unwrap();
        assert_eq!((r.outcomes.len(), r.skipped_files), (1, 1));
        assert!(fs::read_to_string(r.run_dir.join(DIAGNOSTICS_FILE)).unwrap().contains("bad.episode"));
        assert!(r.run_dir.join("episode.png").exists());
        assert_eq!(r.agreeing_frames, r.processed_frames);
    }

    #[test]
    fn selection_sequence_is_farthest_first() {
        let f = vec![vec![0.0], vec![1.0], vec![5.0], vec![-3.0]];
        let picks = select_sequence(&f, 1, 3);
        assert_eq!(picks.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 3, 1]);
        assert_eq!(picks[0].1, 5.0);
        assert_eq!(picks[1].1, 5.5);
    }

    #[test]
    fn bench_counts_are_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let opts = BenchOptions { width: 0.0625, input_size: 64, runs: 1, out: tmp.path().into(), ..Default::default() };
        let (d1, a) = cmd_bench(&opts).unwrap();
        let (d2, b) = cmd_bench(&opts).unwrap();
        assert_eq!((a.params, a.flops), (b.params, b.flops));
        assert_eq!(fs::read(d1.join(BENCH_REPORT_FILE)).unwrap(), fs::read(d2.join(BENCH_REPORT_FILE)).unwrap());
        let big = cmd_bench(&BenchOptions { input_size: 128, ..opts }).unwrap().1;
        let ratio = big.flops as f64 / a.flops as f64;
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }
}
