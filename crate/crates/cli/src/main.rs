use std::fs;
use std::path::PathBuf;

use aerolite::commands::{
    cmd_bench, cmd_eval, cmd_replay, cmd_select, cmd_train, BenchOptions, DataSource, EvalOptions, ReplayLatency,
    ReplayOptions, SelectOptions, TrainOptions, EVAL_REPORT_FILE, REPLAY_SUMMARY_FILE,
};
use aerolite::data::{scripted_episodes, synth_episode};
use aerolite::train::TrainConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aerolite", version, about = "UAV landing deviation warning with a multi-task detection and segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval(EvalArgs),
    /// Run the warning engine over episode files.
    Replay(ReplayArgs),
    /// Pick unlabeled images for annotation by farthest-point selection.
    Select(SelectArgs),
    /// Report parameter count, convolution FLOPs and frames per second.
    Bench(BenchArgs),
    /// Write a set of scripted synthetic episode files.
    Episodes(EpisodesArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Annotation JSON file; synthetic scenes are used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic scenes when no annotation file is given.
    #[arg(long)]
    synth: Option<usize>,
}

impl DataArgs {
    fn source(&self, default_count: usize) -> DataSource {
        DataSource { annotations: self.data.clone(), synth_count: self.synth.unwrap_or(default_count) }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Square input side; images are center-cropped to it.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.5)]
    width: f64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_floor: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.5)]
    flip: f64,
    #[arg(long, default_value_t = 0.0)]
    blend: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use ground-truth perception instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Image side for synthetic data when no checkpoint fixes it.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.45)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn parse_latency(s: &str) -> Result<ReplayLatency, String> {
    if s == "measured" {
        return Ok(ReplayLatency::Measured);
    }
    match s.parse::<f64>() {
        Ok(k) if k >= 0.0 && k.is_finite() => Ok(ReplayLatency::Fixed(k)),
        _ => Err(format!("expected seconds >= 0 or \"measured\", got {s:?}")),
    }
}

#[derive(Args)]
struct ReplayArgs {
    /// Episode file or directory of `.episode` files.
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
    /// Deviation threshold; defaults to each episode's own.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.45)]
    nms_iou: f64,
    /// Inference time per frame in seconds, or "measured" for wall clock.
    #[arg(long, default_value = "0", value_parser = parse_latency)]
    latency: ReplayLatency,
    /// Save the first warning frame of each episode with crosshairs.
    #[arg(long)]
    overlays: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// The first N images start out labeled.
    #[arg(long, default_value_t = 1)]
    initial: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    width: f64,
    #[arg(long, default_value_t = 640)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct EpisodesArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let opts = TrainOptions {
                data: a.data.source(8),
                input_size: a.size,
                width: a.width,
                train: TrainConfig {
                    lr: a.lr,
                    lr_floor: a.lr_floor,
                    weight_decay: a.weight_decay,
                    iters: a.iters,
                    batch_size: a.batch,
                    flip_prob: a.flip,
                    blend_prob: a.blend,
                    seed: a.seed,
                    ..Default::default()
                },
                out: a.out,
            };
            let run = cmd_train(&opts)?;
            println!("{}", run.run_dir.display());
            if let (Some(f), Some(l)) = (run.first_loss, run.final_loss) {
                println!("loss {f:.6} -> {l:.6}");
            }
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                data: a.data.source(20),
                checkpoint: a.checkpoint,
                oracle: a.oracle,
                input_size: a.size,
                conf: a.conf,
                nms_iou: a.nms_iou,
                seed: a.seed,
                out: a.out,
            };
            let dir = cmd_eval(&opts)?;
            println!("{}", dir.display());
            print!("{}", fs::read_to_string(dir.join(EVAL_REPORT_FILE))?);
        }
        Command::Replay(a) => {
            if !a.oracle && a.checkpoint.is_none() {
                bail!("replay needs --checkpoint or --oracle");
            }
            let opts = ReplayOptions {
                episodes: a.episodes,
                checkpoint: a.checkpoint,
                oracle: a.oracle,
                delta: a.delta,
                conf: a.conf,
                nms_iou: a.nms_iou,
                latency: a.latency,
                overlays: a.overlays,
                seed: a.seed,
                out: a.out,
            };
            let run = cmd_replay(&opts)?;
            println!("{}", run.run_dir.display());
            print!("{}", fs::read_to_string(run.run_dir.join(REPLAY_SUMMARY_FILE))?);
        }
        Command::Select(a) => {
            let opts = SelectOptions {
                data: a.data.source(100),
                input_size: a.size,
                initial: a.initial,
                count: a.count,
                seed: a.seed,
                out: a.out,
            };
            println!("{}", cmd_select(&opts)?.display());
        }
        Command::Bench(a) => {
            let opts = BenchOptions {
                checkpoint: a.checkpoint,
                width: a.width,
                input_size: a.size,
                runs: a.runs,
                seed: a.seed,
                out: a.out,
            };
            let (dir, r) = cmd_bench(&opts)?;
            println!("{}", dir.display());
            println!("params={} conv_gflops={:.3} fps={:.3}", r.params, r.flops as f64 / 1e9, r.fps);
        }
        Command::Episodes(a) => {
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            for mut p in scripted_episodes(a.count, a.seed) {
                p.frames = a.frames;
                let path = a.out.join(format!("{}.episode", p.id));
                synth_episode(&p)?.save(&path)?;
            }
            println!("{} episodes in {}", a.count, a.out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
