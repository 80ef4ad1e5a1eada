use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use smokewatch_core::detector::checkpoint::{load_model, save_model};
use smokewatch_core::detector::training::{prepare_sample, train};
use smokewatch_core::evalharness::synth::{read_manifest, synth_corpus, write_corpus, SynthParams};
use smokewatch_core::evalharness::{
    confusion_counts, mean_detection_advantage, metrics, time_to_detect_report, DetectionDelay,
};
use smokewatch_core::{Detector, DetectorConfig, LabeledImage};
use smokewatch_service::worker::analyse_frame;
use smokewatch_service::{replay_file, ServiceConfig};

#[derive(Parser)]
#[command(name = "smokewatch", version, about = "Wildfire smoke detection and alerting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the polling, alerting and operator API service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild service state from an event log and print it.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Print the full state as JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Run a checkpoint on one image and print detections in image pixels.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_thresh: f64,
    },
    /// Train a detector on a manifest or a generated corpus.
    Train(TrainArgs),
    /// Image-level metrics for a checkpoint, or time-to-detect statistics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a synthetic smoke corpus with JSONL manifests.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 256)]
        height: u32,
        #[arg(long, default_value_t = 0.5)]
        positive_fraction: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL manifest of training images.
    #[arg(long, conflicts_with = "synth_seed")]
    manifest: Option<PathBuf>,
    /// Generate the training split in memory from this corpus seed instead.
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    synth_train: usize,
    /// Detector config as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Confusion counts and metrics of a checkpoint over a manifest.
    Images {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        #[arg(long)]
        json: bool,
    },
    /// Time-to-detect buckets from a JSON list of delays, optionally
    /// compared against human detection times for the same events.
    Delays {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        human: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config } => serve(&config),
        Command::Replay { log, json } => replay(&log, json),
        Command::Detect {
            image,
            checkpoint,
            score_thresh,
            nms_thresh,
        } => detect(&image, &checkpoint, score_thresh, nms_thresh),
        Command::Train(args) => train_cmd(args),
        Command::Eval(cmd) => eval(cmd),
        Command::Synth {
            seed,
            train,
            val,
            out,
            width,
            height,
            positive_fraction,
        } => {
            let params = SynthParams {
                width,
                height,
                positive_fraction,
                ..SynthParams::default()
            };
            let corpus = synth_corpus(seed, train, val, &params)?;
            write_corpus(&corpus, &out)?;
            println!(
                "wrote {} train and {} val images to {}",
                corpus.train.len(),
                corpus.val.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn serve(config: &Path) -> Result<()> {
    let config = ServiceConfig::load(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = smokewatch_service::start(config).await?;
        println!("listening on {}", handle.base_url());
        handle.run_until_ctrl_c().await;
        Ok(())
    })
}

fn replay(log: &Path, json: bool) -> Result<()> {
    let (state, records) = replay_file(log).with_context(|| format!("replaying {}", log.display()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&state)?);
        return Ok(());
    }
    let mut by_state: BTreeMap<&str, usize> = BTreeMap::new();
    for a in state.alerts.values() {
        *by_state.entry(a.state.as_str()).or_default() += 1;
    }
    println!("records    {}", records.len());
    println!("last seq   {}", state.last_seq);
    println!("alerts     {}", state.alerts.len());
    for (s, n) in by_state {
        println!("  {s:<22} {n}");
    }
    for (id, c) in &state.cameras {
        println!("camera {id}: {} frames, {} rejected, {:?}", c.frames, c.rejected, c.health);
    }
    Ok(())
}

fn detect(image: &Path, checkpoint: &Path, score: f64, nms: f64) -> Result<()> {
    let model = load_model(checkpoint)?;
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let analysis = analyse_frame(&model, &bytes, score, nms)?;
    println!("{}", serde_json::to_string_pretty(&analysis.detections)?);
    Ok(())
}

fn load_images(manifest: &Path) -> Result<Vec<LabeledImage>> {
    Ok(read_manifest(manifest)?.into_iter().map(|(_, img)| img).collect())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => DetectorConfig::default(),
    };
    let data = match (&args.manifest, args.synth_seed) {
        (Some(m), _) => load_images(m)?,
        (None, Some(seed)) => synth_corpus(seed, args.synth_train, 1, &SynthParams::default())?
            .train
            .into_iter()
            .map(|s| s.labeled)
            .collect(),
        (None, None) => bail!("give --manifest or --synth-seed"),
    };
    let mut model = Detector::<f32>::new(config)?;
    let start = Instant::now();
    let every = args.log_every.max(1);
    let report = train(&mut model, &data, args.steps, args.seed, |i, l| {
        if i % every == 0 || i + 1 == args.steps {
            eprintln!(
                "step {i:>5}  total {:.4}  cls {:.4}  reg {:.4}  ctr {:.4}  pos {}  {:.0}s",
                l.total,
                l.cls,
                l.reg,
                l.cen,
                l.n_pos,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_model(&model, &args.out)?;
    let head = report.mean_total(0, 50.min(args.steps));
    let tail = report.mean_total(args.steps.saturating_sub(100), args.steps);
    println!(
        "{}",
        serde_json::json!({
            "steps": args.steps,
            "images": data.len(),
            "loss_first": head,
            "loss_last": tail,
            "checkpoint": args.out,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct ImageReport {
    counts: smokewatch_core::ConfusionCounts,
    metrics: smokewatch_core::Metrics,
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Images {
            manifest,
            checkpoint,
            score_thresh,
            json,
        } => {
            let model = load_model(&checkpoint)?;
            let images = load_images(&manifest)?;
            let mut detections = Vec::with_capacity(images.len());
            for img in &images {
                let sample = prepare_sample(&model, img);
                detections.push(model.detect(&sample.image, score_thresh, model.config().nms_thresh)?);
            }
            let labels: Vec<bool> = images.iter().map(LabeledImage::is_smoke).collect();
            let counts = confusion_counts(&detections, &labels, score_thresh)?;
            let report = ImageReport {
                counts,
                metrics: metrics(&counts),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "tp {}  tn {}  fp {}  fn {}",
                    counts.tp, counts.tn, counts.fp, counts.fn_
                );
                print!("{}", report.metrics.table());
            }
        }
        EvalCommand::Delays { model, human, json } => {
            let read = |p: &Path| -> Result<Vec<DetectionDelay>> {
                Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
            };
            let model = read(&model)?;
            let report = time_to_detect_report(&model)?;
            let advantage = human.as_deref().map(read).transpose()?.map(|h| mean_detection_advantage(&model, &h));
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "time_to_detect": report,
                        "advantage": advantage,
                    }))?
                );
            } else {
                print!("{}", report.table());
                if let Some(a) = advantage {
                    match a.mean_seconds {
                        Some(s) => println!("mean advantage {s:.1} s over {} paired events", a.paired),
                        None => println!("no paired events"),
                    }
                    if a.unpaired > 0 {
                        println!("{} events without a pair", a.unpaired);
                    }
                }
            }
        }
    }
    Ok(())
}
