//! Command-line front end. Every command reads its inputs, runs one stage of
//! the pipeline and writes deterministic JSON, CSV, SVG or text outputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::diffusion::{checkpoint, frame_accuracy, infer, train, train::write_log_csv, LossConfig, StepPlan};
use crate::error::{Error, Result};
use crate::eval::{evaluate, execute_plan_file, PlanFile};
use crate::planning::{plan_episode, LabelTimeline};
use crate::render::{render_svg, render_text};
use crate::rng::RngSeed;
use crate::sim::gen_dataset;
use crate::types::{read_episode, split_dataset, Episode};

#[derive(Debug, Parser)]
#[command(name = "d2p", version, about = "Pick-and-place plans from a single demonstration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic demonstrations, one JSONL file per episode.
    GenDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 24)]
        per_object: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a segmentation model on the training split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated loss terms, e.g. `ce,ba,ts`.
        #[arg(long, default_value = "ce")]
        losses: String,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment one episode into hand-free and object-held frames.
    Segment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        /// `direct` or a number of evenly spaced steps.
        #[arg(long, default_value = "100")]
        steps: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse detections, ground keyframes and synthesize a plan.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve IK for a plan and execute it in the simulator.
    Execute {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy table over loss combinations plus execution rates.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory of per-combination checkpoints; missing ones are trained.
        #[arg(long)]
        model: PathBuf,
        /// JSON report; a text rendering is written next to it with `.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a predicted timeline, optionally under the ground truth.
    RenderTimeline {
        #[arg(long)]
        timeline: PathBuf,
        /// Timeline JSON or episode JSONL holding ground-truth labels.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// `.svg` for a vector image, anything else for text.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineFile {
    pub episode_id: String,
    pub steps: String,
    pub labels: LabelTimeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub per_object: usize,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Episodes of a dataset directory in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    paths.iter().map(|p| read_episode(p)).collect()
}

fn load_gt(path: &Path) -> Result<LabelTimeline> {
    if path.extension().is_some_and(|x| x == "jsonl") {
        let ep = read_episode(path)?;
        let labels = ep
            .gt_labels()
            .ok_or_else(|| Error::InvalidArgument(format!("episode {} has no ground-truth labels", ep.id)))?;
        Ok(LabelTimeline::new(labels))
    } else {
        Ok(read_json::<TimelineFile>(path)?.labels)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset {
            config,
            out_dir,
            per_object,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seeds.dataset);
            let episodes = gen_dataset(
                &cfg.objects,
                per_object,
                RngSeed(seed),
                &cfg.generator(),
                &cfg.camera()?,
                &cfg.table,
            )?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut entries = Vec::with_capacity(episodes.len());
            for ep in &episodes {
                let name = format!("{}.jsonl", ep.id);
                let mut bytes = Vec::new();
                ep.write_to(&mut bytes).map_err(|e| Error::io(&out_dir, e))?;
                write_bytes(&out_dir.join(&name), &bytes)?;
                entries.push(ManifestEntry {
                    file: name,
                    sha256: sha256_hex(&bytes),
                });
            }
            write_json(
                &out_dir.join(MANIFEST_FILE),
                &DatasetManifest {
                    seed,
                    per_object,
                    episodes: entries,
                },
            )
        }
        Command::Train {
            config,
            data,
            losses,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let terms = LossConfig::parse_terms(&losses)?;
            let loss = LossConfig {
                use_ba: terms.use_ba,
                use_ts: terms.use_ts,
                ..cfg.loss
            };
            let dataset = load_dataset(&data)?;
            let (train_set, _) = split_dataset(&dataset, cfg.train.train_fraction, RngSeed(cfg.seeds.split))?;
            let outcome = train(
                &train_set,
                &loss,
                &cfg.schedule()?,
                cfg.denoiser()?,
                &cfg.train.hyper(RngSeed(cfg.seeds.train)),
            )?;
            write_bytes(&out, &checkpoint::encode(&outcome.params, cfg.schedule.total_steps))?;
            let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            write_log_csv(&outcome.log, BufWriter::new(file)).map_err(|e| Error::io(&log_path, e))
        }
        Command::Segment {
            config,
            model,
            episode,
            steps,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (params, total_steps) = checkpoint::load(&model)?;
            let sched = crate::diffusion::NoiseSchedule::cosine(total_steps, cfg.schedule.scale)?;
            let plan = StepPlan::parse(&steps)?;
            let ep = read_episode(&episode)?;
            let seed = RngSeed(cfg.seeds.infer).derive(&ep.id);
            let labels = infer(&ep.feature_matrix().view(), &params, &sched, &plan.steps(&sched), seed)?;
            let accuracy = match ep.gt_labels() {
                Some(gt) => Some(frame_accuracy(&labels, &LabelTimeline::new(gt))?),
                None => None,
            };
            write_json(
                &out,
                &TimelineFile {
                    episode_id: ep.id.clone(),
                    steps: plan.name(),
                    labels,
                    frame_accuracy: accuracy,
                },
            )
        }
        Command::Plan {
            config,
            episode,
            timeline,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ep = read_episode(&episode)?;
            let tl: TimelineFile = read_json(&timeline)?;
            if tl.labels.len() != ep.frame_count {
                return Err(Error::Shape(format!(
                    "timeline has {} frames, episode {}",
                    tl.labels.len(),
                    ep.frame_count
                )));
            }
            let run = plan_episode(&ep, &tl.labels, &cfg.table, &cfg.vote, &cfg.planning);
            write_json(&out, &PlanFile::new(&ep, run.report)?)
        }
        Command::Execute { config, plan, out } => {
            let cfg = load_config(config.as_deref())?;
            let file: PlanFile = read_json(&plan)?;
            let seed = RngSeed(cfg.seeds.execute).derive(&file.episode_id);
            let result = execute_plan_file(&file, &cfg, &cfg.chain()?, seed)?;
            write_json(&out, &result)
        }
        Command::Eval {
            config,
            data,
            model,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = load_dataset(&data)?;
            let report = evaluate(&dataset, &cfg, &model)?;
            write_json(&out, &report)?;
            write_bytes(&out.with_extension("txt"), report.render_text().as_bytes())
        }
        Command::RenderTimeline { timeline, gt, out } => {
            let pred: TimelineFile = read_json(&timeline)?;
            let gt = gt.as_deref().map(load_gt).transpose()?;
            let text = if out.extension().is_some_and(|x| x == "svg") {
                render_svg(&pred.labels, gt.as_ref())?
            } else {
                render_text(&pred.labels, gt.as_ref())?
            };
            write_bytes(&out, text.as_bytes())
        }
    }
}

/// Exit status for a command result: 0 success, 3 domain failure, 2 otherwise.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_domain_failure() => 3,
        Err(_) => 2,
    }
}
