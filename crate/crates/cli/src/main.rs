//! Command-line entry points for the first-frame-guided video editor.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
//! accepts `--config` and `--seed`; all randomness flows from the explicit
//! root seed through labeled stream derivation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use firstframe_core::codec::Codec;
use firstframe_core::config::{load_config, JobConfig};
use firstframe_core::denoiser::Denoiser;
use firstframe_core::edm::{invert_traced, make_conditioning, trace_store_write, NoiseSchedule};
use firstframe_core::media::{clip_frames, load_frame_dir, segment_clips};
use firstframe_core::metrics::{temporal_consistency, trajectory_error};
use firstframe_core::pipeline::{coarse_motion_extraction, run_edit_job, EditJob, Workspace};
use firstframe_core::sarp::{sarp_report, PerturbMode};
use firstframe_core::synth::{background_fraction, random_video, render, write_video};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;

#[derive(Parser)]
#[command(name = "firstframe", disable_help_subcommand = true)]
#[command(about = "First-frame-guided video editing over a compact temporal denoiser")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Job configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic moving-shape video with ground truth.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Output frame directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 27)]
        frames: usize,
        /// Regenerate until the constant background covers this fraction.
        #[arg(long, default_value_t = 0.4)]
        min_background: f64,
    },
    /// One-time pre-training of the codec and base denoiser.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Directory for codec.bin and model.bin.
        #[arg(long)]
        out: PathBuf,
        /// Training profile: desk32 or mini16.
        #[arg(long, default_value = "desk32")]
        profile: String,
        #[arg(long)]
        codec_steps: Option<usize>,
        #[arg(long)]
        model_steps: Option<usize>,
    },
    /// Stage 1: train per-clip motion adapters for a source video.
    TrainMotion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        /// Directory holding codec.bin and model.bin.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for adapters and the training cache.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 14)]
        clip_length: usize,
    },
    /// Full edit: train adapters, then propagate the edited first frame.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        /// Edited first frame (a single image).
        #[arg(long)]
        edited_frame: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 14)]
        clip_length: usize,
    },
    /// Invert a source video clip by clip, storing attention traces.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        clip_length: usize,
    },
    /// Per-mode normality diagnostics on inverted latents.
    SarpReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated modes: off,smooth,non_smooth,latent.
        #[arg(long, default_value = "off,smooth")]
        mode: String,
        #[arg(long, default_value_t = 14)]
        clip_length: usize,
    },
    /// Deterministic metrics over a frame directory.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: PathBuf,
        /// Synthetic video directory with tracks.txt for trajectory error.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_job_config(common: &Common) -> Result<JobConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path).map_err(|e| Failure::Runtime(e.to_string()))?,
        None => JobConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn load_workspace(dir: &PathBuf) -> Result<Workspace, Failure> {
    let codec = Codec::load(&dir.join("codec.bin"))?;
    let model = Denoiser::load(&dir.join("model.bin"))?;
    Ok(Workspace { codec, model })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenSynth {
            common,
            out,
            width,
            height,
            frames,
            min_background,
        } => {
            let cfg = load_job_config(&common)?;
            let mut rng = RngStream::derive(cfg.edit.seed, "cli.gen-synth");
            let video = loop {
                let candidate = render(&random_video(&mut rng, width, height, frames));
                if background_fraction(&candidate) >= min_background {
                    break candidate;
                }
            };
            write_video(&video, &out)?;
            println!("wrote {} frames to {}", frames, out.display());
            Ok(())
        }
        Cmd::TrainBase {
            common,
            out,
            profile,
            codec_steps,
            model_steps,
        } => {
            let cfg = load_job_config(&common)?;
            let mut tc = match profile.as_str() {
                "desk32" => BaseTrainConfig::desk32(),
                "mini16" => BaseTrainConfig::mini16(),
                other => {
                    return Err(Failure::Usage(format!(
                        "unknown profile `{other}` (expected desk32 or mini16)"
                    )))
                }
            };
            tc.seed = cfg.edit.seed;
            if let Some(s) = codec_steps {
                tc.codec_steps = s;
            }
            if let Some(s) = model_steps {
                tc.model_steps = s;
            }
            let base = train_base(&tc)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
            base.codec.save(&out.join("codec.bin"))?;
            base.model.save(&out.join("model.bin"))?;
            println!(
                "trained base: codec loss {:.5}, model loss {:.5}, recon bound {:.4}",
                base.codec_losses.last().unwrap_or(&f64::NAN),
                base.model_losses.last().unwrap_or(&f64::NAN),
                base.codec.recon_bound
            );
            println!("saved codec.bin and model.bin under {}", out.display());
            Ok(())
        }
        Cmd::TrainMotion {
            common,
            source,
            model,
            artifacts,
            clip_length,
        } => {
            let cfg = load_job_config(&common)?;
            let ws = load_workspace(&model)?;
            let frames = load_frame_dir(&source)?;
            let plan = segment_clips(frames.len(), clip_length)?;
            let motion = coarse_motion_extraction(&ws, &frames, &plan, &cfg)?;
            std::fs::create_dir_all(&artifacts).map_err(|e| {
                Failure::Runtime(format!("cannot create {}: {e}", artifacts.display()))
            })?;
            for (ci, set) in motion.adapters.iter().enumerate() {
                set.save(&artifacts.join(format!("adapters_clip{:02}.bin", ci + 1)))?;
            }
            motion.train_cache.save(&artifacts.join("kv_train.bin"))?;
            for (ci, losses) in motion.loss_curves.iter().enumerate() {
                println!(
                    "clip {}: loss {:.5} -> {:.5} over {} steps",
                    ci + 1,
                    losses.first().unwrap_or(&f64::NAN),
                    losses.last().unwrap_or(&f64::NAN),
                    losses.len()
                );
            }
            Ok(())
        }
        Cmd::Edit {
            common,
            source,
            edited_frame,
            model,
            out,
            artifacts,
            clip_length,
        } => {
            if common.config.is_none() {
                return Err(Failure::Usage(
                    "edit requires --config <path> (see README for keys)".into(),
                ));
            }
            let cfg = load_job_config(&common)?;
            let ws = load_workspace(&model)?;
            let job = EditJob {
                source_dir: source,
                edited_frame,
                output_dir: out,
                artifacts_dir: artifacts,
                clip_length,
                config: cfg,
            };
            let summary = run_edit_job(&ws, &job)?;
            println!(
                "edited {} clips -> {} frames at {}",
                summary.plan.num_clips(),
                summary.plan.total_frames,
                summary.output_dir.display()
            );
            println!("manifest: {}", summary.manifest_path.display());
            Ok(())
        }
        Cmd::Invert {
            common,
            source,
            model,
            out,
            clip_length,
        } => {
            let cfg = load_job_config(&common)?;
            let ws = load_workspace(&model)?;
            let frames = load_frame_dir(&source)?;
            let plan = segment_clips(frames.len(), clip_length)?;
            let schedule = NoiseSchedule::with_steps(cfg.edit.steps)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
            for ci in 0..plan.num_clips() {
                let clip = clip_frames(&frames, &plan, ci);
                let z0 = ws.codec.encode(&clip)?;
                let cond = make_conditioning(
                    &ws.codec,
                    &clip.frames[0],
                    firstframe_core::edm::DEFAULT_SIGMA_COND,
                    cfg.edit.seed,
                    &format!("cli.invert.clip{ci}"),
                )?;
                let (_z_t, trace) = invert_traced(&ws.model, &z0, &cond, &schedule, None)?;
                let path = out.join(format!("trace_clip{:02}.bin", ci + 1));
                trace_store_write(&trace, &path)?;
                println!(
                    "clip {}: trace {} entries -> {}",
                    ci + 1,
                    trace.len(),
                    path.display()
                );
            }
            Ok(())
        }
        Cmd::SarpReport {
            common,
            source,
            model,
            mode,
            clip_length,
        } => {
            let cfg = load_job_config(&common)?;
            let ws = load_workspace(&model)?;
            let frames = load_frame_dir(&source)?;
            let modes: Vec<PerturbMode> = mode
                .split(',')
                .map(|m| {
                    PerturbMode::parse(m.trim())
                        .ok_or_else(|| Failure::Usage(format!("unknown sarp mode `{m}`")))
                })
                .collect::<Result<_, _>>()?;
            let mut sarp_cfg = cfg.sarp.clone();
            sarp_cfg.seed = cfg.edit.seed;
            for warning in sarp_cfg.warnings() {
                eprintln!("warning: {warning}");
            }
            let schedule = NoiseSchedule::with_steps(cfg.edit.steps)?;
            let report = sarp_report(
                &frames,
                clip_length,
                &ws.model,
                &ws.codec,
                &schedule,
                &sarp_cfg,
                &modes,
            )?;
            print!("{report}");
            Ok(())
        }
        Cmd::Metrics {
            common,
            frames,
            truth,
        } => {
            let cfg = load_job_config(&common)?;
            let seed = cfg.edit.seed;
            let loaded = load_frame_dir(&frames)?;
            let tc = temporal_consistency(&loaded, seed)?;
            println!("metric temporal_consistency {tc:.6}");
            if let Some(truth_dir) = truth {
                let (background, track) = firstframe_core::synth::read_tracks(&truth_dir)?;
                let err = trajectory_error(&loaded, &track, background, 0.25)?;
                println!("metric trajectory_error {err:.6}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
