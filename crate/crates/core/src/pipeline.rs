//! End-to-end orchestration: coarse motion extraction (per-clip adapter
//! training with skip-interval against clip 1's inversion cache) and
//! appearance refinement (per-clip perturb, invert, rectified denoise,
//! decode, auto-regressive chaining).

use std::fmt::Write as _;
use std::path::PathBuf;

use firstframe_tensor::derive_seed;

use crate::artifact::file_digest;
use crate::attn_match::make_controllers;
use crate::codec::Codec;
use crate::config::JobConfig;
use crate::denoiser::Denoiser;
use crate::edm::{
    denoise, invert, make_conditioning, AttentionTrace, MultiObserver, NoiseSchedule,
    SteppedObserver, TraceRecorder, DEFAULT_SIGMA_COND,
};
use crate::error::PipelineError;
use crate::lora::{train_motion_lora, AdapterSet, MotionTrainResult};
use crate::media::{clip_frames, segment_clips, ClipPlan, Frame};
use crate::sarp::{detect_smooth, perturb, perturb_latents, PerturbMode, SarpConfig};
use crate::skip::{KvCache, KvCapture, RunDirection, SkipStepInjector};

/// Frozen base model pair used by every job.
pub struct Workspace {
    pub codec: Codec<f32>,
    pub model: Denoiser<f32>,
}

/// An editing job: a source video, an edited first frame, and knobs.
#[derive(Debug, Clone)]
pub struct EditJob {
    pub source_dir: PathBuf,
    pub edited_frame: PathBuf,
    pub output_dir: PathBuf,
    pub artifacts_dir: PathBuf,
    pub clip_length: usize,
    pub config: JobConfig,
}

/// Stage-1 output: per-clip adapters plus the training-time cache captured
/// from clip 1's inversion.
pub struct MotionArtifacts {
    pub adapters: Vec<AdapterSet<f32>>,
    pub train_cache: KvCache<f32>,
    pub loss_curves: Vec<Vec<f64>>,
}

/// Stage-2 output: the edited frames plus inference-side artifacts.
pub struct EditOutput {
    pub frames: Vec<Frame>,
    pub clip_frames: Vec<Vec<Frame>>,
    /// The conditioning frame each clip was generated from (edited frame
    /// for clip 1, previous clip's final generated frame afterwards).
    pub cond_frames: Vec<Frame>,
    pub infer_cache: KvCache<f32>,
    pub trace_digests: Vec<u64>,
}

fn schedule_for(cfg: &JobConfig) -> Result<NoiseSchedule, PipelineError> {
    Ok(NoiseSchedule::with_steps(cfg.edit.steps)?)
}

/// Train per-clip motion adapters. Clip 1's source inversion provides the
/// skip-interval cache consumed by every later clip's training.
pub fn coarse_motion_extraction(
    ws: &Workspace,
    frames: &[Frame],
    plan: &ClipPlan,
    cfg: &JobConfig,
) -> Result<MotionArtifacts, PipelineError> {
    let schedule = schedule_for(cfg)?;
    let clip1 = clip_frames(frames, plan, 0);
    let z0 = ws.codec.encode(&clip1)?;
    let cond = make_conditioning(
        &ws.codec,
        &clip1.frames[0],
        DEFAULT_SIGMA_COND,
        cfg.lora.seed,
        "train.invert.clip1",
    )?;
    let mut capture = KvCapture::new(
        RunDirection::Inversion,
        schedule.sigmas().to_vec(),
        ws.model
            .temporal_sites()
            .into_iter()
            .map(|s| s.layer_id)
            .collect(),
    );
    let _z_t = invert(&ws.model, &z0, &cond, &schedule, None, &mut capture)?;
    let train_cache = capture.cache;
    train_cache.validate_complete()?;

    let mut adapters = Vec::with_capacity(plan.num_clips());
    let mut loss_curves = Vec::with_capacity(plan.num_clips());
    for ci in 0..plan.num_clips() {
        let clip = clip_frames(frames, plan, ci);
        let mut clip_cfg = cfg.lora.clone();
        clip_cfg.seed = derive_seed(cfg.lora.seed, &format!("lora.clip{ci}"));
        let skip = if ci == 0 || !cfg.lora.skip_interval_enabled {
            None
        } else {
            Some(&train_cache)
        };
        let MotionTrainResult { adapters: set, losses } =
            train_motion_lora(&clip, &ws.model, &ws.codec, &clip_cfg, skip)?;
        adapters.push(set);
        loss_curves.push(losses);
    }
    Ok(MotionArtifacts {
        adapters,
        train_cache,
        loss_curves,
    })
}

/// Generate the edited video: per clip, perturb + invert the source, then
/// denoise from the inverted latents conditioned on the edited frame (clip
/// 1) or the previous clip's final generated frame, with attention matching
/// and skip-interval against clip 1's denoising cache.
pub fn appearance_refinement(
    ws: &Workspace,
    frames: &[Frame],
    plan: &ClipPlan,
    edited_frame: &Frame,
    motion: &MotionArtifacts,
    cfg: &JobConfig,
) -> Result<EditOutput, PipelineError> {
    let first = &frames[0];
    if edited_frame.height != first.height || edited_frame.width != first.width {
        return Err(PipelineError::EditFrameDimensions {
            got_w: edited_frame.width,
            got_h: edited_frame.height,
            want_w: first.width,
            want_h: first.height,
        });
    }
    if motion.adapters.len() != plan.num_clips() {
        return Err(PipelineError::MissingAdapters(motion.adapters.len()));
    }
    let schedule = schedule_for(cfg)?;
    let seed = cfg.edit.seed;

    let mut out_frames: Vec<Frame> = Vec::with_capacity(plan.padded_frames);
    let mut per_clip: Vec<Vec<Frame>> = Vec::new();
    let mut trace_digests = Vec::new();
    let mut cond_frames = Vec::new();
    let mut infer_cache: Option<KvCache<f32>> = None;
    let mut chain_frame: Frame = edited_frame.clone();

    for ci in 0..plan.num_clips() {
        let src_clip = clip_frames(frames, plan, ci);

        // Appearance-side perturbation of the source before inversion.
        let mask = detect_smooth(&src_clip, cfg.sarp.gradient_threshold);
        let clip_sarp = SarpConfig {
            seed: derive_seed(cfg.sarp.seed, &format!("sarp.clip{ci}")),
            ..cfg.sarp.clone()
        };
        let perturbed = perturb(&src_clip, &mask, &clip_sarp)?;
        let mut z0_src = ws.codec.encode(&perturbed)?;
        if cfg.sarp.mode == PerturbMode::Latent {
            perturb_latents(&mut z0_src, cfg.sarp.latent_alpha, cfg.sarp.seed, &format!("clip{ci}"));
        }

        // Inversion under this clip's adapters, tracing self-attention.
        let cond_src = make_conditioning(
            &ws.codec,
            &perturbed.frames[0],
            DEFAULT_SIGMA_COND,
            seed,
            &format!("invert.clip{ci}"),
        )?;
        let adapters = &motion.adapters[ci];
        let mut recorder =
            TraceRecorder::for_model(&ws.model, RunDirection::Inversion, schedule.steps());
        // Clips after the first invert in skip-interval mode against the
        // training cache (the regime their adapters were trained in), so
        // temporal maps in the trace match the widened edit-run shapes.
        let mut train_injector = if ci > 0 && cfg.lora.skip_interval_enabled {
            Some(SkipStepInjector::new(&motion.train_cache, schedule.steps())?)
        } else {
            None
        };
        let z_t = {
            let mut layers: Vec<&mut dyn SteppedObserver<f32>> = vec![&mut recorder];
            if let Some(inj) = train_injector.as_mut() {
                layers.push(inj);
            }
            let mut stack = MultiObserver { layers };
            invert(
                &ws.model,
                &z0_src,
                &cond_src,
                &schedule,
                Some(adapters),
                &mut stack,
            )?
        };
        let src_trace: AttentionTrace<f32> = recorder.trace;
        trace_digests.push(src_trace.digest());

        // Edit-side denoise from the inverted latents.
        cond_frames.push(chain_frame.clone());
        let cond_edit = make_conditioning(
            &ws.codec,
            &chain_frame,
            DEFAULT_SIGMA_COND,
            seed,
            &format!("denoise.clip{ci}"),
        )?;
        let controller = if cfg.edit.matching_enabled {
            Some(make_controllers(
                &src_trace,
                &cfg.edit,
                schedule.steps(),
                &ws.model.attention_sites(),
            )?)
        } else {
            None
        };
        let mut capture = (ci == 0).then(|| {
            KvCapture::new(
                RunDirection::Denoising,
                schedule.sigmas().to_vec(),
                ws.model
                    .temporal_sites()
                    .into_iter()
                    .map(|s| s.layer_id)
                    .collect(),
            )
        });
        let mut injector = match (&infer_cache, ci) {
            (Some(cache), i) if i > 0 && cfg.lora.skip_interval_enabled => {
                Some(SkipStepInjector::new(cache, schedule.steps())?)
            }
            _ => None,
        };

        let mut layers: Vec<&mut dyn SteppedObserver<f32>> = Vec::new();
        let mut controller = controller;
        if let Some(c) = controller.as_mut() {
            layers.push(c);
        }
        if let Some(inj) = injector.as_mut() {
            layers.push(inj);
        }
        if let Some(cap) = capture.as_mut() {
            layers.push(cap);
        }
        let mut stack = MultiObserver { layers };
        let z0_edit = denoise(
            &ws.model,
            &z_t,
            &cond_edit,
            &schedule,
            Some(adapters),
            &mut stack,
        )?;
        let decoded = ws.codec.decode(&z0_edit)?;
        let clip_out = decoded.frames;

        if let Some(cap) = capture {
            cap.cache.validate_complete()?;
            infer_cache = Some(cap.cache);
        }
        chain_frame = clip_out.last().expect("clips are non-empty").clone();

        let skip_first = usize::from(ci > 0);
        out_frames.extend(clip_out.iter().skip(skip_first).cloned());
        per_clip.push(clip_out);
    }

    out_frames.truncate(plan.total_frames);
    Ok(EditOutput {
        frames: out_frames,
        clip_frames: per_clip,
        cond_frames,
        infer_cache: infer_cache.expect("clip 1 always captures"),
        trace_digests,
    })
}

/// Summary of one persisted job, with artifact digests for resumability
/// and determinism checks.
pub struct JobSummary {
    pub plan: ClipPlan,
    pub adapter_paths: Vec<PathBuf>,
    pub train_cache_path: PathBuf,
    pub infer_cache_path: PathBuf,
    pub output_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub artifact_digests: Vec<(String, u64)>,
}

/// Run both stages of a job and persist every artifact.
pub fn run_edit_job(ws: &Workspace, job: &EditJob) -> Result<JobSummary, PipelineError> {
    let frames = crate::media::load_frame_dir(&job.source_dir)?;
    let edited = crate::media::load_frame_file(&job.edited_frame)?;
    let plan = segment_clips(frames.len(), job.clip_length)?;

    let motion = coarse_motion_extraction(ws, &frames, &plan, &job.config)?;
    let output = appearance_refinement(ws, &frames, &plan, &edited, &motion, &job.config)?;

    std::fs::create_dir_all(&job.artifacts_dir).map_err(|e| {
        PipelineError::Media(crate::error::MediaError::UnwritablePath {
            path: job.artifacts_dir.clone(),
            reason: e.to_string(),
        })
    })?;

    let mut digests: Vec<(String, u64)> = Vec::new();
    let mut adapter_paths = Vec::new();
    for (ci, set) in motion.adapters.iter().enumerate() {
        let p = job.artifacts_dir.join(format!("adapters_clip{:02}.bin", ci + 1));
        set.save(&p)?;
        digests.push((format!("adapters_clip{:02}", ci + 1), file_digest(&p)?));
        adapter_paths.push(p);
    }
    let train_cache_path = job.artifacts_dir.join("kv_train.bin");
    motion.train_cache.save(&train_cache_path)?;
    digests.push(("kv_train".into(), file_digest(&train_cache_path)?));

    let infer_cache_path = job.artifacts_dir.join("kv_infer.bin");
    output.infer_cache.save(&infer_cache_path)?;
    digests.push(("kv_infer".into(), file_digest(&infer_cache_path)?));

    crate::media::write_frame_dir_with_plan(&output.frames, &job.output_dir, Some(&plan))?;
    let out_digest = {
        let mut h: u64 = 0xCBF29CE484222325;
        for f in &output.frames {
            for &v in f.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001B3);
                }
            }
        }
        h
    };
    digests.push(("output_frames".into(), out_digest));
    for (i, d) in output.trace_digests.iter().enumerate() {
        digests.push((format!("src_trace_clip{:02}", i + 1), *d));
    }

    let manifest_path = job.artifacts_dir.join("job_manifest.txt");
    let manifest = render_manifest(job, &plan, &digests);
    std::fs::write(&manifest_path, manifest).map_err(|e| {
        PipelineError::Media(crate::error::MediaError::UnwritablePath {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })
    })?;

    Ok(JobSummary {
        plan,
        adapter_paths,
        train_cache_path,
        infer_cache_path,
        output_dir: job.output_dir.clone(),
        manifest_path,
        artifact_digests: digests,
    })
}

fn render_manifest(job: &EditJob, plan: &ClipPlan, digests: &[(String, u64)]) -> String {
    let cfg = &job.config;
    let mut s = String::new();
    let _ = writeln!(s, "# job manifest");
    let _ = writeln!(s, "source {}", job.source_dir.display());
    let _ = writeln!(s, "edited_frame {}", job.edited_frame.display());
    let _ = writeln!(s, "clip_length {}", job.clip_length);
    let _ = writeln!(
        s,
        "clips {} total_frames {} padded {}",
        plan.num_clips(),
        plan.total_frames,
        plan.padded_frames
    );
    let _ = writeln!(s, "thr {}", cfg.edit.thr);
    let _ = writeln!(s, "beta1 {}", cfg.edit.beta1);
    let _ = writeln!(s, "beta2 {}", cfg.edit.beta2);
    let _ = writeln!(s, "downscale_cutoff {}", cfg.edit.downscale_cutoff);
    let _ = writeln!(s, "preset {}", cfg.edit.preset.name());
    let _ = writeln!(s, "steps {}", cfg.edit.steps);
    let _ = writeln!(s, "seed {}", cfg.edit.seed);
    let _ = writeln!(s, "matching {}", if cfg.edit.matching_enabled { "on" } else { "off" });
    let _ = writeln!(s, "sarp.mode {}", cfg.sarp.mode.name());
    let _ = writeln!(s, "sarp.alpha {}", cfg.sarp.alpha);
    let _ = writeln!(s, "sarp.threshold {}", cfg.sarp.gradient_threshold);
    let _ = writeln!(s, "lora.rank {}", cfg.lora.rank);
    let _ = writeln!(s, "lora.steps {}", cfg.lora.steps);
    for (name, d) in digests {
        let _ = writeln!(s, "digest {name} {d:016x}");
    }
    s
}
