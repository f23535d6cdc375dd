//! End-to-end pipeline wiring on a quickly trained tiny base: artifact
//! determinism, auto-regressive chaining, manifest contents, and error
//! surfaces. Model quality does not matter here; the acceptance suite
//! covers the quantitative claims on a properly trained fixture.

use std::path::PathBuf;
use std::sync::OnceLock;

use firstframe_core::config::JobConfig;
use firstframe_core::media::{load_frame_dir, segment_clips, write_frame_dir};
use firstframe_core::pipeline::{
    appearance_refinement, coarse_motion_extraction, run_edit_job, EditJob, Workspace,
};
use firstframe_core::synth::{random_video, render};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;

fn quick_base() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let mut cfg = BaseTrainConfig::mini16();
        cfg.videos = 6;
        cfg.codec_steps = 120;
        cfg.model_steps = 40;
        cfg.seed = 404;
        let base = train_base(&cfg).expect("quick base trains");
        Workspace {
            codec: base.codec,
            model: base.model,
        }
    })
}

fn tmp(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join("ff_pipeline_tests").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn small_job_config(seed: u64) -> JobConfig {
    let mut cfg = JobConfig::default().with_seed(seed);
    cfg.edit.steps = 6;
    cfg.lora.steps = 4;
    cfg.lora.rank = 2;
    cfg
}

fn render_source(dir: &PathBuf, frames: usize, seed: u64) {
    let mut rng = RngStream::from_seed(seed);
    let video = render(&random_video(&mut rng, 16, 16, frames));
    write_frame_dir(&video.frames, dir).unwrap();
}

#[test]
fn two_clip_job_chains_and_is_deterministic() {
    let ws = quick_base();
    let src = tmp("det_src");
    render_source(&src, 15, 77); // 2 clips of length 8

    let frames = load_frame_dir(&src).unwrap();
    let plan = segment_clips(frames.len(), 8).unwrap();
    assert_eq!(plan.num_clips(), 2);

    let cfg = small_job_config(9);
    let motion = coarse_motion_extraction(ws, &frames, &plan, &cfg).unwrap();
    assert_eq!(motion.adapters.len(), 2);
    assert_eq!(
        motion.train_cache.len(),
        cfg.edit.steps * ws.model.temporal_sites().len()
    );

    let out = appearance_refinement(ws, &frames, &plan, &frames[0], &motion, &cfg).unwrap();
    assert_eq!(out.frames.len(), plan.total_frames);
    // Chaining: clip 2 is conditioned on clip 1's final generated frame.
    assert_eq!(out.cond_frames.len(), 2);
    assert_eq!(&out.cond_frames[0], &frames[0]);
    assert_eq!(
        &out.cond_frames[1],
        out.clip_frames[0].last().unwrap(),
        "clip 2 must be conditioned on clip 1's last output frame"
    );
    // Output assembly drops the duplicated boundary frame.
    assert_eq!(out.clip_frames[0].len() + out.clip_frames[1].len() - 1, plan.padded_frames);

    // Bitwise determinism across reruns.
    let motion2 = coarse_motion_extraction(ws, &frames, &plan, &cfg).unwrap();
    for (a, b) in motion.adapters.iter().zip(motion2.adapters.iter()) {
        assert_eq!(a.digest(), b.digest(), "adapter training must be bitwise repeatable");
    }
    assert_eq!(motion.train_cache.digest(), motion2.train_cache.digest());
    let out2 = appearance_refinement(ws, &frames, &plan, &frames[0], &motion2, &cfg).unwrap();
    for (a, b) in out.frames.iter().zip(out2.frames.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(out.infer_cache.digest(), out2.infer_cache.digest());
    assert_eq!(out.trace_digests, out2.trace_digests);
}

#[test]
fn single_clip_plan_has_no_cache_consumers() {
    let ws = quick_base();
    let src = tmp("single_src");
    render_source(&src, 8, 5);
    let frames = load_frame_dir(&src).unwrap();
    let plan = segment_clips(frames.len(), 8).unwrap();
    assert_eq!(plan.num_clips(), 1);
    let cfg = small_job_config(3);
    let motion = coarse_motion_extraction(ws, &frames, &plan, &cfg).unwrap();
    assert_eq!(motion.adapters.len(), 1);
    let out = appearance_refinement(ws, &frames, &plan, &frames[0], &motion, &cfg).unwrap();
    assert_eq!(out.frames.len(), 8);
}

#[test]
fn clip_training_losses_are_finite_and_recorded() {
    let ws = quick_base();
    let src = tmp("loss_src");
    render_source(&src, 15, 31);
    let frames = load_frame_dir(&src).unwrap();
    let plan = segment_clips(frames.len(), 8).unwrap();
    let cfg = small_job_config(1);
    let motion = coarse_motion_extraction(ws, &frames, &plan, &cfg).unwrap();
    for curve in &motion.loss_curves {
        assert_eq!(curve.len(), cfg.lora.steps);
        assert!(curve.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn edited_frame_dimension_mismatch_is_fatal() {
    let ws = quick_base();
    let src = tmp("dim_src");
    render_source(&src, 8, 13);
    let frames = load_frame_dir(&src).unwrap();
    let plan = segment_clips(frames.len(), 8).unwrap();
    let cfg = small_job_config(2);
    let motion = coarse_motion_extraction(ws, &frames, &plan, &cfg).unwrap();
    let wrong = firstframe_core::media::Frame::constant(8, 8, [0.0, 0.0, 0.0]);
    let got = appearance_refinement(ws, &frames, &plan, &wrong, &motion, &cfg);
    assert!(got.is_err());
}

#[test]
fn persisted_job_writes_manifest_and_artifacts() {
    let ws = quick_base();
    let src = tmp("job_src");
    render_source(&src, 15, 99);
    // The edited first frame: reuse the source's first frame file.
    let job = EditJob {
        source_dir: src.clone(),
        edited_frame: src.join("frame_000001.png"),
        output_dir: tmp("job_out"),
        artifacts_dir: tmp("job_artifacts"),
        clip_length: 8,
        config: small_job_config(21),
    };
    let summary = run_edit_job(ws, &job).unwrap();
    assert!(summary.manifest_path.exists());
    assert!(summary.train_cache_path.exists());
    assert!(summary.infer_cache_path.exists());
    assert_eq!(summary.adapter_paths.len(), 2);
    for p in &summary.adapter_paths {
        assert!(p.exists());
    }
    let manifest = std::fs::read_to_string(&summary.manifest_path).unwrap();
    assert!(manifest.contains("digest output_frames"));
    assert!(manifest.contains("clips 2"));
    let out_frames = load_frame_dir(&job.output_dir).unwrap();
    assert_eq!(out_frames.len(), 15);
}
