//! Scratch probe: train mini base, measure inversion round trips.
use firstframe_core::codec::LatentSeq;
use firstframe_core::edm::{build_schedule, denoise, invert, make_conditioning, NoStepObserver};
use firstframe_core::media::{clip_frames, segment_clips};
use firstframe_core::train::{train_base, BaseTrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let mut cfg = BaseTrainConfig::mini16();
    cfg.seed = 11;
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 { cfg.model_steps = args[1].parse().unwrap(); }
    if args.len() > 2 { cfg.codec_steps = args[2].parse().unwrap(); }
    let base = train_base(&cfg).unwrap();
    println!("train took {:.1}s", t0.elapsed().as_secs_f64());
    println!("codec loss head/tail: {:.5} {:.5}", base.codec_losses[5], base.codec_losses.last().unwrap());
    let n = base.model_losses.len();
    let head: f64 = base.model_losses[..50.min(n)].iter().sum::<f64>() / 50f64.min(n as f64);
    let tail: f64 = base.model_losses[n - 50.min(n)..].iter().sum::<f64>() / 50f64.min(n as f64);
    println!("model loss mean head/tail: {:.5} {:.5}", head, tail);
    println!("codec recon_bound {:.4} latent_bound {:.4}", base.codec.recon_bound, base.codec.latent_bound);

    // Round trip on a fresh video.
    let video = &base.corpus[0];
    let plan = segment_clips(video.frames.len(), cfg.clip_length).unwrap();
    let clip = clip_frames(&video.frames, &plan, 0);
    let z0 = base.codec.encode(&clip).unwrap();
    let cond = make_conditioning(&base.codec, &clip.frames[0], 0.02, 5, "probe").unwrap();
    for steps in [10usize, 25, 50] {
        let sch = build_schedule(steps, 0.002, 80.0, 7.0).unwrap();
        let t1 = std::time::Instant::now();
        let z_t = invert(&base.model, &z0, &cond, &sch, None, &mut NoStepObserver).unwrap();
        let z_back = denoise(&base.model, &z_t, &cond, &sch, None, &mut NoStepObserver).unwrap();
        let rel = z_back.data.rel_l2(&z0.data);
        println!("S={steps}: rel L2 {:.4}  zT max {:.1} ({:.2?})", rel, z_t.data.max_abs(), t1.elapsed());
        let _ = LatentSeq::<f32>::clean(z0.data.clone());
    }
}
