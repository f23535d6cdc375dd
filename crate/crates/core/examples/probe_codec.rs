//! Codec quality vs training steps, on texture-free eval clips.
use firstframe_core::codec::Codec;
use firstframe_core::media::{clip_frames, segment_clips};
use firstframe_core::synth::{random_eval_video, render};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;

fn main() {
    for steps in [2500usize, 6000, 10000] {
        let mut cfg = BaseTrainConfig::mini16();
        cfg.seed = 11;
        cfg.codec_steps = steps;
        cfg.model_steps = 0;
        let t = std::time::Instant::now();
        let base = train_base(&cfg).unwrap();
        let codec: Codec<f32> = base.codec;
        let mut rng = RngStream::from_seed(9001);
        let mut worst = 0.0f64;
        let mut mean = 0.0f64;
        for _ in 0..12 {
            let v = render(&random_eval_video(&mut rng, 16, 16, 8));
            let plan = segment_clips(8, 8).unwrap();
            let clip = clip_frames(&v.frames, &plan, 0);
            let z = codec.encode(&clip).unwrap();
            let back = codec.decode(&z).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in back.frames.iter().zip(clip.frames.iter()) {
                for (x, y) in a.data().iter().zip(b.data().iter()) {
                    num += ((x - y) as f64).powi(2);
                    den += (*y as f64).powi(2);
                }
            }
            let rel = (num / den).sqrt();
            worst = worst.max(rel);
            mean += rel / 12.0;
        }
        println!("steps {steps}: eval recon mean {mean:.4} worst {worst:.4} bound {:.4} ({:.0}s)", codec.recon_bound, t.elapsed().as_secs_f64());
    }
}
