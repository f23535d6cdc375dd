//! Does a better-trained score expose the smooth-area degeneracy?
use firstframe_core::codec::Codec;
use firstframe_core::denoiser::Denoiser;
use firstframe_core::edm::{invert, make_conditioning, NoStepObserver, NoiseSchedule};
use firstframe_core::media::{clip_frames, segment_clips};
use firstframe_core::pipeline::Workspace;
use firstframe_core::sarp::{detect_smooth, perturb, PerturbMode, SarpConfig, anderson_statistic};
use firstframe_core::synth::{background_fraction, random_eval_video, render};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;
use std::path::Path;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let dir = format!("/tmp/ffbase_mini_{steps}");
    let dir = Path::new(&dir);
    let ws = if dir.join("model.bin").exists() {
        Workspace { codec: Codec::load(&dir.join("codec.bin")).unwrap(), model: Denoiser::load(&dir.join("model.bin")).unwrap() }
    } else {
        let mut cfg = BaseTrainConfig::mini16();
        cfg.seed = 11;
        cfg.codec_steps = 2500;
        cfg.model_steps = steps;
        let t = std::time::Instant::now();
        let base = train_base(&cfg).unwrap();
        println!("trained {} steps in {:.0}s, final loss {:.5}", steps, t.elapsed().as_secs_f64(),
                 base.model_losses[steps.saturating_sub(50)..].iter().sum::<f64>() / 50.0);
        std::fs::create_dir_all(dir).unwrap();
        base.codec.save(&dir.join("codec.bin")).unwrap();
        base.model.save(&dir.join("model.bin")).unwrap();
        Workspace { codec: base.codec, model: base.model }
    };

    let schedule = NoiseSchedule::default_schedule();
    let mut rng = RngStream::from_seed(532);
    for trial in 0..4u64 {
        let vc = loop {
            let c = random_eval_video(&mut rng, 32, 32, 8);
            let v = render(&c);
            if background_fraction(&v) >= 0.6 { break v; }
        };
        let plan = segment_clips(8, 8).unwrap();
        let clip = clip_frames(&vc.frames, &plan, 0);
        let mask = detect_smooth(&clip, 0.001);

        let mut stats = Vec::new();
        for mode in [PerturbMode::Off, PerturbMode::Smooth] {
            let cfg = SarpConfig { mode, seed: 40 + trial, ..Default::default() };
            let pert = perturb(&clip, &mask, &cfg).unwrap();
            let z0 = ws.codec.encode(&pert).unwrap();
            let cond = make_conditioning(&ws.codec, &pert.frames[0], 0.02, 40 + trial, "pl").unwrap();
            let zt = invert(&ws.model, &z0, &cond, &schedule, None, &mut NoStepObserver).unwrap();
            let entries: Vec<f64> = zt.data.data().iter().map(|&v| v as f64 / 80.0).collect();
            let a2 = anderson_statistic(&entries).unwrap();

            // background-region spread: latent positions fully inside background
            let (lh, lw) = (8usize, 8usize);
            let mut bg_vals: Vec<f64> = Vec::new();
            for f in 0..8 {
                for c in 0..4usize {
                    for y in 0..lh {
                        for x in 0..lw {
                            // latent position maps to 4x4 pixel block; background if all pixels smooth in all frames
                            let mut all_bg = true;
                            'outer: for t in 0..8 {
                                for py in y*4..(y+1)*4 {
                                    for px in x*4..(x+1)*4 {
                                        if mask.get(t, py, px) == 0 { all_bg = false; break 'outer; }
                                    }
                                }
                            }
                            if all_bg {
                                let idx = ((f * 4 + c) * lh + y) * lw + x;
                                bg_vals.push(zt.data.data()[idx] as f64);
                            }
                        }
                    }
                }
            }
            let m = bg_vals.iter().sum::<f64>() / bg_vals.len() as f64;
            let sd = (bg_vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / bg_vals.len() as f64).sqrt();
            println!("trial {trial} {}: A2 {:.2}, bg entries {} std {:.3} (of overall ~80)", mode.name(), a2, bg_vals.len(), sd);
            stats.push(a2);
        }
        println!("trial {trial}: ratio {:.3}", stats[1] / stats[0]);
    }
}
