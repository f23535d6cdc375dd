//! Diagnostics: latent noise transfer, z_T sensitivity, alpha dose-response.
use firstframe_core::codec::Codec;
use firstframe_core::denoiser::Denoiser;
use firstframe_core::edm::{invert, make_conditioning, NoStepObserver, NoiseSchedule};
use firstframe_core::media::{clip_frames, segment_clips};
use firstframe_core::pipeline::Workspace;
use firstframe_core::sarp::{detect_smooth, perturb, sarp_report, PerturbMode, SarpConfig};
use firstframe_core::synth::{background_fraction, random_video, render};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;
use std::path::Path;

fn get_base(dir: &Path) -> Workspace {
    let cp = dir.join("codec.bin");
    let mp = dir.join("model.bin");
    if cp.exists() && mp.exists() {
        return Workspace { codec: Codec::load(&cp).unwrap(), model: Denoiser::load(&mp).unwrap() };
    }
    let mut cfg = BaseTrainConfig::mini16();
    cfg.seed = 11;
    cfg.codec_steps = 2500;
    cfg.model_steps = 2000;
    let base = train_base(&cfg).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    base.codec.save(&cp).unwrap();
    base.model.save(&mp).unwrap();
    Workspace { codec: base.codec, model: base.model }
}

fn main() {
    let ws = get_base(Path::new("/tmp/ffbase_mini"));
    let mut rng = RngStream::from_seed(532);
    let vc = loop {
        let c = random_video(&mut rng, 32, 32, 8);
        let v = render(&c);
        if background_fraction(&v) >= 0.7 { break v; }
    };
    let plan = segment_clips(8, 8).unwrap();
    let clip = clip_frames(&vc.frames, &plan, 0);
    let mask = detect_smooth(&clip, 0.001);
    println!("smooth fraction {:.3}", mask.smooth_fraction());

    let schedule = NoiseSchedule::default_schedule();
    let z0_clean = ws.codec.encode(&clip).unwrap();
    let cond = make_conditioning(&ws.codec, &clip.frames[0], 0.02, 1, "diag").unwrap();
    let zt_clean = invert(&ws.model, &z0_clean, &cond, &schedule, None, &mut NoStepObserver).unwrap();
    let std_clean = {
        let d = zt_clean.data.data();
        let m: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    };
    println!("z_T: max {:.1} std {:.2} n {}", zt_clean.data.max_abs(), std_clean, zt_clean.data.numel());

    for alpha in [0.005, 0.02, 0.05, 0.2] {
        let cfg = SarpConfig { alpha, seed: 7, ..Default::default() };
        let pert = perturb(&clip, &mask, &cfg).unwrap();
        let z0p = ws.codec.encode(&pert).unwrap();
        let dz = z0p.data.rel_l2(&z0_clean.data);
        let cond_p = make_conditioning(&ws.codec, &pert.frames[0], 0.02, 1, "diag").unwrap();
        let ztp = invert(&ws.model, &z0p, &cond_p, &schedule, None, &mut NoStepObserver).unwrap();
        let dzt = ztp.data.rel_l2(&zt_clean.data);
        println!("alpha {alpha}: |dz|/|z| {:.5}, |dzT|/|zT| {:.5}", dz, dzt);
    }

    // Dose-response of the statistic itself.
    for alpha in [0.005, 0.02, 0.05, 0.2] {
        let scfg = SarpConfig { alpha, seed: 900, ..Default::default() };
        let rep = sarp_report(&vc.frames, 8, &ws.model, &ws.codec, &schedule, &scfg,
            &[PerturbMode::Off, PerturbMode::Smooth, PerturbMode::NonSmooth, PerturbMode::Latent]).unwrap();
        print!("alpha {alpha}: ");
        for l in &rep.lines { print!("{}={:.2} ", l.mode.name(), l.a_squared); }
        println!();
    }
}
