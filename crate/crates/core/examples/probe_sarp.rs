//! Scratch probe: fixture-scale training, SARP direction, identity floor.
use firstframe_core::edm::NoiseSchedule;
use firstframe_core::sarp::{sarp_report, PerturbMode, SarpConfig};
use firstframe_core::synth::{background_fraction, render, random_video};
use firstframe_core::train::{train_base, BaseTrainConfig};
use firstframe_tensor::RngStream;

fn main() {
    let t0 = std::time::Instant::now();
    let mut cfg = BaseTrainConfig::mini16();
    cfg.seed = 11;
    cfg.codec_steps = 2500;
    cfg.model_steps = 2000;
    let base = train_base(&cfg).unwrap();
    println!("train took {:.1}s, recon_bound {:.4}, sigma_data {:.3}", t0.elapsed().as_secs_f64(), base.codec.recon_bound, base.model.cfg.sigma_data);

    let schedule = NoiseSchedule::default_schedule();
    for res in [16usize, 32] {
        let mut wins = 0;
        let mut ratios = Vec::new();
        let mut rng = RngStream::from_seed(500 + res as u64);
        for trial in 0..6u64 {
            let vc = loop {
                let c = random_video(&mut rng, res, res, 8);
                let v = render(&c);
                if background_fraction(&v) >= 0.6 { break v; }
            };
            let scfg = SarpConfig { seed: 1000 + trial, ..Default::default() };
            let report = sarp_report(&vc.frames, 8, &base.model, &base.codec, &schedule, &scfg,
                &[PerturbMode::Off, PerturbMode::Smooth]).unwrap();
            let off = report.lines[0].a_squared;
            let smooth = report.lines[1].a_squared;
            println!("res {res} trial {trial}: off {off:.2} smooth {smooth:.2}");
            if smooth < off { wins += 1; }
            ratios.push(smooth / off);
        }
        ratios.sort_by(f64::total_cmp);
        println!("res {res}: wins {wins}/6, median ratio {:.3}", ratios[3]);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
