// temporary diagnostic - not part of the suite
use clel_core::config::RunConfig;
use clel_core::data;
use clel_core::evaluation::{aggregate_latents, conditional_sample, nearest_mode_fractions, to_f64};
use clel_core::rng::{domain, stream};
use clel_core::sgld::{SgldConfig, UniformInit};
use clel_core::trainer::load_models_for_eval;
use ndarray::Array2;
use std::path::Path;

#[test]
#[ignore]
fn purity_grid() {
    let ckpt_path = std::env::var("CKPT").unwrap();
    let ckpt = Path::new(&ckpt_path);
    let cfg = RunConfig::load(&ckpt.join("config.txt")).unwrap();
    let (_, ema, encoder) = load_models_for_eval(ckpt, &cfg).unwrap();
    let spec = cfg.dataset_spec();
    let policy = cfg.encoder_policy(None);

    let zbar = |mode: usize| {
        let mut ref_rng = stream(11, domain::EVAL, 700, mode as u64);
        let refs: Array2<f32> = data::generate_mode(&spec, mode, 64, &mut ref_rng).unwrap();
        let mut lat_rng = stream(11, domain::EVAL, 800, mode as u64);
        let mut lats = Vec::new();
        for row in refs.rows() {
            lats.push(encoder.sample_latent(&policy, row, &mut lat_rng).unwrap());
        }
        aggregate_latents(&lats).unwrap()
    };

    for (lambda, eps, steps) in [
        (0.5, 0.05, 600usize),
        (2.0, 0.05, 600),
        (5.0, 0.05, 600),
        (0.5, 0.01, 600),
        (2.0, 0.01, 600),
        (0.5, 0.05, 3000),
        (2.0, 0.05, 3000),
        (2.0, 0.1, 3000),
    ] {
        let scfg = SgldConfig {
            step_count: steps,
            grad_coeff: lambda,
            noise_scale: eps,
            clamp: Some((cfg.clamp_lo, cfg.clamp_hi)),
            aug_period: steps,
        };
        let init = UniformInit {
            lo: cfg.clamp_lo,
            hi: cfg.clamp_hi,
            dim: 2,
        };
        let mut ps = Vec::new();
        for mode in [0usize, 2, 5] {
            let z = zbar(mode);
            let mut rng = stream(12, domain::EVAL, 900 + mode as u64, 0);
            let samples = conditional_sample(&ema, &z, &scfg, &init, 300, &mut rng).unwrap();
            let fr = nearest_mode_fractions(to_f64(&samples).view(), &spec.mode_centers().unwrap());
            ps.push((fr[mode] * 100.0).round());
        }
        println!("lambda={lambda} eps={eps} steps={steps}: purity% {:?}", ps);
    }
}
