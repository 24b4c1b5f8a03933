// temporary diagnostic - not part of the suite
use clel_core::config::RunConfig;
use clel_core::data;
use clel_core::energy::unit_rows;
use clel_core::evaluation::{aggregate_latents, conditional_sample, nearest_mode_fractions, ood_eval, to_f64};
use clel_core::rng::{domain, stream};
use clel_core::sgld::UniformInit;
use clel_core::trainer::load_models_for_eval;
use ndarray::{Array2, Axis};
use std::path::Path;

#[test]
#[ignore]
fn summarize() {
    let ckpt_path = std::env::var("CKPT").unwrap();
    let ckpt = Path::new(&ckpt_path);
    let cfg = RunConfig::load(&ckpt.join("config.txt")).unwrap();
    let (_, ema, encoder) = load_models_for_eval(ckpt, &cfg).unwrap();
    let spec = cfg.dataset_spec();

    // OOD + alignment stats
    let mut held_rng = stream(9, domain::HELDOUT, 5, 0);
    let held: Array2<f32> = data::generate(&spec, 1500, &mut held_rng).unwrap();
    let mut ood_rng = stream(9, domain::EVAL, 6, 0);
    let ood: Array2<f32> = data::ood_counterpart(&spec, 1500, &mut ood_rng).unwrap();
    let rep = ood_eval(&ema, &encoder, &held, &ood).unwrap();
    let align = |set: &Array2<f32>| {
        let f = ema.forward_features(set).unwrap();
        let (u, _) = unit_rows(&f).unwrap();
        let (p, _) = ema.projector.forward_unit(&u).unwrap();
        let h = encoder.encode_batch(set).unwrap();
        let (hz, _) = unit_rows(&h).unwrap();
        let a = (&p * &hz).sum_axis(Axis(1));
        a.iter().sum::<f32>() / a.len() as f32
    };
    println!(
        "OOD: joint={:.4} marg={:.4} | align data={:.3} ood={:.3}",
        rep.auroc_joint, rep.auroc_marginal, align(&held), align(&ood)
    );

    // conditional purity for 3 modes, uniform starts vs centered starts
    let policy = cfg.encoder_policy(None);
    for (label, lo, hi) in [("uniform", cfg.clamp_lo, cfg.clamp_hi), ("center", -1.0, 1.0)] {
        let mut purities = Vec::new();
        for mode in [0usize, 2, 5] {
            let mut ref_rng = stream(11, domain::EVAL, 700, mode as u64);
            let refs: Array2<f32> = data::generate_mode(&spec, mode, 64, &mut ref_rng).unwrap();
            let mut lat_rng = stream(11, domain::EVAL, 800, mode as u64);
            let mut lats = Vec::new();
            for row in refs.rows() {
                lats.push(encoder.sample_latent(&policy, row, &mut lat_rng).unwrap());
            }
            let z = aggregate_latents(&lats).unwrap();
            let init = UniformInit { lo, hi, dim: 2 };
            let mut rng = stream(11, domain::EVAL, 900 + mode as u64, 0);
            let samples =
                conditional_sample(&ema, &z, &cfg.sgld_eval_config(), &init, 500, &mut rng).unwrap();
            let fr = nearest_mode_fractions(to_f64(&samples).view(), &spec.mode_centers().unwrap());
            purities.push(fr[mode]);
        }
        println!(
            "purity ({label} starts): {:?}",
            purities.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
