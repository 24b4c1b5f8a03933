// temporary diagnostic - not part of the suite
use clel_core::config::RunConfig;
use clel_core::data::{self, DatasetId};
use clel_core::energy::unit_rows;
use clel_core::rng::{domain, stream};
use clel_core::trainer::load_models_for_eval;
use ndarray::{Array2, Axis};
use std::path::Path;

#[test]
#[ignore]
fn diagnose() {
    let ckpt = Path::new("/tmp/exp_h/checkpoints/final");
    let cfg = RunConfig::load(&ckpt.join("config.txt")).unwrap();
    let (_, ema, encoder) = load_models_for_eval(ckpt, &cfg).unwrap();
    let spec = cfg.dataset_spec();

    // per-mode encoder latents (clean + augmented) and projector outputs
    let policy = cfg.encoder_policy(None);
    let mut centroids: Vec<ndarray::Array1<f32>> = Vec::new();
    for mode in 0..8 {
        let mut rng = stream(7, domain::EVAL, 100, mode as u64);
        let pts: Array2<f32> = data::generate_mode(&spec, mode as usize, 200, &mut rng).unwrap();
        let mut lat_rng = stream(7, domain::EVAL, 200, mode as u64);
        let mut zsum = ndarray::Array1::<f32>::zeros(cfg.d_z);
        for row in pts.rows() {
            let z = encoder.sample_latent(&policy, row, &mut lat_rng).unwrap();
            zsum += &z.view();
        }
        let n = zsum.dot(&zsum).sqrt();
        centroids.push(zsum.mapv(|v| v / n));
    }
    println!("encoder mode-centroid cosine matrix:");
    for a in 0..8 {
        let row: Vec<String> = (0..8)
            .map(|b| format!("{:+.2}", centroids[a].dot(&centroids[b])))
            .collect();
        println!("  {}", row.join(" "));
    }

    // within-mode latent dispersion: mean cos(z_i, centroid)
    for mode in [0usize, 3] {
        let mut rng = stream(8, domain::EVAL, 300, mode as u64);
        let pts: Array2<f32> = data::generate_mode(&spec, mode, 200, &mut rng).unwrap();
        let mut lat_rng = stream(8, domain::EVAL, 400, mode as u64);
        let mut acc = 0.0f32;
        for row in pts.rows() {
            let z = encoder.sample_latent(&policy, row, &mut lat_rng).unwrap();
            acc += z.view().dot(&centroids[mode]);
        }
        println!("mode {mode}: mean cos(z, centroid) = {:.3}", acc / 200.0);
    }

    // projector alignment with encoder latents: data vs uniform OOD
    let mut held_rng = stream(9, domain::HELDOUT, 5, 0);
    let held: Array2<f32> = data::generate(&spec, 1000, &mut held_rng).unwrap();
    let mut ood_rng = stream(9, domain::EVAL, 6, 0);
    let ood: Array2<f32> = data::ood_counterpart(&spec, 1000, &mut ood_rng).unwrap();
    for (name, set) in [("data", &held), ("ood ", &ood)] {
        let f = ema.forward_features(set).unwrap();
        let (u, norms) = unit_rows(&f).unwrap();
        let (p, _) = ema.projector.forward_unit(&u).unwrap();
        let h = encoder.encode_batch(set).unwrap();
        let (hz, _) = unit_rows(&h).unwrap();
        let align = (&p * &hz).sum_axis(Axis(1));
        let e = ema.marginal_energy_batch(set).unwrap();
        println!(
            "{name}: mean|f|={:.4} mean E={:.4} (min {:.4} max {:.4}) mean align={:.4} ± {:.4}",
            norms.iter().sum::<f32>() / norms.len() as f32,
            e.iter().sum::<f32>() / e.len() as f32,
            e.iter().cloned().fold(f32::INFINITY, f32::min),
            e.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
            align.iter().sum::<f32>() / align.len() as f32,
            {
                let m = align.iter().sum::<f32>() / align.len() as f32;
                (align.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / align.len() as f32).sqrt()
            }
        );
    }

    // projector output vs mode centroid: does p(x) identify x's mode?
    let mut acc = 0.0f32;
    let mut n = 0;
    for mode in 0..8usize {
        let mut rng = stream(10, domain::EVAL, 500, mode as u64);
        let pts: Array2<f32> = data::generate_mode(&spec, mode, 100, &mut rng).unwrap();
        let f = ema.forward_features(&pts).unwrap();
        let (u, _) = unit_rows(&f).unwrap();
        let (p, _) = ema.projector.forward_unit(&u).unwrap();
        for row in p.rows() {
            let own = row.dot(&centroids[mode]);
            let other = centroids
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != mode)
                .map(|(_, c)| row.dot(c))
                .fold(f32::NEG_INFINITY, f32::max);
            if own > other {
                acc += 1.0;
            }
            n += 1;
        }
    }
    println!("projector-output nearest-centroid accuracy: {:.3}", acc / n as f32);
}
