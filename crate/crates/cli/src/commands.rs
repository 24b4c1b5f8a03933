//! Command implementations behind the CLI verbs.

use clel_core::config::RunConfig;
use clel_core::data::{self, DatasetId, DatasetSpec, GAUSS8_MODES};
use clel_core::encoder::Encoder;
use clel_core::energy::{EnergyModel, UnitLatent};
use clel_core::error::{Error, Result};
use clel_core::evaluation::{
    self, aggregate_latents, cosine_histogram, flexibility_check, nearest_mode_fractions,
    ood_eval, ScoreReport,
};
use clel_core::rng::{domain, stream};
use clel_core::sgld::{sample_eval, UniformInit};
use clel_core::trainer::{load_models_for_eval, train};
use clel_core::checkpoint;
use ndarray::Array2;
use std::path::Path;

/// Build a run config from an optional file plus repeated `--set key=value`
/// overrides.
pub fn resolve_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_sets(&mut cfg, sets)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

/// Config recorded next to a checkpoint (self-describing runs).
pub fn checkpoint_config(ckpt: &Path, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let cfg_path = ckpt.join("config.txt");
    if !cfg_path.exists() {
        return Err(Error::MissingArtifact(cfg_path.display().to_string()));
    }
    let mut cfg = RunConfig::load(&cfg_path)?;
    apply_sets(&mut cfg, sets)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let (state, final_ckpt) = train(cfg, out, resume)?;
    eprintln!(
        "trained to iteration {} — final checkpoint at {}",
        state.iter,
        final_ckpt.display()
    );
    Ok(())
}

fn pick_model(
    live: EnergyModel<f32>,
    ema: EnergyModel<f32>,
    use_live: bool,
) -> EnergyModel<f32> {
    if use_live {
        live
    } else {
        ema
    }
}

/// Unconditional sampling + export (container, CSV, energy grid, feature
/// cosine histograms).
pub fn cmd_sample(
    ckpt: &Path,
    cfg: &RunConfig,
    n: usize,
    out: &Path,
    use_live: bool,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.snapshot())?;
    let (live, ema, encoder) = load_models_for_eval(ckpt, cfg)?;
    let model = pick_model(live, ema, use_live);
    let spec = cfg.dataset_spec();
    let init = UniformInit {
        lo: cfg.clamp_lo,
        hi: cfg.clamp_hi,
        dim: model.feature_net.in_dim(),
    };
    let mut rng = stream(cfg.seed, domain::EVAL, 0, 0);
    let samples = sample_eval(&model, &init, n, &cfg.sgld_eval_config(), &mut rng)?;

    // container + CSV exports
    let mut c = checkpoint::Container::new();
    c.push_meta("kind", "samples");
    c.push_meta("n", n);
    c.push_meta("config_hash", cfg.hash());
    let flat: Vec<f32> = samples.iter().cloned().collect();
    c.push_array::<f32>("samples", &[samples.nrows(), samples.ncols()], &flat);
    c.save(&out.join("samples.arc"))?;
    if samples.ncols() == 2 {
        data::write_samples_csv(&out.join("samples.csv"), &samples)?;
        write_energy_grid(&model, cfg, &out.join("energy_grid.csv"))?;
    }

    // cosine-similarity histograms of f, g∘dir∘f, and h features on held-out
    // data (the projector-gap diagnostic)
    if spec.id != DatasetId::ImageDir {
        let mut held_rng = stream(cfg.seed, domain::HELDOUT, 0, 0);
        let held: Array2<f32> = data::generate(&spec, 512.min(n.max(16)), &mut held_rng)?;
        let f = model.forward_features(&held)?;
        let h = encoder.encode_batch(&held)?;
        let (u, _) = clel_core::energy::unit_rows(&f)?;
        let (g, _) = model.projector.forward_unit(&u)?;
        let mut hist_rng = stream(cfg.seed, domain::EVAL, 1, 0);
        for (name, feat) in [("f", &f), ("gf", &g), ("h", &h)] {
            let hist = cosine_histogram(feat.view(), 50, 1_000_000, &mut hist_rng)?;
            hist.write_csv(&out.join(format!("hist_cos_{name}.csv")))?;
        }
    }
    if let Some(summary) = mode_summary(&samples, &spec) {
        eprintln!("mode occupancy: {summary}");
    }
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

/// Marginal-energy lattice over the clamp box (EMA model), for heatmaps.
fn write_energy_grid(model: &EnergyModel<f32>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let res = 120usize;
    let (lo, hi) = (cfg.clamp_lo, cfg.clamp_hi);
    let mut grid = Array2::zeros((res * res, 2));
    for i in 0..res {
        for j in 0..res {
            let x = lo + (hi - lo) * (j as f64 + 0.5) / res as f64;
            let y = lo + (hi - lo) * (i as f64 + 0.5) / res as f64;
            grid[[i * res + j, 0]] = x as f32;
            grid[[i * res + j, 1]] = y as f32;
        }
    }
    let e = model.marginal_energy_batch(&grid)?;
    let mut s = String::from("x0,x1,energy\n");
    for (row, ev) in grid.rows().into_iter().zip(e.iter()) {
        s.push_str(&format!("{},{},{}\n", row[0], row[1], ev));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn cmd_ood_eval(
    ckpt: &Path,
    cfg: &RunConfig,
    n: usize,
    out: &Path,
    use_live: bool,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.snapshot())?;
    let (live, ema, encoder) = load_models_for_eval(ckpt, cfg)?;
    let model = pick_model(live, ema, use_live);
    let spec = cfg.dataset_spec();
    let mut in_rng = stream(cfg.seed, domain::HELDOUT, 1, 0);
    let in_set: Array2<f32> = data::generate(&spec, n, &mut in_rng)?;
    let mut out_rng = stream(cfg.seed, domain::EVAL, 2, 0);
    let out_set: Array2<f32> = data::ood_counterpart(&spec, n, &mut out_rng)?;
    let report = ood_eval(&model, &encoder, &in_set, &out_set)?;

    let rows = [
        ScoreReport {
            metric: "auroc_joint".into(),
            value: report.auroc_joint,
            n_a: report.n_in,
            n_b: report.n_out,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        ScoreReport {
            metric: "auroc_marginal".into(),
            value: report.auroc_marginal,
            n_a: report.n_in,
            n_b: report.n_out,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
    ];
    let mut csv = String::from(ScoreReport::csv_header());
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("report.csv"), csv)?;
    std::fs::write(
        out.join("summary.txt"),
        format!(
            "ood evaluation ({} in / {} out)\nauroc_joint    = {:.6}\nauroc_marginal = {:.6}\n",
            report.n_in, report.n_out, report.auroc_joint, report.auroc_marginal
        ),
    )?;
    println!(
        "auroc_joint = {:.4}  auroc_marginal = {:.4}",
        report.auroc_joint, report.auroc_marginal
    );
    Ok(())
}

/// Aggregate a class latent from reference samples of one gauss8 mode.
pub fn class_latent(
    cfg: &RunConfig,
    spec: &DatasetSpec,
    encoder: &Encoder<f32>,
    mode: usize,
    n_ref: usize,
    salt: u64,
) -> Result<UnitLatent<f32>> {
    let mut ref_rng = stream(cfg.seed, domain::EVAL, 10 + salt, mode as u64);
    let refs: Array2<f32> = data::generate_mode(spec, mode, n_ref, &mut ref_rng)?;
    let policy = cfg.encoder_policy(None);
    let mut lat_rng = stream(cfg.seed, domain::EVAL, 20 + salt, mode as u64);
    let mut latents = Vec::with_capacity(n_ref);
    for row in refs.rows() {
        latents.push(encoder.sample_latent(&policy, row, &mut lat_rng)?);
    }
    aggregate_latents(&latents)
}

pub fn cmd_cond_sample(
    ckpt: &Path,
    cfg: &RunConfig,
    mode: usize,
    n_ref: usize,
    n: usize,
    out: &Path,
    use_live: bool,
) -> Result<()> {
    if mode >= GAUSS8_MODES {
        return Err(Error::Argument(format!("--mode must be in 0..{GAUSS8_MODES}")));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.snapshot())?;
    let (live, ema, encoder) = load_models_for_eval(ckpt, cfg)?;
    let model = pick_model(live, ema, use_live);
    let spec = cfg.dataset_spec();
    let z = class_latent(cfg, &spec, &encoder, mode, n_ref, 0)?;
    let init = UniformInit {
        lo: cfg.clamp_lo,
        hi: cfg.clamp_hi,
        dim: 2,
    };
    let mut rng = stream(cfg.seed, domain::EVAL, 30, mode as u64);
    let samples =
        evaluation::conditional_sample(&model, &z, &cfg.sgld_eval_config(), &init, n, &mut rng)?;
    data::write_samples_csv(&out.join("cond_samples.csv"), &samples)?;

    if let Some(centers) = spec.mode_centers() {
        let fracs = nearest_mode_fractions(evaluation::to_f64(&samples).view(), &centers);
        let purity = fracs[mode];
        std::fs::write(
            out.join("purity.txt"),
            format!("mode = {mode}\npurity = {purity}\nfractions = {fracs:?}\n"),
        )?;
        println!("conditional purity for mode {mode}: {purity:.3}");
    }
    Ok(())
}

pub fn cmd_compose(
    ckpt: &Path,
    cfg: &RunConfig,
    modes: &[usize],
    n_ref: usize,
    n: usize,
    out: &Path,
    use_live: bool,
) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::Argument("compose needs at least one --mode".into()));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.snapshot())?;
    let (live, ema, encoder) = load_models_for_eval(ckpt, cfg)?;
    let model = pick_model(live, ema, use_live);
    let spec = cfg.dataset_spec();
    let concepts: Vec<UnitLatent<f32>> = modes
        .iter()
        .map(|m| class_latent(cfg, &spec, &encoder, *m, n_ref, 0))
        .collect::<Result<_>>()?;
    let init = UniformInit {
        lo: cfg.clamp_lo,
        hi: cfg.clamp_hi,
        dim: 2,
    };
    let mut rng = stream(cfg.seed, domain::EVAL, 31, 0);
    let samples = evaluation::compositional_sample(
        &model,
        &concepts,
        &cfg.sgld_eval_config(),
        &init,
        n,
        &mut rng,
    )?;
    data::write_samples_csv(&out.join("comp_samples.csv"), &samples)?;

    // mean summed alignment of sample mode-latents with the concepts
    let zs = clel_core::encoder::mode_latent_batch(&model, &samples)?;
    let mut mean_align = 0.0f64;
    for row in zs.rows() {
        for c in &concepts {
            mean_align += row.dot(&c.view()) as f64;
        }
    }
    mean_align /= samples.nrows() as f64;
    std::fs::write(
        out.join("alignment.txt"),
        format!("modes = {modes:?}\nmean_summed_alignment = {mean_align}\n"),
    )?;
    println!("compositional samples written; mean summed alignment {mean_align:.4}");
    Ok(())
}

/// The ablation grid: projector × generated-negatives × β × variant.
pub fn cmd_ablate(base: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), base.snapshot())?;
    let projectors = ["mlp", "linear", "identity"];
    let negs = ["true", "false"];
    let betas = ["0", "0.001", "0.01", "0.1"];
    let variants = ["norm-direction", "multi-head"];
    let mut cells = Vec::new();
    for p in projectors {
        for g in negs {
            for b in betas {
                for v in variants {
                    cells.push((p, g, b, v));
                }
            }
        }
    }
    let workers: usize = std::env::var("CLEL_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1);

    let results = std::sync::Mutex::new(Vec::<(usize, String)>::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= cells.len() {
                        return Ok(());
                    }
                    let (p, g, b, v) = cells[idx];
                    let mut cfg = base.clone();
                    cfg.set("model.projector", p)?;
                    cfg.set("loss.generated_negatives", g)?;
                    cfg.set("loss.beta", b)?;
                    cfg.set("model.variant", v)?;
                    let cell_name = format!("proj-{p}_negs-{g}_beta-{b}_var-{v}");
                    let cell_dir = out.join(&cell_name);
                    let row = run_cell(&cfg, &cell_dir, p, g, b, v)?;
                    results.lock().unwrap().push((idx, row));
                }
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;

    let mut rows = results.into_inner().unwrap();
    rows.sort_by_key(|(i, _)| *i);
    let mut csv =
        String::from("projector,generated_negatives,beta,variant,mmd2,auroc_joint,auroc_marginal\n");
    for (_, r) in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    eprintln!("ablation grid written to {}", out.join("ablation.csv").display());
    Ok(())
}

fn run_cell(
    cfg: &RunConfig,
    dir: &Path,
    p: &str,
    g: &str,
    b: &str,
    v: &str,
) -> Result<String> {
    let (_, final_ckpt) = train(cfg, dir, None)?;
    let (_, ema, encoder) = load_models_for_eval(&final_ckpt, cfg)?;
    let spec = cfg.dataset_spec();
    let n_eval = 2000usize.min((cfg.total_iters as usize).max(64) * 4);

    let init = UniformInit {
        lo: cfg.clamp_lo,
        hi: cfg.clamp_hi,
        dim: 2,
    };
    let mut rng = stream(cfg.seed, domain::EVAL, 40, 0);
    let gen = sample_eval(&ema, &init, n_eval, &cfg.sgld_eval_config(), &mut rng)?;
    let mut held_rng = stream(cfg.seed, domain::HELDOUT, 2, 0);
    let held: Array2<f32> = data::generate(&spec, n_eval, &mut held_rng)?;
    let gen64 = evaluation::to_f64(&gen);
    let held64 = evaluation::to_f64(&held);
    let bw = evaluation::default_bandwidths(held64.view(), held64.view());
    let mmd2 = evaluation::mmd_unbiased(gen64.view(), held64.view(), &bw)?;

    let mut ood_rng = stream(cfg.seed, domain::EVAL, 41, 0);
    let out_set: Array2<f32> = data::ood_counterpart(&spec, n_eval, &mut ood_rng)?;
    let report = ood_eval(&ema, &encoder, &held, &out_set)?;
    Ok(format!(
        "{p},{g},{b},{v},{mmd2},{},{}",
        report.auroc_joint, report.auroc_marginal
    ))
}

pub fn cmd_flex_check(grid: usize, dim: usize, seed: u64) -> Result<()> {
    let mut rng = stream(seed, domain::EVAL, 50, 0);
    use rand::Rng;
    let f1: Vec<f64> = (0..grid).map(|_| rng.random_range(-5.0..5.0)).collect();
    let report = flexibility_check(&f1, dim, 1e-10)?;
    println!(
        "flexibility check: grid={} d={} max_discrepancy={:.3e} pass={}",
        report.grid_size, report.dim, report.max_discrepancy, report.pass
    );
    if !report.pass {
        return Err(Error::TrainingDiverged {
            iter: 0,
            reason: format!(
                "norm-based reconstruction discrepancy {} exceeds 1e-10",
                report.max_discrepancy
            ),
        });
    }
    Ok(())
}

/// Per-mode occupancy line for quick sanity output.
pub fn mode_summary(samples: &Array2<f32>, spec: &DatasetSpec) -> Option<String> {
    let centers = spec.mode_centers()?;
    let fracs = nearest_mode_fractions(evaluation::to_f64(samples).view(), &centers);
    Some(
        fracs
            .iter()
            .enumerate()
            .map(|(k, f)| format!("m{k}={f:.3}"))
            .collect::<Vec<_>>()
            .join(" "),
    )
}
