//! Joint training loop: sample fakes with SGLD, extract stop-gradient
//! latents, apply both losses, step both optimizers, track an EMA shadow of
//! the energy model, and checkpoint everything needed for bit-exact resume.
//!
//! All randomness is keyed by (seed, domain, iteration, retry attempt), so a
//! resumed run replays the exact stream a fresh run would have used.

use crate::checkpoint::{pack, unpack, Container};
use crate::config::RunConfig;
use crate::data::{self, DatasetId, ImageData};
use crate::encoder::{mode_latent_batch, Encoder};
use crate::energy::{EnergyModel, EnergyVariant, ProjectorKind};
use crate::error::{Error, Result};
use crate::nn::ArrayVisit;
use crate::objectives::{ebm_loss_and_grads, encoder_loss_and_grads, TrainBatch};
use crate::optim::{update_ema, warmup_lr, Adam, SgdMomentum};
use crate::rng::{domain, stream};
use crate::sgld::{sample_batch, ReplayBuffer, UniformInit};
use ndarray::Array2;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Consecutive divergence-rollback failures tolerated before aborting.
const MAX_RETRIES: u64 = 3;

/// Everything that evolves during training.
#[derive(Clone)]
pub struct TrainState {
    pub iter: u64,
    pub model: EnergyModel<f32>,
    pub encoder: Encoder<f32>,
    /// EMA shadow of the full energy model (feature net, projector, heads).
    pub ema: EnergyModel<f32>,
    pub adam: Adam<f32>,
    pub sgd: SgdMomentum<f32>,
    pub buffer: ReplayBuffer<f32>,
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub iter: u64,
    pub loss_ebm: f64,
    pub loss_le: f64,
    pub energy_real_mean: f64,
    pub energy_fake_mean: f64,
    pub buffer_size: usize,
    pub fresh_starts: usize,
    pub lr_ebm: f64,
}

/// Data source abstraction: toy generators emit i.i.d. fresh batches keyed
/// by iteration; image datasets are shuffled epoch-wise with the run seed.
pub enum DataStream {
    Toy(crate::data::DatasetSpec),
    Images(ImageData<f32>),
}

impl DataStream {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.dataset_spec();
        if cfg.data_id == DatasetId::ImageDir {
            let dir = spec
                .image_dir
                .clone()
                .or_else(|| std::env::var("CLEL_DATA_DIR").ok().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Config("image_dir dataset needs data.dir or CLEL_DATA_DIR".into())
                })?;
            Ok(DataStream::Images(data::load_images(&dir)?))
        } else {
            Ok(DataStream::Toy(spec))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataStream::Toy(spec) => spec.dim,
            DataStream::Images(img) => img.h * img.w,
        }
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        match self {
            DataStream::Toy(_) => None,
            DataStream::Images(img) => Some((img.h, img.w)),
        }
    }

    /// Batch for an iteration: a pure function of (seed, iter).
    pub fn batch(&self, cfg: &RunConfig, iter: u64) -> Result<Array2<f32>> {
        let n = cfg.batch_size;
        match self {
            DataStream::Toy(spec) => {
                let mut rng = stream(cfg.seed, domain::DATA, iter, 0);
                data::generate(spec, n, &mut rng)
            }
            DataStream::Images(img) => {
                let len = img.pixels.nrows() as u64;
                let mut out = Array2::zeros((n, img.pixels.ncols()));
                for j in 0..n as u64 {
                    let g = iter * n as u64 + j;
                    let epoch = g / len;
                    let pos = (g % len) as usize;
                    let perm = epoch_permutation(cfg.seed, epoch, len as usize);
                    out.row_mut(j as usize).assign(&img.pixels.row(perm[pos]));
                }
                Ok(out)
            }
        }
    }
}

fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = stream(seed, domain::DATA_ORDER, epoch, 0);
    idx.shuffle(&mut rng);
    idx
}

/// Fresh state from the config's init streams.
pub fn init_state(cfg: &RunConfig, data_stream: &DataStream) -> Result<TrainState> {
    let in_dim = data_stream.dim();
    let mut init_rng = stream(cfg.seed, domain::INIT, 0, 0);
    let model: EnergyModel<f32> = match data_stream {
        DataStream::Toy(_) => EnergyModel::new_mlp(&cfg.energy_config(in_dim), &mut init_rng),
        DataStream::Images(img) => {
            EnergyModel::new_conv(&cfg.energy_config(in_dim), img.h, img.w, &mut init_rng)
        }
    };
    let mut enc_rng = stream(cfg.seed, domain::INIT, 1, 0);
    let encoder: Encoder<f32> = match data_stream {
        DataStream::Toy(_) => Encoder::new_mlp(&cfg.encoder_config(in_dim), &mut enc_rng),
        DataStream::Images(img) => {
            Encoder::new_conv(&cfg.encoder_config(in_dim), img.h, img.w, &mut enc_rng)
        }
    };
    let ema = model.clone();
    let mut adam = Adam::new(cfg.adam_config());
    let mut sgd = SgdMomentum::new(cfg.sgd_config());
    // materialize moment slots now so checkpoints always carry them
    {
        let mut m = model.clone();
        let mut slots = Vec::new();
        m.collect_trainable(&mut slots);
        let sizes: Vec<usize> = slots.iter().map(|s| s.len()).collect();
        adam.m = sizes.iter().map(|n| vec![0.0; *n]).collect();
        adam.v = sizes.iter().map(|n| vec![0.0; *n]).collect();
        let mut e = encoder.clone();
        let mut eslots = Vec::new();
        e.collect_trainable(&mut eslots);
        sgd.buf = eslots.iter().map(|s| vec![0.0; s.len()]).collect();
    }
    Ok(TrainState {
        iter: 0,
        model,
        encoder,
        ema,
        adam,
        sgd,
        buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.buffer_reinit_prob),
    })
}

/// Copy the live spectral-norm power-iteration state into the EMA shadow
/// (the shadow weights track the live ones closely; re-converged at eval).
fn sync_spectral(ema: &mut EnergyModel<f32>, live: &EnergyModel<f32>) {
    let mut table: Vec<(String, Vec<f32>)> = Vec::new();
    live.visit("m", &mut |name, view| {
        if name.contains(".sn_") {
            table.push((name, view.iter().cloned().collect()));
        }
    });
    let mut i = 0;
    ema.visit_mut("m", &mut |name, mut view| {
        if name.contains(".sn_") {
            debug_assert_eq!(table[i].0, name);
            for (dst, src) in view.iter_mut().zip(table[i].1.iter()) {
                *dst = *src;
            }
            i += 1;
        }
    });
}

/// One Algorithm-1 step at `state.iter` with retry salt `attempt`.
/// On success the state has advanced (including the buffer); on error the
/// caller must restore the pre-step snapshot.
pub fn train_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    data_stream: &DataStream,
    reals: &Array2<f32>,
    attempt: u64,
) -> Result<StepMetrics> {
    let iter = state.iter;
    let n = cfg.batch_size;
    if reals.nrows() != n {
        return Err(Error::Argument(format!(
            "data batch size {} does not match configured batch_size {n}",
            reals.nrows()
        )));
    }
    let diverged = |reason: String| Error::TrainingDiverged { iter, reason };

    // one power-iteration refresh per step; everything below sees frozen σ
    state.model.refresh_spectral();

    // 1. generate fakes from the current model
    let init = UniformInit {
        lo: cfg.clamp_lo,
        hi: cfg.clamp_hi,
        dim: data_stream.dim(),
    };
    let sgld_policy = cfg.sgld_policy(data_stream.image_dims());
    let mut sgld_rng = stream(cfg.seed, domain::SGLD, iter, attempt);
    let (fakes, fresh) = sample_batch(
        &state.model,
        &mut state.buffer,
        &init,
        n,
        &cfg.sgld_config(),
        Some(&sgld_policy),
        &mut sgld_rng,
    )
    .map_err(|e| diverged(e.to_string()))?;

    // 2. stop-gradient latents
    let policy = cfg.encoder_policy(data_stream.image_dims());
    let mut latent_rng = stream(cfg.seed, domain::LATENT_AUG, iter, attempt);
    let real_latents = state
        .encoder
        .sample_latent_batch(&policy, reals, &mut latent_rng)
        .map_err(|e| diverged(e.to_string()))?;
    let fake_latents =
        mode_latent_batch(&state.model, &fakes).map_err(|e| diverged(e.to_string()))?;

    // 3. the two contrastive views
    let mut v1_rng = stream(cfg.seed, domain::VIEW_AUG, iter, 2 * attempt);
    let mut v2_rng = stream(cfg.seed, domain::VIEW_AUG, iter, 2 * attempt + 1);
    let view1 = policy.transform(reals, &mut v1_rng);
    let view2 = policy.transform(reals, &mut v2_rng);

    let batch = TrainBatch {
        reals: reals.clone(),
        real_latents,
        fakes,
        fake_latents,
        view1,
        view2,
    };

    // 4. losses and gradients (each reaches only its own network)
    let loss_cfg = cfg.loss_config();
    let (ebm_parts, ebm_grads) =
        ebm_loss_and_grads(&batch, &state.model, &loss_cfg).map_err(|e| diverged(e.to_string()))?;
    let (loss_le, enc_grads) = encoder_loss_and_grads(&batch, &state.encoder, &loss_cfg)
        .map_err(|e| diverged(e.to_string()))?;
    if !ebm_parts.loss.is_finite() || !loss_le.is_finite() {
        return Err(diverged(format!(
            "non-finite losses: ebm={} le={loss_le}",
            ebm_parts.loss
        )));
    }

    // 5. simultaneous optimizer updates (warmup scales the EBM rate only)
    let lr_scale = if cfg.warmup_iters == 0 {
        1.0
    } else {
        (iter as f64 / cfg.warmup_iters as f64).min(1.0)
    };
    {
        let mut params = Vec::new();
        state.model.collect_trainable(&mut params);
        let mut grads = Vec::new();
        ebm_grads.collect(&mut grads);
        state.adam.step(&mut params, &grads, lr_scale);
    }
    {
        let mut params = Vec::new();
        state.encoder.collect_trainable(&mut params);
        let mut grads = Vec::new();
        enc_grads.collect(&mut grads);
        state.sgd.step(&mut params, &grads, 1.0);
    }

    // 6. EMA shadow update
    {
        let mut live = state.model.clone();
        let mut live_slices = Vec::new();
        live.collect_trainable(&mut live_slices);
        let live_ref: Vec<&[f32]> = live_slices.iter().map(|s| &**s).collect();
        let mut shadow = Vec::new();
        state.ema.collect_trainable(&mut shadow);
        update_ema(&mut shadow, &live_ref, cfg.ema_decay);
    }
    sync_spectral(&mut state.ema, &state.model);

    state.iter += 1;
    Ok(StepMetrics {
        iter,
        loss_ebm: ebm_parts.loss,
        loss_le,
        energy_real_mean: ebm_parts.energy_real_mean,
        energy_fake_mean: ebm_parts.energy_fake_mean,
        buffer_size: state.buffer.len(),
        fresh_starts: fresh,
        lr_ebm: warmup_lr(cfg.ebm_lr, iter, cfg.warmup_iters),
    })
}

pub const METRICS_HEADER: &str =
    "iter,loss_ebm,loss_le,energy_real_mean,energy_fake_mean,buffer_size,fresh_starts,lr_ebm,wall_time_s";

/// Run (or resume) a full training job, writing metrics and checkpoints into
/// `out_dir`. Returns the final state and the final checkpoint path.
pub fn train(
    cfg: &RunConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<(TrainState, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    // frozen config snapshot first
    std::fs::write(out_dir.join("config.txt"), cfg.snapshot())?;

    let data_stream = DataStream::open(cfg)?;
    let mut state = match resume_from {
        Some(dir) => load_checkpoint(dir, cfg, &data_stream)?,
        None => init_state(cfg, &data_stream)?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = open_metrics(&metrics_path, state.iter)?;
    let started = Instant::now();

    while state.iter < cfg.total_iters {
        let reals = data_stream.batch(cfg, state.iter)?;
        let mut last_err: Option<Error> = None;
        let mut done = false;
        for attempt in 0..MAX_RETRIES {
            let snapshot = state.clone();
            match train_step(&mut state, cfg, &data_stream, &reals, attempt) {
                Ok(m) => {
                    writeln!(
                        metrics_file,
                        "{},{},{},{},{},{},{},{},{}",
                        m.iter,
                        m.loss_ebm,
                        m.loss_le,
                        m.energy_real_mean,
                        m.energy_fake_mean,
                        m.buffer_size,
                        m.fresh_starts,
                        m.lr_ebm,
                        started.elapsed().as_secs_f64()
                    )?;
                    done = true;
                    break;
                }
                Err(e) => {
                    state = snapshot;
                    last_err = Some(e);
                }
            }
        }
        if !done {
            let reason = last_err.map(|e| e.to_string()).unwrap_or_default();
            return Err(Error::TrainingDiverged {
                iter: state.iter,
                reason: format!("aborted after {MAX_RETRIES} rollback retries: {reason}"),
            });
        }
        if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 {
            let dir = out_dir.join("checkpoints").join(format!("iter_{:07}", state.iter));
            save_checkpoint(&dir, cfg, &state)?;
        }
    }
    metrics_file.flush()?;

    let final_dir = out_dir.join("checkpoints").join("final");
    save_checkpoint(&final_dir, cfg, &state)?;
    Ok((state, final_dir))
}

/// Open metrics.csv for appending at `iter`: fresh runs get a header, resumed
/// runs keep rows below `iter` and drop anything newer.
fn open_metrics(path: &Path, iter: u64) -> Result<std::fs::File> {
    if iter == 0 || !path.exists() {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        return Ok(f);
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        if let Some(first) = line.split(',').next() {
            if let Ok(row_iter) = first.parse::<u64>() {
                if row_iter < iter {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    std::fs::write(path, kept)?;
    Ok(std::fs::OpenOptions::new().append(true).open(path)?)
}

// ── checkpoint directory ───────────────────────────────────────────────

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.snapshot())?;

    let mut params = Container::new();
    params.push_meta(
        "variant",
        match state.model.variant {
            EnergyVariant::NormDirection => "norm-direction",
            EnergyVariant::MultiHead => "multi-head",
        },
    );
    params.push_meta(
        "projector",
        match state.model.projector.kind() {
            ProjectorKind::Mlp => "mlp",
            ProjectorKind::Linear => "linear",
            ProjectorKind::Identity => "identity",
        },
    );
    params.push_meta("d_z", cfg.d_z);
    params.push_meta("beta", cfg.beta);
    params.push_meta("dtype", "f32");
    pack(&mut params, "ebm", &state.model);
    pack(&mut params, "encoder", &state.encoder);
    pack(&mut params, "ema", &state.ema);
    params.save(&dir.join("params.arc"))?;

    let mut optim = Container::new();
    optim.push_meta("adam_t", state.adam.t);
    for (i, m) in state.adam.m.iter().enumerate() {
        optim.push_array::<f32>(&format!("adam.m.{i}"), &[m.len()], m);
    }
    for (i, v) in state.adam.v.iter().enumerate() {
        optim.push_array::<f32>(&format!("adam.v.{i}"), &[v.len()], v);
    }
    for (i, b) in state.sgd.buf.iter().enumerate() {
        optim.push_array::<f32>(&format!("sgd.buf.{i}"), &[b.len()], b);
    }
    optim.save(&dir.join("optim.arc"))?;

    let dim = state.model.feature_net.in_dim();
    let mut buffer = Container::new();
    buffer.push_meta("capacity", state.buffer.capacity());
    buffer.push_meta("reinit_prob", state.buffer.reinit_prob());
    let states = state.buffer.to_matrix(dim);
    let flat: Vec<f32> = states.iter().cloned().collect();
    buffer.push_array::<f32>("buffer.states", &[states.nrows(), dim], &flat);
    buffer.save(&dir.join("buffer.arc"))?;

    std::fs::write(
        dir.join("rng.txt"),
        format!("seed = {}\niter = {}\n", cfg.seed, state.iter),
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, cfg: &RunConfig, data_stream: &DataStream) -> Result<TrainState> {
    if !dir.exists() {
        return Err(Error::MissingArtifact(dir.display().to_string()));
    }
    let mut state = init_state(cfg, data_stream)?;

    let params = Container::load(&dir.join("params.arc"))?;
    unpack(&params, "ebm", &mut state.model)?;
    unpack(&params, "encoder", &mut state.encoder)?;
    unpack(&params, "ema", &mut state.ema)?;

    let optim = Container::load(&dir.join("optim.arc"))?;
    state.adam.t = optim
        .require_meta("adam_t")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad adam_t".into()))?;
    for i in 0..state.adam.m.len() {
        let (_, m) = optim.get_array::<f32>(&format!("adam.m.{i}"))?;
        let (_, v) = optim.get_array::<f32>(&format!("adam.v.{i}"))?;
        if m.len() != state.adam.m[i].len() || v.len() != state.adam.v[i].len() {
            return Err(Error::Checkpoint(format!("adam slot {i} size mismatch")));
        }
        state.adam.m[i] = m;
        state.adam.v[i] = v;
    }
    for i in 0..state.sgd.buf.len() {
        let (_, b) = optim.get_array::<f32>(&format!("sgd.buf.{i}"))?;
        if b.len() != state.sgd.buf[i].len() {
            return Err(Error::Checkpoint(format!("sgd slot {i} size mismatch")));
        }
        state.sgd.buf[i] = b;
    }

    let buffer = Container::load(&dir.join("buffer.arc"))?;
    let (shape, flat) = buffer.get_array::<f32>("buffer.states")?;
    let states = Array2::from_shape_vec((shape[0], shape[1]), flat)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    state.buffer = ReplayBuffer::from_matrix(cfg.buffer_capacity, cfg.buffer_reinit_prob, &states);

    let rng_text = std::fs::read_to_string(dir.join("rng.txt"))?;
    for line in rng_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "seed" => {
                    let stored: u64 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Checkpoint("bad seed".into()))?;
                    if stored != cfg.seed {
                        return Err(Error::Checkpoint(format!(
                            "checkpoint seed {stored} disagrees with config seed {}",
                            cfg.seed
                        )));
                    }
                }
                "iter" => {
                    state.iter = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Checkpoint("bad iter".into()))?;
                }
                _ => {}
            }
        }
    }
    Ok(state)
}

/// Load just the models from a checkpoint for evaluation. Returns
/// (live model, EMA model, encoder); spectral state is re-converged
/// deterministically.
pub fn load_models_for_eval(
    dir: &Path,
    cfg: &RunConfig,
) -> Result<(EnergyModel<f32>, EnergyModel<f32>, Encoder<f32>)> {
    let data_stream = DataStream::open(cfg)?;
    let state = load_checkpoint(dir, cfg, &data_stream)?;
    let mut live = state.model;
    let mut ema = state.ema;
    live.converge_spectral(50);
    ema.converge_spectral(50);
    Ok((live, ema, state.encoder))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default_for(DatasetId::Gauss8);
        cfg.total_iters = 5;
        cfg.batch_size = 8;
        cfg.d_z = 8;
        cfg.model_widths = vec![16];
        cfg.encoder_widths = vec![16];
        cfg.sgld_steps = 5;
        cfg.buffer_capacity = 64;
        cfg.checkpoint_every = 0;
        cfg.warmup_iters = 2;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn zero_lr_keeps_parameters_but_produces_metrics() {
        let mut cfg = tiny_cfg();
        cfg.ebm_lr = 0.0;
        cfg.enc_lr = 0.0;
        let ds = DataStream::open(&cfg).unwrap();
        let mut state = init_state(&cfg, &ds).unwrap();
        let before_model = state.model.clone();
        let before_enc = state.encoder.clone();
        let reals = ds.batch(&cfg, 0).unwrap();
        let m = train_step(&mut state, &cfg, &ds, &reals, 0).unwrap();
        assert!(m.loss_ebm.is_finite() && m.loss_le.is_finite());

        let collect = |model: &EnergyModel<f32>| {
            let mut tmp = model.clone();
            let mut slices = Vec::new();
            tmp.collect_trainable(&mut slices);
            slices.iter().map(|s| s.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(collect(&before_model), collect(&state.model));
        let collect_enc = |e: &Encoder<f32>| {
            let mut tmp = e.clone();
            let mut slices = Vec::new();
            tmp.collect_trainable(&mut slices);
            slices.iter().map(|s| s.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(collect_enc(&before_enc), collect_enc(&state.encoder));
    }

    #[test]
    fn ten_steps_are_bit_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let ds = DataStream::open(&cfg).unwrap();
            let mut state = init_state(&cfg, &ds).unwrap();
            for _ in 0..10 {
                let reals = ds.batch(&cfg, state.iter).unwrap();
                train_step(&mut state, &cfg, &ds, &reals, 0).unwrap();
            }
            let mut slices = Vec::new();
            state.model.collect_trainable(&mut slices);
            slices.iter().map(|s| s.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn update_isolation_between_losses() {
        // zeroing one loss's gradient (lr = 0 for its optimizer) leaves that
        // network untouched while the other still moves
        let mut cfg = tiny_cfg();
        cfg.ebm_lr = 0.0;
        cfg.warmup_iters = 0;
        let ds = DataStream::open(&cfg).unwrap();
        let mut state = init_state(&cfg, &ds).unwrap();
        let model_before = {
            let mut tmp = state.model.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        let enc_before = {
            let mut tmp = state.encoder.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        let reals = ds.batch(&cfg, 0).unwrap();
        train_step(&mut state, &cfg, &ds, &reals, 0).unwrap();
        let model_after = {
            let mut tmp = state.model.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        let enc_after = {
            let mut tmp = state.encoder.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(model_before, model_after, "EBM must be frozen at lr 0");
        assert_ne!(enc_before, enc_after, "encoder must still move");
    }

    #[test]
    fn train_writes_artifacts_and_is_resumable_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.total_iters = 6;
        cfg.checkpoint_every = 3;

        let out_a = dir.path().join("a");
        let (_, final_a) = train(&cfg, &out_a, None).unwrap();

        // uninterrupted vs resumed-from-iter-3
        let out_b = dir.path().join("b");
        let (_, _) = train(&cfg, &out_b, None).unwrap(); // warm the directory
        let mid = out_b.join("checkpoints").join("iter_0000003");
        assert!(mid.exists());
        let (_, final_b) = train(&cfg, &out_b, Some(&mid)).unwrap();

        for name in ["params.arc", "optim.arc", "buffer.arc", "rng.txt", "config.txt"] {
            let a = std::fs::read(final_a.join(name)).unwrap();
            let b = std::fs::read(final_b.join(name)).unwrap();
            assert_eq!(a, b, "checkpoint file {name} differs after resume");
        }

        // metrics iterations strictly increase with no gaps
        let metrics = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
        let iters: Vec<u64> = metrics
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(iters, (0..6).collect::<Vec<u64>>());
    }

    #[test]
    fn zero_iters_writes_initial_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.total_iters = 0;
        let (state, final_dir) = train(&cfg, dir.path(), None).unwrap();
        assert_eq!(state.iter, 0);
        assert!(final_dir.join("params.arc").exists());
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.trim(), METRICS_HEADER);
        assert!(dir.path().join("config.txt").exists());
    }

    #[test]
    fn ema_shadow_tracks_live_parameters() {
        let mut cfg = tiny_cfg();
        cfg.ema_decay = 0.0; // shadow = live after every step
        let ds = DataStream::open(&cfg).unwrap();
        let mut state = init_state(&cfg, &ds).unwrap();
        for _ in 0..3 {
            let reals = ds.batch(&cfg, state.iter).unwrap();
            train_step(&mut state, &cfg, &ds, &reals, 0).unwrap();
        }
        let live = {
            let mut tmp = state.model.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        let shadow = {
            let mut tmp = state.ema.clone();
            let mut s = Vec::new();
            tmp.collect_trainable(&mut s);
            s.iter().map(|x| x.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(live, shadow);
    }
}
