//! Training losses.
//!
//! The EBM loss pairs joint energies of real (x, z) against marginal
//! energies of generated x̃, with a squared-energy regularizer:
//!
//! ```text
//! L_EBM = (1/n) Σᵢ E(xᵢ, zᵢ) − E(x̃ᵢ) + α·(E(xᵢ)² + E(x̃ᵢ)²)
//! ```
//!
//! The encoder loss is temperature-scaled contrastive cross entropy over two
//! augmented views per real sample, with the generated latents z̃ as extra
//! negatives.
//!
//! Stop-gradient contract: the latents stored in a [`TrainBatch`] (z and z̃)
//! and the generated samples x̃ are plain constants. ∂L_EBM/∂(encoder) ≡ 0
//! and ∂L_LE/∂(EBM) ≡ 0 hold structurally: each loss only evaluates its own
//! network. Losses are accumulated in f64 regardless of model precision.

use crate::encoder::{Encoder, EncoderGrads};
use crate::energy::{unit_rows, EbmGrads, EnergyModel, EnergyVariant, FeatureGrads, UnitLatent};
use crate::error::{Error, Result};
use crate::num::{real, Real};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Energy-regularization weight.
    pub alpha: f64,
    /// Latent-coupling weight (recorded here; the model carries its own β).
    pub beta: f64,
    /// NT-Xent temperature.
    pub tau: f64,
    /// Feed the generated latents z̃ as extra negatives to the encoder loss.
    pub use_generated_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            tau: 0.2,
            use_generated_negatives: true,
        }
    }
}

/// One training step's paired batches. Latents are stop-gradient constants.
#[derive(Clone, Debug)]
pub struct TrainBatch<F: Real> {
    pub reals: Array2<F>,
    /// z: unit latents of the reals from the encoder (constants).
    pub real_latents: Array2<F>,
    pub fakes: Array2<F>,
    /// z̃: mode latents of the fakes from the EBM (constants).
    pub fake_latents: Array2<F>,
    /// Augmented view inputs of each real; the encoder loss re-encodes these
    /// so its gradient can flow into the encoder (and only there).
    pub view1: Array2<F>,
    pub view2: Array2<F>,
}

impl<F: Real> TrainBatch<F> {
    pub fn len(&self) -> usize {
        self.reals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.reals.nrows() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.reals.nrows();
        if self.fakes.nrows() != n
            || self.real_latents.nrows() != n
            || self.fake_latents.nrows() != n
            || self.view1.nrows() != n
            || self.view2.nrows() != n
        {
            return Err(Error::Argument("train batch sizes disagree".into()));
        }
        for z in self
            .real_latents
            .rows()
            .into_iter()
            .chain(self.fake_latents.rows())
        {
            let norm = z.dot(&z).sqrt().as_f64();
            if (norm - 1.0).abs() > crate::energy::UNIT_TOL {
                return Err(Error::Argument(format!("batch latent norm {norm} off the sphere")));
            }
        }
        Ok(())
    }
}

/// Normalized temperature-scaled cross entropy for one anchor:
/// −log[ exp(zᵀz₊/τ) / (exp(zᵀz₊/τ) + Σ exp(zᵀz₋/τ)) ].
///
/// All inputs are unit vectors, so cosine similarity is the dot product.
/// Computed in f64 with max-subtraction; zero negatives give exactly 0.
pub fn nt_xent<F: Real>(
    z: ArrayView1<'_, F>,
    z_pos: ArrayView1<'_, F>,
    negatives: ArrayView2<'_, F>,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    let s_pos = z.dot(&z_pos).as_f64() / tau;
    let mut logits = Vec::with_capacity(1 + negatives.nrows());
    logits.push(s_pos);
    for neg in negatives.rows() {
        logits.push(z.dot(&neg).as_f64() / tau);
    }
    Ok(log_sum_exp(&logits) - s_pos)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Encoder (contrastive) loss value.
pub fn encoder_loss<F: Real>(
    batch: &TrainBatch<F>,
    encoder: &Encoder<F>,
    cfg: &LossConfig,
) -> Result<f64> {
    encoder_loss_impl(batch, encoder, cfg, false).map(|(l, _)| l)
}

/// Encoder loss and its gradient w.r.t. encoder parameters only.
pub fn encoder_loss_and_grads<F: Real>(
    batch: &TrainBatch<F>,
    encoder: &Encoder<F>,
    cfg: &LossConfig,
) -> Result<(f64, EncoderGrads<F>)> {
    let (loss, grads) = encoder_loss_impl(batch, encoder, cfg, true)?;
    Ok((loss, grads.expect("grads requested")))
}

fn encoder_loss_impl<F: Real>(
    batch: &TrainBatch<F>,
    encoder: &Encoder<F>,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(f64, Option<EncoderGrads<F>>)> {
    batch.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if tau_invalid(cfg.tau) {
        return Err(Error::Argument(format!("tau must be positive, got {}", cfg.tau)));
    }
    if n < 2 && !cfg.use_generated_negatives {
        return Err(Error::Argument(
            "n < 2 with generated negatives disabled leaves no negative set".into(),
        ));
    }

    // stacked views: rows 0..n are view 1, rows n..2n are view 2
    let mut stacked = Array2::zeros((2 * n, batch.view1.ncols()));
    stacked.slice_mut(s![..n, ..]).assign(&batch.view1);
    stacked.slice_mut(s![n.., ..]).assign(&batch.view2);
    let (y, cache) = match &encoder.net {
        crate::energy::FeatureNet::Mlp(m) => {
            let (y, c) = m.forward_cached(&stacked);
            (y, crate::energy::FeatureCache::Mlp(c))
        }
        crate::energy::FeatureNet::Conv(c) => {
            let (y, cc) = c.forward_cached(&stacked);
            (y, crate::energy::FeatureCache::Conv(cc))
        }
    };
    let (z, norms) = unit_rows(&y)?;

    // similarity tables in f64
    let d = z.ncols();
    let view_sims = {
        let zt = z.t();
        z.dot(&zt)
    };
    let fake_sims = if cfg.use_generated_negatives {
        Some(z.dot(&batch.fake_latents.t()))
    } else {
        None
    };

    let inv_tau = 1.0 / cfg.tau;
    let mut loss = 0.0f64;
    let mut g_unit: Option<Array2<F>> = want_grads.then(|| Array2::zeros((2 * n, d)));
    let anchor_weight = 1.0 / (2.0 * n as f64);

    for i in 0..n {
        for (a, p) in [(i, n + i), (n + i, i)] {
            // logits: positive first, then view negatives, then fakes
            let mut logits = Vec::with_capacity(2 * n + 1);
            let mut neg_rows: Vec<usize> = Vec::with_capacity(2 * n - 2);
            logits.push(view_sims[[a, p]].as_f64() * inv_tau);
            for k in 0..n {
                if k == i {
                    continue;
                }
                for row in [k, n + k] {
                    logits.push(view_sims[[a, row]].as_f64() * inv_tau);
                    neg_rows.push(row);
                }
            }
            let n_fakes = if let Some(fs) = &fake_sims {
                for m in 0..n {
                    logits.push(fs[[a, m]].as_f64() * inv_tau);
                }
                n
            } else {
                0
            };

            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            loss += anchor_weight * (m + denom.ln() - logits[0]);

            if let Some(g) = g_unit.as_mut() {
                // dL/ds over [pos, negs...]: softmax weights, minus 1 at the positive
                let scale = anchor_weight * inv_tau;
                let w_pos = exps[0] / denom;
                let coef_pos = real::<F>((w_pos - 1.0) * scale);
                add_scaled_row(g, a, &z, p, coef_pos);
                add_scaled_row(g, p, &z, a, coef_pos);
                for (t, &row) in neg_rows.iter().enumerate() {
                    let w = exps[1 + t] / denom;
                    let coef = real::<F>(w * scale);
                    add_scaled_row(g, a, &z, row, coef);
                    add_scaled_row(g, row, &z, a, coef);
                }
                // fake latents are constants: gradient reaches the anchor only
                for t in 0..n_fakes {
                    let w = exps[1 + neg_rows.len() + t] / denom;
                    let coef = real::<F>(w * scale);
                    let fake = batch.fake_latents.row(t);
                    g.row_mut(a).zip_mut_with(&fake, |gi, &fi| *gi += coef * fi);
                }
            }
        }
    }

    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            iter: 0,
            reason: format!("encoder loss is {loss}"),
        });
    }

    let grads = match g_unit {
        None => None,
        Some(mut g) => {
            // back through row normalization z = y/‖y‖
            for (idx, mut row) in g.rows_mut().into_iter().enumerate() {
                let zi = z.row(idx);
                let dot = zi.dot(&row);
                let r = norms[idx];
                row.zip_mut_with(&zi, |gi, &zij| *gi = (*gi - dot * zij) / r);
            }
            let mut eg = FeatureGrads::zeros_like(&encoder.net);
            encoder.net.backward(&cache, &g, Some(&mut eg), false);
            Some(eg)
        }
    };
    Ok((loss, grads))
}

fn tau_invalid(tau: f64) -> bool {
    !(tau > 0.0)
}

fn add_scaled_row<F: Real>(g: &mut Array2<F>, target: usize, z: &Array2<F>, source: usize, coef: F) {
    let src = z.row(source).to_owned();
    g.row_mut(target).zip_mut_with(&src, |gi, &si| *gi += coef * si);
}

/// Loss value plus the energy statistics the metrics log wants.
#[derive(Clone, Copy, Debug)]
pub struct EbmLossParts {
    pub loss: f64,
    pub energy_real_mean: f64,
    pub energy_fake_mean: f64,
}

/// EBM loss value.
pub fn ebm_loss<F: Real>(
    batch: &TrainBatch<F>,
    model: &EnergyModel<F>,
    cfg: &LossConfig,
) -> Result<f64> {
    ebm_loss_impl(batch, model, cfg, false).map(|(p, _)| p.loss)
}

/// EBM loss and its gradient w.r.t. EBM parameters only.
pub fn ebm_loss_and_grads<F: Real>(
    batch: &TrainBatch<F>,
    model: &EnergyModel<F>,
    cfg: &LossConfig,
) -> Result<(EbmLossParts, EbmGrads<F>)> {
    let (parts, grads) = ebm_loss_impl(batch, model, cfg, true)?;
    Ok((parts, grads.expect("grads requested")))
}

fn ebm_loss_impl<F: Real>(
    batch: &TrainBatch<F>,
    model: &EnergyModel<F>,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(EbmLossParts, Option<EbmGrads<F>>)> {
    batch.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let alpha = cfg.alpha;
    let beta = model.beta.as_f64();
    let inv_n = 1.0 / n as f64;

    // one stacked forward: rows 0..n real, n..2n fake
    let mut xs = Array2::zeros((2 * n, batch.reals.ncols()));
    xs.slice_mut(s![..n, ..]).assign(&batch.reals);
    xs.slice_mut(s![n.., ..]).assign(&batch.fakes);
    if xs.ncols() != model.feature_net.in_dim() {
        return Err(Error::Config(format!(
            "batch dimensionality {} does not match model ({})",
            xs.ncols(),
            model.feature_net.in_dim()
        )));
    }
    let (f, fcache) = model.feature_net.forward_cached(&xs);

    // marginal energies and (optionally) the df seed from the marginal path
    let mut grads = want_grads.then(|| EbmGrads::zeros_like(model));
    let mut df: Array2<F> = Array2::zeros(f.raw_dim());
    let marginal: Array1<F> = match model.variant {
        EnergyVariant::NormDirection => f.map_axis(Axis(1), |r| r.dot(&r) * real(0.5)),
        EnergyVariant::MultiHead => {
            let head = model.head_prime.as_ref().expect("multi-head has g'");
            head.forward(&f).index_axis(Axis(1), 0).to_owned()
        }
    };

    // per-row coefficient on the marginal energy:
    //   reals: (1 + 2αE)/n      fakes: (−1 + 2αẼ)/n
    let mut coef = Array1::<F>::zeros(2 * n);
    let mut e_real = 0.0f64;
    let mut e_fake = 0.0f64;
    for i in 0..n {
        let er = marginal[i].as_f64();
        let ef = marginal[n + i].as_f64();
        e_real += er * inv_n;
        e_fake += ef * inv_n;
        coef[i] = real((1.0 + 2.0 * alpha * er) * inv_n);
        coef[n + i] = real((-1.0 + 2.0 * alpha * ef) * inv_n);
    }

    // directional alignment on the real rows
    let f_real = f.slice(s![..n, ..]).to_owned();
    let mut align_mean = 0.0f64;
    let mut real_dir_df: Option<Array2<F>> = None;
    if beta != 0.0 {
        match model.variant {
            EnergyVariant::NormDirection => {
                let (u, r) = unit_rows(&f_real)?;
                let (p, pcache) = model.projector.forward_unit(&u)?;
                let align = (&p * &batch.real_latents).sum_axis(Axis(1));
                align_mean = align.iter().map(|a| a.as_f64()).sum::<f64>() * inv_n;
                if let Some(g) = grads.as_mut() {
                    let dp = batch.real_latents.mapv(|z| z * real::<F>(-beta * inv_n));
                    let du = model
                        .projector
                        .backward_unit(&pcache, &dp, Some(&mut g.projector), true)
                        .expect("projector input grad");
                    let mut dfr = Array2::zeros((n, f.ncols()));
                    for i in 0..n {
                        let ui = u.row(i);
                        let dui = du.row(i);
                        let dot = ui.dot(&dui);
                        let ri = r[i];
                        let mut row = dfr.row_mut(i);
                        ndarray::Zip::from(&mut row).and(&ui).and(&dui).for_each(
                            |d, &uij, &duij| {
                                *d = (duij - dot * uij) / ri;
                            },
                        );
                    }
                    real_dir_df = Some(dfr);
                }
            }
            EnergyVariant::MultiHead => {
                let (g_raw, pcache) = model.projector.forward_raw(&f_real);
                let align = (&g_raw * &batch.real_latents).sum_axis(Axis(1));
                align_mean = align.iter().map(|a| a.as_f64()).sum::<f64>() * inv_n;
                if let Some(g) = grads.as_mut() {
                    let dgr = batch.real_latents.mapv(|z| z * real::<F>(-beta * inv_n));
                    let dfr = model
                        .projector
                        .backward_raw(&pcache, &dgr, Some(&mut g.projector), true)
                        .expect("projector input grad");
                    real_dir_df = Some(dfr);
                }
            }
        }
    }

    let loss = e_real - e_fake - beta * align_mean
        + alpha
            * marginal
                .iter()
                .map(|e| e.as_f64() * e.as_f64())
                .sum::<f64>()
            * inv_n;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            iter: 0,
            reason: format!("EBM loss is {loss}"),
        });
    }

    if let Some(g) = grads.as_mut() {
        match model.variant {
            EnergyVariant::NormDirection => {
                // d(½‖f‖²)/df = f, scaled per row
                for (i, mut row) in df.rows_mut().into_iter().enumerate() {
                    let fr = f.row(i);
                    let c = coef[i];
                    ndarray::Zip::from(&mut row).and(&fr).for_each(|d, &fij| *d = c * fij);
                }
            }
            EnergyVariant::MultiHead => {
                let head = model.head_prime.as_ref().expect("multi-head has g'");
                let (_, hcache) = head.forward_cached(&f);
                let gy = coef.view().insert_axis(Axis(1)).to_owned();
                let hp = g.head_prime.as_mut().expect("multi-head grads");
                df = head
                    .backward(&hcache, &gy, Some(hp), true)
                    .expect("head input grad");
            }
        }
        if let Some(dfr) = real_dir_df {
            let mut top = df.slice_mut(s![..n, ..]);
            top += &dfr;
        }
        model
            .feature_net
            .backward(&fcache, &df, Some(&mut g.feature), false);
    }

    Ok((
        EbmLossParts {
            loss,
            energy_real_mean: e_real,
            energy_fake_mean: e_fake,
        },
        grads,
    ))
}

/// Convenience constructor for unit latents in tests and the trainer.
pub fn latent_rows<F: Real>(rows: Vec<UnitLatent<F>>) -> Array2<F> {
    let d = rows[0].view().len();
    let mut m = Array2::zeros((rows.len(), d));
    for (i, z) in rows.iter().enumerate() {
        m.row_mut(i).assign(&z.view());
    }
    m
}
