//! Stochastic gradient Langevin dynamics with a persistent replay buffer.
//!
//! One update is x' = clamp(x − λ·∇E(x) + ε·δ), δ ~ N(0, I). The coupled
//! textbook form sets λ = ε²/2; training configs expose the two knobs
//! independently. Chains are persistent: starts are drawn from the buffer
//! (fresh with probability `reinit_prob`) and finals are pushed back. One
//! `run_chain` call is one persistent segment; when a policy is given, a
//! random augmentation is applied at the start of every `aug_period` steps.

use crate::augment::AugmentationPolicy;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::num::{real, Real};
use crate::rng::fork;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Chains per work unit in parallel sampling. Fixed so that matmul batch
/// layout never depends on thread count (bit-reproducibility).
const CHAIN_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct SgldConfig {
    /// Steps per segment (training default 60).
    pub step_count: usize,
    /// λ, the ε²/2 factor of the coupled form.
    pub grad_coeff: f64,
    /// ε, the noise factor.
    pub noise_scale: f64,
    /// Per-coordinate bounds applied after every update.
    pub clamp: Option<(f64, f64)>,
    /// Augment at the start of every `aug_period` steps (when a policy is given).
    pub aug_period: usize,
}

impl SgldConfig {
    /// The coupled single-ε parameterization: λ = ε²/2, noise = ε.
    pub fn coupled(epsilon: f64, step_count: usize, clamp: Option<(f64, f64)>) -> Self {
        Self {
            step_count,
            grad_coeff: epsilon * epsilon / 2.0,
            noise_scale: epsilon,
            clamp,
            aug_period: step_count.max(1),
        }
    }
}

/// A differentiable sampling energy: anything exposing ∇ₓE on a batch.
pub trait EnergySource<F: Real>: Sync {
    fn grad_batch(&self, x: &Array2<F>) -> Result<Array2<F>>;
}

/// Marginal energy of a model.
pub struct MarginalEnergy<'a, F: Real>(pub &'a EnergyModel<F>);

impl<F: Real> EnergySource<F> for MarginalEnergy<'_, F> {
    fn grad_batch(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.0.grad_x(x, None)
    }
}

/// Joint/compositional energy with a fixed conditioning vector (a latent or
/// a sum of concept latents).
pub struct ConditionalEnergy<'a, F: Real> {
    pub model: &'a EnergyModel<F>,
    pub cond: Array1<F>,
}

impl<F: Real> EnergySource<F> for ConditionalEnergy<'_, F> {
    fn grad_batch(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.model.grad_x(x, Some(self.cond.view()))
    }
}

/// Closure-backed source for tests and analytic oracles.
pub struct FnEnergy<G>(pub G);

impl<F: Real, G: Fn(&Array2<F>) -> Array2<F> + Sync> EnergySource<F> for FnEnergy<G> {
    fn grad_batch(&self, x: &Array2<F>) -> Result<Array2<F>> {
        Ok((self.0)(x))
    }
}

#[inline]
fn clamp_val<F: Real>(v: F, clamp: Option<(f64, f64)>) -> F {
    match clamp {
        Some((lo, hi)) => {
            let lo = real(lo);
            let hi = real(hi);
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        }
        None => v,
    }
}

/// One Langevin update of a single state:
/// x' = clamp(x − λ·grad_fn(x) + ε·δ), δ ~ N(0, I).
pub fn sgld_step<F: Real>(
    grad_fn: impl Fn(ArrayView1<'_, F>) -> Array1<F>,
    x: &Array1<F>,
    cfg: &SgldConfig,
    rng: &mut impl Rng,
) -> Result<Array1<F>> {
    let g = grad_fn(x.view());
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::ChainDiverged {
            step: 0,
            chain: None,
            state: x.iter().map(|v| v.as_f64()).collect(),
        });
    }
    let lambda = real::<F>(cfg.grad_coeff);
    let eps = real::<F>(cfg.noise_scale);
    let mut out = x.clone();
    for (o, gi) in out.iter_mut().zip(g.iter()) {
        let delta: F = crate::rng::normal(rng);
        *o = clamp_val(*o - lambda * *gi + eps * delta, cfg.clamp);
    }
    Ok(out)
}

/// Run a batch of chains side by side (one gradient evaluation per step for
/// the whole batch, per-chain noise streams).
pub fn run_chains<F: Real>(
    src: &impl EnergySource<F>,
    mut x: Array2<F>,
    cfg: &SgldConfig,
    policy: Option<&AugmentationPolicy>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Array2<F>> {
    assert_eq!(x.nrows(), rngs.len(), "one rng stream per chain");
    let lambda = real::<F>(cfg.grad_coeff);
    let eps = real::<F>(cfg.noise_scale);
    let aug_period = cfg.aug_period.max(1);
    for t in 0..cfg.step_count {
        if let Some(p) = policy {
            if t % aug_period == 0 {
                for (i, row) in x.rows_mut().into_iter().enumerate() {
                    p.apply_row(row, &mut rngs[i]);
                }
            }
        }
        let g = src.grad_batch(&x)?;
        for (i, (mut row, grow)) in x
            .rows_mut()
            .into_iter()
            .zip(g.rows().into_iter())
            .enumerate()
        {
            if grow.iter().any(|v| !v.is_finite()) {
                return Err(Error::ChainDiverged {
                    step: t,
                    chain: Some(i),
                    state: row.iter().map(|v| v.as_f64()).collect(),
                });
            }
            let rng = &mut rngs[i];
            for (o, gi) in row.iter_mut().zip(grow.iter()) {
                let delta: F = crate::rng::normal(rng);
                *o = clamp_val(*o - lambda * *gi + eps * delta, cfg.clamp);
            }
        }
    }
    Ok(x)
}

/// One persistent segment for a single chain: optional augmentation kicks,
/// then `step_count` updates.
pub fn run_chain<F: Real>(
    src: &impl EnergySource<F>,
    x0: Array1<F>,
    cfg: &SgldConfig,
    policy: Option<&AugmentationPolicy>,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<F>> {
    let batch = x0.insert_axis(Axis(0)).to_owned();
    let mut rngs = [rng.clone()];
    let out = run_chains(src, batch, cfg, policy, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.row(0).to_owned())
}

/// Chunked parallel chain runner: deterministic regardless of thread count
/// (chunks are fixed at [`CHAIN_CHUNK`] chains; chain i always uses rngs[i]).
pub fn run_chains_parallel<F: Real>(
    src: &(impl EnergySource<F> + Sync),
    starts: Array2<F>,
    cfg: &SgldConfig,
    policy: Option<&AugmentationPolicy>,
    rngs: Vec<ChaCha8Rng>,
) -> Result<Array2<F>> {
    let n = starts.nrows();
    assert_eq!(n, rngs.len());
    if n == 0 {
        return Ok(starts);
    }
    let d = starts.ncols();
    let chunk_starts: Vec<(Array2<F>, Vec<ChaCha8Rng>)> = starts
        .axis_chunks_iter(Axis(0), CHAIN_CHUNK)
        .zip(rngs.chunks(CHAIN_CHUNK))
        .map(|(xs, rs)| (xs.to_owned(), rs.to_vec()))
        .collect();
    let results: Result<Vec<Array2<F>>> = chunk_starts
        .into_par_iter()
        .map(|(xs, mut rs)| run_chains(src, xs, cfg, policy, &mut rs))
        .collect();
    let parts = results?;
    let mut out = Array2::zeros((n, d));
    let mut row = 0;
    for part in parts {
        for r in part.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok(out)
}

// ── replay buffer ───────────────────────────────────────────────────────

/// Uniform initializer over the clamped box.
#[derive(Clone, Copy, Debug)]
pub struct UniformInit {
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
}

impl UniformInit {
    pub fn draw<F: Real>(&self, rng: &mut impl Rng) -> Array1<F> {
        Array1::from_shape_simple_fn(self.dim, || crate::rng::uniform(rng, self.lo, self.hi))
    }
}

/// Persistent store of chain states.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<F: Real> {
    capacity: usize,
    reinit_prob: f64,
    states: Vec<Array1<F>>,
}

impl<F: Real> ReplayBuffer<F> {
    pub fn new(capacity: usize, reinit_prob: f64) -> Self {
        assert!(capacity > 0);
        assert!((0.0..=1.0).contains(&reinit_prob));
        Self {
            capacity,
            reinit_prob,
            states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reinit_prob(&self) -> f64 {
        self.reinit_prob
    }

    /// n chain starts. Each start is an independent fresh draw with
    /// probability `reinit_prob` (always, when the buffer is empty),
    /// otherwise a uniformly chosen stored state. Returns the starts and the
    /// fresh count.
    pub fn draw_starts(
        &self,
        n: usize,
        init: &UniformInit,
        rng: &mut impl Rng,
    ) -> (Array2<F>, usize) {
        let mut out = Array2::zeros((n, init.dim));
        let mut fresh = 0;
        for i in 0..n {
            let take_fresh =
                self.states.is_empty() || rng.random_range(0.0..1.0) < self.reinit_prob;
            if take_fresh {
                out.row_mut(i).assign(&init.draw::<F>(rng));
                fresh += 1;
            } else {
                let idx = rng.random_range(0..self.states.len());
                out.row_mut(i).assign(&self.states[idx]);
            }
        }
        (out, fresh)
    }

    /// Append states; over capacity, evict uniformly random pre-existing
    /// entries first.
    pub fn push(&mut self, states: &Array2<F>, rng: &mut impl Rng) {
        let incoming = states.nrows();
        let overflow = (self.states.len() + incoming).saturating_sub(self.capacity);
        let evict_old = overflow.min(self.states.len());
        for _ in 0..evict_old {
            let idx = rng.random_range(0..self.states.len());
            self.states.swap_remove(idx);
        }
        for row in states.rows() {
            self.states.push(row.to_owned());
        }
        while self.states.len() > self.capacity {
            let idx = rng.random_range(0..self.states.len());
            self.states.swap_remove(idx);
        }
    }

    /// Buffer contents as one (count, dim) matrix (checkpoint form).
    pub fn to_matrix(&self, dim: usize) -> Array2<F> {
        let mut m = Array2::zeros((self.states.len(), dim));
        for (i, s) in self.states.iter().enumerate() {
            m.row_mut(i).assign(s);
        }
        m
    }

    pub fn from_matrix(capacity: usize, reinit_prob: f64, m: &Array2<F>) -> Self {
        Self {
            capacity,
            reinit_prob,
            states: m.rows().into_iter().map(|r| r.to_owned()).collect(),
        }
    }
}

/// Draw persistent starts, run one training segment on the marginal energy,
/// push finals back. Returns (samples, fresh-start count).
pub fn sample_batch<F: Real>(
    model: &EnergyModel<F>,
    buffer: &mut ReplayBuffer<F>,
    init: &UniformInit,
    n: usize,
    cfg: &SgldConfig,
    policy: Option<&AugmentationPolicy>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<F>, usize)> {
    let (starts, fresh) = buffer.draw_starts(n, init, rng);
    let rngs: Vec<ChaCha8Rng> = (0..n).map(|_| fork(rng)).collect();
    let finals = run_chains_parallel(&MarginalEnergy(model), starts, cfg, policy, rngs)?;
    buffer.push(&finals, rng);
    Ok((finals, fresh))
}

/// Evaluation-mode sampling: fresh uniform starts, longer chains, no buffer.
pub fn sample_eval<F: Real>(
    model: &EnergyModel<F>,
    init: &UniformInit,
    n: usize,
    cfg: &SgldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<F>> {
    let mut starts = Array2::zeros((n, init.dim));
    for i in 0..n {
        starts.row_mut(i).assign(&init.draw::<F>(rng));
    }
    let rngs: Vec<ChaCha8Rng> = (0..n).map(|_| fork(rng)).collect();
    run_chains_parallel(&MarginalEnergy(model), starts, cfg, None, rngs)
}
