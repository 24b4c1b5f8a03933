//! Dense layer with optional bias and optional spectral normalization.

use super::ArrayVisit;
use crate::num::{real, Real};
use crate::rng::normal_vector;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, CowArray, Ix2};
use rand::Rng;

/// Persisted power-iteration state for spectral normalization.
///
/// Only the singular-vector estimates are state; σ itself is recomputed as
/// uᵀWv from the current weight, so between refreshes the layer is a pure,
/// differentiable function of W (gradients flow through both W and σ).
#[derive(Clone, Debug)]
pub struct SpectralState<F> {
    pub u: Array1<F>,
    pub v: Array1<F>,
}

impl<F: Real> SpectralState<F> {
    /// σ = uᵀ W v, floored away from zero.
    pub fn sigma(&self, weight: &Array2<F>) -> F {
        let s = self.u.dot(&weight.dot(&self.v));
        if s > real(1e-12) {
            s
        } else {
            real(1e-12)
        }
    }
}

/// y = x Ŵᵀ + b with Ŵ = W / σ(W) when spectral normalization is on.
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    /// (out, in)
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub spectral: Option<SpectralState<F>>,
}

/// Parameter gradients accumulated by [`Linear::backward`].
#[derive(Clone, Debug)]
pub struct LinearGrads<F: Real> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    /// He-normal init: W ~ N(0, (gain / sqrt(in_dim))²), zero bias.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        spectral: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((out_dim, in_dim), || crate::rng::normal::<F>(rng) * real(std));
        let mut layer = Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_dim)),
            spectral: None,
        };
        if spectral {
            let u = normalize(normal_vector(rng, out_dim));
            layer.spectral = Some(SpectralState {
                v: Array1::zeros(in_dim),
                u,
            });
            layer.converge_spectral(50);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// W / σ when constrained, otherwise a view of W.
    pub fn effective_weight(&self) -> CowArray<'_, F, Ix2> {
        match &self.spectral {
            Some(s) => {
                let sigma = s.sigma(&self.weight);
                CowArray::from(self.weight.mapv(|w| w / sigma))
            }
            None => CowArray::from(self.weight.view()),
        }
    }

    /// One power-iteration step: v ∝ Wᵀu, u ∝ Wv.
    pub fn refresh_spectral(&mut self) {
        if let Some(s) = self.spectral.as_mut() {
            s.v = normalize(self.weight.t().dot(&s.u));
            s.u = normalize(self.weight.dot(&s.v));
        }
    }

    /// Run `iters` power-iteration steps (used at init and after loading a
    /// checkpoint for evaluation).
    pub fn converge_spectral(&mut self, iters: usize) {
        for _ in 0..iters {
            self.refresh_spectral();
        }
    }

    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.effective_weight();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(0));
        }
        y
    }

    /// Backprop. `gy` is the upstream gradient at the layer output.
    /// Accumulates parameter gradients into `grads` when given; returns the
    /// input gradient when `want_gx`.
    ///
    /// With spectral normalization the gradient flows through both W and
    /// σ = uᵀWv (u, v frozen): gW = gŴ/σ − (⟨gŴ,W⟩/σ²) u vᵀ.
    pub fn backward(
        &self,
        x: &Array2<F>,
        gy: &Array2<F>,
        grads: Option<&mut LinearGrads<F>>,
        want_gx: bool,
    ) -> Option<Array2<F>> {
        let w_eff = self.effective_weight();
        if let Some(g) = grads {
            let g_weff = gy.t().dot(x);
            match &self.spectral {
                Some(s) => {
                    let sigma = s.sigma(&self.weight);
                    let inner = (&g_weff * &self.weight).sum() / (sigma * sigma);
                    let mut gw = g_weff.mapv(|v| v / sigma);
                    for (i, ui) in s.u.iter().enumerate() {
                        let scale = *ui * inner;
                        gw.row_mut(i).zip_mut_with(&s.v, |g, &vj| *g = *g - scale * vj);
                    }
                    g.weight += &gw;
                }
                None => g.weight += &g_weff,
            }
            if let (Some(gb), Some(_)) = (g.bias.as_mut(), self.bias.as_ref()) {
                *gb += &gy.sum_axis(Axis(0));
            }
        }
        want_gx.then(|| gy.dot(&w_eff))
    }
}

impl<F: Real> LinearGrads<F> {
    pub fn zeros_like(layer: &Linear<F>) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: layer.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }
}

impl<F: Real> ArrayVisit<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        f(format!("{prefix}.weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b.view().into_dyn());
        }
        if let Some(s) = &self.spectral {
            f(format!("{prefix}.sn_u"), s.u.view().into_dyn());
            f(format!("{prefix}.sn_v"), s.v.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        f(format!("{prefix}.weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b.view_mut().into_dyn());
        }
        if let Some(s) = &mut self.spectral {
            f(format!("{prefix}.sn_u"), s.u.view_mut().into_dyn());
            f(format!("{prefix}.sn_v"), s.v.view_mut().into_dyn());
        }
    }
}

impl<F: Real> Linear<F> {
    /// Optimizer-visible parameters (weights and biases; spectral state is
    /// derived, not trained).
    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        let Linear { weight, bias, .. } = self;
        out.push(weight.as_slice_mut().expect("contiguous"));
        if let Some(b) = bias {
            out.push(b.as_slice_mut().expect("contiguous"));
        }
    }

    /// Grad slices in the same order as [`Self::collect_trainable`].
    pub fn collect_grads<'a>(grads: &'a LinearGrads<F>, out: &mut Vec<&'a [F]>) {
        out.push(grads.weight.as_slice().expect("contiguous"));
        if let Some(b) = &grads.bias {
            out.push(b.as_slice().expect("contiguous"));
        }
    }
}

fn norm<F: Real>(v: &Array1<F>) -> F {
    v.dot(v).sqrt()
}

fn normalize<F: Real>(v: Array1<F>) -> Array1<F> {
    let n = norm(&v);
    if n > real(1e-12) {
        v.mapv(|x| x / n)
    } else {
        let mut e = Array1::zeros(v.raw_dim());
        e[0] = F::one();
        e
    }
}
