//! Spherical latent-variable energy model.
//!
//! The feature network f maps a data point to ℝ^{d_z}; its norm carries the
//! marginal energy and its direction, pushed through a directional projector
//! g onto the unit sphere, predicts the contrastive latent:
//!
//! ```text
//! E(x, z) = ½‖f(x)‖² − β · g(f(x)/‖f(x)‖)ᵀ z
//! E(x)    = ½‖f(x)‖²              (z-integral constant dropped)
//! ```
//!
//! An alternative multi-head variant (ablation only) models the marginal with
//! a scalar head g'(f(x)) and the conditional term with −zᵀ g(f(x)).

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{
    Activation, ArrayVisit, ConvNet, ConvNetCache, ConvNetGrads, Linear, LinearGrads, Mlp,
    MlpCache, MlpGrads,
};
use crate::num::{real, Real};
use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

/// Norm threshold below which normalization refuses to divide.
pub const DEGENERATE_EPS: f64 = 1e-12;
/// Tolerance on the unit-norm invariant of latents.
pub const UNIT_TOL: f64 = 1e-6;

// ── domain types ────────────────────────────────────────────────────────

/// Raw feature-network output f(x).
#[derive(Clone, Debug)]
pub struct FeatureVector<F: Real>(Array1<F>);

impl<F: Real> FeatureVector<F> {
    pub fn new(values: Array1<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn view(&self) -> ArrayView1<'_, F> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<F> {
        self.0
    }
}

/// Point on the sphere S^{d_z−1}.
#[derive(Clone, Debug)]
pub struct UnitLatent<F: Real>(Array1<F>);

impl<F: Real> UnitLatent<F> {
    /// Accepts a vector already on the sphere (to 1e-6).
    pub fn new(values: Array1<F>) -> Result<Self> {
        let n = values.dot(&values).sqrt().as_f64();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Argument(format!("latent norm {n} is not 1 ± 1e-6")));
        }
        Ok(Self(values))
    }

    /// Normalizes an arbitrary vector onto the sphere.
    pub fn from_unnormalized(values: Array1<F>) -> Result<Self> {
        let n = values.dot(&values).sqrt();
        if n.as_f64() <= DEGENERATE_EPS {
            return Err(Error::DegenerateFeature { norm: n.as_f64() });
        }
        Ok(Self(values.mapv(|v| v / n)))
    }

    pub fn view(&self) -> ArrayView1<'_, F> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<F> {
        self.0
    }
}

/// Unnormalized negative log-density (nats).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyValue<F: Real>(pub F);

impl<F: Real> EnergyValue<F> {
    pub fn value(self) -> F {
        self.0
    }
}

/// f(x)/‖f(x)‖, the directional part of the feature vector.
pub fn direction<F: Real>(f: &FeatureVector<F>) -> Result<UnitLatent<F>> {
    UnitLatent::from_unnormalized(f.view().to_owned())
}

// ── feature network ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum FeatureNet<F: Real> {
    Mlp(Mlp<F>),
    Conv(ConvNet<F>),
}

pub enum FeatureCache<F: Real> {
    Mlp(MlpCache<F>),
    Conv(ConvNetCache<F>),
}

#[derive(Clone, Debug)]
pub enum FeatureGrads<F: Real> {
    Mlp(MlpGrads<F>),
    Conv(ConvNetGrads<F>),
}

impl<F: Real> FeatureNet<F> {
    pub fn in_dim(&self) -> usize {
        match self {
            FeatureNet::Mlp(m) => m.in_dim(),
            FeatureNet::Conv(c) => c.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureNet::Mlp(m) => m.out_dim(),
            FeatureNet::Conv(c) => c.out_dim(),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        match self {
            FeatureNet::Mlp(m) => m.forward(x),
            FeatureNet::Conv(c) => c.forward(x),
        }
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, FeatureCache<F>) {
        match self {
            FeatureNet::Mlp(m) => {
                let (y, c) = m.forward_cached(x);
                (y, FeatureCache::Mlp(c))
            }
            FeatureNet::Conv(c) => {
                let (y, cc) = c.forward_cached(x);
                (y, FeatureCache::Conv(cc))
            }
        }
    }

    pub fn backward(
        &self,
        cache: &FeatureCache<F>,
        gy: &Array2<F>,
        grads: Option<&mut FeatureGrads<F>>,
        want_gx: bool,
    ) -> Option<Array2<F>> {
        match (self, cache) {
            (FeatureNet::Mlp(m), FeatureCache::Mlp(c)) => {
                let g = grads.map(|g| match g {
                    FeatureGrads::Mlp(g) => g,
                    FeatureGrads::Conv(_) => unreachable!("grad/net variant mismatch"),
                });
                m.backward(c, gy, g, want_gx)
            }
            (FeatureNet::Conv(net), FeatureCache::Conv(c)) => {
                let g = grads.map(|g| match g {
                    FeatureGrads::Conv(g) => g,
                    FeatureGrads::Mlp(_) => unreachable!("grad/net variant mismatch"),
                });
                net.backward(c, gy, g, want_gx)
            }
            _ => unreachable!("cache/net variant mismatch"),
        }
    }

    pub fn refresh_spectral(&mut self) {
        match self {
            FeatureNet::Mlp(m) => m.refresh_spectral(),
            FeatureNet::Conv(c) => c.refresh_spectral(),
        }
    }

    pub fn converge_spectral(&mut self, iters: usize) {
        match self {
            FeatureNet::Mlp(m) => m.converge_spectral(iters),
            FeatureNet::Conv(c) => c.converge_spectral(iters),
        }
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        match self {
            FeatureNet::Mlp(m) => m.collect_trainable(out),
            FeatureNet::Conv(c) => c.collect_trainable(out),
        }
    }
}

impl<F: Real> FeatureGrads<F> {
    pub fn zeros_like(net: &FeatureNet<F>) -> Self {
        match net {
            FeatureNet::Mlp(m) => FeatureGrads::Mlp(MlpGrads::zeros_like(m)),
            FeatureNet::Conv(c) => FeatureGrads::Conv(ConvNetGrads::zeros_like(c)),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a [F]>) {
        match self {
            FeatureGrads::Mlp(g) => Mlp::collect_grads(g, out),
            FeatureGrads::Conv(g) => ConvNet::collect_grads(g, out),
        }
    }
}

impl<F: Real> ArrayVisit<F> for FeatureNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        match self {
            FeatureNet::Mlp(m) => m.visit(prefix, f),
            FeatureNet::Conv(c) => c.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        match self {
            FeatureNet::Mlp(m) => m.visit_mut(prefix, f),
            FeatureNet::Conv(c) => c.visit_mut(prefix, f),
        }
    }
}

// ── directional projector ───────────────────────────────────────────────

/// Projector ablation variants: 2-layer MLP, single linear map, or identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorKind {
    Mlp,
    Linear,
    Identity,
}

/// g: S^{d_z−1} → S^{d_z−1}. The MLP form is W₂·leaky_relu(W₁u) with no bias,
/// followed by ℓ₂ normalization.
#[derive(Clone, Debug)]
pub enum Projector<F: Real> {
    Identity,
    Linear(Linear<F>),
    Mlp {
        l1: Linear<F>,
        l2: Linear<F>,
        slope: f64,
    },
}

pub struct ProjCache<F: Real> {
    input: Array2<F>,
    pre1: Option<Array2<F>>,
    hidden: Option<Array2<F>>,
    pub raw: Array2<F>,
    norms: Option<Array1<F>>,
    pub unit: Option<Array2<F>>,
}

#[derive(Clone, Debug)]
pub enum ProjGrads<F: Real> {
    Identity,
    Linear(LinearGrads<F>),
    Mlp {
        l1: LinearGrads<F>,
        l2: LinearGrads<F>,
    },
}

impl<F: Real> Projector<F> {
    pub fn new(kind: ProjectorKind, d_z: usize, slope: f64, rng: &mut impl Rng) -> Self {
        match kind {
            ProjectorKind::Identity => Projector::Identity,
            ProjectorKind::Linear => {
                Projector::Linear(Linear::new(d_z, d_z, false, false, 1.0, rng))
            }
            ProjectorKind::Mlp => {
                let gain = Activation::LeakyRelu(slope).init_gain();
                Projector::Mlp {
                    l1: Linear::new(d_z, d_z, false, false, gain, rng),
                    l2: Linear::new(d_z, d_z, false, false, 1.0, rng),
                    slope,
                }
            }
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        match self {
            Projector::Identity => ProjectorKind::Identity,
            Projector::Linear(_) => ProjectorKind::Linear,
            Projector::Mlp { .. } => ProjectorKind::Mlp,
        }
    }

    /// Unnormalized output (the multi-head conditional term uses this form).
    pub fn forward_raw(&self, u: &Array2<F>) -> (Array2<F>, ProjCache<F>) {
        let (raw, pre1, hidden) = match self {
            Projector::Identity => (u.clone(), None, None),
            Projector::Linear(l) => (l.forward(u), None, None),
            Projector::Mlp { l1, l2, slope } => {
                let act = Activation::LeakyRelu(*slope);
                let pre = l1.forward(u);
                let hid = pre.mapv(|z| act.apply(z));
                (l2.forward(&hid), Some(pre), Some(hid))
            }
        };
        (
            raw.clone(),
            ProjCache {
                input: u.clone(),
                pre1,
                hidden,
                raw,
                norms: None,
                unit: None,
            },
        )
    }

    /// Normalized output on the sphere; errors if any pre-normalization row
    /// collapses below 1e-12.
    pub fn forward_unit(&self, u: &Array2<F>) -> Result<(Array2<F>, ProjCache<F>)> {
        let (raw, mut cache) = self.forward_raw(u);
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(bad) = norms.iter().find(|n| n.as_f64() <= DEGENERATE_EPS) {
            return Err(Error::DegenerateProjection { norm: bad.as_f64() });
        }
        let unit = &raw / &norms.view().insert_axis(Axis(1));
        cache.norms = Some(norms);
        cache.unit = Some(unit.clone());
        Ok((unit, cache))
    }

    /// Backprop through the raw (unnormalized) map.
    pub fn backward_raw(
        &self,
        cache: &ProjCache<F>,
        g_raw: &Array2<F>,
        grads: Option<&mut ProjGrads<F>>,
        want_gu: bool,
    ) -> Option<Array2<F>> {
        match self {
            Projector::Identity => want_gu.then(|| g_raw.clone()),
            Projector::Linear(l) => {
                let lg = grads.map(|g| match g {
                    ProjGrads::Linear(g) => g,
                    _ => unreachable!("projector grad variant mismatch"),
                });
                l.backward(&cache.input, g_raw, lg, want_gu)
            }
            Projector::Mlp { l1, l2, slope } => {
                let act = Activation::LeakyRelu(*slope);
                let (g1, g2) = match grads {
                    Some(ProjGrads::Mlp { l1, l2 }) => (Some(l1), Some(l2)),
                    None => (None, None),
                    _ => unreachable!("projector grad variant mismatch"),
                };
                let hidden = cache.hidden.as_ref().expect("mlp cache");
                let mut gh = l2.backward(hidden, g_raw, g2, true).expect("hidden grad");
                ndarray::Zip::from(&mut gh)
                    .and(cache.pre1.as_ref().expect("mlp cache"))
                    .for_each(|g, &z| *g = *g * act.derivative(z));
                l1.backward(&cache.input, &gh, g1, want_gu)
            }
        }
    }

    /// Backprop through the normalized map (requires a cache from
    /// [`Self::forward_unit`]).
    pub fn backward_unit(
        &self,
        cache: &ProjCache<F>,
        g_unit: &Array2<F>,
        grads: Option<&mut ProjGrads<F>>,
        want_gu: bool,
    ) -> Option<Array2<F>> {
        let unit = cache.unit.as_ref().expect("unit cache");
        let norms = cache.norms.as_ref().expect("unit cache");
        let mut g_raw = g_unit.clone();
        for (i, mut row) in g_raw.rows_mut().into_iter().enumerate() {
            let p = unit.row(i);
            let dot = p.dot(&row);
            let r = norms[i];
            row.zip_mut_with(&p, |g, &pi| *g = (*g - dot * pi) / r);
        }
        self.backward_raw(cache, &g_raw, grads, want_gu)
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        match self {
            Projector::Identity => {}
            Projector::Linear(l) => l.collect_trainable(out),
            Projector::Mlp { l1, l2, .. } => {
                l1.collect_trainable(out);
                l2.collect_trainable(out);
            }
        }
    }
}

impl<F: Real> ProjGrads<F> {
    pub fn zeros_like(p: &Projector<F>) -> Self {
        match p {
            Projector::Identity => ProjGrads::Identity,
            Projector::Linear(l) => ProjGrads::Linear(LinearGrads::zeros_like(l)),
            Projector::Mlp { l1, l2, .. } => ProjGrads::Mlp {
                l1: LinearGrads::zeros_like(l1),
                l2: LinearGrads::zeros_like(l2),
            },
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a [F]>) {
        match self {
            ProjGrads::Identity => {}
            ProjGrads::Linear(g) => Linear::collect_grads(g, out),
            ProjGrads::Mlp { l1, l2 } => {
                Linear::collect_grads(l1, out);
                Linear::collect_grads(l2, out);
            }
        }
    }
}

impl<F: Real> ArrayVisit<F> for Projector<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        match self {
            Projector::Identity => {}
            Projector::Linear(l) => l.visit(&format!("{prefix}.lin"), f),
            Projector::Mlp { l1, l2, .. } => {
                l1.visit(&format!("{prefix}.l1"), f);
                l2.visit(&format!("{prefix}.l2"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        match self {
            Projector::Identity => {}
            Projector::Linear(l) => l.visit_mut(&format!("{prefix}.lin"), f),
            Projector::Mlp { l1, l2, .. } => {
                l1.visit_mut(&format!("{prefix}.l1"), f);
                l2.visit_mut(&format!("{prefix}.l2"), f);
            }
        }
    }
}

// ── the model ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyVariant {
    NormDirection,
    MultiHead,
}

#[derive(Clone, Debug)]
pub struct EnergyModel<F: Real> {
    pub feature_net: FeatureNet<F>,
    pub projector: Projector<F>,
    /// Scalar marginal head g' (multi-head variant only).
    pub head_prime: Option<Mlp<F>>,
    pub beta: F,
    pub variant: EnergyVariant,
    /// Reproduce the literal unsquared ½‖f‖ norm term in the compositional
    /// energy.
    pub comp_unsquared: bool,
}

#[derive(Clone, Debug)]
pub struct EbmGrads<F: Real> {
    pub feature: FeatureGrads<F>,
    pub projector: ProjGrads<F>,
    pub head_prime: Option<MlpGrads<F>>,
}

impl<F: Real> EbmGrads<F> {
    pub fn zeros_like(model: &EnergyModel<F>) -> Self {
        Self {
            feature: FeatureGrads::zeros_like(&model.feature_net),
            projector: ProjGrads::zeros_like(&model.projector),
            head_prime: model.head_prime.as_ref().map(MlpGrads::zeros_like),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a [F]>) {
        self.feature.collect(out);
        self.projector.collect(out);
        if let Some(h) = &self.head_prime {
            Mlp::collect_grads(h, out);
        }
    }
}

pub struct EnergyModelConfig {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub d_z: usize,
    pub spectral_norm: bool,
    pub projector: ProjectorKind,
    pub projector_slope: f64,
    pub variant: EnergyVariant,
    pub beta: f64,
    pub comp_unsquared: bool,
}

impl<F: Real> EnergyModel<F> {
    /// MLP feature net for vector data.
    pub fn new_mlp(cfg: &EnergyModelConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.in_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.d_z);
        let feature_net = FeatureNet::Mlp(Mlp::new(
            &dims,
            Activation::Swish,
            true,
            cfg.spectral_norm,
            rng,
        ));
        Self::assemble(cfg, feature_net, rng)
    }

    /// Small conv net for (h, w) grayscale rasters.
    pub fn new_conv(cfg: &EnergyModelConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let feature_net = FeatureNet::Conv(ConvNet::new(
            h,
            w,
            (16, 32),
            128,
            cfg.d_z,
            Activation::Swish,
            cfg.spectral_norm,
            rng,
        ));
        Self::assemble(cfg, feature_net, rng)
    }

    fn assemble(cfg: &EnergyModelConfig, feature_net: FeatureNet<F>, rng: &mut impl Rng) -> Self {
        let projector = Projector::new(cfg.projector, cfg.d_z, cfg.projector_slope, rng);
        let head_prime = (cfg.variant == EnergyVariant::MultiHead).then(|| {
            Mlp::new(
                &[cfg.d_z, cfg.d_z, 1],
                Activation::LeakyRelu(cfg.projector_slope),
                false,
                false,
                rng,
            )
        });
        Self {
            feature_net,
            projector,
            head_prime,
            beta: real(cfg.beta),
            variant: cfg.variant,
            comp_unsquared: cfg.comp_unsquared,
        }
    }

    pub fn d_z(&self) -> usize {
        self.feature_net.out_dim()
    }

    fn check_input(&self, x: &Array2<F>) -> Result<()> {
        if x.ncols() != self.feature_net.in_dim() {
            return Err(Error::Config(format!(
                "input dimensionality {} does not match model ({})",
                x.ncols(),
                self.feature_net.in_dim()
            )));
        }
        Ok(())
    }

    /// Batched feature forward, f(x): (n, in) -> (n, d_z).
    pub fn forward_features(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        Ok(self.feature_net.forward(x))
    }

    /// Single-point feature forward.
    pub fn features_one(&self, x: ArrayView1<'_, F>) -> Result<FeatureVector<F>> {
        let batch = x.insert_axis(Axis(0)).to_owned();
        let f = self.forward_features(&batch)?;
        FeatureVector::new(f.row(0).to_owned())
    }

    /// g applied to a point on the sphere.
    pub fn project_direction(&self, u: &UnitLatent<F>) -> Result<UnitLatent<F>> {
        let batch = u.view().insert_axis(Axis(0)).to_owned();
        let (p, _) = self.projector.forward_unit(&batch)?;
        UnitLatent::new(p.row(0).to_owned())
    }

    /// Marginal energies for a batch: ½‖f‖² in the norm-direction variant,
    /// the scalar head g'(f) in the multi-head variant.
    pub fn marginal_energy_batch(&self, x: &Array2<F>) -> Result<Array1<F>> {
        let f = self.forward_features(x)?;
        Ok(self.marginal_from_features(&f))
    }

    pub(crate) fn marginal_from_features(&self, f: &Array2<F>) -> Array1<F> {
        match self.variant {
            EnergyVariant::NormDirection => f.map_axis(Axis(1), |r| r.dot(&r) * real(0.5)),
            EnergyVariant::MultiHead => {
                let head = self.head_prime.as_ref().expect("multi-head has g'");
                head.forward(f).index_axis(Axis(1), 0).to_owned()
            }
        }
    }

    pub fn marginal_energy(&self, x: ArrayView1<'_, F>) -> Result<EnergyValue<F>> {
        let batch = x.insert_axis(Axis(0)).to_owned();
        Ok(EnergyValue(self.marginal_energy_batch(&batch)?[0]))
    }

    /// Joint energy E(x, z) for a single point.
    pub fn joint_energy(&self, x: ArrayView1<'_, F>, z: &UnitLatent<F>) -> Result<EnergyValue<F>> {
        let batch = x.insert_axis(Axis(0)).to_owned();
        Ok(EnergyValue(self.joint_energy_batch(&batch, z)?[0]))
    }

    /// Joint energies of a batch against one shared latent.
    pub fn joint_energy_batch(&self, x: &Array2<F>, z: &UnitLatent<F>) -> Result<Array1<F>> {
        let f = self.forward_features(x)?;
        let marginal = self.marginal_from_features(&f);
        if self.beta == F::zero() {
            return Ok(marginal);
        }
        let align = self.alignment_from_features(&f, z.view())?;
        Ok(marginal - align.mapv(|a| a * self.beta))
    }

    /// Per-row alignment carrier: g(dir f)ᵀ c (norm-direction) or cᵀ g(f)
    /// (multi-head), for an arbitrary conditioning vector c.
    fn alignment_from_features(&self, f: &Array2<F>, c: ArrayView1<'_, F>) -> Result<Array1<F>> {
        match self.variant {
            EnergyVariant::NormDirection => {
                let (u, _) = unit_rows(f)?;
                let (p, _) = self.projector.forward_unit(&u)?;
                Ok(p.dot(&c))
            }
            EnergyVariant::MultiHead => {
                let (g, _) = self.projector.forward_raw(f);
                Ok(g.dot(&c))
            }
        }
    }

    /// Energy-based OOD score, higher ⇒ more out-of-distribution:
    /// s(x) = E(x) − β · g(dir f(x))ᵀ ĥ(x), with ĥ the normalized clean
    /// encoder output.
    pub fn ood_score(&self, encoder: &Encoder<F>, x: ArrayView1<'_, F>) -> Result<f64> {
        let batch = x.insert_axis(Axis(0)).to_owned();
        Ok(self.ood_score_batch(encoder, &batch)?[0])
    }

    /// Batched OOD scores (joint form; the marginal-only baseline is
    /// [`Self::marginal_energy_batch`]).
    pub fn ood_score_batch(&self, encoder: &Encoder<F>, x: &Array2<F>) -> Result<Vec<f64>> {
        let f = self.forward_features(x)?;
        let marginal = self.marginal_from_features(&f);
        if self.beta == F::zero() {
            return Ok(marginal.iter().map(|e| e.as_f64()).collect());
        }
        let h = encoder.encode_batch(x)?;
        let (hz, _) = unit_rows(&h)?;
        let p = match self.variant {
            EnergyVariant::NormDirection => {
                let (u, _) = unit_rows(&f)?;
                self.projector.forward_unit(&u)?.0
            }
            EnergyVariant::MultiHead => self.projector.forward_raw(&f).0,
        };
        let align = (&p * &hz).sum_axis(Axis(1));
        Ok(marginal
            .iter()
            .zip(align.iter())
            .map(|(e, a)| e.as_f64() - self.beta.as_f64() * a.as_f64())
            .collect())
    }

    /// Multi-concept conditional energy:
    /// ½‖f‖² − β Σ_a cos_sim(g(dir f), z̄_a). With one concept this equals
    /// the joint energy.
    pub fn compositional_energy(
        &self,
        x: ArrayView1<'_, F>,
        concepts: &[UnitLatent<F>],
    ) -> Result<EnergyValue<F>> {
        if concepts.is_empty() {
            return Err(Error::Argument("compositional energy needs ≥1 concept".into()));
        }
        let batch = x.insert_axis(Axis(0)).to_owned();
        let f = self.forward_features(&batch)?;
        let mut marginal = self.marginal_from_features(&f);
        if self.comp_unsquared {
            if let EnergyVariant::NormDirection = self.variant {
                marginal = f.map_axis(Axis(1), |r| r.dot(&r).sqrt() * real(0.5));
            }
        }
        if self.beta == F::zero() {
            return Ok(EnergyValue(marginal[0]));
        }
        let c = concept_sum(concepts);
        let align = self.alignment_from_features(&f, c.view())?;
        Ok(EnergyValue(marginal[0] - self.beta * align[0]))
    }

    /// The two multi-head components: (marginal head g'(f), conditional term
    /// −zᵀ g(f)). Errors unless the model is the multi-head variant.
    pub fn multihead_energy(
        &self,
        x: ArrayView1<'_, F>,
        z: &UnitLatent<F>,
    ) -> Result<(EnergyValue<F>, EnergyValue<F>)> {
        if self.variant != EnergyVariant::MultiHead || self.head_prime.is_none() {
            return Err(Error::Config(
                "multihead_energy requires the multi-head variant".into(),
            ));
        }
        let batch = x.insert_axis(Axis(0)).to_owned();
        let f = self.forward_features(&batch)?;
        let marginal = self.marginal_from_features(&f)[0];
        let (g, _) = self.projector.forward_raw(&f);
        let cond = -g.row(0).dot(&z.view());
        Ok((EnergyValue(marginal), EnergyValue(cond)))
    }

    /// ∇ₓ of the sampling energy. `cond = None` gives the marginal energy;
    /// `cond = Some(c)` the joint/compositional energy with conditioning
    /// vector c (one latent, or a sum of concept latents).
    pub fn grad_x(&self, x: &Array2<F>, cond: Option<ArrayView1<'_, F>>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let (f, cache) = self.feature_net.forward_cached(x);
        let mut df = match self.variant {
            EnergyVariant::NormDirection => f.clone(),
            EnergyVariant::MultiHead => {
                let head = self.head_prime.as_ref().expect("multi-head has g'");
                let (hy, hcache) = head.forward_cached(&f);
                let ones = Array2::ones(hy.raw_dim());
                head.backward(&hcache, &ones, None, true).expect("head grad")
            }
        };
        if let Some(c) = cond {
            if self.beta != F::zero() {
                let g_target =
                    Array2::from_shape_fn((x.nrows(), c.len()), |(_, j)| -self.beta * c[j]);
                match self.variant {
                    EnergyVariant::NormDirection => {
                        let (u, r) = unit_rows(&f)?;
                        let (_, pcache) = self.projector.forward_unit(&u)?;
                        let du = self
                            .projector
                            .backward_unit(&pcache, &g_target, None, true)
                            .expect("projector input grad");
                        // through u = f / ‖f‖
                        for (i, mut row) in df.rows_mut().into_iter().enumerate() {
                            let ui = u.row(i);
                            let dui = du.row(i);
                            let dot = ui.dot(&dui);
                            let ri = r[i];
                            ndarray::Zip::from(&mut row).and(&ui).and(&dui).for_each(
                                |d, &uij, &duij| {
                                    *d = *d + (duij - dot * uij) / ri;
                                },
                            );
                        }
                    }
                    EnergyVariant::MultiHead => {
                        let (_, pcache) = self.projector.forward_raw(&f);
                        let dfh = self
                            .projector
                            .backward_raw(&pcache, &g_target, None, true)
                            .expect("projector input grad");
                        df += &dfh;
                    }
                }
            }
        }
        Ok(self
            .feature_net
            .backward(&cache, &df, None, true)
            .expect("feature input grad"))
    }

    pub fn refresh_spectral(&mut self) {
        self.feature_net.refresh_spectral();
    }

    /// Re-converge the power-iteration state (after loading a checkpoint for
    /// evaluation).
    pub fn converge_spectral(&mut self, iters: usize) {
        self.feature_net.converge_spectral(iters);
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        let EnergyModel {
            feature_net,
            projector,
            head_prime,
            ..
        } = self;
        feature_net.collect_trainable(out);
        projector.collect_trainable(out);
        if let Some(h) = head_prime {
            h.collect_trainable(out);
        }
    }
}

impl<F: Real> ArrayVisit<F> for EnergyModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        self.feature_net.visit(&format!("{prefix}.feature_net"), f);
        self.projector.visit(&format!("{prefix}.projector"), f);
        if let Some(h) = &self.head_prime {
            h.visit(&format!("{prefix}.head_prime"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        let EnergyModel {
            feature_net,
            projector,
            head_prime,
            ..
        } = self;
        feature_net.visit_mut(&format!("{prefix}.feature_net"), f);
        projector.visit_mut(&format!("{prefix}.projector"), f);
        if let Some(h) = head_prime {
            h.visit_mut(&format!("{prefix}.head_prime"), f);
        }
    }
}

/// Row-normalize onto the sphere, returning (unit rows, row norms).
/// Errors with [`Error::DegenerateFeature`] on a (near-)zero row.
pub fn unit_rows<F: Real>(f: &Array2<F>) -> Result<(Array2<F>, Array1<F>)> {
    let norms = f.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(bad) = norms.iter().find(|n| n.as_f64() <= DEGENERATE_EPS) {
        return Err(Error::DegenerateFeature { norm: bad.as_f64() });
    }
    let unit = f / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Σ_a z̄_a over a non-empty concept list.
pub fn concept_sum<F: Real>(concepts: &[UnitLatent<F>]) -> Array1<F> {
    let mut c = Array1::zeros(concepts[0].view().len());
    for z in concepts {
        c += &z.view();
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use ndarray::array;

    fn toy_model(beta: f64, projector: ProjectorKind) -> EnergyModel<f64> {
        let mut rng = stream(42, domain::INIT, 0, 0);
        EnergyModel::new_mlp(
            &EnergyModelConfig {
                in_dim: 2,
                hidden: vec![16, 16],
                d_z: 4,
                spectral_norm: true,
                projector,
                projector_slope: 0.2,
                variant: EnergyVariant::NormDirection,
                beta,
                comp_unsquared: false,
            },
            &mut rng,
        )
    }

    /// Identity feature net (single unconstrained linear layer, W = I, b = 0)
    /// so energies can be computed by hand.
    fn identity_model(d: usize, beta: f64) -> EnergyModel<f64> {
        let mut rng = stream(1, domain::INIT, 0, 0);
        let mut model = EnergyModel::new_mlp(
            &EnergyModelConfig {
                in_dim: d,
                hidden: vec![],
                d_z: d,
                spectral_norm: false,
                projector: ProjectorKind::Identity,
                projector_slope: 0.2,
                variant: EnergyVariant::NormDirection,
                beta,
                comp_unsquared: false,
            },
            &mut rng,
        );
        if let FeatureNet::Mlp(m) = &mut model.feature_net {
            m.layers[0].weight = Array2::eye(d);
            if let Some(b) = &mut m.layers[0].bias {
                b.fill(0.0);
            }
        }
        model
    }

    #[test]
    fn direction_normalizes_and_rejects_zero() {
        let f: FeatureVector<f64> = FeatureVector::new(array![3.0, 4.0]).unwrap();
        let u = direction(&f).unwrap();
        assert!((u.view()[0] - 0.6).abs() < 1e-12);
        assert!((u.view()[1] - 0.8).abs() < 1e-12);

        // unit vector is a fixed point
        let f = FeatureVector::new(array![0.0, 1.0]).unwrap();
        let u = direction(&f).unwrap();
        assert_eq!(u.view()[1], 1.0);

        let zero = FeatureVector::new(array![0.0, 0.0]).unwrap();
        assert!(matches!(
            direction(&zero),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn joint_energy_hand_value() {
        // f(x) = x, identity projector, z = (0.6, 0.8), β = 0.01:
        // E = ½·25 − 0.01·(0.6,0.8)ᵀ(0.6,0.8)... with x = (3,4): dir = z, so
        // E = 12.5 − 0.01·1 = 12.49
        let model = identity_model(2, 0.01);
        let x = array![3.0, 4.0];
        let z = UnitLatent::new(array![0.6, 0.8]).unwrap();
        let e = model.joint_energy(x.view(), &z).unwrap().value();
        assert!((e - 12.49).abs() < 1e-12, "E = {e}");
        let m = model.marginal_energy(x.view()).unwrap().value();
        assert!((m - 12.5).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_collapses_to_marginal() {
        let model = toy_model(0.0, ProjectorKind::Mlp);
        let x = array![0.3, -0.7];
        let z = UnitLatent::from_unnormalized(array![1.0, 2.0, -1.0, 0.5]).unwrap();
        let j = model.joint_energy(x.view(), &z).unwrap().value();
        let m = model.marginal_energy(x.view()).unwrap().value();
        assert_eq!(j, m);
        let c = model
            .compositional_energy(x.view(), &[z.clone(), z.clone()])
            .unwrap()
            .value();
        assert_eq!(c, m);
    }

    #[test]
    fn joint_minus_marginal_is_bounded_by_beta() {
        let model = toy_model(0.05, ProjectorKind::Mlp);
        let mut rng = stream(3, domain::EVAL, 0, 0);
        for _ in 0..50 {
            let x = crate::rng::normal_vector::<f64>(&mut rng, 2);
            let z = UnitLatent::from_unnormalized(crate::rng::normal_vector(&mut rng, 4)).unwrap();
            let j = model.joint_energy(x.view(), &z).unwrap().value();
            let m = model.marginal_energy(x.view()).unwrap().value();
            assert!((j - m).abs() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn joint_energy_is_minimized_at_projected_direction() {
        let model = toy_model(0.01, ProjectorKind::Mlp);
        let x = array![0.5, 0.2];
        let f = model.features_one(x.view()).unwrap();
        let u = direction(&f).unwrap();
        let zstar = model.project_direction(&u).unwrap();
        let best = model.joint_energy(x.view(), &zstar).unwrap().value();
        let mut rng = stream(4, domain::EVAL, 0, 0);
        for _ in 0..200 {
            let z = UnitLatent::from_unnormalized(crate::rng::normal_vector(&mut rng, 4)).unwrap();
            let e = model.joint_energy(x.view(), &z).unwrap().value();
            assert!(e + 1e-12 >= best);
        }
    }

    #[test]
    fn projector_identity_and_unit_codomain() {
        let model = toy_model(0.01, ProjectorKind::Identity);
        let u = UnitLatent::from_unnormalized(array![1.0, -2.0, 0.5, 0.3]).unwrap();
        let p = model.project_direction(&u).unwrap();
        for (a, b) in p.view().iter().zip(u.view().iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let model = toy_model(0.01, ProjectorKind::Mlp);
        let mut rng = stream(5, domain::EVAL, 0, 0);
        for _ in 0..20 {
            let u = UnitLatent::from_unnormalized(crate::rng::normal_vector(&mut rng, 4)).unwrap();
            let p = model.project_direction(&u).unwrap();
            let n = p.view().dot(&p.view()).sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn projector_two_layer_matches_hand_matrix_arithmetic() {
        let mut rng = stream(6, domain::INIT, 0, 0);
        let mut proj: Projector<f64> = Projector::new(ProjectorKind::Mlp, 3, 0.2, &mut rng);
        let w1 = array![[0.5, -1.0, 0.0], [0.2, 0.3, -0.4], [1.0, 0.0, 1.0]];
        let w2 = array![[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0], [0.7, -0.2, 0.6]];
        if let Projector::Mlp { l1, l2, .. } = &mut proj {
            l1.weight = w1.clone();
            l2.weight = w2.clone();
        }
        let u = UnitLatent::from_unnormalized(array![1.0, 2.0, 2.0]).unwrap();
        // hand computation with independent arithmetic
        let uv: Vec<f64> = u.view().to_vec();
        let mut h = [0.0; 3];
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..3 {
                s += w1[[i, j]] * uv[j];
            }
            h[i] = if s >= 0.0 { s } else { 0.2 * s };
        }
        let mut raw = [0.0; 3];
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..3 {
                s += w2[[i, j]] * h[j];
            }
            raw[i] = s;
        }
        let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expected: Vec<f64> = raw.iter().map(|v| v / nrm).collect();

        let (p, _) = proj
            .forward_unit(&u.view().insert_axis(Axis(0)).to_owned())
            .unwrap();
        for j in 0..3 {
            assert!((p[[0, j]] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn compositional_energy_reductions() {
        let model = toy_model(0.01, ProjectorKind::Mlp);
        let x = array![0.4, -0.1];
        let z = UnitLatent::from_unnormalized(array![0.3, 1.0, -0.5, 0.2]).unwrap();
        let joint = model.joint_energy(x.view(), &z).unwrap().value();
        let single = model
            .compositional_energy(x.view(), &[z.clone()])
            .unwrap()
            .value();
        assert!((joint - single).abs() < 1e-12);

        // two identical concepts: marginal + 2× the alignment term
        let m = model.marginal_energy(x.view()).unwrap().value();
        let double = model
            .compositional_energy(x.view(), &[z.clone(), z.clone()])
            .unwrap()
            .value();
        assert!((double - (m + 2.0 * (joint - m))).abs() < 1e-12);

        assert!(matches!(
            model.compositional_energy(x.view(), &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn multihead_components() {
        let mut rng = stream(7, domain::INIT, 0, 0);
        let model: EnergyModel<f64> = EnergyModel::new_mlp(
            &EnergyModelConfig {
                in_dim: 2,
                hidden: vec![8],
                d_z: 4,
                spectral_norm: false,
                projector: ProjectorKind::Mlp,
                projector_slope: 0.2,
                variant: EnergyVariant::MultiHead,
                beta: 0.01,
                comp_unsquared: false,
            },
            &mut rng,
        );
        let x = array![0.3, 0.9];
        // conditional component vanishes for z orthogonal to g(f(x))
        let f = model.forward_features(&x.view().insert_axis(Axis(0)).to_owned()).unwrap();
        let (g, _) = model.projector.forward_raw(&f);
        let grow = g.row(0).to_owned();
        // build z ⊥ g by Gram-Schmidt on a random vector
        let mut v = crate::rng::normal_vector::<f64>(&mut rng, 4);
        let proj = v.dot(&grow) / grow.dot(&grow);
        v.zip_mut_with(&grow, |vi, &gi| *vi -= proj * gi);
        let z = UnitLatent::from_unnormalized(v).unwrap();
        let (_, cond) = model.multihead_energy(x.view(), &z).unwrap();
        assert!(cond.value().abs() < 1e-9);

        // marginal component ignores z
        let z2 = UnitLatent::from_unnormalized(crate::rng::normal_vector(&mut rng, 4)).unwrap();
        let (m1, _) = model.multihead_energy(x.view(), &z).unwrap();
        let (m2, _) = model.multihead_energy(x.view(), &z2).unwrap();
        assert_eq!(m1.value(), m2.value());

        // variant mismatch
        let nd = toy_model(0.01, ProjectorKind::Mlp);
        assert!(matches!(
            nd.multihead_energy(x.view(), &z),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        // the acceptance criterion runs 20 probes; unit-level smoke here
        let model = toy_model(0.01, ProjectorKind::Mlp);
        let mut rng = stream(8, domain::EVAL, 0, 0);
        for probe in 0..5 {
            let x = crate::rng::normal_matrix::<f64>(&mut rng, 1, 2);
            let z = UnitLatent::from_unnormalized(crate::rng::normal_vector(&mut rng, 4)).unwrap();
            for cond in [None, Some(z.view())] {
                let g = model.grad_x(&x, cond).unwrap();
                for j in 0..2 {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[[0, j]] += h;
                    let mut xm = x.clone();
                    xm[[0, j]] -= h;
                    let (ep, em) = match cond {
                        None => (
                            model.marginal_energy(xp.row(0)).unwrap().value(),
                            model.marginal_energy(xm.row(0)).unwrap().value(),
                        ),
                        Some(_) => (
                            model.joint_energy(xp.row(0), &z).unwrap().value(),
                            model.joint_energy(xm.row(0), &z).unwrap().value(),
                        ),
                    };
                    let fd = (ep - em) / (2.0 * h);
                    let rel = (g[[0, j]] - fd).abs() / fd.abs().max(1e-8);
                    assert!(rel < 1e-4, "probe {probe} j={j}: analytic={} fd={fd}", g[[0, j]]);
                }
            }
        }
    }

    #[test]
    fn forward_features_shape_and_determinism() {
        let model = toy_model(0.01, ProjectorKind::Mlp);
        let mut rng = stream(9, domain::EVAL, 0, 0);
        let x = crate::rng::normal_matrix::<f64>(&mut rng, 7, 2);
        let f1 = model.forward_features(&x).unwrap();
        let f2 = model.forward_features(&x).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (7, 4));

        let bad = crate::rng::normal_matrix::<f64>(&mut rng, 3, 5);
        assert!(matches!(model.forward_features(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_perturbation_changes_output() {
        // finite-difference probe on a 2-layer net: perturbing one parameter
        // moves at least one output entry
        let mut model = toy_model(0.01, ProjectorKind::Mlp);
        let x = array![[0.2, 0.4]];
        let before = model.forward_features(&x).unwrap();
        if let FeatureNet::Mlp(m) = &mut model.feature_net {
            m.layers[0].weight[[0, 0]] += 1e-3;
        }
        let after = model.forward_features(&x).unwrap();
        let delta = (&after - &before).mapv(f64::abs).sum();
        assert!(delta > 0.0, "output insensitive to parameter perturbation");
    }
}
