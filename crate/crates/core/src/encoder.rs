//! Contrastive latent encoder h producing spherical latents.
//!
//! Latents for real data are sampled as z = h(t(x))/‖h(t(x))‖ with a random
//! augmentation t ~ 𝒯; latents for generated samples use the mode of the
//! model's conditional, z̃ = g(f(x̃)/‖f(x̃)‖).

use crate::augment::AugmentationPolicy;
use crate::energy::{unit_rows, EnergyModel, EnergyVariant, FeatureCache, FeatureGrads, FeatureNet, UnitLatent};
use crate::error::{Error, Result};
use crate::nn::{Activation, ArrayVisit, ConvNet, Mlp};
use crate::num::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

/// Encoder parameters: same network family as the feature net, independent
/// weights, no spectral constraint.
#[derive(Clone, Debug)]
pub struct Encoder<F: Real> {
    pub net: FeatureNet<F>,
}

pub type EncoderGrads<F> = FeatureGrads<F>;
pub type EncoderCache<F> = FeatureCache<F>;

pub struct EncoderConfig {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub d_z: usize,
}

impl<F: Real> Encoder<F> {
    pub fn new_mlp(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.in_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.d_z);
        Self {
            net: FeatureNet::Mlp(Mlp::new(&dims, Activation::Swish, true, false, rng)),
        }
    }

    pub fn new_conv(cfg: &EncoderConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: FeatureNet::Conv(ConvNet::new(
                h,
                w,
                (16, 32),
                128,
                cfg.d_z,
                Activation::Swish,
                false,
                rng,
            )),
        }
    }

    pub fn d_z(&self) -> usize {
        self.net.out_dim()
    }

    /// Raw encoder output for a batch.
    pub fn encode_batch(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.net.in_dim() {
            return Err(Error::Config(format!(
                "encoder input dimensionality {} does not match model ({})",
                x.ncols(),
                self.net.in_dim()
            )));
        }
        Ok(self.net.forward(x))
    }

    /// Raw encoder output for one point.
    pub fn encode(&self, x: ArrayView1<'_, F>) -> Result<Array1<F>> {
        let batch = x.insert_axis(Axis(0)).to_owned();
        Ok(self.encode_batch(&batch)?.row(0).to_owned())
    }

    /// z = h(t(x))/‖h(t(x))‖ with t drawn from `rng`.
    pub fn sample_latent(
        &self,
        policy: &AugmentationPolicy,
        x: ArrayView1<'_, F>,
        rng: &mut impl Rng,
    ) -> Result<UnitLatent<F>> {
        let mut batch = x.insert_axis(Axis(0)).to_owned();
        policy.apply_batch(&mut batch, rng);
        let h = self.encode_batch(&batch)?;
        UnitLatent::from_unnormalized(h.row(0).to_owned())
    }

    /// Per-row latent sampling: one independent transform per sample.
    pub fn sample_latent_batch(
        &self,
        policy: &AugmentationPolicy,
        x: &Array2<F>,
        rng: &mut impl Rng,
    ) -> Result<Array2<F>> {
        let augmented = policy.transform(x, rng);
        let h = self.encode_batch(&augmented)?;
        let (unit, _) = unit_rows(&h)?;
        Ok(unit)
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        self.net.collect_trainable(out);
    }
}

impl<F: Real> ArrayVisit<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        self.net.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        self.net.visit_mut(prefix, f);
    }
}

/// Mode of the model conditional p(z | x̃): the sphere point minimizing
/// z ↦ E(x̃, z). Norm-direction: g(f/‖f‖); multi-head: g(f)/‖g(f)‖.
pub fn mode_latent<F: Real>(ebm: &EnergyModel<F>, x: ArrayView1<'_, F>) -> Result<UnitLatent<F>> {
    let batch = x.insert_axis(Axis(0)).to_owned();
    let z = mode_latent_batch(ebm, &batch)?;
    UnitLatent::new(z.row(0).to_owned())
}

/// Batched mode latents (rows are unit vectors).
pub fn mode_latent_batch<F: Real>(ebm: &EnergyModel<F>, x: &Array2<F>) -> Result<Array2<F>> {
    let f = ebm.forward_features(x)?;
    match ebm.variant {
        EnergyVariant::NormDirection => {
            let (u, _) = unit_rows(&f)?;
            let (p, _) = ebm.projector.forward_unit(&u)?;
            Ok(p)
        }
        EnergyVariant::MultiHead => {
            let (g, _) = ebm.projector.forward_raw(&f);
            let (unit, _) = unit_rows(&g)?;
            Ok(unit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{EnergyModelConfig, ProjectorKind};
    use crate::rng::{domain, normal_vector, stream};
    use ndarray::array;

    fn encoder() -> Encoder<f64> {
        let mut rng = stream(12, domain::INIT, 1, 0);
        Encoder::new_mlp(
            &EncoderConfig {
                in_dim: 2,
                hidden: vec![16],
                d_z: 4,
            },
            &mut rng,
        )
    }

    fn policy() -> AugmentationPolicy {
        AugmentationPolicy::Vector2d {
            jitter_sigma: 0.06,
            rot_range_rad: 10f64.to_radians(),
            center: [0.0, 0.0],
            clamp: (-4.0, 4.0),
        }
    }

    #[test]
    fn encode_deterministic_and_batch_consistent() {
        let enc = encoder();
        let x = array![[0.1, 0.2], [0.7, -0.3], [1.5, 2.0]];
        let h1 = enc.encode_batch(&x).unwrap();
        let h2 = enc.encode_batch(&x).unwrap();
        assert_eq!(h1, h2);
        for i in 0..3 {
            let hi = enc.encode(x.row(i)).unwrap();
            for j in 0..4 {
                assert!((hi[j] - h1[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_set_one_layer_encoder_matches_matrix_arithmetic() {
        let mut rng = stream(13, domain::INIT, 0, 0);
        let mut enc: Encoder<f64> = Encoder::new_mlp(
            &EncoderConfig {
                in_dim: 2,
                hidden: vec![],
                d_z: 3,
            },
            &mut rng,
        );
        let w = array![[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]];
        if let FeatureNet::Mlp(m) = &mut enc.net {
            m.layers[0].weight = w.clone();
            if let Some(b) = &mut m.layers[0].bias {
                *b = array![0.1, -0.2, 0.0];
            }
        }
        let x = array![3.0, -1.0];
        let h = enc.encode(x.view()).unwrap();
        let expected = [
            1.0 * 3.0 + 2.0 * -1.0 + 0.1,
            0.0 * 3.0 + -1.0 * -1.0 - 0.2,
            0.5 * 3.0 + 0.5 * -1.0 + 0.0,
        ];
        for j in 0..3 {
            assert!((h[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_latent_contracts() {
        let enc = encoder();
        let x = array![0.4, 0.6];

        // identity policy: deterministic, equals normalized encode
        let z = enc
            .sample_latent(&AugmentationPolicy::Identity, x.view(), &mut stream(1, domain::LATENT_AUG, 0, 0))
            .unwrap();
        let h = enc.encode(x.view()).unwrap();
        let n = h.dot(&h).sqrt();
        for j in 0..4 {
            assert!((z.view()[j] - h[j] / n).abs() < 1e-12);
        }

        // unit norm always; distinct rng streams give distinct latents
        let p = policy();
        let z1 = enc.sample_latent(&p, x.view(), &mut stream(1, domain::LATENT_AUG, 7, 0)).unwrap();
        let z2 = enc.sample_latent(&p, x.view(), &mut stream(1, domain::LATENT_AUG, 8, 0)).unwrap();
        let n1 = z1.view().dot(&z1.view()).sqrt();
        assert!((n1 - 1.0).abs() <= 1e-6);
        assert!(z1.view().iter().zip(z2.view().iter()).any(|(a, b)| (a - b).abs() > 1e-9));

        // same (seed, params, x): identical output
        let za = enc.sample_latent(&p, x.view(), &mut stream(9, domain::LATENT_AUG, 3, 1)).unwrap();
        let zb = enc.sample_latent(&p, x.view(), &mut stream(9, domain::LATENT_AUG, 3, 1)).unwrap();
        assert_eq!(za.view().to_vec(), zb.view().to_vec());
    }

    #[test]
    fn mode_latent_minimizes_joint_energy() {
        let mut rng = stream(14, domain::INIT, 0, 0);
        let model: EnergyModel<f64> = EnergyModel::new_mlp(
            &EnergyModelConfig {
                in_dim: 2,
                hidden: vec![16],
                d_z: 4,
                spectral_norm: true,
                projector: ProjectorKind::Mlp,
                projector_slope: 0.2,
                variant: crate::energy::EnergyVariant::NormDirection,
                beta: 0.01,
                comp_unsquared: false,
            },
            &mut rng,
        );
        let x = array![0.8, -0.4];
        let zstar = mode_latent(&model, x.view()).unwrap();
        let n = zstar.view().dot(&zstar.view()).sqrt();
        assert!((n - 1.0).abs() <= 1e-6);
        let best = model.joint_energy(x.view(), &zstar).unwrap().value();
        let mut eval_rng = stream(15, domain::EVAL, 0, 0);
        for _ in 0..1000 {
            let z = UnitLatent::from_unnormalized(normal_vector(&mut eval_rng, 4)).unwrap();
            assert!(model.joint_energy(x.view(), &z).unwrap().value() + 1e-12 >= best);
        }

        // identity projector: mode latent equals the feature direction
        let mut rng = stream(16, domain::INIT, 0, 0);
        let ident: EnergyModel<f64> = EnergyModel::new_mlp(
            &EnergyModelConfig {
                in_dim: 2,
                hidden: vec![16],
                d_z: 4,
                spectral_norm: false,
                projector: ProjectorKind::Identity,
                projector_slope: 0.2,
                variant: crate::energy::EnergyVariant::NormDirection,
                beta: 0.01,
                comp_unsquared: false,
            },
            &mut rng,
        );
        let f = ident.features_one(x.view()).unwrap();
        let u = crate::energy::direction(&f).unwrap();
        let zm = mode_latent(&ident, x.view()).unwrap();
        for j in 0..4 {
            assert!((zm.view()[j] - u.view()[j]).abs() < 1e-9);
        }
    }
}
