//! Random augmentation policies 𝒯.
//!
//! A policy draws a transform t ~ 𝒯 per sample from an explicit rng and maps
//! valid inputs to valid (clamped, same-shape) inputs. The 2D family is
//! additive Gaussian jitter composed with a small rotation about the data
//! mean; the raster family is shift-crop / flip / brightness / contrast.

use crate::num::{real, Real};
use ndarray::{Array2, ArrayViewMut1};
use rand::Rng;

#[derive(Clone, Debug)]
pub enum AugmentationPolicy {
    /// t(x) = x.
    Identity,
    /// Rotation in ±rot_range about `center`, then N(0, jitter_sigma²) jitter.
    Vector2d {
        jitter_sigma: f64,
        rot_range_rad: f64,
        center: [f64; 2],
        clamp: (f64, f64),
    },
    /// Replicate-padded random shift crop, horizontal flip, brightness and
    /// contrast jitter on a (h, w) grayscale raster.
    Image {
        h: usize,
        w: usize,
        crop_shift: usize,
        flip_prob: f64,
        brightness: f64,
        contrast: f64,
        clamp: (f64, f64),
    },
}

impl AugmentationPolicy {
    pub fn is_identity(&self) -> bool {
        matches!(self, AugmentationPolicy::Identity)
    }

    /// Same family at reduced strength (used for SGLD transition kicks).
    pub fn scaled(&self, strength: f64) -> Self {
        match self {
            AugmentationPolicy::Identity => AugmentationPolicy::Identity,
            AugmentationPolicy::Vector2d {
                jitter_sigma,
                rot_range_rad,
                center,
                clamp,
            } => AugmentationPolicy::Vector2d {
                jitter_sigma: jitter_sigma * strength,
                rot_range_rad: rot_range_rad * strength,
                center: *center,
                clamp: *clamp,
            },
            AugmentationPolicy::Image {
                h,
                w,
                crop_shift,
                flip_prob,
                brightness,
                contrast,
                clamp,
            } => AugmentationPolicy::Image {
                h: *h,
                w: *w,
                crop_shift: ((*crop_shift as f64) * strength).floor() as usize,
                flip_prob: flip_prob * strength,
                brightness: brightness * strength,
                contrast: contrast * strength,
                clamp: *clamp,
            },
        }
    }

    /// Draw one transform and apply it to the sample in place.
    pub fn apply_row<F: Real>(&self, mut row: ArrayViewMut1<'_, F>, rng: &mut impl Rng) {
        match self {
            AugmentationPolicy::Identity => {}
            AugmentationPolicy::Vector2d {
                jitter_sigma,
                rot_range_rad,
                center,
                clamp,
            } => {
                debug_assert_eq!(row.len(), 2);
                let theta = rng.random_range(-rot_range_rad..=*rot_range_rad);
                let (dx, dy): (f64, f64) = (
                    crate::rng::normal::<f64>(rng) * jitter_sigma,
                    crate::rng::normal::<f64>(rng) * jitter_sigma,
                );
                let (cx, cy) = (center[0], center[1]);
                let x = row[0].as_f64() - cx;
                let y = row[1].as_f64() - cy;
                let (s, c) = theta.sin_cos();
                let xr = c * x - s * y + cx + dx;
                let yr = s * x + c * y + cy + dy;
                row[0] = real(xr.clamp(clamp.0, clamp.1));
                row[1] = real(yr.clamp(clamp.0, clamp.1));
            }
            AugmentationPolicy::Image {
                h,
                w,
                crop_shift,
                flip_prob,
                brightness,
                contrast,
                clamp,
            } => {
                debug_assert_eq!(row.len(), h * w);
                let shift = *crop_shift as i32;
                let (dy, dx) = if shift > 0 {
                    (
                        rng.random_range(-shift..=shift) as isize,
                        rng.random_range(-shift..=shift) as isize,
                    )
                } else {
                    (0, 0)
                };
                let flip = rng.random_range(0.0..1.0) < *flip_prob;
                let b = rng.random_range(-brightness..=*brightness);
                let c = rng.random_range((1.0 - contrast)..=(1.0 + contrast));

                let src: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                let mean = src.iter().sum::<f64>() / src.len() as f64;
                for i in 0..*h {
                    for j in 0..*w {
                        // shifted source pixel, replicating edges
                        let si = (i as isize + dy).clamp(0, *h as isize - 1) as usize;
                        let sj_pre = (j as isize + dx).clamp(0, *w as isize - 1) as usize;
                        let sj = if flip { w - 1 - sj_pre } else { sj_pre };
                        let v = c * (src[si * w + sj] - mean) + mean + b;
                        row[i * w + j] = real(v.clamp(clamp.0, clamp.1));
                    }
                }
            }
        }
    }

    /// Draw an independent transform per row.
    pub fn apply_batch<F: Real>(&self, x: &mut Array2<F>, rng: &mut impl Rng) {
        for row in x.rows_mut() {
            self.apply_row(row, rng);
        }
    }

    /// Apply to a copy.
    pub fn transform<F: Real>(&self, x: &Array2<F>, rng: &mut impl Rng) -> Array2<F> {
        let mut out = x.clone();
        self.apply_batch(&mut out, rng);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use ndarray::array;

    fn policy() -> AugmentationPolicy {
        AugmentationPolicy::Vector2d {
            jitter_sigma: 0.06,
            rot_range_rad: 10f64.to_radians(),
            center: [0.0, 0.0],
            clamp: (-4.0, 4.0),
        }
    }

    #[test]
    fn seed_determinism_and_stochasticity() {
        let p = policy();
        let x = array![[1.0f64, 2.0], [0.5, -0.5]];
        let a = p.transform(&x, &mut stream(3, domain::VIEW_AUG, 0, 0));
        let b = p.transform(&x, &mut stream(3, domain::VIEW_AUG, 0, 0));
        let c = p.transform(&x, &mut stream(3, domain::VIEW_AUG, 1, 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn closure_stays_in_bounds_and_shape() {
        let p = policy();
        let mut rng = stream(5, domain::VIEW_AUG, 0, 0);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random_range(-4.0..4.0));
        let y = p.transform(&x, &mut rng);
        assert_eq!(y.dim(), x.dim());
        assert!(y.iter().all(|v: &f64| v.is_finite() && *v >= -4.0 && *v <= 4.0));
    }

    #[test]
    fn image_policy_preserves_shape_and_bounds() {
        let p = AugmentationPolicy::Image {
            h: 8,
            w: 8,
            crop_shift: 2,
            flip_prob: 0.5,
            brightness: 0.3,
            contrast: 0.3,
            clamp: (-1.0, 1.0),
        };
        let mut rng = stream(6, domain::VIEW_AUG, 0, 0);
        let x = Array2::from_shape_fn((4, 64), |_| rng.random_range(-1.0..1.0));
        let y = p.transform(&x, &mut rng);
        assert_eq!(y.dim(), (4, 64));
        assert!(y.iter().all(|v| *v >= -1.0 && *v <= 1.0));
    }

    #[test]
    fn identity_scaling_keeps_identity() {
        assert!(AugmentationPolicy::Identity.scaled(0.5).is_identity());
    }
}
