//! Multilayer perceptron with cached forward pass and exact backprop.

use super::{Activation, ArrayVisit, Linear, LinearGrads};
use crate::num::Real;
use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;

/// Stack of dense layers; the hidden activation is applied after every layer
/// except the last.
#[derive(Clone, Debug)]
pub struct Mlp<F: Real> {
    pub layers: Vec<Linear<F>>,
    pub activation: Activation,
}

/// Forward cache: the input of each layer plus its pre-activation.
pub struct MlpCache<F: Real> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads<F: Real> {
    pub layers: Vec<LinearGrads<F>>,
}

impl<F: Real> Mlp<F> {
    /// Build from `dims = [in, h1, ..., out]`.
    pub fn new(
        dims: &[usize],
        activation: Activation,
        bias: bool,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                // output layer is linear; hidden layers feed the activation
                let gain = if l + 1 == n_layers { 1.0 } else { activation.init_gain() };
                Linear::new(dims[l], dims[l + 1], bias, spectral, gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur);
            if l < last {
                cur.mapv_inplace(|z| self.activation.apply(z));
            }
        }
        cur
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let z = layer.forward(&cur);
            pre.push(z.clone());
            cur = if l < last {
                z.mapv_into(|v| self.activation.apply(v))
            } else {
                z
            };
        }
        (cur, MlpCache { inputs, pre })
    }

    /// Backprop from the output gradient `gy`. Parameter gradients accumulate
    /// into `grads` when given; the input gradient is returned when `want_gx`.
    pub fn backward(
        &self,
        cache: &MlpCache<F>,
        gy: &Array2<F>,
        mut grads: Option<&mut MlpGrads<F>>,
        want_gx: bool,
    ) -> Option<Array2<F>> {
        let mut g = gy.clone();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l < last {
                Zip::from(&mut g)
                    .and(&cache.pre[l])
                    .for_each(|gi, &zi| *gi = *gi * self.activation.derivative(zi));
            }
            let lg = grads.as_deref_mut().map(|gs| &mut gs.layers[l]);
            let need_gx = l > 0 || want_gx;
            match self.layers[l].backward(&cache.inputs[l], &g, lg, need_gx) {
                Some(gx) => g = gx,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn refresh_spectral(&mut self) {
        for layer in &mut self.layers {
            layer.refresh_spectral();
        }
    }

    pub fn converge_spectral(&mut self, iters: usize) {
        for layer in &mut self.layers {
            layer.converge_spectral(iters);
        }
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        for layer in &mut self.layers {
            layer.collect_trainable(out);
        }
    }

    pub fn collect_grads<'a>(grads: &'a MlpGrads<F>, out: &mut Vec<&'a [F]>) {
        for lg in &grads.layers {
            Linear::collect_grads(lg, out);
        }
    }
}

impl<F: Real> MlpGrads<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        Self {
            layers: mlp.layers.iter().map(LinearGrads::zeros_like).collect(),
        }
    }
}

impl<F: Real> ArrayVisit<F> for Mlp<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.l{l}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.l{l}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, normal_matrix, stream};

    /// Scalar objective for gradcheck: weighted sum of outputs.
    fn objective(mlp: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (mlp.forward(x) * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(5, domain::INIT, 0, 0);
        let mlp: Mlp<f64> = Mlp::new(&[3, 8, 8, 2], Activation::Swish, true, true, &mut rng);
        let x = normal_matrix(&mut rng, 4, 3);
        let w = normal_matrix(&mut rng, 4, 2);

        let (_, cache) = mlp.forward_cached(&x);
        let mut grads = MlpGrads::zeros_like(&mlp);
        let gx = mlp.backward(&cache, &w, Some(&mut grads), true).unwrap();

        let h = 1e-6;
        // input gradient
        for &(i, j) in &[(0usize, 0usize), (2, 1), (3, 2)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (objective(&mlp, &xp, &w) - objective(&mlp, &xm, &w)) / (2.0 * h);
            let rel = (gx[[i, j]] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "gx[{i},{j}] analytic={} fd={fd}", gx[[i, j]]);
        }
        // a few weight gradients across layers
        for &(l, i, j) in &[(0usize, 1usize, 2usize), (1, 5, 3), (2, 0, 7)] {
            let mut mp = mlp.clone();
            mp.layers[l].weight[[i, j]] += h;
            let mut mm = mlp.clone();
            mm.layers[l].weight[[i, j]] -= h;
            let fd = (objective(&mp, &x, &w) - objective(&mm, &x, &w)) / (2.0 * h);
            let an = grads.layers[l].weight[[i, j]];
            let rel = (an - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "dW{l}[{i},{j}] analytic={an} fd={fd}");
        }
        // bias gradient
        let mut mp = mlp.clone();
        mp.layers[1].bias.as_mut().unwrap()[4] += h;
        let mut mm = mlp.clone();
        mm.layers[1].bias.as_mut().unwrap()[4] -= h;
        let fd = (objective(&mp, &x, &w) - objective(&mm, &x, &w)) / (2.0 * h);
        let an = grads.layers[1].bias.as_ref().unwrap()[4];
        assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-5);
    }

    #[test]
    fn forward_is_deterministic_and_batched() {
        let mut rng = stream(9, domain::INIT, 0, 0);
        let mlp: Mlp<f32> = Mlp::new(&[2, 16, 4], Activation::Swish, true, false, &mut rng);
        let x = normal_matrix(&mut rng, 6, 2);
        let y1 = mlp.forward(&x);
        let y2 = mlp.forward(&x);
        assert_eq!(y1, y2);
        assert_eq!(y1.dim(), (6, 4));
        // per-row forward matches batched forward
        for i in 0..6 {
            let row = x.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let yi = mlp.forward(&row);
            for j in 0..4 {
                assert!((yi[[0, j]] - y1[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
