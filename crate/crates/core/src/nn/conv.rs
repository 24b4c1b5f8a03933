//! Small convolutional feature network for fixed-size grayscale rasters.
//!
//! Images travel through the crate as flat rows (channel-major, `c*h*w`);
//! the conv layers reshape internally. Convolutions are same-size (stride 1,
//! zero padding) and implemented via im2col so the contraction is a single
//! matmul. The kernel is stored as an (out_ch, in_ch*kh*kw) matrix, which is
//! also the matrix that spectral normalization constrains.

use super::{Activation, ArrayVisit, Mlp, MlpCache, MlpGrads, SpectralState};
use crate::num::{real, Real};
use crate::rng::normal_vector;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Conv2d<F: Real> {
    /// (out_ch, in_ch * kh * kw)
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub spectral: Option<SpectralState<F>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spectral: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let std = gain / (fan_in as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((out_ch, fan_in), || crate::rng::normal::<F>(rng) * real(std));
        let mut conv = Self {
            weight,
            bias: Some(Array1::zeros(out_ch)),
            spectral: None,
            in_ch,
            out_ch,
            k,
        };
        if spectral {
            let u = {
                let raw = normal_vector::<F>(rng, out_ch);
                let n = raw.dot(&raw).sqrt();
                raw.mapv(|x| x / n)
            };
            conv.spectral = Some(SpectralState {
                v: Array1::zeros(fan_in),
                u,
            });
            conv.converge_spectral(50);
        }
        conv
    }

    fn effective_weight(&self) -> Array2<F> {
        match &self.spectral {
            Some(s) => {
                let sigma = s.sigma(&self.weight);
                self.weight.mapv(|w| w / sigma)
            }
            None => self.weight.clone(),
        }
    }

    pub fn refresh_spectral(&mut self) {
        if let Some(s) = self.spectral.as_mut() {
            let vt = self.weight.t().dot(&s.u);
            let vn = vt.dot(&vt).sqrt();
            s.v = if vn > real(1e-12) {
                vt.mapv(|x| x / vn)
            } else {
                vt
            };
            let wv = self.weight.dot(&s.v);
            let un = wv.dot(&wv).sqrt();
            s.u = if un > real(1e-12) {
                wv.mapv(|x| x / un)
            } else {
                wv
            };
        }
    }

    pub fn converge_spectral(&mut self, iters: usize) {
        for _ in 0..iters {
            self.refresh_spectral();
        }
    }

    /// Gather zero-padded k×k patches: (n*h*w, in_ch*k*k).
    fn im2col(&self, x: &Array2<F>, h: usize, w: usize) -> Array2<F> {
        let n = x.nrows();
        let k = self.k;
        let pad = k / 2;
        let fan = self.in_ch * k * k;
        let mut out = Array2::zeros((n * h * w, fan));
        for s in 0..n {
            let row = x.row(s);
            for i in 0..h {
                for j in 0..w {
                    let orow = s * h * w + i * w + j;
                    let mut col = 0;
                    for c in 0..self.in_ch {
                        let base = c * h * w;
                        for di in 0..k {
                            let ii = i as isize + di as isize - pad as isize;
                            for dj in 0..k {
                                let jj = j as isize + dj as isize - pad as isize;
                                if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                    out[[orow, col]] = row[base + ii as usize * w + jj as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter-add patch gradients back to input layout.
    fn col2im(&self, gp: &Array2<F>, n: usize, h: usize, w: usize) -> Array2<F> {
        let k = self.k;
        let pad = k / 2;
        let mut gx = Array2::zeros((n, self.in_ch * h * w));
        for s in 0..n {
            let mut grow = gx.row_mut(s);
            for i in 0..h {
                for j in 0..w {
                    let orow = s * h * w + i * w + j;
                    let prow = gp.row(orow);
                    let mut col = 0;
                    for c in 0..self.in_ch {
                        let base = c * h * w;
                        for di in 0..k {
                            let ii = i as isize + di as isize - pad as isize;
                            for dj in 0..k {
                                let jj = j as isize + dj as isize - pad as isize;
                                if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                    let idx = base + ii as usize * w + jj as usize;
                                    grow[idx] = grow[idx] + prow[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    /// x: (n, in_ch*h*w) -> (n, out_ch*h*w); also returns the patch matrix
    /// for reuse in backward.
    pub fn forward(&self, x: &Array2<F>, h: usize, w: usize) -> (Array2<F>, Array2<F>) {
        let n = x.nrows();
        let patches = self.im2col(x, h, w);
        let y_mat = patches.dot(&self.effective_weight().t()); // (n*h*w, out_ch)
        let mut y = Array2::zeros((n, self.out_ch * h * w));
        for s in 0..n {
            for p in 0..h * w {
                for c in 0..self.out_ch {
                    y[[s, c * h * w + p]] = y_mat[[s * h * w + p, c]];
                }
            }
        }
        if let Some(b) = &self.bias {
            for s in 0..n {
                for c in 0..self.out_ch {
                    for p in 0..h * w {
                        y[[s, c * h * w + p]] = y[[s, c * h * w + p]] + b[c];
                    }
                }
            }
        }
        (y, patches)
    }

    pub fn backward(
        &self,
        patches: &Array2<F>,
        gy: &Array2<F>,
        h: usize,
        w: usize,
        grads: Option<&mut Conv2dGrads<F>>,
        want_gx: bool,
    ) -> Option<Array2<F>> {
        let n = gy.nrows();
        let mut gy_mat = Array2::zeros((n * h * w, self.out_ch));
        for s in 0..n {
            for p in 0..h * w {
                for c in 0..self.out_ch {
                    gy_mat[[s * h * w + p, c]] = gy[[s, c * h * w + p]];
                }
            }
        }
        if let Some(g) = grads {
            let g_weff = gy_mat.t().dot(patches);
            match &self.spectral {
                Some(sp) => {
                    let sigma = sp.sigma(&self.weight);
                    let inner = (&g_weff * &self.weight).sum() / (sigma * sigma);
                    let mut gw = g_weff.mapv(|v| v / sigma);
                    for (i, ui) in sp.u.iter().enumerate() {
                        let scale = *ui * inner;
                        gw.row_mut(i).zip_mut_with(&sp.v, |gv, &vj| *gv = *gv - scale * vj);
                    }
                    g.weight += &gw;
                }
                None => g.weight += &g_weff,
            }
            if let (Some(gb), Some(_)) = (g.bias.as_mut(), self.bias.as_ref()) {
                *gb += &gy_mat.sum_axis(Axis(0));
            }
        }
        if want_gx {
            let gp = gy_mat.dot(&self.effective_weight());
            Some(self.col2im(&gp, n, h, w))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<F: Real> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Real> Conv2dGrads<F> {
    pub fn zeros_like(conv: &Conv2d<F>) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: conv.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }
}

fn avg_pool2<F2: Real>(x: &Array2<F2>, ch: usize, h: usize, w: usize) -> Array2<F2> {
    let n = x.nrows();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = real::<F2>(0.25);
    let mut y = Array2::zeros((n, ch * ho * wo));
    for s in 0..n {
        for c in 0..ch {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = F2::zero();
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc = acc + x[[s, c * h * w + (2 * i + di) * w + (2 * j + dj)]];
                        }
                    }
                    y[[s, c * ho * wo + i * wo + j]] = acc * quarter;
                }
            }
        }
    }
    y
}

fn avg_unpool2<F2: Real>(gy: &Array2<F2>, ch: usize, h: usize, w: usize) -> Array2<F2> {
    let n = gy.nrows();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = real::<F2>(0.25);
    let mut gx = Array2::zeros((n, ch * h * w));
    for s in 0..n {
        for c in 0..ch {
            for i in 0..ho {
                for j in 0..wo {
                    let g = gy[[s, c * ho * wo + i * wo + j]] * quarter;
                    for di in 0..2 {
                        for dj in 0..2 {
                            gx[[s, c * h * w + (2 * i + di) * w + (2 * j + dj)]] = g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// conv(1→c1) → swish → pool2 → conv(c1→c2) → swish → pool2 → MLP head.
#[derive(Clone, Debug)]
pub struct ConvNet<F: Real> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub head: Mlp<F>,
    pub h: usize,
    pub w: usize,
    pub activation: Activation,
}

pub struct ConvNetCache<F: Real> {
    patches1: Array2<F>,
    pre1: Array2<F>,
    patches2: Array2<F>,
    pre2: Array2<F>,
    head: MlpCache<F>,
}

#[derive(Clone, Debug)]
pub struct ConvNetGrads<F: Real> {
    pub conv1: Conv2dGrads<F>,
    pub conv2: Conv2dGrads<F>,
    pub head: MlpGrads<F>,
}

impl<F: Real> ConvNet<F> {
    pub fn new(
        h: usize,
        w: usize,
        channels: (usize, usize),
        head_hidden: usize,
        out_dim: usize,
        activation: Activation,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(h % 4 == 0 && w % 4 == 0, "raster dims must be divisible by 4");
        let (c1, c2) = channels;
        let gain = activation.init_gain();
        let conv1 = Conv2d::new(1, c1, 3, spectral, gain, rng);
        let conv2 = Conv2d::new(c1, c2, 3, spectral, gain, rng);
        let flat = c2 * (h / 4) * (w / 4);
        let head = Mlp::new(&[flat, head_hidden, out_dim], activation, true, spectral, rng);
        Self {
            conv1,
            conv2,
            head,
            h,
            w,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.h * self.w
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, ConvNetCache<F>) {
        let (h, w) = (self.h, self.w);
        let (pre1, patches1) = self.conv1.forward(x, h, w);
        let act1 = pre1.mapv(|z| self.activation.apply(z));
        let pool1 = avg_pool2(&act1, self.conv1.out_ch, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let (pre2, patches2) = self.conv2.forward(&pool1, h2, w2);
        let act2 = pre2.mapv(|z| self.activation.apply(z));
        let pool2 = avg_pool2(&act2, self.conv2.out_ch, h2, w2);
        let (y, head) = self.head.forward_cached(&pool2);
        (
            y,
            ConvNetCache {
                patches1,
                pre1,
                patches2,
                pre2,
                head,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvNetCache<F>,
        gy: &Array2<F>,
        mut grads: Option<&mut ConvNetGrads<F>>,
        want_gx: bool,
    ) -> Option<Array2<F>> {
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (h / 2, w / 2);
        let g_pool2 = self
            .head
            .backward(&cache.head, gy, grads.as_deref_mut().map(|g| &mut g.head), true)
            .expect("head input grad");
        let mut g_pre2 = avg_unpool2(&g_pool2, self.conv2.out_ch, h2, w2);
        ndarray::Zip::from(&mut g_pre2)
            .and(&cache.pre2)
            .for_each(|g, &z| *g = *g * self.activation.derivative(z));
        let g_pool1 = self
            .conv2
            .backward(
                &cache.patches2,
                &g_pre2,
                h2,
                w2,
                grads.as_deref_mut().map(|g| &mut g.conv2),
                true,
            )
            .expect("conv2 input grad");
        let mut g_pre1 = avg_unpool2(&g_pool1, self.conv1.out_ch, h, w);
        ndarray::Zip::from(&mut g_pre1)
            .and(&cache.pre1)
            .for_each(|g, &z| *g = *g * self.activation.derivative(z));
        self.conv1.backward(
            &cache.patches1,
            &g_pre1,
            h,
            w,
            grads.as_deref_mut().map(|g| &mut g.conv1),
            want_gx,
        )
    }

    pub fn refresh_spectral(&mut self) {
        self.conv1.refresh_spectral();
        self.conv2.refresh_spectral();
        self.head.refresh_spectral();
    }

    pub fn converge_spectral(&mut self, iters: usize) {
        self.conv1.converge_spectral(iters);
        self.conv2.converge_spectral(iters);
        self.head.converge_spectral(iters);
    }

    pub fn collect_trainable<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        let ConvNet {
            conv1, conv2, head, ..
        } = self;
        out.push(conv1.weight.as_slice_mut().expect("contiguous"));
        if let Some(b) = &mut conv1.bias {
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out.push(conv2.weight.as_slice_mut().expect("contiguous"));
        if let Some(b) = &mut conv2.bias {
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        head.collect_trainable(out);
    }

    pub fn collect_grads<'a>(grads: &'a ConvNetGrads<F>, out: &mut Vec<&'a [F]>) {
        out.push(grads.conv1.weight.as_slice().expect("contiguous"));
        if let Some(b) = &grads.conv1.bias {
            out.push(b.as_slice().expect("contiguous"));
        }
        out.push(grads.conv2.weight.as_slice().expect("contiguous"));
        if let Some(b) = &grads.conv2.bias {
            out.push(b.as_slice().expect("contiguous"));
        }
        Mlp::collect_grads(&grads.head, out);
    }
}

impl<F: Real> ConvNetGrads<F> {
    pub fn zeros_like(net: &ConvNet<F>) -> Self {
        Self {
            conv1: Conv2dGrads::zeros_like(&net.conv1),
            conv2: Conv2dGrads::zeros_like(&net.conv2),
            head: MlpGrads::zeros_like(&net.head),
        }
    }
}

fn visit_conv<F: Real>(conv: &Conv2d<F>, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
    f(format!("{prefix}.weight"), conv.weight.view().into_dyn());
    if let Some(b) = &conv.bias {
        f(format!("{prefix}.bias"), b.view().into_dyn());
    }
    if let Some(s) = &conv.spectral {
        f(format!("{prefix}.sn_u"), s.u.view().into_dyn());
        f(format!("{prefix}.sn_v"), s.v.view().into_dyn());
    }
}

fn visit_conv_mut<F: Real>(
    conv: &mut Conv2d<F>,
    prefix: &str,
    f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>),
) {
    f(format!("{prefix}.weight"), conv.weight.view_mut().into_dyn());
    if let Some(b) = &mut conv.bias {
        f(format!("{prefix}.bias"), b.view_mut().into_dyn());
    }
    if let Some(s) = &mut conv.spectral {
        f(format!("{prefix}.sn_u"), s.u.view_mut().into_dyn());
        f(format!("{prefix}.sn_v"), s.v.view_mut().into_dyn());
    }
}

impl<F: Real> ArrayVisit<F> for ConvNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, F>)) {
        visit_conv(&self.conv1, &format!("{prefix}.conv1"), f);
        visit_conv(&self.conv2, &format!("{prefix}.conv2"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        visit_conv_mut(&mut self.conv1, &format!("{prefix}.conv1"), f);
        visit_conv_mut(&mut self.conv2, &format!("{prefix}.conv2"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, normal_matrix, stream};

    #[test]
    fn conv_net_backward_matches_finite_differences() {
        let mut rng = stream(21, domain::INIT, 0, 0);
        let net: ConvNet<f64> =
            ConvNet::new(8, 8, (2, 3), 10, 4, Activation::Swish, true, &mut rng);
        let x = normal_matrix(&mut rng, 2, 64);
        let wobj = normal_matrix(&mut rng, 2, 4);

        let obj = |net: &ConvNet<f64>, x: &Array2<f64>| (net.forward(x) * &wobj).sum();

        let (_, cache) = net.forward_cached(&x);
        let mut grads = ConvNetGrads::zeros_like(&net);
        let gx = net.backward(&cache, &wobj, Some(&mut grads), true).unwrap();

        let h = 1e-6;
        for &(i, j) in &[(0usize, 5usize), (1, 40)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (obj(&net, &xp) - obj(&net, &xm)) / (2.0 * h);
            assert!(
                (gx[[i, j]] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                "gx[{i},{j}]={} fd={fd}",
                gx[[i, j]]
            );
        }
        for &(i, j) in &[(0usize, 3usize), (1, 8)] {
            let mut np = net.clone();
            np.conv1.weight[[i, j]] += h;
            let mut nm = net.clone();
            nm.conv1.weight[[i, j]] -= h;
            let fd = (obj(&np, &x) - obj(&nm, &x)) / (2.0 * h);
            let an = grads.conv1.weight[[i, j]];
            assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-5, "conv1 dW[{i},{j}]={an} fd={fd}");
        }
        for &(i, j) in &[(2usize, 7usize)] {
            let mut np = net.clone();
            np.conv2.weight[[i, j]] += h;
            let mut nm = net.clone();
            nm.conv2.weight[[i, j]] -= h;
            let fd = (obj(&np, &x) - obj(&nm, &x)) / (2.0 * h);
            let an = grads.conv2.weight[[i, j]];
            assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-5, "conv2 dW[{i},{j}]={an} fd={fd}");
        }
    }
}
