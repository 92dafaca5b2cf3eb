//! Minimal fully-convolutional network: 3×3 (optionally dilated) conv
//! layers with ReLU, softmax cross-entropy, and Adam.
//!
//! Convolutions run as im2col + GEMM so f32/f64 both go through the fast
//! matrix-multiply path. Everything is single-threaded and allocation
//! per call, so models are safe to share across threads for inference.

use crate::core::LabelMap;
use crate::Real;
use ndarray::{s, Array1, Array2, Array3, Axis, Zip};

pub const KERNEL: usize = 3;

/// One 3×3 convolution with same-size output (padding = dilation).
/// The weight is stored GEMM-ready as `(out_channels, in_channels · 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Lowers `(C, H, W)` input to the `(C·9, H·W)` patch matrix for one layer.
fn im2col<F: Real>(input: &Array3<F>, dilation: usize) -> Array2<F> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let d = dilation as isize;
    let mut col = Array2::<F>::zeros((c_in * KERNEL * KERNEL, h * w));
    for c in 0..c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dy = d * (ky as isize - 1);
                let dx = d * (kx as isize - 1);
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize).min(w as isize - dx) as usize;
                if y0 >= y1 || x0 >= x1 {
                    continue;
                }
                let mut dst = col
                    .row_mut(row)
                    .into_shape_with_order((h, w))
                    .expect("row is contiguous");
                let src = input.slice(s![
                    c,
                    (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                    (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                ]);
                dst.slice_mut(s![y0..y1, x0..x1]).assign(&src);
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatter-adds the patch-matrix gradient back onto
/// the `(C, H, W)` input gradient.
fn col2im<F: Real>(dcol: &Array2<F>, c_in: usize, h: usize, w: usize, dilation: usize) -> Array3<F> {
    let d = dilation as isize;
    let mut dinput = Array3::<F>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dy = d * (ky as isize - 1);
                let dx = d * (kx as isize - 1);
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize).min(w as isize - dx) as usize;
                if y0 >= y1 || x0 >= x1 {
                    continue;
                }
                let src = dcol
                    .row(row)
                    .into_shape_with_order((h, w))
                    .expect("row is contiguous");
                let mut dst = dinput.slice_mut(s![
                    c,
                    (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                    (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                ]);
                Zip::from(&mut dst)
                    .and(&src.slice(s![y0..y1, x0..x1]))
                    .for_each(|a, &b| *a += b);
            }
        }
    }
    dinput
}

/// Stack of conv layers with ReLU between all but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<F: Real> {
    pub layers: Vec<Conv2d<F>>,
}

/// Per-layer state kept by [`ConvNet::forward_cached`] for the backward pass.
pub struct ForwardCache<F: Real> {
    /// Input to each layer (the post-ReLU activation of the previous one).
    activations: Vec<Array3<F>>,
    /// Patch matrices, kept only when weight gradients are needed.
    cols: Vec<Option<Array2<F>>>,
}

/// Gradients for one layer.
pub struct LayerGrad<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> ConvNet<F> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum()
    }

    fn apply_layer(layer: &Conv2d<F>, col: &Array2<F>, h: usize, w: usize) -> Array3<F> {
        let mut out = layer.weight.dot(col);
        for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((layer.out_channels, h, w))
            .expect("gemm output is contiguous")
    }

    /// Logits `(num_classes, H, W)` for an input `(C, H, W)`.
    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let n = self.layers.len();
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let col = im2col(&act, layer.dilation);
            act = Self::apply_layer(layer, &col, h, w);
            if i + 1 < n {
                act.mapv_inplace(|v| v.max(F::zero()));
            }
        }
        act
    }

    /// Forward pass keeping what the backward pass needs. `keep_cols` is
    /// required for weight gradients but not for input gradients.
    pub fn forward_cached(&self, x: &Array3<F>, keep_cols: bool) -> (Array3<F>, ForwardCache<F>) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let col = im2col(&act, layer.dilation);
            activations.push(act);
            let mut out = Self::apply_layer(layer, &col, h, w);
            cols.push(keep_cols.then_some(col));
            if i + 1 < n {
                out.mapv_inplace(|v| v.max(F::zero()));
            }
            act = out;
        }
        (act, ForwardCache { activations, cols })
    }

    /// Backpropagates `dlogits`, returning the input gradient and, when the
    /// cache kept patch matrices, per-layer weight gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        dlogits: Array3<F>,
        want_weight_grads: bool,
    ) -> (Array3<F>, Option<Vec<LayerGrad<F>>>) {
        let (h, w) = (dlogits.shape()[1], dlogits.shape()[2]);
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrad<F>>> = (0..n).map(|_| None).collect();
        let mut dact = dlogits;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            // ReLU follows every layer except the last; its derivative gates
            // the incoming gradient by the sign of this layer's *output*,
            // which equals the input activation of the next layer.
            if i + 1 < n {
                let out_act = &cache.activations[i + 1];
                Zip::from(&mut dact).and(out_act).for_each(|g, &a| {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                });
            }
            let dout = dact
                .into_shape_with_order((layer.out_channels, h * w))
                .expect("contiguous");
            if want_weight_grads {
                let col = cache.cols[i].as_ref().expect("cols kept for training");
                grads[i] = Some(LayerGrad {
                    weight: dout.dot(&col.t()),
                    bias: dout.sum_axis(Axis(1)),
                });
            }
            let dcol = layer.weight.t().dot(&dout);
            dact = col2im(&dcol, layer.in_channels, h, w, layer.dilation);
        }
        let weight_grads = want_weight_grads.then(|| grads.into_iter().map(Option::unwrap).collect());
        (dact, weight_grads)
    }
}

/// Mean softmax cross-entropy over counted pixels and its logits gradient.
///
/// A pixel is counted when its label is not `ignore_index` and, if a scope
/// mask is given, the mask retains it. With no counted pixels the loss and
/// gradient are zero.
pub fn softmax_cross_entropy<F: Real>(
    logits: &Array3<F>,
    y: &LabelMap,
    scope: Option<&Array2<u8>>,
) -> (f64, Array3<F>) {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut dlogits = Array3::<F>::zeros((c, h, w));
    let mut counted = 0u64;
    for yy in 0..h {
        for xx in 0..w {
            let label = y.data()[[yy, xx]];
            let in_scope = scope.map_or(true, |m| m[[yy, xx]] == 1);
            if label == y.ignore_index() || !in_scope {
                continue;
            }
            counted += 1;
        }
    }
    if counted == 0 {
        return (0.0, dlogits);
    }
    let inv_n = F::cast(1.0 / counted as f64);
    let mut loss = 0.0f64;
    for yy in 0..h {
        for xx in 0..w {
            let label = y.data()[[yy, xx]];
            let in_scope = scope.map_or(true, |m| m[[yy, xx]] == 1);
            if label == y.ignore_index() || !in_scope {
                continue;
            }
            let mut max = logits[[0, yy, xx]];
            for k in 1..c {
                max = max.max(logits[[k, yy, xx]]);
            }
            let mut sum = F::zero();
            for k in 0..c {
                sum += (logits[[k, yy, xx]] - max).exp();
            }
            let lse = max + sum.ln();
            loss += (lse - logits[[label as usize, yy, xx]]).to_f64();
            for k in 0..c {
                let p = (logits[[k, yy, xx]] - lse).exp();
                let indicator = if k == label as usize { F::one() } else { F::zero() };
                dlogits[[k, yy, xx]] = (p - indicator) * inv_n;
            }
        }
    }
    (loss / counted as f64, dlogits)
}

/// Adam optimizer over a [`ConvNet`]'s parameters.
pub struct Adam<F: Real> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m_w: Vec<Array2<F>>,
    v_w: Vec<Array2<F>>,
    m_b: Vec<Array1<F>>,
    v_b: Vec<Array1<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(net: &ConvNet<F>, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            v_w: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            m_b: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            v_b: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut ConvNet<F>, grads: &[LayerGrad<F>]) {
        self.step += 1;
        let b1 = F::cast(self.beta1);
        let b2 = F::cast(self.beta2);
        let one = F::one();
        let bc1 = F::cast(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::cast(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::cast(self.learning_rate);
        let eps = F::cast(self.eps);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads[i];
            Zip::from(&mut self.m_w[i]).and(&g.weight).for_each(|m, &gv| {
                *m = b1 * *m + (one - b1) * gv;
            });
            Zip::from(&mut self.v_w[i]).and(&g.weight).for_each(|v, &gv| {
                *v = b2 * *v + (one - b2) * gv * gv;
            });
            Zip::from(&mut layer.weight)
                .and(&self.m_w[i])
                .and(&self.v_w[i])
                .for_each(|w, &m, &v| {
                    *w = *w - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            Zip::from(&mut self.m_b[i]).and(&g.bias).for_each(|m, &gv| {
                *m = b1 * *m + (one - b1) * gv;
            });
            Zip::from(&mut self.v_b[i]).and(&g.bias).for_each(|v, &gv| {
                *v = b2 * *v + (one - b2) * gv * gv;
            });
            Zip::from(&mut layer.bias)
                .and(&self.m_b[i])
                .and(&self.v_b[i])
                .for_each(|w, &m, &v| {
                    *w = *w - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng as _;

    fn tiny_net(seed: u64, dilation: usize) -> ConvNet<f64> {
        let mut r = rng::master(seed);
        let mut layers = Vec::new();
        for (ci, co, d) in [(2usize, 3usize, 1usize), (3, 2, dilation)] {
            layers.push(Conv2d {
                weight: Array2::from_shape_fn((co, ci * 9), |_| r.gen_range(-0.5..0.5)),
                bias: Array1::from_shape_fn(co, |_| r.gen_range(-0.1..0.1)),
                in_channels: ci,
                out_channels: co,
                dilation: d,
            });
        }
        ConvNet { layers }
    }

    /// Direct convolution oracle for im2col + GEMM.
    fn conv_oracle(layer: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let d = layer.dilation as isize;
        let mut out = Array3::zeros((layer.out_channels, h, w));
        for o in 0..layer.out_channels {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = layer.bias[o];
                    for c in 0..layer.in_channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + d * (ky - 1);
                                let sx = xx + d * (kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = layer.weight
                                    [[o, (c * 3 + ky as usize) * 3 + kx as usize]];
                                acc += wv * x[[c, sy as usize, sx as usize]];
                            }
                        }
                    }
                    out[[o, y as usize, xx as usize]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let mut r = rng::master(2);
        for dilation in [1usize, 2] {
            let net = tiny_net(3, dilation);
            let x = Array3::from_shape_fn((2, 7, 9), |_| r.gen_range(-1.0..1.0));
            let col = im2col(&x, net.layers[0].dilation);
            let got = ConvNet::apply_layer(&net.layers[0], &col, 7, 9);
            let want = conv_oracle(&net.layers[0], &x);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_forward_cached_agree() {
        let net = tiny_net(5, 2);
        let mut r = rng::master(6);
        let x = Array3::from_shape_fn((2, 8, 8), |_| r.gen_range(0.0..1.0));
        let a = net.forward(&x);
        let (b, _) = net.forward_cached(&x, false);
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = tiny_net(7, 1);
        let mut r = rng::master(8);
        let x = Array3::from_shape_fn((2, 6, 6), |_| r.gen_range(0.05..0.95));
        let labels = Array2::from_shape_fn((6, 6), |_| r.gen_range(0..2u8));
        let y = LabelMap::new(labels, 2).unwrap();

        let (logits, cache) = net.forward_cached(&x, false);
        let (_, dlogits) = softmax_cross_entropy(&logits, &y, None);
        let (dx, _) = net.backward(&cache, dlogits, false);

        let h = 1e-6;
        for _ in 0..20 {
            let idx = [r.gen_range(0..2), r.gen_range(0..6), r.gen_range(0..6)];
            let mut xp = x.clone();
            xp[idx] += h;
            let (lp, _) = softmax_cross_entropy(&net.forward(&xp), &y, None);
            let mut xm = x.clone();
            xm[idx] -= h;
            let (lm, _) = softmax_cross_entropy(&net.forward(&xm), &y, None);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = dx[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "coord {idx:?}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let net = tiny_net(9, 2);
        let mut r = rng::master(10);
        let x = Array3::from_shape_fn((2, 5, 5), |_| r.gen_range(0.05..0.95));
        let labels = Array2::from_shape_fn((5, 5), |_| r.gen_range(0..2u8));
        let y = LabelMap::new(labels, 2).unwrap();

        let (logits, cache) = net.forward_cached(&x, true);
        let (_, dlogits) = softmax_cross_entropy(&logits, &y, None);
        let (_, grads) = net.backward(&cache, dlogits, true);
        let grads = grads.unwrap();

        let h = 1e-6;
        for _ in 0..10 {
            let li = r.gen_range(0..net.layers.len());
            let wi = [
                r.gen_range(0..net.layers[li].weight.shape()[0]),
                r.gen_range(0..net.layers[li].weight.shape()[1]),
            ];
            let mut plus = net.clone();
            plus.layers[li].weight[wi] += h;
            let (lp, _) = softmax_cross_entropy(&plus.forward(&x), &y, None);
            let mut minus = net.clone();
            minus.layers[li].weight[wi] -= h;
            let (lm, _) = softmax_cross_entropy(&minus.forward(&x), &y, None);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[li].weight[wi];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "layer {li} w {wi:?}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn cross_entropy_respects_ignore_and_scope() {
        let logits = Array3::<f64>::zeros((2, 2, 2));
        let mut labels = Array2::zeros((2, 2));
        labels[[0, 0]] = 255;
        let y = LabelMap::new(labels, 2).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &y, None);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(grad[[0, 0, 0]], 0.0);
        assert_eq!(grad[[1, 0, 0]], 0.0);

        let scope = Array2::<u8>::zeros((2, 2));
        let (loss, grad) = softmax_cross_entropy(&logits, &y, Some(&scope));
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_reduces_loss_on_fixed_batch() {
        let mut net = tiny_net(11, 1);
        let mut r = rng::master(12);
        let x = Array3::from_shape_fn((2, 8, 8), |_| r.gen_range(0.0..1.0));
        let labels = Array2::from_shape_fn((8, 8), |(yy, xx)| ((yy + xx) % 2) as u8);
        let y = LabelMap::new(labels, 2).unwrap();
        let mut adam = Adam::new(&net, 5e-3);
        let (logits, _) = net.forward_cached(&x, false);
        let (first, _) = softmax_cross_entropy(&logits, &y, None);
        for _ in 0..50 {
            let (logits, cache) = net.forward_cached(&x, true);
            let (_, dlogits) = softmax_cross_entropy(&logits, &y, None);
            let (_, grads) = net.backward(&cache, dlogits, true);
            adam.step(&mut net, &grads.unwrap());
        }
        let (logits, _) = net.forward_cached(&x, false);
        let (last, _) = softmax_cross_entropy(&logits, &y, None);
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }
}
