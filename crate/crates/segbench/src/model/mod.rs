//! Segmentation-model interface, desk-scale toy models, and the defense
//! transforms (magnitude pruning, Gaussian corruption, FGSM adversarial
//! training).

pub mod checkpoint;
pub mod nn;
pub mod train;

use crate::core::{ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::predict_labels;
use crate::rng::Rng;
use crate::Real;
use ndarray::{Array1, Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_external_model, load_model, save_model};
pub use train::{adversarial_train, train_toy, AdvTrainConfig, TrainConfig};

/// Uniform interface every attack and the runner work against: forward
/// logits plus input-gradients of the per-pixel cross-entropy loss.
///
/// Implementations must be safe for concurrent read-only inference.
pub trait SegModel<F: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn num_classes(&self) -> usize;

    /// Per-pixel class logits `(num_classes, H, W)`; the spatial shape always
    /// equals the input's.
    fn forward(&self, x: &ImageTensor<F>) -> Result<Array3<F>>;

    /// Cross-entropy loss against `y` and its gradient with respect to the
    /// input image. `scope` restricts the loss to mask-retained pixels;
    /// `None` means every non-ignored pixel.
    fn input_gradient(
        &self,
        x: &ImageTensor<F>,
        y: &LabelMap,
        scope: Option<&Array2<u8>>,
    ) -> Result<(f64, Array3<F>)>;

    /// Argmax prediction with ties broken toward the lowest class index.
    fn predict(&self, x: &ImageTensor<F>) -> Result<LabelMap> {
        Ok(predict_labels(&self.forward(x)?, self.num_classes()))
    }
}

/// The two toy architectures. They differ in depth and dilation so the
/// surrogate→target pair has a genuine architectural gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyVariant {
    /// 5 plain 3×3 conv layers.
    A,
    /// 7 conv layers with dilation 2 in the middle block.
    B,
}

impl ToyVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToyVariant::A => "A",
            ToyVariant::B => "B",
        }
    }
}

/// Architecture description for [`build_toy_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetSpec {
    pub variant: ToyVariant,
    /// Hidden channel width.
    pub width: usize,
    pub num_classes: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ToyNetSpec {
    pub fn new(variant: ToyVariant, num_classes: usize, seed: u64) -> Self {
        let width = match variant {
            ToyVariant::A => 12,
            ToyVariant::B => 10,
        };
        Self {
            variant,
            width,
            num_classes,
            seed,
        }
    }

    /// `(in, out, dilation)` per layer.
    fn layer_plan(&self) -> Vec<(usize, usize, usize)> {
        let w = self.width;
        let c = self.num_classes;
        match self.variant {
            ToyVariant::A => vec![(3, w, 1), (w, w, 1), (w, w, 1), (w, w, 1), (w, c, 1)],
            ToyVariant::B => vec![
                (3, w, 1),
                (w, w, 1),
                (w, w, 2),
                (w, w, 2),
                (w, w, 2),
                (w, w, 1),
                (w, c, 1),
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidSpec("channel width must be >= 1".into()));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::InvalidSpec(format!(
                "num_classes {} outside 1..=254",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// A toy fully-convolutional segmentation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet<F: Real> {
    net: nn::ConvNet<F>,
    spec: ToyNetSpec,
    name: String,
}

impl<F: Real> ToyNet<F> {
    pub fn spec(&self) -> &ToyNetSpec {
        &self.spec
    }

    pub fn network(&self) -> &nn::ConvNet<F> {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut nn::ConvNet<F> {
        &mut self.net
    }

    pub(crate) fn from_parts(net: nn::ConvNet<F>, spec: ToyNetSpec) -> Self {
        let name = format!("toy{}-w{}", spec.variant.as_str(), spec.width);
        Self { net, spec, name }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Converts the scalar type, exactly when widening.
    pub fn convert<G: Real>(&self) -> ToyNet<G> {
        let layers = self
            .net
            .layers
            .iter()
            .map(|l| nn::Conv2d {
                weight: l.weight.mapv(|v| G::cast(v.to_f64())),
                bias: l.bias.mapv(|v| G::cast(v.to_f64())),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                dilation: l.dilation,
            })
            .collect();
        ToyNet::from_parts(nn::ConvNet { layers }, self.spec)
    }

    fn check_input(&self, x: &ImageTensor<F>) -> Result<()> {
        if x.channels() != self.net.layers[0].in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, model expects {}",
                x.channels(),
                self.net.layers[0].in_channels
            )));
        }
        Ok(())
    }
}

impl<F: Real> SegModel<F> for ToyNet<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn forward(&self, x: &ImageTensor<F>) -> Result<Array3<F>> {
        self.check_input(x)?;
        let logits = self.net.forward(x.data());
        debug_assert_eq!(&logits.shape()[1..], &x.data().shape()[1..]);
        Ok(logits)
    }

    fn input_gradient(
        &self,
        x: &ImageTensor<F>,
        y: &LabelMap,
        scope: Option<&Array2<u8>>,
    ) -> Result<(f64, Array3<F>)> {
        self.check_input(x)?;
        if x.height() != y.height() || x.width() != y.width() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs labels {}x{}",
                x.height(),
                x.width(),
                y.height(),
                y.width()
            )));
        }
        let (logits, cache) = self.net.forward_cached(x.data(), false);
        let (loss, dlogits) = nn::softmax_cross_entropy(&logits, y, scope);
        let (dx, _) = self.net.backward(&cache, dlogits, false);
        Ok((loss, dx))
    }
}

/// Builds a toy model with deterministic He-normal initialization from the
/// spec seed. Initialization draws in f64, so f32 and f64 builds of the same
/// spec share weights up to rounding.
pub fn build_toy_model<F: Real>(spec: ToyNetSpec) -> Result<ToyNet<F>> {
    spec.validate()?;
    let mut rng = crate::rng::master(spec.seed);
    let mut layers = Vec::new();
    for (c_in, c_out, dilation) in spec.layer_plan() {
        let fan_in = c_in * nn::KERNEL * nn::KERNEL;
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is finite");
        let weight =
            Array2::from_shape_fn((c_out, fan_in), |_| F::cast(dist.sample(&mut rng)));
        layers.push(nn::Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            in_channels: c_in,
            out_channels: c_out,
            dilation,
        });
    }
    let net = nn::ConvNet { layers };
    if net.param_count() > 200_000 {
        return Err(Error::InvalidSpec(format!(
            "{} parameters exceed the 200k toy budget",
            net.param_count()
        )));
    }
    Ok(ToyNet::from_parts(net, spec))
}

/// Global magnitude pruning over convolution weights only (biases untouched):
/// zeroes exactly `ceil(rate · n)` smallest-|w| entries. The input model is
/// left unmodified.
pub fn prune_model<F: Real>(model: &ToyNet<F>, rate: f64) -> Result<ToyNet<F>> {
    if !(0.0..=0.9).contains(&rate) {
        return Err(Error::RateOutOfRange(format!(
            "pruning rate {rate} outside [0, 0.9]"
        )));
    }
    let mut pruned = model.clone();
    let total: usize = pruned.net.layers.iter().map(|l| l.weight.len()).sum();
    let k = (rate * total as f64).ceil() as usize;
    if k == 0 {
        return Ok(pruned);
    }
    // (|w|, layer, flat index), totally ordered so the count is exact.
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (li, layer) in pruned.net.layers.iter().enumerate() {
        for (wi, &w) in layer.weight.iter().enumerate() {
            entries.push((w.to_f64().abs(), li, wi));
        }
    }
    entries.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("weights are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, li, wi) in entries.iter().take(k) {
        let flat = pruned.net.layers[li]
            .weight
            .as_slice_mut()
            .expect("weights are contiguous");
        flat[wi] = F::zero();
    }
    Ok(pruned)
}

/// Number of exactly-zero convolution weights (pruning diagnostics).
pub fn zero_weight_count<F: Real>(model: &ToyNet<F>) -> usize {
    model
        .network()
        .layers
        .iter()
        .map(|l| l.weight.iter().filter(|&&w| w == F::zero()).count())
        .sum()
}

/// Gaussian input corruption at the given level: adds noise with
/// σ = 0.04 · level and clips back to [0, 1]. Level 0 is the identity.
pub fn corrupt_input<F: Real>(
    x: &ImageTensor<F>,
    level: usize,
    rng: &mut Rng,
) -> Result<ImageTensor<F>> {
    if level > 5 {
        return Err(Error::LevelOutOfRange(format!(
            "corruption level {level} outside 0..=5"
        )));
    }
    if level == 0 {
        return Ok(x.clone());
    }
    let sigma = 0.04 * level as f64;
    let dist = Normal::new(0.0, sigma).expect("sigma is finite");
    let data = x.data().mapv(|v| {
        let noisy = v.to_f64() + dist.sample(rng);
        F::cast(noisy.clamp(0.0, 1.0))
    });
    Ok(ImageTensor::from_raw(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::validate_pair;
    use ndarray::Array3;

    fn spec_a() -> ToyNetSpec {
        ToyNetSpec::new(ToyVariant::A, 4, 0)
    }

    fn mid_image(h: usize, w: usize) -> ImageTensor<f32> {
        ImageTensor::new(Array3::from_elem((3, h, w), 0.5f32)).unwrap()
    }

    #[test]
    fn forward_shape_contract() {
        let model: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        let logits = model.forward(&mid_image(64, 64)).unwrap();
        assert_eq!(logits.shape(), &[4, 64, 64]);
        assert!(model.param_count() <= 200_000);
    }

    #[test]
    fn same_spec_gives_identical_weights() {
        let a: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        let b: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        assert_eq!(a.network(), b.network());
    }

    #[test]
    fn variants_differ_architecturally_and_numerically() {
        let a: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        let b: ToyNet<f32> = build_toy_model(ToyNetSpec::new(ToyVariant::B, 4, 0)).unwrap();
        assert_ne!(a.network().layers.len(), b.network().layers.len());
        assert!(b.network().layers.iter().any(|l| l.dilation == 2));
        assert!(a.network().layers.iter().all(|l| l.dilation == 1));
        let x = mid_image(32, 32);
        let la = a.forward(&x).unwrap();
        let lb = b.forward(&x).unwrap();
        let max_diff = la
            .iter()
            .zip(lb.iter())
            .fold(0f32, |m, (&p, &q)| m.max((p - q).abs()));
        assert!(max_diff > 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec_a();
        s.width = 0;
        assert!(matches!(
            build_toy_model::<f32>(s),
            Err(Error::InvalidSpec(_))
        ));
        let mut s = spec_a();
        s.num_classes = 0;
        assert!(build_toy_model::<f32>(s).is_err());
        let mut s = spec_a();
        s.width = 600; // blows the parameter budget
        assert!(matches!(
            build_toy_model::<f32>(s),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn prune_rate_zero_is_identity() {
        let model: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        let pruned = prune_model(&model, 0.0).unwrap();
        assert_eq!(model.network(), pruned.network());
        let x = mid_image(16, 16);
        assert_eq!(model.forward(&x).unwrap(), pruned.forward(&x).unwrap());
    }

    #[test]
    fn prune_zero_count_is_exact_and_monotone() {
        let model: ToyNet<f32> = build_toy_model(spec_a()).unwrap();
        let total: usize = model
            .network()
            .layers
            .iter()
            .map(|l| l.weight.len())
            .sum();
        let mut last = 0usize;
        for rate in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9] {
            let pruned = prune_model(&model, rate).unwrap();
            let zeros = zero_weight_count(&pruned);
            assert_eq!(zeros, (rate * total as f64).ceil() as usize);
            assert!(zeros >= last);
            last = zeros;
        }
        // Input model untouched.
        assert_eq!(zero_weight_count(&model), 0);
        assert!(matches!(
            prune_model(&model, 0.95),
            Err(Error::RateOutOfRange(_))
        ));
    }

    #[test]
    fn corruption_level_zero_is_identity() {
        let x = mid_image(16, 16);
        let mut rng = crate::rng::master(0);
        let out = corrupt_input(&x, 0, &mut rng).unwrap();
        assert_eq!(x.data(), out.data());
        assert!(matches!(
            corrupt_input(&x, 6, &mut rng),
            Err(Error::LevelOutOfRange(_))
        ));
    }

    #[test]
    fn corruption_level_five_matches_sigma_map() {
        let x = mid_image(64, 64);
        let mut rng = crate::rng::master(33);
        let out = corrupt_input(&x, 5, &mut rng).unwrap();
        let diffs: Vec<f64> = x
            .data()
            .iter()
            .zip(out.data().iter())
            .map(|(&a, &b)| (b - a) as f64)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 0.2).abs() < 0.01, "sample std {std}");
        // Referential transparency: input unchanged, output in range.
        assert!(x.data().iter().all(|&v| v == 0.5));
        assert!(out.in_range());
    }

    #[test]
    fn gradient_scope_zeroes_masked_pixels_loss() {
        let model: ToyNet<f64> = build_toy_model(spec_a()).unwrap();
        let x = ImageTensor::new(Array3::from_elem((3, 8, 8), 0.4f64)).unwrap();
        let y = LabelMap::new(ndarray::Array2::zeros((8, 8)), 4).unwrap();
        validate_pair(&x, &y).unwrap();
        let scope = ndarray::Array2::<u8>::zeros((8, 8));
        let (loss, grad) = model.input_gradient(&x, &y, Some(&scope)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }
}
