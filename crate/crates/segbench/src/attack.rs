//! Attack engine: the SegTrans loop (grid-masked semantic remapping) and
//! the PGD / MI-FGSM / control baselines, all under ℓ∞ projection.
//!
//! Every attack maximizes the per-pixel cross-entropy against the ground
//! truth by sign-gradient ascent; after every update the delta is clamped to
//! `[-ε, ε]` and to the image value range. Attacks are untargeted and
//! single-threaded over one image; callers parallelize across images with
//! independent RNG substreams.

use crate::core::{
    AttackConfig, AttackResult, ImageTensor, LabelMap, LossScope, MaskBatch, Perturbation,
    UpdateMode,
};
use crate::error::Result;
use crate::model::SegModel;
use crate::region::sample_mask_batch;
use crate::rng::Rng;
use crate::Real;
use ndarray::{s, Array2, Array3, Zip};
use rand_distr::{Distribution, Normal};
use std::time::Instant;

/// Per-update values of the adversarial objective (negative cross-entropy).
///
/// SegTrans in sequential mode records K·T values (one per mask update),
/// aggregated mode and the baselines record one value per iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub per_update_values: Vec<f64>,
}

impl LossReport {
    pub fn update_count(&self) -> usize {
        self.per_update_values.len()
    }
}

/// Sign with `sign(0) = 0`, so zero gradients (e.g. at masked-out pixels)
/// never move the perturbation.
pub fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// ℓ∞ projection: clamps `delta` to `[-ε, ε]`, then further so that
/// `x + delta` stays inside `[0, 1]`.
pub fn project_linf<F: Real>(mut delta: Array3<F>, epsilon: f64, x: &Array3<F>) -> Array3<F> {
    let eps = F::cast(epsilon);
    let one = F::one();
    Zip::from(&mut delta).and(x).for_each(|d, &xv| {
        let clamped = (*d).max(-eps).min(eps);
        *d = clamped.max(-xv).min(one - xv);
    });
    delta
}

/// `clip(x + delta, 0, 1)` elementwise.
fn clip_adversarial<F: Real>(x: &Array3<F>, delta: &Array3<F>) -> Array3<F> {
    let mut out = x + delta;
    out.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
    out
}

/// Zeroes image channels wherever the mask is 0.
fn apply_mask<F: Real>(image: &Array3<F>, mask: &Array2<u8>) -> Array3<F> {
    let mut out = image.clone();
    for c in 0..out.shape()[0] {
        Zip::from(&mut out.slice_mut(s![c, .., ..]))
            .and(mask)
            .for_each(|v, &m| {
                if m == 0 {
                    *v = F::zero();
                }
            });
    }
    out
}

/// Chain rule through the elementwise mask product: gradient is zeroed at
/// masked-out pixels.
fn mask_gradient<F: Real>(grad: &mut Array3<F>, mask: &Array2<u8>) {
    for c in 0..grad.shape()[0] {
        Zip::from(&mut grad.slice_mut(s![c, .., ..]))
            .and(mask)
            .for_each(|v, &m| {
                if m == 0 {
                    *v = F::zero();
                }
            });
    }
}

fn budget_asserts<F: Real>(delta: &Array3<F>, x: &Array3<F>, epsilon: f64) {
    if cfg!(debug_assertions) {
        let max = delta.iter().fold(0f64, |m, &v| m.max(v.to_f64().abs()));
        debug_assert!(max <= epsilon + 1e-9, "budget violated: {max} > {epsilon}");
        let adv = clip_adversarial(x, delta);
        debug_assert!(adv.iter().all(|&v| v >= F::zero() && v <= F::one()));
    }
}

fn finish<F: Real>(
    x: &ImageTensor<F>,
    delta: Array3<F>,
    epsilon: f64,
    trace: Vec<f64>,
    started: Instant,
) -> AttackResult<F> {
    let adversarial = clip_adversarial(x.data(), &delta);
    AttackResult {
        delta: Perturbation {
            delta,
            epsilon,
        },
        adversarial_image: ImageTensor::from_raw(adversarial),
        loss_trace: LossReport {
            per_update_values: trace,
        },
        wall_time_seconds: started.elapsed().as_secs_f64(),
    }
}

/// How the gradient source sample is formed in the SegTrans loop.
enum GradientSource {
    /// The masked adversarial sample `(x + δ) ⊙ m`.
    MaskedInput,
    /// An all-zero image, regardless of `x` and `δ` (null-semantics control).
    BlackImage,
}

/// The SegTrans attack.
///
/// Per iteration a fresh batch of T masks (N rectangles each) is drawn.
/// In sequential mode the perturbation takes one projected sign-gradient
/// step per mask; in aggregated mode the T masked gradients are summed into
/// a single step. Updates from all masks accumulate into one total delta
/// defined over the full image.
pub fn segtrans_attack<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult<F>> {
    segtrans_loop(model, x, y, cfg, rng, GradientSource::MaskedInput)
}

/// Null-semantics control: runs the SegTrans loop but computes every
/// gradient at an all-zero image instead of the masked sample, so the
/// updates carry no input semantics.
pub fn black_image_control<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult<F>> {
    segtrans_loop(model, x, y, cfg, rng, GradientSource::BlackImage)
}

fn segtrans_loop<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    cfg: &AttackConfig,
    rng: &mut Rng,
    source: GradientSource,
) -> Result<AttackResult<F>> {
    cfg.validate()?;
    crate::core::validate_pair(x, y)?;
    let started = Instant::now();
    let step = F::cast(cfg.step_size);
    let mut delta = Array3::<F>::zeros(x.data().raw_dim());
    let mut trace = Vec::new();
    let black = match source {
        GradientSource::BlackImage => Some(ImageTensor::from_raw(Array3::<F>::zeros(
            x.data().raw_dim(),
        ))),
        GradientSource::MaskedInput => None,
    };

    for _ in 0..cfg.iterations {
        let MaskBatch { masks, .. } = sample_mask_batch(x.width(), x.height(), cfg, rng)?;
        match cfg.update_mode {
            UpdateMode::Sequential => {
                for mask in &masks {
                    let (loss, mut grad) = masked_gradient(model, x, y, &delta, mask, cfg, &black)?;
                    trace.push(-loss);
                    mask_gradient(&mut grad, mask);
                    Zip::from(&mut delta).and(&grad).for_each(|d, &g| {
                        *d += step * sign(g);
                    });
                    delta = project_linf(delta, cfg.epsilon, x.data());
                    budget_asserts(&delta, x.data(), cfg.epsilon);
                }
            }
            UpdateMode::Aggregated => {
                let mut summed = Array3::<F>::zeros(x.data().raw_dim());
                let mut total_loss = 0.0;
                for mask in &masks {
                    let (loss, mut grad) = masked_gradient(model, x, y, &delta, mask, cfg, &black)?;
                    total_loss += loss;
                    mask_gradient(&mut grad, mask);
                    summed += &grad;
                }
                trace.push(-total_loss);
                Zip::from(&mut delta).and(&summed).for_each(|d, &g| {
                    *d += step * sign(g);
                });
                delta = project_linf(delta, cfg.epsilon, x.data());
                budget_asserts(&delta, x.data(), cfg.epsilon);
            }
        }
    }
    Ok(finish(x, delta, cfg.epsilon, trace, started))
}

fn masked_gradient<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    delta: &Array3<F>,
    mask: &Array2<u8>,
    cfg: &AttackConfig,
    black: &Option<ImageTensor<F>>,
) -> Result<(f64, Array3<F>)> {
    let scope = match cfg.loss_scope {
        LossScope::AllPixels => None,
        LossScope::RetainedPixels => Some(mask),
    };
    match black {
        Some(zeros) => model.input_gradient(zeros, y, scope),
        None => {
            let masked = apply_mask(&clip_adversarial(x.data(), delta), mask);
            model.input_gradient(&ImageTensor::from_raw(masked), y, scope)
        }
    }
}

/// Projected gradient descent with full-image (unmasked) loss.
pub fn pgd_attack<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    epsilon: f64,
    iterations: usize,
    step_size: f64,
    _rng: &mut Rng,
) -> Result<AttackResult<F>> {
    crate::core::validate_pair(x, y)?;
    let started = Instant::now();
    let step = F::cast(step_size);
    let mut delta = Array3::<F>::zeros(x.data().raw_dim());
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let adv = ImageTensor::from_raw(clip_adversarial(x.data(), &delta));
        let (loss, grad) = model.input_gradient(&adv, y, None)?;
        trace.push(-loss);
        Zip::from(&mut delta).and(&grad).for_each(|d, &g| {
            *d += step * sign(g);
        });
        delta = project_linf(delta, epsilon, x.data());
        budget_asserts(&delta, x.data(), epsilon);
    }
    Ok(finish(x, delta, epsilon, trace, started))
}

/// Momentum iterative FGSM: `g ← decay·g + grad/‖grad‖₁`, step by `sign(g)`.
pub fn mi_fgsm_attack<F: Real, M: SegModel<F> + ?Sized>(
    model: &M,
    x: &ImageTensor<F>,
    y: &LabelMap,
    epsilon: f64,
    iterations: usize,
    step_size: f64,
    decay: f64,
    _rng: &mut Rng,
) -> Result<AttackResult<F>> {
    crate::core::validate_pair(x, y)?;
    let started = Instant::now();
    let step = F::cast(step_size);
    let mu = F::cast(decay);
    let mut delta = Array3::<F>::zeros(x.data().raw_dim());
    let mut momentum = Array3::<F>::zeros(x.data().raw_dim());
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let adv = ImageTensor::from_raw(clip_adversarial(x.data(), &delta));
        let (loss, grad) = model.input_gradient(&adv, y, None)?;
        trace.push(-loss);
        let l1: F = grad.iter().map(|&g| g.abs()).sum();
        Zip::from(&mut momentum).and(&grad).for_each(|m, &g| {
            *m = mu * *m
                + if l1 > F::zero() {
                    g / l1
                } else {
                    F::zero()
                };
        });
        Zip::from(&mut delta).and(&momentum).for_each(|d, &m| {
            *d += step * sign(m);
        });
        delta = project_linf(delta, epsilon, x.data());
        budget_asserts(&delta, x.data(), epsilon);
    }
    Ok(finish(x, delta, epsilon, trace, started))
}

/// Same-budget Gaussian noise reference: delta drawn from N(0, ε) and
/// projected. Used as the null baseline the black-image control is compared
/// against.
pub fn gaussian_noise_control<F: Real>(
    x: &ImageTensor<F>,
    epsilon: f64,
    rng: &mut Rng,
) -> AttackResult<F> {
    let started = Instant::now();
    let dist = Normal::new(0.0, epsilon).expect("epsilon is finite");
    let delta = Array3::from_shape_fn(x.data().raw_dim(), |_| F::cast(dist.sample(rng)));
    let delta = project_linf(delta, epsilon, x.data());
    budget_asserts(&delta, x.data(), epsilon);
    finish(x, delta, epsilon, Vec::new(), started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::EPS_8_255;
    use crate::model::{build_toy_model, ToyNet, ToyNetSpec, ToyVariant};
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng as _;

    fn toy_model(seed: u64) -> ToyNet<f32> {
        build_toy_model(ToyNetSpec::new(ToyVariant::A, 4, seed)).unwrap()
    }

    fn sample(seed: u64, size: usize) -> (ImageTensor<f32>, LabelMap) {
        let mut r = rng::master(seed);
        let x = ImageTensor::new(Array3::from_shape_fn((3, size, size), |_| {
            r.gen_range(0.0..=1.0f32)
        }))
        .unwrap();
        let y = LabelMap::new(
            Array2::from_shape_fn((size, size), |_| r.gen_range(0..4u8)),
            4,
        )
        .unwrap();
        (x, y)
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            iterations: 2,
            remap_count: 3,
            grid_count: 4,
            region_mode: crate::core::RegionMode::FixedSquare { side: 8 },
            ..AttackConfig::default()
        }
    }

    #[test]
    fn project_linf_named_cases() {
        let x = Array3::from_elem((1, 2, 2), 0.5f64);
        let clamped = project_linf(Array3::from_elem((1, 2, 2), 0.10), EPS_8_255, &x);
        assert!(clamped.iter().all(|&v| (v - EPS_8_255).abs() < 1e-12));

        let small = Array3::from_elem((1, 2, 2), 0.01);
        let kept = project_linf(small.clone(), EPS_8_255, &x);
        assert_eq!(small, kept);

        let bright = Array3::from_elem((1, 2, 2), 0.99f64);
        let clipped = project_linf(Array3::from_elem((1, 2, 2), 0.03), EPS_8_255, &bright);
        assert!(clipped.iter().all(|&v| (v - 0.01).abs() < 1e-12));
    }

    #[test]
    fn sign_is_zero_at_zero() {
        assert_eq!(sign(0.0f32), 0.0);
        assert_eq!(sign(-0.0f32), 0.0);
        assert_eq!(sign(3.5f32), 1.0);
        assert_eq!(sign(-0.1f32), -1.0);
    }

    #[test]
    fn zero_iterations_returns_identity() {
        let model = toy_model(0);
        let (x, y) = sample(1, 32);
        let cfg = AttackConfig {
            iterations: 0,
            ..small_cfg()
        };
        let mut r = rng::master(0);
        let res = segtrans_attack(&model, &x, &y, &cfg, &mut r).unwrap();
        assert!(res.delta.delta.iter().all(|&v| v == 0.0));
        assert_eq!(res.adversarial_image.data(), x.data());
        assert_eq!(res.loss_trace.update_count(), 0);

        let pgd = pgd_attack(&model, &x, &y, EPS_8_255, 0, 0.01, &mut r).unwrap();
        assert!(pgd.delta.delta.iter().all(|&v| v == 0.0));

        let ctrl = black_image_control(&model, &x, &y, &cfg, &mut r).unwrap();
        assert!(ctrl.delta.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn budget_and_range_hold_for_all_attacks() {
        let model = toy_model(3);
        let (x, y) = sample(4, 32);
        let cfg = small_cfg();
        let mut r = rng::master(5);
        for res in [
            segtrans_attack(&model, &x, &y, &cfg, &mut r).unwrap(),
            pgd_attack(&model, &x, &y, EPS_8_255, 4, 2.0 / 255.0, &mut r).unwrap(),
            mi_fgsm_attack(&model, &x, &y, EPS_8_255, 4, 2.0 / 255.0, 1.0, &mut r).unwrap(),
            black_image_control(&model, &x, &y, &cfg, &mut r).unwrap(),
            gaussian_noise_control(&x, EPS_8_255, &mut r),
        ] {
            assert!(res.delta.max_abs() <= EPS_8_255 + 1e-9);
            assert!(res.adversarial_image.in_range());
        }
    }

    #[test]
    fn loss_trace_length_contracts() {
        let model = toy_model(6);
        let (x, y) = sample(7, 32);
        let mut cfg = small_cfg();
        let mut r = rng::master(1);
        let res = segtrans_attack(&model, &x, &y, &cfg, &mut r).unwrap();
        assert_eq!(
            res.loss_trace.update_count(),
            cfg.iterations * cfg.remap_count
        );

        cfg.update_mode = UpdateMode::Aggregated;
        let res = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(1)).unwrap();
        assert_eq!(res.loss_trace.update_count(), cfg.iterations);

        let res = pgd_attack(&model, &x, &y, EPS_8_255, 5, 0.01, &mut r).unwrap();
        assert_eq!(res.loss_trace.update_count(), 5);
    }

    #[test]
    fn attacks_are_deterministic_per_seed() {
        let model = toy_model(8);
        let (x, y) = sample(9, 32);
        let cfg = small_cfg();
        let a = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(42)).unwrap();
        let b = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(42)).unwrap();
        assert_eq!(a.delta.delta, b.delta.delta);
        assert_eq!(a.loss_trace, b.loss_trace);
        let c = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(43)).unwrap();
        assert_ne!(a.delta.delta, c.delta.delta);
    }

    #[test]
    fn mi_fgsm_with_zero_decay_equals_pgd() {
        let model = toy_model(10);
        let (x, y) = sample(11, 32);
        let mut r1 = rng::master(0);
        let mut r2 = rng::master(0);
        let pgd = pgd_attack(&model, &x, &y, EPS_8_255, 5, 2.0 / 255.0, &mut r1).unwrap();
        let mif = mi_fgsm_attack(&model, &x, &y, EPS_8_255, 5, 2.0 / 255.0, 0.0, &mut r2).unwrap();
        assert_eq!(pgd.delta.delta, mif.delta.delta);
    }

    #[test]
    fn mi_fgsm_first_step_equals_pgd_for_any_decay() {
        let model = toy_model(12);
        let (x, y) = sample(13, 32);
        let mut r = rng::master(0);
        let pgd = pgd_attack(&model, &x, &y, EPS_8_255, 1, 2.0 / 255.0, &mut r).unwrap();
        let mif = mi_fgsm_attack(&model, &x, &y, EPS_8_255, 1, 2.0 / 255.0, 7.3, &mut r).unwrap();
        assert_eq!(pgd.delta.delta, mif.delta.delta);
    }

    #[test]
    fn sequential_and_aggregated_modes_differ() {
        let model = toy_model(14);
        let (x, y) = sample(15, 32);
        let cfg = small_cfg();
        let seq = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(2)).unwrap();
        let agg = segtrans_attack(
            &model,
            &x,
            &y,
            &AttackConfig {
                update_mode: UpdateMode::Aggregated,
                ..cfg
            },
            &mut rng::master(2),
        )
        .unwrap();
        assert_ne!(seq.delta.delta, agg.delta.delta);
    }

    #[test]
    fn retained_pixel_scope_runs() {
        let model = toy_model(16);
        let (x, y) = sample(17, 32);
        let cfg = AttackConfig {
            loss_scope: LossScope::RetainedPixels,
            ..small_cfg()
        };
        let res = segtrans_attack(&model, &x, &y, &cfg, &mut rng::master(3)).unwrap();
        assert!(res.delta.max_abs() <= EPS_8_255 + 1e-9);
        assert!(res.loss_trace.per_update_values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_pixels_keep_zero_delta_on_first_update() {
        // With one iteration of one mask, pixels outside the mask have zero
        // gradient through the elementwise product and must not move.
        let model = toy_model(18);
        let (x, y) = sample(19, 32);
        let cfg = AttackConfig {
            iterations: 1,
            remap_count: 1,
            grid_count: 4,
            region_mode: crate::core::RegionMode::FixedSquare { side: 4 },
            ..AttackConfig::default()
        };
        let mut r = rng::master(4);
        let batch = sample_mask_batch(32, 32, &cfg, &mut rng::master(4)).unwrap();
        let res = segtrans_attack(&model, &x, &y, &cfg, &mut r).unwrap();
        let mask = &batch.masks[0];
        for yy in 0..32 {
            for xx in 0..32 {
                if mask[[yy, xx]] == 0 {
                    for c in 0..3 {
                        assert_eq!(res.delta.delta[[c, yy, xx]], 0.0);
                    }
                }
            }
        }
    }
}
