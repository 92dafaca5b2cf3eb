//! Transferable adversarial attacks on semantic-segmentation models.
//!
//! The crate implements the SegTrans attack (grid-based multi-region masking
//! plus semantic remapping), the PGD and MI-FGSM baselines, a pair of small
//! fully-convolutional toy models with training and defense transforms, a
//! segmentation metric suite (mIoU, ASR, PSNR, PosiRatio), a synthetic shapes
//! dataset, and a config-driven experiment runner.
//!
//! All numeric kernels are generic over the scalar type via [`Real`]
//! (`f32` for speed, `f64` for oracle-grade gradient checks); concrete
//! aliases live at the crate root.

pub mod attack;
pub mod core;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod region;
pub mod render;
pub mod rng;

pub use error::{Error, Result};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, NumCast};
use std::fmt;
use std::iter::Sum;

/// Scalar type the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. All RNG-driven sampling happens in `f64`
/// or integers and is converted through [`Real::cast`], so mask geometry and
/// weight initialization do not depend on the scalar chosen for the math.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + ScalarOperand
    + LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast<T: NumCast>(x: T) -> Self {
        NumCast::from(x).unwrap()
    }

    fn to_f64(self) -> f64 {
        NumCast::from(self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Default scalar for experiment runs.
pub type Fast = f32;
/// Scalar for finite-difference and other oracle-grade checks.
pub type Exact = f64;

pub type Image32 = core::ImageTensor<f32>;
pub type Image64 = core::ImageTensor<f64>;
pub type Perturbation32 = core::Perturbation<f32>;
pub type Perturbation64 = core::Perturbation<f64>;
pub type AttackResult32 = core::AttackResult<f32>;
pub type AttackResult64 = core::AttackResult<f64>;
pub type ToyNet32 = model::ToyNet<f32>;
pub type ToyNet64 = model::ToyNet<f64>;
