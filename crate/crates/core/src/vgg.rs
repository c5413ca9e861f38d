//! Frozen VGG-19 prefix: the eight 3×3 convolutions and three max pools up
//! to and including the third pool.
//!
//! Weight names follow `vgg.convK.weight` / `vgg.convK.bias`, `K ∈ 1..=8`.
//!
//! Input conventions:
//! - pretrained weights (converted from the ImageNet-trained VGG-19) expect
//!   RGB in `[0, 1]` normalized per channel with mean `(0.485, 0.456, 0.406)`
//!   and std `(0.229, 0.224, 0.225)`;
//! - the random-init fallback takes RGB in `[0, 1]` unchanged.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ops;
use crate::par;
use crate::params::{ParamKind, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::weights;

/// `(C_in, C_out)` for the eight convolutions.
pub const CONV_LAYERS: [(usize, usize); 8] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 256),
];

/// 1-based conv layers followed by a 2×2, stride-2 max pool.
pub const POOL_AFTER: [usize; 3] = [2, 4, 8];

/// Output channel count of the prefix.
pub const FEATURE_CHANNELS: usize = 256;

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 8;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Pixel normalization the weights expect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNormalization {
    /// `[0, 1]` RGB, no further scaling.
    UnitRange,
    /// `[0, 1]` RGB standardized with the ImageNet channel statistics.
    Imagenet,
}

/// How to populate the prefix.
pub enum VggInit<'a> {
    Pretrained(&'a Path),
    Random(&'a mut RngStream),
}

pub fn weight_name(layer: usize) -> String {
    format!("vgg.conv{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("vgg.conv{layer}.bias")
}

/// The VGG-19 prefix parameters.
#[derive(Clone, Debug)]
pub struct VggPrefix<T: Element> {
    store: ParamStore<T>,
    /// When false (the default) the prefix is recorded as constants and
    /// never receives gradients.
    pub trainable: bool,
    pub normalization: InputNormalization,
}

fn empty_store<T: Element>() -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (i, &(cin, cout)) in CONV_LAYERS.iter().enumerate() {
        let l = i + 1;
        store
            .insert(weight_name(l), Tensor::zeros([cout, cin, 3, 3]).expect("static shape"), ParamKind::Trainable)
            .expect("unique names");
        store
            .insert(bias_name(l), Tensor::zeros([cout]).expect("static shape"), ParamKind::Trainable)
            .expect("unique names");
    }
    store
}

/// He-normal initialization: `N(0, 2/fan_in)`.
pub(crate) fn he_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.normal(0.0, std))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree")
}

impl<T: Element> VggPrefix<T> {
    pub fn build(init: VggInit<'_>) -> Result<Self> {
        match init {
            VggInit::Pretrained(path) => Self::load(path),
            VggInit::Random(rng) => Ok(Self::random(rng)),
        }
    }

    pub fn random(rng: &mut RngStream) -> Self {
        let mut store = empty_store::<T>();
        for (i, &(cin, cout)) in CONV_LAYERS.iter().enumerate() {
            let w = he_normal(&[cout, cin, 3, 3], cin * 9, rng);
            *store.get_mut(&weight_name(i + 1)).expect("present") = w;
        }
        VggPrefix {
            store,
            trainable: false,
            normalization: InputNormalization::UnitRange,
        }
    }

    /// Load converted pretrained weights from a CFW1 file.
    pub fn load(path: &Path) -> Result<Self> {
        let records = weights::load(path)?;
        Self::from_records(&records, InputNormalization::Imagenet)
    }

    pub fn from_records(records: &[weights::Record], normalization: InputNormalization) -> Result<Self> {
        let mut store = empty_store::<T>();
        store.load_records(records)?;
        Ok(VggPrefix {
            store,
            trainable: false,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.store.to_records())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn cast<U: Element>(&self) -> VggPrefix<U> {
        VggPrefix {
            store: self.store.cast(),
            trainable: self.trainable,
            normalization: self.normalization,
        }
    }

    /// Apply the input normalization to a `[3,H,W]` image in `[0,1]`.
    pub fn normalize(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match self.normalization {
            InputNormalization::UnitRange => Ok(image.clone()),
            InputNormalization::Imagenet => {
                let &[3, h, w] = image.shape() else {
                    return Err(Error::dim(
                        "normalize",
                        format!("expected a [3,H,W] image, got {:?}", image.shape()),
                    ));
                };
                let mut out = image.clone();
                for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                    let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
                    plane
                        .iter_mut()
                        .for_each(|v| *v = T::from_f64_lossy((v.as_f64() - m) / s));
                }
                Ok(out)
            }
        }
    }

    fn check_input(shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::dim(
                    "extract_features",
                    format!("expected [3,H,W] or [B,3,H,W], got {shape:?}"),
                ))
            }
        };
        if c != 3 {
            return Err(Error::dim("extract_features", format!("expected 3 channels, got {c}")));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::dim(
                "extract_features",
                format!("input {h}x{w} smaller than {MIN_INPUT}x{MIN_INPUT}"),
            ));
        }
        Ok(())
    }

    /// Feature map `[256, ⌊⌊⌊H/2⌋/2⌋/2⌋, …]` for an already-normalized image
    /// (or batch). Deterministic.
    pub fn extract_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_input(image.shape())?;
        let mut x = image.clone();
        for l in 1..=CONV_LAYERS.len() {
            x = ops::conv2d(&x, self.store.require(&weight_name(l))?, self.store.require(&bias_name(l))?, 1, 1)?;
            x = ops::relu(&x);
            if POOL_AFTER.contains(&l) {
                x = ops::maxpool2d(&x, 2, 2)?.output;
            }
        }
        Ok(x)
    }

    /// Features for many images, in input order, computed in parallel.
    pub fn extract_many(&self, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        par::try_map_indexed(images.len(), |i| self.extract_features(&images[i]))
    }

    /// Record the prefix on a tape. Parameters are registered as trainable
    /// only when `self.trainable` is set.
    pub fn record(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        Self::check_input(tape.value(input).shape())?;
        let mut x = input;
        for l in 1..=CONV_LAYERS.len() {
            let (wn, bn) = (weight_name(l), bias_name(l));
            let (w, b) = if self.trainable {
                (tape.param(&wn, self.store.require(&wn)?)?, tape.param(&bn, self.store.require(&bn)?)?)
            } else {
                (
                    tape.constant(self.store.require(&wn)?.clone()),
                    tape.constant(self.store.require(&bn)?.clone()),
                )
            };
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x)?;
            if POOL_AFTER.contains(&l) {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }
}

/// Spatial side of the feature map for an input side `s`.
pub fn feature_side(s: usize) -> usize {
    s / 2 / 2 / 2
}
