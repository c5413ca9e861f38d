//! Guided-backpropagation saliency for one output capsule.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::vgg::{InputNormalization, VggPrefix, IMAGENET_STD};

use super::{CapsuleNet, Mode, OUTPUT_DIM};

/// Saliency of `image: [3,H,W]` (RGB in `[0,1]`) for class `target`.
///
/// The gradient of the mean of `v(target)` with respect to the image is
/// taken with the guided ReLU rule, collapsed over channels by max
/// absolute value and scaled so the largest entry is 1. An all-zero
/// gradient yields an all-zero map. Returns `[H,W]`.
pub fn saliency_map<T: Element>(
    net: &CapsuleNet<T>,
    prefix: &VggPrefix<T>,
    image: &Tensor<T>,
    target: usize,
) -> Result<Tensor<T>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim(
            "saliency_map",
            format!("expected a [3,H,W] image, got {:?}", image.shape()),
        ));
    };
    let classes = net.config().classes;
    if target >= classes {
        return Err(Error::Parameter(format!("target class {target} outside 0..{classes}")));
    }
    if !net.store().all_finite() || !prefix.store().all_finite() {
        return Err(Error::Numerical("parameters contain non-finite values".into()));
    }
    let mut tape = Tape::new();
    tape.set_guided_relu(true);
    let x = prefix.normalize(image)?.reshape([1, 3, h, w])?;
    let x = tape.input(x)?;
    let features = prefix.record(&mut tape, x)?;
    let out = net.record_forward(&mut tape, features, Mode::Infer, None, false)?;
    let mut mask = Tensor::zeros([1, classes, OUTPUT_DIM])?;
    mask.data_mut()[target * OUTPUT_DIM..(target + 1) * OUTPUT_DIM].fill(T::one());
    let mask = tape.constant(mask);
    let picked = tape.mul(out.routing.v, mask)?;
    let total = tape.sum(picked)?;
    let score = tape.scale(total, T::from_f64_lossy(1.0 / OUTPUT_DIM as f64))?;
    let mut grads = tape.backward(score)?;
    let g = grads
        .take_input(x)
        .ok_or_else(|| Error::Tape("image gradient missing".into()))?;
    let scale: [f64; 3] = match prefix.normalization {
        InputNormalization::UnitRange => [1.0; 3],
        InputNormalization::Imagenet => IMAGENET_STD.map(|s| 1.0 / s),
    };
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for (c, chan) in g.data().chunks(plane).enumerate() {
        for (m, v) in map.iter_mut().zip(chan) {
            *m = m.max((v.as_f64() * scale[c]).abs());
        }
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("saliency gradient is not finite".into()));
    }
    let peak = map.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        map.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::from_vec([h, w], map.into_iter().map(T::from_f64_lossy).collect())
}
