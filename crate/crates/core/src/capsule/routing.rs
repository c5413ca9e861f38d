//! Regularized dynamic routing and the capsule-to-probability head.
//!
//! Given primary capsule outputs `u(i)` and routing matrices `W(i,j)`:
//!
//! ```text
//! Ŵ(i,j) = W(i,j) + noise                         (train only)
//! û(i,j) = Ŵ(i,j) · squash(u(i))
//! û      = dropout(û)                             (train only)
//! b      = 0
//! repeat r times:
//!     c(i,·) = softmax_j b(i,·)
//!     s(j)   = Σ_i c(i,j) û(i,j)
//!     v(j)   = squash(s(j))
//!     b(i,j) += û(i,j)·v(j)
//! ```
//!
//! The class probabilities average, over the `m` capsule dimensions, a
//! softmax across classes of each dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Whether the train-only regularizers (noise, dropout, batch statistics) run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Routing iterations `r`.
    #[serde(alias = "r")]
    pub iterations: usize,
    /// Standard deviation of the Gaussian noise added to `W` in training.
    pub noise_sigma: f64,
    /// Dropout probability applied to `û` in training.
    #[serde(alias = "dropout_p")]
    pub dropout: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 2,
            noise_sigma: 0.1,
            dropout: 0.05,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Parameter("routing needs at least one iteration".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Parameter(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        ops::validate_dropout(self.dropout)
    }
}

/// Handles to the routing intermediates on a tape.
pub struct RoutingVars {
    /// `û` after noise and dropout, `[B,N,J,D]`.
    pub uhat: Var,
    /// Coupling coefficients per iteration, each `[B,N,J]`.
    pub couplings: Vec<Var>,
    /// Output capsules `[B,J,D]`.
    pub v: Var,
}

/// Record routing for capsule inputs `u: [B,N,E]` and weights `w: [N,J,D,E]`.
pub fn record_routing<T: Element>(
    tape: &mut Tape<T>,
    u: Var,
    w: Var,
    cfg: &RoutingConfig,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<RoutingVars> {
    cfg.validate()?;
    let (b, n, j, _, _) = ops::route_dims(tape.value(w), tape.value(u))?;
    let squashed = tape.squash(u)?;
    let mut rng = rng;
    let w_hat = if mode == Mode::Train && cfg.noise_sigma > 0.0 {
        let rng = rng
            .as_mut()
            .ok_or_else(|| Error::Parameter("train-mode routing needs a random stream".into()))?;
        let shape = tape.value(w).shape().to_vec();
        let n_el: usize = shape.iter().product();
        let noise = (0..n_el)
            .map(|_| T::from_f64_lossy(rng.normal(0.0, cfg.noise_sigma)))
            .collect();
        let noise = tape.constant(Tensor::from_vec(shape, noise)?);
        tape.add(w, noise)?
    } else {
        w
    };
    let mut uhat = tape.route_predict(w_hat, squashed)?;
    if mode == Mode::Train && cfg.dropout > 0.0 {
        let rng = rng
            .as_mut()
            .ok_or_else(|| Error::Parameter("train-mode routing needs a random stream".into()))?;
        uhat = tape.dropout(uhat, cfg.dropout, rng)?;
    }
    let mut logits = tape.constant(Tensor::zeros([b, n, j])?);
    let mut couplings = Vec::with_capacity(cfg.iterations);
    let mut v = None;
    for it in 0..cfg.iterations {
        let c = tape.softmax(logits, 2)?;
        couplings.push(c);
        let s = tape.weighted_sum(c, uhat)?;
        let out = tape.squash(s)?;
        v = Some(out);
        // The final logit update cannot influence the outputs.
        if it + 1 < cfg.iterations {
            let a = tape.agreement(uhat, out)?;
            logits = tape.add(logits, a)?;
        }
    }
    Ok(RoutingVars {
        uhat,
        couplings,
        v: v.expect("at least one iteration"),
    })
}

/// Record the prediction head: `[B,J,D] → [B,J]`.
pub fn record_predict<T: Element>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    if tape.value(v).ndim() != 3 {
        return Err(Error::dim(
            "predict",
            format!("output capsules must be [B,J,D], got {:?}", tape.value(v).shape()),
        ));
    }
    let per_dim = tape.softmax(v, 1)?;
    tape.mean_axis(per_dim, 2)
}

/// Output capsules of one routing pass over a single item.
#[derive(Clone, Debug)]
pub struct OutputCapsules<T: Element> {
    /// `v(j)` for every class.
    pub v: Vec<Vec<T>>,
    /// Coupling coefficients `[N,J]` after each iteration's softmax.
    pub couplings: Vec<Tensor<T>>,
    /// `û` as routed, `[N,J,D]`.
    pub uhat: Tensor<T>,
}

/// Route `N` capsule vectors through weights `w: [N,J,D,E]`.
pub fn dynamic_routing<T: Element>(
    u: &[Vec<T>],
    w: &Tensor<T>,
    cfg: &RoutingConfig,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<OutputCapsules<T>> {
    let e = u.first().map(Vec::len).ok_or_else(|| Error::dim("dynamic_routing", "no input capsules"))?;
    if u.iter().any(|x| x.len() != e) {
        return Err(Error::dim("dynamic_routing", "input capsules differ in length"));
    }
    let flat: Vec<T> = u.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let uv = tape.constant(Tensor::from_vec([1, u.len(), e], flat)?);
    let wv = tape.constant(w.clone());
    let rv = record_routing(&mut tape, uv, wv, cfg, mode, rng)?;
    let vt = tape.value(rv.v);
    let (j, d) = (vt.shape()[1], vt.shape()[2]);
    Ok(OutputCapsules {
        v: vt.data().chunks(d).map(<[T]>::to_vec).collect::<Vec<_>>()[..j].to_vec(),
        couplings: rv
            .couplings
            .iter()
            .map(|&c| {
                let t = tape.value(c);
                t.clone().reshape(&t.shape()[1..]).expect("drop unit batch")
            })
            .collect(),
        uhat: {
            let t = tape.value(rv.uhat);
            t.clone().reshape(&t.shape()[1..])?
        },
    })
}

/// Class probabilities from output capsules: mean over dimensions of the
/// per-dimension softmax across classes.
pub fn predict<T: Element>(v: &[Vec<T>]) -> Result<Vec<T>> {
    let m = v.first().map(Vec::len).ok_or_else(|| Error::dim("predict", "no output capsules"))?;
    if m == 0 || v.iter().any(|x| x.len() != m) {
        return Err(Error::dim("predict", "output capsules must share a positive dimension"));
    }
    let flat: Vec<T> = v.iter().flatten().copied().collect();
    let t = Tensor::from_vec([v.len(), m], flat)?;
    let sm = ops::softmax(&t, 0)?;
    Ok(ops::mean_axis(&sm, 1)?.into_data())
}

/// Clamped cross-entropy of one prediction: `−ln ŷ[label]`.
pub fn cross_entropy_loss<T: Element>(probs: &[T], label: usize) -> Result<T> {
    let t = Tensor::from_vec([1, probs.len()], probs.to_vec())?;
    ops::cross_entropy(&t, &[label])
}
