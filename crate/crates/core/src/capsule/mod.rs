//! Capsule network head: primary capsules, routing and class prediction.
//!
//! Each primary capsule is
//!
//! ```text
//! [256,H,W] ─conv3×3→64─BN─ReLU─conv3×3→16─BN─ReLU─ statistical pool [2,16]
//!           ─conv1d k5 s2 →8─BN─ReLU─conv1d k3 →1─BN─  u ∈ R⁴
//! ```
//!
//! so `u` has the same size for every input resolution. The `N` capsule
//! vectors are routed to `J` four-dimensional output capsules.

pub mod routing;
pub mod saliency;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BnMode};
use crate::params::{ParamKind, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::vgg::{self, FEATURE_CHANNELS};
use crate::weights::Record;

pub use routing::{
    cross_entropy_loss, dynamic_routing, predict, record_predict, record_routing, Mode, OutputCapsules,
    RoutingConfig, RoutingVars,
};

pub const TRUNK_CHANNELS: usize = 64;
pub const STAT_CHANNELS: usize = 16;
pub const CONV1D_CHANNELS: usize = 8;
/// Length of a primary capsule vector `u`.
pub const PRIMARY_DIM: usize = 4;
/// Length of an output capsule vector `v`.
pub const OUTPUT_DIM: usize = 4;
/// Smallest feature-map side a capsule accepts.
pub const MIN_FEATURE_SIDE: usize = 3;
/// Standard deviation of the routing-matrix initialization.
pub const ROUTING_INIT_STD: f64 = 0.1;

const ROUTING_PARAM: &str = "routing.W";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleNetConfig {
    /// Primary capsules `N` (3 for the light network, 10 for the full one).
    pub capsules: usize,
    /// Output capsules `J`, one per class.
    pub classes: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
}

impl CapsuleNetConfig {
    pub fn light(classes: usize) -> Self {
        CapsuleNetConfig {
            capsules: 3,
            classes,
            routing: RoutingConfig::default(),
        }
    }

    pub fn full(classes: usize) -> Self {
        CapsuleNetConfig {
            capsules: 10,
            ..Self::light(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capsules < 1 {
            return Err(Error::Parameter("need at least one primary capsule".into()));
        }
        if self.classes < 2 {
            return Err(Error::Parameter("need at least two output capsules".into()));
        }
        self.routing.validate()
    }
}

/// Running-statistic update produced by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Tape handles for one recorded forward pass.
pub struct NetForward<T> {
    /// Primary capsule outputs `[B,N,4]` before the routing squash.
    pub u: Var,
    pub routing: RoutingVars,
    /// Class probabilities `[B,J]`.
    pub probs: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Result of an untaped forward pass over a batch.
#[derive(Clone, Debug)]
pub struct BatchOutput<T: Element> {
    /// `[B,J]`
    pub probs: Tensor<T>,
    /// `[B,J,4]`
    pub v: Tensor<T>,
    /// `[B,N,J,4]`
    pub uhat: Tensor<T>,
    /// `[B,N,4]`
    pub u: Tensor<T>,
}

/// The learnable head: primary capsule trunks plus routing matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleNet<T: Element> {
    config: CapsuleNetConfig,
    store: ParamStore<T>,
}

fn conv_shapes(i: usize) -> [(String, Vec<usize>, usize); 4] {
    [
        (format!("caps{i}.conv1"), vec![TRUNK_CHANNELS, FEATURE_CHANNELS, 3, 3], FEATURE_CHANNELS * 9),
        (format!("caps{i}.conv2"), vec![STAT_CHANNELS, TRUNK_CHANNELS, 3, 3], TRUNK_CHANNELS * 9),
        (format!("caps{i}.conv3"), vec![CONV1D_CHANNELS, 2, 5], 2 * 5),
        (format!("caps{i}.conv4"), vec![1, CONV1D_CHANNELS, 3], CONV1D_CHANNELS * 3),
    ]
}

fn bn_layers(i: usize) -> [(String, usize); 4] {
    [
        (format!("caps{i}.bn1"), TRUNK_CHANNELS),
        (format!("caps{i}.bn2"), STAT_CHANNELS),
        (format!("caps{i}.bn3"), CONV1D_CHANNELS),
        (format!("caps{i}.bn4"), 1),
    ]
}

impl<T: Element> CapsuleNet<T> {
    /// All-zero parameters with unit batch-norm scales; the layout target
    /// for loading.
    pub fn zeros(config: CapsuleNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for i in 1..=config.capsules {
            for ((conv, kshape, _), (bn, ch)) in conv_shapes(i).into_iter().zip(bn_layers(i)) {
                let cout = kshape[0];
                store.insert(format!("{conv}.weight"), Tensor::zeros(kshape)?, ParamKind::Trainable)?;
                store.insert(format!("{conv}.bias"), Tensor::zeros([cout])?, ParamKind::Trainable)?;
                store.insert(format!("{bn}.weight"), Tensor::ones([ch])?, ParamKind::Trainable)?;
                store.insert(format!("{bn}.bias"), Tensor::zeros([ch])?, ParamKind::Trainable)?;
                store.insert(format!("{bn}.running_mean"), Tensor::zeros([ch])?, ParamKind::Buffer)?;
                store.insert(format!("{bn}.running_var"), Tensor::ones([ch])?, ParamKind::Buffer)?;
            }
        }
        store.insert(
            ROUTING_PARAM,
            Tensor::zeros([config.capsules, config.classes, OUTPUT_DIM, PRIMARY_DIM])?,
            ParamKind::Trainable,
        )?;
        Ok(CapsuleNet { config, store })
    }

    /// He-normal trunk convolutions, zero biases, and routing matrices drawn
    /// from `N(0, 0.1²)`.
    pub fn new(config: CapsuleNetConfig, rng: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for i in 1..=config.capsules {
            for (conv, kshape, fan_in) in conv_shapes(i) {
                let w = vgg::he_normal(&kshape, fan_in, rng);
                *net.store.get_mut(&format!("{conv}.weight")).expect("present") = w;
            }
        }
        let w = net.store.get_mut(ROUTING_PARAM).expect("present");
        w.data_mut()
            .iter_mut()
            .for_each(|x| *x = T::from_f64_lossy(rng.normal(0.0, ROUTING_INIT_STD)));
        Ok(net)
    }

    pub fn config(&self) -> &CapsuleNetConfig {
        &self.config
    }

    /// Replace the routing hyper-parameters (iterations, noise, dropout).
    pub fn set_routing(&mut self, routing: RoutingConfig) -> Result<()> {
        routing.validate()?;
        self.config.routing = routing;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable scalars, routing matrices included.
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Trainable scalars of one primary capsule including its `J` routing matrices.
    pub fn per_capsule_parameter_count(&self) -> usize {
        let trunk: usize = self
            .store
            .trainable()
            .filter(|e| e.name.starts_with("caps1."))
            .map(|e| e.value.len())
            .sum();
        trunk + self.config.classes * OUTPUT_DIM * PRIMARY_DIM
    }

    pub fn cast<U: Element>(&self) -> CapsuleNet<U> {
        CapsuleNet {
            config: self.config,
            store: self.store.cast(),
        }
    }

    /// Serialize with routing matrices split into `routing.W.i.j` records
    /// (1-based `i`, `j`).
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(self.store.len() + self.config.capsules * self.config.classes);
        for e in self.store.iter() {
            if e.name == ROUTING_PARAM {
                let w = e.value.cast::<f32>();
                let block = OUTPUT_DIM * PRIMARY_DIM;
                for i in 0..self.config.capsules {
                    for j in 0..self.config.classes {
                        let off = (i * self.config.classes + j) * block;
                        let t = Tensor::from_vec([OUTPUT_DIM, PRIMARY_DIM], w.data()[off..off + block].to_vec())
                            .expect("static shape");
                        out.push((format!("routing.W.{}.{}", i + 1, j + 1), t));
                    }
                }
            } else {
                out.push((e.name.clone(), e.value.cast()));
            }
        }
        out
    }

    /// Inverse of [`to_records`](Self::to_records) for a known configuration.
    pub fn from_records(config: CapsuleNetConfig, records: &[Record]) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut trunk: Vec<Record> = Vec::with_capacity(records.len());
        let mut w = vec![0f32; config.capsules * config.classes * OUTPUT_DIM * PRIMARY_DIM];
        let mut seen = vec![false; config.capsules * config.classes];
        for (name, t) in records {
            if let Some(rest) = name.strip_prefix("routing.W.") {
                let (i, j) = rest
                    .split_once('.')
                    .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::Load(format!("malformed routing record name {name}")))?;
                if i == 0 || j == 0 || i > config.capsules || j > config.classes {
                    return Err(Error::Load(format!(
                        "routing record {name} outside {} capsules x {} classes",
                        config.capsules, config.classes
                    )));
                }
                if t.shape() != [OUTPUT_DIM, PRIMARY_DIM] {
                    return Err(Error::Load(format!(
                        "tensor {name} has shape {:?}, expected [{OUTPUT_DIM}, {PRIMARY_DIM}]",
                        t.shape()
                    )));
                }
                let slot = (i - 1) * config.classes + (j - 1);
                seen[slot] = true;
                let block = OUTPUT_DIM * PRIMARY_DIM;
                w[slot * block..(slot + 1) * block].copy_from_slice(t.data());
            } else {
                trunk.push((name.clone(), t.clone()));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Load(format!(
                "missing tensor routing.W.{}.{}",
                missing / config.classes + 1,
                missing % config.classes + 1
            )));
        }
        let routing = Tensor::from_vec([config.capsules, config.classes, OUTPUT_DIM, PRIMARY_DIM], w)?;
        trunk.push((ROUTING_PARAM.to_string(), routing.cast()));
        net.store.load_records(&trunk)?;
        Ok(net)
    }

    fn bind(&self, tape: &mut Tape<T>, name: &str, trainable: bool) -> Result<Var> {
        let t = self.store.require(name)?;
        if trainable {
            tape.param(name, t)
        } else {
            Ok(tape.constant(t.clone()))
        }
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::dim(
                "capsule_forward",
                format!("features must be [B,256,H,W], got {shape:?}"),
            ));
        };
        if c != FEATURE_CHANNELS {
            return Err(Error::dim(
                "capsule_forward",
                format!("features have {c} channels, expected {FEATURE_CHANNELS}"),
            ));
        }
        if h < MIN_FEATURE_SIDE || w < MIN_FEATURE_SIDE {
            return Err(Error::dim(
                "capsule_forward",
                format!("feature map {h}x{w} smaller than {MIN_FEATURE_SIDE}x{MIN_FEATURE_SIDE}"),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record_bn(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: &str,
        mode: Mode,
        trainable: bool,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let g = self.bind(tape, &format!("{layer}.weight"), trainable)?;
        let b = self.bind(tape, &format!("{layer}.bias"), trainable)?;
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train)?;
                let (mean, var) = stats.expect("train mode reports statistics");
                updates.push(BnUpdate {
                    layer: layer.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.store.require(&format!("{layer}.running_mean"))?;
                let var = self.store.require(&format!("{layer}.running_var"))?;
                let (y, _) = tape.batch_norm(
                    x,
                    g,
                    b,
                    BnMode::Infer {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?;
                Ok(y)
            }
        }
    }

    /// Record primary capsule `index` (1-based) on `features: [B,256,H,W]`,
    /// producing `[B,1,4]`.
    pub fn record_primary(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        features: Var,
        mode: Mode,
        trainable: bool,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        if index == 0 || index > self.config.capsules {
            return Err(Error::Parameter(format!(
                "capsule index {index} outside 1..={}",
                self.config.capsules
            )));
        }
        self.check_features(tape.value(features).shape())?;
        let i = index;
        let conv = |tape: &mut Tape<T>, x: Var, name: &str, stride: usize, pad: Option<usize>| -> Result<Var> {
            let w = self.bind(tape, &format!("caps{i}.{name}.weight"), trainable)?;
            let b = self.bind(tape, &format!("caps{i}.{name}.bias"), trainable)?;
            match pad {
                Some(p) => tape.conv2d(x, w, b, stride, p),
                None => tape.conv1d(x, w, b, stride),
            }
        };
        let mut x = conv(tape, features, "conv1", 1, Some(1))?;
        x = self.record_bn(tape, x, &format!("caps{i}.bn1"), mode, trainable, updates)?;
        x = tape.relu(x)?;
        x = conv(tape, x, "conv2", 1, Some(1))?;
        x = self.record_bn(tape, x, &format!("caps{i}.bn2"), mode, trainable, updates)?;
        x = tape.relu(x)?;
        x = tape.statistical_pool(x)?;
        x = conv(tape, x, "conv3", 2, None)?;
        x = self.record_bn(tape, x, &format!("caps{i}.bn3"), mode, trainable, updates)?;
        x = tape.relu(x)?;
        x = conv(tape, x, "conv4", 1, None)?;
        x = self.record_bn(tape, x, &format!("caps{i}.bn4"), mode, trainable, updates)?;
        let b = tape.value(x).shape()[0];
        debug_assert_eq!(tape.value(x).shape(), &[b, 1, PRIMARY_DIM]);
        Ok(x)
    }

    /// Record the full head on `features: [B,256,H,W]`.
    ///
    /// `rng` is required in train mode (routing noise and dropout).
    /// With `trainable` false all parameters enter the tape as constants.
    pub fn record_forward(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        mode: Mode,
        rng: Option<&mut RngStream>,
        trainable: bool,
    ) -> Result<NetForward<T>> {
        self.check_features(tape.value(features).shape())?;
        let mut updates = Vec::new();
        let mut caps = Vec::with_capacity(self.config.capsules);
        for i in 1..=self.config.capsules {
            caps.push(self.record_primary(tape, i, features, mode, trainable, &mut updates)?);
        }
        let u = tape.concat(&caps, 1)?;
        let w = self.bind(tape, ROUTING_PARAM, trainable)?;
        let routing = record_routing(tape, u, w, &self.config.routing, mode, rng)?;
        let probs = record_predict(tape, routing.v)?;
        Ok(NetForward {
            u,
            routing,
            probs,
            bn_updates: updates,
        })
    }

    /// Untaped forward pass over `[256,H,W]` or `[B,256,H,W]` features.
    pub fn forward_batch(&self, features: &Tensor<T>, mode: Mode, rng: Option<&mut RngStream>) -> Result<BatchOutput<T>> {
        let features = match features.ndim() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(features.shape());
                features.clone().reshape(s)?
            }
            _ => features.clone(),
        };
        let mut tape = Tape::new();
        let f = tape.constant(features);
        let out = self.record_forward(&mut tape, f, mode, rng, false)?;
        Ok(BatchOutput {
            probs: tape.value(out.probs).clone(),
            v: tape.value(out.routing.v).clone(),
            uhat: tape.value(out.routing.uhat).clone(),
            u: tape.value(out.u).clone(),
        })
    }

    /// Class probabilities and output capsules for one `[256,H,W]` feature map.
    pub fn forward(&self, features: &Tensor<T>, mode: Mode, rng: Option<&mut RngStream>) -> Result<(Vec<T>, OutputCapsules<T>)> {
        if features.ndim() != 3 {
            return Err(Error::dim(
                "forward",
                format!("expected one [256,H,W] feature map, got {:?}", features.shape()),
            ));
        }
        let mut tape = Tape::new();
        let mut s = vec![1];
        s.extend_from_slice(features.shape());
        let f = tape.constant(features.clone().reshape(s)?);
        let out = self.record_forward(&mut tape, f, mode, rng, false)?;
        let drop_batch = |t: &Tensor<T>| t.clone().reshape(&t.shape()[1..]);
        let v = tape.value(out.routing.v);
        Ok((
            tape.value(out.probs).data().to_vec(),
            OutputCapsules {
                v: v.data().chunks(OUTPUT_DIM).map(<[T]>::to_vec).collect(),
                couplings: out
                    .routing
                    .couplings
                    .iter()
                    .map(|&c| drop_batch(tape.value(c)))
                    .collect::<Result<_>>()?,
                uhat: drop_batch(tape.value(out.routing.uhat))?,
            },
        ))
    }

    /// Output of primary capsule `index` (1-based) for one `[256,H,W]` map.
    pub fn primary_capsule_forward(&self, index: usize, features: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut s = vec![1];
        s.extend_from_slice(features.shape());
        let f = tape.constant(features.clone().reshape(s).map_err(|_| {
            Error::dim("primary_capsule_forward", "features must be [256,H,W]")
        })?);
        let mut updates = Vec::new();
        let u = self.record_primary(&mut tape, index, f, mode, false, &mut updates)?;
        Ok(tape.value(u).data().to_vec())
    }

    /// Fold batch statistics into the running statistics with momentum 0.1.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let m = T::from_f64_lossy(ops::BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{suffix}", u.layer);
                let t = self
                    .store
                    .get_mut(&name)
                    .ok_or_else(|| Error::Parameter(format!("missing buffer {name}")))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> CapsuleNet<T> {
    /// Overwrite running statistics with the given estimates.
    pub fn set_bn_statistics(&mut self, stats: &[BnUpdate<T>]) -> Result<()> {
        for u in stats {
            for (suffix, value) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{suffix}", u.layer);
                let t = self
                    .store
                    .get_mut(&name)
                    .ok_or_else(|| Error::Parameter(format!("missing buffer {name}")))?;
                if t.len() != value.len() {
                    return Err(Error::dim("set_bn_statistics", format!("{name} holds {} values, got {}", t.len(), value.len())));
                }
                t.data_mut().copy_from_slice(value);
            }
        }
        Ok(())
    }
}

/// Total trainable scalars of feature extractor plus capsule head.
pub fn total_parameter_count<T: Element>(prefix: &vgg::VggPrefix<T>, net: &CapsuleNet<T>) -> usize {
    prefix.parameter_count() + net.parameter_count()
}
