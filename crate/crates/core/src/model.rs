//! Feature encoder, identity classifier, and the paired networks with their
//! temporal-average copies.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result, TensorError};

/// Two-layer MLP: `input_dim → hidden_dim (tanh) → feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// One encoder plus its identity classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

/// Tape handles for a network's parameters.
#[derive(Debug, Clone, Copy)]
pub struct NetworkVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub weight: Var,
    pub bias: Var,
}

impl NetworkVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.weight, self.bias]
    }
}

/// Glorot-uniform weights, zero biases.
fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
}

impl EncoderParams {
    pub fn init(input_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: glorot(rng, input_dim, hidden_dim),
            b1: Tensor::zeros(&[hidden_dim]),
            w2: glorot(rng, hidden_dim, feature_dim),
            b2: Tensor::zeros(&[feature_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.shape()[1]
    }
}

impl ClassifierParams {
    pub fn init(feature_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(rng, feature_dim, num_classes),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

impl Network {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(arch.input_dim, arch.hidden_dim, arch.feature_dim, &mut rng);
        let classifier = ClassifierParams::init(arch.feature_dim, arch.num_classes, &mut rng);
        Self {
            encoder,
            classifier,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.encoder.input_dim(),
            hidden_dim: self.encoder.w1.shape()[1],
            feature_dim: self.encoder.feature_dim(),
            num_classes: self.classifier.num_classes(),
        }
    }

    pub fn params(&self) -> [&Tensor; 6] {
        [
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    /// Puts the parameters on `tape`, as gradient-tracked leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NetworkVars {
        let [w1, b1, w2, b2, weight, bias] = self.params().map(|p| tape.leaf(p.clone(), trainable));
        NetworkVars {
            w1,
            b1,
            w2,
            b2,
            weight,
            bias,
        }
    }

    /// Features of a batch without gradient tracking.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        encode(x, &self.encoder)
    }

    /// Class probabilities of a batch without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let f = encode(x, &self.encoder)?;
        classify(&f, &self.classifier)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

pub fn encode_on(tape: &mut Tape, x: Var, vars: &NetworkVars) -> Result<Var, TensorError> {
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.tanh(h);
    let f = tape.matmul(h, vars.w2)?;
    tape.add_bias(f, vars.b2)
}

pub fn classify_on(tape: &mut Tape, features: Var, vars: &NetworkVars) -> Result<Var, TensorError> {
    let z = tape.matmul(features, vars.weight)?;
    let z = tape.add_bias(z, vars.bias)?;
    tape.row_softmax(z)
}

pub fn encode(x: &Tensor, enc: &EncoderParams) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1 = tape.constant(enc.w1.clone());
    let b1 = tape.constant(enc.b1.clone());
    let w2 = tape.constant(enc.w2.clone());
    let b2 = tape.constant(enc.b2.clone());
    let h = tape.matmul(xv, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h);
    let f = tape.matmul(h, w2)?;
    let f = tape.add_bias(f, b2)?;
    Ok(tape.value(f).clone())
}

pub fn classify(features: &Tensor, cls: &ClassifierParams) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let w = tape.constant(cls.weight.clone());
    let b = tape.constant(cls.bias.clone());
    let z = tape.matmul(f, w)?;
    let z = tape.add_bias(z, b)?;
    let p = tape.row_softmax(z)?;
    Ok(tape.value(p).clone())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "EMA momentum alpha must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// `alpha * avg_prev + (1 - alpha) * current`, elementwise over every parameter.
pub fn ema_update(avg_prev: &Network, current: &Network, alpha: f64) -> Result<Network> {
    let mut out = avg_prev.clone();
    ema_update_in_place(&mut out, current, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(avg: &mut Network, current: &Network, alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    for (a, c) in avg.params().iter().zip(current.params()) {
        a.require_same_shape("ema_update", c)?;
    }
    for (a, c) in avg.params_mut().into_iter().zip(current.params()) {
        for (x, &y) in a.data_mut().iter_mut().zip(c.data()) {
            *x = alpha * *x + (1.0 - alpha) * y;
        }
    }
    Ok(())
}

/// Which of the four models in a [`NetworkPair`] to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSlot {
    Net1,
    Net2,
    Avg1,
    Avg2,
}

impl ModelSlot {
    pub const ALL: [ModelSlot; 4] = [ModelSlot::Net1, ModelSlot::Net2, ModelSlot::Avg1, ModelSlot::Avg2];

    pub fn name(self) -> &'static str {
        match self {
            ModelSlot::Net1 => "net1",
            ModelSlot::Net2 => "net2",
            ModelSlot::Avg1 => "avg1",
            ModelSlot::Avg2 => "avg2",
        }
    }
}

/// The two collaboratively trained networks and their temporal averages.
///
/// Only `net1`/`net2` are optimized; `avg1`/`avg2` change solely through
/// [`NetworkPair::update_averages`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPair {
    pub net1: Network,
    pub net2: Network,
    pub avg1: Network,
    pub avg2: Network,
    pub iteration: u64,
}

impl NetworkPair {
    pub fn init(arch: &Architecture, seed1: u64, seed2: u64) -> Result<Self> {
        if seed1 == seed2 {
            return Err(Error::Config(format!(
                "network seeds must differ so the two networks start de-coupled (both {seed1})"
            )));
        }
        let net1 = Network::init(arch, seed1);
        let net2 = Network::init(arch, seed2);
        Ok(Self {
            avg1: net1.clone(),
            avg2: net2.clone(),
            net1,
            net2,
            iteration: 0,
        })
    }

    pub fn get(&self, slot: ModelSlot) -> &Network {
        match slot {
            ModelSlot::Net1 => &self.net1,
            ModelSlot::Net2 => &self.net2,
            ModelSlot::Avg1 => &self.avg1,
            ModelSlot::Avg2 => &self.avg2,
        }
    }

    pub fn sync_averages(&mut self) {
        self.avg1 = self.net1.clone();
        self.avg2 = self.net2.clone();
    }

    pub fn update_averages(&mut self, alpha: f64) -> Result<()> {
        ema_update_in_place(&mut self.avg1, &self.net1, alpha)?;
        ema_update_in_place(&mut self.avg2, &self.net2, alpha)?;
        self.iteration += 1;
        Ok(())
    }

    /// Replaces every classifier (networks and averages) with `new1`/`new2`; the
    /// averages start equal to their networks.
    pub fn reset_classifiers(&mut self, new1: ClassifierParams, new2: ClassifierParams) {
        self.net1.classifier = new1.clone();
        self.avg1.classifier = new1;
        self.net2.classifier = new2.clone();
        self.avg2.classifier = new2;
    }
}

/// On-disk checkpoint: architecture, all four parameter sets, step counter, and the
/// configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub net1: Vec<f64>,
    pub net2: Vec<f64>,
    pub avg1: Vec<f64>,
    pub avg2: Vec<f64>,
    pub iteration: u64,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_pair(pair: &NetworkPair, config: serde_json::Value) -> Self {
        Self {
            architecture: pair.net1.architecture(),
            net1: pair.net1.flat(),
            net2: pair.net2.flat(),
            avg1: pair.avg1.flat(),
            avg2: pair.avg2.flat(),
            iteration: pair.iteration,
            config,
        }
    }

    pub fn to_pair(&self) -> Result<NetworkPair> {
        let arch = &self.architecture;
        Ok(NetworkPair {
            net1: unflatten(arch, &self.net1)?,
            net2: unflatten(arch, &self.net2)?,
            avg1: unflatten(arch, &self.avg1)?,
            avg2: unflatten(arch, &self.avg2)?,
            iteration: self.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Network> {
    let mut net = Network {
        encoder: EncoderParams {
            w1: Tensor::zeros(&[arch.input_dim, arch.hidden_dim]),
            b1: Tensor::zeros(&[arch.hidden_dim]),
            w2: Tensor::zeros(&[arch.hidden_dim, arch.feature_dim]),
            b2: Tensor::zeros(&[arch.feature_dim]),
        },
        classifier: ClassifierParams {
            weight: Tensor::zeros(&[arch.feature_dim, arch.num_classes]),
            bias: Tensor::zeros(&[arch.num_classes]),
        },
    };
    let total: usize = net.params().iter().map(|p| p.len()).sum();
    if total != flat.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, architecture needs {total}",
            flat.len()
        )));
    }
    let mut offset = 0;
    for p in net.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(net)
}
