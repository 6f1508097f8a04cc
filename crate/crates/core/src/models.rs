//! The two decoder architectures, prediction, one-step training and the
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! magic      8 bytes  "NAMODEL1"
//! arch       u32      0 = eegnet_lite, 1 = shallow_net
//! channels   u32
//! timepoints u32
//! classes    u32
//! dropout    f32
//! seed       u64
//! n_params   u32
//!   per param: rank u32, dims u32 * rank, values f32 * prod(dims)
//! n_bn       u32
//!   per batch-norm layer: maps u32, running mean f32 * maps, running var f32 * maps
//! ```

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{
    softmax, softmax_cross_entropy, Adam, AdamConfig, AvgPool, BatchNorm, Dense, Dropout, ForwardMode, Layer, Network,
    Param, PointwiseConv, SpatialConv, TemporalConv, Tensor,
};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NAMODEL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EegnetLite,
    ShallowNet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::EegnetLite => "eegnet_lite",
            Arch::ShallowNet => "shallow_net",
        }
    }

    /// Smallest trial length for which the layer arithmetic yields a
    /// non-empty feature vector.
    pub fn min_timepoints(self) -> usize {
        match self {
            Arch::EegnetLite => 32,
            Arch::ShallowNet => 16,
        }
    }

    fn code(self) -> u32 {
        match self {
            Arch::EegnetLite => 0,
            Arch::ShallowNet => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Arch::EegnetLite),
            1 => Some(Arch::ShallowNet),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eegnet_lite" => Ok(Arch::EegnetLite),
            "shallow_net" => Ok(Arch::ShallowNet),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Which parameters a training step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    /// Only the final dense layer; the feature extractor is frozen.
    DecisionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, n_channels: usize, n_timepoints: usize, n_classes: usize) -> Self {
        Self {
            arch,
            n_channels,
            n_timepoints,
            n_classes,
            dropout_rate: 0.25,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        let min = self.arch.min_timepoints();
        if self.n_timepoints < min {
            return Err(Error::TooShort {
                arch: self.arch.name(),
                min,
                got: self.n_timepoints,
            });
        }
        Ok(())
    }
}

/// Layer sizes of the EEGNet-style network.
pub mod eegnet {
    pub const F1: usize = 8;
    pub const DEPTH: usize = 2;
    pub const F2: usize = F1 * DEPTH;
    pub const POOL1: usize = 4;
    pub const POOL2: usize = 8;

    pub fn temporal_kernel(t: usize) -> usize {
        (t / 4).clamp(1, 64)
    }

    pub fn feature_dim(t: usize) -> usize {
        F2 * ((t / POOL1) / POOL2)
    }
}

/// Layer sizes of the ShallowConvNet-style network.
pub mod shallow {
    pub const FILTERS: usize = 40;

    pub fn temporal_kernel(t: usize) -> usize {
        (t / 8).min(25)
    }

    /// Pooling kernel and stride: 75 and 15 at 1000 samples, scaled down
    /// proportionally for shorter trials.
    pub fn pool(t: usize) -> (usize, usize) {
        let s = (t as f64 / 1000.0).min(1.0);
        let kernel = ((75.0 * s).round() as usize).max(2);
        let stride = ((15.0 * s).round() as usize).max(1);
        (kernel, stride)
    }

    pub fn feature_dim(t: usize) -> usize {
        let conv_w = t - temporal_kernel(t) + 1;
        let (k, s) = pool(t);
        FILTERS * ((conv_w - k) / s + 1)
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Param {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as f32)
        .collect();
    Param::new(Tensor::new(shape.to_vec(), data).expect("shape product matches"))
}

fn zeros(n: usize) -> Param {
    Param::new(Tensor::zeros(&[n]))
}

fn build_eegnet(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    use eegnet::*;
    let (c, t, k) = (cfg.n_channels, cfg.n_timepoints, cfg.n_classes);
    let k1 = temporal_kernel(t);
    let pad_left = (k1 - 1) / 2;
    let features = feature_dim(t);
    vec![
        Layer::TemporalConv(TemporalConv {
            weight: glorot(rng, &[F1, 1, k1], k1, F1 * k1),
            bias: None,
            pad_left,
            pad_right: k1 - 1 - pad_left,
        }),
        Layer::BatchNorm(BatchNorm::new(F1)),
        Layer::SpatialConv(SpatialConv {
            weight: glorot(rng, &[F2, 1, c], c, DEPTH * c),
            groups: F1,
        }),
        Layer::BatchNorm(BatchNorm::new(F2)),
        Layer::Elu,
        Layer::AvgPool(AvgPool {
            kernel: POOL1,
            stride: POOL1,
        }),
        Layer::Dropout(Dropout { rate: cfg.dropout_rate }),
        Layer::Pointwise(PointwiseConv {
            weight: glorot(rng, &[F2, F2], F2, F2),
            bias: None,
        }),
        Layer::BatchNorm(BatchNorm::new(F2)),
        Layer::Elu,
        Layer::AvgPool(AvgPool {
            kernel: POOL2,
            stride: POOL2,
        }),
        Layer::Dropout(Dropout { rate: cfg.dropout_rate }),
        Layer::Dense(Dense {
            weight: glorot(rng, &[k, features], features, k),
            bias: zeros(k),
        }),
    ]
}

fn build_shallow(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    use shallow::*;
    let (c, t, k) = (cfg.n_channels, cfg.n_timepoints, cfg.n_classes);
    let k1 = temporal_kernel(t);
    let (pool_k, pool_s) = pool(t);
    let features = feature_dim(t);
    vec![
        Layer::TemporalConv(TemporalConv {
            weight: glorot(rng, &[FILTERS, 1, k1], k1, FILTERS * k1),
            bias: Some(zeros(FILTERS)),
            pad_left: 0,
            pad_right: 0,
        }),
        Layer::SpatialConv(SpatialConv {
            weight: glorot(rng, &[FILTERS, FILTERS, c], FILTERS * c, FILTERS * c),
            groups: 1,
        }),
        Layer::BatchNorm(BatchNorm::new(FILTERS)),
        Layer::Square,
        Layer::AvgPool(AvgPool {
            kernel: pool_k,
            stride: pool_s,
        }),
        Layer::Log,
        Layer::Dropout(Dropout { rate: cfg.dropout_rate }),
        Layer::Dense(Dense {
            weight: glorot(rng, &[k, features], features, k),
            bias: zeros(k),
        }),
    ]
}

/// A decoder network with its configuration and dropout RNG.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    net: Network,
    rng: ChaCha8Rng,
}

/// Equality of the persisted state (parameters, running statistics, config).
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

/// Number of parameters in the decision head (dense weight and bias).
const HEAD_PARAMS: usize = 2;

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0x1417]));
        let layers = match config.arch {
            Arch::EegnetLite => build_eegnet(&config, &mut init),
            Arch::ShallowNet => build_shallow(&config, &mut init),
        };
        Ok(Self {
            config,
            net: Network::new(layers),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0xd209])),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Reseeds the dropout mask generator.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xd209]));
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn feature_extractor(&self) -> Vec<&Param> {
        let p = self.net.params();
        let split = p.len() - HEAD_PARAMS;
        p.into_iter().take(split).collect()
    }

    pub fn decision_head(&self) -> Vec<&Param> {
        let p = self.net.params();
        let split = p.len() - HEAD_PARAMS;
        p.into_iter().skip(split).collect()
    }

    /// SHA-256 over the feature-extractor parameters and every batch-norm
    /// running statistic.
    pub fn feature_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.feature_extractor() {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for layer in &self.net.layers {
            if let Layer::BatchNorm(bn) = layer {
                for v in bn.running_mean.iter().chain(&bn.running_var) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over the full checkpoint bytes.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn new_optimizer(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig::with_lr(lr), &self.net.params())
    }

    pub fn set_scope(&mut self, scope: Scope) {
        let mut params = self.net.params_mut();
        let split = params.len() - HEAD_PARAMS;
        for (i, p) in params.iter_mut().enumerate() {
            p.trainable = scope == Scope::Full || i >= split;
        }
    }

    fn check_trial(&self, trial: &Tensor) -> Result<()> {
        let expected = [self.config.n_channels, self.config.n_timepoints];
        if trial.shape() != expected {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                got: trial.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn batch(&self, trials: &[&Tensor]) -> Result<Tensor> {
        for t in trials {
            self.check_trial(t)?;
        }
        let stacked = Tensor::stack(trials)?;
        Ok(stacked.reshape(&[trials.len(), 1, self.config.n_channels, self.config.n_timepoints])?)
    }

    /// Class probabilities for one `(channels, timepoints)` trial. With
    /// `adabn`, batch normalization uses this trial's statistics only.
    pub fn predict_proba(&mut self, trial: &Tensor, adabn: bool) -> Result<Vec<f64>> {
        let x = self.batch(&[trial])?;
        let mode = if adabn { ForwardMode::AdaBn } else { ForwardMode::Eval };
        let (logits, _) = self.net.forward(&x, mode, &mut self.rng)?;
        Ok(softmax(&logits).pop().expect("one row"))
    }

    /// Eval-mode probabilities for a batch of trials.
    pub fn predict_batch(&mut self, trials: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let x = self.batch(trials)?;
        let (logits, _) = self.net.forward(&x, ForwardMode::Eval, &mut self.rng)?;
        Ok(softmax(&logits))
    }

    /// Layer outputs for one trial (index `i` is the output of layer `i`).
    pub fn activations(&mut self, trial: &Tensor, mode: ForwardMode) -> Result<Vec<Tensor>> {
        let x = self.batch(&[trial])?;
        Ok(self.net.forward_trace(&x, mode, &mut self.rng)?)
    }

    /// One forward/backward pass and one optimizer step on the batch.
    /// Returns the mean cross-entropy before the step.
    pub fn train_batch(
        &mut self,
        optimizer: &mut Adam,
        trials: &[&Tensor],
        labels: &[usize],
        scope: Scope,
    ) -> Result<f64> {
        if trials.is_empty() {
            return Err(crate::tensor::KernelError::EmptyBatch.into());
        }
        self.set_scope(scope);
        let x = self.batch(trials)?;
        self.net.zero_grad();
        let (logits, tape) = self.net.forward(&x, ForwardMode::Train, &mut self.rng)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        self.net.backward(&tape, &grad)?;
        optimizer.step(&mut self.net.params_mut())?;
        Ok(loss)
    }

    /// Mean cross-entropy in eval mode, without touching any state.
    pub fn eval_loss(&mut self, trials: &[&Tensor], labels: &[usize]) -> Result<f64> {
        let x = self.batch(trials)?;
        let (logits, _) = self.net.forward(&x, ForwardMode::Eval, &mut self.rng)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.arch.code(),
            c.n_channels as u32,
            c.n_timepoints as u32,
            c.n_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(c.dropout_rate as f32).to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        let params = self.net.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bns: Vec<&BatchNorm> = self
            .net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn),
                _ => None,
            })
            .collect();
        out.extend_from_slice(&(bns.len() as u32).to_le_bytes());
        for bn in bns {
            out.extend_from_slice(&(bn.maps() as u32).to_le_bytes());
            for v in bn.running_mean.iter().chain(&bn.running_var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let arch = Arch::from_code(r.u32()?).ok_or_else(|| Error::Checkpoint("unknown architecture code".into()))?;
        let n_channels = r.u32()? as usize;
        let n_timepoints = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let dropout_rate = r.f32()? as f64;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            arch,
            n_channels,
            n_timepoints,
            n_classes,
            dropout_rate,
            seed,
        };
        let mut model = Model::build(config)?;
        let n_params = r.u32()? as usize;
        let mut params = model.net.params_mut();
        if n_params != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {n_params}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {shape:?} does not match {:?}",
                    p.value.shape()
                )));
            }
            for v in p.value.data_mut() {
                *v = r.f32()?;
            }
        }
        let n_bn = r.u32()? as usize;
        let mut bns: Vec<&mut BatchNorm> = model
            .net
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn),
                _ => None,
            })
            .collect();
        if n_bn != bns.len() {
            return Err(Error::Checkpoint("batch-norm layer count mismatch".into()));
        }
        for bn in bns.iter_mut() {
            if r.u32()? as usize != bn.maps() {
                return Err(Error::Checkpoint("batch-norm width mismatch".into()));
            }
            for v in bn.running_mean.iter_mut() {
                *v = r.f32()?;
            }
            for v in bn.running_var.iter_mut() {
                *v = r.f32()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
