//! The full network: feature normalization → BiLSTM → projection →
//! Conformer stack → attention pooling → classifier head, plus binary
//! checkpoint save/load.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilstm::{bilstm_forward, project_states, BiLstmConfig, LstmLayerParams};
use crate::conformer::{conformer_stack, BlockOrder, ConformerBlockParams, ConformerConfig};
use crate::num::Scalar;
use crate::record::TrafficLabel;
use crate::tensor::{ParamKind, Parameter, Tensor, TensorError, TensorResult};

/// Architecture hyperparameters. The sequence width everywhere past the
/// recurrent front end is `2 * lstm_hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_dropout: f64,
    pub conformer_blocks: usize,
    pub attention_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub conformer_dropout: f64,
    pub block_order: BlockOrder,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 61,
            num_classes: 4,
            lstm_hidden: 64,
            lstm_layers: 2,
            lstm_dropout: 0.1,
            conformer_blocks: 2,
            attention_heads: 4,
            ffn_expansion: 4,
            conv_kernel: 3,
            conformer_dropout: 0.1,
            block_order: BlockOrder::ConvFirst,
            head_hidden: 128,
            head_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.input_dim == 0
            || self.num_classes == 0
            || self.lstm_hidden == 0
            || self.lstm_layers == 0
            || self.head_hidden == 0
        {
            return bad("all dimensions must be nonzero".into());
        }
        if self.attention_heads == 0 || self.model_dim() % self.attention_heads != 0 {
            return bad(format!(
                "attention_heads {} must divide model dim {}",
                self.attention_heads,
                self.model_dim()
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        for (name, p) in [
            ("lstm_dropout", self.lstm_dropout),
            ("conformer_dropout", self.conformer_dropout),
            ("head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn bilstm_config(&self) -> BiLstmConfig {
        BiLstmConfig {
            input_dim: self.input_dim,
            hidden_dim: self.lstm_hidden,
            num_layers: self.lstm_layers,
            dropout: self.lstm_dropout,
        }
    }

    pub fn conformer_config(&self) -> ConformerConfig {
        ConformerConfig {
            model_dim: self.model_dim(),
            num_blocks: self.conformer_blocks,
            num_heads: self.attention_heads,
            ffn_expansion: self.ffn_expansion,
            conv_kernel: self.conv_kernel,
            dropout: self.conformer_dropout,
            block_order: self.block_order,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Corrupt(String),
}

const MAGIC: &[u8; 4] = b"BLCM";
const FORMAT_VERSION: u32 = 1;

/// Classifier head: Linear → BatchNorm → GELU → Dropout → Linear.
#[derive(Debug, Clone)]
pub struct HeadParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub bn_gamma: Tensor<S>,
    pub bn_beta: Tensor<S>,
    pub bn_mean: Tensor<S>,
    pub bn_var: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> HeadParams<S> {
    pub fn init(in_dim: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let b1 = 1.0 / (in_dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        HeadParams {
            w1: Tensor::rand_uniform(&[hidden, in_dim], -b1, b1, rng),
            b1: Tensor::rand_uniform(&[hidden], -b1, b1, rng),
            bn_gamma: Tensor::full(&[hidden], S::one()),
            bn_beta: Tensor::zeros(&[hidden]),
            bn_mean: Tensor::zeros(&[hidden]),
            bn_var: Tensor::full(&[hidden], S::one()),
            w2: Tensor::rand_uniform(&[classes, hidden], -b2, b2, rng),
            b2: Tensor::rand_uniform(&[classes], -b2, b2, rng),
        }
    }
}

/// Attention pooling over time: a learned scalar score per timestep,
/// softmaxed into weights, then a weighted sum of the sequence.
/// Returns ([n×d] pooled, [n×T] weights).
pub fn attention_pool<S: Scalar>(
    h: &Tensor<S>,
    pool_w: &Tensor<S>,
    pool_b: &Tensor<S>,
) -> TensorResult<(Tensor<S>, Tensor<S>)> {
    let shape = h.shape();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let scores = h
        .reshape(&[n * t, d])?
        .linear(pool_w, Some(pool_b))?
        .reshape(&[n, t])?;
    let weights = scores.softmax(1)?;
    let pooled = weights.reshape(&[n, 1, t])?.bmm(h)?.reshape(&[n, d])?;
    Ok((pooled, weights))
}

/// Linear → BatchNorm → GELU → Dropout → Linear, producing raw logits.
pub fn classifier_head<S: Scalar>(
    pooled: &Tensor<S>,
    head: &HeadParams<S>,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    let hidden = pooled
        .linear(&head.w1, Some(&head.b1))?
        .batch_norm(
            &head.bn_gamma,
            &head.bn_beta,
            &head.bn_mean,
            &head.bn_var,
            training,
            0.1,
            1e-5,
        )?
        .gelu()
        .dropout(dropout, training, rng)?;
    hidden.linear(&head.w2, Some(&head.b2))
}

fn argmax_lowest<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(row[0], S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone)]
pub struct BiLCNet<S: Scalar> {
    pub config: ModelConfig,
    pub lstm_layers: Vec<LstmLayerParams<S>>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    pub blocks: Vec<ConformerBlockParams<S>>,
    pub pool_w: Tensor<S>,
    pub pool_b: Tensor<S>,
    pub head: HeadParams<S>,
    /// Per-feature normalization applied on the way in; owned as model
    /// state so a checkpoint is self-contained.
    pub norm_mean: Tensor<S>,
    pub norm_sigma: Tensor<S>,
}

impl<S: Scalar> BiLCNet<S> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim();
        let h = config.lstm_hidden;
        let mut lstm_layers = Vec::with_capacity(config.lstm_layers);
        for layer in 0..config.lstm_layers {
            let in_dim = if layer == 0 { config.input_dim } else { d };
            lstm_layers.push(LstmLayerParams::init(in_dim, h, &mut rng));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let proj_w = Tensor::rand_uniform(&[d, d], -bound, bound, &mut rng);
        let proj_b = Tensor::rand_uniform(&[d], -bound, bound, &mut rng);
        let conf = config.conformer_config();
        let blocks = (0..config.conformer_blocks)
            .map(|_| ConformerBlockParams::init(&conf, &mut rng))
            .collect();
        let pool_w = Tensor::rand_uniform(&[1, d], -bound, bound, &mut rng);
        let pool_b = Tensor::rand_uniform(&[1], -bound, bound, &mut rng);
        let head = HeadParams::init(d, config.head_hidden, config.num_classes, &mut rng);
        Ok(BiLCNet {
            config: config.clone(),
            lstm_layers,
            proj_w,
            proj_b,
            blocks,
            pool_w,
            pool_b,
            head,
            norm_mean: Tensor::zeros(&[config.input_dim]),
            norm_sigma: Tensor::full(&[config.input_dim], S::one()),
        })
    }

    /// Install the per-feature normalization statistics (state, not
    /// trained). Sigmas are floored away from zero.
    pub fn set_normalization(&mut self, mean: &[S], sigma: &[S]) {
        assert_eq!(mean.len(), self.config.input_dim);
        assert_eq!(sigma.len(), self.config.input_dim);
        let floor = S::from_f64(1e-6);
        let sigma: Vec<S> = sigma.iter().map(|&s| if s < floor { floor } else { s }).collect();
        self.norm_mean.set_data(mean.to_vec());
        self.norm_sigma.set_data(sigma);
    }

    /// Every named tensor in deterministic order; names are unique and
    /// hierarchical (`bilstm.l0.fwd.w_ih`, `conformer.b1.mhsa.w_q`, ...).
    pub fn parameters(&self) -> Vec<Parameter<S>> {
        let mut out = vec![
            Parameter::state("norm.mean", &self.norm_mean),
            Parameter::state("norm.sigma", &self.norm_sigma),
        ];
        for (i, layer) in self.lstm_layers.iter().enumerate() {
            for (dir_name, dir) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                for (name, tensor) in dir.tensors() {
                    out.push(Parameter::trainable(
                        format!("bilstm.l{i}.{dir_name}.{name}"),
                        tensor,
                    ));
                }
            }
        }
        out.push(Parameter::trainable("proj.w", &self.proj_w));
        out.push(Parameter::trainable("proj.b", &self.proj_b));
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(block.params(&format!("conformer.b{i}")));
        }
        out.push(Parameter::trainable("pool.w", &self.pool_w));
        out.push(Parameter::trainable("pool.b", &self.pool_b));
        out.push(Parameter::trainable("head.w1", &self.head.w1));
        out.push(Parameter::trainable("head.b1", &self.head.b1));
        out.push(Parameter::trainable("head.bn_gamma", &self.head.bn_gamma));
        out.push(Parameter::trainable("head.bn_beta", &self.head.bn_beta));
        out.push(Parameter::state("head.bn_mean", &self.head.bn_mean));
        out.push(Parameter::state("head.bn_var", &self.head.bn_var));
        out.push(Parameter::trainable("head.w2", &self.head.w2));
        out.push(Parameter::trainable("head.b2", &self.head.b2));
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Logits for a batch: input [n×T×input_dim] → [n×num_classes].
    pub fn forward(
        &self,
        x: &Tensor<S>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<Tensor<S>> {
        // standardize features with the stored statistics; constants are
        // rebuilt per call so no gradient reaches the state tensors
        let neg_mean: Vec<S> = self.norm_mean.to_vec().iter().map(|&m| -m).collect();
        let inv_sigma: Vec<S> = self
            .norm_sigma
            .to_vec()
            .iter()
            .map(|&s| S::one() / s)
            .collect();
        let dim = self.config.input_dim;
        let x = x
            .add(&Tensor::from_vec(&[dim], neg_mean)?)?
            .mul(&Tensor::from_vec(&[dim], inv_sigma)?)?;

        let h = bilstm_forward(&x, &self.config.bilstm_config(), &self.lstm_layers, training, rng)?;
        let h = project_states(&h, &self.proj_w, &self.proj_b)?;
        let h = conformer_stack(&h, &self.blocks, &self.config.conformer_config(), training, rng)?;
        let (pooled, _) = attention_pool(&h, &self.pool_w, &self.pool_b)?;
        classifier_head(&pooled, &self.head, self.config.head_dropout, training, rng)
    }

    /// Argmax class per sample, eval mode; ties break toward the lowest
    /// class index.
    pub fn predict(&self, x: &Tensor<S>) -> TensorResult<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(x, false, &mut rng)?;
        let shape = logits.shape();
        let (n, c) = (shape[0], shape[1]);
        let data = logits.to_vec();
        Ok((0..n)
            .map(|i| argmax_lowest(&data[i * c..(i + 1) * c]))
            .collect())
    }

    /// Per sample: predicted label plus softmax probabilities.
    pub fn predict_with_probs(
        &self,
        x: &Tensor<S>,
    ) -> TensorResult<Vec<(TrafficLabel, Vec<S>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(x, false, &mut rng)?;
        let shape = logits.shape();
        let (n, c) = (shape[0], shape[1]);
        let data = logits.to_vec();
        Ok((0..n)
            .map(|i| {
                let row = &data[i * c..(i + 1) * c];
                let label = TrafficLabel::from_code(argmax_lowest(row) as u8)
                    .expect("class index within label range");
                (label, softmax_row(row))
            })
            .collect())
    }

    // --- checkpoint format --------------------------------------------------
    //
    // "BLCM" | version u32 | config-json len u32, bytes | tensor count u32 |
    // per tensor (sorted by name): name len u16, name, dtype u8, rank u8,
    // dims u32 each, element data LE | crc32 of all bytes after the magic.
    // All integers little-endian.

    fn dtype_code() -> u8 {
        match std::mem::size_of::<S>() {
            4 => 0,
            8 => 1,
            other => panic!("unsupported scalar width {other}"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| ModelError::Corrupt(format!("config serialization: {e}")))?;
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config_json);

        let mut params = self.parameters();
        params.sort_by(|a, b| a.name.cmp(&b.name));
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        let dtype = Self::dtype_code();
        for p in &params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(dtype);
            let shape = p.tensor.shape();
            buf.push(shape.len() as u8);
            for &dim in &shape {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in p.tensor.to_vec() {
                if dtype == 0 {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&crc32fast::hash(&buf[4..]).to_le_bytes());

        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let body_end = bytes.len() - 4;
        let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[4..body_end]) != stored_crc {
            return Err(ModelError::Checksum);
        }

        let mut cur = Cursor {
            bytes: &bytes[..body_end],
            pos: 4,
        };
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Version(version));
        }
        let config_len = cur.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
            .map_err(|e| ModelError::Corrupt(format!("config: {e}")))?;
        let model = Self::init(&config, 0)?;

        let by_name: HashMap<String, Parameter<S>> = model
            .parameters()
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        let expected_dtype = Self::dtype_code();
        let count = cur.u32()? as usize;
        if count != by_name.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, checkpoint has {count}",
                by_name.len()
            )));
        }
        let mut seen = 0usize;
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| ModelError::Corrupt("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = cur.u8()?;
            if dtype != expected_dtype {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name}: dtype code {dtype}, expected {expected_dtype}"
                )));
            }
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let target = by_name
                .get(&name)
                .ok_or_else(|| ModelError::Corrupt(format!("unknown tensor {name}")))?;
            if target.tensor.shape() != shape {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name}: shape {shape:?}, expected {:?}",
                    target.tensor.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let width = if dtype == 0 { 4 } else { 8 };
            let raw = cur.take(numel * width)?;
            let data: Vec<S> = raw
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    } else {
                        S::from_f64(f64::from_le_bytes(c.try_into().unwrap()))
                    }
                })
                .collect();
            target.tensor.set_data(data);
            seen += 1;
        }
        if seen != by_name.len() {
            return Err(ModelError::Corrupt("checkpoint is missing tensors".into()));
        }
        if cur.pos != cur.bytes.len() {
            return Err(ModelError::Corrupt("trailing bytes after tensor data".into()));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Corrupt("unexpected end of checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
