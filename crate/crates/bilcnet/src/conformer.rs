//! Conformer blocks over [n×T×d] sequences: half-weighted feed-forward
//! sandwiches around a convolution module and multi-head self-attention,
//! composed through residual connections. Each submodule owns its pre-norm.

use crate::num::Scalar;
use crate::tensor::{Parameter, Tensor, TensorResult};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Order of the two middle branches inside a block. `ConvFirst` is the
/// composition implemented by default; `AttentionFirst` is the original
/// Conformer ordering, kept as an ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    ConvFirst,
    AttentionFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub block_order: BlockOrder,
}

impl ConformerConfig {
    pub fn new(model_dim: usize) -> Self {
        ConformerConfig {
            model_dim,
            num_blocks: 2,
            num_heads: 4,
            ffn_expansion: 4,
            conv_kernel: 3,
            dropout: 0.1,
            block_order: BlockOrder::ConvFirst,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

fn uniform_fan_in<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct LnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LnParams<S> {
    pub fn init(dim: usize) -> Self {
        LnParams {
            gamma: Tensor::full(&[dim], S::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> TensorResult<Tensor<S>> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    fn params(&self, prefix: &str) -> Vec<Parameter<S>> {
        vec![
            Parameter::trainable(format!("{prefix}.gamma"), &self.gamma),
            Parameter::trainable(format!("{prefix}.beta"), &self.beta),
        ]
    }
}

/// Pre-normed position-wise feed-forward: LN → d→rd → GELU → rd→d.
#[derive(Debug, Clone)]
pub struct FfnParams<S: Scalar> {
    pub ln: LnParams<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> FfnParams<S> {
    pub fn init(dim: usize, expansion: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * expansion;
        FfnParams {
            ln: LnParams::init(dim),
            w1: uniform_fan_in(&[hidden, dim], dim, rng),
            b1: uniform_fan_in(&[hidden], dim, rng),
            w2: uniform_fan_in(&[dim, hidden], hidden, rng),
            b2: uniform_fan_in(&[dim], hidden, rng),
        }
    }

    fn params(&self, prefix: &str) -> Vec<Parameter<S>> {
        let mut out = self.ln.params(&format!("{prefix}.ln"));
        out.push(Parameter::trainable(format!("{prefix}.w1"), &self.w1));
        out.push(Parameter::trainable(format!("{prefix}.b1"), &self.b1));
        out.push(Parameter::trainable(format!("{prefix}.w2"), &self.w2));
        out.push(Parameter::trainable(format!("{prefix}.b2"), &self.b2));
        out
    }
}

pub fn ffn_forward<S: Scalar>(
    x: &Tensor<S>,
    params: &FfnParams<S>,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    let shape = x.shape();
    let d = shape[2];
    let flat = params.ln.apply(x)?.reshape(&[shape[0] * shape[1], d])?;
    let hidden = flat.linear(&params.w1, Some(&params.b1))?.gelu();
    let out = hidden
        .linear(&params.w2, Some(&params.b2))?
        .dropout(dropout, training, rng)?;
    out.reshape(&shape)
}

/// Convolution module: LN → pointwise d→2d → GLU → depthwise conv →
/// batch norm → Swish → pointwise d→d.
#[derive(Debug, Clone)]
pub struct ConvModuleParams<S: Scalar> {
    pub ln: LnParams<S>,
    pub pw1_w: Tensor<S>,
    pub pw1_b: Tensor<S>,
    pub kernel: Tensor<S>,
    pub bn_gamma: Tensor<S>,
    pub bn_beta: Tensor<S>,
    pub bn_mean: Tensor<S>,
    pub bn_var: Tensor<S>,
    pub pw2_w: Tensor<S>,
    pub pw2_b: Tensor<S>,
}

impl<S: Scalar> ConvModuleParams<S> {
    pub fn init(dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvModuleParams {
            ln: LnParams::init(dim),
            pw1_w: uniform_fan_in(&[2 * dim, dim], dim, rng),
            pw1_b: uniform_fan_in(&[2 * dim], dim, rng),
            kernel: uniform_fan_in(&[kernel, dim], kernel, rng),
            bn_gamma: Tensor::full(&[dim], S::one()),
            bn_beta: Tensor::zeros(&[dim]),
            bn_mean: Tensor::zeros(&[dim]),
            bn_var: Tensor::full(&[dim], S::one()),
            pw2_w: uniform_fan_in(&[dim, dim], dim, rng),
            pw2_b: uniform_fan_in(&[dim], dim, rng),
        }
    }

    fn params(&self, prefix: &str) -> Vec<Parameter<S>> {
        let mut out = self.ln.params(&format!("{prefix}.ln"));
        out.push(Parameter::trainable(format!("{prefix}.pw1_w"), &self.pw1_w));
        out.push(Parameter::trainable(format!("{prefix}.pw1_b"), &self.pw1_b));
        out.push(Parameter::trainable(format!("{prefix}.kernel"), &self.kernel));
        out.push(Parameter::trainable(format!("{prefix}.bn_gamma"), &self.bn_gamma));
        out.push(Parameter::trainable(format!("{prefix}.bn_beta"), &self.bn_beta));
        out.push(Parameter::state(format!("{prefix}.bn_mean"), &self.bn_mean));
        out.push(Parameter::state(format!("{prefix}.bn_var"), &self.bn_var));
        out.push(Parameter::trainable(format!("{prefix}.pw2_w"), &self.pw2_w));
        out.push(Parameter::trainable(format!("{prefix}.pw2_b"), &self.pw2_b));
        out
    }
}

pub fn conv_module<S: Scalar>(
    x: &Tensor<S>,
    params: &ConvModuleParams<S>,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    let shape = x.shape();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let flat = params.ln.apply(x)?.reshape(&[n * t, d])?;
    let doubled = flat.linear(&params.pw1_w, Some(&params.pw1_b))?;
    let gate_in = doubled.slice_last(0, d)?;
    let gate = doubled.slice_last(d, d)?.sigmoid();
    let glu = gate_in.mul(&gate)?;
    let conv = glu.reshape(&[n, t, d])?.depthwise_conv1d(&params.kernel)?;
    let normed = conv.reshape(&[n * t, d])?.batch_norm(
        &params.bn_gamma,
        &params.bn_beta,
        &params.bn_mean,
        &params.bn_var,
        training,
        0.1,
        1e-5,
    )?;
    let out = normed
        .swish()
        .linear(&params.pw2_w, Some(&params.pw2_b))?
        .dropout(dropout, training, rng)?;
    out.reshape(&shape)
}

/// Multi-head self-attention. Per-head projections are stored as the
/// combined d×d maps; heads are split along the feature axis.
#[derive(Debug, Clone)]
pub struct MhsaParams<S: Scalar> {
    pub ln: LnParams<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
}

impl<S: Scalar> MhsaParams<S> {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        MhsaParams {
            ln: LnParams::init(dim),
            w_q: uniform_fan_in(&[dim, dim], dim, rng),
            w_k: uniform_fan_in(&[dim, dim], dim, rng),
            w_v: uniform_fan_in(&[dim, dim], dim, rng),
            w_o: uniform_fan_in(&[dim, dim], dim, rng),
        }
    }

    fn params(&self, prefix: &str) -> Vec<Parameter<S>> {
        let mut out = self.ln.params(&format!("{prefix}.ln"));
        out.push(Parameter::trainable(format!("{prefix}.w_q"), &self.w_q));
        out.push(Parameter::trainable(format!("{prefix}.w_k"), &self.w_k));
        out.push(Parameter::trainable(format!("{prefix}.w_v"), &self.w_v));
        out.push(Parameter::trainable(format!("{prefix}.w_o"), &self.w_o));
        out
    }
}

/// Returns the attended output and the [n·h×T×T] attention weights.
pub fn mhsa_forward<S: Scalar>(
    x: &Tensor<S>,
    params: &MhsaParams<S>,
    heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<(Tensor<S>, Tensor<S>)> {
    let shape = x.shape();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let head_dim = d / heads;
    let flat = params.ln.apply(x)?.reshape(&[n * t, d])?;
    let split = |w: &Tensor<S>| -> TensorResult<Tensor<S>> {
        flat.linear(w, None)?
            .reshape(&[n, t, d])?
            .split_heads(heads)
    };
    let q = split(&params.w_q)?;
    let k = split(&params.w_k)?;
    let v = split(&params.w_v)?;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let attn = q.bmm_nt(&k)?.scale(scale).softmax(2)?;
    let ctx = attn.bmm(&v)?.merge_heads(heads)?;
    let out = ctx
        .reshape(&[n * t, d])?
        .linear(&params.w_o, None)?
        .dropout(dropout, training, rng)?
        .reshape(&shape)?;
    Ok((out, attn))
}

#[derive(Debug, Clone)]
pub struct ConformerBlockParams<S: Scalar> {
    pub ffn1: FfnParams<S>,
    pub conv: ConvModuleParams<S>,
    pub mhsa: MhsaParams<S>,
    pub ffn2: FfnParams<S>,
}

impl<S: Scalar> ConformerBlockParams<S> {
    pub fn init(config: &ConformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        ConformerBlockParams {
            ffn1: FfnParams::init(d, config.ffn_expansion, rng),
            conv: ConvModuleParams::init(d, config.conv_kernel, rng),
            mhsa: MhsaParams::init(d, rng),
            ffn2: FfnParams::init(d, config.ffn_expansion, rng),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<Parameter<S>> {
        let mut out = self.ffn1.params(&format!("{prefix}.ffn1"));
        out.extend(self.conv.params(&format!("{prefix}.conv")));
        out.extend(self.mhsa.params(&format!("{prefix}.mhsa")));
        out.extend(self.ffn2.params(&format!("{prefix}.ffn2")));
        out
    }
}

/// One block: x +→ ½FFN, +→ Conv, +→ MHSA, +→ ½FFN (default order), each
/// branch pre-normed, residual throughout.
pub fn conformer_block<S: Scalar>(
    x: &Tensor<S>,
    params: &ConformerBlockParams<S>,
    config: &ConformerConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    let half = S::from_f64(0.5);
    let p = config.dropout;
    let h1 = x.add(&ffn_forward(x, &params.ffn1, p, training, rng)?.scale(half))?;
    let h3 = match config.block_order {
        BlockOrder::ConvFirst => {
            let h2 = h1.add(&conv_module(&h1, &params.conv, p, training, rng)?)?;
            let (attn_out, _) = mhsa_forward(&h2, &params.mhsa, config.num_heads, p, training, rng)?;
            h2.add(&attn_out)?
        }
        BlockOrder::AttentionFirst => {
            let (attn_out, _) = mhsa_forward(&h1, &params.mhsa, config.num_heads, p, training, rng)?;
            let h2 = h1.add(&attn_out)?;
            h2.add(&conv_module(&h2, &params.conv, p, training, rng)?)?
        }
    };
    h3.add(&ffn_forward(&h3, &params.ffn2, p, training, rng)?.scale(half))
}

pub fn conformer_stack<S: Scalar>(
    x: &Tensor<S>,
    blocks: &[ConformerBlockParams<S>],
    config: &ConformerConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    let mut h = x.clone();
    for block in blocks {
        h = conformer_block(&h, block, config, training, rng)?;
    }
    Ok(h)
}
