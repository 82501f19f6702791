//! Named finite-difference verification battery.
//!
//! Shared by the unit tests and the `gradcheck` command so both exercise the
//! same probes: every differentiable primitive in the pipeline plus an
//! end-to-end training-loss sweep of a reduced model. Each case draws a
//! conditioned probe point from a seed, scalarizes the output through a
//! weighted sum, and compares analytic gradients of every input coordinate
//! (parameters included) against central differences.

use crate::bilstm::{lstm_cell_step, LstmDirectionParams};
use crate::conformer::{
    conformer_block, mhsa_forward, BlockOrder, ConformerBlockParams, ConformerConfig, MhsaParams,
};
use crate::model::{attention_pool, classifier_head, BiLCNet, HeadParams, ModelConfig};
use crate::num::{splitmix64, Scalar};
use crate::tensor::{grad_check, GradCheckReport, ParamKind, Tensor, TensorResult};
use crate::train::{cross_entropy, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One named verification case and its finite-difference outcome.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Absolute error below which a finite difference cannot certify a gradient
/// at this precision. The central quotient carries roundoff of order
/// ε·|f|/h; the probes here keep |f| within an order of magnitude of one,
/// and the factor of 50 adds headroom for deep graphs. Coordinates whose
/// disagreement stays under the floor count as passing regardless of
/// relative error: that is what admits structurally dead directions (a bias
/// ahead of a shift-invariant softmax or train-mode batch norm) and
/// near-stationary coordinates, while a wrong backward moves live
/// coordinates by the gradient scale itself, far above the floor. The f64
/// battery re-checks every structure with this floor near machine noise.
pub fn noise_floor<S: Scalar>() -> f64 {
    50.0 * S::epsilon().as_f64() / S::fd_step()
}

fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (index << 24)))
}

fn run<S: Scalar>(
    name: &'static str,
    tol: f64,
    inputs: Vec<Tensor<S>>,
    f: impl Fn(&[Tensor<S>]) -> TensorResult<Tensor<S>>,
) -> SuiteCase {
    let report = grad_check(&f, &inputs, tol, noise_floor::<S>(), None, 0)
        .expect("verification graph must evaluate");
    SuiteCase { name, report }
}

fn ce_scalar<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> TensorResult<Tensor<S>> {
    match cross_entropy(logits, labels) {
        Ok(loss) => Ok(loss),
        Err(TrainError::Tensor(e)) => Err(e),
        Err(other) => unreachable!("verification labels are in range: {other}"),
    }
}

fn matmul_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    // positive ranges keep every analytic gradient O(1), so the f32
    // difference-quotient noise stays well inside the tolerance
    let a = Tensor::<S>::rand_uniform(&[3, 4], 0.5, 1.5, rng);
    let b = Tensor::<S>::rand_uniform(&[4, 2], 0.5, 1.5, rng);
    let w = Tensor::<S>::rand_uniform(&[3, 2], 0.5, 1.5, rng);
    run("matmul", tol, vec![a, b], move |t| {
        t[0].matmul(&t[1])?.weighted_sum(&w)
    })
}

fn softmax_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let x = Tensor::<S>::rand_uniform(&[2, 4], -1.0, 1.0, rng);
    let w = Tensor::<S>::rand_uniform(&[2, 4], 0.5, 1.5, rng);
    run("softmax", tol, vec![x], move |t| {
        t[0].softmax(1)?.weighted_sum(&w)
    })
}

fn layer_norm_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let x = Tensor::<S>::rand_uniform(&[2, 6], -1.5, 1.5, rng);
    let gamma = Tensor::<S>::rand_uniform(&[6], 0.5, 1.5, rng);
    let beta = Tensor::<S>::rand_uniform(&[6], -0.5, 0.5, rng);
    let w = Tensor::<S>::rand_uniform(&[2, 6], 0.5, 1.5, rng);
    run("layer_norm", tol, vec![x, gamma, beta], move |t| {
        t[0].layer_norm(&t[1], &t[2], 1e-5)?.weighted_sum(&w)
    })
}

fn gelu_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    // the derivative crosses zero near x ≈ −0.75; probe away from that
    // stationary band so every coordinate carries a measurable gradient
    let x = Tensor::<S>::rand_uniform(&[3, 4], -0.25, 1.75, rng);
    let w = Tensor::<S>::rand_uniform(&[3, 4], 0.5, 1.5, rng);
    run("gelu", tol, vec![x], move |t| t[0].gelu().weighted_sum(&w))
}

fn batch_norm_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let x = Tensor::<S>::rand_uniform(&[4, 3], 0.5, 1.5, rng);
    let gamma = Tensor::<S>::rand_uniform(&[3], 0.5, 1.5, rng);
    let beta = Tensor::<S>::rand_uniform(&[3], -0.5, 0.5, rng);
    // running stats are updated in place per call but never read in
    // training mode, so the drift cannot perturb the probe
    let mean = Tensor::<S>::zeros(&[3]);
    let var = Tensor::<S>::full(&[3], S::one());
    let w = Tensor::<S>::rand_uniform(&[4, 3], 0.5, 1.5, rng);
    run("batch_norm_train", tol, vec![x, gamma, beta], move |t| {
        t[0].batch_norm(&t[1], &t[2], &mean, &var, true, 0.1, 1e-5)?
            .weighted_sum(&w)
    })
}

fn depthwise_conv_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let x = Tensor::<S>::rand_uniform(&[2, 5, 3], 0.5, 1.5, rng);
    let kernel = Tensor::<S>::rand_uniform(&[3, 3], -0.75, 0.75, rng);
    // light weights keep the scalarized value near one despite the wide
    // output, holding absolute roundoff far below the floor
    let w = Tensor::<S>::rand_uniform(&[2, 5, 3], 0.05, 0.15, rng);
    run("depthwise_conv1d", tol, vec![x, kernel], move |t| {
        t[0].depthwise_conv1d(&t[1])?.weighted_sum(&w)
    })
}

fn lstm_cell_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let p = LstmDirectionParams::<S>::init(4, 3, rng);
    let x = Tensor::<S>::rand_uniform(&[2, 4], -1.0, 1.0, rng);
    let h0 = Tensor::<S>::rand_uniform(&[2, 3], -0.5, 0.5, rng);
    let c0 = Tensor::<S>::rand_uniform(&[2, 3], -0.5, 0.5, rng);
    let wh = Tensor::<S>::rand_uniform(&[2, 3], 0.5, 1.5, rng);
    let wc = Tensor::<S>::rand_uniform(&[2, 3], 0.5, 1.5, rng);
    // the trailing inputs alias the cell parameters, so the sweep covers
    // weights and biases alongside the activations
    let inputs = vec![
        x,
        h0,
        c0,
        p.w_ih.clone(),
        p.w_hh.clone(),
        p.b_ih.clone(),
        p.b_hh.clone(),
    ];
    run("lstm_cell", tol, inputs, move |t| {
        let (h, c) = lstm_cell_step(&t[0], &t[1], &t[2], &p)?;
        h.weighted_sum(&wh)?.add(&c.weighted_sum(&wc)?)
    })
}

fn mhsa_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let p = MhsaParams::<S>::init(6, rng);
    let x = Tensor::<S>::rand_uniform(&[2, 4, 6], -1.0, 1.0, rng);
    let w = Tensor::<S>::rand_uniform(&[2, 4, 6], 0.05, 0.15, rng);
    let inputs = vec![
        x,
        p.ln.gamma.clone(),
        p.ln.beta.clone(),
        p.w_q.clone(),
        p.w_k.clone(),
        p.w_v.clone(),
        p.w_o.clone(),
    ];
    run("mhsa", tol, inputs, move |t| {
        let mut fwd = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = mhsa_forward(&t[0], &p, 2, 0.0, false, &mut fwd)?;
        out.weighted_sum(&w)
    })
}

fn conformer_block_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let config = ConformerConfig {
        model_dim: 6,
        num_blocks: 1,
        num_heads: 2,
        ffn_expansion: 2,
        conv_kernel: 3,
        dropout: 0.0,
        block_order: BlockOrder::ConvFirst,
    };
    let p = ConformerBlockParams::<S>::init(&config, rng);
    let x = Tensor::<S>::rand_uniform(&[2, 5, 6], -1.0, 1.0, rng);
    let w = Tensor::<S>::rand_uniform(&[2, 5, 6], 0.05, 0.15, rng);
    // eval mode: batch-norm running stats are read-only constants with no
    // gradient path, so only the trainable tensors join the sweep
    let inputs: Vec<Tensor<S>> = std::iter::once(x)
        .chain(
            p.params("block")
                .into_iter()
                .filter(|q| matches!(q.kind, ParamKind::Trainable))
                .map(|q| q.tensor),
        )
        .collect();
    run("conformer_block", tol, inputs, move |t| {
        let mut fwd = ChaCha8Rng::seed_from_u64(0);
        conformer_block(&t[0], &p, &config, false, &mut fwd)?.weighted_sum(&w)
    })
}

fn attention_pool_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let h = Tensor::<S>::rand_uniform(&[2, 4, 6], -1.0, 1.0, rng);
    let pool_w = Tensor::<S>::rand_uniform(&[1, 6], -0.5, 0.5, rng);
    // the bias shifts every score equally and dies under the softmax; the
    // absolute floor is what lets its zero gradient through
    let pool_b = Tensor::<S>::rand_uniform(&[1], -0.5, 0.5, rng);
    let w = Tensor::<S>::rand_uniform(&[2, 6], 0.5, 1.5, rng);
    run("attention_pool", tol, vec![h, pool_w, pool_b], move |t| {
        let (pooled, _) = attention_pool(&t[0], &t[1], &t[2])?;
        pooled.weighted_sum(&w)
    })
}

fn classifier_head_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let mut head = HeadParams::<S>::init(5, 4, 4, rng);
    // eval mode with randomized running statistics checks normalization by
    // stored moments; the train-mode branch is covered on its own above
    head.bn_mean = Tensor::rand_uniform(&[4], -0.5, 0.5, rng);
    head.bn_var = Tensor::rand_uniform(&[4], 0.5, 2.0, rng);
    let pooled = Tensor::<S>::rand_uniform(&[3, 5], -1.0, 1.0, rng);
    let w = Tensor::<S>::rand_uniform(&[3, 4], 0.5, 1.5, rng);
    let inputs = vec![
        pooled,
        head.w1.clone(),
        head.b1.clone(),
        head.bn_gamma.clone(),
        head.bn_beta.clone(),
        head.w2.clone(),
        head.b2.clone(),
    ];
    run("classifier_head", tol, inputs, move |t| {
        let mut fwd = ChaCha8Rng::seed_from_u64(0);
        classifier_head(&t[0], &head, 0.0, false, &mut fwd)?.weighted_sum(&w)
    })
}

fn cross_entropy_case<S: Scalar>(tol: f64, rng: &mut ChaCha8Rng) -> SuiteCase {
    let logits = Tensor::<S>::rand_uniform(&[3, 4], -2.0, 2.0, rng);
    let labels = vec![1usize, 3, 0];
    run("cross_entropy", tol, vec![logits], move |t| {
        ce_scalar(&t[0], &labels)
    })
}

/// Run the full primitive battery at one precision. Each case derives its
/// probe point from `seed`; the pass criterion is relative error below
/// `tol` or absolute error below [`noise_floor`] per coordinate.
pub fn primitive_suite<S: Scalar>(tol: f64, seed: u64) -> Vec<SuiteCase> {
    let cases: [fn(f64, &mut ChaCha8Rng) -> SuiteCase; 12] = [
        matmul_case::<S>,
        softmax_case::<S>,
        layer_norm_case::<S>,
        gelu_case::<S>,
        batch_norm_case::<S>,
        depthwise_conv_case::<S>,
        lstm_cell_case::<S>,
        mhsa_case::<S>,
        conformer_block_case::<S>,
        attention_pool_case::<S>,
        classifier_head_case::<S>,
        cross_entropy_case::<S>,
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, build)| build(tol, &mut case_rng(seed, i as u64)))
        .collect()
}

/// End-to-end probe: training-mode forward plus cross-entropy on a reduced
/// model, sweeping the input and a sampled subset of each trainable
/// tensor's coordinates.
pub fn model_case<S: Scalar>(tol: f64, seed: u64) -> SuiteCase {
    let config = ModelConfig {
        input_dim: 6,
        num_classes: 4,
        lstm_hidden: 3,
        lstm_layers: 2,
        lstm_dropout: 0.0,
        conformer_blocks: 1,
        attention_heads: 2,
        ffn_expansion: 2,
        conv_kernel: 3,
        conformer_dropout: 0.0,
        block_order: BlockOrder::ConvFirst,
        head_hidden: 5,
        head_dropout: 0.0,
    };
    let model = BiLCNet::<S>::init(&config, splitmix64(seed ^ 0xb11c)).expect("reduced config is valid");
    let mut rng = case_rng(seed, 12);
    let x = Tensor::<S>::rand_uniform(&[2, 4, 6], -1.0, 1.0, &mut rng);
    let labels = vec![2usize, 0];
    // parameter handles share storage with the model, so perturbing them
    // perturbs the forward pass and their gradients land where we look
    let inputs: Vec<Tensor<S>> = std::iter::once(x)
        .chain(
            model
                .parameters()
                .into_iter()
                .filter(|p| matches!(p.kind, ParamKind::Trainable))
                .map(|p| p.tensor),
        )
        .collect();
    let f = move |t: &[Tensor<S>]| {
        let mut fwd = ChaCha8Rng::seed_from_u64(0);
        let logits = model.forward(&t[0], true, &mut fwd)?;
        ce_scalar(&logits, &labels)
    };
    let report = grad_check(&f, &inputs, tol, noise_floor::<S>(), Some(4), splitmix64(seed))
        .expect("verification graph must evaluate");
    SuiteCase {
        name: "bilcnet_train_loss",
        report,
    }
}
