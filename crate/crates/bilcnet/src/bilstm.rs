//! Multi-layer bidirectional LSTM over fixed-length sequences, plus the
//! shape-preserving linear projection applied to its per-timestep states.

use crate::num::Scalar;
use crate::tensor::{Tensor, TensorResult};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

impl BiLstmConfig {
    pub fn new(input_dim: usize) -> Self {
        BiLstmConfig {
            input_dim,
            hidden_dim: 64,
            num_layers: 2,
            dropout: 0.1,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// One direction of one layer. Gate order within the 4H axis is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirectionParams<S: Scalar> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub b_ih: Tensor<S>,
    pub b_hh: Tensor<S>,
}

impl<S: Scalar> LstmDirectionParams<S> {
    /// Uniform(−1/√H, 1/√H) init with the forget-gate bias raised by one.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let g = 4 * hidden_dim;
        let w_ih = Tensor::rand_uniform(&[g, input_dim], -bound, bound, rng);
        let w_hh = Tensor::rand_uniform(&[g, hidden_dim], -bound, bound, rng);
        let b_ih = Tensor::rand_uniform(&[g], -bound, bound, rng);
        let b_hh = Tensor::rand_uniform(&[g], -bound, bound, rng);
        b_ih.with_data_and_grad(|data, _| {
            for v in &mut data[hidden_dim..2 * hidden_dim] {
                *v = *v + S::one();
            }
        });
        LstmDirectionParams {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = 4 * hidden_dim;
        LstmDirectionParams {
            w_ih: Tensor::zeros(&[g, input_dim]),
            w_hh: Tensor::zeros(&[g, hidden_dim]),
            b_ih: Tensor::zeros(&[g]),
            b_hh: Tensor::zeros(&[g]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<S>); 4] {
        [
            ("w_ih", &self.w_ih),
            ("w_hh", &self.w_hh),
            ("b_ih", &self.b_ih),
            ("b_hh", &self.b_hh),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayerParams<S: Scalar> {
    pub fwd: LstmDirectionParams<S>,
    pub bwd: LstmDirectionParams<S>,
}

impl<S: Scalar> LstmLayerParams<S> {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmLayerParams {
            fwd: LstmDirectionParams::init(input_dim, hidden_dim, rng),
            bwd: LstmDirectionParams::init(input_dim, hidden_dim, rng),
        }
    }
}

/// One LSTM step: gates from x_t and h_prev, then the cell/hidden update.
pub fn lstm_cell_step<S: Scalar>(
    x_t: &Tensor<S>,
    h_prev: &Tensor<S>,
    c_prev: &Tensor<S>,
    params: &LstmDirectionParams<S>,
) -> TensorResult<(Tensor<S>, Tensor<S>)> {
    let hidden = h_prev.shape()[1];
    let gates = x_t
        .linear(&params.w_ih, Some(&params.b_ih))?
        .add(&h_prev.linear(&params.w_hh, Some(&params.b_hh))?)?;
    let i = gates.slice_last(0, hidden)?.sigmoid();
    let f = gates.slice_last(hidden, hidden)?.sigmoid();
    let g = gates.slice_last(2 * hidden, hidden)?.tanh();
    let o = gates.slice_last(3 * hidden, hidden)?.sigmoid();
    let c_t = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h_t = o.mul(&c_t.tanh())?;
    Ok((h_t, c_t))
}

fn run_direction<S: Scalar>(
    x: &Tensor<S>,
    params: &LstmDirectionParams<S>,
    hidden: usize,
    reverse: bool,
) -> TensorResult<Tensor<S>> {
    let shape = x.shape();
    let (n, t) = (shape[0], shape[1]);
    let mut h = Tensor::zeros(&[n, hidden]);
    let mut c = Tensor::zeros(&[n, hidden]);
    let mut states: Vec<Tensor<S>> = Vec::with_capacity(t);
    for step in 0..t {
        let ti = if reverse { t - 1 - step } else { step };
        let x_t = x.slice_time(ti)?;
        let (h_t, c_t) = lstm_cell_step(&x_t, &h, &c, params)?;
        h = h_t;
        c = c_t;
        states.push(h.clone());
    }
    if reverse {
        states.reverse();
    }
    Tensor::stack_time(&states)
}

/// Full stack: per layer a forward and a backward sweep whose states are
/// concatenated per timestep; dropout between layers in training mode.
pub fn bilstm_forward<S: Scalar>(
    x: &Tensor<S>,
    config: &BiLstmConfig,
    layers: &[LstmLayerParams<S>],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Tensor<S>> {
    assert_eq!(layers.len(), config.num_layers);
    let mut seq = x.clone();
    for (idx, layer) in layers.iter().enumerate() {
        let fwd = run_direction(&seq, &layer.fwd, config.hidden_dim, false)?;
        let bwd = run_direction(&seq, &layer.bwd, config.hidden_dim, true)?;
        seq = fwd.concat_last(&bwd)?;
        if idx + 1 < layers.len() {
            seq = seq.dropout(config.dropout, training, rng)?;
        }
    }
    Ok(seq)
}

/// Per-timestep affine map of the concatenated states (2H → 2H).
pub fn project_states<S: Scalar>(
    h: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> TensorResult<Tensor<S>> {
    let shape = h.shape();
    let d = shape[2];
    h.reshape(&[shape[0] * shape[1], d])?
        .linear(w, Some(b))?
        .reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    type T64 = Tensor<f64>;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_zero_states() {
        let mut r = rng(0);
        let x = T64::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
        let config = BiLstmConfig {
            input_dim: 3,
            hidden_dim: 2,
            num_layers: 2,
            dropout: 0.0,
        };
        let layers = vec![
            LstmLayerParams {
                fwd: LstmDirectionParams::zeros(3, 2),
                bwd: LstmDirectionParams::zeros(3, 2),
            },
            LstmLayerParams {
                fwd: LstmDirectionParams::zeros(4, 2),
                bwd: LstmDirectionParams::zeros(4, 2),
            },
        ];
        let y = bilstm_forward(&x, &config, &layers, false, &mut r).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_cell() {
        // H=1, zero weights, biases (i: +10, f: −10, g: +1, o: 0), x = 0
        let params = LstmDirectionParams::<f64> {
            w_ih: T64::zeros(&[4, 1]),
            w_hh: T64::zeros(&[4, 1]),
            b_ih: T64::from_vec(&[4], vec![10.0, -10.0, 1.0, 0.0]).unwrap(),
            b_hh: T64::zeros(&[4]),
        };
        let x = T64::zeros(&[1, 1]);
        let h0 = T64::zeros(&[1, 1]);
        let c0 = T64::zeros(&[1, 1]);
        let (h, c) = lstm_cell_step(&x, &h0, &c0, &params).unwrap();
        let sig10 = 1.0 / (1.0 + (-10.0f64).exp());
        let expect_c = sig10 * 1.0f64.tanh();
        assert!((c.item() - expect_c).abs() < 1e-12, "c={}", c.item());
        assert!((expect_c - 0.76159).abs() < 1e-3);
        let expect_h = 0.5 * expect_c.tanh();
        assert!((h.item() - expect_h).abs() < 1e-12, "h={}", h.item());
    }

    #[test]
    fn grad_three_chained_steps() {
        let mut r = rng(1);
        let (n, d_in, hidden) = (2, 3, 2);
        let xs: Vec<T64> = (0..3)
            .map(|_| T64::rand_uniform(&[n, d_in], -1.0, 1.0, &mut r))
            .collect();
        let w_ih = T64::rand_uniform(&[4 * hidden, d_in], -0.5, 0.5, &mut r);
        let w_hh = T64::rand_uniform(&[4 * hidden, hidden], -0.5, 0.5, &mut r);
        let b_ih = T64::rand_uniform(&[4 * hidden], -0.5, 0.5, &mut r);
        let b_hh = T64::rand_uniform(&[4 * hidden], -0.5, 0.5, &mut r);
        let w = T64::rand_uniform(&[n, hidden], -1.0, 1.0, &mut r);
        let inputs = vec![
            xs[0].clone(),
            xs[1].clone(),
            xs[2].clone(),
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        ];
        let f = move |inp: &[T64]| {
            let params = LstmDirectionParams {
                w_ih: inp[3].clone(),
                w_hh: inp[4].clone(),
                b_ih: inp[5].clone(),
                b_hh: inp[6].clone(),
            };
            let mut h = T64::zeros(&[n, hidden]);
            let mut c = T64::zeros(&[n, hidden]);
            for x_t in &inp[..3] {
                let (h_t, c_t) = lstm_cell_step(x_t, &h, &c, &params)?;
                h = h_t;
                c = c_t;
            }
            h.weighted_sum(&w)
        };
        let report = grad_check(&f, &inputs, 1e-6, 0.0, None, 0).unwrap();
        assert!(
            report.pass,
            "max_rel_err={} over {} coords",
            report.max_rel_err, report.evaluated
        );
    }

    #[test]
    fn shape_contract() {
        let mut r = rng(2);
        let config = BiLstmConfig {
            input_dim: 7,
            hidden_dim: 5,
            num_layers: 2,
            dropout: 0.1,
        };
        let layers = vec![
            LstmLayerParams::init(7, 5, &mut r),
            LstmLayerParams::init(10, 5, &mut r),
        ];
        let x = T64::rand_uniform(&[4, 10, 7], -1.0, 1.0, &mut r);
        let y = bilstm_forward(&x, &config, &layers, false, &mut r).unwrap();
        assert_eq!(y.shape(), vec![4, 10, 10]);
    }

    #[test]
    fn time_reversal_symmetry() {
        let mut r = rng(3);
        let (n, t, d_in, hidden) = (2, 5, 3, 4);
        let config = BiLstmConfig {
            input_dim: d_in,
            hidden_dim: hidden,
            num_layers: 1,
            dropout: 0.0,
        };
        let layer = LstmLayerParams::init(d_in, hidden, &mut r);
        let swapped = vec![LstmLayerParams {
            fwd: layer.bwd.clone(),
            bwd: layer.fwd.clone(),
        }];
        let x = T64::rand_uniform(&[n, t, d_in], -1.0, 1.0, &mut r);
        let x_rev = {
            let xv = x.to_vec();
            let mut rv = vec![0.0; xv.len()];
            for b in 0..n {
                for ti in 0..t {
                    let src = (b * t + ti) * d_in;
                    let dst = (b * t + (t - 1 - ti)) * d_in;
                    rv[dst..dst + d_in].copy_from_slice(&xv[src..src + d_in]);
                }
            }
            T64::from_vec(&[n, t, d_in], rv).unwrap()
        };
        let y = bilstm_forward(&x, &config, std::slice::from_ref(&layer), false, &mut r)
            .unwrap()
            .to_vec();
        let y2 = bilstm_forward(&x_rev, &config, &swapped, false, &mut r)
            .unwrap()
            .to_vec();
        let d_out = 2 * hidden;
        for b in 0..n {
            for ti in 0..t {
                let orig = &y[(b * t + ti) * d_out..(b * t + ti + 1) * d_out];
                let rev = &y2[(b * t + (t - 1 - ti)) * d_out..(b * t + (t - ti)) * d_out];
                for j in 0..hidden {
                    assert!((orig[j] - rev[hidden + j]).abs() < 1e-12);
                    assert!((orig[hidden + j] - rev[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causality_split() {
        let mut r = rng(4);
        let (n, t, d_in, hidden) = (1, 6, 3, 4);
        let config = BiLstmConfig {
            input_dim: d_in,
            hidden_dim: hidden,
            num_layers: 1,
            dropout: 0.0,
        };
        let layer = vec![LstmLayerParams::init(d_in, hidden, &mut r)];
        let x = T64::rand_uniform(&[n, t, d_in], -1.0, 1.0, &mut r);
        let y = bilstm_forward(&x, &config, &layer, false, &mut r)
            .unwrap()
            .to_vec();
        let perturb_t = 2;
        let mut xv = x.to_vec();
        xv[perturb_t * d_in] += 0.5;
        let x2 = T64::from_vec(&[n, t, d_in], xv).unwrap();
        let y2 = bilstm_forward(&x2, &config, &layer, false, &mut r)
            .unwrap()
            .to_vec();
        let d_out = 2 * hidden;
        for ti in 0..t {
            let a = &y[ti * d_out..(ti + 1) * d_out];
            let b = &y2[ti * d_out..(ti + 1) * d_out];
            let fwd_changed = (0..hidden).any(|j| (a[j] - b[j]).abs() > 1e-12);
            let bwd_changed = (0..hidden).any(|j| (a[hidden + j] - b[hidden + j]).abs() > 1e-12);
            assert_eq!(fwd_changed, ti >= perturb_t, "forward half at t={ti}");
            assert_eq!(bwd_changed, ti <= perturb_t, "backward half at t={ti}");
        }
    }

    #[test]
    fn projection_identity_and_bias() {
        let mut r = rng(5);
        let (n, t, d) = (2, 3, 4);
        let h = T64::rand_uniform(&[n, t, d], -1.0, 1.0, &mut r);
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = T64::from_vec(&[d, d], eye).unwrap();
        let b = T64::zeros(&[d]);
        let y = project_states(&h, &w, &b).unwrap();
        assert_eq!(y.shape(), vec![n, t, d]);
        let (hv, yv) = (h.to_vec(), y.to_vec());
        for (a, b) in hv.iter().zip(&yv) {
            assert!((a - b).abs() < 1e-12);
        }

        let zero_h = T64::zeros(&[n, t, d]);
        let beta = T64::from_vec(&[d], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = project_states(&zero_h, &w, &beta).unwrap().to_vec();
        for row in y.chunks(d) {
            assert_eq!(row, &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn projection_grad_f32() {
        // small shapes keep the f32 finite-difference noise floor (which
        // grows with the number of accumulated terms) under the tolerance
        use crate::tensor::Tensor as T;
        let mut r = rng(6);
        let h = T::<f32>::rand_uniform(&[1, 2, 3], 0.5, 1.5, &mut r);
        let w = T::<f32>::rand_uniform(&[3, 3], 0.5, 1.5, &mut r);
        let b = T::<f32>::rand_uniform(&[3], 0.5, 1.5, &mut r);
        let s = T::<f32>::full(&[1, 2, 3], 1.0);
        let f = move |inp: &[T<f32>]| {
            project_states(&inp[0], &inp[1], &inp[2])?.weighted_sum(&s)
        };
        let report = grad_check(&f, &[h, w, b], 1e-3, 0.0, None, 0).unwrap();
        assert!(report.pass, "max_rel_err={}", report.max_rel_err);
    }
}
