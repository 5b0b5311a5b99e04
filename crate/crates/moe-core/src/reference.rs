//! Literal reference evaluators.
//!
//! Everything here is written as plain scalar loops straight off the layer
//! definitions, deliberately sharing no code with the vectorized forward
//! path. These are the evaluators that pin golden fixtures and back the
//! equivalence tests.

use crate::affinity::GateParams;
use crate::error::{Error, Result};
use crate::moe::ExpertBank;
use crate::numeric::gelu;
use crate::rng::Rng;
use crate::tensor::{top_k_indices, Tensor};

/// One expert applied to one feature vector, all in scalar loops.
fn expert_loops(bank: &ExpertBank, r: usize, input: &[f64]) -> Vec<f64> {
    let d = bank.input_dim;
    let h = bank.hidden_dim;
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut acc = bank.b1[r].data()[j];
        for i in 0..d {
            acc += input[i] * bank.w1[r].at2(i, j);
        }
        hidden[j] = gelu(acc);
    }
    let mut out = vec![0.0; d];
    for j in 0..d {
        let mut acc = bank.b2[r].data()[j];
        for i in 0..h {
            acc += hidden[i] * bank.w2[r].at2(i, j);
        }
        out[j] = acc;
    }
    out
}

/// Quadruple-loop evaluation of the batched layer:
/// `Y[t,:] = sum_r sum_c combine[t,r,c] * MLP_r(X^T dispatch[:,r,c])`.
pub fn moe_forward_loops(
    x: &Tensor,
    bank: &ExpertBank,
    dispatch: &Tensor,
    combine: &Tensor,
) -> Result<Tensor> {
    if dispatch.shape() != combine.shape() || dispatch.shape().len() != 3 {
        return Err(Error::invalid("loop oracle: bad routing tensor shapes"));
    }
    let (tokens, experts, capacity) = (
        dispatch.shape()[0],
        dispatch.shape()[1],
        dispatch.shape()[2],
    );
    let d = bank.input_dim;
    let mut y = Tensor::zeros(&[tokens, d]);
    for t in 0..tokens {
        for r in 0..experts {
            for c in 0..capacity {
                let weight = combine.at3(t, r, c);
                if weight == 0.0 {
                    continue;
                }
                let mut slot_input = vec![0.0; d];
                for tp in 0..tokens {
                    let gate = dispatch.at3(tp, r, c);
                    if gate != 0.0 {
                        for i in 0..d {
                            slot_input[i] += x.at2(tp, i) * gate;
                        }
                    }
                }
                let out = expert_loops(bank, r, &slot_input);
                for i in 0..d {
                    let cur = y.at2(t, i);
                    y.set2(t, i, cur + weight * out[i]);
                }
            }
        }
    }
    y.check_finite("moe_forward_loops")?;
    Ok(y)
}

/// Dense single-token gate: softmax over all experts, keep the `k` largest
/// weights (no renormalization), evaluate every kept expert on the raw
/// token. Oracle only; capacity never enters.
pub fn dense_reference_forward(
    x: &Tensor,
    bank: &ExpertBank,
    gate: &GateParams,
    k: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if x.shape().len() != 1 || x.shape()[0] != bank.input_dim {
        return Err(Error::invalid("dense reference: token must be a [features] vector"));
    }
    let experts = bank.experts();
    if k > experts {
        return Err(Error::invalid("dense reference: k cannot exceed expert count"));
    }
    let d = bank.input_dim;
    let mut logits = vec![0.0; experts];
    for r in 0..experts {
        let mut acc = 0.0;
        for i in 0..d {
            acc += x.data()[i] * gate.weights.at2(i, r);
        }
        logits[r] = acc;
    }
    if gate.noise_stddev > 0.0 {
        let eps = rng.normal_tensor(&[experts], gate.noise_stddev)?;
        for r in 0..experts {
            logits[r] += eps.data()[r];
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= z;
    }
    let kept = top_k_indices(&weights, k);

    let mut y = vec![0.0; d];
    for &r in &kept {
        let out = expert_loops(bank, r, x.data());
        for i in 0..d {
            y[i] += weights[r] * out[i];
        }
    }
    Tensor::new(vec![d], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mixture_when_k_equals_expert_count() {
        let mut rng = Rng::new(3);
        let bank = ExpertBank::init(3, 4, 2, &mut rng).unwrap();
        let gate = GateParams::init(3, 2, 1.0, &mut rng).unwrap();
        let x = rng.normal_tensor(&[3], 1.0).unwrap();
        let y = dense_reference_forward(&x, &bank, &gate, 2, &mut rng).unwrap();
        // hand mixture of both experts
        let mut logits = [0.0; 2];
        for r in 0..2 {
            for i in 0..3 {
                logits[r] += x.data()[i] * gate.weights.at2(i, r);
            }
        }
        let z = logits[0].exp() + logits[1].exp();
        let mut want = vec![0.0; 3];
        for r in 0..2 {
            let w = logits[r].exp() / z;
            let out = expert_loops(&bank, r, x.data());
            for i in 0..3 {
                want[i] += w * out[i];
            }
        }
        for i in 0..3 {
            assert!((y.data()[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn strongly_gated_expert_dominates() {
        let mut rng = Rng::new(4);
        let bank = ExpertBank::init(2, 3, 2, &mut rng).unwrap();
        // gate strongly favors expert 0 for positive first feature
        let w = Tensor::from_rows(&[vec![8.0, -8.0], vec![0.0, 0.0]]).unwrap();
        let gate = GateParams::new(w, 0.0).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let y = dense_reference_forward(&x, &bank, &gate, 1, &mut rng).unwrap();
        let weight0 = {
            let l0: f64 = 8.0;
            let l1: f64 = -8.0;
            let m = l0.max(l1);
            (l0 - m).exp() / ((l0 - m).exp() + (l1 - m).exp())
        };
        let out0 = expert_loops(&bank, 0, x.data());
        for i in 0..2 {
            assert!((y.data()[i] - weight0 * out0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn k_too_large_is_error() {
        let mut rng = Rng::new(5);
        let bank = ExpertBank::init(2, 3, 2, &mut rng).unwrap();
        let gate = GateParams::init(2, 2, 1.0, &mut rng).unwrap();
        let x = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        assert!(dense_reference_forward(&x, &bank, &gate, 3, &mut rng).is_err());
    }
}
