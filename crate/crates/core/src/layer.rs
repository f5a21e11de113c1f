//! The BASE layer position-wise computation.
//!
//! For token `h` assigned to expert `e`:
//!
//! ```text
//! out = σ(h · w_e) · f_e(h) + h
//! ```
//!
//! where `σ` is the logistic function. The expert is a stack of residual
//! feedforward blocks `x ← x + W_down · relu(W_up · LN(x) + b_up) + b_down`;
//! `f_e(h)` is the sum of the block branches, i.e. the stack output minus its
//! input, so an all-zero expert contributes nothing and the layer reduces to
//! the identity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    dot, Assignment, ExpertNetwork, ExpertSet, FeedForwardBlock, Matrix, TokenBatch,
};

/// Added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutput {
    pub outputs: Matrix,
    pub gate_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub d_inputs: Matrix,
    pub d_embeddings: Matrix,
    pub d_networks: Vec<ExpertNetwork>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

struct BlockCache {
    xhat: Vec<f64>,
    inv_std: f64,
    normed: Vec<f64>,
    pre_relu: Vec<f64>,
    hidden: Vec<f64>,
}

/// Returns the residual branch `W_down · relu(W_up · LN(x) + b_up) + b_down`.
fn block_forward(block: &FeedForwardBlock, x: &[f64]) -> (Vec<f64>, BlockCache) {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let normed: Vec<f64> = xhat
        .iter()
        .zip(block.ln_gain.iter().zip(&block.ln_bias))
        .map(|(xh, (g, b))| g * xh + b)
        .collect();

    let mut pre_relu = block.up_bias.clone();
    for (i, n) in normed.iter().enumerate() {
        for (z, w) in pre_relu.iter_mut().zip(block.up.row(i)) {
            *z += n * w;
        }
    }
    let hidden: Vec<f64> = pre_relu.iter().map(|z| z.max(0.0)).collect();

    let mut branch = block.down_bias.clone();
    for (j, r) in hidden.iter().enumerate() {
        if *r != 0.0 {
            for (o, w) in branch.iter_mut().zip(block.down.row(j)) {
                *o += r * w;
            }
        }
    }
    (
        branch,
        BlockCache {
            xhat,
            inv_std,
            normed,
            pre_relu,
            hidden,
        },
    )
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
fn block_backward(
    block: &FeedForwardBlock,
    cache: &BlockCache,
    d_out: &[f64],
    grad: &mut FeedForwardBlock,
) -> Vec<f64> {
    let d = d_out.len();
    for (g, dy) in grad.down_bias.iter_mut().zip(d_out) {
        *g += dy;
    }
    let mut d_pre = vec![0.0; cache.hidden.len()];
    for (j, r) in cache.hidden.iter().enumerate() {
        let w = block.down.row(j);
        for (g, dy) in grad.down.row_mut(j).iter_mut().zip(d_out) {
            *g += r * dy;
        }
        if cache.pre_relu[j] > 0.0 {
            d_pre[j] = dot(w, d_out);
        }
    }
    for (g, dz) in grad.up_bias.iter_mut().zip(&d_pre) {
        *g += dz;
    }
    let mut d_normed = vec![0.0; d];
    for (i, n) in cache.normed.iter().enumerate() {
        for (g, dz) in grad.up.row_mut(i).iter_mut().zip(&d_pre) {
            *g += n * dz;
        }
        d_normed[i] = dot(block.up.row(i), &d_pre);
    }
    let mut d_xhat = vec![0.0; d];
    for i in 0..d {
        grad.ln_gain[i] += d_normed[i] * cache.xhat[i];
        grad.ln_bias[i] += d_normed[i];
        d_xhat[i] = d_normed[i] * block.ln_gain[i];
    }
    let mean_d = d_xhat.iter().sum::<f64>() / d as f64;
    let mean_dx = dot(&d_xhat, &cache.xhat) / d as f64;
    (0..d)
        .map(|i| d_out[i] + cache.inv_std * (d_xhat[i] - mean_d - cache.xhat[i] * mean_dx))
        .collect()
}

/// Embedding gradient, network gradient and `(token, input gradient)` rows of one expert.
type ExpertGrads = (Vec<f64>, ExpertNetwork, Vec<(usize, Vec<f64>)>);

struct StackPass {
    output: Vec<f64>,
    branch_sum: Vec<f64>,
    caches: Vec<BlockCache>,
}

fn network_forward(net: &ExpertNetwork, h: &[f64]) -> StackPass {
    let mut x = h.to_vec();
    let mut branch_sum = vec![0.0; h.len()];
    let mut caches = Vec::with_capacity(net.blocks.len());
    for b in &net.blocks {
        let (branch, cache) = block_forward(b, &x);
        for ((xi, si), bi) in x.iter_mut().zip(&mut branch_sum).zip(&branch) {
            *xi += bi;
            *si += bi;
        }
        caches.push(cache);
    }
    StackPass {
        output: x,
        branch_sum,
        caches,
    }
}

/// Applies the expert's block stack to `h`, residual connections included.
pub fn expert_forward(net: &ExpertNetwork, h: &[f64]) -> Vec<f64> {
    network_forward(net, h).output
}

/// `f_e(h)`: the stack output minus `h`, accumulated branch by branch.
pub fn expert_transform(net: &ExpertNetwork, h: &[f64]) -> Vec<f64> {
    network_forward(net, h).branch_sum
}

/// Backpropagates `d_out` through [`expert_transform`] at input `h`.
/// Returns the input gradient and adds parameter gradients into `grad`.
pub fn expert_backward(
    net: &ExpertNetwork,
    h: &[f64],
    d_out: &[f64],
    grad: &mut ExpertNetwork,
) -> Vec<f64> {
    let pass = network_forward(net, h);
    // The stack is x_{k+1} = x_k + branch_k(x_k) and the transform is x_K - x_0,
    // so every x_k receives d_out from the stack and the x_0 identity term drops out.
    let mut d_x = d_out.to_vec();
    for ((block, cache), g) in net
        .blocks
        .iter()
        .zip(&pass.caches)
        .zip(&mut grad.blocks)
        .rev()
    {
        d_x = block_backward(block, cache, &d_x, g);
    }
    d_x.iter().zip(d_out).map(|(a, b)| a - b).collect()
}

fn check_inputs(tokens: &TokenBatch, experts: &ExpertSet, assignment: &Assignment) -> Result<()> {
    if tokens.dim() != experts.dim() {
        return Err(Error::DimensionMismatch {
            context: "token features vs expert embeddings",
            expected: experts.dim(),
            found: tokens.dim(),
        });
    }
    if assignment.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            context: "assignment length",
            expected: tokens.len(),
            found: assignment.len(),
        });
    }
    if let Some(&e) = assignment
        .expert_of()
        .iter()
        .find(|&&e| e >= experts.num_experts())
    {
        return Err(Error::ExpertOutOfRange {
            index: e,
            experts: experts.num_experts(),
        });
    }
    Ok(())
}

/// `out_t = σ(h_t · w_{a_t}) f_{a_t}(h_t) + h_t` for every token.
pub fn base_forward(
    tokens: &TokenBatch,
    experts: &ExpertSet,
    assignment: &Assignment,
) -> Result<LayerOutput> {
    check_inputs(tokens, experts, assignment)?;
    let rows: Vec<(Vec<f64>, f64)> = (0..tokens.len())
        .into_par_iter()
        .map(|t| {
            let h = tokens.features().row(t);
            let e = assignment.expert_of()[t];
            let gate = sigmoid(dot(h, experts.embedding(e)));
            let f = expert_transform(experts.network(e), h);
            let out = h.iter().zip(&f).map(|(x, y)| gate * y + x).collect();
            (out, gate)
        })
        .collect();
    let (outs, gate_values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let outputs = Matrix::new(tokens.len(), tokens.dim(), outs.concat())?;
    Ok(LayerOutput {
        outputs,
        gate_values,
    })
}

/// Gradients of `Σ_t upstream_t · out_t` with respect to the token features,
/// the expert embeddings, and every expert network parameter.
pub fn base_backward(
    tokens: &TokenBatch,
    experts: &ExpertSet,
    assignment: &Assignment,
    upstream: &Matrix,
) -> Result<LayerGradients> {
    check_inputs(tokens, experts, assignment)?;
    if upstream.rows() != tokens.len() || upstream.cols() != tokens.dim() {
        return Err(Error::DimensionMismatch {
            context: "upstream gradient size",
            expected: tokens.len() * tokens.dim(),
            found: upstream.rows() * upstream.cols(),
        });
    }
    let (d, e_count) = (tokens.dim(), experts.num_experts());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); e_count];
    for (t, &e) in assignment.expert_of().iter().enumerate() {
        members[e].push(t);
    }

    // Each expert owns its parameter gradients and the input rows of its tokens.
    let per_expert: Vec<ExpertGrads> = members
        .par_iter()
        .enumerate()
        .map(|(e, toks)| {
            let w = experts.embedding(e);
            let net = experts.network(e);
            let mut d_w = vec![0.0; d];
            let mut d_net = net.zeroed_like();
            let mut d_rows = Vec::with_capacity(toks.len());
            for &t in toks {
                let h = tokens.features().row(t);
                let u = upstream.row(t);
                let gate = sigmoid(dot(h, w));
                let f = expert_transform(net, h);
                let d_score = gate * (1.0 - gate) * dot(u, &f);
                let d_f: Vec<f64> = u.iter().map(|x| gate * x).collect();
                let d_h_net = expert_backward(net, h, &d_f, &mut d_net);
                for (g, x) in d_w.iter_mut().zip(h) {
                    *g += d_score * x;
                }
                let d_h = (0..d).map(|k| u[k] + d_score * w[k] + d_h_net[k]).collect();
                d_rows.push((t, d_h));
            }
            (d_w, d_net, d_rows)
        })
        .collect();

    let mut d_inputs = Matrix::zeros(tokens.len(), d);
    let mut d_embeddings = Matrix::zeros(e_count, d);
    let mut d_networks = Vec::with_capacity(e_count);
    for (e, (d_w, d_net, d_rows)) in per_expert.into_iter().enumerate() {
        d_embeddings.row_mut(e).copy_from_slice(&d_w);
        d_networks.push(d_net);
        for (t, row) in d_rows {
            d_inputs.row_mut(t).copy_from_slice(&row);
        }
    }
    Ok(LayerGradients {
        d_inputs,
        d_embeddings,
        d_networks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::types::Origin;

    fn tokens(rows: &[Vec<f64>]) -> TokenBatch {
        TokenBatch::from_features(Matrix::from_rows(rows).unwrap(), 0).unwrap()
    }

    /// D = 2, hidden = 8, only a few nonzero weights.
    fn hand_block() -> FeedForwardBlock {
        let mut b = FeedForwardBlock::zeros(2);
        b.ln_gain = vec![2.0, 0.5];
        b.ln_bias = vec![0.1, -0.2];
        b.up.set(0, 0, 1.0);
        b.up.set(1, 0, 0.5);
        b.up.set(0, 1, -1.0);
        b.up.set(1, 2, 3.0);
        b.up_bias[1] = 0.25;
        b.down.set(0, 0, 0.3);
        b.down.set(0, 1, -0.1);
        b.down.set(1, 1, 0.2);
        b.down.set(2, 0, 0.05);
        b.down_bias = vec![0.01, 0.02];
        b
    }

    #[test]
    fn zero_blocks_are_identity() {
        let h = [0.3, -1.2, 4.0];
        assert_eq!(expert_forward(&ExpertNetwork::zeros(3, 1), &h), h.to_vec());
        assert_eq!(expert_forward(&ExpertNetwork::zeros(3, 2), &h), h.to_vec());
    }

    #[test]
    fn hand_traced_block() {
        // x = [1, 3]: mean 2, variance 1, inv_std = 1/sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        // xhat = [-s, s]; LN = [2(-s) + 0.1, 0.5 s - 0.2]
        let n0 = -2.0 * s + 0.1;
        let n1 = 0.5 * s - 0.2;
        // z0 = n0 + 0.5 n1, z1 = -n0 + 0.25, z2 = 3 n1
        let z0 = n0 + 0.5 * n1;
        let z1 = -n0 + 0.25;
        let z2 = 3.0 * n1;
        let (r0, r1, r2) = (z0.max(0.0), z1.max(0.0), z2.max(0.0));
        assert_eq!(r0, 0.0);
        assert!(r1 > 0.0 && r2 > 0.0);
        let y0 = 0.3 * r0 + 0.05 * r2 + 0.01;
        let y1 = -0.1 * r0 + 0.2 * r1 + 0.02;
        let expected = [1.0 + y0, 3.0 + y1];
        let net = ExpertNetwork {
            blocks: vec![hand_block()],
        };
        let got = expert_forward(&net, &[1.0, 3.0]);
        for k in 0..2 {
            assert!(
                (got[k] - expected[k]).abs() < 1e-15,
                "{got:?} vs {expected:?}"
            );
        }
        // evaluated independently in Python
        assert!(
            (got[0] - 1.054_999_625_002_812_4).abs() < 1e-12,
            "{}",
            got[0]
        );
        assert!((got[1] - 3.449_998_000_015).abs() < 1e-12, "{}", got[1]);
    }

    #[test]
    fn transform_is_stack_minus_input() {
        let set = ExpertSet::init(12, 1, 4, 2).unwrap();
        let h = [0.5, -0.25, 2.0, 1.0];
        let full = expert_forward(set.network(0), &h);
        let f = expert_transform(set.network(0), &h);
        assert!(f.iter().any(|&v| v != 0.0));
        for k in 0..4 {
            assert!((full[k] - h[k] - f[k]).abs() < 1e-15);
        }
        assert_eq!(
            expert_transform(&ExpertNetwork::zeros(4, 3), &h),
            vec![0.0; 4]
        );
    }

    #[test]
    fn zero_networks_reduce_to_residual() {
        let set = ExpertSet::init(3, 2, 3, 1).unwrap().with_zero_networks();
        let batch = tokens(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let a = Assignment::greedy(vec![1, 0], 2).unwrap();
        let out = base_forward(&batch, &set, &a).unwrap();
        assert_eq!(&out.outputs, batch.features());
        for t in 0..2 {
            let s = dot(batch.features().row(t), set.embedding(a.expert_of()[t]));
            assert_eq!(out.gate_values[t], sigmoid(s));
        }
    }

    #[test]
    fn orthogonal_embedding_gates_at_half() {
        let emb = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let set = ExpertSet::new(
            emb,
            vec![ExpertNetwork {
                blocks: vec![hand_block()],
            }],
        )
        .unwrap();
        let out = base_forward(
            &tokens(&[vec![2.0, 2.0]]),
            &set,
            &Assignment::balanced(vec![0], 1).unwrap(),
        )
        .unwrap();
        assert_eq!(out.gate_values[0], 0.5);
    }

    #[test]
    fn single_expert_hand_evaluation() {
        let emb = Matrix::from_rows(&[vec![0.4, -0.1]]).unwrap();
        let net = ExpertNetwork {
            blocks: vec![hand_block()],
        };
        let set = ExpertSet::new(emb, vec![net.clone()]).unwrap();
        let h = [1.0, 3.0];
        let out = base_forward(
            &tokens(&[h.to_vec()]),
            &set,
            &Assignment::balanced(vec![0], 1).unwrap(),
        )
        .unwrap();
        let gate = 1.0 / (1.0 + (-(0.4 * 1.0 - 0.1 * 3.0f64)).exp());
        let f = expert_transform(&net, &h);
        for k in 0..2 {
            let expected = gate * f[k] + h[k];
            assert!((out.outputs.get(0, k) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let set = ExpertSet::init(0, 2, 2, 1).unwrap();
        let batch = tokens(&[vec![1.0, 2.0]]);
        let wide = Assignment::greedy(vec![3], 4).unwrap();
        assert!(matches!(
            base_forward(&batch, &set, &wide),
            Err(Error::ExpertOutOfRange { index: 3, .. })
        ));
        let short = Assignment::greedy(vec![0, 0], 2).unwrap();
        assert!(base_forward(&batch, &set, &short).is_err());
        let a = Assignment::greedy(vec![0], 2).unwrap();
        assert!(base_backward(&batch, &set, &a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let set = ExpertSet::init(1, 2, 3, 2).unwrap();
        let batch = tokens(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 0.5]]);
        let a = Assignment::balanced(vec![1, 0], 2).unwrap();
        let g = base_backward(&batch, &set, &a, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.d_inputs.data().iter().all(|&v| v == 0.0));
        assert!(g.d_embeddings.data().iter().all(|&v| v == 0.0));
        assert!(g.d_networks.iter().all(|n| n.params().all(|v| v == 0.0)));
    }

    #[test]
    fn zero_networks_pass_upstream_through() {
        let set = ExpertSet::init(2, 2, 3, 1).unwrap().with_zero_networks();
        let batch = tokens(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 0.5]]);
        let a = Assignment::balanced(vec![0, 1], 2).unwrap();
        let u = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 1.0]]).unwrap();
        let g = base_backward(&batch, &set, &a, &u).unwrap();
        assert_eq!(g.d_inputs, u);
        assert!(g.d_embeddings.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unassigned_experts_get_zero_gradients() {
        let set = ExpertSet::init(4, 3, 2, 1).unwrap();
        let batch = tokens(&[vec![1.0, 2.0], vec![0.3, -1.0]]);
        let a = Assignment::greedy(vec![2, 2], 3).unwrap();
        let u = Matrix::from_rows(&[vec![1.0, 1.0], vec![-2.0, 0.5]]).unwrap();
        let g = base_backward(&batch, &set, &a, &u).unwrap();
        for e in 0..2 {
            assert!(g.d_embeddings.row(e).iter().all(|&v| v == 0.0));
            assert!(g.d_networks[e].params().all(|v| v == 0.0));
        }
        assert!(g.d_embeddings.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn output_depends_on_assignment_not_mode() {
        let set = ExpertSet::init(8, 2, 3, 1).unwrap();
        let batch = tokens(&[vec![1.0, 0.0, 2.0], vec![0.5, 0.5, -1.0]]);
        let b = Assignment::balanced(vec![1, 0], 2).unwrap();
        let g = Assignment::greedy(vec![1, 0], 2).unwrap();
        assert_eq!(
            base_forward(&batch, &set, &b).unwrap(),
            base_forward(&batch, &set, &g).unwrap()
        );
    }

    #[test]
    fn specialization_direction() {
        // With f_e frozen, moving w_e along h changes the loss Σ u·out at a
        // rate σ'(s) (u·f) |h|², so the sign follows u·f.
        let set = ExpertSet::init(6, 1, 4, 1).unwrap();
        let mut r = rng::seeded_rng(99);
        let h = rng::normal_vec(&mut r, 4, 1.0);
        let f = expert_transform(set.network(0), &h);
        for sign in [1.0, -1.0] {
            let u: Vec<f64> = f.iter().map(|x| sign * x).collect();
            let loss_at = |alpha: f64| {
                let w: Vec<f64> = set
                    .embedding(0)
                    .iter()
                    .zip(&h)
                    .map(|(w, x)| w + alpha * x)
                    .collect();
                let gate = sigmoid(dot(&h, &w));
                (0..4).map(|k| u[k] * (gate * f[k] + h[k])).sum::<f64>()
            };
            let step = 1e-5;
            let fd = (loss_at(step) - loss_at(-step)) / (2.0 * step);
            assert_eq!(fd.signum(), dot(&u, &f).signum());

            let batch = TokenBatch::new(
                Matrix::new(1, 4, h.clone()).unwrap(),
                vec![0],
                vec![Origin {
                    worker: 0,
                    position: 0,
                }],
            )
            .unwrap();
            let a = Assignment::balanced(vec![0], 1).unwrap();
            let g =
                base_backward(&batch, &set, &a, &Matrix::new(1, 4, u.clone()).unwrap()).unwrap();
            let analytic = dot(g.d_embeddings.row(0), &h);
            assert!((analytic - fd).abs() <= 1e-6 * fd.abs().max(1e-8));
        }
    }
}
