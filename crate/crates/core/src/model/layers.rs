//! Transformer building blocks expressed on the autodiff graph.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Graph, Var};
use crate::params::{Bound, Initializer};
use rand::Rng;

/// `x @ W + b` over the last axis of an arbitrary-rank input.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.get(&format!("{prefix}.w"));
    let b = p.get(&format!("{prefix}.b"));
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().unwrap();
    let fan_out = g.shape(w)[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, fan_in]);
    let y = g.matmul(flat, w);
    let y = g.add(y, b);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    g.reshape(y, &out_shape)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let gain = p.get(&format!("{prefix}.g"));
    let bias = p.get(&format!("{prefix}.b"));
    let n = g.layer_norm(x);
    let y = g.mul(n, gain);
    g.add(y, bias)
}

pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(g, p, &format!("{prefix}.fc1"), x);
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Multi-head attention: queries from `q_in` `(B, Tq, D)`, keys and values
/// from `kv_in` `(B, Tk, D)`. `bias` is added to the `(B*H, Tq|1, Tk)` score
/// grid before the softmax; `-inf` entries exclude a key exactly.
pub fn attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    bias: Option<Var>,
) -> Var {
    let (b, tq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let tk = g.shape(kv_in)[1];
    let dh = d / heads;

    let q = linear(g, p, &format!("{prefix}.q"), q_in);
    let k = linear(g, p, &format!("{prefix}.k"), kv_in);
    let v = linear(g, p, &format!("{prefix}.v"), kv_in);
    let split = |g: &mut Graph, t: Var, len: usize| {
        let t = g.reshape(t, &[b, len, heads, dh]);
        let t = g.permute(t, &[0, 2, 1, 3]);
        g.reshape(t, &[b * heads, len, dh])
    };
    let q = split(g, q, tq);
    let k = split(g, k, tk);
    let v = split(g, v, tk);

    let scores = g.batch_matmul(q, k, true);
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(bias) = bias {
        scores = g.add(scores, bias);
    }
    let probs = g.softmax(scores);
    let ctx = g.batch_matmul(probs, v, false);
    let ctx = g.reshape(ctx, &[b, heads, tq, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[b, tq, d]);
    linear(g, p, &format!("{prefix}.o"), ctx)
}

/// Additive key mask of shape `(B*H, 1, Tk)`; `None` when every key is valid.
pub fn key_padding_bias(g: &mut Graph, heads: usize, key_valid: &[Vec<bool>]) -> Option<Var> {
    if key_valid.iter().all(|row| row.iter().all(|&v| v)) {
        return None;
    }
    let b = key_valid.len();
    let tk = key_valid[0].len();
    let mut bias = ArrayD::zeros(IxDyn(&[b * heads, 1, tk]));
    for (bi, row) in key_valid.iter().enumerate() {
        for h in 0..heads {
            for (j, &valid) in row.iter().enumerate() {
                if !valid {
                    bias[[bi * heads + h, 0, j]] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Some(g.constant(bias))
}

/// Causal mask combined with key padding, shape `(B*H, T, T)`.
pub fn causal_bias(g: &mut Graph, heads: usize, t: usize, lengths: &[usize]) -> Var {
    let b = lengths.len();
    let mut bias = ArrayD::zeros(IxDyn(&[b * heads, t, t]));
    for (bi, &len) in lengths.iter().enumerate() {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    if j > i || j >= len {
                        bias[[bi * heads + h, i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    g.constant(bias)
}

/// Validity mask from per-row lengths.
pub fn valid_from_lengths(lengths: &[usize], width: usize) -> Vec<Vec<bool>> {
    lengths
        .iter()
        .map(|&len| (0..width).map(|j| j < len).collect())
        .collect()
}

pub fn init_attention<R: Rng>(init: &mut Initializer<'_, R>, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{part}"), d, d);
    }
}

pub fn init_mlp<R: Rng>(init: &mut Initializer<'_, R>, prefix: &str, d: usize, hidden: usize) {
    init.linear(&format!("{prefix}.fc1"), d, hidden);
    init.linear(&format!("{prefix}.fc2"), hidden, d);
}
