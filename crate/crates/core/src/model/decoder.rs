use super::layers::{attention, causal_bias, key_padding_bias, layer_norm, linear, mlp, valid_from_lengths};
use super::{FeatureSequence, SemMimModel, SeqVar, TokenBatch};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;

/// Causal transformer decoder with cross-attention to fused features.
/// Returns logits `(B, T, V)` where position `t` predicts token `t + 1`.
pub fn decode_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    fused: &SeqVar,
    input: &TokenBatch,
) -> Result<Var> {
    if input.width() == 0 || input.lengths.contains(&0) {
        return Err(Error::Input("decoder input needs at least a BOS position".into()));
    }
    input.check(cfg, false)?;
    let (b, t) = input.ids.dim();
    let fs = g.shape(fused.var).to_vec();
    if fs[0] != b {
        return Err(Error::Shape(format!("fused batch {} vs decoder batch {b}", fs[0])));
    }
    let d = cfg.embed_dim;
    let flat: Vec<usize> = input.ids.iter().copied().collect();
    let emb = g.select_rows(p.get("decoder.tok"), &flat);
    let emb = g.reshape(emb, &[b, t, d]);
    let pos = g.narrow(p.get("decoder.pos"), 0, 0, t);
    let mut x = g.add(emb, pos);

    let self_bias = causal_bias(g, cfg.heads, t, &input.lengths);
    let cross_bias = key_padding_bias(g, cfg.heads, &valid_from_lengths(&fused.lengths, fs[1]));
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.blocks.{l}");
        let xn = layer_norm(g, p, &format!("{pre}.ln1"), x);
        let a = attention(g, p, &format!("{pre}.self_attn"), xn, xn, cfg.heads, Some(self_bias));
        x = g.add(x, a);
        let xn = layer_norm(g, p, &format!("{pre}.ln2"), x);
        let c = attention(g, p, &format!("{pre}.cross_attn"), xn, fused.var, cfg.heads, cross_bias);
        x = g.add(x, c);
        let h = layer_norm(g, p, &format!("{pre}.ln3"), x);
        let h = mlp(g, p, &format!("{pre}.mlp"), h);
        x = g.add(x, h);
    }
    let x = layer_norm(g, p, "decoder.ln_f", x);
    Ok(linear(g, p, "decoder.lm_head", x))
}

/// Greedy generation of `steps` tokens per row after `bos`.
pub fn greedy_decode(
    model: &SemMimModel,
    fused: &FeatureSequence,
    bos: usize,
    steps: usize,
) -> Result<Vec<Vec<usize>>> {
    let b = fused.batch();
    let mut rows: Vec<Vec<usize>> = vec![vec![bos]; b];
    for _ in 0..steps {
        let input = TokenBatch::from_rows(&rows)?;
        let logits = model.decode(fused, &input)?;
        for (i, row) in rows.iter_mut().enumerate() {
            let last = row.len() - 1;
            let lane = logits.slice(ndarray::s![i, last, ..]);
            let mut best = 0;
            for (v, &x) in lane.iter().enumerate() {
                if x > lane[best] {
                    best = v;
                }
            }
            row.push(best);
        }
    }
    Ok(rows.into_iter().map(|r| r[1..].to_vec()).collect())
}
