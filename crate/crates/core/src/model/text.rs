use super::layers::{attention, key_padding_bias, layer_norm, mlp, valid_from_lengths};
use super::{SeqVar, TokenBatch};
use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::Bound;

/// Token embeddings plus positions, then pre-norm self-attention blocks.
/// Padded slots never act as keys.
pub fn encode_text_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
) -> Result<SeqVar> {
    tokens.check(cfg, true)?;
    let (b, t) = tokens.ids.dim();
    let d = cfg.embed_dim;
    let flat: Vec<usize> = tokens.ids.iter().copied().collect();
    let emb = g.select_rows(p.get("text.tok"), &flat);
    let emb = g.reshape(emb, &[b, t, d]);
    let pos = g.narrow(p.get("text.pos"), 0, 0, t);
    let mut x = g.add(emb, pos);

    let valid = valid_from_lengths(&tokens.lengths, t);
    let bias = key_padding_bias(g, cfg.heads, &valid);
    for l in 0..cfg.text_layers {
        let pre = format!("text.blocks.{l}");
        let xn = layer_norm(g, p, &format!("{pre}.ln1"), x);
        let a = attention(g, p, &format!("{pre}.attn"), xn, xn, cfg.heads, bias);
        x = g.add(x, a);
        let h = layer_norm(g, p, &format!("{pre}.ln2"), x);
        let h = mlp(g, p, &format!("{pre}.mlp"), h);
        x = g.add(x, h);
    }
    let x = layer_norm(g, p, "text.ln_f", x);
    Ok(SeqVar {
        var: x,
        lengths: tokens.lengths.clone(),
    })
}
