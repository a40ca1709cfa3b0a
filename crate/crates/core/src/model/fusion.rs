use super::layers::{attention, key_padding_bias, layer_norm, mlp, valid_from_lengths};
use super::SeqVar;
use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, Default)]
pub struct FuseOptions {
    /// Skip the cross-attention sub-layers, leaving only the text self-path.
    pub text_only: bool,
}

/// Text slots query the image through cross-attention after each
/// self-attention sub-layer. Output keeps the text layout.
pub fn fuse_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: &SeqVar,
    text: &SeqVar,
    opts: FuseOptions,
) -> Result<SeqVar> {
    let is = g.shape(image.var).to_vec();
    let ts = g.shape(text.var).to_vec();
    if is[0] != ts[0] {
        return Err(Error::Shape(format!("image batch {} vs text batch {}", is[0], ts[0])));
    }
    if is[2] != cfg.embed_dim || ts[2] != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "feature widths {} / {} vs embed_dim {}",
            is[2], ts[2], cfg.embed_dim
        )));
    }
    let self_bias = key_padding_bias(g, cfg.heads, &valid_from_lengths(&text.lengths, ts[1]));
    let cross_bias = key_padding_bias(g, cfg.heads, &valid_from_lengths(&image.lengths, is[1]));

    let mut x = text.var;
    for l in 0..cfg.fusion_layers {
        let pre = format!("fusion.blocks.{l}");
        let xn = layer_norm(g, p, &format!("{pre}.ln1"), x);
        let a = attention(g, p, &format!("{pre}.self_attn"), xn, xn, cfg.heads, self_bias);
        x = g.add(x, a);
        if !opts.text_only {
            let xn = layer_norm(g, p, &format!("{pre}.ln2"), x);
            let c = attention(g, p, &format!("{pre}.cross_attn"), xn, image.var, cfg.heads, cross_bias);
            x = g.add(x, c);
        }
        let h = layer_norm(g, p, &format!("{pre}.ln3"), x);
        let h = mlp(g, p, &format!("{pre}.mlp"), h);
        x = g.add(x, h);
    }
    let x = layer_norm(g, p, "fusion.ln_f", x);
    Ok(SeqVar {
        var: x,
        lengths: text.lengths.clone(),
    })
}
