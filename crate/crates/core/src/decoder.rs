//! Particle-token decoder over super tokens and the residual prediction head.

use crate::attention::{cross_attention, ffn, self_attention, TokenSet};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{linear, norm, ModelConfig};

pub use crate::model::{count_params, head_param_count, ParamCounts, FULL_SCALE_HEAD_WIDTHS};

/// Cross-attention to the super tokens, self-attention, then feed-forward, per layer.
pub fn decode(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    particles: TokenSet,
    supers: &TokenSet,
) -> Result<TokenSet> {
    if supers.is_empty() {
        return Err(Error::invalid("decode", "no super tokens"));
    }
    let mut x = particles;
    for l in 0..cfg.decoder_layers {
        x = cross_attention(g, s, &format!("decoder.layer{l}.cross"), cfg, &x, supers)?;
        x = self_attention(g, s, &format!("decoder.layer{l}.self"), cfg, &x)?;
        x.tokens = ffn(g, s, &format!("decoder.layer{l}.ffn"), x.tokens)?;
    }
    Ok(x)
}

/// Per-particle MLP to `(dx, dv)`, each `N x 3`.
pub fn predict_head(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    tokens: Var,
) -> Result<(Var, Var)> {
    let layers = cfg.head_widths().len() - 1;
    let mut h = tokens;
    for l in 0..layers {
        h = linear(g, s, &format!("head.layer{l}"), h)?;
        if l + 1 < layers {
            h = g.relu(h);
            h = norm(g, s, &format!("head.layer{l}.norm"), h)?;
        }
    }
    let dx = g.slice_cols(h, 0, 3)?;
    let dv = g.slice_cols(h, 3, 3)?;
    Ok((dx, dv))
}
