//! Super-token encoder: self-attention followed by exact-halving merges.

use rayon::prelude::*;

use crate::attention::{self_attention, TokenSet};
use crate::autodiff::{dot, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{residual_mlp, ModelConfig};

/// Output token `i` collects `groups[i]`; the first entry is the destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
}

impl MergePlan {
    pub fn output_count(&self) -> usize {
        self.groups.len()
    }

    pub fn input_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Output index of every input token.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.input_count()];
        for (i, g) in self.groups.iter().enumerate() {
            for &j in g {
                out[j] = i;
            }
        }
        out
    }
}

/// Cosine similarity with zero vectors ranked below every real match.
fn similarity(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        f64::NEG_INFINITY
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Pairs each odd-index token with the most similar still-unmatched
/// even-index token, visiting odd tokens in ascending order.
pub fn plan_merge(tokens: &Tensor) -> MergePlan {
    let m = tokens.rows();
    let a: Vec<usize> = (0..m).step_by(2).collect();
    let b: Vec<usize> = (1..m).step_by(2).collect();
    let norms: Vec<f64> = (0..m)
        .map(|i| dot(tokens.row(i), tokens.row(i)).sqrt())
        .collect();
    let table: Vec<Vec<f64>> = b
        .par_iter()
        .map(|&j| {
            a.iter()
                .map(|&i| similarity(tokens.row(j), norms[j], tokens.row(i), norms[i]))
                .collect()
        })
        .collect();
    let mut groups: Vec<Vec<usize>> = a.iter().map(|&i| vec![i]).collect();
    let mut taken = vec![false; a.len()];
    for (bi, &j) in b.iter().enumerate() {
        let mut best: Option<usize> = None;
        for ai in 0..a.len() {
            if taken[ai] {
                continue;
            }
            if best.is_none_or(|k| table[bi][ai] > table[bi][k]) {
                best = Some(ai);
            }
        }
        // |A| >= |B| so an unmatched destination always remains.
        let ai = best.expect("unmatched destination");
        taken[ai] = true;
        groups[ai].push(j);
    }
    MergePlan { groups }
}

/// Multiplicity-weighted averages of tokens and anchors, before the merge MLP.
pub fn merge_average(g: &mut Graph, tokens: &TokenSet, plan: &MergePlan) -> Result<TokenSet> {
    if plan.input_count() != tokens.len() {
        return Err(Error::shape(
            "merge",
            format!(
                "plan covers {} tokens, set has {}",
                plan.input_count(),
                tokens.len()
            ),
        ));
    }
    let assign = plan.assignment();
    let out_mult: Vec<f64> = plan
        .groups
        .iter()
        .map(|grp| grp.iter().map(|&j| tokens.multiplicities[j]).sum())
        .collect();
    let weights: Vec<f64> = (0..tokens.len())
        .map(|j| tokens.multiplicities[j] / out_mult[assign[j]])
        .collect();
    let n_out = plan.output_count();
    let h = g.row_scale(tokens.tokens, &weights)?;
    let h = g.segment_sum(h, &assign, n_out)?;
    let x = g.row_scale(tokens.anchors, &weights)?;
    let x = g.segment_sum(x, &assign, n_out)?;
    Ok(TokenSet {
        tokens: h,
        anchors: x,
        multiplicities: out_mult,
    })
}

/// Weighted merge followed by the residual merge MLP on token features only.
pub fn merge(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    tokens: &TokenSet,
    plan: &MergePlan,
) -> Result<TokenSet> {
    let avg = merge_average(g, tokens, plan)?;
    let h = residual_mlp(g, s, prefix, avg.tokens)?;
    Ok(TokenSet { tokens: h, ..avg })
}

/// Alternates self-attention and merging; returns the super tokens and the
/// token count after each level.
pub fn encode(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    level0: TokenSet,
) -> Result<(TokenSet, Vec<usize>)> {
    if level0.is_empty() {
        return Err(Error::shape("encode", "no tokens"));
    }
    let mut cur = level0;
    let mut sizes = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let attended = self_attention(g, s, &format!("encoder.layer{l}.attn"), cfg, &cur)?;
        let plan = plan_merge(g.value(attended.tokens));
        cur = merge(
            g,
            s,
            &format!("encoder.layer{l}.merge_mlp"),
            &attended,
            &plan,
        )?;
        sizes.push(cur.len());
    }
    Ok((cur, sizes))
}
