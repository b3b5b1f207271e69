//! Pre-norm multi-head attention with 3D rotary embeddings over continuous
//! anchor positions.

use crate::autodiff::{attention_row, Graph, ParamStore, RotarySpec, Var};
use crate::error::{Error, Result};
use crate::model::{linear, norm, ModelConfig};

/// Tokens with 3D anchors and multiplicities, living on a graph.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub anchors: Var,
    pub multiplicities: Vec<f64>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.multiplicities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicities.is_empty()
    }
}

pub fn rope3d_rotate(g: &mut Graph, x: Var, anchors: Var, spec: RotarySpec) -> Result<Var> {
    g.rotary(x, anchors, spec)
}

struct Projected {
    q: Var,
    k: Var,
    v: Var,
}

fn project(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    q_in: Var,
    kv_in: Var,
    q_anchors: Var,
    k_anchors: Var,
) -> Result<Projected> {
    let q = linear(g, s, &format!("{prefix}.wq"), q_in)?;
    let k = linear(g, s, &format!("{prefix}.wk"), kv_in)?;
    let v = linear(g, s, &format!("{prefix}.wv"), kv_in)?;
    let spec = cfg.rotary();
    let q = g.rotary(q, q_anchors, spec)?;
    let k = g.rotary(k, k_anchors, spec)?;
    Ok(Projected { q, k, v })
}

fn normalized_inputs(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    queries: &TokenSet,
    keys: Option<&TokenSet>,
) -> Result<(Var, Var)> {
    match keys {
        None => {
            let x = norm(g, s, &format!("{prefix}.norm"), queries.tokens)?;
            Ok((x, x))
        }
        Some(keys) => {
            let q = norm(g, s, &format!("{prefix}.norm_q"), queries.tokens)?;
            let kv = norm(g, s, &format!("{prefix}.norm_kv"), keys.tokens)?;
            Ok((q, kv))
        }
    }
}

fn block(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    queries: &TokenSet,
    keys: Option<&TokenSet>,
) -> Result<TokenSet> {
    if queries.is_empty() {
        return Err(Error::shape("attention", "no query tokens"));
    }
    if keys.is_some_and(TokenSet::is_empty) {
        return Err(Error::invalid("cross attention", "key set is empty"));
    }
    let kv_set = keys.unwrap_or(queries);
    let (q_in, kv_in) = normalized_inputs(g, s, prefix, queries, keys)?;
    let p = project(
        g,
        s,
        prefix,
        cfg,
        q_in,
        kv_in,
        queries.anchors,
        kv_set.anchors,
    )?;
    let mixed = g.attend(p.q, p.k, p.v, cfg.heads)?;
    let out = linear(g, s, &format!("{prefix}.wo"), mixed)?;
    let tokens = g.add(queries.tokens, out)?;
    Ok(TokenSet {
        tokens,
        anchors: queries.anchors,
        multiplicities: queries.multiplicities.clone(),
    })
}

/// `x + O * MHA(rope(Q LN x), rope(K LN x), V LN x)`.
pub fn self_attention(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    tokens: &TokenSet,
) -> Result<TokenSet> {
    block(g, s, prefix, cfg, tokens, None)
}

/// Queries attend to `keys`; queries are rotated at their own anchors and keys at theirs.
pub fn cross_attention(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    queries: &TokenSet,
    keys: &TokenSet,
) -> Result<TokenSet> {
    block(g, s, prefix, cfg, queries, Some(keys))
}

/// `x + W2 relu(W1 LN x)`.
pub fn ffn(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(g, s, &format!("{prefix}.norm"), x)?;
    let h = linear(g, s, &format!("{prefix}.fc1"), h)?;
    let h = g.relu(h);
    let h = linear(g, s, &format!("{prefix}.fc2"), h)?;
    g.add(x, h)
}

/// Row-stochastic attention weights `[head][query][key]` of one block, for inspection.
pub fn attention_weights(
    g: &mut Graph,
    s: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    queries: &TokenSet,
    keys: Option<&TokenSet>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let kv_set = keys.unwrap_or(queries);
    let (q_in, kv_in) = normalized_inputs(g, s, prefix, queries, keys)?;
    let p = project(
        g,
        s,
        prefix,
        cfg,
        q_in,
        kv_in,
        queries.anchors,
        kv_set.anchors,
    )?;
    let (qv, kv) = (g.value(p.q), g.value(p.k));
    let hd = cfg.head_dim();
    Ok((0..cfg.heads)
        .map(|h| {
            (0..qv.rows())
                .map(|i| {
                    let mut row = vec![0.0; kv.rows()];
                    attention_row(qv, kv, i, h, hd, &mut row);
                    row
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use crate::autodiff::Tensor;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            width: 16,
            heads: 2,
            rotary_dim: 6,
            spatial_radius: 0.5,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_hidden: 24,
            merge_hidden: 16,
            ..ModelConfig::default()
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::new(
            r,
            c,
            (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn token_set(g: &mut Graph, h: &Tensor, a: &Tensor) -> TokenSet {
        TokenSet {
            tokens: g.constant(h.clone()),
            anchors: g.constant(a.clone()),
            multiplicities: vec![1.0; h.rows()],
        }
    }

    /// Weights that keep every block output non-trivial.
    fn store(seed: u64) -> ParamStore {
        init_params(&cfg(), seed).unwrap()
    }

    #[test]
    fn zero_anchor_is_identity_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, 3, 16, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = g.constant(Tensor::zeros(3, 3));
        let y = rope3d_rotate(&mut g, xv, a, cfg().rotary()).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn one_scale_along_x_turns_the_first_pair_by_one_radian() {
        let spec = RotarySpec {
            heads: 1,
            head_dim: 6,
            rotary_dim: 6,
            base: 123.0,
            scale: 0.25,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(1, 6, vec![0.6, -0.8, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = g.constant(Tensor::new(1, 3, vec![0.25, 0.0, 0.0]).unwrap());
        let y = rope3d_rotate(&mut g, x, a, spec).unwrap();
        let (s, c) = 1f64.sin_cos();
        let want = [0.6 * c + 0.8 * s, 0.6 * s - 0.8 * c, 1.0, 2.0, 3.0, 4.0];
        for (got, w) in g.value(y).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn rotary_logits_depend_only_on_anchor_differences() {
        let spec = cfg().rotary();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k) = (rand_t(&mut rng, 4, 16, 1.0), rand_t(&mut rng, 5, 16, 1.0));
        let (aq, ak) = (rand_t(&mut rng, 4, 3, 1.0), rand_t(&mut rng, 5, 3, 1.0));
        let logits = |shift: f64| {
            let mut g = Graph::new();
            let sh = |t: &Tensor| {
                Tensor::new(t.rows(), 3, t.data().iter().map(|x| x + shift).collect()).unwrap()
            };
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let (av, bv) = (g.constant(sh(&aq)), g.constant(sh(&ak)));
            let qr = g.rotary(qv, av, spec).unwrap();
            let kr = g.rotary(kv, bv, spec).unwrap();
            let l = g.matmul_nt(qr, kr).unwrap();
            g.value(l).clone()
        };
        let (a, b) = (logits(0.0), logits(3.7));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let c = cfg();
        let s = store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rand_t(&mut rng, 1, 16, 1.0);
        let a = rand_t(&mut rng, 1, 3, 1.0);
        let mut g = Graph::new();
        let t = token_set(&mut g, &h, &a);
        let out = self_attention(&mut g, &s, "encoder.layer0.attn", &c, &t).unwrap();
        let ln = norm(&mut g, &s, "encoder.layer0.attn.norm", t.tokens).unwrap();
        let v = linear(&mut g, &s, "encoder.layer0.attn.wv", ln).unwrap();
        let o = linear(&mut g, &s, "encoder.layer0.attn.wo", v).unwrap();
        let want = g.add(t.tokens, o).unwrap();
        for (x, y) in g.value(out.tokens).data().iter().zip(g.value(want).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_at_same_anchor_get_identical_outputs() {
        let c = cfg();
        let s = store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = rand_t(&mut rng, 1, 16, 1.0);
        let other = rand_t(&mut rng, 1, 16, 1.0);
        let h = Tensor::new(3, 16, [row.data(), row.data(), other.data()].concat()).unwrap();
        let a = Tensor::new(3, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, -0.4, 0.0, 0.2]).unwrap();
        let mut g = Graph::new();
        let t = token_set(&mut g, &h, &a);
        let out = self_attention(&mut g, &s, "encoder.layer0.attn", &c, &t).unwrap();
        let y = g.value(out.tokens);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn self_attention_matches_explicit_logit_oracle() {
        let c = cfg();
        let s = store(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_t(&mut rng, 5, 16, 1.0);
        let a = rand_t(&mut rng, 5, 3, 1.0);
        let mut g = Graph::new();
        let t = token_set(&mut g, &h, &a);
        let out = self_attention(&mut g, &s, "encoder.layer0.attn", &c, &t).unwrap();
        // Oracle: explicit M x M logit matrix per head with plain loops.
        let ln = norm(&mut g, &s, "encoder.layer0.attn.norm", t.tokens).unwrap();
        let proj = |g: &mut Graph, w: &str| {
            let p = linear(g, &s, &format!("encoder.layer0.attn.{w}"), ln).unwrap();
            g.value(p).clone()
        };
        let (q, k, v) = (proj(&mut g, "wq"), proj(&mut g, "wk"), proj(&mut g, "wv"));
        let rotate = |x: &Tensor| -> Tensor {
            let mut y = x.clone();
            for i in 0..5 {
                for head in 0..2 {
                    for axis in 0..3 {
                        let col = head * 8 + axis * 2;
                        let theta = a.get(i, axis) / 0.5;
                        let (sn, cs) = theta.sin_cos();
                        let (x0, x1) = (x.get(i, col), x.get(i, col + 1));
                        y.data_mut()[i * 16 + col] = x0 * cs - x1 * sn;
                        y.data_mut()[i * 16 + col + 1] = x0 * sn + x1 * cs;
                    }
                }
            }
            y
        };
        let (q, k) = (rotate(&q), rotate(&k));
        let mut mixed = vec![0.0; 5 * 16];
        for head in 0..2 {
            for i in 0..5 {
                let logits: Vec<f64> = (0..5)
                    .map(|j| {
                        (0..8)
                            .map(|t| q.get(i, head * 8 + t) * k.get(j, head * 8 + t))
                            .sum::<f64>()
                            / 8f64.sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..5 {
                    for t in 0..8 {
                        mixed[i * 16 + head * 8 + t] += e[j] / z * v.get(j, head * 8 + t);
                    }
                }
            }
        }
        let wo = s.get("encoder.layer0.attn.wo.w").unwrap();
        for i in 0..5 {
            for o in 0..16 {
                let want = h.get(i, o)
                    + (0..16)
                        .map(|t| mixed[i * 16 + t] * wo.value[t * 16 + o])
                        .sum::<f64>();
                assert!((want - g.value(out.tokens).get(i, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = cfg();
        let s = store(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let qs = token_set(
            &mut g,
            &rand_t(&mut rng, 7, 16, 3.0),
            &rand_t(&mut rng, 7, 3, 2.0),
        );
        let ks = token_set(
            &mut g,
            &rand_t(&mut rng, 4, 16, 3.0),
            &rand_t(&mut rng, 4, 3, 2.0),
        );
        for keys in [None, Some(&ks)] {
            let prefix = if keys.is_some() {
                "decoder.layer0.cross"
            } else {
                "decoder.layer0.self"
            };
            let w = attention_weights(&mut g, &s, prefix, &c, &qs, keys).unwrap();
            for row in w.iter().flatten() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_attention_single_key_and_duplicates() {
        let c = cfg();
        let s = store(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hq = rand_t(&mut rng, 4, 16, 1.0);
        let aq = rand_t(&mut rng, 4, 3, 1.0);
        let hk = rand_t(&mut rng, 2, 16, 1.0);
        let ak = rand_t(&mut rng, 2, 3, 1.0);
        let p = "decoder.layer0.cross";

        let mut g = Graph::new();
        let q = token_set(&mut g, &hq, &aq);
        let one = token_set(
            &mut g,
            &Tensor::new(1, 16, hk.row(0).to_vec()).unwrap(),
            &Tensor::new(1, 3, ak.row(0).to_vec()).unwrap(),
        );
        let out = cross_attention(&mut g, &s, p, &c, &q, &one).unwrap();
        let ln = norm(&mut g, &s, &format!("{p}.norm_kv"), one.tokens).unwrap();
        let v = linear(&mut g, &s, &format!("{p}.wv"), ln).unwrap();
        let o = linear(&mut g, &s, &format!("{p}.wo"), v).unwrap();
        for i in 0..4 {
            for k in 0..16 {
                let want = hq.get(i, k) + g.value(o).get(0, k);
                assert!((want - g.value(out.tokens).get(i, k)).abs() < 1e-12);
            }
        }

        let keys = token_set(&mut g, &hk, &ak);
        let base = cross_attention(&mut g, &s, p, &c, &q, &keys).unwrap();
        let dup_h = Tensor::new(4, 16, [hk.data(), hk.data()].concat()).unwrap();
        let dup_a = Tensor::new(4, 3, [ak.data(), ak.data()].concat()).unwrap();
        let dup = token_set(&mut g, &dup_h, &dup_a);
        let doubled = cross_attention(&mut g, &s, p, &c, &q, &dup).unwrap();
        for (x, y) in g
            .value(base.tokens)
            .data()
            .iter()
            .zip(g.value(doubled.tokens).data())
        {
            assert!((x - y).abs() < 1e-6);
        }

        let empty = TokenSet {
            tokens: g.constant(Tensor::zeros(0, 16)),
            anchors: g.constant(Tensor::zeros(0, 3)),
            multiplicities: vec![],
        };
        assert!(cross_attention(&mut g, &s, p, &c, &q, &empty).is_err());
    }

    #[test]
    fn cross_attention_is_translation_invariant() {
        let c = cfg();
        let s = store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (hq, aq) = (rand_t(&mut rng, 5, 16, 1.0), rand_t(&mut rng, 5, 3, 1.0));
        let (hk, ak) = (rand_t(&mut rng, 3, 16, 1.0), rand_t(&mut rng, 3, 3, 1.0));
        let run = |t: f64| {
            let sh = |x: &Tensor| {
                Tensor::new(x.rows(), 3, x.data().iter().map(|v| v + t).collect()).unwrap()
            };
            let mut g = Graph::new();
            let q = token_set(&mut g, &hq, &sh(&aq));
            let k = token_set(&mut g, &hk, &sh(&ak));
            let out = cross_attention(&mut g, &s, "decoder.layer0.cross", &c, &q, &k).unwrap();
            g.value(out.tokens).clone()
        };
        let (a, b) = (run(0.0), run(-2.3));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let c = cfg();
        let s = store(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, a) = (rand_t(&mut rng, 6, 16, 1.0), rand_t(&mut rng, 6, 3, 1.0));
        let perm = [4, 2, 5, 0, 1, 3];
        let ph = Tensor::new(
            6,
            16,
            perm.iter().flat_map(|&i| h.row(i).to_vec()).collect(),
        )
        .unwrap();
        let pa = Tensor::new(6, 3, perm.iter().flat_map(|&i| a.row(i).to_vec()).collect()).unwrap();
        let mut g = Graph::new();
        let t = token_set(&mut g, &h, &a);
        let pt = token_set(&mut g, &ph, &pa);
        let base = self_attention(&mut g, &s, "encoder.layer0.attn", &c, &t).unwrap();
        let permuted = self_attention(&mut g, &s, "encoder.layer0.attn", &c, &pt).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in g
                .value(permuted.tokens)
                .row(k)
                .iter()
                .zip(g.value(base.tokens).row(i))
            {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_zero_weights_is_identity_and_matches_two_matmuls() {
        let s = store(10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&mut rng, 3, 16, 1.0);
        let p = "decoder.layer0.ffn";
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = ffn(&mut g, &s, p, xv).unwrap();
        let get = |k: &str| s.get(&format!("{p}.{k}")).unwrap().value.clone();
        let (w1, b1, w2, b2) = (get("fc1.w"), get("fc1.b"), get("fc2.w"), get("fc2.b"));
        for i in 0..3 {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 16.0;
            let ln: Vec<f64> = row
                .iter()
                .map(|z| (z - mean) / (var + 1e-5).sqrt())
                .collect();
            let hid: Vec<f64> = (0..24)
                .map(|o| (b1[o] + (0..16).map(|t| ln[t] * w1[t * 24 + o]).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..16 {
                let want = row[o] + b2[o] + (0..24).map(|t| hid[t] * w2[t * 16 + o]).sum::<f64>();
                assert!((want - g.value(y).get(i, o)).abs() < 1e-12);
            }
        }
        let mut zero = s.clone();
        crate::model::zero_residual_outputs(&mut zero);
        let mut g0 = Graph::new();
        let xv0 = g0.constant(x.clone());
        let y0 = ffn(&mut g0, &zero, p, xv0).unwrap();
        assert_eq!(g0.value(y0), &x);
    }

    #[test]
    fn blocks_pass_gradient_checks() {
        let c = cfg();
        let mut s = store(11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (hq, aq) = (rand_t(&mut rng, 6, 16, 1.0), rand_t(&mut rng, 6, 3, 1.0));
        let (hk, ak) = (rand_t(&mut rng, 3, 16, 1.0), rand_t(&mut rng, 3, 3, 1.0));
        let report = check_params(&mut s, 1e-6, 1e-4, Some(40), |g, s| {
            let q = token_set(g, &hq, &aq);
            let k = token_set(g, &hk, &ak);
            let x = cross_attention(g, s, "decoder.layer0.cross", &c, &q, &k)?;
            let x = self_attention(g, s, "decoder.layer0.self", &c, &x)?;
            let y = ffn(g, s, "decoder.layer0.ffn", x.tokens)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        })
        .unwrap();
        let relevant: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.name.starts_with("decoder."))
            .collect();
        assert!(!relevant.is_empty());
        assert!(relevant.iter().all(|e| e.max_rel_err < 1e-4), "{report}");
    }
}
