//! Finite-difference verification of every differentiable op, the full
//! corrector and a short rollout, as run by the `gradcheck` subcommand.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_inputs, check_params, GradReport};
use crate::autodiff::{CubicSpline, Graph, RotarySpec, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::simulator::{attribute_tensor, correct_graph, rollout_graph};
use crate::state::{BoundarySet, Topology, Vec3};
use crate::tokenizer::Scene;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const ROLLOUT_TOLERANCE: f64 = 1e-3;
pub const MODULES: [&str; 3] = ["ops", "corrector", "rollout"];

/// Particles in the corrector and rollout scenes.
pub const SUITE_PARTICLES: usize = 8;

/// Entries sampled per parameter tensor in the corrector check.
const ENTRIES_PER_TENSOR: usize = 16;

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub module: &'static str,
    pub name: String,
    pub report: GradReport,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

impl fmt::Display for SuiteCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(
            f,
            "{}/{}: rel_err {:.3e} (tol {:.0e}) {verdict}",
            self.module,
            self.name,
            self.report.worst(),
            self.report.tol
        )
    }
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect()).expect("sized data")
}

fn points(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-s..s)))
        .collect()
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_t(&mut rng, r, c, 1.0));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = rand_t(rng, 3, 4, 1.0);
    let b = rand_t(rng, 3, 4, 1.0);
    let c = rand_t(rng, 4, 5, 1.0);
    let row = rand_t(rng, 1, 4, 1.0);
    let sq = rand_t(rng, 3, 3, 1.0);
    let kinkless = Tensor::from_rows(&[[0.3, -0.7], [1.2, -0.1]]);
    let x = rand_t(rng, 4, 6, 1.0);
    let (gain, bias) = (rand_t(rng, 1, 6, 1.0), rand_t(rng, 1, 6, 1.0));
    let y = rand_t(rng, 4, 6, 1.0);
    let res = 3;
    let lattice = rand_t(rng, res * res * res * 2, 3, 1.0);
    let feats = rand_t(rng, 5, 2, 1.0);
    let disp = rand_t(rng, 5, 3, 0.5);
    let rot = rand_t(rng, 3, 16, 1.0);
    let anchors = rand_t(rng, 3, 3, 1.0);
    let spec = RotarySpec {
        heads: 2,
        head_dim: 8,
        rotary_dim: 6,
        base: 10000.0,
        scale: 0.7,
    };
    let (q, k, v) = (
        rand_t(rng, 4, 6, 1.0),
        rand_t(rng, 5, 6, 1.0),
        rand_t(rng, 5, 4, 1.0),
    );
    let n = 6;
    let sx = Tensor::new(n, 3, (0..n * 3).map(|_| rng.gen_range(0.0..0.3)).collect())
        .expect("sized data");
    let sv = rand_t(rng, n, 3, 1.0);
    let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let kernel = CubicSpline { h: 0.2 };
    let pts = sx.to_vec3s();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| {
            let d: f64 = (0..3)
                .map(|k| (pts[i][k] - pts[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            i != j && d < 2.0 * kernel.h
        })
        .collect();
    vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])) as OpFn,
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "add_row",
            vec![a.clone(), row],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.scale(v[0], -2.5))),
        ),
        (
            "matmul",
            vec![a.clone(), c],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_nt",
            vec![a.clone(), b],
            Box::new(|g, v| g.matmul_nt(v[0], v[1])),
        ),
        (
            "sigmoid",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        ),
        ("relu", vec![kinkless], Box::new(|g, v| Ok(g.relu(v[0])))),
        (
            "row_sum",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.row_sum(v[0]))),
        ),
        ("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("sum", vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "concat",
            vec![a.clone(), sq.clone()],
            Box::new(|g, v| g.concat(&[v[0], v[1], v[0]])),
        ),
        (
            "slice_cols",
            vec![sq.clone()],
            Box::new(|g, v| g.slice_cols(v[0], 1, 2)),
        ),
        (
            "gather",
            vec![sq.clone()],
            Box::new(|g, v| g.gather(v[0], &[2, 0, 2, 1])),
        ),
        (
            "segment_sum",
            vec![sq.clone()],
            Box::new(|g, v| g.segment_sum(v[0], &[1, 1, 3], 4)),
        ),
        (
            "row_scale",
            vec![sq],
            Box::new(|g, v| g.row_scale(v[0], &[0.5, -1.0, 2.0])),
        ),
        (
            "layer_norm",
            vec![x.clone(), gain, bias],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "softmax",
            vec![x.clone()],
            Box::new(|g, v| Ok(g.softmax(v[0]))),
        ),
        ("cosine", vec![x, y], Box::new(|g, v| g.cosine(v[0], v[1]))),
        (
            "lattice_conv",
            vec![lattice, feats, disp],
            Box::new(move |g, v| g.lattice_conv(v[0], v[1], v[2], res, 1.0)),
        ),
        (
            "rotary",
            vec![rot, anchors],
            Box::new(move |g, v| g.rotary(v[0], v[1], spec)),
        ),
        (
            "attend",
            vec![q, k, v],
            Box::new(|g, v| g.attend(v[0], v[1], v[2], 2)),
        ),
        (
            "sph_divergence",
            vec![sx, sv],
            Box::new(move |g, v| g.sph_divergence(v[0], v[1], &masses, &pairs, kernel)),
        ),
    ]
}

fn check_ops(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_inputs(&inputs, 1e-5, OP_TOLERANCE, |g, v| {
                let out = f(g, v)?;
                probe(g, out, seed ^ 0x5eed)
            })?;
            Ok(SuiteCheck {
                module: "ops",
                name: name.to_string(),
                report,
            })
        })
        .collect()
}

/// A scene exercising every tokenizer branch: boundary samples, a short chain
/// of topology edges with rest positions, and random attribute channels.
fn suite_scene(cfg: &ModelConfig, rng: &mut ChaCha8Rng, x: &[Vec3]) -> Result<Scene> {
    let n = x.len();
    let c = cfg.particle_channels;
    let attrs: Vec<f64> = (0..n * c)
        .map(|k| {
            if k % c == 0 {
                1.0
            } else {
                rng.gen_range(0.1..0.5)
            }
        })
        .collect();
    let cb = cfg.boundary_channels;
    let samples = [[0.0, 0.0, -0.3], [0.1, 0.05, -0.3], [-0.05, 0.1, -0.3]];
    let battrs: Vec<f64> = samples
        .iter()
        .flat_map(|_| {
            (0..cb)
                .map(|k| if k == 2 { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    let boundary = if cb >= 3 || cb == 0 {
        BoundarySet::new(samples.to_vec(), battrs, cb)?
    } else {
        BoundarySet::empty(cb)
    };
    let edges: Vec<(u32, u32)> = (1..n.min(4) as u32).map(|i| (i - 1, i)).collect();
    let rest = x.iter().map(|p| p.map(|q| q * 0.9)).collect();
    Scene::new(attrs, c, boundary, Topology::new(edges, n)?, Some(rest))
}

/// A model whose output layer is randomized so that upstream gradients are nonzero.
fn live_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let last = format!("head.layer{}", cfg.head_widths().len() - 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for suffix in ["w", "b"] {
        let p = model
            .params
            .get_mut(&format!("{last}.{suffix}"))
            .ok_or_else(|| Error::invalid("gradcheck", format!("missing {last}.{suffix}")))?;
        p.value
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.1..0.1));
    }
    Ok(model)
}

fn check_corrector(cfg: &ModelConfig, seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = live_model(cfg, seed)?;
    let spread = cfg.spatial_radius.max(1e-3) * 1.5;
    let x = points(&mut rng, SUITE_PARTICLES, spread);
    let v = points(&mut rng, SUITE_PARTICLES, 0.5);
    let scene = suite_scene(cfg, &mut rng, &x)?;
    let report = check_params(
        &mut model.params,
        1e-6,
        OP_TOLERANCE,
        Some(ENTRIES_PER_TENSOR),
        |g, s| {
            let xv = g.constant(Tensor::from_rows(&x));
            let vv = g.constant(Tensor::from_rows(&v));
            let a = g.constant(attribute_tensor(&scene)?);
            let (dx, dv) = correct_graph(g, s, cfg, &scene, xv, vv, a)?;
            let both = g.concat(&[dx, dv])?;
            probe(g, both, seed)
        },
    )?;
    Ok(report
        .entries
        .into_iter()
        .map(|e| SuiteCheck {
            module: "corrector",
            name: e.name.clone(),
            report: GradReport {
                entries: vec![e],
                tol: OP_TOLERANCE,
            },
        })
        .collect())
}

/// Gradient of a three-frame rollout with respect to the last attribute channel.
fn check_rollout(cfg: &ModelConfig, seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let model = live_model(cfg, seed)?;
    let spread = cfg.spatial_radius.max(1e-3) * 1.5;
    let x = points(&mut rng, SUITE_PARTICLES, spread);
    let v = points(&mut rng, SUITE_PARTICLES, 0.5);
    let scene = suite_scene(cfg, &mut rng, &x)?;
    let base = attribute_tensor(&scene)?;
    let c = cfg.particle_channels;
    let channel = c - 1;
    let column: Vec<f64> = (0..SUITE_PARTICLES).map(|i| base.get(i, channel)).collect();
    let acc = vec![vec![[0.0, 0.0, -1.0]; SUITE_PARTICLES]; 2];
    let mut pick = vec![0.0; c];
    pick[channel] = 1.0;
    let mut fixed = base.clone();
    for i in 0..SUITE_PARTICLES {
        fixed.data_mut()[i * c + channel] = 0.0;
    }
    let report = check_inputs(
        &[Tensor::new(SUITE_PARTICLES, 1, column)?],
        1e-6,
        ROLLOUT_TOLERANCE,
        |g, ins| {
            let e = g.constant(Tensor::new(1, c, pick.clone())?);
            let spread = g.matmul(ins[0], e)?;
            let rest = g.constant(fixed.clone());
            let attrs = g.add(rest, spread)?;
            let xv = g.constant(Tensor::from_rows(&x));
            let vv = g.constant(Tensor::from_rows(&v));
            let (xs, vs) = rollout_graph(g, &model.params, cfg, &scene, xv, vv, attrs, &acc, 0.05)?;
            let both = g.concat(&[xs[1], vs[1]])?;
            let sq = g.mul(both, both)?;
            Ok(g.sum(sq))
        },
    )?;
    Ok(vec![SuiteCheck {
        module: "rollout",
        name: format!("attribute channel {channel} over 3 frames"),
        report,
    }])
}

/// Runs the named module, or every module when `module` is `None`.
pub fn gradient_suite(
    cfg: &ModelConfig,
    module: Option<&str>,
    seed: u64,
) -> Result<Vec<SuiteCheck>> {
    cfg.validate()?;
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::invalid(
                "gradcheck",
                format!("unknown module {m:?}; expected one of {MODULES:?}"),
            ));
        }
    }
    let wanted = |m: &str| module.is_none_or(|w| w == m);
    let mut out = Vec::new();
    if wanted("ops") {
        out.extend(check_ops(seed)?);
    }
    if wanted("corrector") {
        out.extend(check_corrector(cfg, seed)?);
    }
    if wanted("rollout") {
        out.extend(check_rollout(cfg, seed)?);
    }
    Ok(out)
}
