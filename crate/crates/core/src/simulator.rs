//! Prediction-correction timestep and autoregressive rollout.

use crate::attention::TokenSet;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::decoder::{decode, predict_head};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::state::{mass_matrix_inverse_apply, Frame, ParticleSystem, Trajectory, Vec3};
use crate::tokenizer::{build_neighborhoods, tokenize, Scene};

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            "dt",
            format!("must be positive and finite, got {dt}"),
        ))
    }
}

fn all_finite(points: &[Vec3]) -> bool {
    points.iter().flatten().all(|x| x.is_finite())
}

/// Explicit force step from per-particle accelerations.
pub fn predict_with(x: &[Vec3], v: &[Vec3], accel: &[Vec3], dt: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut xt = Vec::with_capacity(x.len());
    let mut vt = Vec::with_capacity(x.len());
    for ((p, u), a) in x.iter().zip(v).zip(accel) {
        let un: Vec3 = std::array::from_fn(|d| u[d] + dt * a[d]);
        xt.push(std::array::from_fn(|d| p[d] + dt / 2.0 * (u[d] + un[d])));
        vt.push(un);
    }
    (xt, vt)
}

/// Predicted positions and velocities of `system` after one step of its forces.
pub fn predict(system: &ParticleSystem, dt: f64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    check_dt(dt)?;
    let accel = mass_matrix_inverse_apply(system, system.forces())?;
    Ok(predict_with(
        system.positions(),
        system.velocities(),
        &accel,
        dt,
    ))
}

/// Inverts [`predict_with`]: recovers the state the predictor started from.
pub fn unpredict(xt: &[Vec3], vt: &[Vec3], accel: &[Vec3], dt: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut x = Vec::with_capacity(xt.len());
    let mut v = Vec::with_capacity(xt.len());
    for ((p, un), a) in xt.iter().zip(vt).zip(accel) {
        let u: Vec3 = std::array::from_fn(|d| un[d] - dt * a[d]);
        x.push(std::array::from_fn(|d| p[d] - dt / 2.0 * (u[d] + un[d])));
        v.push(u);
    }
    (x, v)
}

pub fn predict_graph(g: &mut Graph, x: Var, v: Var, accel: Var, dt: f64) -> Result<(Var, Var)> {
    let kick = g.scale(accel, dt);
    let vt = g.add(v, kick)?;
    let both = g.add(v, vt)?;
    let drift = g.scale(both, dt / 2.0);
    let xt = g.add(x, drift)?;
    Ok((xt, vt))
}

/// Corrector residuals `(dx, dv)` for predicted state `(xt, vt)`.
pub fn correct_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    xt: Var,
    vt: Var,
    attrs: Var,
) -> Result<(Var, Var)> {
    let positions = g.value(xt).to_vec3s();
    let neighbors = build_neighborhoods(cfg, scene, &positions)?;
    let tok = tokenize(g, store, cfg, scene, &neighbors, xt, vt, attrs)?;
    let particles = TokenSet {
        tokens: tok.tokens,
        anchors: xt,
        multiplicities: vec![1.0; positions.len()],
    };
    let (supers, _) = encode(g, store, cfg, particles.clone())?;
    let out = decode(g, store, cfg, particles, &supers)?;
    predict_head(g, store, cfg, out.tokens)
}

pub fn attribute_tensor(scene: &Scene) -> Result<Tensor> {
    Tensor::new(
        scene.len(),
        scene.attribute_channels(),
        scene.attributes().to_vec(),
    )
}

pub fn correct(
    model: &Model,
    scene: &Scene,
    xt: &[Vec3],
    vt: &[Vec3],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_rows(xt));
    let v = g.constant(Tensor::from_rows(vt));
    let a = g.constant(attribute_tensor(scene)?);
    let (dx, dv) = correct_graph(&mut g, &model.params, &model.config, scene, x, v, a)?;
    Ok((g.value(dx).to_vec3s(), g.value(dv).to_vec3s()))
}

fn check_rollout(n: usize, scene: &Scene, forces: &[Vec<Vec3>], window: usize) -> Result<()> {
    if window < 2 {
        return Err(Error::invalid(
            "rollout",
            format!("window must be at least 2, got {window}"),
        ));
    }
    if forces.len() != window - 1 {
        return Err(Error::invalid(
            "rollout",
            format!("{} force frames for window {window}", forces.len()),
        ));
    }
    if scene.len() != n || forces.iter().any(|f| f.len() != n) {
        return Err(Error::shape(
            "rollout",
            format!("scene or forces do not describe {n} particles"),
        ));
    }
    Ok(())
}

/// Runs `window - 1` prediction-correction steps from `initial`.
///
/// Returns the predicted frames; frame `n` carries the force applied at step `n`.
/// Without a model only the predictor runs.
pub fn rollout(
    model: Option<&Model>,
    initial: &ParticleSystem,
    forces: &[Vec<Vec3>],
    scene: &Scene,
    dt: f64,
    window: usize,
) -> Result<Vec<Frame>> {
    check_dt(dt)?;
    check_rollout(initial.len(), scene, forces, window)?;
    let mut x = initial.positions().to_vec();
    let mut v = initial.velocities().to_vec();
    let mut frames = Vec::with_capacity(window - 1);
    for (step, f) in forces.iter().enumerate() {
        let accel = mass_matrix_inverse_apply(initial, f)?;
        let (mut xt, mut vt) = predict_with(&x, &v, &accel, dt);
        if !all_finite(&xt) || !all_finite(&vt) {
            return Err(Error::Diverged { step });
        }
        if let Some(model) = model {
            let (dx, dv) = correct(model, scene, &xt, &vt)?;
            for (p, d) in xt.iter_mut().zip(&dx) {
                (0..3).for_each(|k| p[k] += d[k]);
            }
            for (p, d) in vt.iter_mut().zip(&dv) {
                (0..3).for_each(|k| p[k] += d[k]);
            }
            if !all_finite(&xt) || !all_finite(&vt) {
                return Err(Error::Diverged { step });
            }
        }
        x = xt;
        v = vt;
        frames.push(Frame {
            positions: x.clone(),
            velocities: v.clone(),
            forces: f.clone(),
        });
    }
    Ok(frames)
}

/// Force sequence for `steps` steps read from `traj`, repeating its last frame.
pub fn force_schedule(traj: &Trajectory, start: usize, steps: usize) -> Vec<Vec<Vec3>> {
    let last = traj.frame_count() - 1;
    (0..steps)
        .map(|k| traj.frame((start + k).min(last)).forces.clone())
        .collect()
}

/// Rolls out from frame `start` of `traj` and packages the predicted frames.
pub fn rollout_trajectory(
    model: Option<&Model>,
    traj: &Trajectory,
    start: usize,
    window: usize,
) -> Result<Trajectory> {
    if start >= traj.frame_count() {
        return Err(Error::invalid(
            "rollout",
            format!("start frame {start} of {}", traj.frame_count()),
        ));
    }
    let scene = Scene::from_trajectory(traj)?;
    let forces = force_schedule(traj, start, window.saturating_sub(1));
    let frames = rollout(
        model,
        &traj.system_at(start)?,
        &forces,
        &scene,
        traj.dt(),
        window,
    )?;
    traj.with_frames(frames)
}

/// Differentiable rollout: per-step predicted positions and velocities on `g`.
///
/// `accels` holds `M^-1 F` for each step. Attribute channels enter through
/// `attrs` so they can be differentiated.
#[allow(clippy::too_many_arguments)]
pub fn rollout_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    x0: Var,
    v0: Var,
    attrs: Var,
    accels: &[Vec<Vec3>],
    dt: f64,
) -> Result<(Vec<Var>, Vec<Var>)> {
    check_dt(dt)?;
    check_rollout(g.shape(x0).0, scene, accels, accels.len() + 1)?;
    let (mut x, mut v) = (x0, v0);
    let mut xs = Vec::with_capacity(accels.len());
    let mut vs = Vec::with_capacity(accels.len());
    for (step, a) in accels.iter().enumerate() {
        let a = g.constant(Tensor::from_rows(a));
        let (xt, vt) = predict_graph(g, x, v, a, dt)?;
        if !g.value(xt).is_finite() || !g.value(vt).is_finite() {
            return Err(Error::Diverged { step });
        }
        let (dx, dv) = correct_graph(g, store, cfg, scene, xt, vt, attrs)?;
        x = g.add(xt, dx)?;
        v = g.add(vt, dv)?;
        if !g.value(x).is_finite() || !g.value(v).is_finite() {
            return Err(Error::Diverged { step });
        }
        xs.push(x);
        vs.push(v);
    }
    Ok((xs, vs))
}

/// Accelerations `M^-1 F` for each force frame.
pub fn accelerations(system: &ParticleSystem, forces: &[Vec<Vec3>]) -> Result<Vec<Vec<Vec3>>> {
    forces
        .iter()
        .map(|f| mass_matrix_inverse_apply(system, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_inputs;
    use crate::state::{BoundarySet, Topology};
    use crate::tokenizer::translate_points;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system(x: Vec<Vec3>, v: Vec<Vec3>, f: Vec<Vec3>, m: &[f64]) -> ParticleSystem {
        ParticleSystem::new(x, v, f, m.to_vec(), 1, None).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            width: 16,
            heads: 2,
            rotary_dim: 6,
            spatial_width: 8,
            topology_width: 8,
            boundary_width: 8,
            self_width: 8,
            spatial_radius: 0.5,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 24,
            merge_hidden: 16,
            head_hidden: vec![16],
            ..ModelConfig::default()
        }
    }

    /// A model whose final layer is nonzero so the corrector does something.
    fn live_model(cfg: ModelConfig, seed: u64) -> Model {
        let mut m = Model::new(cfg, seed).unwrap();
        let last = format!("head.layer{}", m.config.head_widths().len() - 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for suffix in ["w", "b"] {
            let p = m.params.get_mut(&format!("{last}.{suffix}")).unwrap();
            p.value
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-0.05..0.05));
        }
        m.params.round_to_storage();
        m
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-scale..scale)))
            .collect()
    }

    fn floor_scene(n: usize) -> Scene {
        let b = BoundarySet::new(
            vec![[0.0, 0.0, -0.6], [0.3, 0.0, -0.6], [0.0, 0.3, -0.6]],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            3,
        )
        .unwrap();
        Scene::new(vec![1.0; n], 1, b, Topology::empty(), None).unwrap()
    }

    #[test]
    fn predict_examples() {
        let s = system(
            vec![[0.0; 3]],
            vec![[1.0, 0.0, 0.0]],
            vec![[0.0; 3]],
            &[1.0],
        );
        let (x, v) = predict(&s, 0.1).unwrap();
        assert_eq!(v, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(x, vec![[0.1, 0.0, 0.0]]);
        let s = system(
            vec![[0.0; 3]],
            vec![[0.0; 3]],
            vec![[0.0, 0.0, -4.0]],
            &[2.0],
        );
        let (x, v) = predict(&s, 0.5).unwrap();
        assert_eq!(v, vec![[0.0, 0.0, -1.0]]);
        assert_eq!(x, vec![[0.0, 0.0, -0.25]]);
        assert!(predict(&s, 0.0).is_err());
    }

    #[test]
    fn repeated_prediction_matches_ballistic_closed_form() {
        let (x0, v0, g) = ([0.1, -0.2, 0.9], [0.5, 0.25, 1.0], [0.0, 0.0, -9.81]);
        let dt = 0.01;
        let (mut x, mut v) = (vec![x0], vec![v0]);
        for n in 1..=200 {
            (x, v) = predict_with(&x, &v, &[g], dt);
            let t = n as f64 * dt;
            for d in 0..3 {
                assert!((x[0][d] - (x0[d] + v0[d] * t + 0.5 * g[d] * t * t)).abs() < 1e-6);
                assert!((v[0][d] - (v0[d] + g[d] * t)).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn prediction_is_reversible(seed in 0u64..1000, dt in 1e-4f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, v, a) = (random_points(&mut rng, 7, 3.0), random_points(&mut rng, 7, 3.0), random_points(&mut rng, 7, 10.0));
            let (xt, vt) = predict_with(&x, &v, &a, dt);
            let (xb, vb) = unpredict(&xt, &vt, &a, dt);
            for (p, q) in x.iter().chain(&v).zip(xb.iter().chain(&vb)) {
                for d in 0..3 {
                    prop_assert!((p[d] - q[d]).abs() <= 1e-13 * (1.0 + p[d].abs()) * 16.0);
                }
            }
        }

        #[test]
        fn zero_corrector_rest_state_is_stationary(seed in 0u64..50, window in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let x = random_points(&mut rng, n, 0.5);
            let model = Model::new(small_cfg(), seed).unwrap();
            let s = system(x.clone(), vec![[0.0; 3]; n], vec![[0.0; 3]; n], &[1.0; 6]);
            let frames = rollout(Some(&model), &s, &vec![vec![[0.0; 3]; n]; window - 1], &floor_scene(n), 0.01, window).unwrap();
            prop_assert_eq!(frames.len(), window - 1);
            for f in &frames {
                prop_assert_eq!(&f.positions, &x);
                prop_assert!(f.velocities.iter().flatten().all(|&u| u == 0.0));
            }
        }
    }

    #[test]
    fn zero_initialized_corrector_returns_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(small_cfg(), 1).unwrap();
        let (x, v) = (
            random_points(&mut rng, 8, 0.4),
            random_points(&mut rng, 8, 1.0),
        );
        let (dx, dv) = correct(&model, &floor_scene(8), &x, &v).unwrap();
        assert!(dx.iter().chain(&dv).flatten().all(|&z| z == 0.0));
    }

    #[test]
    fn corrector_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = live_model(small_cfg(), 2);
        let (x, v) = (
            random_points(&mut rng, 10, 0.4),
            random_points(&mut rng, 10, 1.0),
        );
        let scene = floor_scene(10);
        let (dx, dv) = correct(&model, &scene, &x, &v).unwrap();
        assert!(dx.iter().flatten().any(|&z| z != 0.0));
        for t in [[0.25, -0.5, 0.125], [3.0, 1.5, -2.0]] {
            let (sx, sv) = correct(
                &model,
                &scene.translated(t).unwrap(),
                &translate_points(&x, t),
                &v,
            )
            .unwrap();
            for (a, b) in dx.iter().chain(&dv).zip(sx.iter().chain(&sv)) {
                for d in 0..3 {
                    assert!((a[d] - b[d]).abs() < 1e-5, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn corrector_matches_recorded_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = live_model(small_cfg(), 8);
        let (x, v) = (
            random_points(&mut rng, 8, 0.4),
            random_points(&mut rng, 8, 1.0),
        );
        let (dx, dv) = correct(&model, &floor_scene(8), &x, &v).unwrap();
        let got = [dx[0][0], dx[3][1], dx[7][2], dv[0][0], dv[5][1], dv[7][2]];
        for (a, b) in got.iter().zip(GOLDEN) {
            assert!((a - b).abs() < 1e-9, "{got:?}");
        }
    }

    const GOLDEN: [f64; 6] = [
        -0.04446992486905133,
        -0.1805115530693965,
        -0.057100636810840794,
        0.036604097474611984,
        0.1599520617938019,
        0.14414504310538864,
    ];

    #[test]
    fn window_two_is_one_predict_and_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = live_model(small_cfg(), 3);
        let (x, v, f) = (
            random_points(&mut rng, 6, 0.4),
            random_points(&mut rng, 6, 1.0),
            random_points(&mut rng, 6, 1.0),
        );
        let s = system(x, v, f.clone(), &[1.0, 2.0, 1.0, 0.5, 1.0, 1.0]);
        let scene = Scene::new(
            s.attributes().to_vec(),
            1,
            floor_scene(6).boundary().clone(),
            Topology::empty(),
            None,
        )
        .unwrap();
        let frames = rollout(Some(&model), &s, &[f], &scene, 0.02, 2).unwrap();
        let (xt, vt) = predict(&s, 0.02).unwrap();
        let (dx, dv) = correct(&model, &scene, &xt, &vt).unwrap();
        for i in 0..6 {
            for d in 0..3 {
                assert_eq!(frames[0].positions[i][d], xt[i][d] + dx[i][d]);
                assert_eq!(frames[0].velocities[i][d], vt[i][d] + dv[i][d]);
            }
        }
    }

    #[test]
    fn zero_corrector_under_gravity_is_ballistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let masses = [1.0, 2.0, 0.5, 1.5, 1.0];
        let g = [0.0, 0.0, -9.81];
        let (x0, v0) = (
            random_points(&mut rng, n, 0.5),
            random_points(&mut rng, n, 1.0),
        );
        let forces: Vec<Vec3> = masses.iter().map(|m| [0.0, 0.0, m * g[2]]).collect();
        let s = system(x0.clone(), v0.clone(), forces.clone(), &masses);
        let scene = Scene::new(
            masses.to_vec(),
            1,
            BoundarySet::empty(3),
            Topology::empty(),
            None,
        )
        .unwrap();
        let model = Model::new(small_cfg(), 4).unwrap();
        let dt = 0.01;
        let frames = rollout(Some(&model), &s, &vec![forces; 9], &scene, dt, 10).unwrap();
        assert_eq!(frames.len(), 9);
        for (k, f) in frames.iter().enumerate() {
            let t = (k + 1) as f64 * dt;
            for i in 0..n {
                for d in 0..3 {
                    assert!(
                        (f.positions[i][d] - (x0[i][d] + v0[i][d] * t + 0.5 * g[d] * t * t)).abs()
                            < 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn rollout_is_deterministic_and_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = live_model(small_cfg(), 5);
        let n = 7;
        let (x, v) = (
            random_points(&mut rng, n, 0.4),
            random_points(&mut rng, n, 0.5),
        );
        let forces = vec![vec![[0.0, 0.0, -1.0]; n]; 4];
        let scene = floor_scene(n);
        let run = |x: Vec<Vec3>, scene: &Scene| {
            let s = system(x, v.clone(), forces[0].clone(), &[1.0; 7]);
            rollout(Some(&model), &s, &forces, scene, 0.01, 5).unwrap()
        };
        let a = run(x.clone(), &scene);
        assert_eq!(a, run(x.clone(), &scene));
        let t = [0.5, -1.25, 2.0];
        let b = run(translate_points(&x, t), &scene.translated(t).unwrap());
        for (fa, fb) in a.iter().zip(&b) {
            for (p, q) in fa.positions.iter().zip(&fb.positions) {
                for d in 0..3 {
                    assert!((p[d] + t[d] - q[d]).abs() < 1e-5);
                }
            }
            for (p, q) in fa.velocities.iter().zip(&fb.velocities) {
                for d in 0..3 {
                    assert!((p[d] - q[d]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rollout_validates_and_reports_divergence() {
        let s = system(vec![[0.0; 3]], vec![[0.0; 3]], vec![[0.0; 3]], &[1.0]);
        let scene = floor_scene(1);
        assert!(rollout(None, &s, &[], &scene, 0.1, 1).is_err());
        assert!(rollout(None, &s, &[vec![[0.0; 3]]], &scene, 0.1, 3).is_err());
        let huge = vec![[1e308, 0.0, 0.0]];
        let err = rollout(
            None,
            &s,
            &[vec![[0.0; 3]], huge.clone(), huge],
            &scene,
            10.0,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1 }), "{err}");
    }

    #[test]
    fn graph_rollout_matches_plain_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = live_model(small_cfg(), 6);
        let n = 6;
        let (x, v) = (
            random_points(&mut rng, n, 0.4),
            random_points(&mut rng, n, 0.5),
        );
        let forces = vec![random_points(&mut rng, n, 1.0); 3];
        let scene = floor_scene(n);
        let s = system(x.clone(), v.clone(), forces[0].clone(), &[1.0; 6]);
        let frames = rollout(Some(&model), &s, &forces, &scene, 0.02, 4).unwrap();
        let mut g = Graph::inference();
        let (xv, vv) = (
            g.constant(Tensor::from_rows(&x)),
            g.constant(Tensor::from_rows(&v)),
        );
        let a = g.constant(attribute_tensor(&scene).unwrap());
        let acc = accelerations(&s, &forces).unwrap();
        let (xs, vs) = rollout_graph(
            &mut g,
            &model.params,
            &model.config,
            &scene,
            xv,
            vv,
            a,
            &acc,
            0.02,
        )
        .unwrap();
        for (k, f) in frames.iter().enumerate() {
            assert_eq!(g.value(xs[k]).to_vec3s(), f.positions);
            assert_eq!(g.value(vs[k]).to_vec3s(), f.velocities);
        }
    }

    #[test]
    fn three_frame_rollout_gradient_wrt_attribute_channel() {
        let cfg = ModelConfig {
            particle_channels: 2,
            ..small_cfg()
        };
        let model = live_model(cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let (x, v) = (
            random_points(&mut rng, n, 0.3),
            random_points(&mut rng, n, 0.5),
        );
        let attrs: Vec<f64> = (0..n).flat_map(|i| [1.0, 0.2 + 0.05 * i as f64]).collect();
        let b = floor_scene(n).boundary().clone();
        let scene = Scene::new(attrs.clone(), 2, b, Topology::empty(), None).unwrap();
        let acc = vec![vec![[0.0, 0.0, -1.0]; n]; 2];
        let attr_t = Tensor::new(n, 2, attrs).unwrap();
        let report = check_inputs(&[attr_t], 1e-6, 1e-3, |g, ins| {
            let xv = g.constant(Tensor::from_rows(&x));
            let vv = g.constant(Tensor::from_rows(&v));
            let (xs, vs) = rollout_graph(
                g,
                &model.params,
                &model.config,
                &scene,
                xv,
                vv,
                ins[0],
                &acc,
                0.05,
            )?;
            let both = g.concat(&[xs[1], vs[1]])?;
            let sq = g.mul(both, both)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
