//! Optimizer, learning-rate schedule, autoregressive training and inverse design.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{divergence_loss_graph, rollout_loss, rollout_loss_graph, LossWeights};
use crate::model::Model;
use crate::simulator::{accelerations, attribute_tensor, force_schedule, rollout, rollout_graph};
use crate::state::{Trajectory, Vec3};
use crate::tokenizer::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub epochs: usize,
    pub weights: LossWeights,
    /// SPH smoothing length; half the spatial radius when unset.
    pub sph_h: Option<f64>,
    /// Steps of each validation rollout; the whole sequence when unset.
    pub val_horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 4,
            lr: 1e-4,
            warmup_steps: 200,
            total_steps: 5000,
            min_lr: 5e-6,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            epochs: 10,
            weights: LossWeights::default(),
            sph_h: None,
            val_horizon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("train config", reason));
        if !(2..=6).contains(&self.window) {
            return bad(format!("window must be in 2..=6, got {}", self.window));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!(
                "need 0 <= min_lr <= lr and lr > 0, got {} and {}",
                self.min_lr, self.lr
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!(
                "Adam moments must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps and clip norm must be positive, weight decay non-negative".into());
        }
        if self.sph_h.is_some_and(|h| !(h > 0.0)) {
            return bad("sph_h must be positive".into());
        }
        self.weights.validate()
    }
}

/// Linear warmup from 1% of the base rate, then cosine decay to `min_lr`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (0.01 + 0.99 * step as f64 / cfg.warmup_steps as f64);
    }
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with global-norm gradient clipping.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    steps: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update from the gradients held in `store`; returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> f64 {
        let norm = store.grad_norm();
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.steps);
        let c2 = 1.0 - cfg.beta2.powi(self.steps);
        for (path, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for k in 0..p.value.len() {
                let g = p.grad[k] * clip;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                p.value[k] *= 1.0 - lr * cfg.weight_decay;
                p.value[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            }
        }
        store.round_to_storage();
        norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "step,train_loss,val_loss,lr";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        let val = self.val_loss.map_or(String::new(), |v| v.to_string());
        format!("{},{},{},{}", self.step, self.train_loss, val, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub steps: usize,
}

fn sph_h(model: &Model, cfg: &TrainConfig) -> f64 {
    cfg.sph_h.unwrap_or(model.config.spatial_radius / 2.0)
}

/// Loss of one training window starting at frame `start`, bound on `g`.
pub fn window_loss(
    g: &mut Graph,
    model: &Model,
    traj: &Trajectory,
    scene: &Scene,
    start: usize,
    cfg: &TrainConfig,
) -> Result<Var> {
    let steps = cfg.window - 1;
    let system = traj.system_at(start)?;
    let accels = accelerations(&system, &force_schedule(traj, start, steps))?;
    let x0 = g.constant(Tensor::from_rows(system.positions()));
    let v0 = g.constant(Tensor::from_rows(system.velocities()));
    let attrs = g.constant(attribute_tensor(scene)?);
    let (xs, vs) = rollout_graph(
        g,
        &model.params,
        &model.config,
        scene,
        x0,
        v0,
        attrs,
        &accels,
        traj.dt(),
    )?;
    let truth = &traj.frames()[start + 1..start + cfg.window];
    let mut loss = rollout_loss_graph(g, &xs, &vs, truth, &cfg.weights)?;
    if cfg.weights.physics > 0.0 {
        let masses = scene.masses();
        let h = sph_h(model, cfg);
        let mut terms = Vec::with_capacity(steps);
        for (&x, &v) in xs.iter().zip(&vs) {
            terms.push(divergence_loss_graph(g, x, v, &masses, h)?);
        }
        let all = g.concat(&terms)?;
        let div = g.mean(all);
        let div = g.scale(div, cfg.weights.physics);
        loss = g.add(loss, div)?;
    }
    Ok(loss)
}

/// Mean rollout loss over `trajs`, each rolled out from frame 0.
///
/// A diverging rollout scores infinity.
pub fn validation_loss(model: &Model, trajs: &[Trajectory], cfg: &TrainConfig) -> Result<f64> {
    let losses: Vec<f64> = trajs
        .par_iter()
        .map(|t| {
            let steps = cfg
                .val_horizon
                .unwrap_or(t.frame_count() - 1)
                .min(t.frame_count() - 1);
            let scene = Scene::from_trajectory(t)?;
            let forces = force_schedule(t, 0, steps);
            match rollout(
                Some(model),
                &t.system_at(0)?,
                &forces,
                &scene,
                t.dt(),
                steps + 1,
            ) {
                Ok(frames) => rollout_loss(&frames, &t.frames()[1..=steps], &cfg.weights),
                Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains `model` in place with batch size 1, keeping the parameters with the
/// lowest validation loss when a validation set is given.
pub fn train(
    model: &mut Model,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    cfg: &TrainConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(t) = train_set.iter().find(|t| t.frame_count() < cfg.window) {
        return Err(Error::invalid(
            "train",
            format!(
                "a sequence has {} frames, fewer than window {}",
                t.frame_count(),
                cfg.window
            ),
        ));
    }
    let scenes: Vec<Scene> = train_set
        .iter()
        .map(Scene::from_trajectory)
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.epochs {
        for k in (1..order.len()).rev() {
            order.swap(k, rng.gen_range(0..=k));
        }
        let mut epoch_loss = 0.0;
        for &i in &order {
            let traj = &train_set[i];
            let start = rng.gen_range(0..=traj.frame_count() - cfg.window);
            let mut g = Graph::new();
            let loss = match window_loss(&mut g, model, traj, &scenes[i], start, cfg) {
                Err(Error::Diverged { .. }) => {
                    return Err(Error::NonFinite {
                        what: format!("training loss at step {step}"),
                    })
                }
                other => other?,
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at step {step}"),
                });
            }
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&g, &grads);
            let lr = lr_at(step, cfg);
            opt.step(&mut model.params, lr, cfg);
            epoch_loss += value;
            step += 1;
        }
        let train_loss = epoch_loss / order.len().max(1) as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(validation_loss(model, val_set, cfg)?)
        };
        let point = CurvePoint {
            step,
            train_loss,
            val_loss,
            lr: lr_at(step.saturating_sub(1), cfg),
        };
        on_point(&point);
        curve.push(point);
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, step, model.params.clone()));
            }
        }
    }
    let (best_val, best_step) = match best {
        Some((v, s, params)) => {
            model.params = params;
            (Some(v), s)
        }
        None => (None, step),
    };
    model.params.zero_grad();
    Ok(TrainReport {
        curve,
        best_step,
        best_val,
        steps: step,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseDesignConfig {
    pub target: f64,
    pub initial: f64,
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
    /// Gradient-descent step on the unbounded parameter behind the sigmoid.
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignPoint {
    pub iteration: usize,
    pub value: f64,
    pub objective: f64,
    pub gradient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignReport {
    pub value: f64,
    pub curve: Vec<DesignPoint>,
}

pub const DESIGN_HEADER: &str = "iteration,value,objective,gradient";

impl DesignPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.value, self.objective, self.gradient
        )
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Halvings of the step tried before an iteration gives up and stays put.
pub const DESIGN_HALVINGS: usize = 12;

/// Gradient descent on a bounded scalar: `summary` maps the 1x1 value to a
/// 1x1 summary `s`, and the objective is `(s - target)^2`.
///
/// Each iteration tries `step_size` and halves it until the objective does not
/// increase, so the recorded objective never goes up.
pub fn descend(
    cfg: &InverseDesignConfig,
    summary: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<DesignReport> {
    let span = cfg.upper - cfg.lower;
    if !(span > 0.0) || !(cfg.initial > cfg.lower && cfg.initial < cfg.upper) {
        return Err(Error::invalid(
            "inverse design",
            format!(
                "initial {} must lie strictly inside ({}, {})",
                cfg.initial, cfg.lower, cfg.upper
            ),
        ));
    }
    let value_of = |theta: f64| cfg.lower + span / (1.0 + (-theta).exp());
    let evaluate = |theta: f64, iteration: usize| -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let t = g.input(Tensor::scalar(theta));
        let sig = g.sigmoid(t);
        let scaled = g.scale(sig, span);
        let offset = g.constant(Tensor::scalar(cfg.lower));
        let value = g.add(scaled, offset)?;
        let s = summary(&mut g, value)?;
        let target = g.constant(Tensor::scalar(cfg.target));
        let d = g.sub(s, target)?;
        let objective = g.mul(d, d)?;
        let obj = g.value(objective).item();
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                what: format!("inverse-design objective at iteration {iteration}"),
            });
        }
        let grads = g.backward(objective)?;
        Ok((obj, grads.get(t).map_or(0.0, |g| g[0])))
    };
    let mut theta = logit((cfg.initial - cfg.lower) / span);
    let (mut objective, mut gradient) = evaluate(theta, 0)?;
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    curve.push(DesignPoint {
        iteration: 0,
        value: value_of(theta),
        objective,
        gradient,
    });
    for iteration in 1..=cfg.iterations {
        let mut step = cfg.step_size;
        for _ in 0..=DESIGN_HALVINGS {
            let trial = theta - step * gradient;
            let (o, g) = evaluate(trial, iteration)?;
            if o <= objective {
                (theta, objective, gradient) = (trial, o, g);
                break;
            }
            step *= 0.5;
        }
        curve.push(DesignPoint {
            iteration,
            value: value_of(theta),
            objective,
            gradient,
        });
    }
    Ok(DesignReport {
        value: value_of(theta),
        curve,
    })
}

/// Mean x of the particles at height `<= body_height`; the inverse-design summary.
pub fn body_mean_x(positions: &[Vec3], body_height: f64) -> Result<f64> {
    let xs: Vec<f64> = positions
        .iter()
        .filter(|p| p[2] <= body_height)
        .map(|p| p[0])
        .collect();
    if xs.is_empty() {
        return Err(Error::invalid(
            "inverse design",
            format!("no particle ends at height <= {body_height}"),
        ));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Recovers the attribute `channel` (shared by all particles) so that the mean
/// terminal x of particles ending at height `<= body_height` reaches the target.
///
/// The rollout spans every frame of `template`; its forces are held fixed.
pub fn inverse_design(
    model: &Model,
    template: &Trajectory,
    channel: usize,
    body_height: f64,
    cfg: &InverseDesignConfig,
) -> Result<DesignReport> {
    let scene = Scene::from_trajectory(template)?;
    let n = scene.len();
    let c = scene.attribute_channels();
    if channel >= c || channel == crate::state::MASS_CHANNEL {
        return Err(Error::invalid(
            "inverse design",
            format!("channel {channel} is not a free attribute of {c}"),
        ));
    }
    let steps = template.frame_count() - 1;
    if steps == 0 {
        return Err(Error::invalid(
            "inverse design",
            "template needs at least two frames",
        ));
    }
    let system = template.system_at(0)?;
    let accels = accelerations(&system, &force_schedule(template, 0, steps))?;
    let mut base = attribute_tensor(&scene)?;
    for i in 0..n {
        base.data_mut()[i * c + channel] = 0.0;
    }
    let mut pick = vec![0.0; c];
    pick[channel] = 1.0;
    descend(cfg, |g, value| {
        let ones = g.constant(Tensor::new(n, 1, vec![1.0; n])?);
        let column = g.matmul(ones, value)?;
        let e = g.constant(Tensor::new(1, c, pick.clone())?);
        let spread = g.matmul(column, e)?;
        let fixed = g.constant(base.clone());
        let attrs = g.add(fixed, spread)?;
        let x0 = g.constant(Tensor::from_rows(system.positions()));
        let v0 = g.constant(Tensor::from_rows(system.velocities()));
        let (xs, _) = rollout_graph(
            g,
            &model.params,
            &model.config,
            &scene,
            x0,
            v0,
            attrs,
            &accels,
            template.dt(),
        )?;
        let last = *xs.last().expect("at least one step");
        let body: Vec<usize> = g
            .value(last)
            .to_vec3s()
            .iter()
            .enumerate()
            .filter(|(_, p)| p[2] <= body_height)
            .map(|(i, _)| i)
            .collect();
        if body.is_empty() {
            return Err(Error::invalid(
                "inverse design",
                format!("no particle ends at height <= {body_height}"),
            ));
        }
        let rows = g.gather(last, &body)?;
        let xcol = g.slice_cols(rows, 0, 1)?;
        Ok(g.mean(xcol))
    })
}
