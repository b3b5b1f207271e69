//! Rollout loss, SPH divergence regularizer and evaluation metrics.

use std::fmt;

use crate::autodiff::{CubicSpline, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::neighbors::build_spatial;
use crate::state::{Frame, Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    pub physics: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            velocity: 1.0,
            physics: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.position, self.velocity, self.physics]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if !ok || self.position + self.velocity <= 0.0 {
            return Err(Error::invalid(
                "loss weights",
                format!("need non-negative weights with position + velocity > 0, got {self:?}"),
            ));
        }
        Ok(())
    }
}

fn check_frames(op: &'static str, pred: &[Frame], truth: &[Frame]) -> Result<usize> {
    let n = truth.first().map_or(0, |f| f.positions.len());
    let same = pred.len() == truth.len()
        && pred
            .iter()
            .chain(truth)
            .all(|f| f.positions.len() == n && f.velocities.len() == n);
    if !same || n == 0 {
        return Err(Error::shape(
            op,
            format!(
                "{} predicted vs {} reference frames",
                pred.len(),
                truth.len()
            ),
        ));
    }
    Ok(n)
}

fn squared_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |d| (p[d] - q[d]).powi(2)))
        .sum()
}

/// Weighted position and velocity MSE over particles, axes and frames.
pub fn rollout_loss(pred: &[Frame], truth: &[Frame], weights: &LossWeights) -> Result<f64> {
    let n = check_frames("rollout_loss", pred, truth)?;
    let count = (pred.len() * n * 3) as f64;
    let (mut ex, mut ev) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        ex += squared_error(&p.positions, &t.positions);
        ev += squared_error(&p.velocities, &t.velocities);
    }
    Ok(weights.position * ex / count + weights.velocity * ev / count)
}

fn mse_graph(g: &mut Graph, pred: &[Var], truth: &[&[Vec3]]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, t) in pred.iter().zip(truth) {
        let t = g.constant(Tensor::from_rows(t));
        let d = g.sub(p, t)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq));
    }
    let all = g.concat(&terms)?;
    Ok(g.mean(all))
}

/// Graph version of [`rollout_loss`] over per-step predicted states.
pub fn rollout_loss_graph(
    g: &mut Graph,
    xs: &[Var],
    vs: &[Var],
    truth: &[Frame],
    weights: &LossWeights,
) -> Result<Var> {
    if xs.len() != truth.len() || vs.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(
            "rollout_loss",
            format!("{} predicted vs {} reference frames", xs.len(), truth.len()),
        ));
    }
    let tx: Vec<&[Vec3]> = truth.iter().map(|f| f.positions.as_slice()).collect();
    let tv: Vec<&[Vec3]> = truth.iter().map(|f| f.velocities.as_slice()).collect();
    let lx = mse_graph(g, xs, &tx)?;
    let lv = mse_graph(g, vs, &tv)?;
    let lx = g.scale(lx, weights.position);
    let lv = g.scale(lv, weights.velocity);
    g.add(lx, lv)
}

fn kernel_pairs(positions: &[Vec3], h: f64) -> Result<Vec<(usize, usize)>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(
            "sph support",
            format!("h must be positive, got {h}"),
        ));
    }
    Ok(build_spatial(positions, 2.0 * h)?.pairs().collect())
}

/// Per-particle SPH velocity divergence with a cubic-spline kernel of smoothing length `h`.
pub fn sph_divergence(
    positions: &[Vec3],
    velocities: &[Vec3],
    masses: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let pairs = kernel_pairs(positions, h)?;
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_rows(positions));
    let v = g.constant(Tensor::from_rows(velocities));
    let div = g.sph_divergence(x, v, masses, &pairs, CubicSpline { h })?;
    Ok(g.value(div).data().to_vec())
}

/// Mean squared divergence of one state, on the graph.
pub fn divergence_loss_graph(g: &mut Graph, x: Var, v: Var, masses: &[f64], h: f64) -> Result<Var> {
    let pairs = kernel_pairs(&g.value(x).to_vec3s(), h)?;
    let div = g.sph_divergence(x, v, masses, &pairs, CubicSpline { h })?;
    let sq = g.mul(div, div)?;
    Ok(g.mean(sq))
}

/// Mean of squared divergence over every frame of a trajectory.
pub fn mean_squared_divergence(frames: &[Frame], masses: &[f64], h: f64) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        let d = sph_divergence(&f.positions, &f.velocities, masses, h)?;
        total += d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
    }
    Ok(total / frames.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub position_mse: f64,
    pub velocity_mse: f64,
    pub position_curve: Vec<f64>,
    pub velocity_curve: Vec<f64>,
    pub frames_per_second: Option<f64>,
}

impl fmt::Display for EvalReport {
    /// Flat `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "position_mse = {}", self.position_mse)?;
        writeln!(f, "velocity_mse = {}", self.velocity_mse)?;
        writeln!(f, "frames = {}", self.position_curve.len())?;
        if let Some(fps) = self.frames_per_second {
            writeln!(f, "frames_per_second = {fps}")?;
        }
        for (k, (p, v)) in self
            .position_curve
            .iter()
            .zip(&self.velocity_curve)
            .enumerate()
        {
            writeln!(f, "position_mse.{k} = {p}")?;
            writeln!(f, "velocity_mse.{k} = {v}")?;
        }
        Ok(())
    }
}

/// Compares aligned trajectories frame by frame.
///
/// A reference with exactly one more frame than the prediction is taken to
/// include the initial state, which is skipped.
pub fn eval_metrics(pred: &Trajectory, reference: &Trajectory) -> Result<EvalReport> {
    let truth = match reference.frame_count().checked_sub(pred.frame_count()) {
        Some(0) => reference.frames(),
        Some(1) => &reference.frames()[1..],
        _ => {
            return Err(Error::shape(
                "eval",
                format!(
                    "{} predicted vs {} reference frames",
                    pred.frame_count(),
                    reference.frame_count()
                ),
            ))
        }
    };
    let n = check_frames("eval", pred.frames(), truth)?;
    let per = (n * 3) as f64;
    let position_curve: Vec<f64> = pred
        .frames()
        .iter()
        .zip(truth)
        .map(|(p, t)| squared_error(&p.positions, &t.positions) / per)
        .collect();
    let velocity_curve: Vec<f64> = pred
        .frames()
        .iter()
        .zip(truth)
        .map(|(p, t)| squared_error(&p.velocities, &t.velocities) / per)
        .collect();
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    Ok(EvalReport {
        position_mse: mean(&position_curve),
        velocity_mse: mean(&velocity_curve),
        position_curve,
        velocity_curve,
        frames_per_second: None,
    })
}
