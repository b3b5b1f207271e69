//! Ground-truth generators for small scenes with known physics.
//!
//! Each generator steps its own integrator at `dt / SUBSTEPS` and records
//! every `SUBSTEPS`-th state. Constant gravity is integrated exactly inside a
//! substep; interaction forces use semi-implicit Euler.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::state::{BoundarySet, Frame, Topology, Trajectory, Vec3};
use crate::trajio::save_trajectory;

pub const SUBSTEPS: usize = 10;
pub const STANDARD_GRAVITY: Vec3 = [0.0, 0.0, -9.81];
pub const BOUNDARY_CHANNELS: usize = 3;
/// Attribute channel holding the friction coefficient in slope scenes.
pub const FRICTION_CHANNEL: usize = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

fn positive(what: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("must be positive, got {x}")))
    }
}

fn sequence_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn axpy(a: &mut Vec3, s: f64, b: Vec3) {
    (0..3).for_each(|d| a[d] += s * b[d]);
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// One substep: `force` is the interaction force per particle, gravity is exact.
fn substep(
    x: &mut [Vec3],
    v: &mut [Vec3],
    force: &[Vec3],
    masses: &[f64],
    gravity: Vec3,
    h: f64,
    fixed: &[bool],
) {
    for i in 0..x.len() {
        if fixed.get(i).copied().unwrap_or(false) {
            continue;
        }
        let a: Vec3 = std::array::from_fn(|d| force[i][d] / masses[i]);
        axpy(&mut v[i], h, a);
        axpy(&mut x[i], h, v[i]);
        // Exact constant-acceleration drift and kick for gravity.
        axpy(&mut x[i], 0.5 * h * h, gravity);
        axpy(&mut v[i], h, gravity);
    }
}

fn gravity_forces(masses: &[f64], gravity: Vec3, fixed: &[bool]) -> Vec<Vec3> {
    masses
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if fixed.get(i).copied().unwrap_or(false) {
                [0.0; 3]
            } else {
                gravity.map(|g| m * g)
            }
        })
        .collect()
}

/// Records `frames` states, running `SUBSTEPS` substeps of `interaction` between them.
#[allow(clippy::too_many_arguments)]
fn integrate(
    mut x: Vec<Vec3>,
    mut v: Vec<Vec3>,
    masses: &[f64],
    gravity: Vec3,
    fixed: &[bool],
    dt: f64,
    frames: usize,
    interaction: impl Fn(&[Vec3], &[Vec3]) -> Vec<Vec3>,
) -> Vec<Frame> {
    let forces = gravity_forces(masses, gravity, fixed);
    let h = dt / SUBSTEPS as f64;
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        if k > 0 {
            for _ in 0..SUBSTEPS {
                let f = interaction(&x, &v);
                substep(&mut x, &mut v, &f, masses, gravity, h, fixed);
            }
        }
        out.push(Frame {
            positions: x.clone(),
            velocities: v.clone(),
            forces: forces.clone(),
        });
    }
    out
}

/// Closed-form free flight sampled at `k * dt`.
pub fn simulate_ballistic(
    x0: &[Vec3],
    v0: &[Vec3],
    masses: &[f64],
    gravity: Vec3,
    dt: f64,
    frames: usize,
) -> Vec<Frame> {
    let forces = gravity_forces(masses, gravity, &[]);
    (0..frames)
        .map(|k| {
            let t = k as f64 * dt;
            Frame {
                positions: x0
                    .iter()
                    .zip(v0)
                    .map(|(x, v)| {
                        std::array::from_fn(|d| x[d] + v[d] * t + 0.5 * gravity[d] * t * t)
                    })
                    .collect(),
                velocities: v0
                    .iter()
                    .map(|v| std::array::from_fn(|d| v[d] + gravity[d] * t))
                    .collect(),
                forces: forces.clone(),
            }
        })
        .collect()
}

fn check_counts(n: usize, frames: usize, dt: f64) -> Result<()> {
    if n == 0 || frames == 0 {
        return Err(Error::invalid(
            "generator",
            format!("need particles and frames, got {n} and {frames}"),
        ));
    }
    positive("dt", dt)
}

fn random_in(rng: &mut ChaCha8Rng, lo: Vec3, hi: Vec3) -> Vec3 {
    std::array::from_fn(|d| rng.gen_range(lo[d]..=hi[d]))
}

/// Non-interacting particles under gravity in the unit box.
pub fn gen_ballistic(
    n: usize,
    frames: usize,
    dt: f64,
    gravity: Vec3,
    seed: u64,
) -> Result<Trajectory> {
    check_counts(n, frames, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<Vec3> = (0..n)
        .map(|_| random_in(&mut rng, [0.1; 3], [0.9; 3]))
        .collect();
    let v0: Vec<Vec3> = (0..n)
        .map(|_| random_in(&mut rng, [-0.5; 3], [0.5; 3]))
        .collect();
    let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let frames = simulate_ballistic(&x0, &v0, &masses, gravity, dt, frames);
    Trajectory::new(
        dt,
        frames,
        masses,
        1,
        None,
        BoundarySet::empty(BOUNDARY_CHANNELS),
        Topology::empty(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloorParams {
    pub gravity: Vec3,
    pub height: f64,
    pub stiffness: f64,
    pub damping: f64,
    /// Spacing of the boundary samples on the floor.
    pub spacing: f64,
}

impl Default for FloorParams {
    fn default() -> Self {
        Self {
            gravity: STANDARD_GRAVITY,
            height: 0.0,
            stiffness: 1000.0,
            damping: 20.0,
            spacing: 0.05,
        }
    }
}

/// Penalty contact with the floor plane.
pub fn floor_force(p: &FloorParams, x: Vec3, v: Vec3) -> Vec3 {
    if x[2] >= p.height {
        return [0.0; 3];
    }
    [0.0, 0.0, p.stiffness * (p.height - x[2]) - p.damping * v[2]]
}

pub fn simulate_floor(
    x0: Vec<Vec3>,
    v0: Vec<Vec3>,
    masses: &[f64],
    p: &FloorParams,
    dt: f64,
    frames: usize,
) -> Vec<Frame> {
    integrate(x0, v0, masses, p.gravity, &[], dt, frames, |x, v| {
        x.iter()
            .zip(v)
            .map(|(&x, &v)| floor_force(p, x, v))
            .collect()
    })
}

fn floor_samples(lo: f64, hi: f64, spacing: f64, height: f64) -> BoundarySet {
    let count = ((hi - lo) / spacing).round() as usize + 1;
    let mut pos = Vec::with_capacity(count * count);
    for a in 0..count {
        for b in 0..count {
            pos.push([lo + a as f64 * spacing, lo + b as f64 * spacing, height]);
        }
    }
    let attrs = pos.iter().flat_map(|_| [0.0, 0.0, 1.0]).collect();
    BoundarySet::new(pos, attrs, BOUNDARY_CHANNELS).expect("floor samples are well formed")
}

/// Particles dropped onto a penalty floor; the force channel carries gravity only.
pub fn gen_floor_contact(
    n: usize,
    frames: usize,
    dt: f64,
    p: &FloorParams,
    seed: u64,
) -> Result<Trajectory> {
    check_counts(n, frames, dt)?;
    positive("floor stiffness", p.stiffness)?;
    positive("floor spacing", p.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = p.height;
    let x0: Vec<Vec3> = (0..n)
        .map(|_| random_in(&mut rng, [0.2, 0.2, h + 0.1], [0.8, 0.8, h + 0.8]))
        .collect();
    let v0: Vec<Vec3> = (0..n)
        .map(|_| random_in(&mut rng, [-0.3, -0.3, -0.5], [0.3, 0.3, 0.5]))
        .collect();
    let masses = vec![1.0; n];
    let frames = simulate_floor(x0, v0, &masses, p, dt, frames);
    Trajectory::new(
        dt,
        frames,
        masses,
        1,
        None,
        floor_samples(-0.1, 1.1, p.spacing, h),
        Topology::empty(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpringParams {
    pub nx: usize,
    pub ny: usize,
    pub stiffness: f64,
    pub rest_length: f64,
    pub damping: f64,
    pub gravity: Vec3,
    pub mass: f64,
    /// Grid indices `j * nx + i` held fixed.
    pub pinned: Vec<usize>,
    /// Amplitude of the random initial velocity.
    pub jitter: f64,
}

impl Default for SpringParams {
    fn default() -> Self {
        Self {
            nx: 6,
            ny: 6,
            stiffness: 1000.0,
            rest_length: 0.08,
            damping: 2.0,
            gravity: STANDARD_GRAVITY,
            mass: 1.0,
            pinned: vec![0, 5],
            jitter: 0.5,
        }
    }
}

/// Hookean springs with damping along each edge.
pub fn spring_forces(
    x: &[Vec3],
    v: &[Vec3],
    edges: &[(u32, u32)],
    rest: &[f64],
    stiffness: f64,
    damping: f64,
) -> Vec<Vec3> {
    let mut f = vec![[0.0; 3]; x.len()];
    for (&(a, b), &r0) in edges.iter().zip(rest) {
        let (a, b) = (a as usize, b as usize);
        let d: Vec3 = std::array::from_fn(|k| x[b][k] - x[a][k]);
        let len = dot(d, d).sqrt();
        if len == 0.0 {
            continue;
        }
        let e = d.map(|c| c / len);
        let rel: Vec3 = std::array::from_fn(|k| v[b][k] - v[a][k]);
        let mag = stiffness * (len - r0) + damping * dot(rel, e);
        axpy(&mut f[a], mag, e);
        axpy(&mut f[b], -mag, e);
    }
    f
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_springs(
    x0: Vec<Vec3>,
    v0: Vec<Vec3>,
    masses: &[f64],
    edges: &[(u32, u32)],
    stiffness: f64,
    damping: f64,
    gravity: Vec3,
    fixed: &[bool],
    dt: f64,
    frames: usize,
) -> Vec<Frame> {
    let rest: Vec<f64> = edges
        .iter()
        .map(|&(a, b)| {
            let d: Vec3 = std::array::from_fn(|k| x0[b as usize][k] - x0[a as usize][k]);
            dot(d, d).sqrt()
        })
        .collect();
    integrate(x0, v0, masses, gravity, fixed, dt, frames, |x, v| {
        spring_forces(x, v, edges, &rest, stiffness, damping)
    })
}

pub fn grid_edges(nx: usize, ny: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let k = (j * nx + i) as u32;
            if i + 1 < nx {
                edges.push((k, k + 1));
            }
            if j + 1 < ny {
                edges.push((k, k + nx as u32));
            }
        }
    }
    edges
}

/// A horizontal mass-spring sheet; pinned particles carry zero force and velocity.
pub fn gen_spring_lattice(
    p: &SpringParams,
    frames: usize,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    if p.nx < 2 || p.ny < 2 {
        return Err(Error::invalid(
            "spring grid",
            format!("needs at least 2x2, got {}x{}", p.nx, p.ny),
        ));
    }
    let n = p.nx * p.ny;
    check_counts(n, frames, dt)?;
    positive("spring stiffness", p.stiffness)?;
    positive("rest length", p.rest_length)?;
    positive("particle mass", p.mass)?;
    if let Some(&i) = p.pinned.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(
            "pinned set",
            format!("index {i} outside {n} particles"),
        ));
    }
    let mut fixed = vec![false; n];
    p.pinned.iter().for_each(|&i| fixed[i] = true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (p.nx - 1) as f64 * p.rest_length;
    let depth = (p.ny - 1) as f64 * p.rest_length;
    let x0: Vec<Vec3> = (0..n)
        .map(|k| {
            let (i, j) = (k % p.nx, k / p.nx);
            [
                0.5 - width / 2.0 + i as f64 * p.rest_length,
                0.5 - depth / 2.0 + j as f64 * p.rest_length,
                0.7,
            ]
        })
        .collect();
    let v0: Vec<Vec3> = (0..n)
        .map(|k| {
            if fixed[k] {
                [0.0; 3]
            } else {
                random_in(&mut rng, [-p.jitter; 3], [p.jitter; 3])
            }
        })
        .collect();
    let masses = vec![p.mass; n];
    let edges = grid_edges(p.nx, p.ny);
    let frames = simulate_springs(
        x0.clone(),
        v0,
        &masses,
        &edges,
        p.stiffness,
        p.damping,
        p.gravity,
        &fixed,
        dt,
        frames,
    );
    let topology = Topology::new(edges, n)?;
    Trajectory::new(
        dt,
        frames,
        masses,
        1,
        Some(x0),
        BoundarySet::empty(BOUNDARY_CHANNELS),
        topology,
    )
}

/// A ramp for `x < 0` descending onto flat ground at `z = 0`, with friction.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeParams {
    pub angle_degrees: f64,
    pub gravity: Vec3,
    pub stiffness: f64,
    pub damping: f64,
    /// Tangential speed below which friction is linear in velocity.
    pub slip_speed: f64,
    pub spacing: f64,
    /// Ramp x coordinate of the body centre at rest.
    pub start: f64,
}

impl Default for SlopeParams {
    fn default() -> Self {
        Self {
            angle_degrees: 30.0,
            gravity: STANDARD_GRAVITY,
            stiffness: 2000.0,
            damping: 40.0,
            slip_speed: 0.01,
            spacing: 0.05,
            start: -0.45,
        }
    }
}

impl SlopeParams {
    fn ramp_normal(&self) -> Vec3 {
        let t = self.angle_degrees.to_radians();
        [t.sin(), 0.0, t.cos()]
    }

    pub fn surface_height(&self, x: f64) -> f64 {
        if x < 0.0 {
            -x * self.angle_degrees.to_radians().tan()
        } else {
            0.0
        }
    }

    fn contact(&self, mu: f64, m: f64, x: Vec3, v: Vec3) -> Vec3 {
        let n = if x[0] < 0.0 {
            self.ramp_normal()
        } else {
            [0.0, 0.0, 1.0]
        };
        let depth = -dot(n, x);
        if depth <= 0.0 {
            return [0.0; 3];
        }
        let vn = dot(n, v);
        let fn_ = (self.stiffness * m * depth - self.damping * m * vn).max(0.0);
        let vt: Vec3 = std::array::from_fn(|d| v[d] - vn * n[d]);
        let speed = dot(vt, vt).sqrt().max(self.slip_speed);
        std::array::from_fn(|d| fn_ * n[d] - mu * fn_ * vt[d] / speed)
    }
}

pub fn simulate_slope(
    x0: Vec<Vec3>,
    mu: &[f64],
    masses: &[f64],
    p: &SlopeParams,
    dt: f64,
    frames: usize,
) -> Vec<Frame> {
    let v0 = vec![[0.0; 3]; x0.len()];
    integrate(x0, v0, masses, p.gravity, &[], dt, frames, |x, v| {
        (0..x.len())
            .map(|i| p.contact(mu[i], masses[i], x[i], v[i]))
            .collect()
    })
}

fn slope_samples(p: &SlopeParams) -> BoundarySet {
    let n = p.ramp_normal();
    let mut pos = Vec::new();
    let mut attrs = Vec::new();
    let nx = (1.6 / p.spacing).round() as usize;
    for a in 0..=nx {
        let x = -0.6 + a as f64 * p.spacing;
        let normal = if x < 0.0 { n } else { [0.0, 0.0, 1.0] };
        for b in -3i32..=3 {
            pos.push([x, b as f64 * p.spacing, p.surface_height(x)]);
            attrs.extend(normal);
        }
    }
    BoundarySet::new(pos, attrs, BOUNDARY_CHANNELS).expect("slope samples are well formed")
}

/// A 3x3 body released on the ramp; attribute channel 1 is its friction coefficient.
pub fn gen_slope(mu: f64, frames: usize, dt: f64, p: &SlopeParams) -> Result<Trajectory> {
    check_counts(9, frames, dt)?;
    positive("slope stiffness", p.stiffness)?;
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::invalid(
            "friction",
            format!("must be non-negative, got {mu}"),
        ));
    }
    let t = p.angle_degrees.to_radians();
    let along = [t.cos(), 0.0, -t.sin()];
    let n = p.ramp_normal();
    let settle = 9.81 * t.cos() / p.stiffness;
    let centre = [p.start, 0.0, p.surface_height(p.start)];
    let x0: Vec<Vec3> = (0..9)
        .map(|k| {
            let (a, b) = ((k % 3) as f64 - 1.0, (k / 3) as f64 - 1.0);
            std::array::from_fn(|d| {
                centre[d] + a * p.spacing * along[d] + b * p.spacing * [0.0, 1.0, 0.0][d]
                    - settle * n[d]
            })
        })
        .collect();
    let masses = vec![1.0; 9];
    let frames = simulate_slope(x0, &[mu; 9], &masses, p, dt, frames);
    let attrs = (0..9).flat_map(|_| [1.0, mu]).collect();
    Trajectory::new(
        dt,
        frames,
        attrs,
        2,
        None,
        slope_samples(p),
        Topology::empty(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Ballistic,
    Floor,
    Spring,
    Slope,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ballistic" => Ok(Self::Ballistic),
            "floor" => Ok(Self::Floor),
            "spring" => Ok(Self::Spring),
            "slope" => Ok(Self::Slope),
            other => Err(Error::invalid(
                "scenario",
                format!("unknown scenario {other:?}"),
            )),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ballistic => "ballistic",
            Self::Floor => "floor",
            Self::Spring => "spring",
            Self::Slope => "slope",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scenario: Scenario,
    pub count: usize,
    pub val: usize,
    pub test: usize,
    pub particles: usize,
    pub frames: usize,
    pub dt: f64,
    pub seed: u64,
    /// Friction range spread evenly across slope sequences.
    pub friction: (f64, f64),
}

impl DatasetSpec {
    pub fn new(scenario: Scenario, count: usize, seed: u64) -> Self {
        let (particles, frames, dt) = match scenario {
            Scenario::Ballistic | Scenario::Floor => (64, 60, 0.01),
            Scenario::Spring => (36, 40, 0.01),
            Scenario::Slope => (9, 80, 0.02),
        };
        Self {
            scenario,
            count,
            val: 0,
            test: 0,
            particles,
            frames,
            dt,
            seed,
            friction: (0.2, 0.4),
        }
    }

    pub fn friction_of(&self, index: usize) -> f64 {
        let (lo, hi) = self.friction;
        if self.count <= 1 {
            lo
        } else {
            lo + (hi - lo) * index as f64 / (self.count - 1) as f64
        }
    }

    /// Sequence `index`, independent of how many others are generated.
    pub fn sequence(&self, index: usize) -> Result<Trajectory> {
        let seed = sequence_rng(self.seed, index as u64).gen();
        match self.scenario {
            Scenario::Ballistic => {
                gen_ballistic(self.particles, self.frames, self.dt, STANDARD_GRAVITY, seed)
            }
            Scenario::Floor => gen_floor_contact(
                self.particles,
                self.frames,
                self.dt,
                &FloorParams::default(),
                seed,
            ),
            Scenario::Spring => {
                let side = (self.particles as f64).sqrt().round().max(2.0) as usize;
                let params = SpringParams {
                    nx: side,
                    ny: side,
                    pinned: vec![0, side - 1],
                    ..SpringParams::default()
                };
                gen_spring_lattice(&params, self.frames, self.dt, seed)
            }
            Scenario::Slope => gen_slope(
                self.friction_of(index),
                self.frames,
                self.dt,
                &SlopeParams::default(),
            ),
        }
    }

    pub fn split_of(&self, index: usize) -> Split {
        let train = self.count.saturating_sub(self.val + self.test);
        if index < train {
            Split::Train
        } else if index < train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// All sequences in order, generated in parallel.
    pub fn generate(&self) -> Result<Vec<Trajectory>> {
        if self.val + self.test > self.count {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} val + {} test exceed {} sequences",
                    self.val, self.test, self.count
                ),
            ));
        }
        (0..self.count)
            .into_par_iter()
            .map(|i| self.sequence(i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

/// Writes every sequence plus a manifest of `file split` lines into `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let trajs = spec.generate()?;
    let mut entries = Vec::with_capacity(trajs.len());
    let mut text = format!("# scenario {} seed {}\n", spec.scenario, spec.seed);
    for (i, t) in trajs.iter().enumerate() {
        let file = format!("seq_{i:04}.traj");
        save_trajectory(t, dir.join(&file))?;
        let split = spec.split_of(i);
        text.push_str(&format!("{file} {}\n", split.as_str()));
        entries.push(ManifestEntry { file, split });
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            field: format!("line {}", k + 1),
            reason,
        };
        let mut parts = line.split_whitespace();
        let (Some(file), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected `file split`, got {line:?}")));
        };
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        out.push(ManifestEntry {
            file: file.to_string(),
            split,
        });
    }
    Ok(out)
}

/// Paths of the manifest entries in `split`.
pub fn split_paths(dir: &Path, entries: &[ManifestEntry], split: Split) -> Vec<PathBuf> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| dir.join(&e.file))
        .collect()
}
