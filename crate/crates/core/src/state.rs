//! Lagrangian particle state: simulated particles, static boundary samples,
//! rest-shape topology and time-indexed trajectories.
//!
//! Attribute channel 0 is always the particle mass. Boundary attribute
//! channels 0..3, when present, hold the outward unit normal.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Attribute channel holding the particle mass.
pub const MASS_CHANNEL: usize = 0;

/// Tolerance on boundary normal length.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

pub(crate) fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

fn flat(v: &[Vec3]) -> impl Iterator<Item = f64> + '_ {
    v.iter().flat_map(|p| p.iter().copied())
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm_sq3(a: Vec3) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

/// Simulated particles at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    forces: Vec<Vec3>,
    /// Row-major `N x channels`.
    attributes: Vec<f64>,
    channels: usize,
    rest_positions: Option<Vec<Vec3>>,
}

impl ParticleSystem {
    pub fn new(
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        forces: Vec<Vec3>,
        attributes: Vec<f64>,
        channels: usize,
        rest_positions: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::invalid(
                "particle system",
                "needs at least one particle",
            ));
        }
        if velocities.len() != n || forces.len() != n {
            return Err(Error::invalid(
                "particle system",
                format!(
                    "positions/velocities/forces have {}/{}/{} rows",
                    n,
                    velocities.len(),
                    forces.len()
                ),
            ));
        }
        if channels == 0 || attributes.len() != n * channels {
            return Err(Error::invalid(
                "attributes",
                format!(
                    "expected {n} x {channels} (mass channel required), got {} values",
                    attributes.len()
                ),
            ));
        }
        if let Some(rest) = &rest_positions {
            if rest.len() != n {
                return Err(Error::invalid(
                    "rest positions",
                    format!("expected {n} rows, got {}", rest.len()),
                ));
            }
            check_finite("rest positions", flat(rest))?;
        }
        check_finite("positions", flat(&positions))?;
        check_finite("velocities", flat(&velocities))?;
        check_finite("forces", flat(&forces))?;
        check_finite("attributes", attributes.iter().copied())?;
        for i in 0..n {
            let m = attributes[i * channels + MASS_CHANNEL];
            if m <= 0.0 {
                return Err(Error::invalid(
                    "mass",
                    format!("particle {i} has non-positive mass {m}"),
                ));
            }
        }
        Ok(Self {
            positions,
            velocities,
            forces,
            attributes,
            channels,
            rest_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    pub fn forces(&self) -> &[Vec3] {
        &self.forces
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn attribute_channels(&self) -> usize {
        self.channels
    }

    pub fn attribute_row(&self, i: usize) -> &[f64] {
        &self.attributes[i * self.channels..(i + 1) * self.channels]
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.attributes[i * self.channels + MASS_CHANNEL]
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mass(i)).collect()
    }

    pub fn rest_positions(&self) -> Option<&[Vec3]> {
        self.rest_positions.as_deref()
    }

    /// Copy with a new kinematic state and forces; attributes and rest shape are kept.
    pub fn with_state(
        &self,
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        forces: Vec<Vec3>,
    ) -> Result<Self> {
        Self::new(
            positions,
            velocities,
            forces,
            self.attributes.clone(),
            self.channels,
            self.rest_positions.clone(),
        )
    }

    pub fn with_attributes(&self, attributes: Vec<f64>) -> Result<Self> {
        Self::new(
            self.positions.clone(),
            self.velocities.clone(),
            self.forces.clone(),
            attributes,
            self.channels,
            self.rest_positions.clone(),
        )
    }
}

/// Static boundary samples (walls, floors, obstacles).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BoundarySet {
    positions: Vec<Vec3>,
    attributes: Vec<f64>,
    channels: usize,
}

impl BoundarySet {
    pub fn new(positions: Vec<Vec3>, attributes: Vec<f64>, channels: usize) -> Result<Self> {
        let nb = positions.len();
        if attributes.len() != nb * channels {
            return Err(Error::invalid(
                "boundary attributes",
                format!(
                    "expected {nb} x {channels}, got {} values",
                    attributes.len()
                ),
            ));
        }
        check_finite("boundary positions", flat(&positions))?;
        check_finite("boundary attributes", attributes.iter().copied())?;
        if channels >= 3 {
            for j in 0..nb {
                let n = &attributes[j * channels..j * channels + 3];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > NORMAL_TOLERANCE {
                    return Err(Error::invalid(
                        "boundary normal",
                        format!("sample {j} has normal length {len}"),
                    ));
                }
            }
        }
        Ok(Self {
            positions,
            attributes,
            channels,
        })
    }

    /// No boundary samples; `channels` still fixes the feature width.
    pub fn empty(channels: usize) -> Self {
        Self {
            positions: Vec::new(),
            attributes: Vec::new(),
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn attribute_row(&self, j: usize) -> &[f64] {
        &self.attributes[j * self.channels..(j + 1) * self.channels]
    }
}

/// Undirected rest-shape connectivity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Topology {
    edges: Vec<(u32, u32)>,
}

impl Topology {
    pub fn new(edges: Vec<(u32, u32)>, n: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i == j {
                return Err(Error::invalid("topology", format!("self edge ({i}, {j})")));
            }
            if i as usize >= n || j as usize >= n {
                return Err(Error::invalid(
                    "topology",
                    format!("edge ({i}, {j}) out of range for {n} particles"),
                ));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::invalid(
                    "topology",
                    format!("duplicate edge ({i}, {j})"),
                ));
            }
        }
        Ok(Self { edges })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Symmetric adjacency lists, ascending per particle.
    pub fn adjacency(&self, n: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &self.edges {
            adj[i as usize].push(j as usize);
            adj[j as usize].push(i as usize);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Longest edge measured on the given rest positions (0 when empty).
    pub fn max_rest_length(&self, rest: &[Vec3]) -> f64 {
        self.edges
            .iter()
            .map(|&(i, j)| norm_sq3(sub3(rest[j as usize], rest[i as usize])).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Supplies empty placeholders for inputs a domain does not have, so the
/// corrector always sees the same three neighborhood branches.
pub fn zero_fill_absent(
    system: ParticleSystem,
    topology: Option<Topology>,
    boundary: Option<BoundarySet>,
    boundary_channels: usize,
) -> (ParticleSystem, Topology, BoundarySet) {
    (
        system,
        topology.unwrap_or_default(),
        boundary.unwrap_or_else(|| BoundarySet::empty(boundary_channels)),
    )
}

/// Applies `M^-1` to a force field: row `i` becomes `F_i / m_i`.
pub fn mass_matrix_inverse_apply(system: &ParticleSystem, forces: &[Vec3]) -> Result<Vec<Vec3>> {
    if forces.len() != system.len() {
        return Err(Error::shape(
            "mass_matrix_inverse_apply",
            format!("{} force rows for {} particles", forces.len(), system.len()),
        ));
    }
    forces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let m = system.mass(i);
            if m <= 0.0 {
                return Err(Error::invalid(
                    "mass",
                    format!("particle {i} has non-positive mass {m}"),
                ));
            }
            Ok([f[0] / m, f[1] / m, f[2] / m])
        })
        .collect()
}

/// One recorded instant of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub forces: Vec<Vec3>,
}

/// Time-indexed particle states plus static scene data.
///
/// Payloads are stored at 32-bit precision: every float is rounded through
/// `f32` on construction so the binary format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dt: f64,
    frames: Vec<Frame>,
    attributes: Vec<f64>,
    attr_channels: usize,
    rest_positions: Option<Vec<Vec3>>,
    boundary: BoundarySet,
    topology: Topology,
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn q3(v: &mut [Vec3]) {
    for p in v {
        for c in p.iter_mut() {
            *c = q(*c);
        }
    }
}

impl Trajectory {
    pub fn new(
        dt: f64,
        mut frames: Vec<Frame>,
        mut attributes: Vec<f64>,
        attr_channels: usize,
        rest_positions: Option<Vec<Vec3>>,
        boundary: BoundarySet,
        topology: Topology,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(
                "dt",
                format!("must be positive and finite, got {dt}"),
            ));
        }
        let Some(first) = frames.first() else {
            return Err(Error::invalid("trajectory", "no frames"));
        };
        let n = first.positions.len();
        // Rest positions exist exactly when there is a topology.
        let mut rest = if topology.is_empty() {
            None
        } else {
            Some(rest_positions.unwrap_or_else(|| first.positions.clone()))
        };
        for f in frames.iter_mut() {
            q3(&mut f.positions);
            q3(&mut f.velocities);
            q3(&mut f.forces);
        }
        for a in attributes.iter_mut() {
            *a = q(*a);
        }
        if let Some(r) = rest.as_mut() {
            q3(r);
        }
        let mut bpos = boundary.positions.clone();
        q3(&mut bpos);
        let battr: Vec<f64> = boundary.attributes.iter().map(|&x| q(x)).collect();
        let boundary = BoundarySet::new(bpos, battr, boundary.channels)?;

        for (k, f) in frames.iter().enumerate() {
            if f.positions.len() != n || f.velocities.len() != n || f.forces.len() != n {
                return Err(Error::invalid(
                    "trajectory",
                    format!("frame {k} does not have {n} particles"),
                ));
            }
            check_finite(&format!("frame {k} positions"), flat(&f.positions))?;
            check_finite(&format!("frame {k} velocities"), flat(&f.velocities))?;
            check_finite(&format!("frame {k} forces"), flat(&f.forces))?;
        }
        // Validates masses, attribute width and the rest shape.
        let first = &frames[0];
        ParticleSystem::new(
            first.positions.clone(),
            first.velocities.clone(),
            first.forces.clone(),
            attributes.clone(),
            attr_channels,
            rest.clone(),
        )?;
        Topology::new(topology.edges.clone(), n)?;
        Ok(Self {
            dt,
            frames,
            attributes,
            attr_channels,
            rest_positions: rest,
            boundary,
            topology,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn particle_count(&self) -> usize {
        self.frames[0].positions.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &Frame {
        &self.frames[k]
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn attribute_channels(&self) -> usize {
        self.attr_channels
    }

    pub fn rest_positions(&self) -> Option<&[Vec3]> {
        self.rest_positions.as_deref()
    }

    pub fn boundary(&self) -> &BoundarySet {
        &self.boundary
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Particle system at frame `k`.
    pub fn system_at(&self, k: usize) -> Result<ParticleSystem> {
        let f = &self.frames[k];
        ParticleSystem::new(
            f.positions.clone(),
            f.velocities.clone(),
            f.forces.clone(),
            self.attributes.clone(),
            self.attr_channels,
            self.rest_positions.clone(),
        )
    }

    /// Same scene with different frames (e.g. a predicted rollout).
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        Self::new(
            self.dt,
            frames,
            self.attributes.clone(),
            self.attr_channels,
            self.rest_positions.clone(),
            self.boundary.clone(),
            self.topology.clone(),
        )
    }

    /// Frames `start..start+len` as a new trajectory.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames.len() || len == 0 {
            return Err(Error::invalid(
                "window",
                format!("{start}+{len} exceeds {} frames", self.frames.len()),
            ));
        }
        self.with_frames(self.frames[start..start + len].to_vec())
    }
}
