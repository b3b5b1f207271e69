//! Particle tokenizer: lattice-kernel aggregation over the spatial, boundary
//! and topology neighborhoods, concatenated with each particle's own state.

use crate::autodiff::{Graph, LatticeCell, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{linear, norm, ModelConfig};
use crate::neighbors::{build_boundary, build_spatial, build_topology, NeighborList};
use crate::state::{BoundarySet, Topology, Trajectory, Vec3, MASS_CHANNEL};

/// Topology kernel support as a multiple of the longest rest edge.
pub const TOPOLOGY_RADIUS_FACTOR: f64 = 1.5;

/// Everything about a simulated system that stays fixed during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    attributes: Vec<f64>,
    channels: usize,
    boundary: BoundarySet,
    topology: Topology,
    rest: Option<Vec<Vec3>>,
    topology_neighbors: NeighborList,
    topology_radius: f64,
}

impl Scene {
    pub fn new(
        attributes: Vec<f64>,
        channels: usize,
        boundary: BoundarySet,
        topology: Topology,
        rest: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        if channels == 0 || !attributes.len().is_multiple_of(channels) {
            return Err(Error::shape(
                "scene",
                format!(
                    "{} attribute values with {channels} channels",
                    attributes.len()
                ),
            ));
        }
        let n = attributes.len() / channels;
        if let Some(i) = (0..n).find(|&i| !(attributes[i * channels + MASS_CHANNEL] > 0.0)) {
            return Err(Error::invalid(
                "mass",
                format!("particle {i} has non-positive mass"),
            ));
        }
        let (topology_neighbors, topology_radius) = match (&rest, topology.is_empty()) {
            (_, true) => (NeighborList::empty(n), 1.0),
            (Some(rest), false) => {
                if rest.len() != n {
                    return Err(Error::shape(
                        "scene",
                        format!("{} rest positions for {n} particles", rest.len()),
                    ));
                }
                let len = topology.max_rest_length(rest);
                if !(len > 0.0) {
                    return Err(Error::invalid("topology", "rest edges have zero length"));
                }
                (
                    build_topology(&topology, rest)?,
                    TOPOLOGY_RADIUS_FACTOR * len,
                )
            }
            (None, false) => {
                return Err(Error::invalid(
                    "topology",
                    "topology branch needs rest positions",
                ));
            }
        };
        Ok(Self {
            attributes,
            channels,
            boundary,
            topology,
            rest,
            topology_neighbors,
            topology_radius,
        })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        Self::new(
            traj.attributes().to_vec(),
            traj.attribute_channels(),
            traj.boundary().clone(),
            traj.topology().clone(),
            traj.rest_positions().map(<[Vec3]>::to_vec),
        )
    }

    pub fn len(&self) -> usize {
        self.attributes.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn attribute_channels(&self) -> usize {
        self.channels
    }

    pub fn masses(&self) -> Vec<f64> {
        self.attributes
            .chunks_exact(self.channels)
            .map(|c| c[MASS_CHANNEL])
            .collect()
    }

    pub fn boundary(&self) -> &BoundarySet {
        &self.boundary
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn rest_positions(&self) -> Option<&[Vec3]> {
        self.rest.as_deref()
    }

    pub fn topology_neighbors(&self) -> &NeighborList {
        &self.topology_neighbors
    }

    pub fn topology_radius(&self) -> f64 {
        self.topology_radius
    }

    pub fn with_attributes(&self, attributes: Vec<f64>) -> Result<Self> {
        Self::new(
            attributes,
            self.channels,
            self.boundary.clone(),
            self.topology.clone(),
            self.rest.clone(),
        )
    }

    /// The same scene moved rigidly by `t`.
    pub fn translated(&self, t: Vec3) -> Result<Self> {
        let boundary = BoundarySet::new(
            translate_points(self.boundary.positions(), t),
            self.boundary.attributes().to_vec(),
            self.boundary.channels(),
        )?;
        Self::new(
            self.attributes.clone(),
            self.channels,
            boundary,
            self.topology.clone(),
            self.rest.as_ref().map(|r| translate_points(r, t)),
        )
    }
}

/// The three neighborhoods of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub spatial: NeighborList,
    pub boundary: NeighborList,
}

pub fn build_neighborhoods(
    cfg: &ModelConfig,
    scene: &Scene,
    positions: &[Vec3],
) -> Result<Neighborhoods> {
    Ok(Neighborhoods {
        spatial: build_spatial(positions, cfg.spatial_radius)?,
        boundary: build_boundary(positions, scene.boundary(), cfg.boundary_radius())?,
    })
}

/// A lattice kernel detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeKernel {
    pub res: usize,
    pub radius: f64,
    pub c_in: usize,
    pub c_out: usize,
    /// `(res^3 * c_in) x c_out`, vertex-major.
    pub entries: Tensor,
}

impl LatticeKernel {
    pub fn new(
        res: usize,
        radius: f64,
        c_in: usize,
        c_out: usize,
        entries: Tensor,
    ) -> Result<Self> {
        if res < 2 || !(radius > 0.0) || entries.shape() != (res * res * res * c_in, c_out) {
            return Err(Error::shape(
                "lattice kernel",
                format!(
                    "res {res}, radius {radius}, {c_in}x{c_out} blocks, entries {:?}",
                    entries.shape()
                ),
            ));
        }
        Ok(Self {
            res,
            radius,
            c_in,
            c_out,
            entries,
        })
    }

    pub fn from_store(store: &ParamStore, path: &str, radius: f64) -> Result<Self> {
        let p = store
            .get(path)
            .ok_or_else(|| Error::invalid("parameter path", format!("{path} not found")))?;
        let [res, _, _, c_in, c_out] = p.shape[..] else {
            return Err(Error::shape(
                "lattice kernel",
                format!("{path} has shape {:?}", p.shape),
            ));
        };
        Self::new(res, radius, c_in, c_out, store.tensor(path)?)
    }

    /// Row-major `c_in x c_out` block stored at lattice vertex `(x, y, z)`.
    pub fn vertex(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let v = (x * self.res + y) * self.res + z;
        let block = self.c_in * self.c_out;
        &self.entries.data()[v * block..(v + 1) * block]
    }

    /// Interpolated `c_in x c_out` matrix at displacement `r` (zero outside the support).
    pub fn eval(&self, r: Vec3) -> Vec<f64> {
        let block = self.c_in * self.c_out;
        let mut out = vec![0.0; block];
        if let Some(cell) = LatticeCell::locate(&r, self.res, self.radius) {
            for (v, w) in cell.corners() {
                for (o, x) in out
                    .iter_mut()
                    .zip(&self.entries.data()[v * block..(v + 1) * block])
                {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// `sum_j u_j W(r_j)` over one neighborhood.
    pub fn aggregate(&self, displacements: &[Vec3], features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if displacements.len() != features.len() {
            return Err(Error::shape(
                "branch_aggregate",
                format!(
                    "{} displacements, {} feature rows",
                    displacements.len(),
                    features.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.c_out];
        for (r, u) in displacements.iter().zip(features) {
            if u.len() != self.c_in {
                return Err(Error::shape(
                    "branch_aggregate",
                    format!("feature width {} vs {}", u.len(), self.c_in),
                ));
            }
            let w = self.eval(*r);
            for (c, uc) in u.iter().enumerate() {
                for (o, x) in out.iter_mut().zip(&w[c * self.c_out..(c + 1) * self.c_out]) {
                    *o += uc * x;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spatial,
    Boundary,
    Topology,
}

/// Per-pair `(displacement, feature)` rows of one branch for particle `i`.
pub fn branch_features(
    branch: Branch,
    scene: &Scene,
    neighbors: &Neighborhoods,
    velocities: &[Vec3],
    i: usize,
) -> Result<Vec<(Vec3, Vec<f64>)>> {
    let cp = scene.attribute_channels();
    let attr = |j: usize| &scene.attributes()[j * cp..(j + 1) * cp];
    let with_state =
        |j: usize| -> Vec<f64> { velocities[j].iter().chain(attr(j)).copied().collect() };
    Ok(match branch {
        Branch::Spatial => neighbors
            .spatial
            .neighbors(i)
            .iter()
            .zip(neighbors.spatial.displacements(i))
            .map(|(&j, &r)| (r, with_state(j)))
            .collect(),
        Branch::Boundary => neighbors
            .boundary
            .neighbors(i)
            .iter()
            .zip(neighbors.boundary.displacements(i))
            .map(|(&j, &r)| (r, boundary_row(scene.boundary(), j)))
            .collect(),
        Branch::Topology => {
            if !scene.topology().is_empty() && scene.rest_positions().is_none() {
                return Err(Error::invalid(
                    "topology",
                    "topology branch needs rest positions",
                ));
            }
            let t = scene.topology_neighbors();
            t.neighbors(i)
                .iter()
                .zip(t.displacements(i))
                .map(|(&j, &r)| {
                    let mut u = with_state(j);
                    u.extend_from_slice(&r);
                    (r, u)
                })
                .collect()
        }
    })
}

/// Boundary feature row; a constant 1 stands in when samples carry no attributes.
fn boundary_row(boundary: &BoundarySet, j: usize) -> Vec<f64> {
    if boundary.channels() == 0 {
        vec![1.0]
    } else {
        boundary.attribute_row(j).to_vec()
    }
}

/// Intermediate and final tokenizer outputs, all `N x width` tensors on the graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenizerOutput {
    pub spatial: Var,
    pub topology: Var,
    pub boundary: Var,
    pub own: Var,
    pub tokens: Var,
}

/// Pairs grouped by query, each group ordered by displacement so that
/// per-particle sums do not depend on how particles are numbered.
fn pair_lists(list: &NeighborList) -> (Vec<usize>, Vec<usize>, Vec<Vec3>) {
    let (mut qi, mut nj, mut disp) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..list.query_count() {
        let mut row: Vec<(Vec3, usize)> = list
            .displacements(i)
            .iter()
            .copied()
            .zip(list.neighbors(i).iter().copied())
            .collect();
        row.sort_by(|a, b| {
            (0..3)
                .map(|k| a.0[k].total_cmp(&b.0[k]))
                .find(|o| o.is_ne())
                .unwrap_or(a.1.cmp(&b.1))
        });
        for (r, j) in row {
            qi.push(i);
            nj.push(j);
            disp.push(r);
        }
    }
    (qi, nj, disp)
}

/// Tokenizes particles at predicted positions `x` with predicted velocities `v`.
///
/// `attrs` is `N x C_p`; it is a graph operand so attribute channels can be
/// differentiated through.
pub fn tokenize(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    neighbors: &Neighborhoods,
    x: Var,
    v: Var,
    attrs: Var,
) -> Result<TokenizerOutput> {
    let n = g.shape(x).0;
    if g.shape(x) != (n, 3) || g.shape(v) != (n, 3) || g.shape(attrs) != (n, cfg.particle_channels)
    {
        return Err(Error::shape(
            "tokenize",
            format!(
                "positions {:?}, velocities {:?}, attributes {:?} for {} channels",
                g.shape(x),
                g.shape(v),
                g.shape(attrs),
                cfg.particle_channels
            ),
        ));
    }
    if scene.len() != n
        || neighbors.spatial.query_count() != n
        || neighbors.boundary.query_count() != n
    {
        return Err(Error::shape(
            "tokenize",
            format!("scene or neighborhoods do not describe {n} particles"),
        ));
    }
    let res = cfg.lattice_res;
    let attrs = normalize_attributes(g, cfg, attrs)?;
    let state = g.concat(&[v, attrs])?;

    let (qi, nj, _) = pair_lists(&neighbors.spatial);
    let xi = g.gather(x, &qi)?;
    let xj = g.gather(x, &nj)?;
    let r = g.sub(xj, xi)?;
    let u = g.gather(state, &nj)?;
    let lattice = g.param(store, "tokenizer.lattice.S")?;
    let per_pair = g.lattice_conv(lattice, u, r, res, cfg.spatial_radius)?;
    let spatial = g.segment_sum(per_pair, &qi, n)?;

    let (qi, nj, _) = pair_lists(&neighbors.boundary);
    let b = scene.boundary();
    let xb: Vec<[f64; 3]> = nj.iter().map(|&j| b.positions()[j]).collect();
    let xb = g.constant(Tensor::from_rows(&xb));
    let xi = g.gather(x, &qi)?;
    let r = g.sub(xb, xi)?;
    let width = b.channels().max(1);
    let rows: Vec<f64> = nj.iter().flat_map(|&j| boundary_row(b, j)).collect();
    let u = g.constant(Tensor::new(nj.len(), width, rows)?);
    let lattice = g.param(store, "tokenizer.lattice.B")?;
    let per_pair = g.lattice_conv(lattice, u, r, res, cfg.boundary_radius())?;
    let boundary = g.segment_sum(per_pair, &qi, n)?;

    let topo = scene.topology_neighbors();
    let (qi, nj, disp) = pair_lists(topo);
    let r = g.constant(Tensor::from_rows(&disp));
    let sj = g.gather(state, &nj)?;
    let u = g.concat(&[sj, r])?;
    let lattice = g.param(store, "tokenizer.lattice.T")?;
    let per_pair = g.lattice_conv(lattice, u, r, res, scene.topology_radius())?;
    let topology = g.segment_sum(per_pair, &qi, n)?;

    let own = linear(g, store, "tokenizer.self", state)?;
    let joined = g.concat(&[spatial, topology, boundary, own])?;
    let h = linear(g, store, "tokenizer.mlp.fc1", joined)?;
    let h = g.relu(h);
    let h = linear(g, store, "tokenizer.mlp.fc2", h)?;
    let tokens = norm(g, store, "tokenizer.mlp.norm", h)?;
    Ok(TokenizerOutput {
        spatial,
        topology,
        boundary,
        own,
        tokens,
    })
}

fn normalize_attributes(g: &mut Graph, cfg: &ModelConfig, attrs: Var) -> Result<Var> {
    if cfg.attribute_scale.is_empty() {
        return Ok(attrs);
    }
    let c = cfg.particle_channels;
    let mut diag = vec![0.0; c * c];
    for k in 0..c {
        diag[k * c + k] = 1.0 / cfg.attribute_scale[k];
    }
    let diag = g.constant(Tensor::new(c, c, diag)?);
    let shift: Vec<f64> = (0..c)
        .map(|k| -cfg.attribute_center[k] / cfg.attribute_scale[k])
        .collect();
    let shift = g.constant(Tensor::new(1, c, shift)?);
    let scaled = g.matmul(attrs, diag)?;
    g.add_row(scaled, shift)
}

pub fn translate_points(points: &[Vec3], t: Vec3) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(res: usize, c_in: usize, c_out: usize, seed: u64) -> LatticeKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = res * res * res * c_in * c_out;
        let t = Tensor::new(
            res * res * res * c_in,
            c_out,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        LatticeKernel::new(res, 1.0, c_in, c_out, t).unwrap()
    }

    #[test]
    fn constant_lattice_interpolates_to_constant() {
        let m = [1.5, -2.0, 0.25, 4.0, 0.0, 3.0];
        let block: Vec<f64> = (0..27).flat_map(|_| m).collect();
        let k = LatticeKernel::new(3, 1.0, 2, 3, Tensor::new(54, 3, block).unwrap()).unwrap();
        for r in [[0.1, -0.3, 0.2], [0.5, 0.5, 0.5], [-0.9, 0.0, 0.1]] {
            for (a, b) in k.eval(r).iter().zip(m) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn origin_hits_center_vertex_on_odd_lattice() {
        let k = kernel(3, 2, 2, 1);
        assert_eq!(k.eval([0.0; 3]), k.vertex(1, 1, 1));
    }

    #[test]
    fn origin_averages_corners_on_two_point_lattice() {
        let k = kernel(2, 1, 2, 2);
        let mut mean = [0.0; 2];
        for v in 0..8 {
            for c in 0..2 {
                mean[c] += k.entries.get(v, c) / 8.0;
            }
        }
        let got = k.eval([0.0; 3]);
        for c in 0..2 {
            assert!((got[c] - mean[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn outside_support_is_zero() {
        let k = kernel(4, 2, 3, 3);
        assert!(k.eval([1.01, 0.0, 0.0]).iter().all(|&x| x == 0.0));
        assert!(k.eval([0.0, 0.0, 1.0]).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn identity_kernel_passes_feature_through() {
        let id: Vec<f64> = (0..64)
            .flat_map(|_| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .collect();
        let k = LatticeKernel::new(4, 1.0, 3, 3, Tensor::new(192, 3, id).unwrap()).unwrap();
        let a = k
            .aggregate(&[[0.2, 0.1, -0.3]], &[vec![1.0, 0.0, 0.0]])
            .unwrap();
        for (got, want) in a.iter().zip([1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(k.aggregate(&[], &[]).unwrap(), vec![0.0; 3]);
        assert!(k.aggregate(&[[0.0; 3]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn graph_lattice_matches_naive_aggregation() {
        let k = kernel(4, 3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disp: Vec<Vec3> = (0..5)
            .map(|_| {
                [
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                ]
            })
            .collect();
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // naive oracle: explicit per-neighbor row-vector times matrix
        let mut oracle = vec![0.0; 5];
        for (r, u) in disp.iter().zip(&feats) {
            let w = k.eval(*r);
            for o in 0..5 {
                for c in 0..3 {
                    oracle[o] += u[c] * w[c * 5 + o];
                }
            }
        }
        let mut g = Graph::new();
        let l = g.constant(k.entries.clone());
        let u = g.constant(Tensor::new(5, 3, feats.concat()).unwrap());
        let r = g.constant(Tensor::from_rows(&disp));
        let per = g.lattice_conv(l, u, r, 4, 1.0).unwrap();
        let sum = g.segment_sum(per, &[0; 5], 1).unwrap();
        for (a, b) in g.value(sum).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let naive = k.aggregate(&disp, &feats).unwrap();
        for (a, b) in naive.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kernel_is_continuous_across_cell_faces(
            axis in 0usize..3, face in 1usize..3, a in -0.5f64..0.5, b in -0.5f64..0.5, seed in 0u64..50,
        ) {
            let k = kernel(4, 2, 2, seed);
            // Interior lattice planes sit at r = -1 + 2 f / 3.
            let plane = -1.0 + 2.0 * face as f64 / 3.0;
            let mut lo = [a, b, 0.0];
            lo.rotate_right(axis);
            let mut hi = lo;
            lo[axis] = plane - 1e-12;
            hi[axis] = plane + 1e-12;
            let (wl, wh) = (k.eval(lo), k.eval(hi));
            for (x, y) in wl.iter().zip(&wh) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    fn scene_and_state(n: usize, seed: u64, with_topology: bool) -> (Scene, Vec<Vec3>, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = |rng: &mut ChaCha8Rng| (rng.gen_range(0..256) as f64) / 1024.0;
        let x: Vec<Vec3> = (0..n)
            .map(|_| [q(&mut rng), q(&mut rng), q(&mut rng)])
            .collect();
        let v: Vec<Vec3> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), 0.5, rng.gen_range(-1.0..1.0)])
            .collect();
        let attrs: Vec<f64> = (0..n)
            .flat_map(|_| [1.0 + rng.gen::<f64>(), rng.gen()])
            .collect();
        let bpos: Vec<Vec3> = (0..6).map(|_| [q(&mut rng), q(&mut rng), 0.0]).collect();
        let battr: Vec<f64> = (0..6).flat_map(|_| [0.0, 0.0, 1.0]).collect();
        let boundary = BoundarySet::new(bpos, battr, 3).unwrap();
        let (topo, rest) = if with_topology {
            let edges = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
            (Topology::new(edges, n).unwrap(), Some(x.clone()))
        } else {
            (Topology::empty(), None)
        };
        (Scene::new(attrs, 2, boundary, topo, rest).unwrap(), x, v)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            width: 16,
            heads: 2,
            rotary_dim: 6,
            spatial_width: 4,
            topology_width: 4,
            boundary_width: 4,
            self_width: 4,
            spatial_radius: 0.15,
            particle_channels: 2,
            boundary_channels: 3,
            ..ModelConfig::default()
        }
    }

    fn run(
        cfg: &ModelConfig,
        store: &ParamStore,
        scene: &Scene,
        x: &[Vec3],
        v: &[Vec3],
    ) -> (Vec<Tensor>, Tensor) {
        let mut g = Graph::inference();
        let nb = build_neighborhoods(cfg, scene, x).unwrap();
        let xv = g.constant(Tensor::from_rows(x));
        let vv = g.constant(Tensor::from_rows(v));
        let av = g.constant(Tensor::new(x.len(), 2, scene.attributes().to_vec()).unwrap());
        let out = tokenize(&mut g, store, cfg, scene, &nb, xv, vv, av).unwrap();
        let parts = [out.spatial, out.topology, out.boundary, out.own]
            .map(|p| g.value(p).clone())
            .to_vec();
        (parts, g.value(out.tokens).clone())
    }

    #[test]
    fn spatial_features_concatenate_velocity_and_attributes() {
        let boundary = BoundarySet::new(vec![[0.0, 0.0, 0.05]], vec![0.0, 0.0, 1.0], 3).unwrap();
        let scene = Scene::new(
            vec![1.0, 0.5, 1.0, 0.5],
            2,
            boundary,
            Topology::new(vec![(0, 1)], 2).unwrap(),
            Some(vec![[0.0; 3], [0.1, 0.0, 0.0]]),
        )
        .unwrap();
        let cfg = small_cfg();
        let x = [[0.0; 3], [0.05, 0.0, 0.0]];
        let v = [[0.0; 3], [0.0; 3]];
        let nb = build_neighborhoods(&cfg, &scene, &x).unwrap();
        let s = branch_features(Branch::Spatial, &scene, &nb, &v, 0).unwrap();
        assert_eq!(s, vec![([0.05, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 0.5])]);
        let t = branch_features(Branch::Topology, &scene, &nb, &v, 0).unwrap();
        assert_eq!(t[0].1[5..], [0.1, 0.0, 0.0]);
        let b = branch_features(Branch::Boundary, &scene, &nb, &v, 0).unwrap();
        assert_eq!(b, vec![([0.0, 0.0, 0.05], vec![0.0, 0.0, 1.0])]);
    }

    #[test]
    fn attribute_normalization_matches_prenormalized_input() {
        let (scene, x, v) = scene_and_state(12, 31, true);
        let plain = small_cfg();
        let mut normed = plain.clone();
        normed.attribute_center = vec![0.5, 0.25];
        normed.attribute_scale = vec![2.0, 0.125];
        let store = init_params(&plain, 4).unwrap();
        let shifted: Vec<f64> = scene
            .attributes()
            .chunks(2)
            .flat_map(|a| [(a[0] - 0.5) / 2.0, (a[1] - 0.25) / 0.125])
            .collect();
        let (_, want) = run(
            &plain,
            &store,
            &scene.with_attributes(shifted).unwrap(),
            &x,
            &v,
        );
        let (_, got) = run(&normed, &store, &scene, &x, &v);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn topology_without_rest_positions_is_rejected() {
        let r = Scene::new(
            vec![1.0, 1.0],
            1,
            BoundarySet::empty(3),
            Topology::new(vec![(0, 1)], 2).unwrap(),
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn absent_inputs_give_exactly_zero_blocks() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 1).unwrap();
        let (scene, x, v) = scene_and_state(8, 2, false);
        let scene = Scene::new(
            scene.attributes().to_vec(),
            2,
            BoundarySet::empty(3),
            Topology::empty(),
            None,
        )
        .unwrap();
        let (parts, _) = run(&cfg, &store, &scene, &x, &v);
        assert!(parts[1].data().iter().all(|&z| z == 0.0));
        assert!(parts[2].data().iter().all(|&z| z == 0.0));
        assert!(parts[0].data().iter().any(|&z| z != 0.0));
    }

    #[test]
    fn isolated_particle_with_zero_lattices_depends_on_own_state() {
        let cfg = small_cfg();
        let mut store = init_params(&cfg, 1).unwrap();
        for b in ["S", "T", "B"] {
            let p = store.get_mut(&format!("tokenizer.lattice.{b}")).unwrap();
            p.value.iter_mut().for_each(|z| *z = 0.0);
        }
        let mk = |x: Vec3, pad: bool| {
            let mut pos = vec![x];
            let mut attrs = vec![1.3, 0.2];
            if pad {
                pos.push([x[0] + 0.05, x[1], x[2]]);
                attrs.extend([2.0, 0.9]);
            }
            let n = pos.len();
            let scene =
                Scene::new(attrs, 2, BoundarySet::empty(3), Topology::empty(), None).unwrap();
            let v = vec![[0.3, -0.1, 0.2]; n];
            run(&cfg, &store, &scene, &pos, &v).1.row(0).to_vec()
        };
        assert_eq!(mk([0.0; 3], false), mk([5.0, 1.0, 2.0], true));
    }

    #[test]
    fn tokens_are_exactly_translation_invariant() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 3).unwrap();
        let (scene, x, v) = scene_and_state(12, 4, true);
        let (_, base) = run(&cfg, &store, &scene, &x, &v);
        let t = [0.375, -1.25, 2.5];
        let moved = scene.translated(t).unwrap();
        let (_, shifted) = run(&cfg, &store, &moved, &translate_points(&x, t), &v);
        assert_eq!(base, shifted);
    }

    #[test]
    fn tokens_are_permutation_equivariant() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 5).unwrap();
        let n = 40;
        let (scene, x, v) = scene_and_state(n, 6, true);
        let (_, base) = run(&cfg, &store, &scene, &x, &v);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let px: Vec<Vec3> = perm.iter().map(|&i| x[i]).collect();
        let pv: Vec<Vec3> = perm.iter().map(|&i| v[i]).collect();
        let pa: Vec<f64> = perm
            .iter()
            .flat_map(|&i| scene.attributes()[i * 2..i * 2 + 2].to_vec())
            .collect();
        let mut inv = vec![0u32; n];
        for (k, &i) in perm.iter().enumerate() {
            inv[i] = k as u32;
        }
        let edges = scene
            .topology()
            .edges()
            .iter()
            .map(|&(a, b)| (inv[a as usize], inv[b as usize]))
            .collect();
        let pscene = Scene::new(
            pa,
            2,
            scene.boundary().clone(),
            Topology::new(edges, n).unwrap(),
            Some(px.clone()),
        )
        .unwrap();
        let (_, permuted) = run(&cfg, &store, &pscene, &px, &pv);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(permuted.row(k), base.row(i));
        }
    }

    #[test]
    fn graph_tokenizer_matches_straight_line_reference() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 7).unwrap();
        let (scene, x, v) = scene_and_state(8, 8, true);
        let (parts, tokens) = run(&cfg, &store, &scene, &x, &v);
        let nb = build_neighborhoods(&cfg, &scene, &x).unwrap();
        let kernels = [
            (
                Branch::Spatial,
                LatticeKernel::from_store(&store, "tokenizer.lattice.S", cfg.spatial_radius)
                    .unwrap(),
            ),
            (
                Branch::Topology,
                LatticeKernel::from_store(&store, "tokenizer.lattice.T", scene.topology_radius())
                    .unwrap(),
            ),
            (
                Branch::Boundary,
                LatticeKernel::from_store(&store, "tokenizer.lattice.B", cfg.boundary_radius())
                    .unwrap(),
            ),
        ];
        let p = |path: &str| store.get(path).unwrap().value.clone();
        let dense = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let out = b.len();
            (0..out)
                .map(|o| {
                    b[o] + x
                        .iter()
                        .enumerate()
                        .map(|(i, xi)| xi * w[i * out + o])
                        .sum::<f64>()
                })
                .collect()
        };
        for i in 0..8 {
            let mut joined = Vec::new();
            for (k, (branch, kernel)) in kernels.iter().enumerate() {
                let rows = branch_features(*branch, &scene, &nb, &v, i).unwrap();
                let (d, f): (Vec<Vec3>, Vec<Vec<f64>>) = rows.into_iter().unzip();
                let a = kernel.aggregate(&d, &f).unwrap();
                for (y, z) in a.iter().zip(parts[k].row(i)) {
                    assert!((y - z).abs() < 1e-12);
                }
                joined.extend(a);
            }
            let own_in: Vec<f64> = v[i]
                .iter()
                .chain(&scene.attributes()[i * 2..i * 2 + 2])
                .copied()
                .collect();
            joined.extend(dense(
                &own_in,
                &p("tokenizer.self.w"),
                &p("tokenizer.self.b"),
            ));
            let h: Vec<f64> = dense(
                &joined,
                &p("tokenizer.mlp.fc1.w"),
                &p("tokenizer.mlp.fc1.b"),
            )
            .into_iter()
            .map(|z| z.max(0.0))
            .collect();
            let h = dense(&h, &p("tokenizer.mlp.fc2.w"), &p("tokenizer.mlp.fc2.b"));
            let mean = h.iter().sum::<f64>() / h.len() as f64;
            let var = h.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / h.len() as f64;
            let (gain, bias) = (p("tokenizer.mlp.norm.gain"), p("tokenizer.mlp.norm.bias"));
            for (k, z) in h.iter().enumerate() {
                let want = (z - mean) / (var + 1e-5).sqrt() * gain[k] + bias[k];
                assert!((want - tokens.get(i, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lattice_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = init_params(&cfg, 9).unwrap();
        let (scene, x, v) = scene_and_state(8, 10, true);
        let nb = build_neighborhoods(&cfg, &scene, &x).unwrap();
        let mut only = ParamStore::new();
        for b in ["S", "T", "B"] {
            let path = format!("tokenizer.lattice.{b}");
            let p = store.get(&path).unwrap().clone();
            only.insert(&path, &p.shape, p.value).unwrap();
        }
        let report =
            crate::autodiff::gradcheck::check_params(&mut only, 1e-6, 1e-4, Some(200), |g, s| {
                let mut merged = store.clone();
                for (k, p) in s.iter() {
                    merged.get_mut(k).unwrap().value.clone_from(&p.value);
                }
                let xv = g.constant(Tensor::from_rows(&x));
                let vv = g.constant(Tensor::from_rows(&v));
                let av = g.constant(Tensor::new(8, 2, scene.attributes().to_vec()).unwrap());
                // Bind the lattices from `s` so they are the differentiated leaves.
                for b in ["S", "T", "B"] {
                    g.param(s, &format!("tokenizer.lattice.{b}"))?;
                }
                let out = tokenize(g, &merged, &cfg, &scene, &nb, xv, vv, av)?;
                let sq = g.mul(out.tokens, out.tokens)?;
                let w = g.constant(
                    Tensor::new(8, 16, (0..128).map(|k| (k as f64 * 0.37).sin()).collect())
                        .unwrap(),
                );
                let probe = g.mul(sq, w)?;
                Ok(g.sum(probe))
            })
            .unwrap();
        assert!(report.passed(), "{report}");
        store.zero_grad();
    }
}
