//! Fixed-radius neighborhoods for the three tokenizer branches.
//!
//! Spatial and boundary searches use a uniform hash grid with cell size equal
//! to the search radius, so candidates come from the 27 surrounding cells.
//! Results are sorted by neighbor index and do not depend on the thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::state::{check_finite, norm_sq3, sub3, BoundarySet, Topology, Vec3};

/// Per-query neighbor lists in compressed row form.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NeighborList {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    displacements: Vec<Vec3>,
}

impl NeighborList {
    fn from_rows(rows: Vec<Vec<(usize, Vec3)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let total = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(total);
        let mut displacements = Vec::with_capacity(total);
        for row in rows {
            for (j, r) in row {
                indices.push(j);
                displacements.push(r);
            }
            offsets.push(indices.len());
        }
        Self {
            offsets,
            indices,
            displacements,
        }
    }

    /// Lists with no neighbors for `n` queries.
    pub fn empty(n: usize) -> Self {
        Self {
            offsets: vec![0; n + 1],
            indices: Vec::new(),
            displacements: Vec::new(),
        }
    }

    pub fn query_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn pair_count(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn displacements(&self, i: usize) -> &[Vec3] {
        &self.displacements[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Flattened `(query, neighbor)` pairs in storage order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.query_count()).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn all_displacements(&self) -> &[Vec3] {
        &self.displacements
    }
}

struct HashGrid {
    inv_cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl HashGrid {
    fn new(points: &[Vec3], radius: f64) -> Self {
        // Slightly oversized cells keep every in-radius pair within one cell step.
        let inv_cell = 1.0 / (radius * (1.0 + 1e-9));
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (j, p) in points.iter().enumerate() {
            cells.entry(Self::key(inv_cell, p)).or_default().push(j);
        }
        Self { inv_cell, cells }
    }

    fn key(inv_cell: f64, p: &Vec3) -> [i64; 3] {
        [
            (p[0] * inv_cell).floor() as i64,
            (p[1] * inv_cell).floor() as i64,
            (p[2] * inv_cell).floor() as i64,
        ]
    }

    fn candidates(&self, p: &Vec3, out: &mut Vec<usize>) {
        let k = Self::key(self.inv_cell, p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(c) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend_from_slice(c);
                    }
                }
            }
        }
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            "radius",
            format!("must be positive, got {radius}"),
        ))
    }
}

fn radius_query(
    queries: &[Vec3],
    targets: &[Vec3],
    radius: f64,
    exclude_self: bool,
) -> NeighborList {
    if targets.is_empty() {
        return NeighborList::empty(queries.len());
    }
    let grid = HashGrid::new(targets, radius);
    let r2 = radius * radius;
    let rows: Vec<Vec<(usize, Vec3)>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut cand = Vec::new();
            grid.candidates(xi, &mut cand);
            cand.sort_unstable();
            cand.into_iter()
                .filter(|&j| !(exclude_self && j == i))
                .filter_map(|j| {
                    let r = sub3(targets[j], *xi);
                    (norm_sq3(r) <= r2).then_some((j, r))
                })
                .collect()
        })
        .collect();
    NeighborList::from_rows(rows)
}

/// All other particles within `radius` (inclusive) of each particle.
pub fn build_spatial(positions: &[Vec3], radius: f64) -> Result<NeighborList> {
    check_radius(radius)?;
    check_finite(
        "positions",
        positions.iter().flat_map(|p| p.iter().copied()),
    )?;
    Ok(radius_query(positions, positions, radius, true))
}

/// Boundary samples within `radius` of each particle; displacement is sample minus particle.
pub fn build_boundary(
    positions: &[Vec3],
    boundary: &BoundarySet,
    radius: f64,
) -> Result<NeighborList> {
    check_radius(radius)?;
    check_finite(
        "positions",
        positions.iter().flat_map(|p| p.iter().copied()),
    )?;
    Ok(radius_query(positions, boundary.positions(), radius, false))
}

/// Rest-shape adjacency with displacements taken from the rest positions.
pub fn build_topology(topology: &Topology, rest: &[Vec3]) -> Result<NeighborList> {
    let n = rest.len();
    if let Some(&(i, j)) = topology
        .edges()
        .iter()
        .find(|&&(i, j)| i as usize >= n || j as usize >= n)
    {
        return Err(Error::invalid(
            "topology",
            format!("edge ({i}, {j}) out of range for {n} rest positions"),
        ));
    }
    let rows = topology
        .adjacency(n)
        .into_iter()
        .enumerate()
        .map(|(i, adj)| {
            adj.into_iter()
                .map(|j| (j, sub3(rest[j], rest[i])))
                .collect()
        })
        .collect();
    Ok(NeighborList::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(
        queries: &[Vec3],
        targets: &[Vec3],
        radius: f64,
        exclude_self: bool,
    ) -> Vec<Vec<(usize, Vec3)>> {
        queries
            .iter()
            .enumerate()
            .map(|(i, xi)| {
                (0..targets.len())
                    .filter(|&j| !(exclude_self && i == j))
                    .map(|j| (j, sub3(targets[j], *xi)))
                    .filter(|(_, r)| norm_sq3(*r) <= radius * radius)
                    .collect()
            })
            .collect()
    }

    fn rows(nl: &NeighborList) -> Vec<Vec<(usize, Vec3)>> {
        (0..nl.query_count())
            .map(|i| {
                nl.neighbors(i)
                    .iter()
                    .copied()
                    .zip(nl.displacements(i).iter().copied())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_particles_see_each_other() {
        let nl = build_spatial(&[[0.0; 3], [0.5, 0.0, 0.0]], 1.0).unwrap();
        assert_eq!(nl.neighbors(0), &[1]);
        assert_eq!(nl.neighbors(1), &[0]);
        assert_eq!(nl.displacements(0), &[[0.5, 0.0, 0.0]]);
    }

    #[test]
    fn single_particle_excludes_itself() {
        let nl = build_spatial(&[[0.3, 0.1, 0.2]], 1.0).unwrap();
        assert!(nl.neighbors(0).is_empty());
    }

    #[test]
    fn ties_at_radius_are_included() {
        let nl = build_spatial(&[[0.0; 3], [0.25, 0.0, 0.0]], 0.25).unwrap();
        assert_eq!(nl.neighbors(0), &[1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_spatial(&[[0.0; 3]], 0.0).is_err());
        assert!(build_spatial(&[[f64::NAN, 0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn boundary_examples() {
        let b = BoundarySet::new(vec![[0.0, 0.0, 0.1]], vec![0.0, 0.0, 1.0], 3).unwrap();
        let nl = build_boundary(&[[0.0; 3]], &b, 0.2).unwrap();
        assert_eq!(nl.neighbors(0), &[0]);
        assert_eq!(nl.displacements(0), &[[0.0, 0.0, 0.1]]);
        let nl = build_boundary(&[[0.0; 3], [1.0; 3]], &BoundarySet::empty(3), 0.2).unwrap();
        assert_eq!(nl.pair_count(), 0);
        assert_eq!(nl.query_count(), 2);
    }

    #[test]
    fn boundary_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p: Vec<Vec3> = (0..60).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let bp: Vec<Vec3> = (0..200).map(|_| [rng.gen(), rng.gen(), 0.0]).collect();
        let battr = bp.iter().flat_map(|_| [0.0, 0.0, 1.0]).collect();
        let b = BoundarySet::new(bp.clone(), battr, 3).unwrap();
        let nl = build_boundary(&p, &b, 0.15).unwrap();
        assert_eq!(rows(&nl), brute(&p, &bp, 0.15, false));
    }

    #[test]
    fn topology_examples() {
        let t = Topology::new(vec![(0, 1)], 2).unwrap();
        let nl = build_topology(&t, &[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(nl.displacements(0), &[[1.0, 0.0, 0.0]]);
        assert_eq!(nl.displacements(1), &[[-1.0, 0.0, 0.0]]);
        let nl = build_topology(&Topology::empty(), &[[0.0; 3]; 3]).unwrap();
        assert_eq!(nl.pair_count(), 0);
        assert!(build_topology(&t, &[[0.0; 3]]).is_err());
    }

    #[test]
    fn grid_mesh_interior_has_four_neighbors() {
        let (nx, ny) = (10usize, 10usize);
        let id = |x: usize, y: usize| (y * nx + x) as u32;
        let mut edges = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                if x + 1 < nx {
                    edges.push((id(x, y), id(x + 1, y)));
                }
                if y + 1 < ny {
                    edges.push((id(x, y), id(x, y + 1)));
                }
            }
        }
        let rest: Vec<Vec3> = (0..nx * ny)
            .map(|k| [(k % nx) as f64, (k / nx) as f64, 0.0])
            .collect();
        let nl = build_topology(&Topology::new(edges, nx * ny).unwrap(), &rest).unwrap();
        for y in 0..ny {
            for x in 0..nx {
                let interior_x = x > 0 && x + 1 < nx;
                let interior_y = y > 0 && y + 1 < ny;
                let expected = 4 - (!interior_x) as usize - (!interior_y) as usize;
                assert_eq!(nl.neighbors(id(x, y) as usize).len(), expected);
            }
        }
    }

    fn cloud() -> impl Strategy<Value = (Vec<Vec3>, f64)> {
        (
            prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..80),
            0.05f64..0.6,
        )
    }

    proptest! {
        #[test]
        fn spatial_hash_equals_brute_force((p, r) in cloud()) {
            let nl = build_spatial(&p, r).unwrap();
            prop_assert_eq!(rows(&nl), brute(&p, &p, r, true));
        }

        #[test]
        fn spatial_lists_are_symmetric((p, r) in cloud()) {
            let nl = build_spatial(&p, r).unwrap();
            for i in 0..p.len() {
                for &j in nl.neighbors(i) {
                    prop_assert!(nl.neighbors(j).contains(&i));
                }
            }
        }

        #[test]
        fn translation_leaves_neighbor_sets_unchanged((p, r) in cloud(), shift in prop::array::uniform3(-4.0f64..4.0)) {
            let moved: Vec<Vec3> = p.iter().map(|x| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]]).collect();
            let a = build_spatial(&p, r).unwrap();
            let b = build_spatial(&moved, r).unwrap();
            for i in 0..p.len() {
                prop_assert_eq!(a.neighbors(i), b.neighbors(i));
                for (da, db) in a.displacements(i).iter().zip(b.displacements(i)) {
                    for d in 0..3 {
                        prop_assert!((da[d] - db[d]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
