//! Meshes: 1D interval meshes and 2D conforming triangulations.
//!
//! Triangles are stored counterclockwise. `boundary` marks nodes on the domain
//! boundary of the non-virtual region; `virtual_nodes` marks ghost nodes added
//! by [`TriMesh::extend`]. Structured meshes remember their grid dimensions so
//! they can be coarsened to the even sublattice.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

/// A node together with every node sharing an element with it.
/// `members[0]` is the center; the rest follow the canonical order
/// (1D: left then right; 2D: ascending angle around the center, ties by index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub center: usize,
    pub members: Vec<usize>,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    nodes: Vec<f64>,
}

impl Mesh1D {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("a 1D mesh needs at least 2 nodes"));
        }
        for w in nodes.windows(2) {
            if !(w[0] < w[1]) || !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::DegenerateMesh(
                    "1D nodes must be finite and strictly increasing".into(),
                ));
            }
        }
        Ok(Mesh1D { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Element endpoints (x_left, x_right).
    pub fn element(&self, e: usize) -> (f64, f64) {
        (self.nodes[e], self.nodes[e + 1])
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.nodes[0], *self.nodes.last().unwrap())
    }

    pub fn measure(&self) -> f64 {
        let (a, b) = self.domain();
        b - a
    }

    pub fn boundary_flags(&self) -> Vec<bool> {
        let n = self.nodes.len();
        (0..n).map(|i| i == 0 || i == n - 1).collect()
    }

    /// Displace interior nodes along their incident edges by a uniform random
    /// fraction in [-gamma, gamma) of the adjacent step. Deterministic in `seed`.
    pub fn jittered(&self, gamma: f64, seed: u64) -> Result<Mesh1D> {
        check_gamma(gamma)?;
        if gamma == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = self.nodes.clone();
        let n = xs.len();
        for k in 1..n - 1 {
            let u = gamma * (2.0 * rng.gen::<f64>() - 1.0);
            let mut step = if u >= 0.0 {
                u * (xs[k + 1] - xs[k])
            } else {
                u * (xs[k] - xs[k - 1])
            };
            let mut placed = false;
            for _ in 0..=10 {
                let cand = xs[k] + step;
                if xs[k - 1] < cand && cand < xs[k + 1] {
                    xs[k] = cand;
                    placed = true;
                    break;
                }
                step *= 0.5;
            }
            if !placed {
                return Err(Error::DegenerateMesh(format!(
                    "jitter could not keep node {k} between its neighbours"
                )));
            }
        }
        Mesh1D::new(xs)
    }

    /// Split every element at its midpoint.
    pub fn refine_bisection(&self) -> Mesh1D {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(*self.nodes.last().unwrap());
        Mesh1D { nodes }
    }

    /// Split every element into four equal parts (two successive bisections).
    pub fn refine_midpoint(&self) -> Mesh1D {
        self.refine_bisection().refine_bisection()
    }

    pub fn patch(&self, node: usize) -> Result<Patch> {
        if node >= self.nodes.len() {
            return Err(Error::OutOfRange {
                what: "node",
                got: node,
                limit: self.nodes.len(),
            });
        }
        let mut members = vec![node];
        if node > 0 {
            members.push(node - 1);
        }
        if node + 1 < self.nodes.len() {
            members.push(node + 1);
        }
        Ok(Patch {
            center: node,
            members,
        })
    }
}

pub fn uniform_mesh_1d(n_elements: usize, a: f64, b: f64) -> Result<Mesh1D> {
    if n_elements == 0 {
        return Err(Error::invalid("n_elements must be positive"));
    }
    if !(a < b) {
        return Err(Error::invalid("interval must satisfy a < b"));
    }
    let nodes = (0..=n_elements)
        .map(|i| a + (b - a) * (i as f64) / (n_elements as f64))
        .collect();
    Mesh1D::new(nodes)
}

/// Keep every `stride`-th node plus both endpoints.
/// Returns the coarse mesh and, per coarse node, the fine node it came from.
pub fn coarsen_1d(mesh: &Mesh1D, stride: usize) -> Result<(Mesh1D, Vec<usize>)> {
    if stride < 2 {
        return Err(Error::invalid("stride must be at least 2"));
    }
    if mesh.n_elements() < stride {
        return Err(Error::invalid(format!(
            "mesh with {} elements is too small to coarsen with stride {stride}",
            mesh.n_elements()
        )));
    }
    let last = mesh.n_nodes() - 1;
    let mut kept: Vec<usize> = (0..=last).step_by(stride).collect();
    if *kept.last().unwrap() != last {
        kept.push(last);
    }
    let nodes = kept.iter().map(|&i| mesh.nodes[i]).collect();
    Ok((Mesh1D::new(nodes)?, kept))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    virtual_nodes: Vec<bool>,
    grid: Option<(usize, usize)>,
    // derived, rebuilt on construction
    neighbors: Vec<Vec<usize>>,
    node_tris: Vec<Vec<usize>>,
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

impl TriMesh {
    pub fn new(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<bool>,
        virtual_nodes: Vec<bool>,
    ) -> Result<Self> {
        Self::with_grid(nodes, triangles, boundary, virtual_nodes, None)
    }

    fn with_grid(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<bool>,
        virtual_nodes: Vec<bool>,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let n = nodes.len();
        if boundary.len() != n || virtual_nodes.len() != n {
            return Err(Error::invalid("flag vectors must match node count"));
        }
        if triangles.is_empty() {
            return Err(Error::invalid("a triangulation needs at least one triangle"));
        }
        for p in &nodes {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::DegenerateMesh("non-finite node coordinate".into()));
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(Error::OutOfRange {
                        what: "triangle vertex",
                        got: v,
                        limit: n,
                    });
                }
            }
            let area = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::DegenerateMesh(format!(
                    "triangle {t} has non-positive area {area}"
                )));
            }
        }
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut node_tris: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                node_tris[v].push(t);
            }
            for (a, b) in [
                (tri[0], tri[1]),
                (tri[1], tri[2]),
                (tri[2], tri[0]),
            ] {
                if !neighbors[a].contains(&b) {
                    neighbors[a].push(b);
                }
                if !neighbors[b].contains(&a) {
                    neighbors[b].push(a);
                }
            }
        }
        // canonical neighbor order: ascending angle around the node, ties by index
        for k in 0..n {
            let p = nodes[k];
            neighbors[k].sort_by(|&a, &b| {
                let ang = |m: usize| {
                    let q = nodes[m];
                    (q[1] - p[1]).atan2(q[0] - p[0])
                };
                ang(a)
                    .partial_cmp(&ang(b))
                    .unwrap()
                    .then(a.cmp(&b))
            });
        }
        Ok(TriMesh {
            nodes,
            triangles,
            boundary,
            virtual_nodes,
            grid,
            neighbors,
            node_tris,
        })
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn virtual_flags(&self) -> &[bool] {
        &self.virtual_nodes
    }

    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn tri_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.nodes[tri[0]], self.nodes[tri[1]], self.nodes[tri[2]]]
    }

    pub fn tri_area(&self, t: usize) -> f64 {
        let c = self.tri_coords(t);
        signed_area(c[0], c[1], c[2])
    }

    pub fn measure(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.tri_area(t)).sum()
    }

    pub fn incident_triangles(&self, node: usize) -> &[usize] {
        &self.node_tris[node]
    }

    pub fn patch(&self, node: usize) -> Result<Patch> {
        if node >= self.nodes.len() {
            return Err(Error::OutOfRange {
                what: "node",
                got: node,
                limit: self.nodes.len(),
            });
        }
        let mut members = Vec::with_capacity(self.neighbors[node].len() + 1);
        members.push(node);
        members.extend_from_slice(&self.neighbors[node]);
        Ok(Patch {
            center: node,
            members,
        })
    }

    /// Displace interior nodes along a randomly chosen incident edge by a
    /// uniform random fraction in [-gamma, gamma). Boundary and virtual nodes
    /// stay fixed. Deterministic in `seed`; retries with halved displacement
    /// when a move would invert an incident triangle.
    pub fn jittered(&self, gamma: f64, seed: u64) -> Result<TriMesh> {
        check_gamma(gamma)?;
        if gamma == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = self.nodes.clone();
        for k in 0..pos.len() {
            if self.boundary[k] || self.virtual_nodes[k] || self.neighbors[k].is_empty() {
                continue;
            }
            let m = self.neighbors[k][rng.gen_range(0..self.neighbors[k].len())];
            let u = gamma * (2.0 * rng.gen::<f64>() - 1.0);
            let mut dx = u * (pos[m][0] - pos[k][0]);
            let mut dy = u * (pos[m][1] - pos[k][1]);
            let mut placed = false;
            for _ in 0..=10 {
                let cand = [pos[k][0] + dx, pos[k][1] + dy];
                let ok = self.node_tris[k].iter().all(|&t| {
                    let tri = self.triangles[t];
                    let c: Vec<[f64; 2]> = tri
                        .iter()
                        .map(|&v| if v == k { cand } else { pos[v] })
                        .collect();
                    signed_area(c[0], c[1], c[2]) > 0.0
                });
                if ok {
                    pos[k] = cand;
                    placed = true;
                    break;
                }
                dx *= 0.5;
                dy *= 0.5;
            }
            if !placed {
                return Err(Error::DegenerateMesh(format!(
                    "jitter could not move node {k} without inverting an element"
                )));
            }
        }
        TriMesh::with_grid(
            pos,
            self.triangles.clone(),
            self.boundary.clone(),
            self.virtual_nodes.clone(),
            self.grid,
        )
    }

    fn edge_midpoints(
        &self,
        edges: impl Iterator<Item = (usize, usize)>,
    ) -> (Vec<[f64; 2]>, Vec<bool>, Vec<bool>, std::collections::HashMap<(usize, usize), usize>) {
        use std::collections::HashMap;
        // count non-virtual incident triangles per edge to recover boundary edges
        let mut real_count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            let is_real = tri.iter().all(|&v| !self.virtual_nodes[v]);
            for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                let key = (a.min(b), a.max(b));
                *real_count.entry(key).or_insert(0) += usize::from(is_real);
            }
        }
        let mut nodes = self.nodes.clone();
        let mut boundary = self.boundary.clone();
        let mut virtual_nodes = self.virtual_nodes.clone();
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        for (a, b) in edges {
            let key = (a.min(b), a.max(b));
            if mid.contains_key(&key) {
                continue;
            }
            let p = [
                0.5 * (self.nodes[a][0] + self.nodes[b][0]),
                0.5 * (self.nodes[a][1] + self.nodes[b][1]),
            ];
            let id = nodes.len();
            nodes.push(p);
            let vflag = self.virtual_nodes[a] || self.virtual_nodes[b];
            virtual_nodes.push(vflag);
            boundary.push(!vflag && real_count.get(&key).copied().unwrap_or(0) == 1);
            mid.insert(key, id);
        }
        (nodes, boundary, virtual_nodes, mid)
    }

    /// Split every triangle in two across the midpoint of its longest edge.
    pub fn refine_bisection(&self) -> Result<TriMesh> {
        let longest = |tri: &[usize; 3]| -> usize {
            let mut best = 0;
            let mut best_key = (f64::MIN, (0usize, 0usize));
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let pa = self.nodes[a];
                let pb = self.nodes[b];
                let len2 = (pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2);
                let key = (len2, (a.min(b), a.max(b)));
                if key > best_key {
                    best_key = key;
                    best = e;
                }
            }
            best
        };
        let edges = self.triangles.iter().map(|tri| {
            let e = longest(tri);
            (tri[e], tri[(e + 1) % 3])
        });
        let (nodes, boundary, virtual_nodes, mid) = self.edge_midpoints(edges);
        let mut triangles = Vec::with_capacity(2 * self.triangles.len());
        for tri in &self.triangles {
            let e = longest(tri);
            let (a, b, o) = (tri[e], tri[(e + 1) % 3], tri[(e + 2) % 3]);
            let m = mid[&(a.min(b), a.max(b))];
            triangles.push([a, m, o]);
            triangles.push([m, b, o]);
        }
        TriMesh::new(nodes, triangles, boundary, virtual_nodes)
    }

    /// Regular refinement: connect the three edge midpoints of every triangle,
    /// producing four similar children.
    pub fn refine_midpoint(&self) -> Result<TriMesh> {
        let edges = self.triangles.iter().flat_map(|tri| {
            [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
        });
        let (nodes, boundary, virtual_nodes, mid) = self.edge_midpoints(edges);
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for tri in &self.triangles {
            let (a, b, c) = (tri[0], tri[1], tri[2]);
            let mab = mid[&(a.min(b), a.max(b))];
            let mbc = mid[&(b.min(c), b.max(c))];
            let mca = mid[&(c.min(a), c.max(a))];
            triangles.push([a, mab, mca]);
            triangles.push([mab, b, mbc]);
            triangles.push([mca, mbc, c]);
            triangles.push([mab, mbc, mca]);
        }
        TriMesh::new(nodes, triangles, boundary, virtual_nodes)
    }

    /// Add one layer of virtual ghost nodes and cells around a structured mesh
    /// so every original node reaches `target_patch_size`. Returns the mesh
    /// unchanged when every non-virtual node already has a patch that large.
    pub fn extend(&self, target_patch_size: usize) -> Result<TriMesh> {
        let already = (0..self.n_nodes())
            .filter(|&k| !self.virtual_nodes[k])
            .all(|k| self.neighbors[k].len() + 1 >= target_patch_size);
        if already {
            return Ok(self.clone());
        }
        let (nx, ny) = self.grid.ok_or_else(|| {
            Error::UnsupportedExtension("extension requires a structured mesh".into())
        })?;
        if target_patch_size > 7 {
            return Err(Error::UnsupportedExtension(format!(
                "one ghost layer cannot reach patch size {target_patch_size}"
            )));
        }
        let lat = |i: i64, j: i64| -> Option<usize> {
            if i >= 0 && i <= nx as i64 && j >= 0 && j <= ny as i64 {
                Some((j as usize) * (nx + 1) + (i as usize))
            } else {
                None
            }
        };
        let pos = |i: i64, j: i64| self.nodes[lat(i, j).unwrap()];
        let ghost_pos = |i: i64, j: i64| -> [f64; 2] {
            // continue the lattice by reflecting through the nearest boundary node
            let ci = i.clamp(0, nx as i64);
            let cj = j.clamp(0, ny as i64);
            let di = ci - (i - ci);
            let dj = cj - (j - cj);
            let b = pos(ci, cj);
            let inner = pos(di.clamp(0, nx as i64), dj.clamp(0, ny as i64));
            [2.0 * b[0] - inner[0], 2.0 * b[1] - inner[1]]
        };
        let mut nodes = self.nodes.clone();
        let mut boundary = self.boundary.clone();
        let mut virtual_nodes = self.virtual_nodes.clone();
        let mut ext_id = std::collections::HashMap::new();
        for j in -1..=(ny as i64 + 1) {
            for i in -1..=(nx as i64 + 1) {
                if let Some(id) = lat(i, j) {
                    ext_id.insert((i, j), id);
                } else {
                    let id = nodes.len();
                    nodes.push(ghost_pos(i, j));
                    boundary.push(false);
                    virtual_nodes.push(true);
                    ext_id.insert((i, j), id);
                }
            }
        }
        let mut triangles = self.triangles.clone();
        for cj in -1..=(ny as i64) {
            for ci in -1..=(nx as i64) {
                let original =
                    ci >= 0 && ci < nx as i64 && cj >= 0 && cj < ny as i64;
                if original {
                    continue;
                }
                let v00 = ext_id[&(ci, cj)];
                let v10 = ext_id[&(ci + 1, cj)];
                let v11 = ext_id[&(ci + 1, cj + 1)];
                let v01 = ext_id[&(ci, cj + 1)];
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let out = TriMesh::new(nodes, triangles, boundary, virtual_nodes)?;
        for k in 0..self.n_nodes() {
            if !self.virtual_nodes[k] && out.neighbors[k].len() + 1 < target_patch_size {
                return Err(Error::UnsupportedExtension(format!(
                    "node {k} only reaches patch size {} after extension",
                    out.neighbors[k].len() + 1
                )));
            }
        }
        Ok(out)
    }
}

/// Structured triangulation of the unit square: (nx+1)·(ny+1) nodes in
/// row-major order, every cell split along its bottom-left/top-right diagonal.
pub fn structured_tri_mesh(nx: usize, ny: usize) -> Result<TriMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("grid dimensions must be positive"));
    }
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut boundary = Vec::with_capacity(nodes.capacity());
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            boundary.push(i == 0 || i == nx || j == 0 || j == ny);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let n = nodes.len();
    TriMesh::with_grid(nodes, triangles, boundary, vec![false; n], Some((nx, ny)))
}

/// Keep every other node per direction of a structured mesh.
/// Returns the coarse mesh and, per coarse node, the fine node it came from.
pub fn coarsen_structured(mesh: &TriMesh) -> Result<(TriMesh, Vec<usize>)> {
    let (nx, ny) = mesh.grid_dims().ok_or_else(|| {
        Error::invalid("sublattice coarsening requires a structured mesh")
    })?;
    if nx % 2 != 0 || ny % 2 != 0 || nx < 2 || ny < 2 {
        return Err(Error::invalid(format!(
            "grid dimensions ({nx}, {ny}) must be even and at least 2 to coarsen"
        )));
    }
    if mesh.virtual_nodes.iter().any(|&v| v) {
        return Err(Error::invalid("cannot coarsen an extended mesh"));
    }
    let (cnx, cny) = (nx / 2, ny / 2);
    let fine_id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((cnx + 1) * (cny + 1));
    let mut kept = Vec::with_capacity(nodes.capacity());
    let mut boundary = Vec::with_capacity(nodes.capacity());
    for j in 0..=cny {
        for i in 0..=cnx {
            let f = fine_id(2 * i, 2 * j);
            nodes.push(mesh.nodes[f]);
            kept.push(f);
            boundary.push(i == 0 || i == cnx || j == 0 || j == cny);
        }
    }
    let id = |i: usize, j: usize| j * (cnx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * cnx * cny);
    for j in 0..cny {
        for i in 0..cnx {
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let n = nodes.len();
    let coarse = TriMesh::with_grid(
        nodes,
        triangles,
        boundary,
        vec![false; n],
        Some((cnx, cny)),
    )?;
    Ok((coarse, kept))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..0.5).contains(&gamma) {
        return Err(Error::invalid(format!(
            "jitter amplitude gamma = {gamma} must lie in [0, 0.5)"
        )));
    }
    Ok(())
}

/// Either kind of mesh; the solver pipelines are generic over the dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Mesh {
    OneD(Mesh1D),
    TwoD(TriMesh),
}

impl Mesh {
    pub fn dim(&self) -> usize {
        match self {
            Mesh::OneD(_) => 1,
            Mesh::TwoD(_) => 2,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            Mesh::OneD(m) => m.n_nodes(),
            Mesh::TwoD(m) => m.n_nodes(),
        }
    }

    pub fn n_elements(&self) -> usize {
        match self {
            Mesh::OneD(m) => m.n_elements(),
            Mesh::TwoD(m) => m.n_elements(),
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            Mesh::OneD(m) => m.measure(),
            Mesh::TwoD(m) => m.measure(),
        }
    }

    pub fn boundary_flags(&self) -> Vec<bool> {
        match self {
            Mesh::OneD(m) => m.boundary_flags(),
            Mesh::TwoD(m) => m.boundary_flags().to_vec(),
        }
    }

    pub fn patch(&self, node: usize) -> Result<Patch> {
        match self {
            Mesh::OneD(m) => m.patch(node),
            Mesh::TwoD(m) => m.patch(node),
        }
    }

    pub fn jittered(&self, gamma: f64, seed: u64) -> Result<Mesh> {
        Ok(match self {
            Mesh::OneD(m) => Mesh::OneD(m.jittered(gamma, seed)?),
            Mesh::TwoD(m) => Mesh::TwoD(m.jittered(gamma, seed)?),
        })
    }

    /// Canonical coarsening: stride 2 in 1D, the even sublattice in 2D.
    pub fn coarsen(&self) -> Result<(Mesh, Vec<usize>)> {
        Ok(match self {
            Mesh::OneD(m) => {
                let (c, kept) = coarsen_1d(m, 2)?;
                (Mesh::OneD(c), kept)
            }
            Mesh::TwoD(m) => {
                let (c, kept) = coarsen_structured(m)?;
                (Mesh::TwoD(c), kept)
            }
        })
    }

    /// Plain-text serialization: `dim n_nodes n_elements` header, node lines,
    /// element lines, then one `boundary virtual` flag line per node.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        match self {
            Mesh::OneD(m) => {
                writeln!(w, "1 {} {}", m.n_nodes(), m.n_elements())?;
                for x in m.nodes() {
                    writeln!(w, "{:.16e}", x)?;
                }
                for e in 0..m.n_elements() {
                    writeln!(w, "{} {}", e, e + 1)?;
                }
                for b in m.boundary_flags() {
                    writeln!(w, "{} 0", u8::from(b))?;
                }
            }
            Mesh::TwoD(m) => {
                writeln!(w, "2 {} {}", m.n_nodes(), m.n_elements())?;
                for p in m.nodes() {
                    writeln!(w, "{:.16e} {:.16e}", p[0], p[1])?;
                }
                for tri in m.triangles() {
                    writeln!(w, "{} {} {}", tri[0], tri[1], tri[2])?;
                }
                for k in 0..m.n_nodes() {
                    writeln!(
                        w,
                        "{} {}",
                        u8::from(m.boundary_flags()[k]),
                        u8::from(m.virtual_flags()[k])
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<Mesh> {
        let mut lines = r.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            loop {
                match lines.next() {
                    Some((k, line)) => {
                        let line = line?;
                        if !line.trim().is_empty() {
                            return Ok((k + 1, line));
                        }
                    }
                    None => return Err(Error::parse(0, format!("missing {what}"))),
                }
            }
        };
        let (hline, header) = next_line("header")?;
        let toks: Vec<usize> = header
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::parse(hline, "bad header token"))
            })
            .collect::<Result<_>>()?;
        if toks.len() != 3 {
            return Err(Error::parse(hline, "header must be `dim n_nodes n_elements`"));
        }
        let (dim, n_nodes, n_elements) = (toks[0], toks[1], toks[2]);
        let parse_f = |line: usize, t: &str| -> Result<f64> {
            t.parse()
                .map_err(|_| Error::parse(line, "bad coordinate"))
        };
        let parse_u = |line: usize, t: &str| -> Result<usize> {
            t.parse().map_err(|_| Error::parse(line, "bad index"))
        };
        match dim {
            1 => {
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    let (ln, line) = next_line("node line")?;
                    nodes.push(parse_f(ln, line.trim())?);
                }
                for _ in 0..n_elements {
                    next_line("element line")?;
                }
                for _ in 0..n_nodes {
                    next_line("flag line")?;
                }
                Ok(Mesh::OneD(Mesh1D::new(nodes)?))
            }
            2 => {
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    let (ln, line) = next_line("node line")?;
                    let t: Vec<&str> = line.split_whitespace().collect();
                    if t.len() != 2 {
                        return Err(Error::parse(ln, "expected two coordinates"));
                    }
                    nodes.push([parse_f(ln, t[0])?, parse_f(ln, t[1])?]);
                }
                let mut triangles = Vec::with_capacity(n_elements);
                for _ in 0..n_elements {
                    let (ln, line) = next_line("element line")?;
                    let t: Vec<&str> = line.split_whitespace().collect();
                    if t.len() != 3 {
                        return Err(Error::parse(ln, "expected three vertex indices"));
                    }
                    triangles.push([
                        parse_u(ln, t[0])?,
                        parse_u(ln, t[1])?,
                        parse_u(ln, t[2])?,
                    ]);
                }
                let mut boundary = Vec::with_capacity(n_nodes);
                let mut virtual_nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    let (ln, line) = next_line("flag line")?;
                    let t: Vec<&str> = line.split_whitespace().collect();
                    if t.len() != 2 {
                        return Err(Error::parse(ln, "expected two flags"));
                    }
                    boundary.push(parse_u(ln, t[0])? != 0);
                    virtual_nodes.push(parse_u(ln, t[1])? != 0);
                }
                Ok(Mesh::TwoD(TriMesh::new(
                    nodes,
                    triangles,
                    boundary,
                    virtual_nodes,
                )?))
            }
            d => Err(Error::parse(hline, format!("unsupported dimension {d}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mesh_examples() {
        let m = uniform_mesh_1d(4, 0.0, 1.0).unwrap();
        assert_eq!(m.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(uniform_mesh_1d(0, 0.0, 1.0).is_err());
        assert!(uniform_mesh_1d(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn jitter_1d_zero_gamma_is_identity() {
        let m = uniform_mesh_1d(8, 0.0, 1.0).unwrap();
        assert_eq!(m.jittered(0.0, 7).unwrap(), m);
    }

    #[test]
    fn jitter_1d_is_deterministic_and_bounded() {
        let m = uniform_mesh_1d(2, 0.0, 1.0).unwrap();
        let a = m.jittered(0.25, 42).unwrap();
        let b = m.jittered(0.25, 42).unwrap();
        assert_eq!(a, b);
        let x = a.nodes()[1];
        assert!((0.375..=0.625).contains(&x), "jittered midpoint {x}");
        assert_eq!(a.nodes()[0], 0.0);
        assert_eq!(a.nodes()[2], 1.0);
    }

    #[test]
    fn jitter_1d_keeps_ordering() {
        let m = uniform_mesh_1d(37, -1.0, 2.0).unwrap();
        for seed in 0..50 {
            let j = m.jittered(0.49, seed).unwrap();
            for w in j.nodes().windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn jitter_rejects_bad_gamma() {
        let m = uniform_mesh_1d(4, 0.0, 1.0).unwrap();
        assert!(m.jittered(0.5, 1).is_err());
        assert!(m.jittered(-0.1, 1).is_err());
    }

    #[test]
    fn coarsen_1d_examples() {
        let m = uniform_mesh_1d(4, 0.0, 1.0).unwrap();
        let (c, kept) = coarsen_1d(&m, 2).unwrap();
        assert_eq!(c.nodes(), &[0.0, 0.5, 1.0]);
        assert_eq!(kept, vec![0, 2, 4]);

        let m = Mesh1D::new(vec![0.0, 0.5, 1.0]).unwrap();
        let (c, kept) = coarsen_1d(&m, 2).unwrap();
        assert_eq!(c.nodes(), &[0.0, 1.0]);
        assert_eq!(kept, vec![0, 2]);

        let m = uniform_mesh_1d(1, 0.0, 1.0).unwrap();
        assert!(coarsen_1d(&m, 2).is_err());
    }

    #[test]
    fn coarsen_1d_keeps_trailing_endpoint() {
        let m = uniform_mesh_1d(5, 0.0, 1.0).unwrap();
        let (c, kept) = coarsen_1d(&m, 2).unwrap();
        assert_eq!(kept, vec![0, 2, 4, 5]);
        assert_eq!(c.n_elements(), 3);
    }

    #[test]
    fn refine_1d_counts_and_measure() {
        let m = Mesh1D::new(vec![0.0, 0.3, 1.0]).unwrap();
        let b = m.refine_bisection();
        assert_eq!(b.n_elements(), 4);
        assert!((b.measure() - 1.0).abs() < 1e-15);
        let q = m.refine_midpoint();
        assert_eq!(q.n_elements(), 8);
        assert!((q.measure() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn patch_1d_ordering() {
        let m = uniform_mesh_1d(4, 0.0, 1.0).unwrap();
        assert_eq!(m.patch(2).unwrap().members, vec![2, 1, 3]);
        assert_eq!(m.patch(0).unwrap().members, vec![0, 1]);
        assert_eq!(m.patch(4).unwrap().members, vec![4, 3]);
        assert!(m.patch(5).is_err());
    }

    #[test]
    fn structured_mesh_shape() {
        let m = structured_tri_mesh(1, 1).unwrap();
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_elements(), 2);
        let m = structured_tri_mesh(2, 2).unwrap();
        assert_eq!(m.n_nodes(), 9);
        assert_eq!(m.n_elements(), 8);
        assert!((m.measure() - 1.0).abs() < 1e-14);
        // center node has the full interior patch
        assert_eq!(m.patch(4).unwrap().size(), 7);
        assert_eq!(m.boundary_flags().iter().filter(|&&b| b).count(), 8);
        for t in 0..m.n_elements() {
            assert!(m.tri_area(t) > 0.0);
        }
    }

    #[test]
    fn structured_patch_sizes_by_node_class() {
        let m = structured_tri_mesh(4, 4).unwrap();
        let size = |i: usize, j: usize| m.patch(j * 5 + i).unwrap().size();
        assert_eq!(size(2, 2), 7); // interior
        assert_eq!(size(2, 0), 5); // edge
        assert_eq!(size(0, 2), 5);
        assert_eq!(size(0, 0), 4); // corners on the diagonal
        assert_eq!(size(4, 4), 4);
        assert_eq!(size(4, 0), 3); // corners off the diagonal
        assert_eq!(size(0, 4), 3);
    }

    #[test]
    fn patch_2d_canonical_order_is_angular() {
        let m = structured_tri_mesh(2, 2).unwrap();
        let p = m.patch(4).unwrap();
        assert_eq!(p.members[0], 4);
        let center = m.nodes()[4];
        let angles: Vec<f64> = p.members[1..]
            .iter()
            .map(|&k| {
                let q = m.nodes()[k];
                (q[1] - center[1]).atan2(q[0] - center[0])
            })
            .collect();
        for w in angles.windows(2) {
            assert!(w[0] < w[1], "angles not ascending: {angles:?}");
        }
    }

    #[test]
    fn patch_symmetry_on_jittered_mesh() {
        let m = structured_tri_mesh(3, 3).unwrap().jittered(0.25, 11).unwrap();
        for i in 0..m.n_nodes() {
            let pi = m.patch(i).unwrap();
            for &j in &pi.members[1..] {
                let pj = m.patch(j).unwrap();
                assert!(pj.members.contains(&i), "patch not symmetric at ({i}, {j})");
            }
        }
    }

    #[test]
    fn refine_tri_counts_and_measure() {
        let m = structured_tri_mesh(2, 2).unwrap();
        let r4 = m.refine_midpoint().unwrap();
        assert_eq!(r4.n_elements(), 32);
        assert!((r4.measure() - 1.0).abs() < 1e-12);
        let r2 = m.refine_bisection().unwrap();
        assert_eq!(r2.n_elements(), 16);
        assert!((r2.measure() - 1.0).abs() < 1e-12);
        // hypotenuse midpoints are shared, so bisection adds one node per cell
        assert_eq!(r2.n_nodes(), 13);
    }

    #[test]
    fn refine_midpoint_boundary_flags() {
        let m = structured_tri_mesh(2, 2).unwrap();
        let r = m.refine_midpoint().unwrap();
        for k in 0..r.n_nodes() {
            let p = r.nodes()[k];
            let on_box = p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
            assert_eq!(r.boundary_flags()[k], on_box, "node {k} at {p:?}");
        }
    }

    #[test]
    fn jitter_2d_fixes_boundary_and_keeps_orientation() {
        let m = structured_tri_mesh(4, 4).unwrap();
        let j = m.jittered(0.25, 3).unwrap();
        assert_eq!(j.jittered(0.0, 0).unwrap(), j);
        for k in 0..m.n_nodes() {
            if m.boundary_flags()[k] {
                assert_eq!(m.nodes()[k], j.nodes()[k]);
            }
        }
        assert_ne!(m.nodes(), j.nodes());
        for t in 0..j.n_elements() {
            assert!(j.tri_area(t) > 0.0);
        }
        assert_eq!(
            j.nodes(),
            m.jittered(0.25, 3).unwrap().nodes(),
            "jitter must be deterministic"
        );
    }

    #[test]
    fn coarsen_structured_sublattice() {
        let m = structured_tri_mesh(4, 4).unwrap().jittered(0.2, 9).unwrap();
        let (c, kept) = coarsen_structured(&m).unwrap();
        assert_eq!(c.n_nodes(), 9);
        assert_eq!(c.n_elements(), 8);
        for (ci, &fi) in kept.iter().enumerate() {
            assert_eq!(c.nodes()[ci], m.nodes()[fi]);
        }
        assert!(coarsen_structured(&structured_tri_mesh(3, 4).unwrap()).is_err());
    }

    #[test]
    fn extend_reaches_interior_patch_everywhere() {
        let m = structured_tri_mesh(2, 2).unwrap();
        let e = m.extend(7).unwrap();
        assert_eq!(e.n_nodes(), 25);
        assert_eq!(e.n_elements(), 32);
        for k in 0..m.n_nodes() {
            assert_eq!(e.nodes()[k], m.nodes()[k], "original node {k} moved");
            assert!(!e.virtual_flags()[k]);
            assert!(e.patch(k).unwrap().size() >= 7);
        }
        assert_eq!(e.virtual_flags().iter().filter(|&&v| v).count(), 16);
        // already-extended mesh is returned unchanged
        let e2 = e.extend(7).unwrap();
        assert_eq!(e2, e);
        assert!(m.extend(9).is_err());
    }

    #[test]
    fn extend_continues_the_lattice() {
        let m = structured_tri_mesh(2, 2).unwrap();
        let e = m.extend(7).unwrap();
        let h = 0.5;
        for k in m.n_nodes()..e.n_nodes() {
            let p = e.nodes()[k];
            let gi = (p[0] / h).round();
            let gj = (p[1] / h).round();
            assert!((p[0] - gi * h).abs() < 1e-12 && (p[1] - gj * h).abs() < 1e-12);
            assert!(gi == -1.0 || gi == 3.0 || gj == -1.0 || gj == 3.0);
        }
    }

    #[test]
    fn mesh_text_roundtrip() {
        let m1 = Mesh::OneD(uniform_mesh_1d(6, 0.0, 1.0).unwrap().jittered(0.3, 5).unwrap());
        let mut buf = Vec::new();
        m1.write_text(&mut buf).unwrap();
        assert_eq!(Mesh::read_text(&mut buf.as_slice()).unwrap(), m1);

        let m2 = Mesh::TwoD(structured_tri_mesh(3, 2).unwrap().jittered(0.2, 8).unwrap());
        let mut buf = Vec::new();
        m2.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(&mut buf.as_slice()).unwrap();
        match (&m2, &back) {
            (Mesh::TwoD(a), Mesh::TwoD(b)) => {
                assert_eq!(a.nodes(), b.nodes());
                assert_eq!(a.triangles(), b.triangles());
                assert_eq!(a.boundary_flags(), b.boundary_flags());
            }
            _ => panic!("dimension changed in roundtrip"),
        }
    }

    #[test]
    fn mesh_read_rejects_garbage() {
        let text = "2 3 1\n0 0\n1 0\nx 1\n0 1 2\n1 0\n1 0\n1 0\n";
        let err = Mesh::read_text(&mut text.as_bytes()).unwrap_err();
        assert!(format!("{err}").contains("line 4"));
    }
}
