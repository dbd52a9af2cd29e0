//! P1 finite element assembly: mass and stiffness matrices with exact element
//! integration, vertex-rule load vectors, and homogeneous Dirichlet elimination.
//!
//! Mass matrices are always assembled without boundary treatment; the solver
//! applies [`apply_dirichlet`] to the stiffness matrix and load vector only.

use crate::error::Result;
use crate::mesh::{signed_area, Mesh, Mesh1D, TriMesh};
use crate::sparse::{SparseMatrix, Vector};

fn mass_1d(mesh: &Mesh1D) -> Result<SparseMatrix> {
    let n = mesh.n_nodes();
    let mut trip = Vec::with_capacity(4 * mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.element(e);
        let h = b - a;
        trip.push((e, e, h / 3.0));
        trip.push((e + 1, e + 1, h / 3.0));
        trip.push((e, e + 1, h / 6.0));
        trip.push((e + 1, e, h / 6.0));
    }
    SparseMatrix::from_triplets(n, n, trip)
}

fn stiffness_1d(mesh: &Mesh1D) -> Result<SparseMatrix> {
    let n = mesh.n_nodes();
    let mut trip = Vec::with_capacity(4 * mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.element(e);
        let k = 1.0 / (b - a);
        trip.push((e, e, k));
        trip.push((e + 1, e + 1, k));
        trip.push((e, e + 1, -k));
        trip.push((e + 1, e, -k));
    }
    SparseMatrix::from_triplets(n, n, trip)
}

fn mass_2d(mesh: &TriMesh) -> Result<SparseMatrix> {
    let n = mesh.n_nodes();
    let mut trip = Vec::with_capacity(9 * mesh.n_elements());
    for t in 0..mesh.n_elements() {
        let tri = mesh.triangles()[t];
        let scale = mesh.tri_area(t) / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { 2.0 } else { 1.0 };
                trip.push((tri[i], tri[j], scale * w));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

fn stiffness_2d(mesh: &TriMesh) -> Result<SparseMatrix> {
    let n = mesh.n_nodes();
    let mut trip = Vec::with_capacity(9 * mesh.n_elements());
    for t in 0..mesh.n_elements() {
        let tri = mesh.triangles()[t];
        let c = mesh.tri_coords(t);
        let area = signed_area(c[0], c[1], c[2]);
        // gradient coefficients: grad(phi_i) = (b_i, c_i) / (2 area)
        let mut bb = [0.0; 3];
        let mut cc = [0.0; 3];
        for i in 0..3 {
            let j = (i + 1) % 3;
            let k = (i + 2) % 3;
            bb[i] = c[j][1] - c[k][1];
            cc[i] = c[k][0] - c[j][0];
        }
        for i in 0..3 {
            for j in 0..3 {
                trip.push((tri[i], tri[j], (bb[i] * bb[j] + cc[i] * cc[j]) / (4.0 * area)));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

/// Consistent mass matrix, exact for P1, assembled over every element.
pub fn assemble_mass(mesh: &Mesh) -> Result<SparseMatrix> {
    match mesh {
        Mesh::OneD(m) => mass_1d(m),
        Mesh::TwoD(m) => mass_2d(m),
    }
}

/// Stiffness matrix of the Laplacian, exact for P1, without boundary treatment.
pub fn assemble_stiffness(mesh: &Mesh) -> Result<SparseMatrix> {
    match mesh {
        Mesh::OneD(m) => stiffness_1d(m),
        Mesh::TwoD(m) => stiffness_2d(m),
    }
}

/// Row sums of a mass matrix (lumped mass).
pub fn lump(mass: &SparseMatrix) -> Vector {
    mass.row_sums()
}

/// Load vector by the vertex quadrature rule: every element sends
/// |E|/(dim+1) · f(vertex) to each of its vertices. Exact whenever f is
/// such that the rule integrates f·phi_i exactly (in particular f constant).
pub fn assemble_load(mesh: &Mesh, f: &dyn Fn(&[f64]) -> f64) -> Vector {
    match mesh {
        Mesh::OneD(m) => {
            let mut b = vec![0.0; m.n_nodes()];
            for e in 0..m.n_elements() {
                let (x0, x1) = m.element(e);
                let w = (x1 - x0) / 2.0;
                b[e] += w * f(&[x0]);
                b[e + 1] += w * f(&[x1]);
            }
            b
        }
        Mesh::TwoD(m) => {
            let mut b = vec![0.0; m.n_nodes()];
            for t in 0..m.n_elements() {
                let tri = m.triangles()[t];
                let w = m.tri_area(t) / 3.0;
                for &v in &tri {
                    b[v] += w * f(&m.nodes()[v]);
                }
            }
            b
        }
    }
}

/// Homogeneous Dirichlet conditions by row and column elimination: boundary
/// rows and columns are zeroed, the diagonal of a boundary node becomes 1,
/// and the corresponding load entries become 0.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    b: &mut Vector,
    boundary: &[bool],
) -> Result<SparseMatrix> {
    assert_eq!(a.n_rows(), boundary.len());
    assert_eq!(b.len(), boundary.len());
    let mut trip = Vec::with_capacity(a.nnz() + boundary.len());
    for i in 0..a.n_rows() {
        if boundary[i] {
            trip.push((i, i, 1.0));
            b[i] = 0.0;
            continue;
        }
        for (j, v) in a.row(i) {
            if !boundary[j] {
                trip.push((i, j, v));
            }
        }
    }
    SparseMatrix::from_triplets(a.n_rows(), a.n_cols(), trip)
}
