//! Shared oracle helpers for integration tests: independent quadrature
//! routines kept deliberately simpler (and slower) than the library's
//! assembly code, so agreement is meaningful.

#![allow(dead_code)]

use neumg::mesh::{Mesh1D, TriMesh};

/// 10-point Gauss-Legendre rule on [-1, 1].
pub const GL10_X: [f64; 10] = [
    -0.9739065285171717,
    -0.8650633666889845,
    -0.6794095682990244,
    -0.4333953941292472,
    -0.1488743389816312,
    0.1488743389816312,
    0.4333953941292472,
    0.6794095682990244,
    0.8650633666889845,
    0.9739065285171717,
];
pub const GL10_W: [f64; 10] = [
    0.0666713443086881,
    0.1494513491505806,
    0.2190863625159820,
    0.2692667193099963,
    0.2955242247147529,
    0.2955242247147529,
    0.2692667193099963,
    0.2190863625159820,
    0.1494513491505806,
    0.0666713443086881,
];

/// Value of the hat function of node `i` at `x` on a 1D mesh.
pub fn hat_1d(nodes: &[f64], i: usize, x: f64) -> f64 {
    let xi = nodes[i];
    if i > 0 && x >= nodes[i - 1] && x <= xi {
        let h = xi - nodes[i - 1];
        return (x - nodes[i - 1]) / h;
    }
    if i + 1 < nodes.len() && x >= xi && x <= nodes[i + 1] {
        let h = nodes[i + 1] - xi;
        return (nodes[i + 1] - x) / h;
    }
    0.0
}

fn locate_1d(nodes: &[f64], x: f64) -> usize {
    let e = nodes.partition_point(|&v| v <= x);
    e.saturating_sub(1).min(nodes.len() - 2)
}

/// Dense coupling matrix B_ij = ∫ φ_i ψ_j by per-fine-element Gauss
/// quadrature. Exact when the coarse nodes are a subset of the fine nodes,
/// because the integrand is then a polynomial on each fine element.
pub fn oracle_coupling_1d(fine: &Mesh1D, coarse: &Mesh1D) -> Vec<Vec<f64>> {
    let fnodes = fine.nodes();
    let cnodes = coarse.nodes();
    let mut b = vec![vec![0.0; cnodes.len()]; fnodes.len()];
    for e in 0..fine.n_elements() {
        let (x0, x1) = fine.element(e);
        let mid = 0.5 * (x0 + x1);
        let half = 0.5 * (x1 - x0);
        for (t, w) in GL10_X.iter().zip(GL10_W) {
            let x = mid + half * t;
            let wq = w * half;
            let ce = locate_1d(cnodes, x);
            for i in [e, e + 1] {
                let phi = hat_1d(fnodes, i, x);
                for j in [ce, ce + 1] {
                    b[i][j] += wq * phi * hat_1d(cnodes, j, x);
                }
            }
        }
    }
    b
}

/// Degree-4 six-point triangle rule: (point, weight) pairs with weights
/// summing to the triangle area. Points are strictly interior.
pub fn tri_quad_points(v: &[[f64; 2]; 3]) -> Vec<([f64; 2], f64)> {
    const GROUPS: [(f64, f64, f64); 2] = [
        (0.8168475729804590, 0.0915762135097707, 0.1099517436553219),
        (0.1081030181680702, 0.4459484909159649, 0.2233815896780115),
    ];
    let area = 0.5
        * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
            - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]))
            .abs();
    let mut out = Vec::with_capacity(6);
    for &(a, b, w) in &GROUPS {
        for perm in [[a, b, b], [b, a, b], [b, b, a]] {
            let p = [
                perm[0] * v[0][0] + perm[1] * v[1][0] + perm[2] * v[2][0],
                perm[0] * v[0][1] + perm[1] * v[1][1] + perm[2] * v[2][1],
            ];
            out.push((p, w * area));
        }
    }
    out
}

/// Barycentric coordinates of `p` in the triangle with vertices `v`.
pub fn barycentric(v: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
        - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
    let l1 = ((p[0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (p[1] - v[0][1]))
        / det;
    let l2 = ((v[1][0] - v[0][0]) * (p[1] - v[0][1]) - (p[0] - v[0][0]) * (v[1][1] - v[0][1]))
        / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Dense coupling matrix for a nested 2D pair by per-fine-triangle
/// quadrature: each quadrature point is located in the coarse mesh by linear
/// search, so no intersection machinery is shared with the library.
pub fn oracle_coupling_2d_nested(fine: &TriMesh, coarse: &TriMesh) -> Vec<Vec<f64>> {
    let mut b = vec![vec![0.0; coarse.n_nodes()]; fine.n_nodes()];
    for t in 0..fine.n_elements() {
        let fv = fine.tri_coords(t);
        let ftri = fine.triangles()[t];
        for (p, wq) in tri_quad_points(&fv) {
            let lf = barycentric(&fv, p);
            let (ct, lc) = locate_2d(coarse, p)
                .unwrap_or_else(|| panic!("quadrature point {p:?} not found in coarse mesh"));
            let ctri = coarse.triangles()[ct];
            for a in 0..3 {
                for c in 0..3 {
                    b[ftri[a]][ctri[c]] += wq * lf[a] * lc[c];
                }
            }
        }
    }
    b
}

fn locate_2d(mesh: &TriMesh, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
    for t in 0..mesh.n_elements() {
        let v = mesh.tri_coords(t);
        let l = barycentric(&v, p);
        if l.iter().all(|&x| x >= -1e-12) {
            return Some((t, l));
        }
    }
    None
}

pub fn max_abs_diff_dense(a: &neumg::sparse::SparseMatrix, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.n_rows() {
        for j in 0..a.n_cols() {
            worst = worst.max((a.get(i, j) - b[i][j]).abs());
        }
    }
    worst
}

pub fn max_matrix_diff(
    a: &neumg::sparse::SparseMatrix,
    b: &neumg::sparse::SparseMatrix,
) -> f64 {
    a.add(&b.scale(-1.0)).unwrap().max_abs()
}
