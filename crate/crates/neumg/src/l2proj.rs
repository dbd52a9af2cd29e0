//! Exact transfer operators by L2-projection between unrelated meshes.
//!
//! The coupling matrix B_ij = ∫ phi_i^fine · psi_j^coarse is computed by
//! intersecting the two meshes: merged subintervals in 1D, Sutherland-Hodgman
//! triangle clipping in 2D, with quadrature that is exact for the piecewise
//! quadratic integrand. From B we form either the lumped pseudo-projection
//! Q_ij = B_ij / D_i or the consistent projection Q = M⁻¹B.
//!
//! Every element-pair intersection bumps a global counter so the solver
//! pipelines can report (and tests can assert) how much geometric work a
//! hierarchy construction performed.

use crate::error::{Error, Result};
use crate::mesh::{signed_area, Mesh, Mesh1D, TriMesh};
use crate::sparse::{dot, norm2, SparseMatrix, Vector};
use std::sync::atomic::{AtomicU64, Ordering};

static INTERSECTION_CALLS: AtomicU64 = AtomicU64::new(0);

/// Total element-pair intersections computed since the last reset.
pub fn intersection_calls() -> u64 {
    INTERSECTION_CALLS.load(Ordering::Relaxed)
}

pub fn reset_intersection_calls() {
    INTERSECTION_CALLS.store(0, Ordering::Relaxed);
}

/// How a coarse-to-fine transfer matrix was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    PseudoL2,
    ConsistentL2,
    Neural,
}

impl std::fmt::Display for TransferKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransferKind::PseudoL2 => "pseudo-l2",
            TransferKind::ConsistentL2 => "consistent-l2",
            TransferKind::Neural => "neural",
        };
        write!(f, "{s}")
    }
}

/// Coarse-to-fine prolongation; restriction is its transpose.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    pub matrix: SparseMatrix,
    pub kind: TransferKind,
}

fn coupling_1d(fine: &Mesh1D, coarse: &Mesh1D) -> Result<SparseMatrix> {
    let (flo, fhi) = fine.domain();
    let (clo, chi) = coarse.domain();
    let lo = flo.max(clo);
    let hi = fhi.min(chi);
    let mut trip = Vec::new();
    if lo < hi {
        let mut pts: Vec<f64> = fine
            .nodes()
            .iter()
            .chain(coarse.nodes())
            .copied()
            .filter(|&x| x >= lo && x <= hi)
            .collect();
        pts.push(lo);
        pts.push(hi);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let locate = |m: &Mesh1D, x: f64| -> usize {
            let k = m.nodes().partition_point(|&v| v <= x);
            k.saturating_sub(1).min(m.n_elements() - 1)
        };
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !(b > a) {
                continue;
            }
            INTERSECTION_CALLS.fetch_add(1, Ordering::Relaxed);
            let mid = 0.5 * (a + b);
            let fe = locate(fine, mid);
            let ce = locate(coarse, mid);
            let (f0, f1) = fine.element(fe);
            let (c0, c1) = coarse.element(ce);
            let r = 0.5 * (b - a);
            for s in [-1.0, 1.0] {
                let x = mid + s * r / 3.0_f64.sqrt();
                let phi = [(f1 - x) / (f1 - f0), (x - f0) / (f1 - f0)];
                let psi = [(c1 - x) / (c1 - c0), (x - c0) / (c1 - c0)];
                for (di, &p) in phi.iter().enumerate() {
                    for (dj, &q) in psi.iter().enumerate() {
                        trip.push((fe + di, ce + dj, r * p * q));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(fine.n_nodes(), coarse.n_nodes(), trip)
}

/// Clip a (counterclockwise) subject triangle against a convex clip triangle.
/// Returns the intersection as a convex polygon, possibly empty.
fn clip_triangle(subject: [[f64; 2]; 3], clip: [[f64; 2]; 3]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for e in 0..3 {
        let a = clip[e];
        let b = clip[(e + 1) % 3];
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            return input;
        }
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let cross_pt = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let dp = side(p);
            let dq = side(q);
            let t = dp / (dp - dq);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        for k in 0..input.len() {
            let p = input[k];
            let q = input[(k + 1) % input.len()];
            let (inside_p, inside_q) = (side(p) >= 0.0, side(q) >= 0.0);
            if inside_q {
                if !inside_p {
                    out.push(cross_pt(p, q));
                }
                out.push(q);
            } else if inside_p {
                out.push(cross_pt(p, q));
            }
        }
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let mut a = 0.0;
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

/// Uniform-grid bucket index over coarse element bounding boxes, so that a
/// fine element only gets tested against nearby coarse elements.
struct CoarseLocator {
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl CoarseLocator {
    fn build(mesh: &TriMesh) -> CoarseLocator {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in mesh.nodes() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let mut cell: f64 = 0.0;
        let elem_bbox = |t: usize| -> ([f64; 2], [f64; 2]) {
            let c = mesh.tri_coords(t);
            let mut l = c[0];
            let mut h = c[0];
            for p in &c[1..] {
                for d in 0..2 {
                    l[d] = l[d].min(p[d]);
                    h[d] = h[d].max(p[d]);
                }
            }
            (l, h)
        };
        for t in 0..mesh.n_elements() {
            let (l, h) = elem_bbox(t);
            cell = cell.max(h[0] - l[0]).max(h[1] - l[1]);
        }
        let cell = cell.max(f64::MIN_POSITIVE);
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize).max(1);
        let ny = (((hi[1] - lo[1]) / cell).ceil() as usize).max(1);
        let mut loc = CoarseLocator {
            x0: lo[0],
            y0: lo[1],
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for t in 0..mesh.n_elements() {
            let (l, h) = elem_bbox(t);
            for (ix, iy) in loc.cells(l, h) {
                loc.buckets[iy * loc.nx + ix].push(t);
            }
        }
        loc
    }

    fn cells(&self, lo: [f64; 2], hi: [f64; 2]) -> Vec<(usize, usize)> {
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        let ix0 = clamp((lo[0] - self.x0) / self.cell, self.nx);
        let ix1 = clamp((hi[0] - self.x0) / self.cell, self.nx);
        let iy0 = clamp((lo[1] - self.y0) / self.cell, self.ny);
        let iy1 = clamp((hi[1] - self.y0) / self.cell, self.ny);
        let mut out = Vec::with_capacity((ix1 - ix0 + 1) * (iy1 - iy0 + 1));
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                out.push((ix, iy));
            }
        }
        out
    }

    fn candidates(&self, lo: [f64; 2], hi: [f64; 2]) -> Vec<usize> {
        let mut out = Vec::new();
        for (ix, iy) in self.cells(lo, hi) {
            for &t in &self.buckets[iy * self.nx + ix] {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

fn barycentric(tri: [[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    let a = signed_area(tri[0], tri[1], tri[2]);
    [
        signed_area(x, tri[1], tri[2]) / a,
        signed_area(tri[0], x, tri[2]) / a,
        signed_area(tri[0], tri[1], x) / a,
    ]
}

fn coupling_2d(fine: &TriMesh, coarse: &TriMesh) -> Result<SparseMatrix> {
    const SLIVER_REL: f64 = 1e-14;
    let locator = CoarseLocator::build(coarse);
    let mut trip = Vec::new();
    for tf in 0..fine.n_elements() {
        let fc = fine.tri_coords(tf);
        let fine_tri = fine.triangles()[tf];
        let fine_area = signed_area(fc[0], fc[1], fc[2]);
        let mut lo = fc[0];
        let mut hi = fc[0];
        for p in &fc[1..] {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        for tc in locator.candidates(lo, hi) {
            INTERSECTION_CALLS.fetch_add(1, Ordering::Relaxed);
            let cc = coarse.tri_coords(tc);
            let poly = clip_triangle(fc, cc);
            if poly.len() < 3 || polygon_area(&poly) < SLIVER_REL * fine_area {
                continue;
            }
            let coarse_tri = coarse.triangles()[tc];
            for k in 1..poly.len() - 1 {
                let sub = [poly[0], poly[k], poly[k + 1]];
                let sub_area = signed_area(sub[0], sub[1], sub[2]);
                if sub_area <= 0.0 {
                    continue;
                }
                // edge-midpoint rule: exact for the quadratic integrand
                let qpts = [
                    [0.5 * (sub[0][0] + sub[1][0]), 0.5 * (sub[0][1] + sub[1][1])],
                    [0.5 * (sub[1][0] + sub[2][0]), 0.5 * (sub[1][1] + sub[2][1])],
                    [0.5 * (sub[2][0] + sub[0][0]), 0.5 * (sub[2][1] + sub[0][1])],
                ];
                let w = sub_area / 3.0;
                for x in qpts {
                    let lf = barycentric(fc, x);
                    let lc = barycentric(cc, x);
                    for i in 0..3 {
                        for j in 0..3 {
                            trip.push((fine_tri[i], coarse_tri[j], w * lf[i] * lc[j]));
                        }
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(fine.n_nodes(), coarse.n_nodes(), trip)
}

/// Coupling (mixed mass) matrix B_ij = ∫ phi_i^fine · psi_j^coarse.
pub fn assemble_coupling(fine: &Mesh, coarse: &Mesh) -> Result<SparseMatrix> {
    match (fine, coarse) {
        (Mesh::OneD(f), Mesh::OneD(c)) => coupling_1d(f, c),
        (Mesh::TwoD(f), Mesh::TwoD(c)) => coupling_2d(f, c),
        _ => Err(Error::invalid("fine and coarse meshes must share a dimension")),
    }
}

/// Pseudo-projection: Q_ij = B_ij / D_i with D the lumped fine mass.
pub fn pseudo_projection(coupling: &SparseMatrix, fine_lumped: &[f64]) -> Result<SparseMatrix> {
    if fine_lumped.len() != coupling.n_rows() {
        return Err(Error::invalid("lumped mass length must match coupling rows"));
    }
    let mut trip = Vec::with_capacity(coupling.nnz());
    for i in 0..coupling.n_rows() {
        let d = fine_lumped[i];
        if !(d > 0.0) {
            return Err(Error::InvalidMass(format!(
                "lumped mass entry {i} is {d}, expected positive"
            )));
        }
        for (j, v) in coupling.row(i) {
            trip.push((i, j, v / d));
        }
    }
    SparseMatrix::from_triplets(coupling.n_rows(), coupling.n_cols(), trip)
}

fn cg(m: &SparseMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vector> {
    let nb = norm2(b);
    let mut x = vec![0.0; b.len()];
    if nb == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() <= rel_tol * nb {
            return Ok(x);
        }
        let mp = m.mul_vec(&p);
        let alpha = rr / dot(&p, &mp);
        if !alpha.is_finite() {
            return Err(Error::SolverFailure("conjugate gradients broke down".into()));
        }
        for k in 0..x.len() {
            x[k] += alpha * p[k];
            r[k] -= alpha * mp[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..p.len() {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rr.sqrt() <= rel_tol * nb {
        Ok(x)
    } else {
        Err(Error::SolverFailure(format!(
            "conjugate gradients did not reach {rel_tol:.1e} in {max_iter} iterations"
        )))
    }
}

/// Consistent projection: solve M q_col = b_col per coarse basis function.
/// Entries below 1e-13 in magnitude are dropped to keep Q sparse.
pub fn consistent_projection(
    coupling: &SparseMatrix,
    fine_mass: &SparseMatrix,
) -> Result<SparseMatrix> {
    const SPARSIFY_TOL: f64 = 1e-13;
    if fine_mass.n_rows() != coupling.n_rows() || fine_mass.n_cols() != coupling.n_rows() {
        return Err(Error::invalid("mass matrix must match coupling rows"));
    }
    let n = coupling.n_rows();
    let bt = coupling.transpose();
    let mut trip = Vec::new();
    let max_iter = 10 * n.max(10);
    for j in 0..coupling.n_cols() {
        let col: Vector = {
            let mut c = vec![0.0; n];
            for (i, v) in bt.row(j) {
                c[i] = v;
            }
            c
        };
        let q = cg(fine_mass, &col, 1e-12, max_iter)?;
        for (i, &v) in q.iter().enumerate() {
            if v.abs() >= SPARSIFY_TOL {
                trip.push((i, j, v));
            }
        }
    }
    SparseMatrix::from_triplets(n, coupling.n_cols(), trip)
}

/// Galerkin triple product Qᵀ A Q, re-symmetrized when A is symmetric.
pub fn galerkin_coarse(a: &SparseMatrix, q: &SparseMatrix) -> Result<SparseMatrix> {
    let qt = q.transpose();
    let coarse = qt.matmul(a)?.matmul(q)?;
    if a.is_symmetric(1e-12) {
        let sym = coarse.add(&coarse.transpose())?.scale(0.5);
        Ok(sym)
    } else {
        Ok(coarse)
    }
}
