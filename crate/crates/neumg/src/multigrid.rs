//! Multilevel hierarchies and solvers.
//!
//! Two construction paths produce the same shape of hierarchy: the exact one
//! computes every transfer operator by mesh intersection, the neural one
//! predicts coupling windows from mass-matrix windows via a per-patch-size
//! model bank and assembles them. A predictor trait keeps the assembly
//! plumbing shared, so an oracle predictor (which returns true coupling
//! windows) must reproduce the exact hierarchy bit-for-bit modulo 1e-12 —
//! the standard way to isolate model error from pipeline bugs.
//!
//! Levels run fine to coarse. Coarse operators are Galerkin products for both
//! the stiffness and mass matrix; the mass is carried along because coarse
//! levels of the neural path read their features from it.

use crate::dataset::{extract_features, record_window};
use crate::error::{Error, Result};
use crate::fem::{apply_dirichlet, assemble_mass, assemble_stiffness, lump};
use crate::l2proj::{
    assemble_coupling, galerkin_coarse, intersection_calls, pseudo_projection, TransferKind,
    TransferOperator,
};
use crate::mesh::Mesh;
use crate::nn::{predict_b_rows, MLPModel};
use crate::sparse::{norm2, DenseCholesky, SparseMatrix, Vector};
use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherKind {
    DampedJacobi,
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherConfig {
    pub kind: SmootherKind,
    pub nu1: usize,
    pub nu2: usize,
    pub omega: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            kind: SmootherKind::DampedJacobi,
            nu1: 2,
            nu2: 2,
            omega: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Sgmg,
    Neural,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Sgmg => write!(f, "sgmg"),
            Provenance::Neural => write!(f, "neural"),
        }
    }
}

#[derive(Debug)]
pub struct Level {
    pub a: SparseMatrix,
    pub m: SparseMatrix,
    /// Prolongation from this level to the next finer one; absent on the finest.
    pub q_to_finer: Option<TransferOperator>,
    factor: OnceCell<DenseCholesky>,
}

impl Level {
    pub fn new(a: SparseMatrix, m: SparseMatrix, q_to_finer: Option<TransferOperator>) -> Level {
        Level {
            a,
            m,
            q_to_finer,
            factor: OnceCell::new(),
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.a.n_rows()
    }
}

#[derive(Debug)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub smoother: SmootherConfig,
    pub provenance: Provenance,
    /// Wall-clock milliseconds spent constructing transfer and coarse operators.
    pub setup_ms: f64,
    /// Element-pair intersections performed during construction.
    pub intersection_calls: u64,
}

impl Hierarchy {
    fn validate(levels: &[Level]) -> Result<()> {
        if levels.len() < 2 {
            return Err(Error::invalid("a hierarchy needs at least 2 levels"));
        }
        for w in levels.windows(2) {
            if w[1].n_dofs() >= w[0].n_dofs() {
                return Err(Error::invalid(
                    "level sizes must be strictly decreasing".to_string(),
                ));
            }
        }
        for (k, lv) in levels.iter().enumerate() {
            if !lv.a.is_symmetric(1e-10) {
                return Err(Error::InvalidMatrix(format!(
                    "level {k} system matrix is not symmetric"
                )));
            }
            let q_ok = match (k, &lv.q_to_finer) {
                (0, None) => true,
                (0, Some(_)) | (_, None) => false,
                (_, Some(q)) => {
                    q.matrix.n_rows() == levels[k - 1].n_dofs()
                        && q.matrix.n_cols() == lv.n_dofs()
                }
            };
            if !q_ok {
                return Err(Error::invalid(format!(
                    "transfer operator shape wrong at level {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &Level {
        &self.levels[0]
    }

    fn direct_solve(&self, level: usize, rhs: &[f64]) -> Result<Vector> {
        let lv = &self.levels[level];
        if lv.factor.get().is_none() {
            let f = DenseCholesky::factor(&lv.a)?;
            let _ = lv.factor.set(f);
        }
        Ok(lv.factor.get().unwrap().solve(rhs))
    }
}

/// One or more smoother sweeps on A x = b, in place.
pub fn smooth(
    a: &SparseMatrix,
    b: &[f64],
    x: &mut Vector,
    kind: SmootherKind,
    sweeps: usize,
    omega: f64,
) -> Result<()> {
    let n = a.n_rows();
    if b.len() != n || x.len() != n {
        return Err(Error::invalid("smoother shape mismatch"));
    }
    let mut diag = vec![0.0; n];
    for i in 0..n {
        diag[i] = a.get(i, i);
        if diag[i] == 0.0 {
            return Err(Error::InvalidMatrix(format!(
                "zero diagonal at row {i}, smoother undefined"
            )));
        }
    }
    for _ in 0..sweeps {
        match kind {
            SmootherKind::DampedJacobi => {
                let ax = a.mul_vec(x);
                for i in 0..n {
                    x[i] += omega * (b[i] - ax[i]) / diag[i];
                }
            }
            SmootherKind::GaussSeidel => {
                for i in 0..n {
                    let mut s = 0.0;
                    for (j, v) in a.row(i) {
                        if j != i {
                            s += v * x[j];
                        }
                    }
                    x[i] = (b[i] - s) / diag[i];
                }
            }
        }
    }
    Ok(())
}

fn residual(a: &SparseMatrix, b: &[f64], x: &[f64]) -> Vector {
    let ax = a.mul_vec(x);
    b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
}

/// Coarse-grid correction using the top two levels, with an exact solve on
/// the second level.
pub fn two_grid_step(hier: &Hierarchy, b: &[f64], x: &mut Vector) -> Result<()> {
    let sm = hier.smoother;
    let lv = &hier.levels[0];
    smooth(&lv.a, b, x, sm.kind, sm.nu1, sm.omega)?;
    let q = &hier.levels[1].q_to_finer.as_ref().unwrap().matrix;
    let rc = q.transpose_mul_vec(&residual(&lv.a, b, x));
    let ec = hier.direct_solve(1, &rc)?;
    let corr = q.mul_vec(&ec);
    for (xi, ci) in x.iter_mut().zip(&corr) {
        *xi += ci;
    }
    smooth(&lv.a, b, x, sm.kind, sm.nu2, sm.omega)?;
    Ok(())
}

fn cycle(hier: &Hierarchy, level: usize, b: &[f64], x: &mut Vector) -> Result<()> {
    if level + 1 == hier.levels.len() {
        *x = hier.direct_solve(level, b)?;
        return Ok(());
    }
    let sm = hier.smoother;
    let lv = &hier.levels[level];
    smooth(&lv.a, b, x, sm.kind, sm.nu1, sm.omega)?;
    let q = &hier.levels[level + 1].q_to_finer.as_ref().unwrap().matrix;
    let rc = q.transpose_mul_vec(&residual(&lv.a, b, x));
    let mut ec = vec![0.0; rc.len()];
    cycle(hier, level + 1, &rc, &mut ec)?;
    let corr = q.mul_vec(&ec);
    for (xi, ci) in x.iter_mut().zip(&corr) {
        *xi += ci;
    }
    smooth(&lv.a, b, x, sm.kind, sm.nu2, sm.omega)?;
    Ok(())
}

/// One V-cycle from the finest level, in place.
pub fn vcycle(hier: &Hierarchy, b: &[f64], x: &mut Vector) -> Result<()> {
    cycle(hier, 0, b, x)
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vector,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// V-cycle iteration until the relative residual drops below `tol`.
/// Non-convergence is reported in the result, not as an error, so that
/// benchmarks keep partial data.
pub fn solve(hier: &Hierarchy, b: &[f64], tol: f64, max_iter: usize) -> Result<SolveResult> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let nb = norm2(b);
    let mut x = vec![0.0; b.len()];
    let mut history = Vec::new();
    if nb == 0.0 {
        return Ok(SolveResult {
            x,
            iterations: 0,
            residual_history: history,
            converged: true,
        });
    }
    for it in 1..=max_iter {
        vcycle(hier, b, &mut x)?;
        let rel = norm2(&residual(&hier.levels[0].a, b, &x)) / nb;
        history.push(rel);
        if !rel.is_finite() {
            return Ok(SolveResult {
                x,
                iterations: it,
                residual_history: history,
                converged: false,
            });
        }
        if rel < tol {
            return Ok(SolveResult {
                x,
                iterations: it,
                residual_history: history,
                converged: true,
            });
        }
    }
    Ok(SolveResult {
        x,
        iterations: max_iter,
        residual_history: history,
        converged: false,
    })
}

/// The mesh at each level plus, below the finest, the fine-node index of each
/// coarse node.
pub struct MeshLevel {
    pub mesh: Mesh,
    pub kept_from_finer: Option<Vec<usize>>,
}

/// Coarsen `n_levels − 1` times with the canonical coarsening.
pub fn mesh_sequence(fine: &Mesh, n_levels: usize) -> Result<Vec<MeshLevel>> {
    if n_levels < 2 {
        return Err(Error::invalid("a hierarchy needs at least 2 levels"));
    }
    let mut out = vec![MeshLevel {
        mesh: fine.clone(),
        kept_from_finer: None,
    }];
    for _ in 1..n_levels {
        let (coarse, kept) = out.last().unwrap().mesh.coarsen()?;
        out.push(MeshLevel {
            mesh: coarse,
            kept_from_finer: Some(kept),
        });
    }
    Ok(out)
}

fn finest_operators(mesh: &Mesh) -> Result<(SparseMatrix, SparseMatrix)> {
    let raw = assemble_stiffness(mesh)?;
    let mut zero = vec![0.0; mesh.n_nodes()];
    let a = apply_dirichlet(&raw, &mut zero, &mesh.boundary_flags())?;
    let m = assemble_mass(mesh)?;
    Ok((a, m))
}

/// Exact hierarchy: transfer operators by L2-projection over mesh
/// intersections, coarse operators by Galerkin products.
pub fn build_hierarchy_sgmg(meshes: &[Mesh], smoother: SmootherConfig) -> Result<Hierarchy> {
    if meshes.len() < 2 {
        return Err(Error::invalid("need at least 2 meshes"));
    }
    for w in meshes.windows(2) {
        if w[0].dim() != w[1].dim() || w[1].n_nodes() >= w[0].n_nodes() {
            return Err(Error::invalid(
                "meshes must share a dimension and decrease in resolution".to_string(),
            ));
        }
    }
    let calls_before = intersection_calls();
    let start = Instant::now();
    let (a0, m0) = finest_operators(&meshes[0])?;
    let mut levels = vec![Level::new(a0, m0, None)];
    for pair in meshes.windows(2) {
        let prev = levels.last().unwrap();
        let b = assemble_coupling(&pair[0], &pair[1])?;
        let q = pseudo_projection(&b, &lump(&prev.m))?;
        let a = galerkin_coarse(&prev.a, &q)?;
        let m = galerkin_coarse(&prev.m, &q)?;
        levels.push(Level::new(
            a,
            m,
            Some(TransferOperator {
                matrix: q,
                kind: TransferKind::PseudoL2,
            }),
        ));
    }
    Hierarchy::validate(&levels)?;
    Ok(Hierarchy {
        levels,
        smoother,
        provenance: Provenance::Sgmg,
        setup_ms: start.elapsed().as_secs_f64() * 1e3,
        intersection_calls: intersection_calls() - calls_before,
    })
}

/// What a transfer predictor sees for one coarse node: the feature window of
/// the level mass matrix plus the patch geometry it was read from.
pub struct PredictRequest<'a> {
    pub patch_size: usize,
    pub features: &'a [f64],
    pub window: &'a crate::dataset::RecordWindow,
    pub level: usize,
}

/// Produces the flat (fine-patch × coarse-patch) coupling window for a
/// request. Implemented by the model bank and by the exact-coupling oracle.
pub trait TransferPredictor {
    fn predict(&self, req: &PredictRequest) -> Result<Vec<f64>>;
}

/// Per-patch-size model collection.
#[derive(Debug, Default)]
pub struct ModelBank {
    models: BTreeMap<usize, MLPModel>,
}

impl ModelBank {
    pub fn new() -> ModelBank {
        ModelBank::default()
    }

    pub fn insert(&mut self, model: MLPModel) -> Result<()> {
        let size = model.patch_size;
        if size == 0 || model.input_size() != size * size || model.output_size() != size * size
        {
            return Err(Error::invalid(format!(
                "model shape ({} -> {}) does not serve patch size {size}",
                model.input_size(),
                model.output_size()
            )));
        }
        self.models.insert(size, model);
        Ok(())
    }

    pub fn get(&self, patch_size: usize) -> Option<&MLPModel> {
        self.models.get(&patch_size)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }
}

impl TransferPredictor for ModelBank {
    fn predict(&self, req: &PredictRequest) -> Result<Vec<f64>> {
        let model = self
            .models
            .get(&req.patch_size)
            .ok_or(Error::MissingModel {
                patch_size: req.patch_size,
            })?;
        predict_b_rows(model, req.features)
    }
}

/// Reference predictor: computes the true coupling matrices once (by mesh
/// intersection, at construction time) and answers every request with the
/// exact window. Exists to validate the neural assembly plumbing.
pub struct OraclePredictor {
    couplings: Vec<SparseMatrix>,
}

impl OraclePredictor {
    pub fn from_meshes(meshes: &[MeshLevel]) -> Result<OraclePredictor> {
        let mut couplings = Vec::new();
        for w in meshes.windows(2) {
            couplings.push(assemble_coupling(&w[0].mesh, &w[1].mesh)?);
        }
        Ok(OraclePredictor { couplings })
    }
}

impl TransferPredictor for OraclePredictor {
    fn predict(&self, req: &PredictRequest) -> Result<Vec<f64>> {
        let b = self.couplings.get(req.level).ok_or_else(|| {
            Error::invalid(format!("oracle has no coupling for level {}", req.level))
        })?;
        let mut out = Vec::with_capacity(req.window.fine.size() * req.window.coarse.size());
        for &i in &req.window.fine.members {
            for &j in &req.window.coarse.members {
                out.push(b.get(i, j));
            }
        }
        Ok(out)
    }
}

/// Predict and assemble the coupling matrix for one level: one window per
/// coarse node, duplicate entries averaged, ghost rows/columns dropped.
fn assemble_predicted_coupling(
    work_fine: &Mesh,
    work_coarse: &Mesh,
    kept: &[usize],
    feature_m: &SparseMatrix,
    predictor: &dyn TransferPredictor,
    level: usize,
    n_fine: usize,
    n_coarse: usize,
) -> Result<SparseMatrix> {
    let coarse_virtual: Vec<bool> = match work_coarse {
        Mesh::TwoD(m) => m.virtual_flags().to_vec(),
        Mesh::OneD(m) => vec![false; m.n_nodes()],
    };
    let fine_virtual: Vec<bool> = match work_fine {
        Mesh::TwoD(m) => m.virtual_flags().to_vec(),
        Mesh::OneD(m) => vec![false; m.n_nodes()],
    };
    let mut acc: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
    for (j_coarse, &_fine_id) in kept.iter().enumerate() {
        if coarse_virtual[j_coarse] {
            continue;
        }
        let window = record_window(work_fine, work_coarse, kept, j_coarse)?;
        if window.fine.size() != window.coarse.size() {
            return Err(Error::invalid(format!(
                "fine patch size {} and coarse patch size {} disagree at coarse node {j_coarse}",
                window.fine.size(),
                window.coarse.size()
            )));
        }
        let (features, _) = extract_features(feature_m, &window);
        let pred = predictor.predict(&PredictRequest {
            patch_size: window.fine.size(),
            features: &features,
            window: &window,
            level,
        })?;
        let sc = window.coarse.size();
        if pred.len() != window.fine.size() * sc {
            return Err(Error::invalid(format!(
                "predictor returned {} values for a {}x{sc} window",
                pred.len(),
                window.fine.size()
            )));
        }
        for (r, &i) in window.fine.members.iter().enumerate() {
            if fine_virtual[i] {
                continue;
            }
            for (c, &j) in window.coarse.members.iter().enumerate() {
                if coarse_virtual[j] {
                    continue;
                }
                let e = acc.entry((i, j)).or_insert((0.0, 0));
                e.0 += pred[r * sc + c];
                e.1 += 1;
            }
        }
    }
    let mut row_covered = vec![false; n_fine];
    let mut col_covered = vec![false; n_coarse];
    let trip: Vec<(usize, usize, f64)> = acc
        .into_iter()
        .map(|((i, j), (sum, count))| {
            row_covered[i] = true;
            col_covered[j] = true;
            (i, j, sum / count as f64)
        })
        .collect();
    if let Some(i) = row_covered.iter().position(|&c| !c) {
        return Err(Error::SolverFailure(format!(
            "fine node {i} is not covered by any prediction window"
        )));
    }
    if let Some(j) = col_covered.iter().position(|&c| !c) {
        return Err(Error::SolverFailure(format!(
            "coarse node {j} is not covered by any prediction window"
        )));
    }
    SparseMatrix::from_triplets(n_fine, n_coarse, trip)
}

/// Restore the row-sum invariant of a predicted coupling matrix: the exact B
/// satisfies sum_j B_ij = d_i (the lumped fine mass), which is what makes the
/// pseudo-projection preserve constants. The training loss only enforces this
/// approximately, so each predicted row is rescaled to meet it exactly. Rows
/// already within roundoff of the invariant are passed through untouched so an
/// exact coupling survives bit-for-bit.
fn rescale_coupling_rows(b: &SparseMatrix, lumped: &[f64]) -> Result<SparseMatrix> {
    let mut trip = Vec::with_capacity(b.nnz());
    for i in 0..b.n_rows() {
        let sum: f64 = b.row(i).map(|(_, v)| v).sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::SolverFailure(format!(
                "predicted coupling row {i} sums to {sum}; cannot preserve constants"
            )));
        }
        let raw = lumped[i] / sum;
        let s = if (raw - 1.0).abs() <= 1e-12 { 1.0 } else { raw };
        for (j, v) in b.row(i) {
            trip.push((i, j, v * s));
        }
    }
    SparseMatrix::from_triplets(b.n_rows(), b.n_cols(), trip)
}

/// Neural hierarchy: mesh sequence as in the exact path, but every coupling
/// matrix is predicted from mass-matrix windows instead of computed by mesh
/// intersection. With `extend`, both meshes of the (single) level pair get a
/// ghost layer so every node presents an interior-sized patch; predictions on
/// ghost rows and columns are discarded.
pub fn build_hierarchy_neural(
    fine_mesh: &Mesh,
    predictor: &dyn TransferPredictor,
    n_levels: usize,
    smoother: SmootherConfig,
    extend: bool,
) -> Result<Hierarchy> {
    let seq = mesh_sequence(fine_mesh, n_levels)?;
    if extend && n_levels != 2 {
        return Err(Error::UnsupportedExtension(
            "ghost-layer extension is limited to two-level hierarchies".into(),
        ));
    }
    let calls_before = intersection_calls();
    let start = Instant::now();
    let (a0, m0) = finest_operators(&seq[0].mesh)?;
    let mut levels = vec![Level::new(a0, m0, None)];
    for (l, pair) in seq.windows(2).enumerate() {
        let kept = pair[1].kept_from_finer.as_ref().unwrap();
        let prev_m = levels.last().unwrap().m.clone();
        let b = if extend {
            let (ext_fine, ext_coarse) = match (&pair[0].mesh, &pair[1].mesh) {
                (Mesh::TwoD(f), Mesh::TwoD(c)) => (
                    Mesh::TwoD(f.extend(crate::dataset::interior_patch_size(2))?),
                    Mesh::TwoD(c.extend(crate::dataset::interior_patch_size(2))?),
                ),
                _ => {
                    return Err(Error::UnsupportedExtension(
                        "ghost-layer extension is only defined for 2D meshes".into(),
                    ))
                }
            };
            let feature_m = assemble_mass(&ext_fine)?;
            assemble_predicted_coupling(
                &ext_fine,
                &ext_coarse,
                kept,
                &feature_m,
                predictor,
                l,
                pair[0].mesh.n_nodes(),
                pair[1].mesh.n_nodes(),
            )?
        } else {
            assemble_predicted_coupling(
                &pair[0].mesh,
                &pair[1].mesh,
                kept,
                &prev_m,
                predictor,
                l,
                pair[0].mesh.n_nodes(),
                pair[1].mesh.n_nodes(),
            )?
        };
        let prev = levels.last().unwrap();
        let lumped = lump(&prev.m);
        let b = rescale_coupling_rows(&b, &lumped)?;
        let q = pseudo_projection(&b, &lumped)?;
        let a = galerkin_coarse(&prev.a, &q)?;
        let m = galerkin_coarse(&prev.m, &q)?;
        levels.push(Level::new(
            a,
            m,
            Some(TransferOperator {
                matrix: q,
                kind: TransferKind::Neural,
            }),
        ));
    }
    Hierarchy::validate(&levels)?;
    Ok(Hierarchy {
        levels,
        smoother,
        provenance: Provenance::Neural,
        setup_ms: start.elapsed().as_secs_f64() * 1e3,
        intersection_calls: intersection_calls() - calls_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_load;
    use crate::mesh::{uniform_mesh_1d, Mesh1D};
    use crate::sparse::dot;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn poisson_1d(n: usize) -> (Mesh, SparseMatrix, Vector) {
        let mesh = Mesh::OneD(uniform_mesh_1d(n, 0.0, 1.0).unwrap());
        let raw = assemble_stiffness(&mesh).unwrap();
        let mut b = assemble_load(&mesh, &|_| 1.0);
        let a = apply_dirichlet(&raw, &mut b, &mesh.boundary_flags()).unwrap();
        (mesh, a, b)
    }

    #[test]
    fn jacobi_matches_hand_value() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (1, 1, 2.0)]).unwrap();
        let mut x = vec![0.0, 0.0];
        smooth(&a, &[2.0, 2.0], &mut x, SmootherKind::DampedJacobi, 1, 2.0 / 3.0).unwrap();
        close(x[0], 2.0 / 3.0, 1e-15);
        close(x[1], 2.0 / 3.0, 1e-15);
    }

    #[test]
    fn smoother_fixed_point_and_errors() {
        let (_, a, b) = poisson_1d(8);
        let exact = DenseCholesky::factor(&a).unwrap().solve(&b);
        for kind in [SmootherKind::DampedJacobi, SmootherKind::GaussSeidel] {
            let mut x = exact.clone();
            smooth(&a, &b, &mut x, kind, 3, 2.0 / 3.0).unwrap();
            for (u, v) in x.iter().zip(&exact) {
                close(*u, *v, 1e-12);
            }
        }
        let singular = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
        let mut x = vec![0.0; 2];
        assert!(matches!(
            smooth(&singular, &[1.0, 1.0], &mut x, SmootherKind::DampedJacobi, 1, 0.5),
            Err(Error::InvalidMatrix(_))
        ));
    }

    #[test]
    fn jacobi_reduces_energy_norm() {
        let (_, a, b) = poisson_1d(16);
        let exact = DenseCholesky::factor(&a).unwrap().solve(&b);
        let mut x = vec![0.0; b.len()];
        let e0: Vector = exact.iter().zip(&x).map(|(u, v)| u - v).collect();
        let before = dot(&e0, &a.mul_vec(&e0));
        smooth(&a, &b, &mut x, SmootherKind::DampedJacobi, 1, 2.0 / 3.0).unwrap();
        let e1: Vector = exact.iter().zip(&x).map(|(u, v)| u - v).collect();
        let after = dot(&e1, &a.mul_vec(&e1));
        assert!(after < before);
    }

    #[test]
    fn sgmg_two_level_q_matches_projection() {
        let fine = Mesh::OneD(Mesh1D::new(vec![0.0, 0.5, 1.0]).unwrap());
        let coarse = Mesh::OneD(uniform_mesh_1d(1, 0.0, 1.0).unwrap());
        let h = build_hierarchy_sgmg(&[fine, coarse], SmootherConfig::default()).unwrap();
        let q = &h.levels[1].q_to_finer.as_ref().unwrap().matrix;
        let expect = [[5.0 / 6.0, 1.0 / 6.0], [0.5, 0.5], [1.0 / 6.0, 5.0 / 6.0]];
        for i in 0..3 {
            for j in 0..2 {
                close(q.get(i, j), expect[i][j], 1e-14);
            }
        }
        assert!(h.intersection_calls > 0);
        assert_eq!(h.provenance, Provenance::Sgmg);
    }

    #[test]
    fn hierarchy_shrinks_and_keeps_spd_mass() {
        let seq = mesh_sequence(&Mesh::OneD(uniform_mesh_1d(32, 0.0, 1.0).unwrap()), 3).unwrap();
        let meshes: Vec<Mesh> = seq.iter().map(|s| s.mesh.clone()).collect();
        let h = build_hierarchy_sgmg(&meshes, SmootherConfig::default()).unwrap();
        assert_eq!(h.n_levels(), 3);
        for w in h.levels.windows(2) {
            assert!(w[1].n_dofs() < w[0].n_dofs());
        }
        for lv in &h.levels {
            DenseCholesky::factor(&lv.m).expect("coarse mass must stay SPD");
            DenseCholesky::factor(&lv.a).expect("coarse system must stay SPD");
        }
    }

    #[test]
    fn two_grid_keeps_exact_solution() {
        let (mesh, a, b) = poisson_1d(16);
        let (coarse, _) = mesh.coarsen().unwrap();
        let h = build_hierarchy_sgmg(&[mesh, coarse], SmootherConfig::default()).unwrap();
        let mut x = DenseCholesky::factor(&a).unwrap().solve(&b);
        let exact = x.clone();
        two_grid_step(&h, &b, &mut x).unwrap();
        for (u, v) in x.iter().zip(&exact) {
            close(*u, *v, 1e-12);
        }
    }

    #[test]
    fn identity_transfer_converges_in_one_step() {
        let (_, a, b) = poisson_1d(8);
        // a fake 2-level hierarchy whose coarse problem IS the fine problem:
        // the coarse solve then removes the entire error in one correction
        let q = SparseMatrix::identity(b.len());
        let levels = vec![
            Level::new(a.clone(), SparseMatrix::identity(b.len()), None),
            Level::new(
                a.clone(),
                SparseMatrix::identity(b.len()),
                Some(TransferOperator {
                    matrix: q,
                    kind: TransferKind::PseudoL2,
                }),
            ),
        ];
        let h = Hierarchy {
            levels,
            smoother: SmootherConfig::default(),
            provenance: Provenance::Sgmg,
            setup_ms: 0.0,
            intersection_calls: 0,
        };
        let mut x = vec![0.0; b.len()];
        two_grid_step(&h, &b, &mut x).unwrap();
        let exact = DenseCholesky::factor(&a).unwrap().solve(&b);
        for (u, v) in x.iter().zip(&exact) {
            close(*u, *v, 1e-11);
        }
    }

    #[test]
    fn vcycle_two_level_equals_two_grid() {
        let (mesh, _, b) = poisson_1d(32);
        let (coarse, _) = mesh.coarsen().unwrap();
        let h = build_hierarchy_sgmg(&[mesh, coarse], SmootherConfig::default()).unwrap();
        let mut x1 = vec![0.0; b.len()];
        let mut x2 = vec![0.0; b.len()];
        two_grid_step(&h, &b, &mut x1).unwrap();
        vcycle(&h, &b, &mut x2).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn vcycle_contracts_on_poisson() {
        let seq = mesh_sequence(&Mesh::OneD(uniform_mesh_1d(64, 0.0, 1.0).unwrap()), 3).unwrap();
        let meshes: Vec<Mesh> = seq.iter().map(|s| s.mesh.clone()).collect();
        let h = build_hierarchy_sgmg(&meshes, SmootherConfig::default()).unwrap();
        let (_, _, b) = poisson_1d(64);
        let nb = norm2(&b);
        let mut x = vec![0.0; b.len()];
        vcycle(&h, &b, &mut x).unwrap();
        let r1 = norm2(&residual(&h.levels[0].a, &b, &x)) / nb;
        vcycle(&h, &b, &mut x).unwrap();
        let r2 = norm2(&residual(&h.levels[0].a, &b, &x)) / nb;
        assert!(r1 < 1.0);
        assert!(r2 < r1, "contraction stalled: {r1} then {r2}");
        // null right-hand side with zero start stays zero
        let mut z = vec![0.0; b.len()];
        vcycle(&h, &vec![0.0; b.len()], &mut z).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solve_reports_history_and_zero_rhs() {
        let (mesh, _, b) = poisson_1d(64);
        let (coarse, _) = mesh.coarsen().unwrap();
        let h = build_hierarchy_sgmg(&[mesh, coarse], SmootherConfig::default()).unwrap();
        let res = solve(&h, &b, 1e-8, 100).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, res.residual_history.len());
        for w in res.residual_history.windows(2) {
            assert!(w[1] < w[0], "history not strictly decreasing");
        }
        let res2 = solve(&h, &b, 1e-8, 100).unwrap();
        assert_eq!(res.residual_history, res2.residual_history);

        let zero = solve(&h, &vec![0.0; b.len()], 1e-8, 100).unwrap();
        assert!(zero.converged);
        assert_eq!(zero.iterations, 0);
        assert!(zero.residual_history.is_empty());
        assert!(solve(&h, &b, 0.0, 10).is_err());
    }

    fn max_matrix_diff(a: &SparseMatrix, b: &SparseMatrix) -> f64 {
        a.add(&b.scale(-1.0)).unwrap().max_abs()
    }

    #[test]
    fn oracle_predictor_reproduces_sgmg_hierarchy() {
        // 1D, jittered, 3 levels
        let fine = Mesh::OneD(uniform_mesh_1d(32, 0.0, 1.0).unwrap().jittered(0.25, 5).unwrap());
        let seq = mesh_sequence(&fine, 3).unwrap();
        let meshes: Vec<Mesh> = seq.iter().map(|s| s.mesh.clone()).collect();
        let sg = build_hierarchy_sgmg(&meshes, SmootherConfig::default()).unwrap();
        let oracle = OraclePredictor::from_meshes(&seq).unwrap();
        let nn = build_hierarchy_neural(&fine, &oracle, 3, SmootherConfig::default(), false)
            .unwrap();
        assert_eq!(nn.provenance, Provenance::Neural);
        assert_eq!(nn.intersection_calls, 0, "neural build must not intersect");
        for (ls, ln) in sg.levels.iter().zip(&nn.levels) {
            assert!(max_matrix_diff(&ls.a, &ln.a) < 1e-12);
            assert!(max_matrix_diff(&ls.m, &ln.m) < 1e-12);
            if let (Some(qs), Some(qn)) = (&ls.q_to_finer, &ln.q_to_finer) {
                assert!(max_matrix_diff(&qs.matrix, &qn.matrix) < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_predictor_reproduces_sgmg_2d() {
        let fine = Mesh::TwoD(crate::mesh::structured_tri_mesh(8, 8).unwrap());
        let seq = mesh_sequence(&fine, 2).unwrap();
        let meshes: Vec<Mesh> = seq.iter().map(|s| s.mesh.clone()).collect();
        let sg = build_hierarchy_sgmg(&meshes, SmootherConfig::default()).unwrap();
        let oracle = OraclePredictor::from_meshes(&seq).unwrap();
        let nn = build_hierarchy_neural(&fine, &oracle, 2, SmootherConfig::default(), false)
            .unwrap();
        for (ls, ln) in sg.levels.iter().zip(&nn.levels) {
            assert!(max_matrix_diff(&ls.a, &ln.a) < 1e-12);
            assert!(max_matrix_diff(&ls.m, &ln.m) < 1e-12);
        }
    }

    #[test]
    fn missing_model_is_a_named_error() {
        let fine = Mesh::OneD(uniform_mesh_1d(16, 0.0, 1.0).unwrap());
        let bank = ModelBank::new();
        let err = build_hierarchy_neural(&fine, &bank, 2, SmootherConfig::default(), false)
            .unwrap_err();
        match err {
            Error::MissingModel { patch_size } => assert!(patch_size == 2 || patch_size == 3),
            e => panic!("expected MissingModel, got {e:?}"),
        }
    }

    #[test]
    fn model_bank_rejects_mismatched_shapes() {
        let mut bank = ModelBank::new();
        let mut model = crate::nn::init_mlp(&[9, 4, 9], 0).unwrap();
        model.patch_size = 3;
        bank.insert(model).unwrap();
        assert_eq!(bank.sizes(), vec![3]);
        let mut bad = crate::nn::init_mlp(&[9, 4, 8], 0).unwrap();
        bad.patch_size = 3;
        assert!(bank.insert(bad).is_err());
    }
}
