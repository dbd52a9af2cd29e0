//! Training data: patch records extracted from mass and coupling matrices.
//!
//! A record belongs to one coarse node. Its rows are the fine patch of that
//! node's fine counterpart, in canonical patch order; feature columns are the
//! same fine patch (a window into M), target columns are the coarse patch (a
//! window into B). Window layouts keep dimensions fixed per patch size, which
//! is what lets one network serve every node of a family; entries of M or B
//! falling outside the window are structurally zero on the structured
//! coarsenings used here.

use crate::error::{Error, Result};
use crate::fem::assemble_mass;
use crate::l2proj::assemble_coupling;
use crate::mesh::{structured_tri_mesh, uniform_mesh_1d, Mesh, Patch};
use crate::sparse::SparseMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

pub const DEFAULT_GAMMA: f64 = 0.25;

/// Interior patch size for each dimension: 3 in 1D, 7 on the structured
/// triangulation in 2D.
pub fn interior_patch_size(dimension: usize) -> usize {
    match dimension {
        1 => 3,
        _ => 7,
    }
}

/// Patch sizes that occur on the structured meshes, interior first.
pub fn family_sizes(dimension: usize) -> &'static [usize] {
    match dimension {
        1 => &[3, 2],
        _ => &[7, 5, 4, 3],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
    pub class_id: usize,
    pub patch_size: usize,
    pub aux_lumped: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Refinement,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Refinement => write!(f, "refinement"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dimension: usize,
    pub patch_size: usize,
    pub classes: Vec<(usize, usize)>,
    pub schedule_kind: ScheduleKind,
    pub seed: u64,
}

/// Row/column index sets of one record: rows are the fine patch, feature
/// columns the fine patch again, target columns the coarse patch.
#[derive(Debug, Clone)]
pub struct RecordWindow {
    pub fine: Patch,
    pub coarse: Patch,
}

pub fn record_window(
    fine_mesh: &Mesh,
    coarse_mesh: &Mesh,
    kept: &[usize],
    coarse_node: usize,
) -> Result<RecordWindow> {
    let fine = fine_mesh.patch(kept[coarse_node])?;
    let coarse = coarse_mesh.patch(coarse_node)?;
    Ok(RecordWindow { fine, coarse })
}

/// Feature vector and lumped-mass auxiliary for a window: the M entries over
/// fine-patch rows × fine-patch columns, row-major, plus full row sums.
pub fn extract_features(m: &SparseMatrix, window: &RecordWindow) -> (Vec<f64>, Vec<f64>) {
    let rows = &window.fine.members;
    let mut features = Vec::with_capacity(rows.len() * rows.len());
    let mut aux = Vec::with_capacity(rows.len());
    for &r in rows {
        for &c in rows {
            features.push(m.get(r, c));
        }
        aux.push(m.row(r).map(|(_, v)| v).sum());
    }
    (features, aux)
}

pub fn extract_record(
    m: &SparseMatrix,
    b: &SparseMatrix,
    window: &RecordWindow,
    class_id: usize,
) -> Result<PatchRecord> {
    let (features, aux_lumped) = extract_features(m, window);
    for (k, &a) in aux_lumped.iter().enumerate() {
        if !(a > 0.0) {
            return Err(Error::InvalidMass(format!(
                "row sum of patch member {k} is {a}, expected positive"
            )));
        }
    }
    let mut target = Vec::with_capacity(window.fine.size() * window.coarse.size());
    for &r in &window.fine.members {
        for &c in &window.coarse.members {
            target.push(b.get(r, c));
        }
    }
    Ok(PatchRecord {
        features,
        target,
        class_id,
        patch_size: window.fine.size(),
        aux_lumped,
    })
}

/// Coarse nodes whose fine and coarse patches both have exactly `patch_size`
/// members (and which are not ghost nodes), in ascending order.
pub fn eligible_centers(
    fine_mesh: &Mesh,
    coarse_mesh: &Mesh,
    kept: &[usize],
    patch_size: usize,
) -> Result<Vec<usize>> {
    let virt = match coarse_mesh {
        Mesh::TwoD(m) => m.virtual_flags().to_vec(),
        Mesh::OneD(m) => vec![false; m.n_nodes()],
    };
    let mut out = Vec::new();
    for j in 0..coarse_mesh.n_nodes() {
        if virt[j] {
            continue;
        }
        if coarse_mesh.patch(j)?.size() == patch_size
            && fine_mesh.patch(kept[j])?.size() == patch_size
        {
            out.push(j);
        }
    }
    Ok(out)
}

pub fn class_schedule_linear(n0: usize, k: usize, count: usize) -> Result<Vec<usize>> {
    if n0 == 0 || k == 0 || count == 0 {
        return Err(Error::invalid("schedule parameters must be positive"));
    }
    Ok((0..count).map(|i| n0 + i * k).collect())
}

pub fn class_schedule_refinement(n0: usize, factor: usize, levels: usize) -> Result<Vec<usize>> {
    if n0 == 0 || levels == 0 {
        return Err(Error::invalid("schedule parameters must be positive"));
    }
    if factor != 2 && factor != 4 {
        return Err(Error::invalid("refinement factor must be 2 or 4"));
    }
    Ok((0..levels).map(|i| n0 * factor.pow(i as u32)).collect())
}

/// Stream-style seed derivation: one master seed plus a salt yields
/// decorrelated per-mesh and per-class seeds.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn base_mesh(dimension: usize, n_elements: usize) -> Result<Mesh> {
    match dimension {
        1 => Ok(Mesh::OneD(uniform_mesh_1d(n_elements, 0.0, 1.0)?)),
        2 => {
            let nx = ((n_elements / 2) as f64).sqrt().round() as usize;
            if nx == 0 || 2 * nx * nx != n_elements || nx % 2 != 0 {
                return Err(Error::invalid(format!(
                    "2D class size {n_elements} must be 2·k² for an even grid size k"
                )));
            }
            Ok(Mesh::TwoD(structured_tri_mesh(nx, nx)?))
        }
        d => Err(Error::invalid(format!("unsupported dimension {d}"))),
    }
}

/// Generate records of one class for one patch-size family by repeatedly
/// jittering the base mesh, coarsening, and extracting a record per eligible
/// coarse node until `records` are collected.
pub fn generate_class_sized(
    dimension: usize,
    n_elements: usize,
    records: usize,
    seed: u64,
    gamma: f64,
    patch_size: usize,
) -> Result<Vec<PatchRecord>> {
    let base = base_mesh(dimension, n_elements)?;
    let mut out = Vec::with_capacity(records);
    let mut mesh_idx: u64 = 0;
    while out.len() < records {
        let fine = base.jittered(gamma, derive_seed(seed, mesh_idx))?;
        let (coarse, kept) = fine.coarsen()?;
        let centers = eligible_centers(&fine, &coarse, &kept, patch_size)?;
        if centers.is_empty() {
            return Err(Error::invalid(format!(
                "no coarse node of a {n_elements}-element mesh has patch size {patch_size}"
            )));
        }
        let m = assemble_mass(&fine)?;
        let b = assemble_coupling(&fine, &coarse)?;
        for j in centers {
            if out.len() == records {
                break;
            }
            let window = record_window(&fine, &coarse, &kept, j)?;
            out.push(extract_record(&m, &b, &window, n_elements)?);
        }
        mesh_idx += 1;
    }
    Ok(out)
}

/// Interior-family generation with the default jitter amplitude.
pub fn generate_class(
    dimension: usize,
    n_elements: usize,
    records: usize,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    generate_class_sized(
        dimension,
        n_elements,
        records,
        seed,
        DEFAULT_GAMMA,
        interior_patch_size(dimension),
    )
}

/// Deterministic stratified split into (train, validation, test):
/// per class, 1/5 goes to test and 1/5 of the rest to validation.
pub fn split(
    records: &[PatchRecord],
    seed: u64,
) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>, Vec<PatchRecord>)> {
    if records.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 records to split, got {}",
            records.len()
        )));
    }
    let mut classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in classes {
        let mut idx: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].class_id == class)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_test = n / 5;
        let n_val = (n - n_test) / 5;
        for (k, &i) in idx.iter().enumerate() {
            let rec = records[i].clone();
            if k < n_test {
                test.push(rec);
            } else if k < n_test + n_val {
                val.push(rec);
            } else {
                train.push(rec);
            }
        }
    }
    Ok((train, val, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub gaps: Vec<usize>,
    pub gap_ratio: f64,
}

impl std::fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "class gaps {:?}, max/min gap ratio {:.3}",
            self.gaps, self.gap_ratio
        )
    }
}

/// Gap sequence between consecutive class sizes and its max/min ratio;
/// 1.0 for the perfectly balanced (single-gap or single-class) cases.
pub fn balance_diagnostic(manifest: &DatasetManifest) -> BalanceReport {
    let ns: Vec<usize> = manifest.classes.iter().map(|&(n, _)| n).collect();
    let gaps: Vec<usize> = ns.windows(2).map(|w| w[1] - w[0]).collect();
    let gap_ratio = if gaps.is_empty() {
        1.0
    } else {
        let max = *gaps.iter().max().unwrap() as f64;
        let min = *gaps.iter().min().unwrap() as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    };
    BalanceReport { gaps, gap_ratio }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:.16e}", x))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_dataset(
    w: &mut impl Write,
    manifest: &DatasetManifest,
    records: &[PatchRecord],
) -> Result<()> {
    let classes = manifest
        .classes
        .iter()
        .map(|(n, c)| format!("{n}:{c}"))
        .collect::<Vec<_>>()
        .join(",");
    writeln!(
        w,
        "dimension={} patch_size={} schedule={} seed={} classes={}",
        manifest.dimension, manifest.patch_size, manifest.schedule_kind, manifest.seed, classes
    )?;
    for r in records {
        writeln!(
            w,
            "{} {} | {} | {} | {}",
            r.class_id,
            r.patch_size,
            fmt_vec(&r.features),
            fmt_vec(&r.target),
            fmt_vec(&r.aux_lumped)
        )?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl BufRead) -> Result<(DatasetManifest, Vec<PatchRecord>)> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty dataset file"))
        .and_then(|(k, l)| Ok((k, l?)))?;
    let mut dimension = None;
    let mut patch_size = None;
    let mut schedule = None;
    let mut seed = None;
    let mut classes = Vec::new();
    for tok in header.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("manifest token `{tok}` is not key=value")))?;
        match key {
            "dimension" => {
                dimension = Some(val.parse().map_err(|_| Error::parse(1, "bad dimension"))?)
            }
            "patch_size" => {
                patch_size = Some(val.parse().map_err(|_| Error::parse(1, "bad patch_size"))?)
            }
            "schedule" => {
                schedule = Some(match val {
                    "linear" => ScheduleKind::Linear,
                    "refinement" => ScheduleKind::Refinement,
                    _ => return Err(Error::parse(1, format!("unknown schedule `{val}`"))),
                })
            }
            "seed" => seed = Some(val.parse().map_err(|_| Error::parse(1, "bad seed"))?),
            "classes" => {
                if !val.is_empty() {
                    for pair in val.split(',') {
                        let (n, c) = pair.split_once(':').ok_or_else(|| {
                            Error::parse(1, format!("class token `{pair}` is not N:count"))
                        })?;
                        classes.push((
                            n.parse().map_err(|_| Error::parse(1, "bad class size"))?,
                            c.parse().map_err(|_| Error::parse(1, "bad class count"))?,
                        ));
                    }
                }
            }
            _ => return Err(Error::parse(1, format!("unknown manifest key `{key}`"))),
        }
    }
    let manifest = DatasetManifest {
        dimension: dimension.ok_or_else(|| Error::parse(1, "missing dimension"))?,
        patch_size: patch_size.ok_or_else(|| Error::parse(1, "missing patch_size"))?,
        classes,
        schedule_kind: schedule.ok_or_else(|| Error::parse(1, "missing schedule"))?,
        seed: seed.ok_or_else(|| Error::parse(1, "missing seed"))?,
    };
    let mut records = Vec::new();
    for (k, line) in lines {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                lineno,
                format!("expected 4 |-separated sections, got {}", parts.len()),
            ));
        }
        let head: Vec<&str> = parts[0].split_whitespace().collect();
        if head.len() != 2 {
            return Err(Error::parse(lineno, "record head must be `class_id patch_size`"));
        }
        let class_id = head[0]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad class_id"))?;
        let patch_size: usize = head[1]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad patch_size"))?;
        let parse_vec = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::parse(lineno, format!("bad float `{t}`")))
                })
                .collect()
        };
        let features = parse_vec(parts[1])?;
        let target = parse_vec(parts[2])?;
        let aux_lumped = parse_vec(parts[3])?;
        if aux_lumped.len() != patch_size {
            return Err(Error::parse(
                lineno,
                format!(
                    "aux length {} does not match patch size {patch_size}",
                    aux_lumped.len()
                ),
            ));
        }
        records.push(PatchRecord {
            features,
            target,
            class_id,
            patch_size,
            aux_lumped,
        });
    }
    Ok((manifest, records))
}
