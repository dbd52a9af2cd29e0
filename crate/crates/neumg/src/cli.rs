//! Command-line interface: dataset generation, model training, multigrid
//! solves, the exact-vs-neural benchmark sweep, and file inspection.
//!
//! Every command resolves its parameters from defaults, then an optional
//! `key=value` config file, then command-line flags (highest precedence),
//! and validates everything before producing any output file.

use crate::dataset::{
    balance_diagnostic, class_schedule_linear, class_schedule_refinement, derive_seed,
    family_sizes, generate_class_sized, interior_patch_size, read_dataset, split, write_dataset,
    DatasetManifest, ScheduleKind, DEFAULT_GAMMA,
};
use crate::error::{Error, Result};
use crate::fem::assemble_load;
use crate::mesh::{structured_tri_mesh, uniform_mesh_1d, Mesh};
use crate::multigrid::{
    build_hierarchy_neural, build_hierarchy_sgmg, mesh_sequence, solve, Hierarchy, ModelBank,
    SmootherConfig, SmootherKind,
};
use crate::nn::{
    default_arch, fnv1a, init_mlp, load_model, mean_loss, save_model, train, LossConfig,
};
use crate::sparse::{SparseMatrix, Vector};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

/// Coarsest-level size bound used when the level count is `auto`.
pub const AUTO_COARSEST_MAX: usize = 500;

#[derive(Parser)]
#[command(
    name = "neumg",
    about = "Multigrid transfer operators, exact and learned, for P1 Poisson problems"
)]
pub struct Cli {
    /// key=value defaults file; command-line flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a patch-record dataset for one patch-size family
    GenData(GenDataArgs),
    /// Train a model on a dataset, saving checkpoint and history CSV
    Train(TrainArgs),
    /// Build a hierarchy (sgmg or neural) and solve a Poisson problem
    Solve(SolveArgs),
    /// Sweep problem sizes and compare both construction methods
    Bench(BenchArgs),
    /// Summarize a mesh, matrix, model, or dataset file
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Spatial dimension, 1 or 2
    #[arg(long)]
    dimension: Option<usize>,
    /// Class schedule for 1D: linear or refinement
    #[arg(long)]
    schedule: Option<String>,
    /// First class size in elements (1D schedules)
    #[arg(long)]
    n0: Option<usize>,
    /// Element-count step between linear-schedule classes
    #[arg(long)]
    step: Option<usize>,
    /// Number of linear-schedule classes
    #[arg(long)]
    count: Option<usize>,
    /// Growth factor of the refinement schedule, 2 or 4
    #[arg(long)]
    factor: Option<usize>,
    /// Number of refinement-schedule classes
    #[arg(long)]
    levels: Option<usize>,
    /// 2D class sizes as comma-separated even cells-per-side, e.g. 4,8,12
    #[arg(long)]
    grids: Option<String>,
    /// Records per class
    #[arg(long)]
    records: Option<usize>,
    /// Patch-size family to extract
    #[arg(long)]
    patch_size: Option<usize>,
    /// Node jitter amplitude, in [0, 0.5)
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file produced by gen-data
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch history CSV output path
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weight on the row-sum penalty (1/alpha scaling)
    #[arg(long)]
    alpha: Option<f64>,
    /// Loss weight on the row-match penalty (1/beta scaling)
    #[arg(long)]
    beta: Option<f64>,
    /// Initialization and shuffle seed
    #[arg(long)]
    seed: Option<u64>,
    /// Layer sizes override, comma-separated, e.g. 9,64,64,9
    #[arg(long)]
    arch: Option<String>,
    /// Warm-start checkpoint; continues training instead of initializing
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
pub struct SolveArgs {
    /// Spatial dimension, 1 or 2
    #[arg(long)]
    dimension: Option<usize>,
    /// 1D element count
    #[arg(long)]
    n: Option<usize>,
    /// 2D cells per side; the mesh has (grid+1)^2 nodes
    #[arg(long)]
    grid: Option<usize>,
    /// Hierarchy construction: sgmg or neural
    #[arg(long)]
    method: Option<String>,
    /// Level count, or auto to coarsen until the coarsest level is small
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated model checkpoints (neural method)
    #[arg(long)]
    models: Option<String>,
    /// Give boundary patches interior context via a ghost layer (2D neural, 2 levels)
    #[arg(long)]
    extend: bool,
    /// Relative-residual tolerance
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Jitter amplitude applied to the test mesh, in [0, 0.5)
    #[arg(long)]
    jitter: Option<f64>,
    /// Jitter seed for the test mesh
    #[arg(long)]
    mesh_seed: Option<u64>,
    /// Right-hand side: constant (f = 1) or zero
    #[arg(long)]
    rhs: Option<String>,
    /// Smoother kind: jacobi or gauss-seidel
    #[arg(long)]
    smoother: Option<String>,
    /// Pre-smoothing sweeps
    #[arg(long)]
    nu1: Option<usize>,
    /// Post-smoothing sweeps
    #[arg(long)]
    nu2: Option<usize>,
    /// Jacobi damping factor
    #[arg(long)]
    omega: Option<f64>,
    /// Also write the CSV report here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump the residual history CSV here
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Spatial dimension, 1 or 2
    #[arg(long)]
    dimension: Option<usize>,
    /// Comma-separated problem sizes (1D elements or 2D cells per side)
    #[arg(long)]
    sizes: Option<String>,
    /// Level count, or auto
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated model checkpoints for the neural method
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    extend: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    mesh_seed: Option<u64>,
    #[arg(long)]
    smoother: Option<String>,
    #[arg(long)]
    nu1: Option<usize>,
    #[arg(long)]
    nu2: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    /// Benchmark CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for two-column plot data files
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    /// File to summarize (model, dataset, mesh, or matrix)
    path: PathBuf,
}

/// Flat key=value map parsed from a config file; keys are normalized so
/// `patch-size` and `patch_size` are the same key.
#[derive(Debug, Default)]
pub struct ConfigMap {
    values: HashMap<String, String>,
}

impl ConfigMap {
    pub fn load(path: Option<&Path>) -> Result<ConfigMap> {
        let mut values = HashMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got {raw:?}")))?;
                values.insert(normalize_key(k), v.trim().to_string());
            }
        }
        Ok(ConfigMap { values })
    }

    fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(|s| s.as_str())
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::invalid(format!("cannot parse {key} = {raw:?}")))
}

/// Flag beats config beats default.
fn pick<T: FromStr>(flag: Option<T>, cfg: &ConfigMap, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get_raw(key) {
        Some(raw) => parse_value(key, raw),
        None => Ok(default),
    }
}

fn pick_opt<T: FromStr>(flag: Option<T>, cfg: &ConfigMap, key: &str) -> Result<Option<T>> {
    if let Some(v) = flag {
        return Ok(Some(v));
    }
    match cfg.get_raw(key) {
        Some(raw) => Ok(Some(parse_value(key, raw)?)),
        None => Ok(None),
    }
}

fn parse_usize_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = raw
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::invalid(format!("{key} must not be empty")));
    }
    Ok(out)
}

fn check_dimension(d: usize) -> Result<usize> {
    if d == 1 || d == 2 {
        Ok(d)
    } else {
        Err(Error::invalid(format!("dimension must be 1 or 2, got {d}")))
    }
}

fn resolve_smoother(
    kind: Option<String>,
    nu1: Option<usize>,
    nu2: Option<usize>,
    omega: Option<f64>,
    cfg: &ConfigMap,
) -> Result<SmootherConfig> {
    let defaults = SmootherConfig::default();
    let kind_s = pick(kind, cfg, "smoother", "jacobi".to_string())?;
    let kind = match kind_s.as_str() {
        "jacobi" => SmootherKind::DampedJacobi,
        "gauss-seidel" => SmootherKind::GaussSeidel,
        other => {
            return Err(Error::invalid(format!(
                "smoother must be jacobi or gauss-seidel, got {other}"
            )))
        }
    };
    let omega = pick(omega, cfg, "omega", defaults.omega)?;
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid(format!("omega must lie in (0, 1], got {omega}")));
    }
    Ok(SmootherConfig {
        kind,
        nu1: pick(nu1, cfg, "nu1", defaults.nu1)?,
        nu2: pick(nu2, cfg, "nu2", defaults.nu2)?,
        omega,
    })
}

fn problem_mesh(dimension: usize, size: usize, jitter: f64, mesh_seed: u64) -> Result<Mesh> {
    let base = match dimension {
        1 => Mesh::OneD(uniform_mesh_1d(size, 0.0, 1.0)?),
        _ => Mesh::TwoD(structured_tri_mesh(size, size)?),
    };
    if jitter > 0.0 {
        base.jittered(jitter, mesh_seed)
    } else {
        Ok(base)
    }
}

/// Level count for `auto`: coarsen until the coarsest level has at most
/// `AUTO_COARSEST_MAX` nodes or the mesh stops being coarsenable.
fn auto_levels(mesh: &Mesh) -> usize {
    let mut levels = 1;
    let mut cur = mesh.clone();
    while levels < 2 || cur.n_nodes() > AUTO_COARSEST_MAX {
        match cur.coarsen() {
            Ok((c, _)) => {
                cur = c;
                levels += 1;
            }
            Err(_) => break,
        }
    }
    levels.max(2)
}

fn resolve_levels(raw: &str, mesh: &Mesh) -> Result<usize> {
    if raw == "auto" {
        return Ok(auto_levels(mesh));
    }
    let n: usize = parse_value("levels", raw)?;
    if n < 2 {
        return Err(Error::invalid("levels must be at least 2"));
    }
    Ok(n)
}

fn load_bank(paths_raw: &str) -> Result<ModelBank> {
    let mut bank = ModelBank::new();
    for p in paths_raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        bank.insert(load_model(Path::new(p))?)?;
    }
    if bank.sizes().is_empty() {
        return Err(Error::invalid("no model checkpoints given"));
    }
    Ok(bank)
}

/// Load vector for -Δu = f with homogeneous Dirichlet data: boundary entries
/// are zeroed to match the eliminated system.
fn rhs_vector(mesh: &Mesh, kind: &str) -> Result<Vector> {
    match kind {
        "zero" => Ok(vec![0.0; mesh.n_nodes()]),
        "constant" => {
            let mut b = assemble_load(mesh, &|_| 1.0);
            for (i, &bd) in mesh.boundary_flags().iter().enumerate() {
                if bd {
                    b[i] = 0.0;
                }
            }
            Ok(b)
        }
        other => Err(Error::invalid(format!(
            "rhs must be constant or zero, got {other}"
        ))),
    }
}

fn build_hierarchy(
    method: &str,
    mesh: &Mesh,
    n_levels: usize,
    smoother: SmootherConfig,
    bank: Option<&ModelBank>,
    extend: bool,
) -> Result<Hierarchy> {
    match method {
        "sgmg" => {
            let seq = mesh_sequence(mesh, n_levels)?;
            let meshes: Vec<Mesh> = seq.into_iter().map(|s| s.mesh).collect();
            build_hierarchy_sgmg(&meshes, smoother)
        }
        "neural" => {
            let bank = bank.ok_or_else(|| {
                Error::invalid("the neural method needs --models with at least one checkpoint")
            })?;
            build_hierarchy_neural(mesh, bank, n_levels, smoother, extend)
        }
        other => Err(Error::invalid(format!(
            "method must be sgmg or neural, got {other}"
        ))),
    }
}

pub const SOLVE_CSV_HEADER: &str =
    "method,levels,dofs,iterations,final_relres,setup_ms,solve_ms";
pub const BENCH_CSV_HEADER: &str =
    "method,dofs,levels,iterations,final_relres,setup_ms,solve_ms,intersections,status";

struct SolveRow {
    method: String,
    levels: usize,
    dofs: usize,
    iterations: usize,
    final_relres: f64,
    setup_ms: f64,
    solve_ms: f64,
    intersections: u64,
    converged: bool,
}

fn run_solve_once(
    method: &str,
    mesh: &Mesh,
    n_levels: usize,
    smoother: SmootherConfig,
    bank: Option<&ModelBank>,
    extend: bool,
    rhs_kind: &str,
    tol: f64,
    max_iter: usize,
) -> Result<(SolveRow, Vec<f64>)> {
    let hier = build_hierarchy(method, mesh, n_levels, smoother, bank, extend)?;
    let b = rhs_vector(mesh, rhs_kind)?;
    let t0 = Instant::now();
    let res = solve(&hier, &b, tol, max_iter)?;
    let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
    let final_relres = res.residual_history.last().copied().unwrap_or(0.0);
    Ok((
        SolveRow {
            method: method.to_string(),
            levels: hier.n_levels(),
            dofs: mesh.n_nodes(),
            iterations: res.iterations,
            final_relres,
            setup_ms: hier.setup_ms,
            solve_ms,
            intersections: hier.intersection_calls,
            converged: res.converged,
        },
        res.residual_history,
    ))
}

fn solve_csv_row(r: &SolveRow) -> String {
    format!(
        "{},{},{},{},{:.6e},{:.3},{:.3}",
        r.method, r.levels, r.dofs, r.iterations, r.final_relres, r.setup_ms, r.solve_ms
    )
}

fn bench_csv_row(r: &SolveRow) -> String {
    format!(
        "{},{},{},{},{:.6e},{:.3},{:.3},{},ok",
        r.method, r.dofs, r.levels, r.iterations, r.final_relres, r.setup_ms, r.solve_ms,
        r.intersections
    )
}

fn bench_error_row(method: &str, dofs: usize, err: &Error) -> String {
    let msg = err.to_string().replace([',', '\n'], ";");
    format!("{method},{dofs},,,,,,,error: {msg}")
}

fn cmd_gen_data(args: GenDataArgs, cfg: &ConfigMap) -> Result<()> {
    let dimension = check_dimension(pick(args.dimension, cfg, "dimension", 1)?)?;
    let patch_size = pick(
        args.patch_size,
        cfg,
        "patch_size",
        interior_patch_size(dimension),
    )?;
    if !family_sizes(dimension).contains(&patch_size) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} is not a {dimension}D family; valid sizes are {:?}",
            family_sizes(dimension)
        )));
    }
    let gamma = pick(args.gamma, cfg, "gamma", DEFAULT_GAMMA)?;
    let records = pick(args.records, cfg, "records", 1000)?;
    if records == 0 {
        return Err(Error::invalid("records must be positive"));
    }
    let seed = pick(args.seed, cfg, "seed", 42)?;
    let out = pick(args.out, cfg, "out", PathBuf::from("dataset.txt"))?;

    let schedule_s = pick(args.schedule, cfg, "schedule", "linear".to_string())?;
    let schedule_kind = match schedule_s.as_str() {
        "linear" => ScheduleKind::Linear,
        "refinement" => ScheduleKind::Refinement,
        other => {
            return Err(Error::invalid(format!(
                "schedule must be linear or refinement, got {other}"
            )))
        }
    };
    let class_sizes: Vec<usize> = match dimension {
        1 => {
            let n0 = pick(args.n0, cfg, "n0", 10)?;
            match schedule_kind {
                ScheduleKind::Linear => {
                    let step = pick(args.step, cfg, "step", 10)?;
                    let count = pick(args.count, cfg, "count", 20)?;
                    class_schedule_linear(n0, step, count)?
                }
                ScheduleKind::Refinement => {
                    let factor = pick(args.factor, cfg, "factor", 2)?;
                    let levels = pick(args.levels, cfg, "levels", 4)?;
                    class_schedule_refinement(n0, factor, levels)?
                }
            }
        }
        _ => {
            let grids_s = pick(args.grids, cfg, "grids", "4,6,8,10".to_string())?;
            let grids = parse_usize_list("grids", &grids_s)?;
            for &k in &grids {
                if k < 2 || k % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "2D grid sizes must be even and at least 2, got {k}"
                    )));
                }
            }
            grids.iter().map(|&k| 2 * k * k).collect()
        }
    };

    let mut all = Vec::new();
    for (ci, &n) in class_sizes.iter().enumerate() {
        let class_seed = derive_seed(seed, ci as u64);
        all.extend(generate_class_sized(
            dimension, n, records, class_seed, gamma, patch_size,
        )?);
    }
    let manifest = DatasetManifest {
        dimension,
        patch_size,
        classes: class_sizes.iter().map(|&n| (n, records)).collect(),
        schedule_kind,
        seed,
    };
    let file = fs::File::create(&out)?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, &manifest, &all)?;

    println!(
        "dataset: {} records over {} classes, dimension {}, patch size {}, gamma {}, seed {}",
        all.len(),
        class_sizes.len(),
        dimension,
        patch_size,
        gamma,
        seed
    );
    println!("classes: {:?}", class_sizes);
    println!("balance: {}", balance_diagnostic(&manifest));
    println!("wrote {}", out.display());
    Ok(())
}

fn manifest_hash(manifest: &DatasetManifest) -> u64 {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} {} {} {}",
        manifest.dimension, manifest.patch_size, manifest.schedule_kind, manifest.seed
    );
    for (n, c) in &manifest.classes {
        let _ = write!(s, " {n}:{c}");
    }
    fnv1a(s.as_bytes())
}

fn parse_arch(raw: &str) -> Result<Vec<usize>> {
    parse_usize_list("arch", raw)
}

fn cmd_train(args: TrainArgs, cfg: &ConfigMap) -> Result<()> {
    let dataset_path = pick_opt(args.dataset, cfg, "dataset")?
        .ok_or_else(|| Error::invalid("--dataset is required"))?;
    let out = pick(args.out, cfg, "out", PathBuf::from("model.bin"))?;
    let history_path = pick(args.history, cfg, "history", PathBuf::from("history.csv"))?;
    let epochs = pick(args.epochs, cfg, "epochs", 100)?;
    let batch_size = pick(args.batch_size, cfg, "batch_size", 32)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let lr = pick(args.lr, cfg, "lr", 1e-3)?;
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let alpha = pick(args.alpha, cfg, "alpha", 0.5)?;
    let beta = pick(args.beta, cfg, "beta", 0.5)?;
    let loss_cfg = LossConfig::new(alpha, beta)?;
    let seed = pick(args.seed, cfg, "seed", 0)?;
    let arch_override = pick_opt(args.arch, cfg, "arch")?;

    let init_path = pick_opt(args.init, cfg, "init")?;

    let file = fs::File::open(&dataset_path)?;
    let (manifest, records) = read_dataset(&mut BufReader::new(file))?;
    let io = manifest.patch_size * manifest.patch_size;
    let (train_set, val_set, test_set) = split(&records, manifest.seed)?;
    let model = match init_path {
        Some(p) => {
            let warm = load_model(&p)?;
            if warm.input_size() != io || warm.output_size() != io {
                return Err(Error::invalid(format!(
                    "checkpoint {} maps {} -> {}, dataset needs {io} -> {io}",
                    p.display(),
                    warm.input_size(),
                    warm.output_size()
                )));
            }
            warm
        }
        None => {
            let arch = match arch_override {
                Some(s) => parse_arch(&s)?,
                None => default_arch(manifest.dimension, manifest.patch_size),
            };
            if arch.first() != Some(&io) || arch.last() != Some(&io) {
                return Err(Error::invalid(format!(
                    "arch must start and end at {io} for patch size {}",
                    manifest.patch_size
                )));
            }
            let mut fresh = init_mlp(&arch, seed)?;
            fresh.dimension = manifest.dimension;
            fresh.patch_size = manifest.patch_size;
            fresh.manifest_hash = manifest_hash(&manifest);
            fresh
        }
    };

    let (best, history) = train(
        &model, &train_set, &val_set, &loss_cfg, epochs, batch_size, lr, seed,
    )?;
    let test_loss = mean_loss(&best, &test_set, &loss_cfg)?;

    save_model(&out, &best)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for st in &history {
        let _ = writeln!(csv, "{},{:.16e},{:.16e}", st.epoch, st.train_loss, st.val_loss);
    }
    fs::write(&history_path, csv)?;

    let best_val = history
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
    println!(
        "trained patch-size {} on {} records ({} train / {} val / {} test), {} epochs",
        manifest.patch_size,
        records.len(),
        train_set.len(),
        val_set.len(),
        test_set.len(),
        epochs
    );
    if let Some(st) = best_val {
        println!(
            "best validation loss {:.6e} at epoch {}; test loss {:.6e}",
            st.val_loss, st.epoch, test_loss
        );
    } else {
        println!("no training epochs run; checkpoint equals initialization");
    }
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

fn cmd_solve(args: SolveArgs, cfg: &ConfigMap) -> Result<()> {
    let dimension = check_dimension(pick(args.dimension, cfg, "dimension", 1)?)?;
    let size = match dimension {
        1 => pick(args.n, cfg, "n", 128)?,
        _ => pick(args.grid, cfg, "grid", 16)?,
    };
    if size == 0 {
        return Err(Error::invalid("problem size must be positive"));
    }
    let method = pick(args.method, cfg, "method", "sgmg".to_string())?;
    let levels_s = pick(args.levels, cfg, "levels", "auto".to_string())?;
    let tol = pick(args.tol, cfg, "tol", 1e-8)?;
    let max_iter = pick(args.max_iter, cfg, "max_iter", 200)?;
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    let jitter = pick(args.jitter, cfg, "jitter", 0.0)?;
    let mesh_seed = pick(args.mesh_seed, cfg, "mesh_seed", 1)?;
    let rhs_kind = pick(args.rhs, cfg, "rhs", "constant".to_string())?;
    let smoother = resolve_smoother(args.smoother, args.nu1, args.nu2, args.omega, cfg)?;
    let extend = args.extend || pick::<bool>(None, cfg, "extend", false)?;
    let models_raw = pick_opt(args.models, cfg, "models")?;
    let bank = match (method.as_str(), &models_raw) {
        ("neural", Some(raw)) => Some(load_bank(raw)?),
        ("neural", None) => {
            return Err(Error::invalid(
                "the neural method needs --models with at least one checkpoint",
            ))
        }
        _ => None,
    };

    let mesh = problem_mesh(dimension, size, jitter, mesh_seed)?;
    let n_levels = resolve_levels(&levels_s, &mesh)?;
    let (row, history) = run_solve_once(
        &method,
        &mesh,
        n_levels,
        smoother,
        bank.as_ref(),
        extend,
        &rhs_kind,
        tol,
        max_iter,
    )?;

    let report = format!("{SOLVE_CSV_HEADER}\n{}\n", solve_csv_row(&row));
    print!("{report}");
    if !row.converged {
        eprintln!(
            "warning: not converged after {} iterations (relative residual {:.3e})",
            row.iterations, row.final_relres
        );
    }
    if let Some(p) = pick_opt(args.out, cfg, "out")? {
        fs::write(&p, &report)?;
    }
    if let Some(p) = pick_opt(args.history, cfg, "history")? {
        let mut csv = String::from("iteration,relres\n");
        for (i, r) in history.iter().enumerate() {
            let _ = writeln!(csv, "{},{:.16e}", i + 1, r);
        }
        fs::write(&p, csv)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs, cfg: &ConfigMap) -> Result<()> {
    let dimension = check_dimension(pick(args.dimension, cfg, "dimension", 1)?)?;
    let default_sizes = match dimension {
        1 => "64,128,256",
        _ => "8,16,32",
    };
    let sizes_s = pick(args.sizes, cfg, "sizes", default_sizes.to_string())?;
    let sizes = parse_usize_list("sizes", &sizes_s)?;
    let levels_s = pick(args.levels, cfg, "levels", "2".to_string())?;
    let tol = pick(args.tol, cfg, "tol", 1e-8)?;
    let max_iter = pick(args.max_iter, cfg, "max_iter", 200)?;
    let jitter = pick(args.jitter, cfg, "jitter", 0.0)?;
    let mesh_seed = pick(args.mesh_seed, cfg, "mesh_seed", 1)?;
    let smoother = resolve_smoother(args.smoother, args.nu1, args.nu2, args.omega, cfg)?;
    let extend = args.extend || pick::<bool>(None, cfg, "extend", false)?;
    let models_raw = pick_opt(args.models, cfg, "models")?
        .ok_or_else(|| Error::invalid("bench needs --models with trained checkpoints"))?;
    let bank = load_bank(&models_raw)?;
    let out = pick(args.out, cfg, "out", PathBuf::from("bench.csv"))?;
    let plot_dir = pick(args.plot_dir, cfg, "plot_dir", PathBuf::from("."))?;

    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    let mut curves: HashMap<(&str, &str), Vec<(usize, f64)>> = HashMap::new();
    for &size in &sizes {
        let mesh = problem_mesh(dimension, size, jitter, mesh_seed)?;
        let n_levels = resolve_levels(&levels_s, &mesh)?;
        for method in ["sgmg", "neural"] {
            let attempt = run_solve_once(
                method,
                &mesh,
                n_levels,
                smoother,
                Some(&bank),
                extend,
                "constant",
                tol,
                max_iter,
            );
            match attempt {
                Ok((row, _)) => {
                    csv.push_str(&bench_csv_row(&row));
                    csv.push('\n');
                    let dofs = row.dofs;
                    curves
                        .entry((method, "setup_ms"))
                        .or_default()
                        .push((dofs, row.setup_ms));
                    curves
                        .entry((method, "solve_ms"))
                        .or_default()
                        .push((dofs, row.solve_ms));
                    curves
                        .entry((method, "iterations"))
                        .or_default()
                        .push((dofs, row.iterations as f64));
                }
                Err(e) => {
                    csv.push_str(&bench_error_row(method, mesh.n_nodes(), &e));
                    csv.push('\n');
                }
            }
        }
    }

    print!("{csv}");
    fs::write(&out, &csv)?;
    fs::create_dir_all(&plot_dir)?;
    for ((method, metric), points) in &curves {
        let mut data = String::new();
        for (dofs, v) in points {
            let _ = writeln!(data, "{dofs} {v:.6}");
        }
        fs::write(plot_dir.join(format!("{metric}_{method}.dat")), data)?;
    }
    println!("wrote {} and plot data under {}", out.display(), plot_dir.display());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let path = &args.path;
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"NMGMODEL") {
        let model = load_model(path)?;
        println!("model checkpoint {}", path.display());
        println!("  layers: {:?}", model.layer_sizes);
        println!("  parameters: {}", model.param_count());
        println!(
            "  dimension {}, patch size {}, seed {}, manifest hash {:016x}",
            model.dimension, model.patch_size, model.seed, model.manifest_hash
        );
        return Ok(());
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::invalid("not a model checkpoint and not a text file"))?;
    let first = text.lines().next().unwrap_or("");
    if first.starts_with("dimension=") {
        let (manifest, records) = read_dataset(&mut BufReader::new(text.as_bytes()))?;
        println!("dataset {}", path.display());
        println!(
            "  dimension {}, patch size {}, schedule {}, seed {}",
            manifest.dimension, manifest.patch_size, manifest.schedule_kind, manifest.seed
        );
        println!("  classes: {:?}", manifest.classes);
        println!("  records: {}", records.len());
        println!("  balance: {}", balance_diagnostic(&manifest));
        return Ok(());
    }
    if let Ok(mesh) = Mesh::read_text(&mut BufReader::new(text.as_bytes())) {
        println!("mesh {}", path.display());
        println!(
            "  dimension {}, {} nodes, {} elements, measure {:.6}",
            mesh.dim(),
            mesh.n_nodes(),
            mesh.n_elements(),
            mesh.measure()
        );
        let nb = mesh.boundary_flags().iter().filter(|&&b| b).count();
        println!("  boundary nodes: {nb}");
        return Ok(());
    }
    if let Ok(m) = SparseMatrix::read_text(&mut BufReader::new(text.as_bytes())) {
        println!("matrix {}", path.display());
        println!("  {} x {}, {} stored entries", m.n_rows(), m.n_cols(), m.nnz());
        println!(
            "  symmetric: {}, max |entry| {:.6e}",
            m.n_rows() == m.n_cols() && m.is_symmetric(1e-12),
            m.max_abs()
        );
        return Ok(());
    }
    Err(Error::invalid(format!(
        "unrecognized file format: {}",
        path.display()
    )))
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ConfigMap::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Solve(a) => cmd_solve(a, &cfg),
        Command::Bench(a) => cmd_bench(a, &cfg),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_precedence_flag_over_file_over_default() {
        let dir = std::env::temp_dir().join("neumg_cli_cfg_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "tol = 1e-4  # comment\nmax-iter=77\n\n# full-line comment\n").unwrap();
        let cfg = ConfigMap::load(Some(&path)).unwrap();
        assert_eq!(pick(Some(1e-6), &cfg, "tol", 1e-8).unwrap(), 1e-6);
        assert_eq!(pick::<f64>(None, &cfg, "tol", 1e-8).unwrap(), 1e-4);
        assert_eq!(pick::<usize>(None, &cfg, "max_iter", 9).unwrap(), 77);
        assert_eq!(pick::<usize>(None, &cfg, "absent", 9).unwrap(), 9);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn config_rejects_bad_lines_and_values() {
        let dir = std::env::temp_dir().join("neumg_cli_cfg_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        fs::write(&path, "just-a-word\n").unwrap();
        assert!(matches!(
            ConfigMap::load(Some(&path)),
            Err(Error::Parse { line: 1, .. })
        ));
        fs::write(&path, "tol = not-a-number\n").unwrap();
        let cfg = ConfigMap::load(Some(&path)).unwrap();
        assert!(pick::<f64>(None, &cfg, "tol", 1e-8).is_err());
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn auto_levels_targets_small_coarsest() {
        let mesh = problem_mesh(1, 4096, 0.0, 0).unwrap();
        let levels = auto_levels(&mesh);
        assert!(levels >= 4);
        let seq = mesh_sequence(&mesh, levels).unwrap();
        assert!(seq.last().unwrap().mesh.n_nodes() <= AUTO_COARSEST_MAX);
        // small meshes still get two levels
        assert_eq!(auto_levels(&problem_mesh(1, 8, 0.0, 0).unwrap()), 2);
    }

    #[test]
    fn rhs_matches_lumped_mass_and_zero() {
        let mesh = problem_mesh(1, 4, 0.0, 0).unwrap();
        let b = rhs_vector(&mesh, "constant").unwrap();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[4], 0.0);
        for i in 1..4 {
            assert!((b[i] - 0.25).abs() < 1e-15);
        }
        assert!(rhs_vector(&mesh, "zero").unwrap().iter().all(|&v| v == 0.0));
        assert!(rhs_vector(&mesh, "bogus").is_err());
    }

    #[test]
    fn bench_error_rows_stay_single_line_csv() {
        let row = bench_error_row("neural", 100, &Error::MissingModel { patch_size: 7 });
        assert_eq!(row.lines().count(), 1);
        assert_eq!(row.split(',').count(), BENCH_CSV_HEADER.split(',').count());
    }

    #[test]
    fn smoother_and_level_validation() {
        let cfg = ConfigMap::default();
        assert!(resolve_smoother(Some("bogus".into()), None, None, None, &cfg).is_err());
        assert!(resolve_smoother(None, None, None, Some(1.5), &cfg).is_err());
        let sm = resolve_smoother(None, None, None, None, &cfg).unwrap();
        assert_eq!(sm, SmootherConfig::default());
        let mesh = problem_mesh(1, 16, 0.0, 0).unwrap();
        assert!(resolve_levels("1", &mesh).is_err());
        assert_eq!(resolve_levels("3", &mesh).unwrap(), 3);
    }
}
