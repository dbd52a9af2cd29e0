//! From-scratch multilayer perceptron mapping patch features (mass-matrix
//! windows) to coupling-matrix windows, trained with Adam on a loss that mixes
//! raw-entry MSE with per-row constant-preservation penalties on the induced
//! projection rows: each predicted B row, divided by the member's lumped mass,
//! should match the true projection row and sum to one.
//!
//! Hidden activation is leaky ReLU (slope 0.01), identity on the output.

use crate::dataset::PatchRecord;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LEAK: f64 = 0.01;

fn act(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAK * x
    }
}

fn act_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAK
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<LossConfig> {
        if !(0.0 < alpha && alpha < 1.0 && 0.0 < beta && beta < 1.0) {
            return Err(Error::invalid(format!(
                "loss weights alpha = {alpha}, beta = {beta} must lie in (0, 1)"
            )));
        }
        Ok(LossConfig { alpha, beta })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

/// Weights are row-major (fan_out × fan_in) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MLPModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub dimension: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub manifest_hash: u64,
}

/// Default architecture per family: in/out width is patch_size², two hidden
/// layers of 64 in 1D, three of 256 in 2D.
pub fn default_arch(dimension: usize, patch_size: usize) -> Vec<usize> {
    let io = patch_size * patch_size;
    match dimension {
        1 => vec![io, 64, 64, io],
        _ => vec![io, 256, 256, 256, io],
    }
}

pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MLPModel> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid(
            "need at least two positive layer sizes".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        weights.push((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MLPModel {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        dimension: 0,
        patch_size: 0,
        seed,
        manifest_hash: 0,
    })
}

impl MLPModel {
    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Pre-activations and activations per layer; activations[0] is the input.
    pub fn forward_cache(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.n_layers();
        let mut zs = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let a = &acts[l];
            let mut z = self.biases[l].clone();
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                z[o] += row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
            }
            let out = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| act(v)).collect()
            };
            zs.push(z);
            acts.push(out);
        }
        (zs, acts)
    }
}

pub fn forward(model: &MLPModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_size() {
        return Err(Error::invalid(format!(
            "input length {} does not match model input size {}",
            x.len(),
            model.input_size()
        )));
    }
    let (_, acts) = model.forward_cache(x);
    Ok(acts.last().unwrap().clone())
}

/// Per-row constant-preservation penalty on projection rows (already divided
/// by lumped mass): p = (1/alpha)·|Σ q_pred − 1| + (1/beta)·‖q_pred − q_true‖₂.
pub fn penalty(q_pred_row: &[f64], q_true_row: &[f64], cfg: &LossConfig) -> f64 {
    let s: f64 = q_pred_row.iter().sum();
    let dist: f64 = q_pred_row
        .iter()
        .zip(q_true_row)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    (s - 1.0).abs() / cfg.alpha + dist / cfg.beta
}

/// Regularized record loss: MSE over raw B entries plus the row penalties of
/// the induced Q rows (each member's B-row slice divided by its lumped mass).
pub fn loss(y_true: &[f64], y_pred: &[f64], aux_lumped: &[f64], cfg: &LossConfig) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.len() % aux_lumped.len() != 0 {
        return Err(Error::invalid(
            "prediction, target and aux lengths are inconsistent".to_string(),
        ));
    }
    let m = y_true.len();
    let sc = m / aux_lumped.len();
    let mse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (p - t) * (p - t))
        .sum::<f64>()
        / m as f64;
    let mut p_total = 0.0;
    for (k, &a) in aux_lumped.iter().enumerate() {
        if !(a > 0.0) {
            return Err(Error::InvalidMass(format!(
                "lumped mass of patch member {k} is {a}, expected positive"
            )));
        }
        let qp: Vec<f64> = y_pred[k * sc..(k + 1) * sc].iter().map(|v| v / a).collect();
        let qt: Vec<f64> = y_true[k * sc..(k + 1) * sc].iter().map(|v| v / a).collect();
        p_total += penalty(&qp, &qt, cfg);
    }
    Ok(mse + p_total)
}

/// Gradient of the record loss with respect to the prediction vector.
/// At the two nondifferentiable points (row sum exactly 1, zero row distance)
/// the subgradient 0 is used.
fn loss_grad_wrt_pred(
    y_true: &[f64],
    y_pred: &[f64],
    aux_lumped: &[f64],
    cfg: &LossConfig,
    include_penalty: bool,
) -> Vec<f64> {
    let m = y_true.len();
    let sc = m / aux_lumped.len();
    let mut g: Vec<f64> = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| 2.0 * (p - t) / m as f64)
        .collect();
    if !include_penalty {
        return g;
    }
    for (k, &a) in aux_lumped.iter().enumerate() {
        let slice = k * sc..(k + 1) * sc;
        let s: f64 = y_pred[slice.clone()].iter().map(|v| v / a).sum();
        let sum_sign = if s > 1.0 {
            1.0
        } else if s < 1.0 {
            -1.0
        } else {
            0.0
        };
        let d: Vec<f64> = y_pred[slice.clone()]
            .iter()
            .zip(&y_true[slice.clone()])
            .map(|(p, t)| (p - t) / a)
            .collect();
        let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, gi) in g[slice].iter_mut().enumerate() {
            *gi += sum_sign / (cfg.alpha * a);
            if nd > 0.0 {
                *gi += d[j] / (cfg.beta * nd * a);
            }
        }
    }
    g
}

/// Gradients of the mean batch loss, shaped like the model parameters.
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn backward_impl(
    model: &MLPModel,
    batch: &[&PatchRecord],
    cfg: &LossConfig,
    include_penalty: bool,
) -> Result<Gradients> {
    let n_layers = model.n_layers();
    let mut gw: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    for rec in batch {
        if rec.features.len() != model.input_size() || rec.target.len() != model.output_size() {
            return Err(Error::WrongFamily {
                expected: model.input_size(),
                got: rec.features.len(),
            });
        }
        let (zs, acts) = model.forward_cache(&rec.features);
        let y_pred = acts.last().unwrap();
        let mut delta =
            loss_grad_wrt_pred(&rec.target, y_pred, &rec.aux_lumped, cfg, include_penalty);
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (model.layer_sizes[l], model.layer_sizes[l + 1]);
            let a = &acts[l];
            for o in 0..fan_out {
                gb[l][o] += delta[o];
                let row = &mut gw[l][o * fan_in..(o + 1) * fan_in];
                for (gi, &ai) in row.iter_mut().zip(a) {
                    *gi += delta[o] * ai;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let row = &model.weights[l][o * fan_in..(o + 1) * fan_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                for (p, &z) in prev.iter_mut().zip(&zs[l - 1]) {
                    *p *= act_grad(z);
                }
                delta = prev;
            }
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    for v in gw.iter_mut().chain(gb.iter_mut()) {
        for x in v {
            *x *= scale;
        }
    }
    Ok(Gradients {
        weights: gw,
        biases: gb,
    })
}

/// Exact reverse-mode gradients of the mean Eq-style loss over a batch.
pub fn backward(model: &MLPModel, batch: &[&PatchRecord], cfg: &LossConfig) -> Result<Gradients> {
    backward_impl(model, batch, cfg, true)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &MLPModel) -> AdamState {
        AdamState {
            step: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn with_lr(mut self, lr: f64) -> AdamState {
        self.lr = lr;
        self
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(state: &mut AdamState, model: &mut MLPModel, grads: &Gradients) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let update = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..params.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    };
    for l in 0..model.weights.len() {
        update(
            &mut model.weights[l],
            &grads.weights[l],
            &mut state.m_w[l],
            &mut state.v_w[l],
        );
        update(
            &mut model.biases[l],
            &grads.biases[l],
            &mut state.m_b[l],
            &mut state.v_b[l],
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn mean_loss(model: &MLPModel, records: &[PatchRecord], cfg: &LossConfig) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in records {
        let y = forward(model, &r.features)?;
        total += loss(&r.target, &y, &r.aux_lumped, cfg)?;
    }
    Ok(total / records.len() as f64)
}

/// Mini-batch Adam training with deterministic per-epoch shuffling; returns
/// the parameters of the best validation epoch and the full loss history.
pub fn train(
    model: &MLPModel,
    train_set: &[PatchRecord],
    val_set: &[PatchRecord],
    cfg: &LossConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(MLPModel, Vec<EpochStats>)> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut current = model.clone();
    let mut state = AdamState::new(&current).with_lr(lr);
    let mut history = Vec::with_capacity(epochs);
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    for epoch in 0..epochs {
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            let batch: Vec<&PatchRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let grads = backward(&current, &batch, cfg)?;
            adam_step(&mut state, &mut current, &grads);
        }
        let train_loss = mean_loss(&current, train_set, cfg)?;
        let val_loss = mean_loss(&current, val_set, cfg)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                msg: format!("loss diverged (train {train_loss}, val {val_loss})"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let score = if val_set.is_empty() { train_loss } else { val_loss };
        if score < best_val {
            best_val = score;
            best = current.clone();
        }
    }
    if epochs == 0 {
        best = current;
    }
    Ok((best, history))
}

/// Predicted B window for one feature vector, as a flat row-major block.
pub fn predict_b_rows(model: &MLPModel, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != model.input_size() {
        return Err(Error::WrongFamily {
            expected: model.input_size(),
            got: features.len(),
        });
    }
    forward(model, features)
}

const MAGIC: &[u8; 8] = b"NMGMODEL";
const VERSION: u32 = 1;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn model_to_bytes(model: &MLPModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(model.patch_size as u32).to_le_bytes());
    out.extend_from_slice(&(model.layer_sizes.len() as u32).to_le_bytes());
    for &s in &model.layer_sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&model.manifest_hash.to_le_bytes());
    for l in 0..model.weights.len() {
        for &w in &model.weights[l] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &model.biases[l] {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MLPModel> {
    let corrupt = |msg: &str| Error::CorruptModel(msg.to_string());
    if bytes.len() < MAGIC.len() + 8 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::CorruptModel("truncated model file".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    if read_u32(&mut pos)? != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let dimension = read_u32(&mut pos)? as usize;
    let patch_size = read_u32(&mut pos)? as usize;
    let n_sizes = read_u32(&mut pos)? as usize;
    if n_sizes < 2 || n_sizes > 64 {
        return Err(corrupt("implausible layer count"));
    }
    let mut layer_sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        layer_sizes.push(read_u64(&mut pos)? as usize);
    }
    if layer_sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
        return Err(corrupt("implausible layer size"));
    }
    let seed = read_u64(&mut pos)?;
    let manifest_hash = read_u64(&mut pos)?;
    let read_f64 = |pos: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let mut wl = Vec::with_capacity(w[0] * w[1]);
        for _ in 0..w[0] * w[1] {
            wl.push(read_f64(&mut pos)?);
        }
        let mut bl = Vec::with_capacity(w[1]);
        for _ in 0..w[1] {
            bl.push(read_f64(&mut pos)?);
        }
        weights.push(wl);
        biases.push(bl);
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes after parameters"));
    }
    let model = MLPModel {
        layer_sizes,
        weights,
        biases,
        dimension,
        patch_size,
        seed,
        manifest_hash,
    };
    if !model.all_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(model)
}

pub fn save_model(path: &std::path::Path, model: &MLPModel) -> Result<()> {
    Ok(std::fs::write(path, model_to_bytes(model))?)
}

pub fn load_model(path: &std::path::Path) -> Result<MLPModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn toy_record(rng: &mut ChaCha8Rng, input: usize, output: usize, patch: usize) -> PatchRecord {
        PatchRecord {
            features: (0..input).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            target: (0..output).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            class_id: 0,
            patch_size: patch,
            aux_lumped: (0..patch).map(|_| rng.gen_range(0.8..1.6)).collect(),
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_mlp(&[9, 32, 32, 9], 5).unwrap();
        let b = init_mlp(&[9, 32, 32, 9], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.iter().all(|&x| x == 0.0)));
        assert!(a.all_finite());
        assert_ne!(a, init_mlp(&[9, 32, 32, 9], 6).unwrap());
    }

    #[test]
    fn param_count_follows_shape_arithmetic() {
        // per layer: fan_in·fan_out weights plus fan_out biases
        let m = init_mlp(&[9, 32, 32, 6], 0).unwrap();
        assert_eq!(m.param_count(), 9 * 32 + 32 + 32 * 32 + 32 + 32 * 6 + 6);
        assert_eq!(m.param_count(), 1574);
        assert!(init_mlp(&[5], 0).is_err());
        assert!(init_mlp(&[5, 0, 3], 0).is_err());
    }

    #[test]
    fn forward_zero_weights_outputs_bias() {
        let mut m = init_mlp(&[3, 4, 2], 1).unwrap();
        for w in &mut m.weights {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        m.biases[1] = vec![0.5, -1.5];
        let y = forward(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.5]);
        assert!(forward(&m, &[1.0]).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let mut m = init_mlp(&[2, 2, 1], 0).unwrap();
        m.weights[0] = vec![1.0, 2.0, -3.0, 0.5]; // rows (1,2) and (-3,0.5)
        m.biases[0] = vec![0.1, 0.2];
        m.weights[1] = vec![2.0, -1.0];
        m.biases[1] = vec![0.25];
        // x = (1, -1): z1 = 1-2+0.1 = -0.9 -> leaky -0.009; z2 = -3-0.5+0.2 = -3.3 -> -0.033
        // out = 2·(-0.009) + (-1)·(-0.033) + 0.25 = 0.265
        let y = forward(&m, &[1.0, -1.0]).unwrap();
        close(y[0], 0.265, 1e-15);
    }

    #[test]
    fn penalty_matches_hand_values() {
        let cfg = LossConfig::new(0.5, 0.5).unwrap();
        close(penalty(&[0.5, 0.5], &[0.5, 0.5], &cfg), 0.0, 1e-15);
        close(
            penalty(&[1.0, 0.0], &[0.5, 0.5], &cfg),
            2.0 * 0.5f64.sqrt(),
            1e-12,
        );
        // joint permutation invariance
        let a = penalty(&[0.3, 0.9, -0.1], &[0.2, 0.5, 0.3], &cfg);
        let b = penalty(&[0.9, -0.1, 0.3], &[0.5, 0.3, 0.2], &cfg);
        close(a, b, 1e-15);
    }

    #[test]
    fn loss_matches_hand_values() {
        let cfg = LossConfig::new(0.5, 0.5).unwrap();
        // two members, one coarse column each; second row sums to 0.9
        let y = vec![1.0, 0.9];
        let aux = vec![1.0, 1.0];
        close(loss(&y, &y, &aux, &cfg).unwrap(), 2.0 * 0.1, 1e-12);
        // perfect prediction with unit row sums
        let y = vec![0.5, 0.5, 1.0, 0.0];
        let aux = vec![1.0, 1.0];
        close(loss(&y, &y, &aux, &cfg).unwrap(), 0.0, 1e-15);
        assert!(loss(&y, &y, &[1.0, -1.0], &cfg).is_err());
        assert!(LossConfig::new(0.0, 0.5).is_err());
        assert!(LossConfig::new(0.5, 1.0).is_err());
    }

    #[test]
    fn mse_gradient_alone_matches_analytic_form() {
        // with the penalty terms suppressed, the output-layer bias gradient is
        // exactly 2(y_pred − y_true)/m
        let mut m = init_mlp(&[2, 2], 3).unwrap();
        m.weights[0] = vec![0.0; 4];
        m.biases[0] = vec![0.3, -0.2];
        let rec = PatchRecord {
            features: vec![0.0, 0.0],
            target: vec![0.1, 0.1],
            class_id: 0,
            patch_size: 1,
            aux_lumped: vec![1.0],
        };
        let cfg = LossConfig::default();
        let g = backward_impl(&m, &[&rec], &cfg, false).unwrap();
        close(g.biases[0][0], 2.0 * (0.3 - 0.1) / 2.0, 1e-14);
        close(g.biases[0][1], 2.0 * (-0.2 - 0.1) / 2.0, 1e-14);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = LossConfig::new(0.4, 0.6).unwrap();
        let mut checked = 0usize;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = init_mlp(&[4, 6, 4], seed.wrapping_add(100)).unwrap();
            let recs: Vec<PatchRecord> =
                (0..3).map(|_| toy_record(&mut rng, 4, 4, 2)).collect();
            // keep away from the activation kinks so the derivative exists
            let kink_free = recs.iter().all(|r| {
                let (zs, _) = model.forward_cache(&r.features);
                zs.iter().all(|z| z.iter().all(|&v| v.abs() > 1e-4))
            });
            if !kink_free {
                continue;
            }
            let refs: Vec<&PatchRecord> = recs.iter().collect();
            let grads = backward(&model, &refs, &cfg).unwrap();
            let batch_loss = |m: &MLPModel| -> f64 {
                refs.iter()
                    .map(|r| {
                        let y = forward(m, &r.features).unwrap();
                        loss(&r.target, &y, &r.aux_lumped, &cfg).unwrap()
                    })
                    .sum::<f64>()
                    / refs.len() as f64
            };
            let h = 1e-6;
            // the central difference itself carries cancellation noise of
            // order eps·L/h; below that level it cannot resolve a gradient
            let fd_noise = 8.0 * f64::EPSILON * batch_loss(&model) / h;
            let mut strict = 0usize;
            let mut seed_checked = 0usize;
            let mut check = |g: f64, fd: f64, what: String| {
                let rel = (g - fd).abs() / (g.abs() + 1e-8);
                if rel < 1e-5 {
                    strict += 1;
                } else {
                    assert!(
                        (g - fd).abs() < fd_noise,
                        "{what}: analytic {g} vs fd {fd} (noise floor {fd_noise:.2e})"
                    );
                }
                seed_checked += 1;
            };
            for l in 0..model.weights.len() {
                for i in 0..model.weights[l].len() {
                    let mut mp = model.clone();
                    mp.weights[l][i] += h;
                    let mut mm = model.clone();
                    mm.weights[l][i] -= h;
                    let fd = (batch_loss(&mp) - batch_loss(&mm)) / (2.0 * h);
                    check(grads.weights[l][i], fd, format!("seed {seed} W[{l}][{i}]"));
                }
                for i in 0..model.biases[l].len() {
                    let mut mp = model.clone();
                    mp.biases[l][i] += h;
                    let mut mm = model.clone();
                    mm.biases[l][i] -= h;
                    let fd = (batch_loss(&mp) - batch_loss(&mm)) / (2.0 * h);
                    check(grads.biases[l][i], fd, format!("seed {seed} b[{l}][{i}]"));
                }
            }
            assert!(
                strict * 10 >= seed_checked * 9,
                "seed {seed}: only {strict} of {seed_checked} parameters beat the strict tolerance"
            );
            checked += seed_checked;
        }
        assert!(checked > 500, "only {checked} parameters checked");
    }

    #[test]
    fn zero_loss_batch_has_zero_gradients() {
        // target equals the prediction and aux equals each (single-column)
        // row value, so every q row is exactly 1.0 and both penalty terms sit
        // at their nondifferentiable points, where the subgradient is 0
        let model = init_mlp(&[2, 3, 2], 9).unwrap();
        let mut features = vec![0.4, -0.7];
        let y = loop {
            let y = forward(&model, &features).unwrap();
            if y.iter().all(|&v| v > 0.0) {
                break y;
            }
            features[0] += 0.3;
            features[1] += 0.1;
        };
        let rec = PatchRecord {
            features,
            target: y.clone(),
            class_id: 0,
            patch_size: 2,
            aux_lumped: y,
        };
        let cfg = LossConfig::default();
        let l = loss(&rec.target, &rec.target, &rec.aux_lumped, &cfg).unwrap();
        close(l, 0.0, 1e-15);
        let g = backward(&model, &[&rec], &cfg).unwrap();
        for v in g.weights.iter().chain(&g.biases) {
            for &x in v {
                close(x, 0.0, 1e-15);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut model = init_mlp(&[3, 4, 2], 2).unwrap();
        let before = model.clone();
        let grads = Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut st = AdamState::new(&model);
        adam_step(&mut st, &mut model, &grads);
        assert_eq!(model, before);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut model = init_mlp(&[1, 1], 2).unwrap();
        let w0 = model.weights[0][0];
        let grads = Gradients {
            weights: vec![vec![3.7]],
            biases: vec![vec![-0.9]],
        };
        let mut st = AdamState::new(&model);
        adam_step(&mut st, &mut model, &grads);
        // bias-corrected first step is lr·g/(|g| + eps·scale) ≈ lr·sign(g)
        close(model.weights[0][0], w0 - 1e-3, 1e-9);
        close(model.biases[0][0], 0.0 + 1e-3, 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut recs = Vec::new();
        // learnable synthetic map: target row = half the feature, aux = 1
        for _ in 0..40 {
            let f: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
            let t: Vec<f64> = f.iter().map(|v| 0.5 * v).collect();
            recs.push(PatchRecord {
                features: f,
                target: t,
                class_id: 1,
                patch_size: 2,
                aux_lumped: vec![1.0, 1.0],
            });
        }
        let (train_set, val_set) = recs.split_at(32);
        let model = init_mlp(&[4, 16, 4], 7).unwrap();
        let cfg = LossConfig::default();
        let (m1, h1) = train(&model, train_set, val_set, &cfg, 60, 8, 1e-2, 5).unwrap();
        let (m2, h2) = train(&model, train_set, val_set, &cfg, 60, 8, 1e-2, 5).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 60);
        let first = h1.first().unwrap().train_loss;
        let last = h1.last().unwrap().train_loss;
        assert!(
            last < 0.5 * first,
            "training did not reduce loss: {first} -> {last}"
        );
        // zero epochs: unchanged model, empty history
        let (m0, h0) = train(&model, train_set, val_set, &cfg, 0, 8, 1e-2, 5).unwrap();
        assert_eq!(m0, model);
        assert!(h0.is_empty());
    }

    #[test]
    fn smoothed_training_loss_is_nonincreasing() {
        let recs = crate::dataset::generate_class(1, 10, 60, 21).unwrap();
        let (train_set, val_set, _) = crate::dataset::split(&recs, 1).unwrap();
        let model = init_mlp(&default_arch(1, 3), 3).unwrap();
        let cfg = LossConfig::default();
        let (_, hist) = train(&model, &train_set, &val_set, &cfg, 60, 16, 5e-4, 9).unwrap();
        let window = 5;
        let smoothed: Vec<f64> = hist
            .windows(window)
            .map(|w| w.iter().map(|e| e.train_loss).sum::<f64>() / window as f64)
            .collect();
        let violations = smoothed
            .windows(2)
            .filter(|w| w[1] > w[0] * 1.02)
            .count();
        assert!(
            violations <= smoothed.len() / 10,
            "smoothed loss rose too often: {violations} of {}",
            smoothed.len()
        );
    }

    #[test]
    fn predict_checks_family() {
        let model = init_mlp(&[9, 8, 9], 0).unwrap();
        assert!(matches!(
            predict_b_rows(&model, &[0.0; 4]),
            Err(Error::WrongFamily { expected: 9, got: 4 })
        ));
        let a = predict_b_rows(&model, &[0.1; 9]).unwrap();
        let b = predict_b_rows(&model, &[0.1; 9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let mut model = init_mlp(&[9, 16, 9], 12).unwrap();
        model.dimension = 1;
        model.patch_size = 3;
        model.manifest_hash = 0xdeadbeef;
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);

        // flip one parameter byte: checksum must catch it
        let mut bad = bytes.clone();
        let k = bytes.len() / 2;
        bad[k] ^= 0xff;
        assert!(matches!(
            model_from_bytes(&bad),
            Err(Error::CorruptModel(_))
        ));

        // tamper with the shape header and fix the checksum: shape/parameter
        // length disagreement must still be rejected
        let mut tampered = bytes[..bytes.len() - 8].to_vec();
        tampered[20] = 7;
        let sum = super::fnv1a(&tampered);
        tampered.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&tampered),
            Err(Error::CorruptModel(_))
        ));
    }
}
